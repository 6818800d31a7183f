// Acceptance gate: one PASS/FAIL line per criterion, then a summary.
//
// The desk-scale criteria train the full pipeline from scratch in --workspace,
// so a complete run takes most of an hour on one core. --skip-desk runs only
// the property criteria (1-4 and 9).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "advae/errors.hpp"
#include "advae/pipeline.hpp"

namespace fs = std::filesystem;
using namespace advae;

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Gate {
  std::map<int, bool> results;

  void report(int id, bool ok, const std::string& detail) {
    results[id] = ok;
    std::printf("criterion %d: %s  %s\n", id, ok ? "PASS" : "FAIL", detail.c_str());
    std::fflush(stdout);
  }
  void note(const std::string& text) {
    std::printf("    %s\n", text.c_str());
    std::fflush(stdout);
  }
};

std::string strf(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

// --- 1: closed-form KL against a Monte Carlo estimate -------------------------

// log N(z; m, exp(lv)) summed over dimensions, written out from the density.
// Diagonal Gaussian density with its normalizer and inverse variances computed once.
struct DiagNormal {
  std::vector<double> mean, inv_var;
  double log_norm = 0.0;

  DiagNormal(const std::vector<double>& m, const std::vector<double>& lv) : mean(m) {
    for (double v : lv) {
      inv_var.push_back(std::exp(-v));
      log_norm += -0.5 * std::log(2.0 * M_PI * std::exp(v));
    }
  }
  double log_density(const std::vector<double>& z) const {
    double q = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) q += (z[i] - mean[i]) * (z[i] - mean[i]) * inv_var[i];
    return log_norm - 0.5 * q;
  }
};

void criterion_kl(Gate& g) {
  constexpr std::size_t draws = 1000, samples = 200000, dim = 4;
  const auto t0 = Clock::now();
  Rng rng(derive_seed(1, {fnv1a("kl")}));
  const std::vector<double> zeros(dim, 0.0);
  double worst = 0.0;
  std::vector<double> z(dim);
  for (std::size_t k = 0; k < draws; ++k) {
    LatentParams p{std::vector<double>(dim), std::vector<double>(dim)};
    for (std::size_t i = 0; i < dim; ++i) {
      p.mu[i] = rng.normal();
      p.log_var[i] = rng.uniform(-2.0, 2.0);
    }
    const DiagNormal q(p.mu, p.log_var), prior(zeros, zeros);
    std::vector<double> sd(dim);
    for (std::size_t i = 0; i < dim; ++i) sd[i] = std::exp(0.5 * p.log_var[i]);
    double mc = 0.0;
    for (std::size_t s = 0; s < samples; ++s) {
      for (std::size_t i = 0; i < dim; ++i) z[i] = p.mu[i] + sd[i] * rng.normal();
      mc += q.log_density(z) - prior.log_density(z);
    }
    mc /= static_cast<double>(samples);
    worst = std::max(worst, std::abs(kl_loss(p) - mc) / std::abs(mc));
  }
  const double at_origin = kl_loss({std::vector<double>(dim, 0.0), std::vector<double>(dim, 0.0)});
  const double secs = since(t0);
  g.report(1, worst <= 0.02 && at_origin == 0.0 && secs < 60.0,
           strf("max relative error %.4f over %zu draws (<= 0.02), KL(0,0) = %g (== 0), %.1f s (< 60)", worst, draws,
               at_origin, secs));
}

// --- 2: reparameterization moments --------------------------------------------

void criterion_reparam(Gate& g) {
  constexpr std::size_t draws = 100000;
  const LatentParams p{{1.5, -0.7, 3.0, 0.4}, {0.4, -1.0, 1.2, 0.0}};
  const std::size_t d = p.mu.size();
  Rng rng(derive_seed(1, {fnv1a("reparam")}));
  std::vector<double> sum(d, 0.0), sq(d, 0.0), eps(d);
  for (std::size_t n = 0; n < draws; ++n) {
    for (auto& e : eps) e = rng.normal();
    const auto s = reparameterize(p, eps);
    for (std::size_t i = 0; i < d; ++i) {
      sum[i] += s.z[i];
      sq[i] += s.z[i] * s.z[i];
    }
  }
  double mean_err = 0.0, var_err = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    const double mean = sum[i] / draws;
    const double var = sq[i] / draws - mean * mean;
    mean_err = std::max(mean_err, std::abs(mean - p.mu[i]) / std::abs(p.mu[i]));
    var_err = std::max(var_err, std::abs(var - std::exp(p.log_var[i])) / std::exp(p.log_var[i]));
  }
  const auto at_zero = reparameterize(p, std::vector<double>(d, 0.0));
  const bool exact = at_zero.z == p.mu;
  g.report(2, mean_err <= 0.02 && var_err <= 0.02 && exact,
           strf("mean rel err %.4f, variance rel err %.4f (<= 0.02), eps = 0 gives mu exactly: %s", mean_err, var_err,
               exact ? "yes" : "no"));
}

// --- 3: gradient check ----------------------------------------------------------

void criterion_gradcheck(Gate& g) {
  const auto t0 = Clock::now();
  const auto report = gradient_check();
  const double secs = since(t0);
  std::string worst;
  for (const auto* c : {"reconstruction", "conditional", "kl", "composite", "kl_closed_form"}) {
    worst += strf("%s %.2e ", c, report.max_error(c));
  }
  g.report(3, report.passed() && secs < 300.0,
           strf("%s(< 1e-2, KL closed form < 1e-4), %.1f s (< 300)", worst.c_str(), secs));
}

// --- 4: single-batch overfit --------------------------------------------------

void criterion_overfit(Gate& g, const RunConfig& desk, const Workspace& ws) {
  const auto all = read_manifest(ws.labeled_manifest());
  DatasetManifest m = all;
  m.records.clear();
  for (std::size_t i = 0; i < 8; ++i) m.records.push_back(all.records[i * (all.records.size() / 8)]);
  const auto images = load_images(m);
  const auto ca = load_classifier(ws.attribute_classifier());
  const auto ce = load_classifier(ws.expression_classifier());
  const auto phi = FeatureExtractor::from_classifier(ca);

  TrainingConfig cfg = desk.training;
  cfg.batch_size = 8;
  cfg.epochs = 300;
  cfg.augment.enabled = false;
  cfg.counterfactual_fraction = 0.0;  // one fixed batch, every face reconstructed at every step
  const auto t0 = Clock::now();
  CvaeTrainer t(cfg, m, images, {&ca, &ce, &phi});
  t.train();
  const double secs = since(t0);
  const double first = t.history().front().reconstruction, last = t.history().back().reconstruction;
  g.report(4, t.optimizer_step() == 300 && last < 0.1 * first && secs < 300.0,
           strf("reconstruction %.5f -> %.5f after %llu steps (ratio %.3f < 0.1), %.1f s (< 300)", first, last,
               static_cast<unsigned long long>(t.optimizer_step()), last / first, secs));
}

// --- 5: desk-scale run -----------------------------------------------------------

double reconstruction_mae(const Cvae& model, const DatasetManifest& m, const std::vector<ImageTensor>& images) {
  double err = 0.0;
  std::size_t n = 0;
  constexpr std::size_t chunk = 50;
  for (std::size_t start = 0; start < images.size(); start += chunk) {
    std::vector<const ImageTensor*> ptr;
    std::vector<ConditionalVector> ys;
    for (std::size_t i = start; i < std::min(images.size(), start + chunk); ++i) {
      ptr.push_back(&images[i]);
      ys.push_back(m.records[i].conditioning());
    }
    const auto rec = model.decode_batch(model.embed_mean_batch(ptr, ys));
    for (std::size_t k = 0; k < rec.size(); ++k) {
      for (std::size_t j = 0; j < rec[k].numel(); ++j) err += std::abs(rec[k].values()[j] - ptr[k]->values()[j]);
      n += rec[k].numel();
    }
  }
  return err / static_cast<double>(n);
}

// --- 6 and 7: oracles trained on ground truth ------------------------------------

struct Oracles {
  Classifier attribute, expression, topic;
};

Oracles train_oracles(const DatasetManifest& m, const std::vector<ImageTensor>& images, const RunConfig& desk) {
  // Same recipe as the pipeline classifiers, separate seeds.
  ClassifierTrainConfig c = desk.classifiers;
  c.seed = derive_seed(desk.seed, {fnv1a("oracle"), fnv1a("attribute")});
  auto a = train_attribute_classifier(m, images, c);
  c.seed = derive_seed(desk.seed, {fnv1a("oracle"), fnv1a("expression")});
  auto e = train_expression_classifier(m, images, c);
  ClassifierTrainConfig tc = desk.eval.topic_classifier;
  tc.seed = derive_seed(desk.seed, {fnv1a("oracle"), fnv1a("topic")});
  std::vector<const ImageTensor*> ptr;
  std::vector<std::size_t> labels;
  for (std::size_t i = 0; i < images.size(); ++i) {
    ptr.push_back(&images[i]);
    labels.push_back(m.topic_index(m.records[i].topic));
  }
  auto t = train_topic_classifier(ptr, labels, m.config.topics.size(), tc);
  return {std::move(a.model), std::move(e.model), std::move(t.model)};
}

// First `per_topic` records of each topic.
DatasetManifest first_per_topic(const DatasetManifest& m, std::size_t per_topic) {
  DatasetManifest out = m;
  out.records.clear();
  std::map<std::string, std::size_t> taken;
  for (const auto& r : m.records) {
    if (taken[r.topic]++ < per_topic) out.records.push_back(r);
  }
  return out;
}

bool topic_vectors_match_brute_force(const Cvae& model, const DatasetManifest& m,
                                     const std::vector<ImageTensor>& images, const TopicVectorSet& set,
                                     double& worst) {
  // One face at a time, then a plain per-topic average and difference.
  const std::size_t n = model.config().embedding_dim();
  std::map<std::string, std::vector<double>> sum;
  std::map<std::string, double> count;
  std::vector<double> total(n, 0.0);
  const std::vector<double> eps(model.config().latent_dim, 0.0);
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto q = model.embed(images[i], m.records[i].conditioning(), eps).flatten();
    auto& s = sum[m.records[i].topic];
    s.resize(n, 0.0);
    for (std::size_t k = 0; k < n; ++k) {
      s[k] += q[k];
      total[k] += q[k];
    }
    count[m.records[i].topic] += 1.0;
  }
  worst = 0.0;
  for (const auto& t : set.order) {
    const auto& v = set.at(t);
    std::vector<double> got = v.conditional;
    got.insert(got.end(), v.latent.begin(), v.latent.end());
    const double others = static_cast<double>(images.size()) - count[t];
    for (std::size_t k = 0; k < n; ++k) {
      const double expected = sum[t][k] / count[t] - (total[k] - sum[t][k]) / others;
      worst = std::max(worst, std::abs(got[k] - expected));
    }
  }
  return worst <= 1e-6;
}

// --- 9: determinism and persistence -------------------------------------------

void criterion_determinism(Gate& g, const fs::path& dir) {
  DatasetConfig dc;
  dc.topics = first_topics(3);
  dc.per_topic = 8;
  dc.image_size = 32;
  dc.seed = 91;
  const auto m = build_dataset(dc, dir / "det-data");
  const auto images = load_images(m);
  ClassifierConfig cc;
  cc.input_size = 32;
  cc.base_channels = 4;
  cc.blocks = 3;
  cc.kind = ClassifierKind::attribute;
  cc.classes = m.config.layout.attributes;
  const Classifier ca(cc, 5);
  cc.kind = ClassifierKind::expression;
  cc.classes = m.config.layout.expressions;
  const Classifier ce(cc, 6);
  const auto phi = FeatureExtractor::from_classifier(ca, 2);
  const LossNets nets{&ca, &ce, &phi};

  TrainingConfig t;
  t.epochs = 4;
  t.batch_size = 8;
  t.master_seed = 17;
  t.model.image_size = 32;
  t.model.latent_dim = 8;
  t.model.base_channels = 8;
  t.model.blocks = 3;
  t.augment.train_size = 32;

  CvaeTrainer a(t, m, images, nets), b(t, m, images, nets);
  a.train();
  b.train();
  bool same = a.history().size() == 4;
  for (std::size_t e = 0; e < a.history().size(); ++e) {
    same = same && a.history()[e].total == b.history()[e].total &&
           a.history()[e].reconstruction == b.history()[e].reconstruction;
  }
  same = same && serialize_checkpoint(a.checkpoint()) == serialize_checkpoint(b.checkpoint());

  CvaeTrainer first(t, m, images, nets);
  first.run_epoch();
  first.run_epoch();
  save_checkpoint(dir / "det-state.ckpt", first.checkpoint());
  CvaeTrainer resumed(t, m, images, nets);
  resumed.resume(load_checkpoint(dir / "det-state.ckpt"));
  resumed.train();
  double drift = 0.0;
  for (std::size_t e = 0; e < 4; ++e) drift = std::max(drift, std::abs(resumed.history()[e].total - a.history()[e].total));
  const auto pa = a.model().encoder().parameters(), pr = resumed.model().encoder().parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) {
    for (std::size_t k = 0; k < pa[i]->value.size(); ++k) {
      drift = std::max(drift, static_cast<double>(std::abs(pa[i]->value.data()[k] - pr[i]->value.data()[k])));
    }
  }

  const auto ckpt = a.checkpoint();
  save_checkpoint(dir / "det-roundtrip.ckpt", ckpt);
  const auto loaded = load_checkpoint(dir / "det-roundtrip.ckpt");
  const bool bitwise = serialize_checkpoint(loaded) == serialize_checkpoint(ckpt) &&
                       serialize_checkpoint(cvae_checkpoint(cvae_from_checkpoint(ckpt))) ==
                           serialize_checkpoint(cvae_checkpoint(a.model()));

  g.report(9, same && drift <= 1e-6 && bitwise,
           strf("same seed identical: %s, resume max deviation %.2e (<= 1e-6), checkpoint round trip bitwise: %s",
               same ? "yes" : "no", drift, bitwise ? "yes" : "no"));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance gate"};
  fs::path workspace = "acceptance-run";
  bool skip_desk = false;
  app.add_option("--workspace", workspace, "Scratch directory; wiped at start")->capture_default_str();
  app.add_flag("--skip-desk", skip_desk, "Only the criteria that do not need the desk-scale run");
  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(spdlog::level::warn);

  Gate g;
  try {
    fs::remove_all(workspace);
    fs::create_directories(workspace);

    criterion_kl(g);
    criterion_reparam(g);
    criterion_gradcheck(g);

    if (skip_desk) {
      criterion_determinism(g, workspace);
    } else {
      RunConfig desk;
      desk.workspace = workspace / "desk";
      desk.finalize();
      PipelineOptions opts;
      opts.on_epoch = [](std::size_t epoch, const LossBreakdown& l) {
        spdlog::warn("desk epoch {}: total {:.5f} rec {:.5f}", epoch, l.total, l.reconstruction);
      };
      Pipeline p(desk, opts);
      const auto& ws = p.workspace();

      const auto t0 = Clock::now();
      std::map<Stage, double> seconds;
      for (auto s : all_stages()) seconds[s] = p.run(s).seconds;
      const double trained_at = seconds[Stage::synth] + seconds[Stage::train_classifiers] + seconds[Stage::label] +
                                seconds[Stage::train];
      const double pipeline_total = since(t0);

      criterion_overfit(g, desk, ws);

      const auto model = load_cvae(ws.cvae());
      const auto train_m = read_manifest(ws.labeled_manifest());
      const auto train_images = load_images(train_m);
      const auto hist = p.training_history();
      const double ratio = hist.back().total / hist.front().total;
      const double mae = reconstruction_mae(model, train_m, train_images);
      g.report(5, trained_at < 1800.0 && ratio < 0.5 && mae <= 0.08,
               strf("trained in %.0f s (< 1800), final/epoch-1 total %.4f/%.4f = %.3f (< 0.5), training MAE %.4f "
                   "(<= 0.08)",
                   trained_at, hist.back().total, hist.front().total, ratio, mae));
      g.note(strf("stages: synth %.0f s, classifiers %.0f s, label %.0f s, train %.0f s; whole pipeline incl. eval "
                 "%.0f s",
                 seconds[Stage::synth], seconds[Stage::train_classifiers], seconds[Stage::label],
                 seconds[Stage::train], pipeline_total));

      const auto oracles = train_oracles(read_manifest(ws.manifest()), train_images, desk);
      const auto held = first_per_topic(read_manifest(ws.labeled_heldout()), 20);
      const auto held_images = load_images(held);
      const auto rt = round_trip_fidelity(model, oracles.attribute, oracles.expression, held, held_images,
                                          {FlipSpec::parse("smiling"), FlipSpec::parse("expression:happy->sad")});
      const auto& smile = rt.flips[0];
      const auto& sad = rt.flips[1];
      g.report(6, smile.attempted == 100 && smile.rate() >= 0.7 && sad.attempted > 0 && sad.rate() >= 0.6,
               strf("smiling realized %zu/%zu = %.3f (>= 0.70), happy->sad %zu/%zu = %.3f (>= 0.60)", smile.realized,
                   smile.attempted, smile.rate(), sad.realized, sad.attempted, sad.rate()));
      g.note(strf("oracle agreement on unflipped reconstructions: attributes %.3f, expression %.3f",
                 rt.attribute_agreement, rt.expression_accuracy));

      const auto vectors = load_topic_vectors(ws.topic_vectors());
      const double transfer = topic_transfer_accuracy(model, vectors, oracles.topic, held, held_images,
                                                      desk.conditional_scale, desk.latent_scale);
      double vec_err = 0.0;
      const bool vec_ok = topic_vectors_match_brute_force(model, train_m, train_images, vectors, vec_err);
      g.report(7, transfer >= 0.6 && vec_ok,
               strf("oracle assigns %.3f of transformed held-out faces to the target topic (>= 0.60, chance 0.20), "
                   "topic vectors vs brute force max abs diff %.2e (<= 1e-6)",
                   transfer, vec_err));

      const auto report = p.load_eval_report();
      const double full = report.topic_prediction.accuracy;
      g.report(8, full - report.identity_accuracy >= 0.05 && full - report.latent_only_accuracy >= 0.05,
               strf("full %.3f vs identity %.3f and latent-only %.3f (margins >= 0.05); shuffled targets %.3f", full,
                   report.identity_accuracy, report.latent_only_accuracy, report.shuffled_accuracy));

      criterion_determinism(g, workspace);
    }
  } catch (const std::exception& e) {
    std::printf("acceptance aborted: %s\n", e.what());
    return 2;
  }

  std::size_t passed = 0;
  for (const auto& [id, ok] : g.results) passed += ok;
  std::printf("%zu of %zu criteria passed\n", passed, g.results.size());
  return passed == g.results.size() ? 0 : 1;
}
