#include <doctest.h>

#include <cmath>
#include <limits>

#include "advae/errors.hpp"
#include "advae/trainer.hpp"
#include "test_util.hpp"

using namespace advae;

namespace {

// Small corpus plus untrained frozen loss networks; enough to exercise the training loop.
struct Fixture {
  testutil::TempDir dir{"trainer"};
  DatasetManifest manifest;
  std::vector<ImageTensor> images;
  Classifier ca, ce;
  FeatureExtractor phi;

  static ClassifierConfig cls(ClassifierKind kind, std::size_t classes) {
    ClassifierConfig c;
    c.kind = kind;
    c.input_size = 32;
    c.base_channels = 4;
    c.blocks = 3;
    c.classes = classes;
    return c;
  }

  explicit Fixture(std::size_t per_topic = 4)
      : manifest(build_dataset(testutil::small_dataset(per_topic, 32, 2), dir.path())),
        images(load_images(manifest)),
        ca(cls(ClassifierKind::attribute, 12), 11),
        ce(cls(ClassifierKind::expression, 8), 12),
        phi(FeatureExtractor::from_classifier(ca, 2)) {}

  LossNets nets() const { return {&ca, &ce, &phi}; }

  TrainingConfig config(std::size_t epochs) const {
    TrainingConfig t;
    t.epochs = epochs;
    t.batch_size = 4;
    t.master_seed = 21;
    t.model.image_size = 32;
    t.model.latent_dim = 4;
    t.model.base_channels = 4;
    t.model.blocks = 3;
    t.augment.train_size = 32;
    return t;
  }
};

}  // namespace

TEST_SUITE("gradient check") {
  TEST_CASE("every component passes on the tiny model") {
    const auto report = gradient_check();
    INFO(report.table());
    CHECK(report.passed());
    bool saw_kl = false, saw_composite = false;
    for (const auto& e : report.entries) {
      CHECK(e.checked > 0);
      if (e.component == "kl_closed_form") {
        saw_kl = true;
        CHECK(e.threshold == 1e-4);
      } else {
        CHECK(e.threshold == 1e-2);
      }
      saw_composite |= e.component == "composite";
    }
    CHECK(saw_kl);
    CHECK(saw_composite);
    CHECK(report.max_error("counterfactual") < 1e-2);
    CHECK(report.max_error("composite") < 1e-2);
  }

  TEST_CASE("relative error metric") {
    const std::vector<double> a{1.0, -2.0, 0.5}, n{1.0, -2.02, 0.5};
    CHECK(gradient_relative_error(a, n) == doctest::Approx(0.02 / 2.02));
    const std::vector<double> z{0.0, 0.0}, tiny{1e-12, -1e-12};
    CHECK(gradient_relative_error(z, tiny, 1e-8) == doctest::Approx(1e-4));
    CHECK(gradient_relative_error(z, z) == 0.0);
  }

  TEST_CASE("all-zero weights give exactly zero gradients") {
    CvaeConfig mc;
    mc.image_size = 16;
    mc.latent_dim = 4;
    mc.base_channels = 2;
    mc.blocks = 2;
    const BasicCvae<double> model(mc, 3);
    ClassifierConfig cc = Fixture::cls(ClassifierKind::attribute, 12);
    cc.input_size = 16;
    cc.blocks = 2;
    const BasicClassifier<double> ca(cc, 4);
    cc.kind = ClassifierKind::expression;
    cc.classes = 8;
    const BasicClassifier<double> ce(cc, 5);
    const auto phi = BasicFeatureExtractor<double>::from_classifier(ca, 1);
    Rng rng(1);
    Tensor<double> x({2, 3, 16, 16}), eps({2, 4});
    for (auto& v : x.storage()) v = rng.uniform();
    for (auto& v : eps.storage()) v = rng.normal();
    const std::vector<ConditionalVector> ys{derive_labels(sample_topic_params("beauty", 1)),
                                            derive_labels(sample_topic_params("safety", 2))};
    auto pass = cvae_forward_backward(model, {&ca, &ce, &phi}, x, ys, ys, eps, {0.0, 0.0, 0.0}, nn::Mode::train, true);
    CHECK(pass.loss.total == 0.0);
    for (const auto& g : model.encoder().gradients(pass.encoder_tape))
      for (double v : g.storage()) CHECK(v == 0.0);
    for (const auto& g : model.decoder().gradients(pass.decoder_tape))
      for (double v : g.storage()) CHECK(v == 0.0);
  }
}

TEST_SUITE("training loop") {
  TEST_CASE("same seed gives identical loss histories and weights") {
    Fixture f;
    CvaeTrainer a(f.config(3), f.manifest, f.images, f.nets());
    CvaeTrainer b(f.config(3), f.manifest, f.images, f.nets());
    a.train();
    b.train();
    REQUIRE(a.history().size() == 3);
    for (std::size_t e = 0; e < 3; ++e) {
      CHECK(a.history()[e].total == b.history()[e].total);
      CHECK(a.history()[e].reconstruction == b.history()[e].reconstruction);
    }
    CHECK(serialize_checkpoint(a.checkpoint()) == serialize_checkpoint(b.checkpoint()));
    auto other = f.config(3);
    other.master_seed = 22;
    CvaeTrainer c(other, f.manifest, f.images, f.nets());
    c.train();
    CHECK(c.history()[0].total != a.history()[0].total);
  }

  TEST_CASE("resume reproduces the uninterrupted run") {
    Fixture f;
    CvaeTrainer full(f.config(4), f.manifest, f.images, f.nets());
    full.train();

    CvaeTrainer first(f.config(4), f.manifest, f.images, f.nets());
    first.run_epoch();
    first.run_epoch();
    save_checkpoint(f.dir / "state.ckpt", first.checkpoint());
    const auto loaded = load_checkpoint(f.dir / "state.ckpt");
    CHECK(loaded == first.checkpoint());

    CvaeTrainer resumed(f.config(4), f.manifest, f.images, f.nets());
    resumed.resume(loaded);
    CHECK(resumed.epoch() == 2);
    CHECK(resumed.optimizer_step() == first.optimizer_step());
    resumed.train();
    REQUIRE(resumed.history().size() == 4);
    for (std::size_t e = 0; e < 4; ++e) {
      CHECK(std::abs(resumed.history()[e].total - full.history()[e].total) <= 1e-6);
      CHECK(std::abs(resumed.history()[e].reconstruction - full.history()[e].reconstruction) <= 1e-6);
    }
    CHECK(history_from_checkpoint(resumed.checkpoint()).size() == 4);

    auto mismatched = f.config(4);
    mismatched.learning_rate = 1e-3;
    CvaeTrainer wrong(mismatched, f.manifest, f.images, f.nets());
    CHECK_THROWS_AS(wrong.resume(loaded), IncompatibleError);
  }

  TEST_CASE("epsilon is redrawn for every image at every step") {
    Fixture f;
    CvaeTrainer t(f.config(3), f.manifest, f.images, f.nets());
    const auto per_epoch = f.images.size() * t.config().model.latent_dim;
    CHECK(t.rng().normal_draws() == 0);
    for (std::size_t e = 1; e <= 3; ++e) {
      t.run_epoch();
      CHECK(t.rng().normal_draws() == e * per_epoch);
    }
    CHECK(t.optimizer_step() == 3 * f.images.size() / 4);
  }

  TEST_CASE("frozen networks are untouched by training") {
    Fixture f;
    const auto a = nn::parameter_checksum(f.ca.net());
    const auto e = nn::parameter_checksum(f.ce.net());
    const auto p = nn::parameter_checksum(f.phi.net());
    CvaeTrainer t(f.config(2), f.manifest, f.images, f.nets());
    t.train();
    CHECK(nn::parameter_checksum(f.ca.net()) == a);
    CHECK(nn::parameter_checksum(f.ce.net()) == e);
    CHECK(nn::parameter_checksum(f.phi.net()) == p);
    for (const auto& h : t.history()) CHECK(std::isfinite(h.total));
  }

  TEST_CASE("non-finite loss aborts with a checkpoint of the last finite state") {
    Fixture f;
    auto images = f.images;
    images[3].values()[10] = std::numeric_limits<float>::quiet_NaN();
    auto cfg = f.config(2);
    cfg.augment.enabled = false;
    CvaeTrainer t(cfg, f.manifest, images, f.nets());
    t.set_abort_checkpoint(f.dir / "abort.ckpt");
    CHECK_THROWS_AS(t.train(), TrainingError);
    REQUIRE(std::filesystem::exists(f.dir / "abort.ckpt"));
    const auto ckpt = load_checkpoint(f.dir / "abort.ckpt");
    for (const auto& tensor : ckpt.tensors)
      for (float v : tensor.values) CHECK(std::isfinite(v));
  }

  TEST_CASE("single batch overfit on the tiny model") {
    Fixture f(4);  // 8 images
    auto cfg = f.config(300);
    cfg.batch_size = 8;
    cfg.learning_rate = 2e-3;
    cfg.model.base_channels = 8;
    cfg.augment.enabled = false;
    cfg.counterfactual_fraction = 0.0;  // every face is reconstructed at every step
    CvaeTrainer t(cfg, f.manifest, f.images, f.nets());
    t.train();
    CHECK(t.optimizer_step() == 300);
    CHECK(t.history().back().reconstruction < 0.1 * t.history().front().reconstruction);
  }

  TEST_CASE("configuration validation") {
    Fixture f;
    auto cfg = f.config(1);
    cfg.learning_rate = -1.0;
    CHECK_THROWS_AS(CvaeTrainer(cfg, f.manifest, f.images, f.nets()), ConfigError);
    cfg = f.config(1);
    CHECK_THROWS_AS(CvaeTrainer(cfg, f.manifest, f.images, {&f.ca, nullptr, &f.phi}), ConfigError);
    CHECK(TrainingConfig::from_json(cfg.to_json()) == cfg);
  }
}

TEST_SUITE("counterfactual conditioning") {
  TEST_CASE("row count leaves at least one ordinary row") {
    TrainingConfig t;
    t.counterfactual_fraction = 0.0;
    CHECK(t.counterfactual_rows(32) == 0);
    t.counterfactual_fraction = 0.25;
    CHECK(t.counterfactual_rows(32) == 8);
    CHECK(t.counterfactual_rows(3) == 0);
    CHECK(t.counterfactual_rows(1) == 0);
    t.counterfactual_fraction = 0.9;
    CHECK(t.counterfactual_rows(4) == 3);
    t.counterfactual_fraction = 1.0;
    CHECK_THROWS_AS(t.validate(), ConfigError);
  }

  TEST_CASE("edits toggle one attribute bit or move the expression") {
    const auto y = derive_labels(sample_topic_params("beauty", 3));
    std::size_t attr = 0, expr = 0;
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
      auto e = y;
      const auto edit = counterfactual_edit(e, seed);
      if (edit.factor == EditedFactor::attribute) {
        ++attr;
        std::size_t changed = 0;
        for (std::size_t k = 0; k < y.attributes.size(); ++k) changed += e.attributes[k] != y.attributes[k];
        CHECK(changed == 1);
        CHECK(e.attributes[edit.attribute] != y.attributes[edit.attribute]);
        CHECK(e.expression == y.expression);
      } else {
        ++expr;
        CHECK(e.expression != y.expression);
        CHECK(e.attributes == y.attributes);
      }
      CHECK(e.valence == y.valence);
      CHECK(e.arousal == y.arousal);
      auto again = y;
      counterfactual_edit(again, seed);
      CHECK(again == e);
    }
    CHECK(attr > 60);
    CHECK(expr > 60);
  }

  TEST_CASE("edited rows are scored apart from the ordinary rows") {
    // In eval mode rows are independent, so each term must match a separate pass over its own rows.
    CvaeConfig mc;
    mc.image_size = 16;
    mc.latent_dim = 4;
    mc.base_channels = 2;
    mc.blocks = 2;
    const BasicCvae<double> model(mc, 3);
    ClassifierConfig cc = Fixture::cls(ClassifierKind::attribute, 12);
    cc.input_size = 16;
    cc.blocks = 2;
    const BasicClassifier<double> ca(cc, 4);
    cc.kind = ClassifierKind::expression;
    cc.classes = 8;
    const BasicClassifier<double> ce(cc, 5);
    const auto phi = BasicFeatureExtractor<double>::from_classifier(ca, 1);
    const BasicLossNets<double> nets{&ca, &ce, &phi};
    Rng rng(9);
    const std::size_t n = 4, m = 2, px = 3 * 16 * 16;
    Tensor<double> x({n, 3, 16, 16}), eps({n, 4});
    for (auto& v : x.storage()) v = rng.uniform();
    for (auto& v : eps.storage()) v = rng.normal();
    std::vector<ConditionalVector> ys;
    for (const char* t : {"beauty", "safety", "soda", "clothing"}) ys.push_back(derive_labels(sample_topic_params(t, 2)));
    ys[2].attributes[1] ^= 1;
    ys[3].expression = (ys[3].expression + 3) % 8;
    const std::vector<CounterfactualEdit> edits{{EditedFactor::attribute, 1}, {EditedFactor::expression, 0}};
    const LossWeights w{1.0, 0.5, 0.25, 0.75};
    const auto full = cvae_forward_backward(model, nets, x, ys, {}, eps, w, nn::Mode::eval, false, edits);

    auto rows = [](const Tensor<double>& t, std::size_t b, std::size_t e) {
      Shape s = t.shape();
      const std::size_t row = t.size() / s[0];
      s[0] = e - b;
      return Tensor<double>(s, std::vector<double>(t.storage().begin() + b * row, t.storage().begin() + e * row));
    };
    const std::vector<ConditionalVector> head(ys.begin(), ys.end() - m), tail(ys.end() - m, ys.end());
    const auto a = cvae_forward_backward(model, nets, rows(x, 0, n - m), head, {}, rows(eps, 0, n - m), w,
                                         nn::Mode::eval, false);
    const auto b = cvae_forward_backward(model, nets, rows(x, n - m, n), tail, {}, rows(eps, n - m, n), w,
                                         nn::Mode::eval, false);
    CHECK(full.loss.reconstruction == doctest::Approx(a.loss.reconstruction).epsilon(1e-12));
    CHECK(full.loss.conditional == doctest::Approx(a.loss.conditional).epsilon(1e-12));
    const double kl = (a.loss.kl * (n - m) + b.loss.kl * m) / n;
    CHECK(full.loss.kl == doctest::Approx(kl).epsilon(1e-12));
    for (std::size_t i = 0; i < m * px; ++i) REQUIRE(full.x_hat[(n - m) * px + i] == b.x_hat[i]);

    // Row 2 is scored by the BCE of bit 1 alone, row 3 by expression NLL alone, each half the term.
    const auto la = ca.net().infer(rows(b.x_hat, 0, 1));
    const std::vector<double> p1{1.0 / (1.0 + std::exp(-la[1]))};
    const std::vector<std::uint8_t> t1{tail[0].attributes[1]};
    const auto le = ce.net().infer(rows(b.x_hat, 1, 2));
    const std::vector<double> logits(le.storage().begin(), le.storage().begin() + 8);
    const double expect = 0.5 * attribute_bce(p1, t1) + 0.5 * expression_nll(logits, tail[1].expression);
    CHECK(full.loss.counterfactual == doctest::Approx(expect).epsilon(1e-10));
    CHECK(full.loss.total == doctest::Approx(full.loss.reconstruction + 0.5 * full.loss.conditional +
                                             0.25 * full.loss.kl + 0.75 * full.loss.counterfactual)
                                 .epsilon(1e-12));
  }

  TEST_CASE("a zero fraction leaves training unchanged and the fields round trip") {
    Fixture f;
    auto plain = f.config(1);
    plain.weights.delta = 0.0;
    plain.counterfactual_fraction = 0.0;
    auto zero = plain;
    zero.weights.delta = 0.5;
    zero.counterfactual_fraction = 0.0;
    CvaeTrainer a(plain, f.manifest, f.images, f.nets()), b(zero, f.manifest, f.images, f.nets());
    a.train();
    b.train();
    CHECK(a.history()[0].reconstruction == b.history()[0].reconstruction);
    CHECK(b.history()[0].counterfactual == 0.0);

    auto cf = plain;
    cf.weights.delta = 0.05;
    cf.counterfactual_fraction = 0.5;
    CHECK(TrainingConfig::from_json(cf.to_json()) == cf);
    CvaeTrainer c(cf, f.manifest, f.images, f.nets());
    c.train();
    CHECK(c.history()[0].counterfactual > 0.0);
    CHECK(history_from_checkpoint(c.checkpoint())[0].counterfactual == c.history()[0].counterfactual);
  }
}
