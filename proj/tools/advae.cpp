// advae: command line front end for the staged pipeline.
//
// Every subcommand works on one workspace. Values come from --config (YAML)
// when given, then from flags, so each flag mirrors a config key.

#include <cstdio>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "advae/errors.hpp"
#include "advae/pipeline.hpp"

namespace {

using namespace advae;

template <class T>
void apply(const std::optional<T>& flag, T& field) {
  if (flag) field = *flag;
}

std::vector<std::string> parse_topics(const std::string& text) {
  if (!text.empty() && text.find_first_not_of("0123456789") == std::string::npos) {
    return first_topics(std::stoul(text));
  }
  std::vector<std::string> out;
  std::stringstream ss(text);
  for (std::string t; std::getline(ss, t, ',');) {
    if (!t.empty()) out.push_back(t);
  }
  return out;
}

struct Flags {
  std::string config;
  std::optional<std::string> workspace;
  std::optional<std::uint64_t> seed;
  bool force = false;
  std::size_t workers = 1;
  std::string log_level = "info";

  // synth
  std::optional<std::string> topics;
  std::optional<std::size_t> per_topic, size, heldout_per_topic;
  // train-classifiers
  std::optional<std::size_t> cls_epochs, cls_base, cls_batch;
  std::optional<double> cls_lr;
  // train
  std::optional<std::size_t> epochs, batch, latent_dim, base_channels;
  std::optional<double> lr, alpha, beta, gamma, delta, cf_fraction;
  std::optional<std::string> conditional_target;
  bool no_augment = false;
  // transform / eval / grid
  std::optional<double> scale_cond, scale_lat;
  std::optional<std::size_t> grid_rows;
  std::string topic, input, output;
  // gradcheck
  std::uint64_t gc_seed = 1;
};

RunConfig resolve(const Flags& f) {
  RunConfig c = f.config.empty() ? RunConfig() : load_run_config(f.config);
  if (f.workspace) c.workspace = *f.workspace;
  apply(f.seed, c.seed);
  if (f.topics) c.dataset.topics = parse_topics(*f.topics);
  apply(f.per_topic, c.dataset.per_topic);
  apply(f.size, c.dataset.image_size);
  apply(f.heldout_per_topic, c.eval.heldout_per_topic);
  apply(f.cls_epochs, c.classifiers.epochs);
  apply(f.cls_base, c.classifiers.base_channels);
  apply(f.cls_batch, c.classifiers.batch_size);
  apply(f.cls_lr, c.classifiers.learning_rate);
  apply(f.epochs, c.training.epochs);
  apply(f.batch, c.training.batch_size);
  apply(f.latent_dim, c.training.model.latent_dim);
  apply(f.base_channels, c.training.model.base_channels);
  apply(f.lr, c.training.learning_rate);
  apply(f.alpha, c.training.weights.alpha);
  apply(f.beta, c.training.weights.beta);
  apply(f.gamma, c.training.weights.gamma);
  apply(f.delta, c.training.weights.delta);
  apply(f.cf_fraction, c.training.counterfactual_fraction);
  if (f.conditional_target) c.training.conditional_target = conditional_target_from_string(*f.conditional_target);
  if (f.no_augment) c.training.augment.enabled = false;
  apply(f.scale_cond, c.conditional_scale);
  apply(f.scale_lat, c.latent_scale);
  apply(f.grid_rows, c.eval.grid_faces);
  c.finalize();
  return c;
}

Pipeline make_pipeline(const Flags& f) {
  PipelineOptions o;
  o.force = f.force;
  o.workers = f.workers;
  return Pipeline(resolve(f), o);
}

int cmd_transform(const Flags& f) {
  Pipeline p = make_pipeline(f);
  const auto& ws = p.workspace();
  for (const auto& path : {ws.cvae(), ws.topic_vectors(), ws.attribute_classifier(), ws.expression_classifier()}) {
    if (!std::filesystem::exists(path)) throw IoError("missing artifact; run 'advae run' first", path.string());
  }
  const auto model = load_cvae(ws.cvae());
  const auto vectors = load_topic_vectors(ws.topic_vectors());
  const auto ca = load_classifier(ws.attribute_classifier());
  const auto ce = load_classifier(ws.expression_classifier());
  const auto image = read_png(f.input);
  if (image.size() != model.config().image_size) {
    throw ShapeError("input is " + std::to_string(image.size()) + " px, the model expects " +
                     std::to_string(model.config().image_size));
  }
  const auto y = predict_conditional(ca, ce, image);
  const auto v = scale_topic_vector(vectors.at(f.topic), p.config().conditional_scale, p.config().latent_scale);
  std::filesystem::path out = f.output;
  if (out.empty()) {
    const std::filesystem::path in(f.input);
    out = in.parent_path() / (in.stem().string() + "." + f.topic + in.extension().string());
  }
  write_png(out, transform_to_topic(model, image, y, v));
  std::printf("%s\n", out.string().c_str());
  return 0;
}

int cmd_gradcheck(const Flags& f) {
  GradCheckConfig gc;
  gc.seed = f.gc_seed;
  const auto report = gradient_check(gc);
  std::fputs(report.table().c_str(), stdout);
  std::printf("%s\n", report.passed() ? "all gradients within tolerance" : "gradient check FAILED");
  return report.passed() ? 0 : static_cast<int>(ExitCode::runtime);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Topic-conditioned face transformation with a conditional VAE"};
  app.require_subcommand(1);
  app.fallthrough();
  Flags f;

  app.add_option("--config", f.config, "YAML run configuration")->check(CLI::ExistingFile);
  app.add_option("--workspace", f.workspace, "Artifact directory (default: advae-run)");
  app.add_option("--seed", f.seed, "Master seed; overrides every stage seed (default: 0)");
  app.add_flag("--force", f.force, "Rerun stages that are up to date; accept mismatched provenance");
  app.add_option("-j,--workers", f.workers, "Image synthesis threads")->capture_default_str();
  app.add_option("--log-level", f.log_level, "trace, debug, info, warn, error")->capture_default_str();

  struct Sub {
    CLI::App* app;
    std::optional<Stage> stage;
  };
  std::vector<Sub> subs;

  auto* synth = app.add_subcommand("synth", "Render the synthetic face corpus and its held-out split");
  synth->add_option("--topics", f.topics, "Topic count or comma-separated names (default: 5)");
  synth->add_option("--per-topic", f.per_topic, "Faces per topic (default: 200)");
  synth->add_option("--size", f.size, "Image and training crop size in px (default: 64)");
  synth->add_option("--heldout-per-topic", f.heldout_per_topic, "Held-out faces per topic (default: 100)");
  subs.push_back({synth, Stage::synth});

  auto* tc = app.add_subcommand("train-classifiers", "Train the attribute and expression classifiers");
  tc->add_option("--epochs", f.cls_epochs, "Epochs (default: 12)");
  tc->add_option("--lr", f.cls_lr, "Adam learning rate, cosine-decayed (default: 1e-3)");
  tc->add_option("--base-channels", f.cls_base, "Channels of the first conv block (default: 32)");
  tc->add_option("--batch-size", f.cls_batch, "Mini-batch size (default: 32)");
  subs.push_back({tc, Stage::train_classifiers});

  subs.push_back({app.add_subcommand("label", "Label both corpora with the trained classifiers"), Stage::label});

  auto* train = app.add_subcommand("train", "Train the conditional VAE");
  train->add_option("--epochs", f.epochs, "Epochs (default: 30)");
  train->add_option("--lr", f.lr, "Adam learning rate (default: 5e-4)");
  train->add_option("--batch-size", f.batch, "Mini-batch size (default: 32)");
  train->add_option("--latent-dim", f.latent_dim, "Latent dimension d (default: 100)");
  train->add_option("--base-channels", f.base_channels, "Channels of the first conv block (default: 32)");
  train->add_option("--alpha", f.alpha, "Reconstruction weight (default: 1)");
  train->add_option("--beta", f.beta, "Conditional classification weight (default: 1e-4)");
  train->add_option("--gamma", f.gamma, "KL weight (default: 1e-4)");
  train->add_option("--delta", f.delta, 
                    "Weight of the edited-conditioning term; 0 gives the plain objective (default: 0.05)");
  train->add_option("--counterfactual-fraction", f.cf_fraction,
                    "Share of each batch decoded with one conditioning factor edited (default: 0.25)");
  train->add_option("--conditional-target", f.conditional_target,
                    "Target of the classification loss: provided | classifier_on_input (default: provided)");
  train->add_flag("--no-augment", f.no_augment, "Disable random zoom and mirroring");
  subs.push_back({train, Stage::train});

  subs.push_back({app.add_subcommand("topic-vectors", "Compute per-topic transformation vectors"),
                  Stage::topic_vectors});

  auto add_scales = [&](CLI::App* a) {
    a->add_option("--scale-cond", f.scale_cond, "Scale of the conditional segment (default: 10)");
    a->add_option("--scale-lat", f.scale_lat, "Scale of the latent segment (default: 2.5)");
  };

  auto* transform = app.add_subcommand("transform", "Transform one face into a topic");
  transform->add_option("--topic", f.topic, "Target topic")->required();
  transform->add_option("--input", f.input, "Input PNG")->required()->check(CLI::ExistingFile);
  transform->add_option("--output", f.output, "Output PNG (default: <input>.<topic>.png)");
  add_scales(transform);
  subs.push_back({transform, std::nullopt});

  auto* ev = app.add_subcommand("eval", "Topic-prediction protocol and classifier round trips");
  add_scales(ev);
  subs.push_back({ev, Stage::eval});

  auto* grid = app.add_subcommand("grid", "Write the original / reconstruction / per-topic grid");
  grid->add_option("--rows", f.grid_rows, "Faces in the grid (default: 4)");
  add_scales(grid);
  subs.push_back({grid, Stage::grid});

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every loss gradient on a tiny model");
  gc->add_option("--seed", f.gc_seed, "Seed of the tiny model and probes")->capture_default_str();
  subs.push_back({gc, std::nullopt});

  auto* run = app.add_subcommand("run", "Run every stage, skipping those that are up to date");
  subs.push_back({run, std::nullopt});

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return static_cast<int>(ExitCode::validation);
  }

  spdlog::set_level(spdlog::level::from_str(f.log_level));
  try {
    if (gc->parsed()) return cmd_gradcheck(f);
    if (transform->parsed()) return cmd_transform(f);
    if (run->parsed()) {
      Pipeline p = make_pipeline(f);
      std::size_t skipped = 0;
      for (const auto& o : p.run_all()) skipped += o.skipped;
      std::printf("pipeline complete: %zu of %zu stages up to date\n", skipped, all_stages().size());
      return 0;
    }
    for (const auto& s : subs) {
      if (s.app->parsed() && s.stage) {
        Pipeline p = make_pipeline(f);
        p.run(*s.stage);
        return 0;
      }
    }
  } catch (const Error& e) {
    spdlog::error("{}", e.what());
    return static_cast<int>(e.exit_code());
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return static_cast<int>(ExitCode::runtime);
  }
  return 0;
}
