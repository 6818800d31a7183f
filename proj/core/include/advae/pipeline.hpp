#pragma once

// Declarative run configuration and the staged pipeline
//
//   synth -> train-classifiers -> label -> train -> topic-vectors
//         -> transform-samples -> eval -> grid
//
// Every stage writes into one workspace directory. A stage is skipped when
// the recorded hash of its inputs and configuration matches and its outputs
// are unchanged on disk.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "advae/classifiers.hpp"
#include "advae/eval.hpp"
#include "advae/trainer.hpp"

namespace advae {

struct EvalSettings {
  std::size_t heldout_per_topic = 100;
  double test_fraction = 0.2;
  std::vector<std::string> flips = {"smiling", "expression:happy->sad"};
  ClassifierTrainConfig topic_classifier = [] {
    ClassifierTrainConfig c;
    c.epochs = 8;
    c.base_channels = 16;
    return c;
  }();
  std::size_t grid_faces = 4;
  std::size_t samples_per_topic = 2;  // held-out faces transformed into every topic by transform-samples
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::filesystem::path workspace = "advae-run";
  std::filesystem::path topic_table;  // empty: builtin table
  DatasetConfig dataset;
  ClassifierTrainConfig classifiers;
  TrainingConfig training;
  double conditional_scale = kConditionalScale;
  double latent_scale = kLatentScale;
  EvalSettings eval;

  /// Desk-scale defaults: five topics x 200 faces at 64 px.
  RunConfig();

  /// Propagates the master seed and shared sizes into the module configs, then validates.
  void finalize();
  void validate() const;
  /// Canonical JSON of every field; its SHA-256 is the config hash.
  std::string to_json() const;
  std::string hash() const;
};

/// YAML with a strict schema: unknown keys and wrongly typed values raise ConfigError.
RunConfig run_config_from_yaml(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);
/// YAML text with every key at its current value.
std::string run_config_to_yaml(const RunConfig& config);

const TopicTable& topic_table_for(const RunConfig& config);
/// First `count` builtin topics.
std::vector<std::string> first_topics(std::size_t count);

struct Workspace {
  std::filesystem::path root;

  std::filesystem::path data_dir() const { return root / "data"; }
  std::filesystem::path heldout_dir() const { return root / "heldout"; }
  std::filesystem::path manifest() const { return data_dir() / "manifest.jsonl"; }
  std::filesystem::path heldout_manifest() const { return heldout_dir() / "manifest.jsonl"; }
  std::filesystem::path labeled_manifest() const { return data_dir() / "labeled.jsonl"; }
  std::filesystem::path labeled_heldout() const { return heldout_dir() / "labeled.jsonl"; }
  std::filesystem::path classifier_dir() const { return root / "classifiers"; }
  std::filesystem::path attribute_classifier() const { return classifier_dir() / "attribute.ckpt"; }
  std::filesystem::path expression_classifier() const { return classifier_dir() / "expression.ckpt"; }
  std::filesystem::path cvae() const { return root / "cvae.ckpt"; }
  std::filesystem::path training_state() const { return root / "cvae.state.ckpt"; }
  std::filesystem::path abort_state() const { return root / "cvae.abort.ckpt"; }
  std::filesystem::path topic_vectors() const { return root / "topic_vectors.json"; }
  std::filesystem::path samples_dir() const { return root / "samples"; }
  std::filesystem::path eval_report() const { return root / "eval.json"; }
  std::filesystem::path grid() const { return root / "grid.png"; }
  std::filesystem::path stage_record() const { return root / "stages.json"; }
  std::filesystem::path resolved_config() const { return root / "config.yaml"; }
};

enum class Stage { synth, train_classifiers, label, train, topic_vectors, transform_samples, eval, grid };

const std::vector<Stage>& all_stages();
std::string to_string(Stage s);
Stage stage_from_string(const std::string& s);

struct StageOutcome {
  Stage stage;
  bool skipped = false;
  double seconds = 0.0;
};

struct PipelineOptions {
  bool force = false;           // rerun stages even when up to date; accept mismatched provenance
  std::size_t workers = 1;      // image synthesis threads
  std::function<void(std::size_t epoch, const LossBreakdown&)> on_epoch;
};

class Pipeline {
 public:
  explicit Pipeline(RunConfig config, PipelineOptions options = {});

  const RunConfig& config() const noexcept { return config_; }
  const Workspace& workspace() const noexcept { return ws_; }

  /// Runs one stage; inputs produced by earlier stages must exist (IoError names the producing stage).
  StageOutcome run(Stage stage);
  std::vector<StageOutcome> run_all();

  /// Loss history stored in the CVAE checkpoint.
  std::vector<LossBreakdown> training_history() const;
  EvalReport load_eval_report() const;

 private:
  RunConfig config_;
  PipelineOptions options_;
  Workspace ws_;

  std::string stage_key(Stage stage) const;
  std::vector<std::filesystem::path> stage_outputs(Stage stage) const;
  std::vector<std::filesystem::path> stage_inputs(Stage stage) const;
  bool up_to_date(Stage stage, const std::string& key) const;
  void record(Stage stage, const std::string& key, double seconds) const;
  void execute(Stage stage);
  void require(const std::filesystem::path& path, Stage producer) const;

  void do_synth();
  void do_train_classifiers();
  void do_label();
  void do_train();
  void do_topic_vectors();
  void do_transform_samples();
  void do_eval();
  void do_grid();
};

/// Reads a run config, runs every stage and returns the process exit code; errors are logged.
int run_pipeline(const std::filesystem::path& config_path, const PipelineOptions& options = {});

}  // namespace advae
