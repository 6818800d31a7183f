#include "advae/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <set>

#include <spdlog/spdlog.h>
#include <yaml-cpp/yaml.h>

#include "advae/errors.hpp"
#include "advae/hash.hpp"
#include "json.hpp"
#include "serialize.hpp"

namespace advae {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

RunConfig::RunConfig() {
  dataset.topics = first_topics(5);
  dataset.per_topic = 200;
  dataset.image_size = 64;
  classifiers.epochs = 12;
  classifiers.base_channels = 32;
}

std::vector<std::string> first_topics(std::size_t count) {
  const auto& order = TopicTable::builtin().order;
  if (count < 1 || count > order.size()) {
    throw ConfigError("topic count must be in [1, " + std::to_string(order.size()) + "]");
  }
  return {order.begin(), order.begin() + static_cast<long>(count)};
}

const TopicTable& topic_table_for(const RunConfig& config) {
  if (config.topic_table.empty()) return TopicTable::builtin();
  // Loaded tables are cached per path for the life of the process.
  static std::map<std::string, TopicTable> cache;
  const auto key = config.topic_table.string();
  auto it = cache.find(key);
  if (it == cache.end()) {
    it = cache.emplace(key, TopicTable::from_json(detail::read_text_file(config.topic_table, "topic table"))).first;
  }
  return it->second;
}

void RunConfig::finalize() {
  const std::size_t size = dataset.image_size;
  dataset.seed = seed;
  classifiers.seed = seed;
  classifiers.augment.train_size = size;
  training.master_seed = seed;
  training.model.image_size = size;
  training.model.layout = dataset.layout;
  training.augment.train_size = size;
  eval.topic_classifier.seed = derive_seed(seed, {fnv1a("topic-classifier")});
  eval.topic_classifier.augment.train_size = size;
  validate();
}

void RunConfig::validate() const {
  if (workspace.empty()) throw ConfigError("workspace must not be empty");
  dataset.validate(topic_table_for(*this));
  if (dataset.topics.size() < 2) throw ConfigError("the pipeline needs at least two topics");
  classifiers.validate();
  training.validate();
  if (training.model.image_size != dataset.image_size) throw ConfigError("model image size differs from the dataset");
  for (double s : {conditional_scale, latent_scale}) {
    if (!std::isfinite(s)) throw ConfigError("transform scales must be finite");
  }
  if (eval.heldout_per_topic < 2) throw ConfigError("eval.heldout_per_topic must be >= 2");
  if (!(eval.test_fraction > 0.0 && eval.test_fraction < 1.0)) throw ConfigError("eval.test_fraction must be in (0, 1)");
  eval.topic_classifier.validate();
  for (const auto& f : eval.flips) {
    const auto spec = FlipSpec::parse(f);
    try {
      if (spec.kind == FlipSpec::Kind::attribute) {
        attribute_index(spec.target, dataset.layout.attributes);
      } else {
        expression_index(spec.target, dataset.layout.expressions);
        if (!spec.source.empty()) expression_index(spec.source, dataset.layout.expressions);
      }
    } catch (const DomainError& e) {
      throw ConfigError("eval.flips: " + std::string(e.what()));
    }
  }
}

namespace {

ordered_json augment_json(const AugmentConfig& a) {
  return {{"enabled", a.enabled},
          {"train_size", a.train_size},
          {"zoom_min", a.zoom_min},
          {"zoom_max", a.zoom_max},
          {"flip_probability", a.flip_probability}};
}

ordered_json classifier_json(const ClassifierTrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"cosine_decay", c.cosine_decay},
          {"seed", c.seed},
          {"holdout_fraction", c.holdout_fraction},
          {"base_channels", c.base_channels},
          {"augment", augment_json(c.augment)}};
}

ordered_json dataset_json(const DatasetConfig& d) {
  return {{"topics", d.topics},
          {"per_topic", d.per_topic},
          {"image_size", d.image_size},
          {"attributes", d.layout.attributes},
          {"expressions", d.layout.expressions},
          {"seed", d.seed}};
}

ordered_json eval_json(const EvalSettings& e) {
  return {{"heldout_per_topic", e.heldout_per_topic},
          {"test_fraction", e.test_fraction},
          {"flips", e.flips},
          {"grid_faces", e.grid_faces},
          {"samples_per_topic", e.samples_per_topic},
          {"topic_classifier", classifier_json(e.topic_classifier)}};
}

ordered_json scales_json(const RunConfig& c) {
  return {{"conditional_scale", c.conditional_scale}, {"latent_scale", c.latent_scale}};
}

ordered_json topic_table_json(const RunConfig& c) { return ordered_json::parse(topic_table_for(c).to_json()); }

// --- strict YAML reading -----------------------------------------------------

class Section {
 public:
  Section(const YAML::Node& node, std::string path) : node_(node), path_(std::move(path)) {
    if (node_ && !node_.IsMap()) throw ConfigError(where() + " must be a mapping");
  }

  ~Section() noexcept(false) {
    if (!node_ || std::uncaught_exceptions() > 0) return;
    for (const auto& kv : node_) {
      const auto key = kv.first.as<std::string>();
      if (!seen_.count(key)) throw ConfigError("unknown key '" + join(key) + "'");
    }
  }

  template <class T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    const YAML::Node v = lookup(key);
    if (!v) return;
    try {
      out = v.template as<T>();
    } catch (const YAML::Exception&) {
      throw ConfigError("key '" + join(key) + "' has the wrong type");
    }
  }

  void get_path(const std::string& key, fs::path& out) {
    std::string s = out.string();
    get(key, s);
    out = s;
  }

  Section sub(const std::string& key) {
    seen_.insert(key);
    return Section(lookup(key), join(key));
  }

  YAML::Node raw(const std::string& key) {
    seen_.insert(key);
    return lookup(key);
  }

  std::string join(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  YAML::Node lookup(const std::string& key) const {
    if (!node_) return YAML::Node(YAML::NodeType::Undefined);
    const YAML::Node& n = node_;
    return n[key];
  }
  std::string where() const { return path_.empty() ? "config" : "'" + path_ + "'"; }
  YAML::Node node_;
  std::string path_;
  std::set<std::string> seen_;
};

void read_augment(Section s, AugmentConfig& a) {
  s.get("enabled", a.enabled);
  s.get("zoom_min", a.zoom_min);
  s.get("zoom_max", a.zoom_max);
  s.get("flip_probability", a.flip_probability);
}

void read_classifier(Section s, ClassifierTrainConfig& c, bool with_holdout) {
  s.get("epochs", c.epochs);
  s.get("batch_size", c.batch_size);
  s.get("learning_rate", c.learning_rate);
  s.get("cosine_decay", c.cosine_decay);
  s.get("base_channels", c.base_channels);
  if (with_holdout) s.get("holdout_fraction", c.holdout_fraction);
  read_augment(s.sub("augment"), c.augment);
}

// Shortest text that parses back to the same double.
std::string shortest(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

YAML::Emitter& emit_augment(YAML::Emitter& out, const AugmentConfig& a) {
  out << YAML::Key << "augment" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "enabled" << YAML::Value << a.enabled;
  out << YAML::Key << "zoom_min" << YAML::Value << shortest(a.zoom_min);
  out << YAML::Key << "zoom_max" << YAML::Value << shortest(a.zoom_max);
  out << YAML::Key << "flip_probability" << YAML::Value << shortest(a.flip_probability);
  return out << YAML::EndMap;
}

void emit_classifier(YAML::Emitter& out, const ClassifierTrainConfig& c, bool with_holdout) {
  out << YAML::BeginMap;
  out << YAML::Key << "epochs" << YAML::Value << c.epochs;
  out << YAML::Key << "batch_size" << YAML::Value << c.batch_size;
  out << YAML::Key << "learning_rate" << YAML::Value << shortest(c.learning_rate);
  out << YAML::Key << "cosine_decay" << YAML::Value << c.cosine_decay;
  out << YAML::Key << "base_channels" << YAML::Value << c.base_channels;
  if (with_holdout) out << YAML::Key << "holdout_fraction" << YAML::Value << shortest(c.holdout_fraction);
  emit_augment(out, c.augment);
  out << YAML::EndMap;
}

}  // namespace

std::string RunConfig::to_json() const {
  ordered_json j;
  j["seed"] = seed;
  j["workspace"] = workspace.string();
  j["topic_table"] = topic_table_json(*this);
  j["dataset"] = dataset_json(dataset);
  j["classifiers"] = classifier_json(classifiers);
  j["training"] = ordered_json::parse(training.to_json());
  j["transform"] = scales_json(*this);
  j["eval"] = eval_json(eval);
  return j.dump();
}

std::string RunConfig::hash() const { return sha256_hex(to_json()); }

RunConfig run_config_from_yaml(const std::string& text) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("config is not valid YAML: ") + e.what());
  }
  if (root.IsNull()) root = YAML::Node(YAML::NodeType::Map);
  RunConfig c;
  {
    Section s(root, "");
    s.get("seed", c.seed);
    s.get_path("workspace", c.workspace);
    s.get_path("topic_table", c.topic_table);
    {
      Section d = s.sub("dataset");
      YAML::Node topics = d.raw("topics");
      if (topics) {
        try {
          if (topics.IsScalar()) {
            c.dataset.topics = first_topics(topics.as<std::size_t>());
          } else {
            c.dataset.topics = topics.as<std::vector<std::string>>();
          }
        } catch (const YAML::Exception&) {
          throw ConfigError("dataset.topics must be a count or a list of topic names");
        }
      }
      d.get("per_topic", c.dataset.per_topic);
      d.get("image_size", c.dataset.image_size);
      d.get("attributes", c.dataset.layout.attributes);
      d.get("expressions", c.dataset.layout.expressions);
    }
    read_classifier(s.sub("classifiers"), c.classifiers, true);
    {
      Section t = s.sub("training");
      t.get("epochs", c.training.epochs);
      t.get("batch_size", c.training.batch_size);
      t.get("learning_rate", c.training.learning_rate);
      t.get("alpha", c.training.weights.alpha);
      t.get("beta", c.training.weights.beta);
      t.get("gamma", c.training.weights.gamma);
      t.get("delta", c.training.weights.delta);
      t.get("counterfactual_fraction", c.training.counterfactual_fraction);
      t.get("latent_dim", c.training.model.latent_dim);
      t.get("base_channels", c.training.model.base_channels);
      t.get("blocks", c.training.model.blocks);
      std::string target = to_string(c.training.conditional_target);
      t.get("conditional_target", target);
      c.training.conditional_target = conditional_target_from_string(target);
      read_augment(t.sub("augment"), c.training.augment);
    }
    {
      Section t = s.sub("transform");
      t.get("conditional_scale", c.conditional_scale);
      t.get("latent_scale", c.latent_scale);
    }
    {
      Section e = s.sub("eval");
      e.get("heldout_per_topic", c.eval.heldout_per_topic);
      e.get("test_fraction", c.eval.test_fraction);
      e.get("flips", c.eval.flips);
      e.get("grid_faces", c.eval.grid_faces);
      e.get("samples_per_topic", c.eval.samples_per_topic);
      read_classifier(e.sub("topic_classifier"), c.eval.topic_classifier, false);
    }
  }
  c.finalize();
  return c;
}

RunConfig load_run_config(const fs::path& path) {
  auto c = run_config_from_yaml(detail::read_text_file(path, "run config"));
  // Relative paths in the file are relative to the file's directory.
  const auto base = path.parent_path();
  if (c.workspace.is_relative()) c.workspace = base / c.workspace;
  if (!c.topic_table.empty() && c.topic_table.is_relative()) c.topic_table = base / c.topic_table;
  c.validate();
  return c;
}

std::string run_config_to_yaml(const RunConfig& c) {
  YAML::Emitter out;
  out << YAML::BeginMap;
  out << YAML::Key << "seed" << YAML::Value << c.seed;
  out << YAML::Key << "workspace" << YAML::Value << c.workspace.string();
  out << YAML::Key << "topic_table" << YAML::Value << c.topic_table.string();
  out << YAML::Key << "dataset" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "topics" << YAML::Value << YAML::Flow << c.dataset.topics;
  out << YAML::Key << "per_topic" << YAML::Value << c.dataset.per_topic;
  out << YAML::Key << "image_size" << YAML::Value << c.dataset.image_size;
  out << YAML::Key << "attributes" << YAML::Value << c.dataset.layout.attributes;
  out << YAML::Key << "expressions" << YAML::Value << c.dataset.layout.expressions;
  out << YAML::EndMap;
  out << YAML::Key << "classifiers" << YAML::Value;
  emit_classifier(out, c.classifiers, true);
  const auto& t = c.training;
  out << YAML::Key << "training" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "epochs" << YAML::Value << t.epochs;
  out << YAML::Key << "batch_size" << YAML::Value << t.batch_size;
  out << YAML::Key << "learning_rate" << YAML::Value << shortest(t.learning_rate);
  out << YAML::Key << "alpha" << YAML::Value << shortest(t.weights.alpha);
  out << YAML::Key << "beta" << YAML::Value << shortest(t.weights.beta);
  out << YAML::Key << "gamma" << YAML::Value << shortest(t.weights.gamma);
  out << YAML::Key << "delta" << YAML::Value << shortest(t.weights.delta);
  out << YAML::Key << "counterfactual_fraction" << YAML::Value << shortest(t.counterfactual_fraction);
  out << YAML::Key << "latent_dim" << YAML::Value << t.model.latent_dim;
  out << YAML::Key << "base_channels" << YAML::Value << t.model.base_channels;
  out << YAML::Key << "blocks" << YAML::Value << t.model.blocks;
  out << YAML::Key << "conditional_target" << YAML::Value << to_string(t.conditional_target);
  emit_augment(out, t.augment);
  out << YAML::EndMap;
  out << YAML::Key << "transform" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "conditional_scale" << YAML::Value << shortest(c.conditional_scale);
  out << YAML::Key << "latent_scale" << YAML::Value << shortest(c.latent_scale);
  out << YAML::EndMap;
  out << YAML::Key << "eval" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "heldout_per_topic" << YAML::Value << c.eval.heldout_per_topic;
  out << YAML::Key << "test_fraction" << YAML::Value << shortest(c.eval.test_fraction);
  out << YAML::Key << "flips" << YAML::Value << YAML::Flow << c.eval.flips;
  out << YAML::Key << "grid_faces" << YAML::Value << c.eval.grid_faces;
  out << YAML::Key << "samples_per_topic" << YAML::Value << c.eval.samples_per_topic;
  out << YAML::Key << "topic_classifier" << YAML::Value;
  emit_classifier(out, c.eval.topic_classifier, false);
  out << YAML::EndMap;
  out << YAML::EndMap;
  return std::string(out.c_str()) + "\n";
}

// --- stages ------------------------------------------------------------------

const std::vector<Stage>& all_stages() {
  static const std::vector<Stage> s = {Stage::synth,         Stage::train_classifiers, Stage::label,
                                       Stage::train,         Stage::topic_vectors,     Stage::transform_samples,
                                       Stage::eval,          Stage::grid};
  return s;
}

std::string to_string(Stage s) {
  switch (s) {
    case Stage::synth: return "synth";
    case Stage::train_classifiers: return "train-classifiers";
    case Stage::label: return "label";
    case Stage::train: return "train";
    case Stage::topic_vectors: return "topic-vectors";
    case Stage::transform_samples: return "transform-samples";
    case Stage::eval: return "eval";
    case Stage::grid: return "grid";
  }
  return "?";
}

Stage stage_from_string(const std::string& s) {
  for (auto st : all_stages()) {
    if (to_string(st) == s) return st;
  }
  throw ConfigError("unknown stage '" + s + "'");
}

namespace {

std::string hash_or_missing(const fs::path& p) { return fs::exists(p) ? sha256_file(p) : "missing"; }

/// Adds the producing stage key to a checkpoint's metadata.
void stamp(Checkpoint& ckpt, const std::string& config_hash) {
  auto extra = nlohmann::json::parse(ckpt.extra_json);
  extra["config_hash"] = config_hash;
  ckpt.extra_json = extra.dump();
}

std::vector<ImageTensor> images_of(const DatasetManifest& m) { return load_images(m); }

}  // namespace

Pipeline::Pipeline(RunConfig config, PipelineOptions options)
    : config_(std::move(config)), options_(std::move(options)), ws_{config_.workspace} {
  config_.validate();
}

std::vector<fs::path> Pipeline::stage_inputs(Stage stage) const {
  switch (stage) {
    case Stage::synth: return {};
    case Stage::train_classifiers: return {ws_.manifest()};
    case Stage::label: return {ws_.manifest(), ws_.heldout_manifest(), ws_.attribute_classifier(), ws_.expression_classifier()};
    case Stage::train: return {ws_.labeled_manifest(), ws_.attribute_classifier(), ws_.expression_classifier()};
    case Stage::topic_vectors: return {ws_.cvae(), ws_.labeled_manifest()};
    case Stage::transform_samples: return {ws_.cvae(), ws_.topic_vectors(), ws_.labeled_heldout()};
    case Stage::eval:
      return {ws_.cvae(), ws_.topic_vectors(), ws_.labeled_manifest(), ws_.labeled_heldout(),
              ws_.attribute_classifier(), ws_.expression_classifier()};
    case Stage::grid: return {ws_.cvae(), ws_.topic_vectors(), ws_.labeled_heldout()};
  }
  return {};
}

std::vector<fs::path> Pipeline::stage_outputs(Stage stage) const {
  switch (stage) {
    case Stage::synth: return {ws_.manifest(), ws_.heldout_manifest()};
    case Stage::train_classifiers: return {ws_.attribute_classifier(), ws_.expression_classifier()};
    case Stage::label: return {ws_.labeled_manifest(), ws_.labeled_heldout()};
    case Stage::train: return {ws_.cvae()};
    case Stage::topic_vectors: return {ws_.topic_vectors()};
    case Stage::transform_samples: return {ws_.samples_dir() / "index.json"};
    case Stage::eval: return {ws_.eval_report()};
    case Stage::grid: return {ws_.grid()};
  }
  return {};
}

std::string Pipeline::stage_key(Stage stage) const {
  ordered_json j;
  j["stage"] = to_string(stage);
  switch (stage) {
    case Stage::synth:
      j["dataset"] = dataset_json(config_.dataset);
      j["heldout_per_topic"] = config_.eval.heldout_per_topic;
      j["topic_table"] = topic_table_json(config_);
      break;
    case Stage::train_classifiers: j["classifiers"] = classifier_json(config_.classifiers); break;
    case Stage::label: break;
    case Stage::train: j["training"] = ordered_json::parse(config_.training.to_json()); break;
    case Stage::topic_vectors: break;
    case Stage::transform_samples:
      j["scales"] = scales_json(config_);
      j["samples_per_topic"] = config_.eval.samples_per_topic;
      break;
    case Stage::eval:
      j["scales"] = scales_json(config_);
      j["eval"] = eval_json(config_.eval);
      j["seed"] = config_.seed;
      break;
    case Stage::grid:
      j["scales"] = scales_json(config_);
      j["grid_faces"] = config_.eval.grid_faces;
      break;
  }
  ordered_json inputs = ordered_json::object();
  for (const auto& p : stage_inputs(stage)) inputs[fs::relative(p, ws_.root).string()] = hash_or_missing(p);
  j["inputs"] = inputs;
  return sha256_hex(j.dump());
}

bool Pipeline::up_to_date(Stage stage, const std::string& key) const {
  if (!fs::exists(ws_.stage_record())) return false;
  nlohmann::json rec;
  try {
    rec = nlohmann::json::parse(detail::read_text_file(ws_.stage_record(), "stage record"));
  } catch (const nlohmann::json::exception&) {
    return false;
  }
  const auto name = to_string(stage);
  if (!rec.contains(name) || rec[name].value("key", "") != key) return false;
  for (const auto& p : stage_outputs(stage)) {
    const auto rel = fs::relative(p, ws_.root).string();
    if (!fs::exists(p) || rec[name]["outputs"].value(rel, "") != sha256_file(p)) return false;
  }
  return true;
}

void Pipeline::record(Stage stage, const std::string& key, double seconds) const {
  nlohmann::json rec = nlohmann::json::object();
  if (fs::exists(ws_.stage_record())) {
    try {
      rec = nlohmann::json::parse(detail::read_text_file(ws_.stage_record(), "stage record"));
    } catch (const nlohmann::json::exception&) {
      rec = nlohmann::json::object();
    }
  }
  nlohmann::json outs = nlohmann::json::object();
  for (const auto& p : stage_outputs(stage)) outs[fs::relative(p, ws_.root).string()] = sha256_file(p);
  rec[to_string(stage)] = {{"key", key}, {"outputs", outs}, {"seconds", seconds}};
  detail::write_text_file(ws_.stage_record(), rec.dump(2) + "\n", "stage record");
}

void Pipeline::require(const fs::path& path, Stage producer) const {
  if (!fs::exists(path)) {
    throw IoError("missing artifact; run 'advae " + to_string(producer) + "' first", path.string());
  }
}

StageOutcome Pipeline::run(Stage stage) {
  const auto t0 = std::chrono::steady_clock::now();
  fs::create_directories(ws_.root);
  const auto key = stage_key(stage);
  StageOutcome out{stage};
  if (!options_.force && up_to_date(stage, key)) {
    spdlog::info("[{}] up to date, skipped", to_string(stage));
    out.skipped = true;
    return out;
  }
  detail::write_text_file(ws_.resolved_config(), run_config_to_yaml(config_), "resolved config");
  spdlog::info("[{}] running", to_string(stage));
  try {
    execute(stage);
  } catch (Error& e) {
    spdlog::error("[{}] failed: {}", to_string(stage), e.what());
    throw;
  }
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  record(stage, key, out.seconds);
  spdlog::info("[{}] done in {:.1f}s", to_string(stage), out.seconds);
  return out;
}

std::vector<StageOutcome> Pipeline::run_all() {
  std::vector<StageOutcome> out;
  for (auto s : all_stages()) out.push_back(run(s));
  return out;
}

void Pipeline::execute(Stage stage) {
  switch (stage) {
    case Stage::synth: return do_synth();
    case Stage::train_classifiers: return do_train_classifiers();
    case Stage::label: return do_label();
    case Stage::train: return do_train();
    case Stage::topic_vectors: return do_topic_vectors();
    case Stage::transform_samples: return do_transform_samples();
    case Stage::eval: return do_eval();
    case Stage::grid: return do_grid();
  }
}

void Pipeline::do_synth() {
  const auto& table = topic_table_for(config_);
  build_dataset(config_.dataset, ws_.data_dir(), table, options_.workers);
  DatasetConfig held = config_.dataset;
  held.per_topic = config_.eval.heldout_per_topic;
  held.seed = derive_seed(config_.seed, {fnv1a("heldout")});
  build_dataset(held, ws_.heldout_dir(), table, options_.workers);
}

void Pipeline::do_train_classifiers() {
  require(ws_.manifest(), Stage::synth);
  const auto manifest = read_manifest(ws_.manifest());
  const auto images = images_of(manifest);
  const auto key = stage_key(Stage::train_classifiers);
  fs::create_directories(ws_.classifier_dir());
  auto a = train_attribute_classifier(manifest, images, config_.classifiers);
  auto e = train_expression_classifier(manifest, images, config_.classifiers);
  for (auto [model, path] : {std::pair{&a, ws_.attribute_classifier()}, std::pair{&e, ws_.expression_classifier()}}) {
    auto ckpt = classifier_checkpoint(model->model, model->metrics);
    stamp(ckpt, key);
    save_checkpoint(path, ckpt);
  }
}

void Pipeline::do_label() {
  require(ws_.manifest(), Stage::synth);
  require(ws_.attribute_classifier(), Stage::train_classifiers);
  require(ws_.expression_classifier(), Stage::train_classifiers);
  const auto ca = load_classifier(ws_.attribute_classifier());
  const auto ce = load_classifier(ws_.expression_classifier());
  write_manifest(label_dataset(ca, ce, read_manifest(ws_.manifest())), ws_.labeled_manifest());
  write_manifest(label_dataset(ca, ce, read_manifest(ws_.heldout_manifest())), ws_.labeled_heldout());
}

void Pipeline::do_train() {
  require(ws_.labeled_manifest(), Stage::label);
  const auto manifest = read_manifest(ws_.labeled_manifest());
  const auto ca = load_classifier(ws_.attribute_classifier());
  const auto ce = load_classifier(ws_.expression_classifier());
  const auto phi = FeatureExtractor::from_classifier(ca);
  CvaeTrainer trainer(config_.training, manifest, images_of(manifest), {&ca, &ce, &phi});
  trainer.set_abort_checkpoint(ws_.abort_state());
  if (fs::exists(ws_.training_state())) {
    try {
      trainer.resume(load_checkpoint(ws_.training_state()));
      spdlog::info("[train] resuming after epoch {}", trainer.epoch());
    } catch (const Error& e) {
      spdlog::warn("[train] ignoring stale training state: {}", e.what());
      trainer = CvaeTrainer(config_.training, manifest, images_of(manifest), {&ca, &ce, &phi});
      trainer.set_abort_checkpoint(ws_.abort_state());
    }
  }
  trainer.train([&](std::size_t epoch, const LossBreakdown& l) {
    save_checkpoint(ws_.training_state(), trainer.checkpoint());
    if (options_.on_epoch) options_.on_epoch(epoch, l);
  });
  auto ckpt = cvae_checkpoint(trainer.model());
  auto hist = nlohmann::json::parse(trainer.checkpoint().extra_json);
  hist["config_hash"] = stage_key(Stage::train);
  ckpt.extra_json = hist.dump();
  ckpt.epoch = trainer.epoch();
  save_checkpoint(ws_.cvae(), ckpt);
}

void Pipeline::do_topic_vectors() {
  require(ws_.cvae(), Stage::train);
  require(ws_.labeled_manifest(), Stage::label);
  const auto model = load_cvae(ws_.cvae());
  save_topic_vectors(ws_.topic_vectors(), compute_topic_vectors(model, read_manifest(ws_.labeled_manifest())));
}

void Pipeline::do_transform_samples() {
  require(ws_.cvae(), Stage::train);
  require(ws_.topic_vectors(), Stage::topic_vectors);
  require(ws_.labeled_heldout(), Stage::label);
  const auto model = load_cvae(ws_.cvae());
  const auto vectors = load_topic_vectors(ws_.topic_vectors());
  const auto held = read_manifest(ws_.labeled_heldout());
  fs::create_directories(ws_.samples_dir());
  std::map<std::string, std::size_t> taken;
  ordered_json index = ordered_json::array();
  for (const auto& r : held.records) {
    if (taken[r.topic]++ >= config_.eval.samples_per_topic) continue;
    const auto image = read_png(held.image_path(r));
    auto stem = fs::path(r.path).replace_extension().generic_string();
    std::replace(stem.begin(), stem.end(), '/', '_');
    for (const auto& t : vectors.order) {
      const auto out = ws_.samples_dir() / (stem + "." + t + ".png");
      write_png(out, transform_to_topic(model, image, r.conditioning(),
                                        scale_topic_vector(vectors.at(t), config_.conditional_scale,
                                                           config_.latent_scale)));
      index.push_back({{"source", r.path}, {"topic", t}, {"output", out.filename().string()}});
    }
  }
  detail::write_text_file(ws_.samples_dir() / "index.json", index.dump(2) + "\n", "sample index");
}

namespace {

std::vector<ImageTensor> subset_images(const DatasetManifest& part, const DatasetManifest& whole,
                                       const std::vector<ImageTensor>& images) {
  std::map<std::string, std::size_t> at;
  for (std::size_t i = 0; i < whole.records.size(); ++i) at[whole.records[i].path] = i;
  std::vector<ImageTensor> out;
  out.reserve(part.records.size());
  for (const auto& r : part.records) out.push_back(images.at(at.at(r.path)));
  return out;
}

}  // namespace

void Pipeline::do_eval() {
  require(ws_.cvae(), Stage::train);
  require(ws_.topic_vectors(), Stage::topic_vectors);
  require(ws_.labeled_heldout(), Stage::label);
  const auto model = load_cvae(ws_.cvae());
  const auto vectors = load_topic_vectors(ws_.topic_vectors());
  const auto train_manifest = read_manifest(ws_.labeled_manifest());
  const auto held = read_manifest(ws_.labeled_heldout());

  EvalReport report;
  report.seed = config_.seed;
  report.config_hash = stage_key(Stage::eval);
  report.model_hash = model_hash(model);
  report.manifest_hash = manifest_hash(train_manifest);
  report.topic_vectors_model_hash = vectors.provenance.model_hash;
  if (vectors.provenance.model_hash != report.model_hash ||
      vectors.provenance.manifest_hash != report.manifest_hash) {
    if (!options_.force) {
      throw IncompatibleError("topic vectors were computed from a different model or manifest (use --force)");
    }
    spdlog::warn("[eval] topic vector provenance does not match; continuing because of --force");
  }

  const auto held_images = images_of(held);
  const auto split = split_manifest(held, config_.eval.test_fraction, derive_seed(config_.seed, {fnv1a("eval")}));
  const auto train_images = subset_images(split.train, held, held_images);
  const auto test_images = subset_images(split.test, held, held_images);

  TopicProtocolConfig pc;
  pc.conditional_scale = config_.conditional_scale;
  pc.latent_scale = config_.latent_scale;
  pc.classifier = config_.eval.topic_classifier;
  auto accuracy_of = [&](TransformVariant v, bool shuffle) {
    pc.variant = v;
    pc.shuffle_targets = shuffle;
    auto r = topic_prediction_protocol(model, vectors, split.train, train_images, split.test, test_images, pc);
    spdlog::info("[eval] protocol {}{}: accuracy {:.3f}", to_string(v), shuffle ? " (shuffled targets)" : "",
                 r.accuracy);
    return r;
  };
  report.topic_prediction = accuracy_of(TransformVariant::full, false);
  report.identity_accuracy = accuracy_of(TransformVariant::identity, false).accuracy;
  report.latent_only_accuracy = accuracy_of(TransformVariant::latent_only, false).accuracy;
  report.shuffled_accuracy = accuracy_of(TransformVariant::full, true).accuracy;

  // Oracle topic classifier: real training-corpus faces with their true topics.
  {
    const auto images = images_of(train_manifest);
    std::vector<const ImageTensor*> ptrs;
    std::vector<std::size_t> labels;
    for (std::size_t i = 0; i < images.size(); ++i) {
      ptrs.push_back(&images[i]);
      labels.push_back(train_manifest.topic_index(train_manifest.records[i].topic));
    }
    auto oc = config_.eval.topic_classifier;
    oc.seed = derive_seed(config_.seed, {fnv1a("topic-oracle")});
    const auto oracle = train_topic_classifier(ptrs, labels, vectors.order.size(), oc);
    report.topic_transfer_accuracy = topic_transfer_accuracy(model, vectors, oracle.model, split.test, test_images,
                                                             config_.conditional_scale, config_.latent_scale);
    spdlog::info("[eval] topic transfer accuracy {:.3f}", report.topic_transfer_accuracy);
  }

  std::vector<FlipSpec> plan;
  for (const auto& f : config_.eval.flips) plan.push_back(FlipSpec::parse(f));
  const auto ca = load_classifier(ws_.attribute_classifier());
  const auto ce = load_classifier(ws_.expression_classifier());
  report.round_trip = round_trip_fidelity(model, ca, ce, split.test, test_images, plan);
  for (const auto& f : report.round_trip.flips) {
    spdlog::info("[eval] flip {}: {}/{} realized", f.name, f.realized, f.attempted);
  }
  save_eval_report(ws_.eval_report(), report);
}

void Pipeline::do_grid() {
  require(ws_.cvae(), Stage::train);
  require(ws_.topic_vectors(), Stage::topic_vectors);
  require(ws_.labeled_heldout(), Stage::label);
  const auto model = load_cvae(ws_.cvae());
  const auto vectors = load_topic_vectors(ws_.topic_vectors());
  const auto held = read_manifest(ws_.labeled_heldout());
  // One face per topic in turn, so every row block shows each source topic.
  std::map<std::string, std::vector<const ManifestRecord*>> by_topic;
  for (const auto& r : held.records) by_topic[r.topic].push_back(&r);
  std::vector<ImageTensor> images;
  std::vector<ConditionalVector> labels;
  for (std::size_t k = 0; images.size() < config_.eval.grid_faces; ++k) {
    bool any = false;
    for (const auto& t : held.config.topics) {
      if (images.size() >= config_.eval.grid_faces) break;
      const auto& rs = by_topic[t];
      if (k >= rs.size()) continue;
      images.push_back(read_png(held.image_path(*rs[k])));
      labels.push_back(rs[k]->conditioning());
      any = true;
    }
    if (!any) break;
  }
  export_grid(ws_.grid(), model, vectors, images, labels, config_.conditional_scale, config_.latent_scale);
}

std::vector<LossBreakdown> Pipeline::training_history() const {
  require(ws_.cvae(), Stage::train);
  return history_from_checkpoint(load_checkpoint(ws_.cvae()));
}

EvalReport Pipeline::load_eval_report() const {
  require(ws_.eval_report(), Stage::eval);
  return EvalReport::from_json(detail::read_text_file(ws_.eval_report(), "eval report"));
}

int run_pipeline(const fs::path& config_path, const PipelineOptions& options) {
  try {
    Pipeline p(load_run_config(config_path), options);
    p.run_all();
    return 0;
  } catch (const Error& e) {
    spdlog::error("{}", e.what());
    return static_cast<int>(e.exit_code());
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return static_cast<int>(ExitCode::runtime);
  }
}

}  // namespace advae
