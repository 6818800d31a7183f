#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <sys/wait.h>

#include "advae/errors.hpp"
#include "advae/pipeline.hpp"
#include "test_util.hpp"

using namespace advae;

namespace {

const char* kTinyYaml = R"(seed: 4
workspace: ws
dataset:
  topics: 3
  per_topic: 6
  image_size: 32
classifiers:
  epochs: 1
  base_channels: 4
training:
  epochs: 2
  latent_dim: 8
  base_channels: 4
eval:
  heldout_per_topic: 5
  grid_faces: 3
  samples_per_topic: 1
  topic_classifier:
    epochs: 1
    base_channels: 4
)";

void write_text(const std::filesystem::path& p, const std::string& text) { std::ofstream(p) << text; }

std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string config_error(const std::string& yaml) {
  try {
    run_config_from_yaml(yaml);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

// One trained tiny workspace shared by the tests below.
struct TinyRun {
  testutil::TempDir dir{"pipeline"};
  std::filesystem::path config_path = dir / "run.yaml";
  TinyRun() {
    write_text(config_path, kTinyYaml);
    Pipeline p(load_run_config(config_path));
    p.run_all();
  }
  Pipeline pipeline(bool force = false) const {
    PipelineOptions o;
    o.force = force;
    return Pipeline(load_run_config(config_path), o);
  }
};

TinyRun& tiny() {
  static TinyRun run;
  return run;
}

#ifdef ADVAE_CLI_PATH
int cli(const std::string& args) {
  const std::string cmd = std::string(ADVAE_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}
#endif

}  // namespace

TEST_SUITE("config") {
  TEST_CASE("defaults are the desk-scale configuration") {
    RunConfig c;
    c.finalize();
    CHECK(c.dataset.topics.size() == 5);
    CHECK(c.dataset.per_topic == 200);
    CHECK(c.dataset.image_size == 64);
    CHECK(c.training.epochs == 30);
    CHECK(c.training.batch_size == 32);
    CHECK(c.training.learning_rate == 5e-4);
    CHECK(c.training.model.latent_dim == 100);
    CHECK(c.conditional_scale == 10.0);
    CHECK(c.latent_scale == 2.5);
    CHECK(c.eval.test_fraction == 0.2);
  }

  TEST_CASE("strict schema") {
    CHECK(config_error("trainin:\n  epochs: 3\n").find("trainin") != std::string::npos);
    CHECK(config_error("training:\n  epochs: many\n").find("training.epochs") != std::string::npos);
    CHECK(config_error("training:\n  learning_rate: -0.1\n") != "");
    CHECK(config_error("dataset:\n  topics: [beauty, cars]\n") != "");
    CHECK(config_error("dataset: 5\n") != "");
    CHECK(config_error("eval:\n  flips: [smiling, sparkly]\n") != "");
    CHECK(config_error("seed: 3\n") == "");
  }

  TEST_CASE("yaml round trip preserves the config hash") {
    auto c = run_config_from_yaml(kTinyYaml);
    const auto back = run_config_from_yaml(run_config_to_yaml(c));
    CHECK(back.hash() == c.hash());
    CHECK(back.to_json() == c.to_json());
    auto changed = c;
    changed.training.epochs = 3;
    changed.finalize();
    CHECK(changed.hash() != c.hash());
  }

  TEST_CASE("the master seed reaches every stage") {
    auto a = run_config_from_yaml("seed: 1\n");
    auto b = run_config_from_yaml("seed: 2\n");
    CHECK(a.dataset.seed != b.dataset.seed);
    CHECK(a.classifiers.seed != b.classifiers.seed);
    CHECK(a.training.master_seed != b.training.master_seed);
    CHECK(a.eval.topic_classifier.seed != b.eval.topic_classifier.seed);
  }

  TEST_CASE("relative paths resolve against the config file") {
    testutil::TempDir d("cfg-path");
    write_text(d / "c.yaml", "workspace: out\n");
    CHECK(load_run_config(d / "c.yaml").workspace == d / "out");
    CHECK_THROWS_AS(load_run_config(d / "missing.yaml"), IoError);
  }
}

TEST_SUITE("pipeline") {
  TEST_CASE("full run writes every artifact") {
    const auto p = tiny().pipeline();
    const auto& ws = p.workspace();
    for (const auto& p : {ws.manifest(), ws.heldout_manifest(), ws.labeled_manifest(), ws.attribute_classifier(),
                          ws.expression_classifier(), ws.cvae(), ws.topic_vectors(), ws.eval_report(), ws.grid(),
                          ws.stage_record(), ws.samples_dir() / "index.json"}) {
      CAPTURE(p);
      CHECK(std::filesystem::exists(p));
    }
    CHECK(read_manifest(ws.manifest()).records.size() == 18);
    CHECK(read_manifest(ws.heldout_manifest()).records.size() == 15);
    CHECK(p.training_history().size() == 2);
    const auto report = p.load_eval_report();
    CHECK(report.topic_prediction.topics.size() == 3);
    CHECK(report.seed == 4);
    CHECK(report.model_hash == report.topic_vectors_model_hash);
    CHECK(load_checkpoint(ws.cvae()).kind == "cvae");
    const auto resolved = load_run_config(ws.resolved_config());
    CHECK(resolved.training.epochs == 2);
    CHECK(resolved.seed == 4);
  }

  TEST_CASE("rerun with the same config skips every stage") {
    auto p = tiny().pipeline();
    for (const auto& o : p.run_all()) {
      CAPTURE(to_string(o.stage));
      CHECK(o.skipped);
    }
  }

  TEST_CASE("eval refuses topic vectors from another model unless forced") {
    auto p = tiny().pipeline();
    const auto& ws = p.workspace();
    const auto original = read_text(ws.topic_vectors());
    auto set = load_topic_vectors(ws.topic_vectors());
    set.provenance.model_hash = "0000";
    save_topic_vectors(ws.topic_vectors(), set);
    CHECK_THROWS_AS(p.run(Stage::eval), IncompatibleError);
    auto forced = tiny().pipeline(true);
    CHECK_NOTHROW(forced.run(Stage::eval));
    write_text(ws.topic_vectors(), original);
    CHECK(tiny().pipeline().run(Stage::topic_vectors).skipped);
    tiny().pipeline(true).run(Stage::eval);
  }

  TEST_CASE("missing inputs name the producing stage") {
    testutil::TempDir d("pipeline-empty");
    auto c = run_config_from_yaml(kTinyYaml);
    c.workspace = d / "ws";
    Pipeline p(c);
    try {
      p.run(Stage::train);
      FAIL("expected IoError");
    } catch (const IoError& e) {
      CHECK(std::string(e.what()).find("advae label") != std::string::npos);
    }
  }

  TEST_CASE("changing a training key reruns training but not synthesis") {
    testutil::TempDir d("pipeline-change");
    auto c = run_config_from_yaml(kTinyYaml);
    c.workspace = d / "ws";
    c.finalize();
    Pipeline(c).run(Stage::synth);
    Pipeline(c).run(Stage::train_classifiers);
    CHECK(Pipeline(c).run(Stage::synth).skipped);
    c.classifiers.epochs = 2;
    c.finalize();
    CHECK(Pipeline(c).run(Stage::synth).skipped);
    CHECK_FALSE(Pipeline(c).run(Stage::train_classifiers).skipped);
  }
}

#ifdef ADVAE_CLI_PATH
TEST_SUITE("cli") {
  TEST_CASE("exit codes") {
    testutil::TempDir d("cli");
    CHECK(cli("--help") == 0);
    CHECK(cli("--workspace " + (d / "w").string() + " synth --bogus") == 1);
    CHECK(cli("") == 1);
    write_text(d / "neg.yaml", "training:\n  learning_rate: -1\n");
    CHECK(cli("--config " + (d / "neg.yaml").string() + " run") == 1);
    CHECK(cli("--workspace " + (d / "empty").string() + " train") == 3);
    const auto face = tiny().config_path.parent_path() / "ws/data/images/beauty/00000.png";
    CHECK(cli("--config " + tiny().config_path.string() + " transform --topic cars --input " + face.string() +
              " --output " + (d / "x.png").string()) == 2);
  }

  TEST_CASE("synth counts and transform naming") {
    testutil::TempDir d("cli-synth");
    CHECK(cli("--workspace " + (d / "w").string() + " synth --topics 5 --per-topic 200 --size 32 --heldout-per-topic 2") == 0);
    CHECK(read_manifest(d / "w" / "data" / "manifest.jsonl").records.size() == 1000);

    std::filesystem::copy_file(tiny().config_path.parent_path() / "ws/data/images/clothing/00001.png", d / "f.png");
    CHECK(cli("--config " + tiny().config_path.string() + " transform --topic beauty --input " + (d / "f.png").string()) == 0);
    CHECK(std::filesystem::exists(d / "f.beauty.png"));
    CHECK(read_png(d / "f.beauty.png").size() == 32);
  }

  TEST_CASE("gradcheck subcommand") {
    CHECK(cli("gradcheck") == 0);
  }
}
#endif
