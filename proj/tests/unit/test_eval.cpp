#include <doctest.h>

#include <fstream>
#include <iterator>
#include <set>

#include "advae/errors.hpp"
#include "advae/eval.hpp"
#include "test_util.hpp"

using namespace advae;

namespace {

CvaeConfig small_model() {
  CvaeConfig c;
  c.image_size = 32;
  c.latent_dim = 6;
  c.base_channels = 4;
  c.blocks = 3;
  return c;
}

ClassifierConfig cls(ClassifierKind kind, std::size_t classes) {
  ClassifierConfig c;
  c.kind = kind;
  c.input_size = 32;
  c.base_channels = 4;
  c.blocks = 3;
  c.classes = classes;
  return c;
}

std::vector<unsigned char> read_all(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct Corpus {
  testutil::TempDir dir{"eval"};
  DatasetManifest manifest;
  std::vector<ImageTensor> images;
  explicit Corpus(std::size_t per_topic, std::size_t topics = 3)
      : manifest(build_dataset(testutil::small_dataset(per_topic, 32, topics), dir.path())),
        images(load_images(manifest)) {}
};

std::vector<ImageTensor> images_of(const DatasetManifest& m) { return load_images(m); }

}  // namespace

TEST_SUITE("split") {
  TEST_CASE("stratified, disjoint and seeded") {
    Corpus c(10);
    const auto s = split_manifest(c.manifest, 0.2, 5);
    CHECK(s.train.records.size() == 24);
    CHECK(s.test.records.size() == 6);
    for (const auto& [t, n] : s.test.per_topic_counts()) CHECK(n == 2);
    CHECK_NOTHROW(check_disjoint(s.train, s.test));
    std::set<std::string> all;
    for (const auto& r : s.train.records) all.insert(r.path);
    for (const auto& r : s.test.records) all.insert(r.path);
    CHECK(all.size() == 30);
    const auto again = split_manifest(c.manifest, 0.2, 5);
    CHECK(manifest_to_jsonl(again.test) == manifest_to_jsonl(s.test));
    const auto other = split_manifest(c.manifest, 0.2, 6);
    CHECK(manifest_to_jsonl(other.test) != manifest_to_jsonl(s.test));
  }

  TEST_CASE("every topic keeps a record on each side") {
    Corpus c(2);
    const auto s = split_manifest(c.manifest, 0.01, 1);
    for (const auto& [t, n] : s.test.per_topic_counts()) CHECK(n == 1);
    for (const auto& [t, n] : s.train.per_topic_counts()) CHECK(n == 1);
    CHECK_THROWS_AS(split_manifest(c.manifest, 0.0, 1), ConfigError);
    DatasetManifest one = c.manifest;
    one.records.resize(3);  // topic with a single record
    CHECK_THROWS_AS(split_manifest(one, 0.2, 1), DomainError);
  }

  TEST_CASE("overlapping splits are a protocol error") {
    Corpus c(4, 2);
    auto s = split_manifest(c.manifest, 0.25, 1);
    s.test.records.push_back(s.train.records.front());
    CHECK_THROWS_AS(check_disjoint(s.train, s.test), ProtocolError);
    const Cvae model(small_model(), 1);
    const auto vectors = compute_topic_vectors(model, c.manifest, c.images);
    TopicProtocolConfig cfg;
    cfg.classifier.epochs = 1;
    CHECK_THROWS_AS(topic_prediction_protocol(model, vectors, s.train, images_of(s.train), s.test, images_of(s.test), cfg),
                    ProtocolError);
  }
}

TEST_SUITE("protocol") {
  TEST_CASE("confusion matrix bookkeeping") {
    const auto tp = topic_prediction_from_labels({0, 0, 1, 1, 2, 2, 2}, {0, 1, 1, 1, 0, 2, 2}, {"a", "b", "c"});
    CHECK(tp.confusion == std::vector<std::vector<std::size_t>>{{1, 1, 0}, {0, 2, 0}, {1, 0, 2}});
    CHECK(tp.accuracy == doctest::Approx(5.0 / 7.0));
    CHECK(tp.test_images == 7);
  }

  TEST_CASE("variant vectors") {
    const TopicVector v{"t", {1.0, -1.0}, {2.0}};
    CHECK(variant_vector(v, TransformVariant::full, 10, 2.5) == scale_topic_vector(v, 10, 2.5));
    const auto id = variant_vector(v, TransformVariant::identity, 10, 2.5);
    CHECK(id.conditional == std::vector<double>{0.0, 0.0});
    CHECK(id.latent == std::vector<double>{0.0});
    const auto lat = variant_vector(v, TransformVariant::latent_only, 10, 2.5);
    CHECK(lat.conditional == std::vector<double>{0.0, 0.0});
    CHECK(lat.latent == std::vector<double>{5.0});
    for (auto x : {TransformVariant::full, TransformVariant::identity, TransformVariant::latent_only})
      CHECK(transform_variant_from_string(to_string(x)) == x);
    CHECK_THROWS_AS(transform_variant_from_string("half"), ConfigError);
  }

  TEST_CASE("protocol run on a tiny model produces a consistent report") {
    Corpus c(6);
    const auto s = split_manifest(c.manifest, 0.34, 2);
    const Cvae model(small_model(), 3);
    const auto vectors = compute_topic_vectors(model, s.train, images_of(s.train));
    TopicProtocolConfig cfg;
    cfg.classifier.epochs = 1;
    cfg.classifier.base_channels = 4;
    cfg.classifier.augment.train_size = 32;
    const auto tp = topic_prediction_protocol(model, vectors, s.train, images_of(s.train), s.test, images_of(s.test), cfg);
    CHECK(tp.train_images == s.train.records.size() * 3);
    CHECK(tp.test_images == s.test.records.size());
    std::size_t correct = 0;
    for (std::size_t t = 0; t < 3; ++t) {
      std::size_t row = 0;
      for (auto v : tp.confusion[t]) row += v;
      CHECK(row == s.test.per_topic_counts().at(tp.topics[t]));
      correct += tp.confusion[t][t];
    }
    CHECK(tp.accuracy == doctest::Approx(static_cast<double>(correct) / tp.test_images));
    const auto again = topic_prediction_protocol(model, vectors, s.train, images_of(s.train), s.test, images_of(s.test), cfg);
    CHECK(again.confusion == tp.confusion);
  }
}

TEST_SUITE("round trip") {
  TEST_CASE("flip plan parsing") {
    auto f = FlipSpec::parse("smiling");
    CHECK(f.kind == FlipSpec::Kind::attribute);
    CHECK(f.target == "smiling");
    f = FlipSpec::parse("expression:happy->sad");
    CHECK(f.kind == FlipSpec::Kind::expression);
    CHECK(f.source == "happy");
    CHECK(f.target == "sad");
    CHECK(FlipSpec::parse(f.name()).target == "sad");
    CHECK(FlipSpec::parse("expression:angry").source.empty());
    CHECK_THROWS_AS(FlipSpec::parse(""), DomainError);
    CHECK_THROWS_AS(FlipSpec::parse("expression:"), DomainError);
  }

  TEST_CASE("unknown components are domain errors before any work") {
    Corpus c(2, 2);
    const Cvae model(small_model(), 1);
    const Classifier ca(cls(ClassifierKind::attribute, 12), 2), ce(cls(ClassifierKind::expression, 8), 3);
    CHECK_THROWS_AS(round_trip_fidelity(model, ca, ce, c.manifest, c.images, {FlipSpec::parse("sparkly")}), DomainError);
    CHECK_THROWS_AS(
        round_trip_fidelity(model, ca, ce, c.manifest, c.images, {FlipSpec::parse("expression:happy->bored")}),
        DomainError);
  }

  TEST_CASE("empty plan reports the plain reconstruction consistency") {
    Corpus c(3, 2);
    const Cvae model(small_model(), 1);
    const Classifier ca(cls(ClassifierKind::attribute, 12), 2), ce(cls(ClassifierKind::expression, 8), 3);
    const auto r = round_trip_fidelity(model, ca, ce, c.manifest, c.images, {});
    CHECK(r.flips.empty());
    std::vector<const ImageTensor*> ptrs;
    std::vector<ConditionalVector> ys;
    for (std::size_t i = 0; i < c.images.size(); ++i) {
      ptrs.push_back(&c.images[i]);
      ys.push_back(c.manifest.records[i].conditioning());
    }
    const auto outs = model.decode_batch(model.embed_mean_batch(ptrs, ys));
    std::vector<const ImageTensor*> out_ptrs;
    for (const auto& o : outs) out_ptrs.push_back(&o);
    const auto preds = predict_conditional_batch(ca, ce, out_ptrs);
    std::size_t agree = 0, total = 0, expr = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      for (std::size_t a = 0; a < ys[i].attributes.size(); ++a, ++total) agree += preds[i].attributes[a] == ys[i].attributes[a];
      expr += preds[i].expression == ys[i].expression;
    }
    CHECK(r.attribute_agreement == doctest::Approx(static_cast<double>(agree) / total));
    CHECK(r.expression_accuracy == doctest::Approx(static_cast<double>(expr) / c.images.size()));

    const auto with = round_trip_fidelity(model, ca, ce, c.manifest, c.images, {FlipSpec::parse("smiling")});
    REQUIRE(with.flips.size() == 1);
    CHECK(with.flips[0].attempted == c.images.size());
    CHECK(with.flips[0].realized <= with.flips[0].attempted);
    CHECK(with.attribute_agreement == r.attribute_agreement);
  }
}

TEST_SUITE("grid and report") {
  TEST_CASE("grid layout, reconstruction column and determinism") {
    testutil::TempDir d("grid");
    Corpus c(2, 5);
    const Cvae model(small_model(), 4);
    const auto vectors = compute_topic_vectors(model, c.manifest, c.images);
    std::vector<ImageTensor> faces(c.images.begin(), c.images.begin() + 4);
    std::vector<ConditionalVector> ys;
    for (std::size_t i = 0; i < 4; ++i) ys.push_back(c.manifest.records[i].conditioning());
    const auto grid = transformation_grid(model, vectors, faces, ys);
    REQUIRE(grid.size() == 4);
    for (std::size_t r = 0; r < 4; ++r) {
      REQUIRE(grid[r].size() == 7);
      CHECK(grid[r][0] == faces[r]);
      CHECK(grid[r][1] == model.reconstruct(faces[r], ys[r], std::vector<double>(6, 0.0)));
      CHECK(grid[r][2] == transform_to_topic(model, faces[r], ys[r], scale_topic_vector(vectors.at("beauty"))));
    }
    export_grid(d / "a.png", model, vectors, faces, ys);
    export_grid(d / "b.png", model, vectors, faces, ys);
    const auto a = read_all(d / "a.png");
    CHECK(a == read_all(d / "b.png"));
    const auto be32 = [&](std::size_t at) {
      return (std::uint32_t{a[at]} << 24) | (std::uint32_t{a[at + 1]} << 16) | (std::uint32_t{a[at + 2]} << 8) |
             std::uint32_t{a[at + 3]};
    };
    CHECK(be32(16) == 7 * 32);
    CHECK(be32(20) == 4 * 32);
    CHECK_THROWS_AS(export_grid(d / "missing" / "g.png", model, vectors, faces, ys), IoError);
  }

  TEST_CASE("eval report json round trip") {
    testutil::TempDir d("report");
    EvalReport r;
    r.topic_prediction = topic_prediction_from_labels({0, 1, 1}, {0, 1, 0}, {"a", "b"});
    r.identity_accuracy = 0.25;
    r.latent_only_accuracy = 0.3;
    r.shuffled_accuracy = 0.2;
    r.topic_transfer_accuracy = 0.9;
    r.round_trip.attribute_agreement = 0.95;
    r.round_trip.expression_accuracy = 0.9;
    r.round_trip.flips.push_back({"smiling", 100, 81});
    r.seed = 7;
    r.config_hash = "c";
    r.model_hash = "m";
    r.manifest_hash = "h";
    r.topic_vectors_model_hash = "m";
    const auto back = EvalReport::from_json(r.to_json());
    CHECK(back.to_json() == r.to_json());
    CHECK(back.round_trip.flips[0].rate() == doctest::Approx(0.81));
    save_eval_report(d / "e.json", r);
    CHECK(std::filesystem::exists(d / "e.json"));
    CHECK_THROWS_AS(EvalReport::from_json("{\"format\":\"advae-eval/0\"}"), IncompatibleError);
  }
}
