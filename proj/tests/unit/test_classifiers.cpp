#include <doctest.h>

#include <cmath>

#include "advae/classifiers.hpp"
#include "advae/errors.hpp"
#include "advae/losses.hpp"
#include "test_util.hpp"

using namespace advae;

namespace {

ClassifierConfig config_for(ClassifierKind kind, std::size_t classes, std::size_t size = 32) {
  ClassifierConfig c;
  c.kind = kind;
  c.input_size = size;
  c.base_channels = 4;
  c.blocks = 3;
  c.classes = classes;
  return c;
}

ClassifierTrainConfig quick_training(std::size_t epochs, double lr) {
  ClassifierTrainConfig t;
  t.epochs = epochs;
  t.batch_size = 8;
  t.learning_rate = lr;
  t.base_channels = 4;
  t.augment.train_size = 32;
  t.seed = 3;
  return t;
}

}  // namespace

TEST_SUITE("conditional vector from head outputs") {
  TEST_CASE("probabilities of exactly one half binarize to zero") {
    const LabelLayout layout{12, 8};
    const std::vector<double> attr(12, 0.0);  // logit 0 is p = 0.5
    std::vector<double> expr(10, 0.0);
    const auto y = conditional_from_outputs(attr, expr, layout);
    for (auto a : y.attributes) CHECK(a == 0);
    CHECK(y.expression == 0);  // all tied: lowest index
  }

  TEST_CASE("argmax one-hot") {
    const LabelLayout layout{1, 4};
    const std::vector<double> attr{3.0};
    const std::vector<double> expr{2.0, 1.0, 0.0, 0.0, 0.2, -0.3};
    const auto y = conditional_from_outputs(attr, expr, layout);
    CHECK(y.attributes[0] == 1);
    const auto flat = y.flatten();
    CHECK(std::vector<double>(flat.begin() + 1, flat.begin() + 5) == std::vector<double>{1, 0, 0, 0});
    CHECK(y.valence == doctest::Approx(0.2));
    CHECK(y.arousal == doctest::Approx(-0.3));
  }

  TEST_CASE("regression outputs are clamped") {
    const LabelLayout layout{1, 4};
    const std::vector<double> attr{-1.0};
    const std::vector<double> expr{0.0, 0.0, 5.0, 5.0, 1.4, -3.0};
    const auto y = conditional_from_outputs(attr, expr, layout);
    CHECK(y.valence == 1.0);
    CHECK(y.arousal == -1.0);
    CHECK(y.expression == 2);
    CHECK_NOTHROW(y.validate());
  }

  TEST_CASE("softmax over expression logits sums to one") {
    Rng rng(8);
    for (int trial = 0; trial < 200; ++trial) {
      std::vector<double> logits(8);
      for (auto& v : logits) v = 4.0 * rng.normal();
      double total = 0.0;
      for (std::size_t k = 0; k < 8; ++k) total += std::exp(-expression_nll(logits, k));
      CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
}

TEST_SUITE("classifier inference") {
  TEST_CASE("predictions are deterministic and satisfy the label invariants") {
    const Classifier ca(config_for(ClassifierKind::attribute, 12), 1);
    const Classifier ce(config_for(ClassifierKind::expression, 8), 2);
    for (std::uint64_t s = 0; s < 5; ++s) {
      const auto img = render_face(sample_topic_params("clothing", s), 32);
      const auto y = predict_conditional(ca, ce, img);
      CHECK(y == predict_conditional(ca, ce, img));
      CHECK_NOTHROW(y.validate());
      CHECK(y.attributes.size() == 12);
      CHECK(y.expression_count == 8);
    }
  }

  TEST_CASE("batched and single predictions agree") {
    const Classifier ca(config_for(ClassifierKind::attribute, 12), 1);
    const Classifier ce(config_for(ClassifierKind::expression, 8), 2);
    std::vector<ImageTensor> imgs;
    for (std::uint64_t s = 0; s < 4; ++s) imgs.push_back(render_face(sample_topic_params("soda", s), 32));
    std::vector<const ImageTensor*> ptrs;
    for (const auto& i : imgs) ptrs.push_back(&i);
    const auto batch = predict_conditional_batch(ca, ce, ptrs);
    for (std::size_t i = 0; i < imgs.size(); ++i) {
      const auto single = predict_conditional(ca, ce, imgs[i]);
      CHECK(batch[i].attributes == single.attributes);
      CHECK(batch[i].expression == single.expression);
      CHECK(batch[i].valence == doctest::Approx(single.valence).epsilon(1e-5));
    }
  }

  TEST_CASE("input size mismatch is a shape error") {
    const Classifier ca(config_for(ClassifierKind::attribute, 12), 1);
    const Classifier ce(config_for(ClassifierKind::expression, 8), 2);
    CHECK_THROWS_AS(predict_conditional(ca, ce, ImageTensor(64, 0.5f)), ShapeError);
    CHECK_THROWS_AS(predict_conditional(ce, ca, ImageTensor(32, 0.5f)), Error);
  }

  TEST_CASE("untrained attribute classifier is near chance on balanced labels") {
    const Classifier ca(config_for(ClassifierKind::attribute, 12), 17);
    Rng rng(4);
    std::vector<ImageTensor> imgs;
    std::vector<ConditionalVector> labels;
    for (std::uint64_t s = 0; s < 200; ++s) {
      imgs.push_back(render_face(sample_topic_params("beauty", s), 32));
      ConditionalVector y = derive_labels(sample_topic_params("beauty", s));
      for (std::size_t a = 0; a < 12; ++a) y.attributes[a] = (s + a) % 2;  // balanced per attribute
      labels.push_back(y);
    }
    const auto m = evaluate_attribute_classifier(ca, imgs, labels);
    CHECK(std::abs(m.values.at("heldout_accuracy") - 0.5) <= 0.1);
  }

  TEST_CASE("checkpoint round trip keeps outputs bitwise") {
    testutil::TempDir d("cls-ckpt");
    const Classifier ce(config_for(ClassifierKind::expression, 8), 5);
    ClassifierMetrics metrics;
    metrics.values["heldout_accuracy"] = 0.5;
    save_classifier(d / "e.ckpt", ce, metrics);
    const auto back = load_classifier(d / "e.ckpt");
    CHECK(back.config() == ce.config());
    const auto img = render_face(FaceParams{}, 32);
    const auto a = ce.predict(img), b = back.predict(img);
    CHECK(a.expression_logits == b.expression_logits);
    CHECK(a.valence == b.valence);
    CHECK(nn::parameter_checksum(back.net()) == nn::parameter_checksum(ce.net()));
  }
}

TEST_SUITE("classifier training") {
  TEST_CASE("constant attribute and single-expression datasets are learned") {
    testutil::TempDir d("cls-train");
    auto manifest = build_dataset(testutil::small_dataset(24, 32, 2), d.path());
    const auto lip = attribute_index("lipstick", 12);
    for (auto& r : manifest.records) {
      r.labels.attributes[lip] = 1;
      r.labels.expression = Expression::happy;
    }
    const auto images = load_images(manifest);
    const auto cfg = quick_training(25, 1e-2);

    const auto att = train_attribute_classifier(manifest, images, cfg);
    CHECK(att.metrics.loss_history.size() == 25);
    CHECK(att.metrics.loss_history.back() < att.metrics.loss_history.front());
    for (std::size_t i = 0; i < images.size(); i += 5) CHECK(att.model.predict(images[i]).attribute_probs[lip] >= 0.9);

    const auto exp = train_expression_classifier(manifest, images, cfg);
    CHECK(exp.metrics.values.at("heldout_accuracy") == 1.0);
  }

  TEST_CASE("training is deterministic given the seed") {
    testutil::TempDir d("cls-det");
    const auto manifest = build_dataset(testutil::small_dataset(8, 32, 2), d.path());
    const auto images = load_images(manifest);
    const auto cfg = quick_training(2, 1e-3);
    const auto a = train_attribute_classifier(manifest, images, cfg);
    const auto b = train_attribute_classifier(manifest, images, cfg);
    CHECK(a.metrics.loss_history == b.metrics.loss_history);
    CHECK(nn::parameter_checksum(a.model.net()) == nn::parameter_checksum(b.model.net()));
  }

  TEST_CASE("topic classifier trains on explicit pairs") {
    std::vector<ImageTensor> imgs;
    std::vector<std::size_t> labels;
    for (std::uint64_t s = 0; s < 24; ++s) {
      const std::size_t t = s % 2;
      FaceParams p;
      p.background_tone = t ? 0.95 : 0.05;
      imgs.push_back(render_face(p, 32));
      labels.push_back(t);
    }
    std::vector<const ImageTensor*> ptrs;
    for (const auto& i : imgs) ptrs.push_back(&i);
    auto cfg = quick_training(15, 1e-2);
    cfg.augment.enabled = false;
    const auto topic = train_topic_classifier(ptrs, labels, 2, cfg);
    CHECK(predict_topics(topic.model, ptrs) == labels);
    CHECK_THROWS_AS(train_topic_classifier(ptrs, std::vector<std::size_t>(3, 0), 2, cfg), Error);
  }
}

TEST_SUITE("labelling") {
  TEST_CASE("label_dataset fills predicted labels and keeps ground truth") {
    testutil::TempDir d("label");
    const auto manifest = build_dataset(testutil::small_dataset(3, 32, 2), d.path());
    const Classifier ca(config_for(ClassifierKind::attribute, 12), 1);
    const Classifier ce(config_for(ClassifierKind::expression, 8), 2);
    const auto labeled = label_dataset(ca, ce, manifest);
    REQUIRE(labeled.records.size() == manifest.records.size());
    const auto images = load_images(manifest);
    for (std::size_t i = 0; i < labeled.records.size(); ++i) {
      REQUIRE(labeled.records[i].predicted_labels.has_value());
      CHECK(labeled.records[i].labels == manifest.records[i].labels);
      CHECK(labeled.records[i].predicted_labels->attributes == predict_conditional(ca, ce, images[i]).attributes);
    }
  }

  TEST_CASE("empty manifest and unreadable records") {
    testutil::TempDir d("label-bad");
    auto manifest = build_dataset(testutil::small_dataset(3, 32, 1), d.path());
    const Classifier ca(config_for(ClassifierKind::attribute, 12), 1);
    const Classifier ce(config_for(ClassifierKind::expression, 8), 2);
    DatasetManifest empty = manifest;
    empty.records.clear();
    CHECK(label_dataset(ca, ce, empty).records.empty());
    std::filesystem::remove(manifest.image_path(manifest.records[1]));
    const auto labeled = label_dataset(ca, ce, manifest);
    CHECK(labeled.records.size() == 2);
    CHECK(labeled.records[1].path == manifest.records[2].path);
  }
}
