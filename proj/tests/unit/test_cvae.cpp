#include <doctest.h>

#include <cmath>
#include <limits>

#include "advae/cvae.hpp"
#include "advae/errors.hpp"
#include "test_util.hpp"

using namespace advae;

namespace {

CvaeConfig small_model(std::size_t size = 32, std::size_t d = 8) {
  CvaeConfig c;
  c.image_size = size;
  c.latent_dim = d;
  c.base_channels = 4;
  c.blocks = 3;
  return c;
}

}  // namespace

TEST_SUITE("reparameterization") {
  TEST_CASE("unit examples and exactness") {
    LatentParams p{{0.5, -1.0, 2.0}, {0.0, std::log(4.0), -2.0}};
    const std::vector<double> zero(3, 0.0);
    CHECK(reparameterize(p, zero).z == p.mu);

    LatentParams unit{{0.0, 0.0}, {0.0, 0.0}};
    const std::vector<double> e{0.3, -1.7};
    CHECK(reparameterize(unit, e).z == e);

    Rng rng(3);
    for (int trial = 0; trial < 100; ++trial) {
      LatentParams q{{rng.normal()}, {rng.normal()}};
      const std::vector<double> eps{rng.normal()};
      const auto s = reparameterize(q, eps);
      CHECK(std::abs(s.z[0] - (q.mu[0] + std::exp(q.log_var[0] / 2) * eps[0])) <= 1e-15 * (1.0 + std::abs(s.z[0])));
      CHECK(s.epsilon == eps);
    }
    CHECK_THROWS_AS(reparameterize(p, std::vector<double>(2, 0.0)), ShapeError);
  }

  TEST_CASE("sample moments match the declared distribution") {
    Rng rng(2024);
    const double mu = 0.7, log_var = -0.6;
    const LatentParams p{{mu}, {log_var}};
    const int n = 100000;
    double s1 = 0.0, s2 = 0.0;
    for (int i = 0; i < n; ++i) {
      const double e = rng.normal();
      const double z = reparameterize(p, std::span<const double>(&e, 1)).z[0];
      s1 += z;
      s2 += z * z;
    }
    const double mean = s1 / n, var = s2 / n - mean * mean;
    CHECK(std::abs(mean - mu) / mu <= 0.02);
    CHECK(std::abs(var - std::exp(log_var)) / std::exp(log_var) <= 0.02);
  }
}

TEST_SUITE("cvae") {
  TEST_CASE("shape contract at desk and full label dimensions") {
    CvaeConfig c;  // 64 px, d = 100, 12 + 8 + 2 conditional
    c.base_channels = 4;
    const Cvae model(c, 1);
    const auto img = render_face(FaceParams{}, 64);
    const auto lp = model.encode(img);
    CHECK(lp.mu.size() == 100);
    CHECK(lp.log_var.size() == 100);
    CHECK(model.embed(img, derive_labels(FaceParams{}), std::vector<double>(100, 0.0)).size() == 122);

    CvaeConfig wide = c;
    wide.layout = LabelLayout{40, 8};
    CHECK(wide.embedding_dim() == 150);
    const Cvae big(wide, 2);
    const auto y = derive_labels(FaceParams{}, wide.layout);
    const auto q = big.embed(img, y, std::vector<double>(100, 0.0));
    CHECK(q.size() == 150);
    CHECK(q.flatten().size() == 150);
  }

  TEST_CASE("embedding segments") {
    const Cvae model(small_model(), 3);
    const auto p = sample_topic_params("beauty", 9);
    const auto img = render_face(p, 32);
    const auto y = derive_labels(p);
    const auto mu = model.encode(img).mu;
    const auto q = model.embed(img, y, std::vector<double>(8, 0.0));
    CHECK(q.latent == mu);
    CHECK(q.conditional == y.flatten());
    CHECK(q.conditional_vector(y.layout()) == y);
    const auto flat = q.flatten();
    CHECK(std::vector<double>(flat.begin(), flat.begin() + 22) == q.conditional);
  }

  TEST_CASE("encode and decode are deterministic and output valid images") {
    const Cvae model(small_model(), 4);
    const auto img = render_face(sample_topic_params("soda", 1), 32);
    const auto a = model.encode(img), b = model.encode(img);
    CHECK(a.mu == b.mu);
    CHECK(a.log_var == b.log_var);
    const auto q = model.embed(img, derive_labels(FaceParams{}), std::vector<double>(8, 0.5));
    const auto out = model.decode(q);
    CHECK(out == model.decode(q));
    CHECK(out.size() == 32);
    CHECK_NOTHROW(out.validate());
    const auto rec = model.reconstruct(img, derive_labels(FaceParams{}), std::vector<double>(8, 0.0));
    CHECK(rec.size() == img.size());
    CHECK_NOTHROW(rec.validate());
  }

  TEST_CASE("batched paths match single-image paths") {
    const Cvae model(small_model(), 5);
    std::vector<ImageTensor> imgs;
    std::vector<ConditionalVector> ys;
    for (std::uint64_t s = 0; s < 3; ++s) {
      const auto p = sample_topic_params("safety", s);
      imgs.push_back(render_face(p, 32));
      ys.push_back(derive_labels(p));
    }
    std::vector<const ImageTensor*> ptrs{&imgs[0], &imgs[1], &imgs[2]};
    const auto qs = model.embed_mean_batch(ptrs, ys);
    const auto outs = model.decode_batch(qs);
    for (std::size_t i = 0; i < 3; ++i) {
      const auto q = model.embed(imgs[i], ys[i], std::vector<double>(8, 0.0));
      for (std::size_t k = 0; k < 8; ++k) CHECK(qs[i].latent[k] == doctest::Approx(q.latent[k]).epsilon(1e-5));
      const auto single = model.decode(q);
      for (std::size_t k = 0; k < single.numel(); k += 37)
        CHECK(outs[i].values()[k] == doctest::Approx(single.values()[k]).epsilon(1e-4));
    }
  }

  TEST_CASE("errors") {
    const Cvae model(small_model(), 6);
    CHECK_THROWS_AS(model.encode(ImageTensor(64, 0.5f)), ShapeError);
    Embedding q;
    q.conditional.assign(22, 0.0);
    q.latent.assign(7, 0.0);
    CHECK_THROWS_AS(model.decode(q), ShapeError);
    auto bad_y = derive_labels(FaceParams{}, LabelLayout{40, 8});
    CHECK_THROWS_AS(model.embed(ImageTensor(32, 0.5f), bad_y, std::vector<double>(8, 0.0)), ShapeError);

    Cvae broken = model;
    broken.encoder().trainable_parameters()[0]->value[0] = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_AS(broken.encode(ImageTensor(32, 0.5f)), NumericError);

    CvaeConfig odd = small_model(36);
    CHECK_THROWS_AS(odd.validate(), ConfigError);
  }

  TEST_CASE("checkpoint round trip") {
    testutil::TempDir d("cvae-ckpt");
    const Cvae model(small_model(), 7);
    save_checkpoint(d / "m.ckpt", cvae_checkpoint(model));
    const auto back = load_cvae(d / "m.ckpt");
    CHECK(back.config() == model.config());
    const auto img = render_face(FaceParams{}, 32);
    CHECK(back.encode(img).mu == model.encode(img).mu);
    CHECK(cvae_config_from_json(cvae_config_to_json(model.config())) == model.config());
  }
}
