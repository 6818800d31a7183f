#include "advae/synthdata.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <thread>

#include "advae/errors.hpp"
#include "json.hpp"
#include "serialize.hpp"

namespace advae {

namespace {

constexpr std::array<FaceField, 10> kFields{{
    {"skin_brightness", 0.0, 1.0, &FaceParams::skin_brightness},
    {"mouth_curvature", -1.0, 1.0, &FaceParams::mouth_curvature},
    {"lipstick_intensity", 0.0, 1.0, &FaceParams::lipstick_intensity},
    {"eyebrow_angle", -1.0, 1.0, &FaceParams::eyebrow_angle},
    {"eye_openness", 0.0, 1.0, &FaceParams::eye_openness},
    {"hair_length", 0.0, 1.0, &FaceParams::hair_length},
    {"face_width", 0.6, 1.0, &FaceParams::face_width},
    {"jaw_sharpness", 0.0, 1.0, &FaceParams::jaw_sharpness},
    {"background_tone", 0.0, 1.0, &FaceParams::background_tone},
    {"bruise_intensity", 0.0, 1.0, &FaceParams::bruise_intensity},
}};

struct Rgb {
  double r, g, b;
};

Rgb mix(const Rgb& a, const Rgb& b, double t) {
  return {a.r + (b.r - a.r) * t, a.g + (b.g - a.g) * t, a.b + (b.b - a.b) * t};
}

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

// Anti-aliased coverage from a signed distance (negative inside), in pixels.
double coverage(double signed_dist, double pixel) { return clamp01(0.5 - signed_dist / pixel); }

double superellipse_distance(double dx, double dy, double rx, double ry, double p) {
  const double f = std::pow(std::pow(std::abs(dx) / rx, p) + std::pow(std::abs(dy) / ry, p), 1.0 / p);
  return (f - 1.0) * std::min(rx, ry);
}

double ellipse_distance(double dx, double dy, double rx, double ry) {
  return superellipse_distance(dx, dy, rx, ry, 2.0);
}

double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
  const double vx = bx - ax, vy = by - ay;
  const double t = std::clamp(((px - ax) * vx + (py - ay) * vy) / (vx * vx + vy * vy), 0.0, 1.0);
  const double qx = ax + t * vx - px, qy = ay + t * vy - py;
  return std::sqrt(qx * qx + qy * qy);
}

// Geometry constants in normalized coordinates.
constexpr double kFaceCx = 0.5, kFaceCy = 0.52, kFaceRy = 0.32;
constexpr double kEyeY = 0.46, kEyeDx = 0.1, kEyeRx = 0.055;
constexpr double kBrowY = 0.39;
constexpr double kMouthY = 0.67, kMouthHalfWidth = 0.09, kMouthBend = 0.05;
constexpr double kLipHalfThickness = 0.011;
constexpr double kSmileOpening = 0.035;
constexpr Region kMouthRegion{kFaceCx - kMouthHalfWidth - 0.03, kMouthY - 0.07, kFaceCx + kMouthHalfWidth + 0.03,
                              kMouthY + 0.09};

// Smiles above the "smiling" threshold open the mouth and show teeth.
constexpr double kTeethThreshold = 0.25;

}  // namespace

std::span<const FaceField> face_fields() { return kFields; }

const FaceField& face_field(std::string_view name) {
  for (const auto& f : kFields)
    if (f.name == name) return f;
  throw DomainError("unknown face parameter '" + std::string(name) + "'");
}

void validate(const FaceParams& p) {
  for (const auto& f : kFields) {
    const double v = p.*f.member;
    if (!(v >= f.lo && v <= f.hi)) {
      throw DomainError("face parameter " + std::string(f.name) + "=" + std::to_string(v) + " outside [" +
                        std::to_string(f.lo) + ", " + std::to_string(f.hi) + "]");
    }
  }
}

Region mouth_region() { return kMouthRegion; }

ImageTensor render_face(const FaceParams& p, std::size_t size) {
  if (size < 32 || size % 2 != 0) {
    throw ConfigError("render size must be even and >= 32, got " + std::to_string(size));
  }
  validate(p);
  const double px = 1.0 / static_cast<double>(size);

  const Rgb bg_dark{0.16, 0.2, 0.34}, bg_light{0.92, 0.82, 0.62};
  const Rgb hair{0.2, 0.13, 0.08};
  const Rgb skin = mix({0.33, 0.21, 0.14}, {1.0, 0.87, 0.76}, p.skin_brightness);
  const Rgb bruise{0.42, 0.18, 0.45};
  const Rgb eye_white{0.97, 0.97, 0.97}, pupil{0.08, 0.06, 0.1};
  const Rgb brow{0.14, 0.09, 0.07};
  const Rgb lip = mix({0.62, 0.32, 0.3}, {0.86, 0.04, 0.16}, p.lipstick_intensity);
  const Rgb teeth{1.0, 1.0, 0.96};

  const double face_rx = 0.3 * p.face_width;
  const double jaw_power = 2.0 + 2.5 * p.jaw_sharpness;
  const double hair_cy = kFaceCy - 0.05 + 0.12 * p.hair_length;
  const double hair_rx = face_rx + 0.05, hair_ry = 0.34 + 0.14 * p.hair_length;
  const double eye_ry = 0.008 + 0.035 * p.eye_openness;
  const double brow_inner_y = kBrowY - 0.04 * p.eyebrow_angle;
  const double brow_outer_y = kBrowY - 0.005;
  const double smile_open = p.mouth_curvature > kTeethThreshold ? kSmileOpening : 0.0;

  ImageTensor img(size);
  for (std::size_t yi = 0; yi < size; ++yi) {
    const double v = (static_cast<double>(yi) + 0.5) * px;
    for (std::size_t xi = 0; xi < size; ++xi) {
      const double u = (static_cast<double>(xi) + 0.5) * px;

      Rgb c = mix(bg_dark, bg_light, p.background_tone);
      const double shade = 0.9 + 0.1 * (1.0 - v);
      c = {c.r * shade, c.g * shade, c.b * shade};

      c = mix(c, hair, coverage(ellipse_distance(u - kFaceCx, v - hair_cy, hair_rx, hair_ry), px));

      const double fdy = v - kFaceCy;
      const double face_d = superellipse_distance(u - kFaceCx, fdy, face_rx, kFaceRy, fdy > 0 ? jaw_power : 2.0);
      const double face_cov = coverage(face_d, px);
      c = mix(c, skin, face_cov);

      const double bdx = u - (kFaceCx - 0.45 * face_rx), bdy = v - 0.58;
      c = mix(c, bruise,
              0.85 * p.bruise_intensity * face_cov * coverage(ellipse_distance(bdx, bdy, 0.06, 0.05), px));

      for (double side : {-1.0, 1.0}) {
        const double ex = kFaceCx + side * kEyeDx;
        const double eye_cov = coverage(ellipse_distance(u - ex, v - kEyeY, kEyeRx, eye_ry), px);
        c = mix(c, eye_white, eye_cov);
        const double pr = std::min(0.022, eye_ry);
        c = mix(c, pupil, eye_cov * coverage(ellipse_distance(u - ex, v - kEyeY, pr, pr), px));

        const double inner_x = kFaceCx + side * 0.045, outer_x = kFaceCx + side * 0.165;
        const double bd = segment_distance(u, v, inner_x, brow_inner_y, outer_x, brow_outer_y) - 0.009;
        c = mix(c, brow, coverage(bd, px));
      }

      // Mouth layer, clipped to its declared region.
      if (u >= kMouthRegion.x0 && u <= kMouthRegion.x1 && v >= kMouthRegion.y0 && v <= kMouthRegion.y1) {
        const double t = (u - kFaceCx) / kMouthHalfWidth;
        if (std::abs(t) <= 1.15) {
          const double tt = std::min(t * t, 1.0);
          const double upper = kMouthY + p.mouth_curvature * kMouthBend * (0.5 - tt);
          const double slope = p.mouth_curvature * kMouthBend * (-2.0 * t / kMouthHalfWidth);
          const double norm = std::sqrt(1.0 + slope * slope);
          const double lower = upper + smile_open * (1.0 - tt);
          const double side_fade = coverage((std::abs(t) - 1.0) * kMouthHalfWidth, px);
          if (smile_open > 0.0 && v > upper && v < lower) {
            c = mix(c, teeth, side_fade * clamp01(std::min(v - upper, lower - v) / px));
          }
          const double d_upper = std::abs(v - upper) / norm - kLipHalfThickness;
          const double d_lower = std::abs(v - lower) / norm - kLipHalfThickness;
          c = mix(c, lip, side_fade * coverage(std::min(d_upper, d_lower), px));
        }
      }

      img.at(0, yi, xi) = static_cast<float>(clamp01(c.r));
      img.at(1, yi, xi) = static_cast<float>(clamp01(c.g));
      img.at(2, yi, xi) = static_cast<float>(clamp01(c.b));
    }
  }
  return img;
}

// --- labels -----------------------------------------------------------------

void LabelLayout::validate() const {
  if (attributes < 1 || attributes > kMaxAttributes) {
    throw ConfigError("attribute count must be in [1, 40], got " + std::to_string(attributes));
  }
  if (expressions < 4 || expressions > 8) {
    throw ConfigError("expression count must be in [4, 8], got " + std::to_string(expressions));
  }
}

std::vector<AttributeRule> attribute_rules(std::size_t count) {
  using C = Comparison;
  std::vector<AttributeRule> rules{
      {"lipstick", &FaceParams::lipstick_intensity, C::greater, 0.5},
      {"bright_skin", &FaceParams::skin_brightness, C::greater, 0.6},
      {"bruised", &FaceParams::bruise_intensity, C::greater, 0.3},
      {"masculine", &FaceParams::jaw_sharpness, C::greater, 0.6},
      {"smiling", &FaceParams::mouth_curvature, C::greater, 0.25},
      {"long_hair", &FaceParams::hair_length, C::greater, 0.5},
      {"wide_face", &FaceParams::face_width, C::greater, 0.8},
      {"wide_eyes", &FaceParams::eye_openness, C::greater, 0.7},
      {"narrow_eyes", &FaceParams::eye_openness, C::less, 0.3},
      {"light_background", &FaceParams::background_tone, C::greater, 0.5},
      {"frowning", &FaceParams::mouth_curvature, C::less, -0.25},
      {"dark_skin", &FaceParams::skin_brightness, C::less, 0.35},
  };
  // Extended table: quartile thresholds over every field, for larger label layouts.
  for (std::size_t i = 0; rules.size() < kMaxAttributes; ++i) {
    const auto& f = kFields[i % kFields.size()];
    const double frac = 0.25 * static_cast<double>(1 + i / kFields.size());
    const double thr = f.lo + frac * (f.hi - f.lo);
    rules.push_back({std::string(f.name) + "_above_q" + std::to_string(1 + i / kFields.size()), f.member,
                     C::greater, thr});
  }
  if (count > rules.size()) throw ConfigError("at most 40 attributes are defined");
  rules.resize(count);
  return rules;
}

std::size_t attribute_index(std::string_view name, std::size_t count) {
  const auto rules = attribute_rules(count);
  for (std::size_t i = 0; i < rules.size(); ++i)
    if (rules[i].name == name) return i;
  throw DomainError("unknown attribute '" + std::string(name) + "'");
}

std::vector<std::string> expression_names(std::size_t count) {
  std::vector<std::string> names{"neutral", "happy", "sad", "angry", "surprise", "fear", "disgust", "contempt"};
  if (count > names.size()) throw ConfigError("at most 8 expressions are defined");
  names.resize(count);
  return names;
}

std::size_t expression_index(std::string_view name, std::size_t count) {
  const auto names = expression_names(count);
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return i;
  throw DomainError("unknown expression '" + std::string(name) + "'");
}

std::vector<double> ConditionalVector::flatten() const {
  std::vector<double> out;
  out.reserve(attributes.size() + expression_count + 2);
  for (auto a : attributes) out.push_back(static_cast<double>(a));
  for (std::size_t e = 0; e < expression_count; ++e) out.push_back(e == expression ? 1.0 : 0.0);
  out.push_back(valence);
  out.push_back(arousal);
  return out;
}

ConditionalVector ConditionalVector::unflatten(std::span<const double> flat, const LabelLayout& layout) {
  if (flat.size() != layout.size()) {
    throw ShapeError("conditional vector length " + std::to_string(flat.size()) + " != " +
                     std::to_string(layout.size()));
  }
  ConditionalVector y;
  y.expression_count = layout.expressions;
  for (std::size_t i = 0; i < layout.attributes; ++i) {
    if (flat[i] != 0.0 && flat[i] != 1.0) throw DomainError("attribute entry is not binary");
    y.attributes.push_back(static_cast<std::uint8_t>(flat[i]));
  }
  std::size_t hot = 0, hot_index = 0;
  for (std::size_t e = 0; e < layout.expressions; ++e) {
    const double v = flat[layout.expression_offset() + e];
    if (v == 1.0) {
      ++hot;
      hot_index = e;
    } else if (v != 0.0) {
      throw DomainError("expression entry is not one-hot");
    }
  }
  if (hot != 1) throw DomainError("expression segment must have exactly one hot entry");
  y.expression = hot_index;
  y.valence = flat[layout.valence_offset()];
  y.arousal = flat[layout.arousal_offset()];
  y.validate();
  return y;
}

void ConditionalVector::validate() const {
  for (auto a : attributes)
    if (a > 1) throw DomainError("attribute value is not 0/1");
  if (expression >= expression_count) throw DomainError("expression index out of range");
  if (!(valence >= -1.0 && valence <= 1.0) || !(arousal >= -1.0 && arousal <= 1.0)) {
    throw DomainError("valence/arousal outside [-1, 1]");
  }
}

ConditionalVector derive_labels(const FaceParams& p, const LabelLayout& layout) {
  layout.validate();
  ConditionalVector y;
  y.expression_count = layout.expressions;
  for (const auto& rule : attribute_rules(layout.attributes)) y.attributes.push_back(rule.holds(p) ? 1 : 0);
  if (p.mouth_curvature > 0.25) {
    y.expression = Expression::happy;
  } else if (p.mouth_curvature < -0.25 && p.eyebrow_angle >= -0.3) {
    y.expression = Expression::sad;
  } else if (p.eyebrow_angle < -0.3) {
    y.expression = Expression::angry;
  } else {
    y.expression = Expression::neutral;
  }
  y.valence = p.mouth_curvature;
  y.arousal = 2.0 * p.eye_openness - 1.0;
  return y;
}

// --- topics -----------------------------------------------------------------

const TopicTable& TopicTable::builtin() {
  static const TopicTable table = [] {
    TopicTable t;
    auto add = [&t](const std::string& name, auto&& tweak) {
      FaceParams m;  // neutral baseline means
      tweak(m);
      t.means[name] = m;
      t.order.push_back(name);
    };
    add("beauty", [](FaceParams& m) {
      m.skin_brightness = 0.85;
      m.lipstick_intensity = 0.8;
      m.mouth_curvature = 0.4;
    });
    add("clothing", [](FaceParams& m) {
      m.skin_brightness = 0.65;
      m.lipstick_intensity = 0.4;
      m.mouth_curvature = 0.2;
    });
    add("domestic_violence", [](FaceParams& m) {
      m.skin_brightness = 0.3;
      m.mouth_curvature = -0.6;
      m.bruise_intensity = 0.5;
    });
    add("safety", [](FaceParams& m) {
      m.jaw_sharpness = 0.8;
      m.mouth_curvature = -0.1;
    });
    add("soda", [](FaceParams& m) {
      m.mouth_curvature = 0.8;
      m.background_tone = 0.8;
    });
    return t;
  }();
  return table;
}

const FaceParams& TopicTable::mean(std::string_view topic) const {
  auto it = means.find(std::string(topic));
  if (it == means.end()) throw DomainError("unknown topic '" + std::string(topic) + "'");
  return it->second;
}

std::string TopicTable::to_json() const {
  nlohmann::ordered_json j;
  j["format"] = format;
  j["stddev"] = stddev;
  nlohmann::ordered_json topics = nlohmann::ordered_json::object();
  for (const auto& name : order) {
    nlohmann::ordered_json m;
    for (const auto& f : kFields) m[std::string(f.name)] = means.at(name).*f.member;
    topics[name] = m;
  }
  j["topics"] = topics;
  return j.dump(2) + "\n";
}

TopicTable TopicTable::from_json(const std::string& text) {
  nlohmann::ordered_json j;
  try {
    j = nlohmann::ordered_json::parse(text);
  } catch (const std::exception& e) {
    throw FormatError(std::string("topic table is not valid JSON: ") + e.what());
  }
  if (j.value("format", "") != format) throw IncompatibleError("topic table format is not " + std::string(format));
  TopicTable t;
  t.stddev = j.at("stddev").get<double>();
  for (const auto& [name, m] : j.at("topics").items()) {
    FaceParams p;
    for (const auto& [key, value] : m.items()) p.*face_field(key).member = value.get<double>();
    validate(p);
    t.means[name] = p;
    t.order.push_back(name);
  }
  return t;
}

FaceParams sample_topic_params(const TopicTable& table, std::string_view topic, std::uint64_t seed) {
  const FaceParams& mean = table.mean(topic);
  Rng rng(seed);
  FaceParams p;
  for (const auto& f : kFields) {
    p.*f.member = std::clamp(mean.*f.member + table.stddev * rng.normal(), f.lo, f.hi);
  }
  return p;
}

FaceParams sample_topic_params(std::string_view topic, std::uint64_t seed) {
  return sample_topic_params(TopicTable::builtin(), topic, seed);
}

double clamped_normal_mean(double mu, double sigma, double lo, double hi) {
  const double a = (lo - mu) / sigma, b = (hi - mu) / sigma;
  const auto pdf = [](double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI); };
  const auto cdf = [](double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); };
  // lo * P(X<lo) + hi * P(X>hi) + integral over [lo,hi] of x dP.
  return lo * cdf(a) + hi * (1.0 - cdf(b)) + mu * (cdf(b) - cdf(a)) + sigma * (pdf(a) - pdf(b));
}

// --- augmentation -----------------------------------------------------------

AugmentDraw draw_augment(Rng& rng, const AugmentConfig& config) {
  AugmentDraw d;
  d.flip = rng.bernoulli(config.flip_probability);
  d.zoom = rng.uniform(config.zoom_min, config.zoom_max);
  return d;
}

ImageTensor apply_augment(const ImageTensor& image, const AugmentDraw& draw, std::size_t train_size) {
  const std::size_t in = image.size();
  const double half_out = static_cast<double>(train_size) / 2.0, half_in = static_cast<double>(in) / 2.0;
  ImageTensor out(train_size);
  const auto clampi = [in](long v) { return static_cast<std::size_t>(std::clamp(v, 0L, static_cast<long>(in) - 1)); };
  for (std::size_t y = 0; y < train_size; ++y) {
    const double sy = (static_cast<double>(y) + 0.5 - half_out) / draw.zoom + half_in - 0.5;
    const double fy = std::floor(sy);
    const double wy = sy - fy;
    const std::size_t y0 = clampi(static_cast<long>(fy)), y1 = clampi(static_cast<long>(fy) + 1);
    for (std::size_t x = 0; x < train_size; ++x) {
      const std::size_t xo = draw.flip ? train_size - 1 - x : x;
      const double sx = (static_cast<double>(xo) + 0.5 - half_out) / draw.zoom + half_in - 0.5;
      const double fx = std::floor(sx);
      const double wx = sx - fx;
      const std::size_t x0 = clampi(static_cast<long>(fx)), x1 = clampi(static_cast<long>(fx) + 1);
      for (std::size_t c = 0; c < ImageTensor::channels; ++c) {
        const double top = image.at(c, y0, x0) * (1.0 - wx) + (wx > 0 ? image.at(c, y0, x1) * wx : 0.0);
        const double bot = image.at(c, y1, x0) * (1.0 - wx) + (wx > 0 ? image.at(c, y1, x1) * wx : 0.0);
        const double v = wy > 0 ? top * (1.0 - wy) + bot * wy : top;
        out.at(c, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return out;
}

ImageTensor augment(const ImageTensor& image, std::uint64_t seed, const AugmentConfig& config) {
  if (!config.enabled) return apply_augment(image, {}, config.train_size);
  Rng rng(seed);
  return apply_augment(image, draw_augment(rng, config), config.train_size);
}

// --- dataset ----------------------------------------------------------------

void DatasetConfig::validate(const TopicTable& table) const {
  if (topics.empty()) throw ConfigError("dataset needs at least one topic");
  for (const auto& t : topics)
    if (!table.contains(t)) throw ConfigError("unknown topic '" + t + "'");
  if (per_topic < 1) throw ConfigError("per-topic count must be >= 1");
  if (image_size < 32 || image_size % 2) throw ConfigError("image size must be even and >= 32");
  layout.validate();
}

std::map<std::string, std::size_t> DatasetManifest::per_topic_counts() const {
  std::map<std::string, std::size_t> counts;
  for (const auto& t : config.topics) counts[t] = 0;
  for (const auto& r : records) ++counts[r.topic];
  return counts;
}

std::size_t DatasetManifest::topic_index(std::string_view topic) const {
  for (std::size_t i = 0; i < config.topics.size(); ++i)
    if (config.topics[i] == topic) return i;
  throw DomainError("topic '" + std::string(topic) + "' is not declared by the manifest");
}

std::uint64_t record_seed(std::uint64_t master, std::string_view topic, std::size_t index) {
  return derive_seed(master, {fnv1a(topic), static_cast<std::uint64_t>(index)});
}

DatasetManifest build_dataset(const DatasetConfig& config, const std::filesystem::path& out_dir,
                              const TopicTable& table, std::size_t workers) {
  config.validate(table);
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create dataset directory", out_dir.string());

  DatasetManifest manifest;
  manifest.config = config;
  manifest.root = out_dir;
  for (const auto& topic : config.topics) {
    fs::create_directories(out_dir / "images" / topic, ec);
    if (ec) throw IoError("cannot create image directory", (out_dir / "images" / topic).string());
    for (std::size_t i = 0; i < config.per_topic; ++i) {
      ManifestRecord r;
      r.topic = topic;
      char name[32];
      std::snprintf(name, sizeof(name), "%05zu.png", i);
      r.path = "images/" + topic + "/" + name;
      r.params = sample_topic_params(table, topic, record_seed(config.seed, topic, i));
      r.labels = derive_labels(r.params, config.layout);
      manifest.records.push_back(std::move(r));
    }
  }

  // Rendering is embarrassingly parallel; each record depends only on its own params.
  workers = std::max<std::size_t>(1, workers);
  std::vector<std::string> failures(workers);
  auto render_range = [&](std::size_t w) {
    try {
      for (std::size_t i = w; i < manifest.records.size(); i += workers) {
        const auto& r = manifest.records[i];
        write_png(out_dir / r.path, render_face(r.params, config.image_size));
      }
    } catch (const std::exception& e) {
      failures[w] = e.what();
    }
  };
  if (workers == 1) {
    render_range(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(render_range, w);
    for (auto& t : pool) t.join();
  }
  for (const auto& f : failures)
    if (!f.empty()) throw IoError("dataset generation failed (" + f + ")", out_dir.string());

  write_manifest(manifest, out_dir / "manifest.jsonl");
  spdlog::info("wrote {} records to {}", manifest.records.size(), (out_dir / "manifest.jsonl").string());
  return manifest;
}

std::string manifest_to_jsonl(const DatasetManifest& manifest) {
  std::ostringstream os;
  nlohmann::json header;
  header["format"] = DatasetManifest::format;
  header["config"] = detail::to_json(manifest.config);
  os << header.dump() << '\n';
  for (const auto& r : manifest.records) {
    nlohmann::json j;
    j["path"] = r.path;
    j["topic"] = r.topic;
    j["params"] = detail::to_json(r.params);
    j["labels"] = detail::to_json(r.labels);
    if (r.predicted_labels) j["predicted_labels"] = detail::to_json(*r.predicted_labels);
    os << j.dump() << '\n';
  }
  return os.str();
}

void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& file) {
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write manifest", file.string());
  out << manifest_to_jsonl(manifest);
  if (!out) throw IoError("manifest write failed", file.string());
}

DatasetManifest read_manifest(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IoError("cannot open manifest", file.string());
  DatasetManifest m;
  m.root = file.parent_path();
  std::string line;
  if (!std::getline(in, line)) throw FormatError("empty manifest " + file.string());
  try {
    const auto header = nlohmann::json::parse(line);
    if (header.value("format", "") != DatasetManifest::format) {
      throw IncompatibleError("manifest " + file.string() + " is not " + std::string(DatasetManifest::format));
    }
    m.config = detail::dataset_config_from_json(header.at("config"));
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      ManifestRecord r;
      r.path = j.at("path").get<std::string>();
      r.topic = j.at("topic").get<std::string>();
      r.params = detail::face_params_from_json(j.at("params"));
      r.labels = detail::conditional_from_json(j.at("labels"), m.config.layout);
      if (j.contains("predicted_labels")) {
        r.predicted_labels = detail::conditional_from_json(j.at("predicted_labels"), m.config.layout);
      }
      m.records.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed manifest " + file.string() + ": " + e.what());
  }
  return m;
}

std::vector<ImageTensor> load_images(const DatasetManifest& manifest) {
  std::vector<ImageTensor> images;
  images.reserve(manifest.records.size());
  for (const auto& r : manifest.records) {
    ImageTensor img = read_png(manifest.image_path(r));
    if (img.size() != manifest.config.image_size) {
      throw IoError("image size " + std::to_string(img.size()) + " differs from declared " +
                        std::to_string(manifest.config.image_size),
                    manifest.image_path(r).string());
    }
    images.push_back(std::move(img));
  }
  return images;
}

}  // namespace advae
