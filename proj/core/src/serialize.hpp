#pragma once

// JSON conversions shared by the artifact writers. Private to the core library.

#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>

#include "advae/errors.hpp"
#include "advae/synthdata.hpp"
#include "json.hpp"

namespace advae::detail {

inline nlohmann::json to_json(const FaceParams& p) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& f : face_fields()) j[std::string(f.name)] = p.*f.member;
  return j;
}

inline FaceParams face_params_from_json(const nlohmann::json& j) {
  FaceParams p;
  for (const auto& f : face_fields()) p.*f.member = j.at(std::string(f.name)).get<double>();
  validate(p);
  return p;
}

inline nlohmann::json to_json(const ConditionalVector& y) {
  nlohmann::json j;
  j["attributes"] = y.attributes;
  j["expression"] = y.expression;
  j["valence"] = y.valence;
  j["arousal"] = y.arousal;
  return j;
}

inline ConditionalVector conditional_from_json(const nlohmann::json& j, const LabelLayout& layout) {
  ConditionalVector y;
  y.attributes = j.at("attributes").get<std::vector<std::uint8_t>>();
  y.expression = j.at("expression").get<std::size_t>();
  y.expression_count = layout.expressions;
  y.valence = j.at("valence").get<double>();
  y.arousal = j.at("arousal").get<double>();
  if (y.attributes.size() != layout.attributes) throw DomainError("attribute vector length mismatch");
  y.validate();
  return y;
}

inline nlohmann::json to_json(const DatasetConfig& c) {
  nlohmann::json j;
  j["topics"] = c.topics;
  j["per_topic"] = c.per_topic;
  j["image_size"] = c.image_size;
  j["attributes"] = c.layout.attributes;
  j["expressions"] = c.layout.expressions;
  j["seed"] = c.seed;
  return j;
}

inline DatasetConfig dataset_config_from_json(const nlohmann::json& j) {
  DatasetConfig c;
  c.topics = j.at("topics").get<std::vector<std::string>>();
  c.per_topic = j.at("per_topic").get<std::size_t>();
  c.image_size = j.at("image_size").get<std::size_t>();
  c.layout.attributes = j.at("attributes").get<std::size_t>();
  c.layout.expressions = j.at("expressions").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

inline std::string read_text_file(const std::filesystem::path& path, const char* what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(std::string("cannot open ") + what, path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text, const char* what) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(std::string("cannot write ") + what, path.string());
  out << text;
  if (!out) throw IoError(std::string(what) + " write failed", path.string());
}

}  // namespace advae::detail
