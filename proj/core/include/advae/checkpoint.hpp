#pragma once

// Checkpoint file layout:
//
//   "ADVAE1"                    6 magic bytes
//   uint64 little-endian        header length in bytes
//   UTF-8 JSON header           kind, config, epoch, optimizer step, RNG state,
//                               extra metadata, tensor directory
//                               (name / shape / offset / count) and CRC-32 of
//                               the data section
//   float32 little-endian data  tensors in directory order
//
// The same container stores CVAE models, classifiers and training state.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "advae/nn.hpp"
#include "advae/optim.hpp"

namespace advae {

inline constexpr char kCheckpointMagic[] = "ADVAE1";
inline constexpr int kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;

  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

struct Checkpoint {
  int version = kCheckpointVersion;
  std::string kind;           // "cvae", "classifier", ...
  std::string config_json;    // serialized config object (JSON text)
  std::uint64_t epoch = 0;
  std::uint64_t optimizer_step = 0;
  std::string rng_state;
  std::string extra_json = "{}";  // free-form metadata (history, metrics, provenance)
  std::vector<NamedTensor> tensors;

  const NamedTensor& tensor(const std::string& name) const;
  bool has_tensor(const std::string& name) const;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
std::vector<unsigned char> serialize_checkpoint(const Checkpoint& checkpoint);
/// Throws IncompatibleError on version mismatch and FormatError on truncation or checksum failure.
Checkpoint load_checkpoint(const std::filesystem::path& path);
Checkpoint deserialize_checkpoint(const std::vector<unsigned char>& bytes);

/// Append every parameter of `net` (trainable and running statistics) under `prefix`.
template <class T>
void export_parameters(const nn::Sequential<T>& net, const std::string& prefix, std::vector<NamedTensor>& out);
/// Load parameters named prefix + name; throws FormatError if any is missing or misshapen.
template <class T>
void import_parameters(nn::Sequential<T>& net, const std::string& prefix, const Checkpoint& ckpt);

void export_adam(const AdamState<float>& state, const std::vector<std::string>& names, std::vector<NamedTensor>& out);
AdamState<float> import_adam(const Checkpoint& ckpt, const std::vector<std::string>& names,
                             const std::vector<Shape>& shapes);

}  // namespace advae
