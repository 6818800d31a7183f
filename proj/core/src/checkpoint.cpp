#include "advae/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "advae/errors.hpp"
#include "json.hpp"

namespace advae {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr std::size_t kMagicLen = 6;

std::uint32_t crc_of(const unsigned char* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks.
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, data, chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

nlohmann::json parse_or_object(const std::string& text) {
  if (text.empty()) return nlohmann::json::object();
  return nlohmann::json::parse(text);
}

}  // namespace

const NamedTensor& Checkpoint::tensor(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return t;
  throw FormatError("checkpoint has no tensor '" + name + "'");
}

bool Checkpoint::has_tensor(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return true;
  return false;
}

std::vector<unsigned char> serialize_checkpoint(const Checkpoint& ckpt) {
  std::vector<unsigned char> data;
  nlohmann::json dir = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& t : ckpt.tensors) {
    if (numel(t.shape) != t.values.size()) throw ShapeError("checkpoint tensor " + t.name + " has inconsistent shape");
    dir.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset}, {"count", t.values.size()}});
    const auto* bytes = reinterpret_cast<const unsigned char*>(t.values.data());
    data.insert(data.end(), bytes, bytes + t.values.size() * sizeof(float));
    offset += t.values.size() * sizeof(float);
  }

  nlohmann::json header;
  header["version"] = ckpt.version;
  header["kind"] = ckpt.kind;
  header["config"] = parse_or_object(ckpt.config_json);
  header["epoch"] = ckpt.epoch;
  header["optimizer_step"] = ckpt.optimizer_step;
  header["rng_state"] = ckpt.rng_state;
  header["extra"] = parse_or_object(ckpt.extra_json);
  header["tensors"] = dir;
  header["data_bytes"] = data.size();
  header["checksum"] = crc_of(data.data(), data.size());
  const std::string text = header.dump();

  std::vector<unsigned char> out;
  out.reserve(kMagicLen + 8 + text.size() + data.size());
  out.insert(out.end(), kCheckpointMagic, kCheckpointMagic + kMagicLen);
  const std::uint64_t len = text.size();
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>((len >> (8 * i)) & 0xff));
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), data.begin(), data.end());
  return out;
}

Checkpoint deserialize_checkpoint(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < kMagicLen + 8) throw FormatError("checkpoint truncated before header");
  if (std::memcmp(bytes.data(), "ADVAE", 5) != 0) throw FormatError("not an advae checkpoint (bad magic)");
  if (bytes[5] != static_cast<unsigned char>(kCheckpointMagic[5])) {
    throw IncompatibleError(std::string("checkpoint format ADVAE") + static_cast<char>(bytes[5]) +
                            " is not supported (expected ADVAE1)");
  }
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(bytes[kMagicLen + i]) << (8 * i);
  const std::size_t header_start = kMagicLen + 8;
  if (len > bytes.size() - header_start) throw FormatError("checkpoint truncated inside header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + static_cast<long>(header_start),
                                   bytes.begin() + static_cast<long>(header_start + len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }

  Checkpoint ckpt;
  try {
    ckpt.version = header.at("version").get<int>();
    if (ckpt.version != kCheckpointVersion) {
      throw IncompatibleError("checkpoint version " + std::to_string(ckpt.version) + " (expected " +
                              std::to_string(kCheckpointVersion) + ")");
    }
    const std::size_t data_start = header_start + len;
    const std::size_t data_bytes = header.at("data_bytes").get<std::size_t>();
    if (bytes.size() - data_start != data_bytes) {
      throw FormatError("checkpoint data section has " + std::to_string(bytes.size() - data_start) +
                        " bytes, header declares " + std::to_string(data_bytes));
    }
    const unsigned char* data = bytes.data() + data_start;
    if (crc_of(data, data_bytes) != header.at("checksum").get<std::uint32_t>()) {
      throw FormatError("checkpoint checksum mismatch");
    }
    ckpt.kind = header.at("kind").get<std::string>();
    ckpt.config_json = header.at("config").dump();
    ckpt.epoch = header.at("epoch").get<std::uint64_t>();
    ckpt.optimizer_step = header.at("optimizer_step").get<std::uint64_t>();
    ckpt.rng_state = header.at("rng_state").get<std::string>();
    ckpt.extra_json = header.at("extra").dump();
    for (const auto& d : header.at("tensors")) {
      NamedTensor t;
      t.name = d.at("name").get<std::string>();
      t.shape = d.at("shape").get<Shape>();
      const auto offset = d.at("offset").get<std::size_t>();
      const auto count = d.at("count").get<std::size_t>();
      if (count != numel(t.shape) || offset + count * sizeof(float) > data_bytes) {
        throw FormatError("checkpoint tensor directory entry '" + t.name + "' is out of range");
      }
      t.values.resize(count);
      std::memcpy(t.values.data(), data + offset, count * sizeof(float));
      ckpt.tensors.push_back(std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header is malformed: ") + e.what());
  }
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  const auto bytes = serialize_checkpoint(checkpoint);
  // Write-then-rename so a crash never leaves a half-written checkpoint under the final name.
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint", tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("checkpoint write failed", tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place", path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint", path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

template <class T>
void export_parameters(const nn::Sequential<T>& net, const std::string& prefix, std::vector<NamedTensor>& out) {
  for (const auto* p : net.parameters()) {
    NamedTensor t;
    t.name = prefix + p->name;
    t.shape = p->value.shape();
    t.values.assign(p->value.values().begin(), p->value.values().end());
    out.push_back(std::move(t));
  }
}

template <class T>
void import_parameters(nn::Sequential<T>& net, const std::string& prefix, const Checkpoint& ckpt) {
  for (auto* p : net.parameters()) {
    const NamedTensor& t = ckpt.tensor(prefix + p->name);
    if (t.shape != p->value.shape()) {
      throw FormatError("tensor " + t.name + " has shape " + shape_string(t.shape) + ", model expects " +
                        shape_string(p->value.shape()));
    }
    p->value = Tensor<T>(t.shape, std::vector<T>(t.values.begin(), t.values.end()));
  }
}

template void export_parameters<float>(const nn::Sequential<float>&, const std::string&, std::vector<NamedTensor>&);
template void export_parameters<double>(const nn::Sequential<double>&, const std::string&, std::vector<NamedTensor>&);
template void import_parameters<float>(nn::Sequential<float>&, const std::string&, const Checkpoint&);
template void import_parameters<double>(nn::Sequential<double>&, const std::string&, const Checkpoint&);

void export_adam(const AdamState<float>& state, const std::vector<std::string>& names, std::vector<NamedTensor>& out) {
  if (state.m.empty()) return;
  if (state.m.size() != names.size()) throw ShapeError("export_adam: name count mismatch");
  for (std::size_t i = 0; i < names.size(); ++i) {
    out.push_back({"adam.m." + names[i], state.m[i].shape(), state.m[i].storage()});
    out.push_back({"adam.v." + names[i], state.v[i].shape(), state.v[i].storage()});
  }
}

AdamState<float> import_adam(const Checkpoint& ckpt, const std::vector<std::string>& names,
                             const std::vector<Shape>& shapes) {
  AdamState<float> state;
  state.step = ckpt.optimizer_step;
  if (state.step == 0) return state;
  for (std::size_t i = 0; i < names.size(); ++i) {
    const auto& m = ckpt.tensor("adam.m." + names[i]);
    const auto& v = ckpt.tensor("adam.v." + names[i]);
    if (m.shape != shapes[i] || v.shape != shapes[i]) throw FormatError("optimizer state shape mismatch for " + names[i]);
    state.m.emplace_back(m.shape, m.values);
    state.v.emplace_back(v.shape, v.values);
  }
  return state;
}

}  // namespace advae
