#pragma once

// Flat parameter container.
//
//   "GCTCKPT1"                      8 bytes
//   u64 header length, header JSON  {"precision", "config", "vocab", ...}
//   u64 tensor count
//   per tensor: u32 name length, name, u32 rank, u64 dims[rank],
//               raw little-endian scalars (float32 or float64)

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <type_traits>
#include <vector>

#include "json.hpp"

#include "gct/config.hpp"
#include "gct/data.hpp"
#include "gct/error.hpp"
#include "gct/model.hpp"

namespace gct {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'G', 'C', 'T', 'C', 'K', 'P', 'T', '1'};

template <class T>
constexpr const char* precision_name() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? "float32" : "float64";
}

struct RawTensor {
  Shape shape;
  std::string precision;
  std::vector<unsigned char> bytes;

  template <class T>
  std::vector<T> as() const {
    const std::size_t n = shape_numel(shape);
    std::vector<T> out(n);
    if (precision == "float32") {
      for (std::size_t i = 0; i < n; ++i) {
        float v;
        std::memcpy(&v, bytes.data() + i * sizeof(float), sizeof(float));
        out[i] = static_cast<T>(v);
      }
    } else {
      for (std::size_t i = 0; i < n; ++i) {
        double v;
        std::memcpy(&v, bytes.data() + i * sizeof(double), sizeof(double));
        out[i] = static_cast<T>(v);
      }
    }
    return out;
  }
};

struct CheckpointFile {
  nlohmann::json header;
  std::vector<std::pair<std::string, RawTensor>> tensors;
};

namespace detail {

template <class U>
void put(std::ostream& out, U v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <class U>
U get(std::istream& in, const char* what) {
  U v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(U))) throw FormatError(std::string("checkpoint: truncated ") + what);
  return v;
}

}  // namespace detail

inline nlohmann::json vocab_to_json(const Vocab& v) { return v.events(); }

inline Vocab vocab_from_json(const nlohmann::json& j) {
  std::set<std::string> names;
  for (const auto& e : j) names.insert(e.get<std::string>());
  Vocab v(names);
  if (v.num_events() != j.size()) throw FormatError("checkpoint: duplicate vocabulary entries");
  return v;
}

template <class T>
void save_checkpoint(const std::string& path, const GctConfig& cfg, const Vocab& vocab, const GctParams<T>& params,
                     const nlohmann::json& extra = nlohmann::json::object()) {
  nlohmann::json header = extra;
  header["precision"] = precision_name<T>();
  header["config"] = cfg;
  header["vocab"] = vocab_to_json(vocab);
  const std::string h = header.dump();
  const auto named = named_params(params);

  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("checkpoint: cannot write " + path);
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put<std::uint64_t>(out, h.size());
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  detail::put<std::uint64_t>(out, named.size());
  for (const auto& [name, t] : named) {
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.ndim()));
    for (auto d : t.shape()) detail::put<std::uint64_t>(out, d);
    out.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.size() * sizeof(T)));
  }
  if (!out) throw FormatError("checkpoint: write failed for " + path);
}

inline CheckpointFile read_checkpoint_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("checkpoint: cannot open " + path);
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
    throw FormatError("checkpoint: bad magic in " + path);
  }
  CheckpointFile f;
  const auto hlen = detail::get<std::uint64_t>(in, "header length");
  std::string h(hlen, '\0');
  if (!in.read(h.data(), static_cast<std::streamsize>(hlen))) throw FormatError("checkpoint: truncated header");
  try {
    f.header = nlohmann::json::parse(h);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: header is not JSON: ") + e.what());
  }
  const std::string precision = f.header.value("precision", "");
  if (precision != "float32" && precision != "float64") throw FormatError("checkpoint: unknown precision '" + precision + "'");
  const std::size_t scalar = precision == "float32" ? 4 : 8;
  const auto count = detail::get<std::uint64_t>(in, "tensor count");
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto nlen = detail::get<std::uint32_t>(in, "name length");
    std::string name(nlen, '\0');
    if (!in.read(name.data(), nlen)) throw FormatError("checkpoint: truncated name");
    RawTensor t;
    t.precision = precision;
    const auto rank = detail::get<std::uint32_t>(in, "rank");
    for (std::uint32_t r = 0; r < rank; ++r) t.shape.push_back(detail::get<std::uint64_t>(in, "dims"));
    t.bytes.resize(shape_numel(t.shape) * scalar);
    if (!in.read(reinterpret_cast<char*>(t.bytes.data()), static_cast<std::streamsize>(t.bytes.size()))) {
      throw FormatError("checkpoint: truncated data for '" + name + "'");
    }
    f.tensors.emplace_back(std::move(name), std::move(t));
  }
  return f;
}

template <class T>
struct LoadedModel {
  GctConfig config;
  Vocab vocab;
  GctParams<T> params;
  nlohmann::json header;
};

// Loads into precision T (converting if the file was written in the other one).
template <class T>
LoadedModel<T> load_checkpoint(const std::string& path) {
  CheckpointFile f = read_checkpoint_file(path);
  LoadedModel<T> m;
  m.header = f.header;
  try {
    m.config = f.header.at("config").get<GctConfig>();
    m.vocab = vocab_from_json(f.header.at("vocab"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: bad header: ") + e.what());
  }
  Rng rng(0);
  m.params = init_params<T>(m.config, rng);
  std::map<std::string, const RawTensor*> by_name;
  for (const auto& [name, t] : f.tensors) by_name[name] = &t;
  auto named = named_params(m.params);
  if (named.size() != f.tensors.size()) {
    throw FormatError("checkpoint: " + std::to_string(f.tensors.size()) + " tensors, config implies " +
                      std::to_string(named.size()));
  }
  for (auto& [name, t] : named) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("checkpoint: missing tensor '" + name + "'");
    if (it->second->shape != t.shape()) {
      throw FormatError("checkpoint: tensor '" + name + "' has shape " + shape_str(it->second->shape) +
                        ", expected " + shape_str(t.shape()));
    }
    const auto values = it->second->template as<T>();
    std::copy(values.begin(), values.end(), t.data().begin());
  }
  return m;
}

}  // namespace gct
