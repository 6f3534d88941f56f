#pragma once

// Checkpoint container:
//   8 bytes  magic "MTPHCKPT"
//   u32      format version
//   u32      bytes per value (8 or 4)
//   u64      header length, then a JSON header (config, tokenizer, vocabulary,
//            tensor names and shapes)
//   raw little-endian values of every tensor, in header order

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "metaphor/data.hpp"
#include "metaphor/error.hpp"
#include "metaphor/models.hpp"

namespace metaphor {

inline constexpr char checkpoint_magic[8] = {'M', 'T', 'P', 'H', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t checkpoint_version = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <std::floating_point Real>
struct Checkpoint {
  Model<Real> model;
  Vocab vocab;
  TokenizerOptions tokenizer;
};

namespace detail {

template <typename T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T read_pod(std::istream& in, const std::string& path) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw FormatError(path + ": truncated checkpoint");
  return v;
}

struct CheckpointHeader {
  std::uint32_t value_bytes = 0;
  nlohmann::json meta;
};

inline CheckpointHeader read_header(std::istream& in, const std::string& path) {
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, checkpoint_magic, 8) != 0) throw FormatError(path + ": not a checkpoint file");
  const auto version = read_pod<std::uint32_t>(in, path);
  if (version != checkpoint_version) {
    throw CompatibilityError(path + ": unsupported checkpoint version " + std::to_string(version));
  }
  CheckpointHeader h;
  h.value_bytes = read_pod<std::uint32_t>(in, path);
  const auto len = read_pod<std::uint64_t>(in, path);
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw FormatError(path + ": truncated checkpoint header");
  try {
    h.meta = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": corrupt checkpoint header: " + e.what());
  }
  return h;
}

}  // namespace detail

template <std::floating_point Real>
void save_checkpoint(const std::string& path, const Model<Real>& model, const Vocab& vocab,
                     const TokenizerOptions& tokenizer) {
  nlohmann::json meta;
  meta["config"] = to_json(model.config);
  meta["lowercase"] = tokenizer.lowercase;
  meta["vocab"] = vocab.entries();
  nlohmann::json tensors = nlohmann::json::array();
  const auto named = model.tensors();
  for (const auto& nt : named) tensors.push_back({{"name", nt.name}, {"shape", nt.tensor.shape()}});
  meta["tensors"] = tensors;
  const std::string header = meta.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint '" + path + "'");
  out.write(checkpoint_magic, 8);
  detail::write_pod(out, checkpoint_version);
  detail::write_pod(out, static_cast<std::uint32_t>(sizeof(Real)));
  detail::write_pod(out, static_cast<std::uint64_t>(header.size()));
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const auto& nt : named) {
    out.write(reinterpret_cast<const char*>(nt.tensor.data()), static_cast<std::streamsize>(nt.tensor.size() * sizeof(Real)));
  }
  if (!out) throw IoError("failed while writing checkpoint '" + path + "'");
}

/// Bytes per stored value (8 for 64-bit, 4 for 32-bit checkpoints).
inline std::uint32_t checkpoint_value_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path + "'");
  return detail::read_header(in, path).value_bytes;
}

template <std::floating_point Real>
Checkpoint<Real> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path + "'");
  const auto header = detail::read_header(in, path);
  if (header.value_bytes != sizeof(Real)) {
    throw CompatibilityError(path + ": checkpoint stores " + std::to_string(header.value_bytes * 8) +
                             "-bit values, expected " + std::to_string(sizeof(Real) * 8));
  }
  Checkpoint<Real> ck;
  try {
    ck.tokenizer.lowercase = header.meta.at("lowercase").get<bool>();
    ck.vocab = Vocab::from_tokens(header.meta.at("vocab").get<std::vector<std::string>>());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": corrupt checkpoint header: " + e.what());
  }
  const ModelConfig config = model_config_from_json(header.meta.at("config"));
  Tensor<Real> placeholder({ck.vocab.size(), config.embedding_dim});
  ck.model = build(config, placeholder);

  auto named = ck.model.tensors();
  const auto& listed = header.meta.at("tensors");
  if (listed.size() != named.size()) {
    throw CompatibilityError(path + ": checkpoint lists " + std::to_string(listed.size()) + " tensors, model has " +
                             std::to_string(named.size()));
  }
  for (std::size_t i = 0; i < named.size(); ++i) {
    const auto shape = listed[i].at("shape").get<Shape>();
    if (listed[i].at("name").get<std::string>() != named[i].name || shape != named[i].tensor.shape()) {
      throw CompatibilityError(path + ": tensor '" + named[i].name + "' has shape " + shape_str(shape) +
                               " in the checkpoint but " + shape_str(named[i].tensor.shape()) +
                               " for the stored configuration and vocabulary");
    }
    auto& t = named[i].tensor;
    in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(Real)));
    if (!in) throw FormatError(path + ": truncated tensor data for '" + named[i].name + "'");
  }
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError(path + ": trailing bytes after tensor data");
  return ck;
}

}  // namespace metaphor
