#pragma once

#include <charconv>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "metaphor/data.hpp"
#include "metaphor/error.hpp"
#include "metaphor/random.hpp"
#include "metaphor/tensor.hpp"

namespace metaphor {

/// Word vectors read from a fastText `.vec` text file.
struct PretrainedVectors {
  std::size_t dim = 0;
  std::vector<std::string> words;  // first-seen order, duplicates collapsed
  std::unordered_map<std::string, std::vector<double>> vectors;
  std::vector<double> mean;  // elementwise mean over every row read
  std::size_t rows_read = 0;
  std::vector<std::string> warnings;

  std::size_t size() const { return vectors.size(); }
};

namespace detail {

inline std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ' && line[j] != '\t' && line[j] != '\r') ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

inline bool parse_size(std::string_view s, std::size_t& out) {
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && p == s.data() + s.size();
}

inline bool parse_double(std::string_view s, double& out) {
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && p == s.data() + s.size() && std::isfinite(out);
}

}  // namespace detail

/// Parses `N D` followed by N rows of `word v1 ... vD`. When `keep` is given,
/// only those words are stored, though the mean still covers every row.
inline PretrainedVectors read_vec(std::istream& in, const std::string& source,
                                  const std::unordered_set<std::string>* keep = nullptr) {
  PretrainedVectors out;
  std::string line;
  if (!std::getline(in, line)) throw FormatError(source + ": missing 'N D' header");
  const auto header = detail::split_ws(line);
  std::size_t n = 0;
  if (header.size() != 2 || !detail::parse_size(header[0], n) || !detail::parse_size(header[1], out.dim) ||
      out.dim == 0) {
    throw FormatError(source + ":1: malformed header, expected two integers 'N D'");
  }
  out.mean.assign(out.dim, 0.0);
  std::size_t line_no = 1;
  std::vector<double> row(out.dim);
  while (std::getline(in, line)) {
    ++line_no;
    const auto fields = detail::split_ws(line);
    if (fields.empty()) continue;
    if (fields.size() != out.dim + 1) {
      throw FormatError(source + ":" + std::to_string(line_no) + ": expected a word and " + std::to_string(out.dim) +
                        " values, found " + std::to_string(fields.size() - 1));
    }
    for (std::size_t j = 0; j < out.dim; ++j) {
      if (!detail::parse_double(fields[j + 1], row[j])) {
        throw FormatError(source + ":" + std::to_string(line_no) + ": non-numeric component '" +
                          std::string(fields[j + 1]) + "'");
      }
      out.mean[j] += row[j];
    }
    ++out.rows_read;
    std::string word(fields[0]);
    if (keep && !keep->count(word)) continue;
    auto [it, inserted] = out.vectors.try_emplace(word, row);
    if (inserted) {
      out.words.push_back(word);
    } else {
      it->second = row;
      out.warnings.push_back(source + ":" + std::to_string(line_no) + ": duplicate word '" + word +
                             "', keeping the last vector");
    }
  }
  if (out.rows_read != n) {
    throw FormatError(source + ": header declares " + std::to_string(n) + " rows but " +
                      std::to_string(out.rows_read) + " were found");
  }
  if (out.rows_read > 0) {
    for (double& v : out.mean) v /= static_cast<double>(out.rows_read);
  }
  return out;
}

inline PretrainedVectors load_vec(const std::string& path, const std::unordered_set<std::string>* keep = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open vector file '" + path + "'");
  return read_vec(in, path, keep);
}

/// Writes the shortest decimal form that round-trips each value.
inline void write_vec(std::ostream& out, const PretrainedVectors& vectors) {
  out << vectors.words.size() << ' ' << vectors.dim << '\n';
  char buf[64];
  for (const auto& w : vectors.words) {
    out << w;
    for (double v : vectors.vectors.at(w)) {
      auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
      out << ' ' << std::string_view(buf, static_cast<std::size_t>(p - buf));
    }
    out << '\n';
  }
}

inline void save_vec(const std::string& path, const PretrainedVectors& vectors) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write vector file '" + path + "'");
  write_vec(out, vectors);
}

template <std::floating_point Real>
struct EmbeddingMatrix {
  Tensor<Real> values;  // |V|×D, row 0 is PAD
  std::size_t dim = 0;
  double coverage = 0.0;
  std::size_t found = 0;
};

/// Rows for every vocabulary index. With pretrained vectors, known words are
/// copied and the rest (UNK included) get the pretrained mean plus uniform
/// noise in ±0.01. Without them every non-PAD row is uniform(±1/sqrt(D)).
template <std::floating_point Real>
EmbeddingMatrix<Real> build_matrix(const Vocab& vocab, const PretrainedVectors* pretrained, std::size_t dim,
                                   std::uint64_t seed) {
  if (dim == 0) throw ConfigError("embedding dimensionality must be positive");
  if (pretrained && pretrained->dim != dim) {
    throw ConfigError("embedding dimensionality mismatch: configured D=" + std::to_string(dim) +
                      " but vectors have D=" + std::to_string(pretrained->dim));
  }
  EmbeddingMatrix<Real> m;
  m.dim = dim;
  m.values = Tensor<Real>({vocab.size(), dim});
  Rng rng(derive_seed(seed, "embedding"));
  Real* data = m.values.data();
  if (!pretrained) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(dim));
    for (std::size_t i = 1; i < vocab.size(); ++i) {
      for (std::size_t j = 0; j < dim; ++j) data[i * dim + j] = static_cast<Real>(rng.uniform(-bound, bound));
    }
    return m;
  }
  for (std::size_t i = 1; i < vocab.size(); ++i) {
    auto it = i >= 2 ? pretrained->vectors.find(vocab.token(i)) : pretrained->vectors.end();
    if (it != pretrained->vectors.end()) {
      for (std::size_t j = 0; j < dim; ++j) data[i * dim + j] = static_cast<Real>(it->second[j]);
      ++m.found;
    } else {
      for (std::size_t j = 0; j < dim; ++j) {
        data[i * dim + j] = static_cast<Real>(pretrained->mean[j] + rng.uniform(-0.01, 0.01));
      }
    }
  }
  const std::size_t real_tokens = vocab.size() - 2;
  m.coverage = real_tokens ? static_cast<double>(m.found) / static_cast<double>(real_tokens) : 0.0;
  return m;
}

}  // namespace metaphor
