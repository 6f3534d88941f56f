#pragma once

#include <cstddef>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "metaphor/data.hpp"
#include "metaphor/embed_io.hpp"
#include "metaphor/error.hpp"
#include "metaphor/random.hpp"

namespace metaphor::synthetic {

inline std::string token_name(std::size_t i) {
  std::string digits = std::to_string(i);
  return "w" + std::string(digits.size() < 2 ? 1 : 0, '0') + digits;
}

struct TaskOptions {
  std::size_t sentences = 1000;
  std::size_t min_length = 5;
  std::size_t max_length = 15;
  std::size_t vocab = 50;
  std::uint64_t seed = 1;
};

/// Token 0 is the marker, token 1 the verb; everything else is filler.
inline std::string marker_token() { return token_name(0); }
inline std::string verb_token() { return token_name(1); }

inline Example make_example(std::vector<std::string> tokens, int label) {
  Example ex;
  for (std::size_t i = 0; i < tokens.size(); ++i) ex.text += (i ? " " : "") + tokens[i];
  ex.tokens = std::move(tokens);
  ex.label = label;
  return ex;
}

/// Co-occurrence task: a sentence is a metaphor iff it contains both the
/// marker and the verb. Half the sentences are positive; negatives are split
/// between marker-only, verb-only and neither.
inline LabeledCorpus cooccurrence_corpus(const TaskOptions& options) {
  if (options.vocab < 3) throw ParameterError("synthetic task needs at least 3 tokens");
  if (options.min_length < 2 || options.min_length > options.max_length) {
    throw ParameterError("synthetic task needs 2 <= min_length <= max_length");
  }
  Rng rng(derive_seed(options.seed, "cooccurrence"));
  LabeledCorpus corpus;
  corpus.source = "synthetic:cooccurrence";
  const std::size_t fillers = options.vocab - 2;
  for (std::size_t n = 0; n < options.sentences; ++n) {
    const std::size_t len = options.min_length + rng.index(options.max_length - options.min_length + 1);
    std::vector<std::string> tokens(len);
    for (auto& t : tokens) t = token_name(2 + rng.index(fillers));
    const int label = n % 2 == 0 ? 1 : 0;
    const std::size_t kind = label ? 0 : 1 + rng.index(3);  // 0 both, 1 marker, 2 verb, 3 neither
    const std::size_t a = rng.index(len);
    std::size_t b = rng.index(len - 1);
    if (b >= a) ++b;
    if (kind == 0 || kind == 1) tokens[a] = marker_token();
    if (kind == 0) tokens[b] = verb_token();
    if (kind == 2) tokens[a] = verb_token();
    corpus.examples.push_back(make_example(std::move(tokens), label));
  }
  Rng order(derive_seed(options.seed, "order"));
  order.shuffle(std::span<Example>(corpus.examples));
  return corpus;
}

/// Random tokens with random labels, for memorization checks.
inline LabeledCorpus random_label_corpus(std::size_t sentences, std::size_t vocab, std::uint64_t seed,
                                         std::size_t min_length = 5, std::size_t max_length = 15) {
  if (vocab == 0 || min_length == 0 || min_length > max_length) throw ParameterError("invalid random corpus shape");
  Rng rng(derive_seed(seed, "random-labels"));
  LabeledCorpus corpus;
  corpus.source = "synthetic:random-labels";
  for (std::size_t n = 0; n < sentences; ++n) {
    const std::size_t len = min_length + rng.index(max_length - min_length + 1);
    std::vector<std::string> tokens(len);
    for (auto& t : tokens) t = token_name(rng.index(vocab));
    corpus.examples.push_back(make_example(std::move(tokens), rng.bernoulli(0.5) ? 1 : 0));
  }
  return corpus;
}

/// Random word vectors that carry no task signal: the marker and verb rows
/// are near-copies of filler rows, so frozen embeddings barely tell them apart.
inline PretrainedVectors mismatched_vectors(std::size_t vocab, std::size_t dim, std::uint64_t seed) {
  if (vocab < 4 || dim == 0) throw ParameterError("mismatched vectors need vocab >= 4 and dim > 0");
  Rng rng(derive_seed(seed, "mismatched"));
  PretrainedVectors out;
  out.dim = dim;
  out.mean.assign(dim, 0.0);
  std::vector<std::vector<double>> rows(vocab, std::vector<double>(dim));
  for (std::size_t i = 2; i < vocab; ++i) {
    for (double& v : rows[i]) v = rng.uniform(-0.5, 0.5);
  }
  for (std::size_t i = 0; i < 2; ++i) {
    const auto& source = rows[2 + i];
    for (std::size_t j = 0; j < dim; ++j) rows[i][j] = source[j] + rng.uniform(-0.01, 0.01);
  }
  for (std::size_t i = 0; i < vocab; ++i) {
    const std::string w = token_name(i);
    out.words.push_back(w);
    out.vectors[w] = rows[i];
    for (std::size_t j = 0; j < dim; ++j) out.mean[j] += rows[i][j] / static_cast<double>(vocab);
  }
  out.rows_read = vocab;
  return out;
}

inline void write_corpus(std::ostream& out, const LabeledCorpus& corpus) {
  for (const auto& ex : corpus.examples) out << ex.label << '\t' << ex.text << '\n';
}

}  // namespace metaphor::synthetic
