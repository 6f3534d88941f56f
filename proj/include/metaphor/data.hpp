#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <unicode/normalizer2.h>
#include <unicode/uchar.h>
#include <unicode/unistr.h>
#include <unicode/locid.h>

#include "metaphor/error.hpp"
#include "metaphor/random.hpp"

namespace metaphor {

// ---------------------------------------------------------------------------
// tokenization

struct TokenizerOptions {
  bool lowercase = true;
};

namespace detail {

inline bool is_space(UChar32 c) { return u_isUWhiteSpace(c) != 0; }
inline bool is_punct(UChar32 c) { return u_ispunct(c) != 0; }

}  // namespace detail

/// NFC-normalize, optionally lowercase, split on Unicode whitespace and strip
/// punctuation from both ends of every token. Empty tokens are dropped.
inline std::vector<std::string> tokenize(std::string_view sentence, const TokenizerOptions& options = {}) {
  icu::UnicodeString text = icu::UnicodeString::fromUTF8(icu::StringPiece(sentence.data(), static_cast<int32_t>(sentence.size())));
  UErrorCode status = U_ZERO_ERROR;
  const icu::Normalizer2* nfc = icu::Normalizer2::getNFCInstance(status);
  if (U_SUCCESS(status)) {
    icu::UnicodeString normalized = nfc->normalize(text, status);
    if (U_SUCCESS(status)) text = normalized;
  }
  if (options.lowercase) text.toLower(icu::Locale::getRoot());

  std::vector<std::string> tokens;
  const int32_t n = text.length();
  int32_t i = 0;
  while (i < n) {
    while (i < n && detail::is_space(text.char32At(i))) i = text.moveIndex32(i, 1);
    int32_t start = i;
    while (i < n && !detail::is_space(text.char32At(i))) i = text.moveIndex32(i, 1);
    int32_t end = i;
    while (start < end && detail::is_punct(text.char32At(start))) start = text.moveIndex32(start, 1);
    while (end > start) {
      const int32_t prev = text.moveIndex32(end, -1);
      if (!detail::is_punct(text.char32At(prev))) break;
      end = prev;
    }
    if (end > start) {
      std::string token;
      text.tempSubStringBetween(start, end).toUTF8String(token);
      tokens.push_back(std::move(token));
    }
  }
  return tokens;
}

// ---------------------------------------------------------------------------
// corpus

enum class Label : int { literal = 0, metaphor = 1 };

struct Example {
  std::vector<std::string> tokens;
  int label = 0;
  std::string text;
};

struct LabeledCorpus {
  std::vector<Example> examples;
  std::string source;

  std::size_t size() const { return examples.size(); }

  std::size_t count(int label) const {
    return static_cast<std::size_t>(std::count_if(examples.begin(), examples.end(),
                                                  [label](const Example& e) { return e.label == label; }));
  }

  std::vector<int> labels() const {
    std::vector<int> out;
    out.reserve(examples.size());
    for (const auto& e : examples) out.push_back(e.label);
    return out;
  }

  std::size_t max_length() const {
    std::size_t m = 0;
    for (const auto& e : examples) m = std::max(m, e.tokens.size());
    return m;
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  const char* ws = " \t\r\n\v\f";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(ws);
  return std::string(s.substr(b, e - b + 1));
}

inline std::string ascii_lower(std::string s) {
  for (char& c : s) {
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  }
  return s;
}

}  // namespace detail

/// Accepts 0/1 or literal/metaphor (case-insensitive).
inline int parse_label(std::string_view raw, std::size_t line_no) {
  const std::string s = detail::ascii_lower(detail::trim(raw));
  if (s == "0" || s == "literal") return 0;
  if (s == "1" || s == "metaphor") return 1;
  throw DataError("line " + std::to_string(line_no) + ": unknown label '" + std::string(raw) + "'");
}

/// Reads `label<TAB>sentence` lines. Blank lines are skipped.
inline LabeledCorpus read_corpus(std::istream& in, const std::string& source, const TokenizerOptions& options = {}) {
  LabeledCorpus corpus;
  corpus.source = source;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (detail::trim(line).empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw FormatError(source + ":" + std::to_string(line_no) + ": expected 'label<TAB>sentence'");
    }
    Example ex;
    try {
      ex.label = parse_label(std::string_view(line).substr(0, tab), line_no);
    } catch (const DataError& e) {
      throw DataError(source + ":" + e.what());
    }
    ex.text = line.substr(tab + 1);
    ex.tokens = tokenize(ex.text, options);
    if (ex.tokens.empty()) {
      throw FormatError(source + ":" + std::to_string(line_no) + ": sentence has no tokens");
    }
    corpus.examples.push_back(std::move(ex));
  }
  if (corpus.examples.empty()) throw DataError(source + ": corpus is empty");
  return corpus;
}

inline LabeledCorpus load_corpus(const std::string& path, const TokenizerOptions& options = {}) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open corpus file '" + path + "'");
  return read_corpus(in, path, options);
}

// ---------------------------------------------------------------------------
// vocabulary and encoding

class Vocab {
 public:
  static constexpr std::size_t pad = 0;
  static constexpr std::size_t unk = 1;

  Vocab() : tokens_{"<pad>", "<unk>"} {}

  /// Builds from an explicit token list; entries take indices 2, 3, ...
  static Vocab from_tokens(const std::vector<std::string>& tokens) {
    Vocab v;
    for (const auto& t : tokens) {
      if (v.index_.count(t)) throw DataError("duplicate vocabulary token '" + t + "'");
      v.index_.emplace(t, v.tokens_.size());
      v.tokens_.push_back(t);
    }
    return v;
  }

  std::size_t size() const { return tokens_.size(); }

  std::size_t index(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? unk : it->second;
  }

  bool contains(const std::string& token) const { return index_.count(token) != 0; }

  const std::string& token(std::size_t id) const {
    if (id >= tokens_.size()) throw VocabularyError("id " + std::to_string(id) + " outside vocabulary");
    return tokens_[id];
  }

  /// Indexed tokens in id order, excluding PAD and UNK.
  std::vector<std::string> entries() const { return {tokens_.begin() + 2, tokens_.end()}; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Tokens with frequency >= min_count, ordered by frequency then bytewise.
inline Vocab build_vocab(const std::vector<std::vector<std::string>>& sentences, std::size_t min_count = 1) {
  if (min_count < 1) throw ParameterError("build_vocab: min_count must be at least 1");
  std::map<std::string, std::size_t> freq;
  for (const auto& s : sentences) {
    for (const auto& t : s) ++freq[t];
  }
  std::vector<std::pair<std::string, std::size_t>> kept;
  for (const auto& [tok, n] : freq) {
    if (n >= min_count) kept.emplace_back(tok, n);
  }
  std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> tokens;
  tokens.reserve(kept.size());
  for (auto& [tok, n] : kept) tokens.push_back(tok);
  return Vocab::from_tokens(tokens);
}

inline Vocab build_vocab(const LabeledCorpus& corpus, std::size_t min_count = 1) {
  std::vector<std::vector<std::string>> sentences;
  sentences.reserve(corpus.size());
  for (const auto& e : corpus.examples) sentences.push_back(e.tokens);
  return build_vocab(sentences, min_count);
}

struct Encoded {
  std::vector<std::size_t> ids;  // max_len entries, PAD beyond valid_length
  std::size_t valid_length = 0;
};

inline Encoded encode(const std::vector<std::string>& tokens, const Vocab& vocab, std::size_t max_len) {
  if (max_len < 1) throw ParameterError("encode: max_len must be at least 1");
  if (tokens.empty()) throw EmptySequenceError("encode: empty sentence");
  Encoded e;
  e.valid_length = std::min(tokens.size(), max_len);
  e.ids.assign(max_len, Vocab::pad);
  for (std::size_t i = 0; i < e.valid_length; ++i) e.ids[i] = vocab.index(tokens[i]);
  return e;
}

inline std::vector<std::string> decode(const Encoded& e, const Vocab& vocab) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < e.valid_length; ++i) out.push_back(vocab.token(e.ids[i]));
  return out;
}

// ---------------------------------------------------------------------------
// cross-validation folds

struct FoldPlan {
  std::size_t k = 0;
  std::uint64_t seed = 0;
  std::vector<std::size_t> assignment;  // fold of each example

  std::vector<std::size_t> held_out(std::size_t fold) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < assignment.size(); ++i) {
      if (assignment[i] == fold) out.push_back(i);
    }
    return out;
  }

  std::vector<std::size_t> training(std::size_t fold) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < assignment.size(); ++i) {
      if (assignment[i] != fold) out.push_back(i);
    }
    return out;
  }
};

/// Deals examples round-robin into k folds. In stratified mode each class is
/// shuffled and dealt in turn, continuing from where the previous class
/// stopped, so fold sizes and per-class counts both differ by at most one.
inline FoldPlan stratified_kfold(const std::vector<int>& labels, std::size_t k, std::uint64_t seed,
                                 bool stratified = true) {
  if (k < 2) throw ParameterError("k-fold: k must be at least 2, got " + std::to_string(k));
  FoldPlan plan;
  plan.k = k;
  plan.seed = seed;
  plan.assignment.assign(labels.size(), 0);
  Rng rng(derive_seed(seed, "folds"));
  std::vector<std::vector<std::size_t>> groups;
  if (stratified) {
    groups.resize(2);
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] != 0 && labels[i] != 1) throw DataError("k-fold: labels must be binary");
      groups[static_cast<std::size_t>(labels[i])].push_back(i);
    }
    for (int c = 0; c < 2; ++c) {
      if (groups[c].size() < k) {
        throw StratificationError("k-fold: class " + std::to_string(c) + " has " + std::to_string(groups[c].size()) +
                                  " examples, fewer than k=" + std::to_string(k));
      }
    }
  } else {
    if (labels.size() < k) {
      throw StratificationError("k-fold: " + std::to_string(labels.size()) + " examples cannot fill " +
                                std::to_string(k) + " folds");
    }
    groups.emplace_back(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) groups[0][i] = i;
  }
  std::size_t next = 0;
  for (auto& group : groups) {
    rng.shuffle(std::span<std::size_t>(group));
    for (std::size_t idx : group) {
      plan.assignment[idx] = next;
      next = (next + 1) % k;
    }
  }
  return plan;
}

// ---------------------------------------------------------------------------
// metrics

struct Metrics {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  double accuracy = 0, precision = 0, recall = 0, f1 = 0;

  /// Mean of the metaphor-class and literal-class F1.
  double macro_f1() const {
    const double p0 = (tn + fn) ? static_cast<double>(tn) / static_cast<double>(tn + fn) : 0.0;
    const double r0 = (tn + fp) ? static_cast<double>(tn) / static_cast<double>(tn + fp) : 0.0;
    const double f0 = (p0 + r0) > 0 ? 2 * p0 * r0 / (p0 + r0) : 0.0;
    return 0.5 * (f1 + f0);
  }
};

inline Metrics metrics_from_counts(std::size_t tp, std::size_t fp, std::size_t fn, std::size_t tn) {
  Metrics m{tp, fp, fn, tn};
  const double total = static_cast<double>(tp + fp + fn + tn);
  m.accuracy = total > 0 ? static_cast<double>(tp + tn) / total : 0.0;
  m.precision = (tp + fp) ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
  m.recall = (tp + fn) ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
  m.f1 = (m.precision + m.recall) > 0 ? 2 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
  return m;
}

/// Confusion-matrix metrics with metaphor (1) as the positive class.
inline Metrics compute_metrics(const std::vector<int>& predictions, const std::vector<int>& labels) {
  if (predictions.size() != labels.size()) {
    throw ContractError("compute_metrics: " + std::to_string(predictions.size()) + " predictions for " +
                        std::to_string(labels.size()) + " labels");
  }
  if (labels.empty()) throw ContractError("compute_metrics: no examples");
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool p = predictions[i] == 1, y = labels[i] == 1;
    if (p && y) ++tp;
    else if (p) ++fp;
    else if (y) ++fn;
    else ++tn;
  }
  return metrics_from_counts(tp, fp, fn, tn);
}

}  // namespace metaphor
