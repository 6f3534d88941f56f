#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "metaphor/checkpoint.hpp"
#include "metaphor/config.hpp"
#include "metaphor/data.hpp"
#include "metaphor/embed_io.hpp"
#include "metaphor/experiment.hpp"
#include "metaphor/gradcheck_suite.hpp"
#include "metaphor/models.hpp"

namespace metaphor {

enum ExitCode : int { exit_ok = 0, exit_failure = 1, exit_config = 2, exit_data = 3, exit_gradcheck = 4 };

namespace detail {

/// Writes to `path`, or to `fallback` when the path is empty.
class Sink {
 public:
  Sink(const std::string& path, std::ostream& fallback) : path_(path) {
    if (path.empty()) {
      out_ = &fallback;
    } else {
      file_ = std::make_unique<std::ofstream>(path, std::ios::binary);
      if (!*file_) throw IoError("cannot write '" + path + "'");
      out_ = file_.get();
    }
  }

  std::ostream& stream() { return *out_; }

  void close() {
    out_->flush();
    if (file_) {
      file_->close();
      if (!*file_) throw IoError("failed while writing '" + path_ + "'");
    }
  }

 private:
  std::string path_;
  std::unique_ptr<std::ofstream> file_;
  std::ostream* out_ = nullptr;
};

struct Prepared {
  LabeledCorpus corpus;
  Vocab vocab;
  std::size_t corpus_max_len = 0;
};

inline Prepared prepare_corpus(const Config& c) {
  if (c.str("corpus").empty()) throw ConfigError("no corpus given (set 'corpus')");
  Prepared p;
  p.corpus = load_corpus(c.str("corpus"), TokenizerOptions{c.flag("lowercase")});
  p.vocab = build_vocab(p.corpus, std::max<std::size_t>(1, c.size("min_count")));
  if (c.size("min_count") == 0) throw ConfigError("min_count must be at least 1");
  p.corpus_max_len = c.size("max_len") ? c.size("max_len") : p.corpus.max_length();
  return p;
}

/// Sentence length budget for one model: the configured or corpus length,
/// widened to the largest kernel for CNNs.
inline std::size_t model_max_len(const ModelConfig& m, std::size_t base) {
  return m.architecture == Architecture::cnn ? std::max(base, m.max_kernel()) : base;
}

inline std::unordered_set<std::string> vocab_set(const Vocab& vocab) {
  auto entries = vocab.entries();
  return {entries.begin(), entries.end()};
}

inline std::optional<PretrainedVectors> load_vectors(const std::string& path, const Vocab& vocab) {
  if (path.empty()) return std::nullopt;
  const auto keep = vocab_set(vocab);
  return load_vec(path, &keep);
}

inline std::size_t resolve_dim(std::size_t configured, const std::optional<PretrainedVectors>& vectors) {
  if (configured) return configured;
  return vectors ? vectors->dim : 50;
}

inline std::string expand_pattern(const std::string& pattern, std::size_t dim) {
  std::string out = pattern;
  const std::string key = "{D}";
  for (auto pos = out.find(key); pos != std::string::npos; pos = out.find(key, pos)) {
    out.replace(pos, key.size(), std::to_string(dim));
  }
  return out;
}

inline void note_warnings(const std::optional<PretrainedVectors>& v, std::ostream& err) {
  if (!v) return;
  for (const auto& w : v->warnings) err << "warning: " << w << '\n';
}

template <std::floating_point Real>
RunRow crossval_row(const Prepared& data, const EmbeddingMatrix<Real>& matrix, ModelConfig model,
                    const TrainOptions& train, const CrossvalOptions& cv, bool timed) {
  model.max_len = model_max_len(model, data.corpus_max_len);
  model.validate();
  const auto encoded = encode_corpus(data.corpus, data.vocab, model.max_len);
  const auto result = crossval(std::span<const EncodedExample>(encoded), matrix, model, train, cv);
  return make_row(model, train, result, timed, model.seed);
}

template <std::floating_point Real>
int crossval_impl(const Config& c, std::ostream& out, std::ostream& err) {
  const Prepared data = prepare_corpus(c);
  ModelConfig model = model_config(c);
  const auto vectors = load_vectors(c.str("vectors"), data.vocab);
  note_warnings(vectors, err);
  model.embedding_dim = resolve_dim(model.embedding_dim, vectors);
  const auto matrix = build_matrix<Real>(data.vocab, vectors ? &*vectors : nullptr, model.embedding_dim, model.seed);
  const TrainOptions train = train_options(c);
  const CrossvalOptions cv = crossval_options(c);
  const RunRow row = crossval_row(data, matrix, model, train, cv, c.flag("record_time"));
  Sink sink(c.str("report"), out);
  write_report(sink.stream(), {row});
  sink.close();
  char line[128];
  std::snprintf(line, sizeof line, "%s D=%zu fine_tune=%s accuracy=%.4f f1=%.4f\n", row.model.c_str(), row.dim,
                row.fine_tune ? "true" : "false", row.accuracy, row.f1);
  err << line;
  return exit_ok;
}

template <std::floating_point Real>
int sweep_impl(const Config& c, std::ostream& out, std::ostream& err) {
  if (!c.str("vectors").empty()) throw ConfigError("sweep reads vectors through 'vec_pattern', not 'vectors'");
  const auto models = c.get<std::vector<std::string>>("models");
  const auto dims = c.get<std::vector<std::size_t>>("dims");
  const auto modes = c.get<std::vector<bool>>("fine_tune_modes");
  if (models.empty() || dims.empty() || modes.empty()) throw ConfigError("sweep grid is empty");
  for (std::size_t d : dims) {
    if (d == 0) throw ConfigError("sweep dims must be positive");
  }
  const std::string pattern = c.str("vec_pattern");
  if (!pattern.empty()) {
    std::string missing;
    for (std::size_t d : dims) {
      if (!std::filesystem::exists(expand_pattern(pattern, d))) missing += (missing.empty() ? "" : ", ") + std::to_string(d);
    }
    if (!missing.empty()) throw IoError("missing embedding files for D = " + missing + " (pattern '" + pattern + "')");
  }
  std::vector<Architecture> archs;
  for (const auto& m : models) archs.push_back(parse_architecture(m));

  const Prepared data = prepare_corpus(c);
  const ModelConfig base = model_config(c);
  const TrainOptions train = train_options(c);
  const CrossvalOptions cv = crossval_options(c);
  const bool timed = c.flag("record_time");

  std::map<std::size_t, EmbeddingMatrix<Real>> matrices;
  for (std::size_t d : dims) {
    if (matrices.count(d)) continue;
    const auto vectors = pattern.empty() ? std::nullopt : load_vectors(expand_pattern(pattern, d), data.vocab);
    note_warnings(vectors, err);
    matrices.emplace(d, build_matrix<Real>(data.vocab, vectors ? &*vectors : nullptr, d, base.seed));
  }

  std::vector<RunRow> rows;
  for (Architecture arch : archs) {
    for (std::size_t d : dims) {
      for (bool ft : modes) {
        ModelConfig model = base;
        model.architecture = arch;
        model.embedding_dim = d;
        model.fine_tune = ft;
        rows.push_back(crossval_row(data, matrices.at(d), model, train, cv, timed));
        const RunRow& r = rows.back();
        char line[160];
        std::snprintf(line, sizeof line, "[%zu] %s D=%zu fine_tune=%s accuracy=%.4f f1=%.4f\n", rows.size(),
                      r.model.c_str(), r.dim, ft ? "true" : "false", r.accuracy, r.f1);
        err << line << std::flush;
      }
    }
  }
  Sink report(c.str("report"), out);
  write_report(report.stream(), rows);
  report.close();
  Sink summary(c.str("summary"), out);
  if (c.str("report").empty() && c.str("summary").empty()) out << '\n';
  write_summary(summary.stream(), rows);
  summary.close();
  return exit_ok;
}

template <std::floating_point Real>
int train_impl(const Config& c, std::ostream& out, std::ostream& err) {
  const Prepared data = prepare_corpus(c);
  ModelConfig model = model_config(c);
  const auto vectors = load_vectors(c.str("vectors"), data.vocab);
  note_warnings(vectors, err);
  model.embedding_dim = resolve_dim(model.embedding_dim, vectors);
  model.max_len = model_max_len(model, data.corpus_max_len);
  model.validate();
  const auto matrix = build_matrix<Real>(data.vocab, vectors ? &*vectors : nullptr, model.embedding_dim, model.seed);
  if (vectors) {
    char line[96];
    std::snprintf(line, sizeof line, "embedding coverage: %.4f (%zu of %zu tokens)\n", matrix.coverage, matrix.found,
                  data.vocab.size() - 2);
    err << line;
  }
  Model<Real> net = build(model, matrix);
  const auto encoded = encode_corpus(data.corpus, data.vocab, model.max_len);
  std::vector<std::size_t> all(encoded.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  TrainOptions options = train_options(c);
  options.track_train_accuracy = true;

  Sink log(c.str("log"), out);
  log.stream() << "epoch,loss,train_accuracy\n";
  train(net, std::span<const EncodedExample>(encoded), std::span<const std::size_t>(all), options,
        [&](const EpochStats& s) {
          char line[96];
          std::snprintf(line, sizeof line, "%zu,%.6f,%.6f\n", s.epoch, s.mean_loss, s.train_accuracy);
          log.stream() << line << std::flush;
        });
  log.close();
  const std::string path = c.str("checkpoint");
  if (path.empty()) throw ConfigError("no checkpoint path given (set 'checkpoint')");
  save_checkpoint(path, net, data.vocab, TokenizerOptions{c.flag("lowercase")});
  err << "checkpoint written to " << path << '\n';
  return exit_ok;
}

template <std::floating_point Real>
int predict_impl(const Config& c, std::ostream& out) {
  const auto ck = load_checkpoint<Real>(c.str("checkpoint"));
  const std::string input = c.str("input");
  if (input.empty()) throw ConfigError("no input file given (set 'input')");
  const std::string format = c.str("input_format");
  if (format != "text" && format != "tsv") throw ConfigError("input_format must be text or tsv");
  std::ifstream in(input, std::ios::binary);
  if (!in) throw IoError("cannot open input file '" + input + "'");
  Sink sink(c.str("predictions"), out);
  std::string line;
  const std::size_t max_len = ck.model.config.max_len;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::string sentence = line;
    if (format == "tsv") {
      const auto tab = line.find('\t');
      if (tab != std::string::npos) sentence = line.substr(tab + 1);
    }
    auto tokens = tokenize(sentence, ck.tokenizer);
    if (tokens.empty()) tokens.push_back("<unk>");
    const Encoded e = encode(tokens, ck.vocab, max_len);
    const Real p = predict_proba(ck.model, e.ids, e.valid_length);
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", static_cast<double>(p));
    sink.stream() << buf << '\t' << (p > Real(0.5) ? 1 : 0) << '\t' << sentence << '\n';
  }
  sink.close();
  return exit_ok;
}

inline bool use_float(const Config& c) {
  const std::string p = c.str("precision");
  if (p == "double") return false;
  if (p == "float") return true;
  throw ConfigError("precision must be double or float");
}

}  // namespace detail

inline int cmd_crossval(const Config& c, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  return detail::use_float(c) ? detail::crossval_impl<float>(c, out, err) : detail::crossval_impl<double>(c, out, err);
}

inline int cmd_sweep(const Config& c, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  return detail::use_float(c) ? detail::sweep_impl<float>(c, out, err) : detail::sweep_impl<double>(c, out, err);
}

inline int cmd_train(const Config& c, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  return detail::use_float(c) ? detail::train_impl<float>(c, out, err) : detail::train_impl<double>(c, out, err);
}

inline int cmd_predict(const Config& c, std::ostream& out = std::cout) {
  const std::string path = c.str("checkpoint");
  if (path.empty()) throw ConfigError("no checkpoint given (set 'checkpoint')");
  return checkpoint_value_bytes(path) == sizeof(float) ? detail::predict_impl<float>(c, out)
                                                       : detail::predict_impl<double>(c, out);
}

inline int cmd_gradcheck(const Config& c, std::ostream& out = std::cout) {
  GradCheckOptions options;
  options.trials = c.size("trials");
  options.eps = c.real("gradcheck_eps");
  options.tolerance = c.real("tolerance");
  options.seed = c.get<std::uint64_t>("seed");
  for (const auto& name : detail::split_list(c.str("components"))) {
    if (!name.empty()) options.only.push_back(name);
  }
  if (!(options.eps > 0.0)) throw ConfigError("gradcheck_eps must be positive");
  const ScopedFault fault(parse_fault(c.str("inject_fault")));
  const GradCheckSummary summary = run_gradcheck_suite(options, &out);
  std::string failed;
  double worst = 0.0;
  for (const auto& comp : summary.components) {
    worst = std::max(worst, comp.worst);
    if (!comp.passed) failed += (failed.empty() ? "" : ", ") + comp.name;
  }
  char line[160];
  std::snprintf(line, sizeof line, "gradcheck: %zu components, worst relative error %.3e, %.1fs\n",
                summary.components.size(), worst, summary.seconds);
  out << line;
  if (!failed.empty()) {
    out << "gradcheck FAILED: " << failed << '\n';
    return exit_gradcheck;
  }
  out << "gradcheck passed\n";
  return exit_ok;
}

}  // namespace metaphor
