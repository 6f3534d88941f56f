#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "metaphor/data.hpp"
#include "metaphor/error.hpp"
#include "metaphor/experiment.hpp"
#include "metaphor/models.hpp"

namespace metaphor {

using Json = nlohmann::json;

struct ConfigKey {
  const char* name;
  const char* help;
};

/// Every recognised key with its default value. The type of each default
/// decides how command-line overrides are parsed.
inline const Json& config_defaults() {
  static const Json defaults = {
      // paths
      {"corpus", ""},
      {"vectors", ""},
      {"vec_pattern", ""},
      {"report", ""},
      {"summary", ""},
      {"checkpoint", "model.ckpt"},
      {"log", ""},
      {"input", ""},
      {"input_format", "text"},
      {"predictions", ""},
      // model
      {"architecture", "bilstm"},
      {"embedding_dim", 0},
      {"kernel_heights", {3, 4, 5}},
      {"out_channels", 32},
      {"hidden_size", 100},
      {"fc_units", 100},
      {"dropout_p", 0.5},
      {"use_dropout", true},
      {"fine_tune", true},
      {"max_len", 0},
      {"bidirectional", true},
      {"pooling", "max"},
      {"crnn_cell", "lstm"},
      {"seed", 1},
      {"precision", "double"},
      // training
      {"lr", 1e-3},
      {"beta1", 0.9},
      {"beta2", 0.999},
      {"adam_eps", 1e-8},
      {"clip_norm", 0.0},
      {"batch", 32},
      {"epochs", 20},
      // data
      {"lowercase", true},
      {"min_count", 1},
      // evaluation
      {"folds", 10},
      {"stratified", true},
      {"workers", 1},
      {"record_time", false},
      // sweep
      {"models", {"cnn", "bilstm", "bigru", "crnn"}},
      {"dims", {50, 100, 150, 200, 250, 300, 350, 400, 450, 500}},
      {"fine_tune_modes", {false, true}},
      // gradcheck
      {"trials", 100},
      {"gradcheck_eps", 1e-3},
      {"tolerance", 1e-4},
      {"inject_fault", "none"},
      {"components", ""},
  };
  return defaults;
}

inline std::vector<ConfigKey> config_help() {
  return {
      {"corpus", "labeled corpus, one 'label<TAB>sentence' per line"},
      {"vectors", "fastText .vec file (empty: random initialization)"},
      {"vec_pattern", "sweep: .vec path with {D} standing for the dimensionality"},
      {"report", "CSV report path (empty: stdout)"},
      {"summary", "sweep: summary table path (empty: stdout)"},
      {"checkpoint", "checkpoint path"},
      {"log", "train: per-epoch log path (empty: stdout)"},
      {"input", "predict: input file"},
      {"input_format", "predict: text (one sentence per line) or tsv (label<TAB>sentence)"},
      {"predictions", "predict: output path (empty: stdout)"},
      {"architecture", "cnn, bilstm, bigru or crnn"},
      {"embedding_dim", "embedding dimensionality D (0: from the .vec file, else 50)"},
      {"kernel_heights", "CNN kernel heights, e.g. 3,4,5"},
      {"out_channels", "CNN output channels per kernel height"},
      {"hidden_size", "recurrent hidden size per direction"},
      {"fc_units", "BiRNN fully connected units"},
      {"dropout_p", "dropout probability"},
      {"use_dropout", "apply dropout to pooled features"},
      {"fine_tune", "update embeddings during training"},
      {"max_len", "maximum sentence length (0: longest sentence in the corpus)"},
      {"bidirectional", "use both directions in recurrent models"},
      {"pooling", "max or avg pooling over time"},
      {"crnn_cell", "CRNN recurrent cell: lstm or gru"},
      {"seed", "random seed"},
      {"precision", "double or float"},
      {"lr", "Adam learning rate"},
      {"beta1", "Adam beta1"},
      {"beta2", "Adam beta2"},
      {"adam_eps", "Adam epsilon"},
      {"clip_norm", "global gradient norm clip (0: off)"},
      {"batch", "mini-batch size"},
      {"epochs", "training epochs"},
      {"lowercase", "lowercase tokens"},
      {"min_count", "minimum token frequency for the vocabulary"},
      {"folds", "cross-validation folds"},
      {"stratified", "stratify folds by label"},
      {"workers", "parallel workers for folds and sweep cells"},
      {"record_time", "write wall-clock seconds into reports"},
      {"models", "sweep: architectures, e.g. cnn,bilstm"},
      {"dims", "sweep: embedding dimensionalities"},
      {"fine_tune_modes", "sweep: fine-tune settings, e.g. false,true"},
      {"trials", "gradcheck: randomized trials per component"},
      {"gradcheck_eps", "gradcheck: finite-difference step"},
      {"tolerance", "gradcheck: maximum relative error"},
      {"inject_fault", "gradcheck: none, lstm, gru or conv"},
      {"components", "gradcheck: comma-separated component names (empty: all)"},
  };
}

namespace detail {

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!trim(cur).empty() || !out.empty()) out.push_back(trim(cur));
  return out;
}

inline Json parse_scalar_like(const Json& like, const std::string& key, const std::string& raw) {
  const std::string s = trim(raw);
  try {
    if (like.is_boolean()) {
      const std::string v = ascii_lower(s);
      if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
      if (v == "false" || v == "0" || v == "no" || v == "off") return false;
      throw ConfigError("");
    }
    if (like.is_number_integer()) {
      if (s.empty() || s[0] == '-') throw ConfigError("");
      std::size_t pos = 0;
      const unsigned long long v = std::stoull(s, &pos);
      if (pos != s.size()) throw ConfigError("");
      return v;
    }
    if (like.is_number_float()) {
      std::size_t pos = 0;
      const double v = std::stod(s, &pos);
      if (pos != s.size()) throw ConfigError("");
      return v;
    }
    return s;
  } catch (const std::exception&) {
    const char* kind = like.is_boolean() ? "a boolean" : like.is_number_integer() ? "a non-negative integer" : "a number";
    throw ConfigError("--" + key + ": expected " + kind + ", got '" + raw + "'");
  }
}

/// Checks that `value` has the same JSON type as the default for `key`.
inline void check_type(const std::string& key, const Json& like, const Json& value) {
  auto same = [](const Json& a, const Json& b) {
    if (a.is_boolean()) return b.is_boolean();
    if (a.is_number_integer()) return b.is_number_unsigned() || (b.is_number_integer() && b.get<long long>() >= 0);
    if (a.is_number_float()) return b.is_number();
    if (a.is_string()) return b.is_string();
    return false;
  };
  if (like.is_array()) {
    if (!value.is_array()) throw ConfigError("config key '" + key + "' must be a list");
    for (const auto& v : value) {
      if (!same(like.at(0), v)) throw ConfigError("config key '" + key + "' has an element of the wrong type");
    }
    return;
  }
  if (!same(like, value)) throw ConfigError("config key '" + key + "' has the wrong type");
}

}  // namespace detail

/// Flat configuration: defaults, then a JSON file, then command-line overrides.
class Config {
 public:
  Config() : values_(config_defaults()) {}

  static Config from_json(const Json& j) {
    Config c;
    c.merge(j);
    return c;
  }

  static Config from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file '" + path + "'");
    Json j;
    try {
      j = Json::parse(in);
    } catch (const Json::exception& e) {
      throw ConfigError(path + ": invalid JSON: " + e.what());
    }
    if (!j.is_object()) throw ConfigError(path + ": config must be a JSON object");
    return from_json(j);
  }

  void merge(const Json& j) {
    for (const auto& [key, value] : j.items()) set(key, value);
  }

  void set(const std::string& key, const Json& value) {
    const auto& defaults = config_defaults();
    if (!defaults.contains(key)) throw ConfigError("unknown config key '" + key + "'");
    Json v = value;
    if (defaults.at(key).is_number_float() && v.is_number()) v = v.get<double>();
    detail::check_type(key, defaults.at(key), v);
    values_[key] = v;
  }

  /// Applies a textual override, as given on the command line.
  void set_text(const std::string& key, const std::string& raw) {
    const auto& defaults = config_defaults();
    if (!defaults.contains(key)) throw ConfigError("unknown option '--" + key + "'");
    const Json& like = defaults.at(key);
    if (!like.is_array()) {
      values_[key] = detail::parse_scalar_like(like, key, raw);
      return;
    }
    Json list = Json::array();
    const std::string t = detail::trim(raw);
    if (!t.empty() && t.front() == '[') {
      try {
        list = Json::parse(t);
      } catch (const Json::exception&) {
        throw ConfigError("--" + key + ": invalid list '" + raw + "'");
      }
      set(key, list);
      return;
    }
    for (const auto& item : detail::split_list(t)) list.push_back(detail::parse_scalar_like(like.at(0), key, item));
    values_[key] = list;
  }

  const Json& json() const { return values_; }

  template <typename T>
  T get(const std::string& key) const {
    return values_.at(key).get<T>();
  }

  std::string str(const std::string& key) const { return get<std::string>(key); }
  std::size_t size(const std::string& key) const { return get<std::size_t>(key); }
  double real(const std::string& key) const { return get<double>(key); }
  bool flag(const std::string& key) const { return get<bool>(key); }

 private:
  Json values_;
};

inline ModelConfig model_config(const Config& c) {
  ModelConfig m;
  m.architecture = parse_architecture(c.str("architecture"));
  m.embedding_dim = c.size("embedding_dim");
  m.kernel_heights = c.get<std::vector<std::size_t>>("kernel_heights");
  m.out_channels = c.size("out_channels");
  m.hidden_size = c.size("hidden_size");
  m.fc_units = c.size("fc_units");
  m.dropout_p = c.real("dropout_p");
  m.use_dropout = c.flag("use_dropout");
  m.fine_tune = c.flag("fine_tune");
  m.max_len = c.size("max_len");
  m.bidirectional = c.flag("bidirectional");
  m.pooling = parse_pooling(c.str("pooling"));
  m.crnn_cell = parse_cell(c.str("crnn_cell"));
  m.seed = c.get<std::uint64_t>("seed");
  return m;
}

inline TrainOptions train_options(const Config& c) {
  TrainOptions t;
  t.adam.lr = c.real("lr");
  t.adam.beta1 = c.real("beta1");
  t.adam.beta2 = c.real("beta2");
  t.adam.eps = c.real("adam_eps");
  t.adam.clip_norm = c.real("clip_norm");
  t.batch = c.size("batch");
  t.epochs = c.size("epochs");
  t.seed = c.get<std::uint64_t>("seed");
  if (t.batch == 0) throw ConfigError("batch must be positive");
  if (!(t.adam.lr > 0.0)) throw ConfigError("lr must be positive");
  return t;
}

inline CrossvalOptions crossval_options(const Config& c) {
  CrossvalOptions o;
  o.folds = c.size("folds");
  o.stratified = c.flag("stratified");
  o.workers = c.size("workers");
  if (o.folds < 2) throw ConfigError("folds must be at least 2");
  if (o.workers == 0) throw ConfigError("workers must be positive");
  return o;
}

}  // namespace metaphor
