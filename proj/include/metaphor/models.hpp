#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "metaphor/embed_io.hpp"
#include "metaphor/error.hpp"
#include "metaphor/nn.hpp"
#include "metaphor/random.hpp"
#include "metaphor/tensor.hpp"

namespace metaphor {

enum class Architecture { cnn, bilstm, bigru, crnn };

inline std::string architecture_key(Architecture a) {
  switch (a) {
    case Architecture::cnn: return "cnn";
    case Architecture::bilstm: return "bilstm";
    case Architecture::bigru: return "bigru";
    case Architecture::crnn: return "crnn";
  }
  return "cnn";
}

inline Architecture parse_architecture(const std::string& s) {
  std::string k = detail::ascii_lower(s);
  if (k == "cnn") return Architecture::cnn;
  if (k == "bilstm" || k == "lstm" || k == "b-lstm") return Architecture::bilstm;
  if (k == "bigru" || k == "gru" || k == "b-gru") return Architecture::bigru;
  if (k == "crnn" || k == "rcnn") return Architecture::crnn;
  throw ConfigError("unknown architecture '" + s + "' (expected cnn, bilstm, bigru or crnn)");
}

inline std::string pooling_key(Pooling p) { return p == Pooling::max ? "max" : "avg"; }

inline Pooling parse_pooling(const std::string& s) {
  const std::string k = detail::ascii_lower(s);
  if (k == "max") return Pooling::max;
  if (k == "avg" || k == "mean" || k == "average") return Pooling::avg;
  throw ConfigError("unknown pooling '" + s + "' (expected max or avg)");
}

inline std::string cell_key(CellKind c) { return c == CellKind::lstm ? "lstm" : "gru"; }

inline CellKind parse_cell(const std::string& s) {
  const std::string k = detail::ascii_lower(s);
  if (k == "lstm") return CellKind::lstm;
  if (k == "gru") return CellKind::gru;
  throw ConfigError("unknown recurrent cell '" + s + "' (expected lstm or gru)");
}

struct ModelConfig {
  Architecture architecture = Architecture::cnn;
  std::size_t embedding_dim = 50;
  std::vector<std::size_t> kernel_heights{3, 4, 5};
  std::size_t out_channels = 32;
  std::size_t hidden_size = 100;
  std::size_t fc_units = 100;
  double dropout_p = 0.5;
  bool use_dropout = true;  // dropout on the pooled feature vector
  bool fine_tune = true;
  std::size_t max_len = 1;
  bool bidirectional = true;
  Pooling pooling = Pooling::max;
  CellKind crnn_cell = CellKind::lstm;
  std::uint64_t seed = 1;

  std::size_t max_kernel() const {
    return kernel_heights.empty() ? 0 : *std::max_element(kernel_heights.begin(), kernel_heights.end());
  }

  bool recurrent() const { return architecture != Architecture::cnn; }

  CellKind cell() const {
    if (architecture == Architecture::bilstm) return CellKind::lstm;
    if (architecture == Architecture::bigru) return CellKind::gru;
    return crnn_cell;
  }

  std::size_t directions() const { return bidirectional ? 2 : 1; }

  void validate() const {
    if (embedding_dim == 0) throw ConfigError("embedding_dim must be positive");
    if (max_len == 0) throw ConfigError("max_len must be positive");
    if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw ConfigError("dropout_p must lie in [0, 1)");
    if (architecture == Architecture::cnn) {
      if (kernel_heights.empty()) throw ConfigError("kernel_heights must not be empty");
      for (std::size_t k : kernel_heights) {
        if (k == 0) throw ConfigError("kernel heights must be positive");
      }
      if (out_channels == 0) throw ConfigError("out_channels must be positive");
      if (max_len < max_kernel()) {
        throw ConfigError("max_len " + std::to_string(max_len) + " is below the largest kernel height " +
                          std::to_string(max_kernel()));
      }
    } else {
      if (hidden_size == 0) throw ConfigError("hidden_size must be positive");
      if (fc_units == 0) throw ConfigError("fc_units must be positive");
    }
  }

  /// Table-style model name, e.g. "BiLSTM" or "CNN".
  std::string display_name() const {
    switch (architecture) {
      case Architecture::cnn: return "CNN";
      case Architecture::bilstm: return bidirectional ? "BiLSTM" : "LSTM";
      case Architecture::bigru: return bidirectional ? "BiGRU" : "GRU";
      case Architecture::crnn: return bidirectional ? "CRNN" : "CRNN-uni";
    }
    return "?";
  }
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return nlohmann::json{{"architecture", architecture_key(c.architecture)},
                        {"embedding_dim", c.embedding_dim},
                        {"kernel_heights", c.kernel_heights},
                        {"out_channels", c.out_channels},
                        {"hidden_size", c.hidden_size},
                        {"fc_units", c.fc_units},
                        {"dropout_p", c.dropout_p},
                        {"use_dropout", c.use_dropout},
                        {"fine_tune", c.fine_tune},
                        {"max_len", c.max_len},
                        {"bidirectional", c.bidirectional},
                        {"pooling", pooling_key(c.pooling)},
                        {"crnn_cell", cell_key(c.crnn_cell)},
                        {"seed", c.seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.architecture = parse_architecture(j.at("architecture").get<std::string>());
    c.embedding_dim = j.at("embedding_dim").get<std::size_t>();
    c.kernel_heights = j.at("kernel_heights").get<std::vector<std::size_t>>();
    c.out_channels = j.at("out_channels").get<std::size_t>();
    c.hidden_size = j.at("hidden_size").get<std::size_t>();
    c.fc_units = j.at("fc_units").get<std::size_t>();
    c.dropout_p = j.at("dropout_p").get<double>();
    c.use_dropout = j.at("use_dropout").get<bool>();
    c.fine_tune = j.at("fine_tune").get<bool>();
    c.max_len = j.at("max_len").get<std::size_t>();
    c.bidirectional = j.at("bidirectional").get<bool>();
    c.pooling = parse_pooling(j.at("pooling").get<std::string>());
    c.crnn_cell = parse_cell(j.at("crnn_cell").get<std::string>());
    c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model configuration: ") + e.what());
  }
  return c;
}

template <std::floating_point Real>
struct NamedTensor {
  std::string name;
  Tensor<Real> tensor;
};

/// One assembled classifier. Which members are populated depends on the
/// architecture: `conv` for CNN, `fwd`/`bwd` cells for the recurrent models,
/// `hidden_*` for the BiRNN fully connected layer or the CRNN projection.
template <std::floating_point Real>
struct Model {
  ModelConfig config;
  EmbeddingLayer<Real> embedding;
  ConvBank<Real> conv;
  RecurrentCell<Real> fwd;
  RecurrentCell<Real> bwd;
  Tensor<Real> hidden_w, hidden_b;
  Tensor<Real> out_w, out_b;

  /// Width of the pooled sentence vector fed to the classifier head.
  std::size_t feature_width() const {
    switch (config.architecture) {
      case Architecture::cnn: return config.kernel_heights.size() * config.out_channels;
      case Architecture::bilstm:
      case Architecture::bigru: return config.directions() * config.hidden_size;
      case Architecture::crnn: return config.fc_units;
    }
    return 0;
  }

  /// Every tensor in a fixed order, embedding first.
  std::vector<NamedTensor<Real>> tensors() const {
    std::vector<NamedTensor<Real>> out{{"embedding", embedding.matrix}};
    if (config.architecture == Architecture::cnn) {
      for (std::size_t i = 0; i < conv.kernel_heights.size(); ++i) {
        const std::string k = std::to_string(conv.kernel_heights[i]);
        out.push_back({"conv" + k + ".weight", conv.weights[i]});
        out.push_back({"conv" + k + ".bias", conv.biases[i]});
      }
    } else {
      out.push_back({"rnn_fwd.w", fwd.w});
      out.push_back({"rnn_fwd.u", fwd.u});
      out.push_back({"rnn_fwd.b", fwd.b});
      if (config.bidirectional) {
        out.push_back({"rnn_bwd.w", bwd.w});
        out.push_back({"rnn_bwd.u", bwd.u});
        out.push_back({"rnn_bwd.b", bwd.b});
      }
      out.push_back({"hidden.weight", hidden_w});
      out.push_back({"hidden.bias", hidden_b});
    }
    out.push_back({"out.weight", out_w});
    out.push_back({"out.bias", out_b});
    return out;
  }

  /// What the optimizer updates: all tensors, minus the embedding when frozen.
  std::vector<Tensor<Real>> parameters() const {
    std::vector<Tensor<Real>> out;
    for (auto& nt : tensors()) {
      if (nt.name == "embedding" && !config.fine_tune) continue;
      out.push_back(nt.tensor);
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.size();
    return n;
  }
};

/// Closed-form trainable parameter count for a configuration.
inline std::size_t expected_parameter_count(const ModelConfig& c, std::size_t vocab_size) {
  const std::size_t d = c.embedding_dim;
  std::size_t n = c.fine_tune ? vocab_size * d : 0;
  if (c.architecture == Architecture::cnn) {
    for (std::size_t k : c.kernel_heights) n += k * d * c.out_channels + c.out_channels;
    n += c.kernel_heights.size() * c.out_channels + 1;
    return n;
  }
  const std::size_t gates = c.cell() == CellKind::lstm ? 4 : 3;
  const std::size_t h = c.hidden_size;
  n += c.directions() * gates * h * (d + h + 1);
  if (c.architecture == Architecture::crnn) {
    n += c.fc_units * (c.directions() * h + d) + c.fc_units;
  } else {
    n += c.fc_units * c.directions() * h + c.fc_units;
  }
  n += c.fc_units + 1;
  return n;
}

/// Deterministically initialized model; the embedding values are copied.
template <std::floating_point Real>
Model<Real> build(const ModelConfig& config, const Tensor<Real>& embedding_values) {
  config.validate();
  if (embedding_values.rank() != 2 || embedding_values.dim(1) != config.embedding_dim) {
    throw ConfigError("embedding matrix " + shape_str(embedding_values.shape()) +
                      " does not match embedding_dim " + std::to_string(config.embedding_dim));
  }
  Model<Real> m;
  m.config = config;
  m.embedding = EmbeddingLayer<Real>(embedding_values.clone(), config.fine_tune);
  Rng rng(derive_seed(config.seed, "init"));
  const std::size_t d = config.embedding_dim;
  if (config.architecture == Architecture::cnn) {
    m.conv = ConvBank<Real>::create(config.kernel_heights, d, config.out_channels);
    for (std::size_t i = 0; i < m.conv.weights.size(); ++i) {
      init_uniform(m.conv.weights[i], config.kernel_heights[i] * d, rng);
    }
  } else {
    const CellKind kind = config.cell();
    m.fwd = RecurrentCell<Real>::create(kind, d, config.hidden_size);
    m.fwd.initialize(rng);
    if (config.bidirectional) {
      m.bwd = RecurrentCell<Real>::create(kind, d, config.hidden_size);
      m.bwd.initialize(rng);
    }
    const std::size_t in = config.architecture == Architecture::crnn
                               ? config.directions() * config.hidden_size + d
                               : config.directions() * config.hidden_size;
    m.hidden_w = Tensor<Real>({config.fc_units, in}, true);
    m.hidden_b = Tensor<Real>({config.fc_units}, true);
    init_uniform(m.hidden_w, in, rng);
  }
  const std::size_t head_in = config.architecture == Architecture::cnn ? m.feature_width() : config.fc_units;
  m.out_w = Tensor<Real>({1, head_in}, true);
  m.out_b = Tensor<Real>({1}, true);
  init_uniform(m.out_w, head_in, rng);
  return m;
}

template <std::floating_point Real>
Model<Real> build(const ModelConfig& config, const EmbeddingMatrix<Real>& embedding) {
  if (embedding.dim != config.embedding_dim) {
    throw ConfigError("embedding dimensionality " + std::to_string(embedding.dim) + " differs from configured " +
                      std::to_string(config.embedding_dim));
  }
  return build(config, embedding.values);
}

/// Optional side output of a forward pass.
struct ForwardTrace {
  std::vector<std::size_t> pooled_argmax;  // per pooled channel, max pooling only
};

namespace detail {

template <std::floating_point Real>
void check_ids(std::span<const std::size_t> ids, std::size_t valid_length) {
  if (valid_length == 0) throw EmptySequenceError("forward: empty sentence");
  if (valid_length > ids.size()) {
    throw DimensionError("forward: valid_length " + std::to_string(valid_length) + " exceeds " +
                         std::to_string(ids.size()) + " ids");
  }
}

template <std::floating_point Real>
Tensor<Real> pool(Graph<Real>& g, const Tensor<Real>& x, Pooling mode, std::size_t valid, ForwardTrace* trace) {
  if (trace && mode == Pooling::max) trace->pooled_argmax = argmax_time(x, valid);
  return pool_time(g, x, mode, valid);
}

template <std::floating_point Real>
Tensor<Real> head_dropout(Graph<Real>& g, const Model<Real>& m, const Tensor<Real>& x, Mode mode, Rng& rng) {
  return m.config.use_dropout ? dropout(g, x, m.config.dropout_p, mode, rng) : x;
}

}  // namespace detail

/// embed → conv per kernel height (ReLU) → pool → concat → dropout → logit.
/// Sentences shorter than the largest kernel are padded with zero rows; slots
/// at or past valid_length always read as PAD, whatever id they hold.
template <std::floating_point Real>
Tensor<Real> forward_cnn(Graph<Real>& g, const Model<Real>& m, std::span<const std::size_t> ids,
                         std::size_t valid_length, Mode mode, Rng& rng, ForwardTrace* trace = nullptr) {
  detail::check_ids<Real>(ids, valid_length);
  const std::size_t len = std::max(valid_length, m.config.max_kernel());
  std::vector<std::size_t> window(len, EmbeddingLayer<Real>::pad_index);
  std::copy_n(ids.begin(), valid_length, window.begin());
  Tensor<Real> e = embed(g, m.embedding, window);
  std::vector<Tensor<Real>> pooled;
  std::vector<std::size_t> argmax;
  for (std::size_t k : m.config.kernel_heights) {
    Tensor<Real> conv = conv1d_valid(g, m.conv, e, k);
    ForwardTrace local;
    pooled.push_back(detail::pool(g, conv, m.config.pooling, len - k + 1, trace ? &local : nullptr));
    argmax.insert(argmax.end(), local.pooled_argmax.begin(), local.pooled_argmax.end());
  }
  if (trace) trace->pooled_argmax = std::move(argmax);
  Tensor<Real> features = concat(g, pooled, 0);
  features = detail::head_dropout(g, m, features, mode, rng);
  return linear(g, m.out_w, m.out_b, features);
}

namespace detail {

template <std::floating_point Real>
Tensor<Real> birnn_head(Graph<Real>& g, const Model<Real>& m, const Tensor<Real>& states, std::size_t valid_length,
                        Mode mode, Rng& rng, ForwardTrace* trace) {
  Tensor<Real> pooled = pool(g, states, m.config.pooling, valid_length, trace);
  pooled = head_dropout(g, m, pooled, mode, rng);
  Tensor<Real> hidden = relu(g, linear(g, m.hidden_w, m.hidden_b, pooled));
  return linear(g, m.out_w, m.out_b, hidden);
}

// hb is undefined for a unidirectional model.
template <std::floating_point Real>
Tensor<Real> crnn_head(Graph<Real>& g, const Model<Real>& m, const Tensor<Real>& e, const Tensor<Real>& hf,
                       const Tensor<Real>& hb, std::size_t valid_length, Mode mode, Rng& rng, ForwardTrace* trace) {
  std::vector<Tensor<Real>> parts{shift_rows(g, hf, 1), e};
  if (hb.defined()) parts.push_back(shift_rows(g, hb, -1));
  Tensor<Real> composite = concat(g, parts, 1);
  Tensor<Real> semantic = tanh(g, linear_rows(g, m.hidden_w, m.hidden_b, composite));
  Tensor<Real> pooled = pool(g, semantic, m.config.pooling, valid_length, trace);
  pooled = head_dropout(g, m, pooled, mode, rng);
  return linear(g, m.out_w, m.out_b, pooled);
}

}  // namespace detail

/// embed → (bi)directional recurrence → pool over valid positions → dropout →
/// fully connected + ReLU → logit.
template <std::floating_point Real>
Tensor<Real> forward_birnn(Graph<Real>& g, const Model<Real>& m, std::span<const std::size_t> ids,
                           std::size_t valid_length, Mode mode, Rng& rng, ForwardTrace* trace = nullptr) {
  detail::check_ids<Real>(ids, valid_length);
  Tensor<Real> e = embed(g, m.embedding, ids.first(valid_length));
  Tensor<Real> states = m.config.bidirectional ? bidirectional(g, m.fwd, m.bwd, e, valid_length)
                                               : run_rnn(g, m.fwd, e, Direction::forward, valid_length);
  return detail::birnn_head(g, m, states, valid_length, mode, rng, trace);
}

/// Each position is represented by [left context ; embedding ; right context],
/// where the left context is the forward state one step earlier and the right
/// context the backward state one step later (zero at the sentence edges).
/// A tanh projection gives per-word semantic vectors that are max-pooled.
template <std::floating_point Real>
Tensor<Real> forward_crnn(Graph<Real>& g, const Model<Real>& m, std::span<const std::size_t> ids,
                          std::size_t valid_length, Mode mode, Rng& rng, ForwardTrace* trace = nullptr) {
  detail::check_ids<Real>(ids, valid_length);
  Tensor<Real> e = embed(g, m.embedding, ids.first(valid_length));
  Tensor<Real> hf = run_rnn(g, m.fwd, e, Direction::forward, valid_length);
  Tensor<Real> hb = m.config.bidirectional ? run_rnn(g, m.bwd, e, Direction::backward, valid_length) : Tensor<Real>();
  return detail::crnn_head(g, m, e, hf, hb, valid_length, mode, rng, trace);
}

/// Logit (shape [1]) for one padded sentence.
template <std::floating_point Real>
Tensor<Real> forward(Graph<Real>& g, const Model<Real>& m, std::span<const std::size_t> ids, std::size_t valid_length,
                     Mode mode, Rng& rng, ForwardTrace* trace = nullptr) {
  switch (m.config.architecture) {
    case Architecture::cnn: return forward_cnn(g, m, ids, valid_length, mode, rng, trace);
    case Architecture::bilstm:
    case Architecture::bigru: return forward_birnn(g, m, ids, valid_length, mode, rng, trace);
    case Architecture::crnn: return forward_crnn(g, m, ids, valid_length, mode, rng, trace);
  }
  throw ConfigError("unknown architecture");
}

/// One sentence of a mini-batch: padded ids and the number of real tokens.
struct SentenceRef {
  std::span<const std::size_t> ids;
  std::size_t valid_length = 0;
};

/// Logits for several sentences in one graph. Recurrent models run the whole
/// batch through each direction together; dropout masks are drawn sentence by
/// sentence in batch order.
template <std::floating_point Real>
std::vector<Tensor<Real>> forward_batch(Graph<Real>& g, const Model<Real>& m, std::span<const SentenceRef> batch,
                                        Mode mode, Rng& rng) {
  std::vector<Tensor<Real>> logits;
  if (m.config.architecture == Architecture::cnn) {
    for (const auto& s : batch) logits.push_back(forward_cnn(g, m, s.ids, s.valid_length, mode, rng));
    return logits;
  }
  std::vector<Tensor<Real>> es;
  std::vector<std::size_t> valid;
  for (const auto& s : batch) {
    detail::check_ids<Real>(s.ids, s.valid_length);
    es.push_back(embed(g, m.embedding, s.ids.first(s.valid_length)));
    valid.push_back(s.valid_length);
  }
  const bool both = m.config.bidirectional;
  const auto hf = run_rnn_batch(g, m.fwd, es, valid, Direction::forward);
  const auto hb = both ? run_rnn_batch(g, m.bwd, es, valid, Direction::backward) : std::vector<Tensor<Real>>();
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (m.config.architecture == Architecture::crnn) {
      logits.push_back(detail::crnn_head(g, m, es[i], hf[i], both ? hb[i] : Tensor<Real>(), valid[i], mode, rng,
                                         static_cast<ForwardTrace*>(nullptr)));
    } else {
      Tensor<Real> states = both ? concat(g, {hf[i], hb[i]}, 1) : hf[i];
      logits.push_back(detail::birnn_head(g, m, states, valid[i], mode, rng, static_cast<ForwardTrace*>(nullptr)));
    }
  }
  return logits;
}

template <std::floating_point Real>
Real logit(const Model<Real>& m, std::span<const std::size_t> ids, std::size_t valid_length) {
  Graph<Real> g = Graph<Real>::inference();
  Rng unused(0);
  return forward(g, m, ids, valid_length, Mode::eval, unused)[0];
}

/// p(label = metaphor | sentence), dropout off.
template <std::floating_point Real>
Real predict_proba(const Model<Real>& m, std::span<const std::size_t> ids, std::size_t valid_length) {
  return stable_sigmoid(logit(m, ids, valid_length));
}

/// Sentence positions selected by max pooling, one per semantic dimension.
template <std::floating_point Real>
std::vector<std::size_t> significant_positions(const Model<Real>& m, std::span<const std::size_t> ids,
                                               std::size_t valid_length) {
  if (m.config.architecture != Architecture::crnn || m.config.pooling != Pooling::max) {
    throw ConfigError("significant_positions needs a CRNN with max pooling");
  }
  Graph<Real> g = Graph<Real>::inference();
  Rng unused(0);
  ForwardTrace trace;
  forward(g, m, ids, valid_length, Mode::eval, unused, &trace);
  return trace.pooled_argmax;
}

}  // namespace metaphor
