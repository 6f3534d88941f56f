#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "metaphor/fault.hpp"
#include "metaphor/models.hpp"
#include "metaphor/nn.hpp"
#include "metaphor/random.hpp"
#include "metaphor/tensor.hpp"

namespace metaphor {

struct GradCheckOptions {
  std::size_t trials = 100;
  double eps = 1e-3;
  double tolerance = 1e-4;
  double max_skipped_fraction = 0.2;  // coordinates whose stencil crosses a kink
  std::uint64_t seed = 1;
  std::vector<std::string> only;  // component names; empty runs everything
};

struct ComponentReport {
  std::string name;
  double worst = 0.0;
  std::size_t trials = 0;
  std::size_t coordinates = 0;
  std::size_t skipped = 0;
  double seconds = 0.0;
  bool passed = false;
};

struct GradCheckSummary {
  std::vector<ComponentReport> components;
  double seconds = 0.0;

  bool passed() const {
    return std::all_of(components.begin(), components.end(), [](const auto& c) { return c.passed; });
  }
};

namespace detail {

using T64 = Tensor<double>;
using G64 = Graph<double>;

inline T64 random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  T64 t(shape);
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

// Reduces any tensor to a scalar with fixed random weights, so every output
// coordinate contributes a distinct amount.
inline T64 weighted_sum(G64& g, const T64& y, const T64& weights) { return sum(g, mul(g, y, weights)); }

inline std::size_t between(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.index(hi - lo + 1); }

using TrialFn = std::function<GradCheckResult(Rng&, double eps)>;

template <typename Op>
GradCheckResult check_unary_shape(Rng& rng, double eps, const Shape& shape, Op op, const Shape& out_shape,
                                  double lo = -1.0, double hi = 1.0) {
  T64 x = random_tensor(shape, rng, lo, hi);
  T64 w = random_tensor(out_shape, rng);
  return grad_check([&](G64& g) { return weighted_sum(g, op(g, x), w); }, std::vector<T64>{x}, eps);
}

// Weights at the library's initialization scale, biases small but nonzero.
inline RecurrentCell<double> random_cell(CellKind kind, std::size_t d, std::size_t h, Rng& rng) {
  auto cell = RecurrentCell<double>::create(kind, d, h);
  cell.initialize(rng);
  for (double& v : cell.b.values()) v += rng.uniform(-0.1, 0.1);
  return cell;
}

inline GradCheckResult check_model(Architecture arch, CellKind crnn_cell, Rng& rng, double eps) {
  ModelConfig c;
  c.architecture = arch;
  c.embedding_dim = between(rng, 2, 4);
  c.kernel_heights = {2, 3};
  c.out_channels = 2;
  c.hidden_size = between(rng, 2, 3);
  c.fc_units = 3;
  c.crnn_cell = crnn_cell;
  c.pooling = rng.bernoulli(0.5) ? Pooling::max : Pooling::avg;
  c.use_dropout = true;
  c.dropout_p = 0.3;
  c.fine_tune = true;
  c.max_len = 7;
  c.seed = rng.next();
  const std::size_t vocab = 6;
  const double bound = 1.0 / std::sqrt(static_cast<double>(c.embedding_dim));
  Model<double> m = build(c, random_tensor({vocab, c.embedding_dim}, rng, -bound, bound));
  for (auto& nt : m.tensors()) {
    if (nt.tensor.rank() != 1) continue;
    for (double& v : nt.tensor.values()) v += rng.uniform(-0.1, 0.1);
  }
  const std::size_t valid = between(rng, 1, c.max_len);
  std::vector<std::size_t> ids(c.max_len, 0);
  for (std::size_t i = 0; i < valid; ++i) ids[i] = between(rng, 1, vocab - 1);
  const int label = rng.bernoulli(0.5) ? 1 : 0;
  const std::uint64_t dropout_seed = rng.next();
  std::vector<T64> inputs;
  for (auto& nt : m.tensors()) inputs.push_back(nt.tensor);
  return grad_check(
      [&](G64& g) {
        Rng dropout_rng(dropout_seed);
        return bce_loss(g, forward(g, m, ids, valid, Mode::train, dropout_rng), label);
      },
      inputs, eps);
}

inline std::vector<std::pair<std::string, TrialFn>> gradcheck_components() {
  std::vector<std::pair<std::string, TrialFn>> c;
  c.emplace_back("matmul", [](Rng& rng, double eps) {
    const std::size_t m = between(rng, 1, 4), k = between(rng, 1, 4), n = between(rng, 1, 4);
    T64 a = random_tensor({m, k}, rng), b = random_tensor({k, n}, rng), w = random_tensor({m, n}, rng);
    return grad_check([&](G64& g) { return weighted_sum(g, matmul(g, a, b), w); }, std::vector<T64>{a, b}, eps);
  });
  for (auto [name, op] : {std::pair{"add", BinaryOp::add}, std::pair{"sub", BinaryOp::sub},
                          std::pair{"mul", BinaryOp::mul}}) {
    c.emplace_back(name, [op](Rng& rng, double eps) {
      const Shape s{between(rng, 1, 4), between(rng, 1, 4)};
      const bool broadcast = rng.bernoulli(0.3);
      T64 a = random_tensor(s, rng), b = random_tensor(broadcast ? Shape{} : s, rng), w = random_tensor(s, rng);
      return grad_check([&](G64& g) { return weighted_sum(g, elementwise(g, op, a, b), w); }, std::vector<T64>{a, b},
                        eps);
    });
  }
  c.emplace_back("scale", [](Rng& rng, double eps) {
    const Shape s{between(rng, 1, 6)};
    const double k = rng.uniform(-2.0, 2.0);
    return check_unary_shape(rng, eps, s, [k](G64& g, const T64& x) { return scale(g, x, k); }, s);
  });
  for (auto [name, op] : {std::pair{"tanh", Activation::tanh}, std::pair{"sigmoid", Activation::sigmoid},
                          std::pair{"relu", Activation::relu}}) {
    c.emplace_back(name, [op](Rng& rng, double eps) {
      const Shape s{between(rng, 1, 4), between(rng, 1, 4)};
      return check_unary_shape(rng, eps, s, [op](G64& g, const T64& x) { return activation(g, op, x); }, s, -3.0,
                               3.0);
    });
  }
  c.emplace_back("sum", [](Rng& rng, double eps) {
    T64 x = random_tensor({between(rng, 1, 4), between(rng, 1, 4)}, rng);
    const double k = rng.uniform(0.5, 2.0);
    return grad_check([&](G64& g) { return scale(g, sum(g, x), k); }, std::vector<T64>{x}, eps);
  });
  c.emplace_back("reshape", [](Rng& rng, double eps) {
    const std::size_t r = between(rng, 1, 4), q = between(rng, 1, 4);
    return check_unary_shape(
        rng, eps, {r, q}, [&](G64& g, const T64& x) { return reshape(g, x, {q, r}); }, {q, r});
  });
  c.emplace_back("concat", [](Rng& rng, double eps) {
    const std::size_t axis = rng.index(2);
    const std::size_t fixed = between(rng, 1, 3);
    std::vector<T64> parts;
    std::size_t total = 0;
    for (std::size_t i = 0, n = between(rng, 1, 3); i < n; ++i) {
      const std::size_t len = between(rng, 1, 3);
      total += len;
      parts.push_back(random_tensor(axis == 0 ? Shape{len, fixed} : Shape{fixed, len}, rng));
    }
    T64 w = random_tensor(axis == 0 ? Shape{total, fixed} : Shape{fixed, total}, rng);
    return grad_check([&](G64& g) { return weighted_sum(g, concat(g, parts, axis), w); }, parts, eps);
  });
  c.emplace_back("slice", [](Rng& rng, double eps) {
    const std::size_t rows = between(rng, 1, 5), cols = between(rng, 1, 4);
    const std::size_t axis = rng.index(2);
    const std::size_t len = axis == 0 ? rows : cols;
    const std::size_t begin = rng.index(len);
    const std::size_t end = between(rng, begin + 1, len);
    const Shape out = axis == 0 ? Shape{end - begin, cols} : Shape{rows, end - begin};
    return check_unary_shape(
        rng, eps, {rows, cols}, [&](G64& g, const T64& x) { return slice(g, x, axis, begin, end); }, out);
  });
  c.emplace_back("shift_rows", [](Rng& rng, double eps) {
    const std::size_t rows = between(rng, 1, 5), cols = between(rng, 1, 3);
    const auto offset = static_cast<std::ptrdiff_t>(rng.index(5)) - 2;
    return check_unary_shape(
        rng, eps, {rows, cols}, [&](G64& g, const T64& x) { return shift_rows(g, x, offset); }, {rows, cols});
  });
  c.emplace_back("embedding", [](Rng& rng, double eps) {
    const std::size_t vocab = between(rng, 2, 6), d = between(rng, 1, 4), len = between(rng, 1, 6);
    EmbeddingLayer<double> layer(random_tensor({vocab, d}, rng), true);
    std::vector<std::size_t> ids(len);
    for (auto& id : ids) id = rng.index(vocab);
    T64 w = random_tensor({len, d}, rng);
    return grad_check([&](G64& g) { return weighted_sum(g, embed(g, layer, ids), w); },
                      std::vector<T64>{layer.matrix}, eps);
  });
  c.emplace_back("conv1d", [](Rng& rng, double eps) {
    const std::size_t k = between(rng, 1, 3), d = between(rng, 1, 3), ch = between(rng, 1, 3);
    const std::size_t len = between(rng, k, 6);
    auto bank = ConvBank<double>::create({k}, d, ch);
    bank.weights[0] = random_tensor(bank.weights[0].shape(), rng);
    bank.biases[0] = random_tensor(bank.biases[0].shape(), rng);
    T64 x = random_tensor({len, d}, rng);
    const bool with_relu = rng.bernoulli(0.5);
    T64 w = random_tensor({len - k + 1, ch}, rng);
    return grad_check([&](G64& g) { return weighted_sum(g, conv1d_valid(g, bank, x, k, with_relu), w); },
                      std::vector<T64>{x, bank.weights[0], bank.biases[0]}, eps);
  });
  for (auto [name, mode] : {std::pair{"pool_max", Pooling::max}, std::pair{"pool_avg", Pooling::avg}}) {
    c.emplace_back(name, [mode](Rng& rng, double eps) {
      const std::size_t len = between(rng, 1, 6), ch = between(rng, 1, 4);
      const std::size_t valid = between(rng, 1, len);
      return check_unary_shape(
          rng, eps, {len, ch}, [&](G64& g, const T64& x) { return pool_time(g, x, mode, valid); }, {ch});
    });
  }
  c.emplace_back("linear", [](Rng& rng, double eps) {
    const std::size_t in = between(rng, 1, 5), out = between(rng, 1, 4);
    T64 wt = random_tensor({out, in}, rng), b = random_tensor({out}, rng), x = random_tensor({in}, rng);
    T64 w = random_tensor({out}, rng);
    return grad_check([&](G64& g) { return weighted_sum(g, linear(g, wt, b, x), w); }, std::vector<T64>{wt, b, x},
                      eps);
  });
  c.emplace_back("linear_rows", [](Rng& rng, double eps) {
    const std::size_t n = between(rng, 1, 4), in = between(rng, 1, 4), out = between(rng, 1, 4);
    T64 wt = random_tensor({out, in}, rng), b = random_tensor({out}, rng), x = random_tensor({n, in}, rng);
    T64 w = random_tensor({n, out}, rng);
    return grad_check([&](G64& g) { return weighted_sum(g, linear_rows(g, wt, b, x), w); },
                      std::vector<T64>{wt, b, x}, eps);
  });
  c.emplace_back("dropout", [](Rng& rng, double eps) {
    const Shape s{between(rng, 1, 8)};
    const double p = rng.uniform(0.0, 0.9);
    const std::uint64_t seed = rng.next();
    return check_unary_shape(
        rng, eps, s,
        [&](G64& g, const T64& x) {
          Rng mask_rng(seed);
          return dropout(g, x, p, Mode::train, mask_rng);
        },
        s);
  });
  c.emplace_back("bce_loss", [](Rng& rng, double eps) {
    T64 z = random_tensor({1}, rng, -6.0, 6.0);
    const int label = rng.bernoulli(0.5) ? 1 : 0;
    return grad_check([&](G64& g) { return bce_loss(g, z, label); }, std::vector<T64>{z}, eps);
  });
  for (auto [name, kind] : {std::pair{"lstm_step", CellKind::lstm}, std::pair{"gru_step", CellKind::gru}}) {
    c.emplace_back(name, [kind](Rng& rng, double eps) {
      const std::size_t d = between(rng, 1, 3), h = between(rng, 1, 3);
      auto cell = random_cell(kind, d, h, rng);
      const double xs = 1.0 / std::sqrt(static_cast<double>(d));
      T64 x = random_tensor({d}, rng, -xs, xs), h0 = random_tensor({h}, rng, -0.5, 0.5);
      T64 c0 = random_tensor({h}, rng, -0.5, 0.5);
      T64 wh = random_tensor({h}, rng), wc = random_tensor({h}, rng);
      std::vector<T64> inputs{x, h0, cell.w, cell.u, cell.b};
      if (kind == CellKind::lstm) inputs.push_back(c0);
      return grad_check(
          [&](G64& g) {
            if (kind == CellKind::gru) return weighted_sum(g, gru_step(g, cell, x, h0), wh);
            auto [h1, c1] = lstm_step(g, cell, x, h0, c0);
            return add(g, weighted_sum(g, h1, wh), weighted_sum(g, c1, wc));
          },
          inputs, eps);
    });
  }
  for (auto [name, kind] : {std::pair{"lstm_sequence", CellKind::lstm}, std::pair{"gru_sequence", CellKind::gru}}) {
    c.emplace_back(name, [kind](Rng& rng, double eps) {
      const std::size_t d = between(rng, 1, 3), h = between(rng, 1, 3), len = between(rng, 1, 5);
      const std::size_t valid = between(rng, 1, len);
      auto fwd = random_cell(kind, d, h, rng);
      auto bwd = random_cell(kind, d, h, rng);
      const double xs = 1.0 / std::sqrt(static_cast<double>(d));
      T64 x = random_tensor({len, d}, rng, -xs, xs);
      T64 w = random_tensor({len, 2 * h}, rng);
      return grad_check([&](G64& g) { return weighted_sum(g, bidirectional(g, fwd, bwd, x, valid), w); },
                        std::vector<T64>{x, fwd.w, fwd.u, fwd.b, bwd.w, bwd.u, bwd.b}, eps);
    });
  }
  c.emplace_back("model_cnn",
                 [](Rng& rng, double eps) { return check_model(Architecture::cnn, CellKind::lstm, rng, eps); });
  c.emplace_back("model_bilstm",
                 [](Rng& rng, double eps) { return check_model(Architecture::bilstm, CellKind::lstm, rng, eps); });
  c.emplace_back("model_bigru",
                 [](Rng& rng, double eps) { return check_model(Architecture::bigru, CellKind::gru, rng, eps); });
  c.emplace_back("model_crnn",
                 [](Rng& rng, double eps) { return check_model(Architecture::crnn, CellKind::lstm, rng, eps); });
  c.emplace_back("model_crnn_gru",
                 [](Rng& rng, double eps) { return check_model(Architecture::crnn, CellKind::gru, rng, eps); });
  return c;
}

}  // namespace detail

inline std::vector<std::string> gradcheck_component_names() {
  std::vector<std::string> names;
  for (const auto& [name, fn] : detail::gradcheck_components()) names.push_back(name);
  return names;
}

inline Fault parse_fault(const std::string& s) {
  if (s == "none" || s.empty()) return Fault::none;
  if (s == "lstm") return Fault::lstm_backward_sign;
  if (s == "gru") return Fault::gru_backward_sign;
  if (s == "conv") return Fault::conv_backward_sign;
  throw ConfigError("unknown fault '" + s + "' (expected none, lstm, gru or conv)");
}

/// Finite-difference check of every layer and full architecture in 64-bit
/// arithmetic. Each component runs `trials` randomized cases.
inline GradCheckSummary run_gradcheck_suite(const GradCheckOptions& options, std::ostream* progress = nullptr) {
  if (options.trials == 0) throw ConfigError("gradcheck needs at least one trial");
  const auto started = std::chrono::steady_clock::now();
  GradCheckSummary summary;
  const auto components = detail::gradcheck_components();
  for (const auto& name : options.only) {
    if (std::none_of(components.begin(), components.end(), [&](const auto& c) { return c.first == name; })) {
      throw ConfigError("unknown gradcheck component '" + name + "'");
    }
  }
  for (std::size_t ci = 0; ci < components.size(); ++ci) {
    const auto& [name, fn] = components[ci];
    if (!options.only.empty() && std::find(options.only.begin(), options.only.end(), name) == options.only.end()) {
      continue;
    }
    const auto t0 = std::chrono::steady_clock::now();
    ComponentReport rep;
    rep.name = name;
    Rng rng(derive_seed(options.seed, name));
    for (std::size_t t = 0; t < options.trials; ++t) {
      const GradCheckResult r = fn(rng, options.eps);
      rep.worst = std::max(rep.worst, r.max_relative_error);
      rep.coordinates += r.coordinates;
      rep.skipped += r.skipped;
      ++rep.trials;
    }
    const double skipped_fraction =
        rep.coordinates ? static_cast<double>(rep.skipped) / static_cast<double>(rep.coordinates) : 1.0;
    rep.passed = rep.worst < options.tolerance && skipped_fraction <= options.max_skipped_fraction;
    rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (progress) {
      char line[160];
      std::snprintf(line, sizeof line, "%-16s %-4s worst=%.3e trials=%zu coords=%zu skipped=%zu (%.2fs)\n",
                    rep.name.c_str(), rep.passed ? "ok" : "FAIL", rep.worst, rep.trials, rep.coordinates, rep.skipped,
                    rep.seconds);
      *progress << line << std::flush;
    }
    summary.components.push_back(rep);
  }
  summary.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return summary;
}

}  // namespace metaphor
