#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "metaphor/detail/kernels.hpp"
#include "metaphor/error.hpp"
#include "metaphor/fault.hpp"
#include "metaphor/random.hpp"
#include "metaphor/tensor.hpp"

namespace metaphor {

enum class Mode { train, eval };
enum class Pooling { max, avg };
enum class CellKind { lstm, gru };
enum class Direction { forward, backward };

/// Fills t with uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
template <std::floating_point Real>
void init_uniform(Tensor<Real>& t, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (Real& v : t.values()) v = static_cast<Real>(rng.uniform(-bound, bound));
}

// ---------------------------------------------------------------------------
// embedding

template <std::floating_point Real>
struct EmbeddingLayer {
  static constexpr std::size_t pad_index = 0;

  Tensor<Real> matrix;  // |V|×D
  bool trainable = false;

  EmbeddingLayer() = default;
  EmbeddingLayer(Tensor<Real> values, bool fine_tune) : matrix(std::move(values)), trainable(fine_tune) {
    if (matrix.rank() != 2) throw DimensionError("embedding matrix must be |V|×D, got " + shape_str(matrix.shape()));
    matrix.set_requires_grad(trainable);
  }

  std::size_t vocab_size() const { return matrix.dim(0); }
  std::size_t dim() const { return matrix.dim(1); }
};

template <std::floating_point Real>
Tensor<Real> embed(Graph<Real>& g, const EmbeddingLayer<Real>& layer, std::span<const std::size_t> ids) {
  if (ids.empty()) throw EmptySequenceError("embed: empty id sequence");
  const std::size_t vocab = layer.vocab_size();
  const std::size_t d = layer.dim();
  for (std::size_t id : ids) {
    if (id >= vocab) {
      throw VocabularyError("embed: id " + std::to_string(id) + " outside vocabulary of size " +
                            std::to_string(vocab));
    }
  }
  Tensor<Real> out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] == EmbeddingLayer<Real>::pad_index) continue;  // PAD reads as zeros
    std::copy_n(layer.matrix.data() + ids[i] * d, d, out.data() + i * d);
  }
  if (g.wants_grad({&layer.matrix})) {
    g.record({layer.matrix}, {out},
             [m = layer.matrix, out, rows = std::vector<std::size_t>(ids.begin(), ids.end()), d]() mutable {
               const Real* dout = out.grad().data();
               Real* dm = m.ensure_grad().data();
               for (std::size_t i = 0; i < rows.size(); ++i) {
                 if (rows[i] == EmbeddingLayer<Real>::pad_index) continue;
                 detail::axpy(Real(1), dout + i * d, dm + rows[i] * d, d);
               }
             });
  }
  return out;
}

// ---------------------------------------------------------------------------
// convolution

template <std::floating_point Real>
struct ConvBank {
  std::vector<std::size_t> kernel_heights;
  std::size_t in_dim = 0;
  std::size_t out_channels = 0;
  std::vector<Tensor<Real>> weights;  // k×D×C per kernel
  std::vector<Tensor<Real>> biases;   // C per kernel

  static ConvBank create(std::vector<std::size_t> heights, std::size_t in_dim, std::size_t channels) {
    if (heights.empty() || channels == 0 || in_dim == 0) {
      throw ParameterError("conv bank needs kernel heights, a positive input width and channel count");
    }
    ConvBank bank;
    bank.kernel_heights = std::move(heights);
    bank.in_dim = in_dim;
    bank.out_channels = channels;
    for (std::size_t k : bank.kernel_heights) {
      if (k == 0) throw ParameterError("conv kernel height must be positive");
      bank.weights.emplace_back(Shape{k, in_dim, channels}, true);
      bank.biases.emplace_back(Shape{channels}, true);
    }
    return bank;
  }

  std::size_t index_of(std::size_t k) const {
    auto it = std::find(kernel_heights.begin(), kernel_heights.end(), k);
    if (it == kernel_heights.end()) throw ParameterError("conv bank has no kernel of height " + std::to_string(k));
    return static_cast<std::size_t>(it - kernel_heights.begin());
  }
};

/// Valid 1-D convolution over the rows of x, optionally followed by ReLU.
template <std::floating_point Real>
Tensor<Real> conv1d_valid(Graph<Real>& g, const ConvBank<Real>& bank, const Tensor<Real>& x, std::size_t k,
                          bool apply_relu = true) {
  const std::size_t idx = bank.index_of(k);
  if (x.rank() != 2 || x.dim(1) != bank.in_dim) {
    throw DimensionError("conv1d_valid: input " + shape_str(x.shape()) + " does not match width " +
                         std::to_string(bank.in_dim));
  }
  const std::size_t len = x.dim(0);
  if (len < k) {
    throw EmptySequenceError("conv1d_valid: sentence of length " + std::to_string(len) +
                             " is shorter than kernel height " + std::to_string(k));
  }
  const std::size_t t_out = len - k + 1;
  const std::size_t c = bank.out_channels;
  const std::size_t window = k * bank.in_dim;
  const Tensor<Real>& w = bank.weights[idx];
  const Tensor<Real>& b = bank.biases[idx];
  Tensor<Real> out({t_out, c});
  for (std::size_t t = 0; t < t_out; ++t) {
    Real* o = out.data() + t * c;
    std::copy_n(b.data(), c, o);
    const Real* xw = x.data() + t * bank.in_dim;  // window rows are contiguous
    for (std::size_t j = 0; j < window; ++j) detail::axpy(xw[j], w.data() + j * c, o, c);
  }
  if (g.wants_grad({&x, &w, &b})) {
    g.record({x, w, b}, {out}, [x, w, b, out, t_out, c, window, in_dim = bank.in_dim]() mutable {
      const Real* d = out.grad().data();
      const Real sign = injected_fault().load() == Fault::conv_backward_sign ? Real(-1) : Real(1);
      if (b.requires_grad()) {
        Real* db = b.ensure_grad().data();
        for (std::size_t t = 0; t < t_out; ++t) detail::axpy(sign, d + t * c, db, c);
      }
      if (w.requires_grad()) {
        Real* dw = w.ensure_grad().data();
        for (std::size_t t = 0; t < t_out; ++t) {
          const Real* xw = x.data() + t * in_dim;
          for (std::size_t j = 0; j < window; ++j) detail::axpy(sign * xw[j], d + t * c, dw + j * c, c);
        }
      }
      if (x.requires_grad()) {
        Real* dx = x.ensure_grad().data();
        for (std::size_t t = 0; t < t_out; ++t) {
          Real* dxw = dx + t * in_dim;
          for (std::size_t j = 0; j < window; ++j) dxw[j] += detail::dot(w.data() + j * c, d + t * c, c);
        }
      }
    });
  }
  return apply_relu ? relu(g, out) : out;
}

// ---------------------------------------------------------------------------
// temporal pooling

/// Per-channel index of the first maximal row among the first valid_length rows.
template <std::floating_point Real>
std::vector<std::size_t> argmax_time(const Tensor<Real>& x, std::size_t valid_length) {
  if (x.rank() != 2) throw DimensionError("argmax_time: expected T×C, got " + shape_str(x.shape()));
  if (valid_length == 0) throw EmptySequenceError("pooling over an empty sequence");
  if (valid_length > x.dim(0)) {
    throw DimensionError("pooling: valid_length " + std::to_string(valid_length) + " exceeds " +
                         std::to_string(x.dim(0)) + " rows");
  }
  const std::size_t c = x.dim(1);
  std::vector<std::size_t> arg(c, 0);
  for (std::size_t t = 1; t < valid_length; ++t) {
    const Real* row = x.data() + t * c;
    for (std::size_t j = 0; j < c; ++j) {
      if (row[j] > x.data()[arg[j] * c + j]) arg[j] = t;
    }
  }
  return arg;
}

template <std::floating_point Real>
Tensor<Real> pool_time(Graph<Real>& g, const Tensor<Real>& x, Pooling mode, std::size_t valid_length) {
  if (x.rank() != 2) throw DimensionError("pool_time: expected T×C, got " + shape_str(x.shape()));
  if (valid_length == 0) throw EmptySequenceError("pool_time: valid_length is zero");
  if (valid_length > x.dim(0)) {
    throw DimensionError("pool_time: valid_length " + std::to_string(valid_length) + " exceeds " +
                         std::to_string(x.dim(0)) + " rows");
  }
  const std::size_t c = x.dim(1);
  Tensor<Real> out({c});
  if (mode == Pooling::max) {
    std::vector<std::size_t> arg = argmax_time(x, valid_length);
    for (std::size_t j = 0; j < c; ++j) out[j] = x.data()[arg[j] * c + j];
    if (g.tracking_branches()) {
      for (std::size_t j = 0; j < c; ++j) g.note_branch((j << 20) ^ arg[j]);
    }
    if (g.wants_grad({&x})) {
      g.record({x}, {out}, [x, out, arg = std::move(arg), c]() mutable {
        const Real* d = out.grad().data();
        Real* dx = x.ensure_grad().data();
        for (std::size_t j = 0; j < c; ++j) dx[arg[j] * c + j] += d[j];
      });
    }
  } else {
    const Real inv = Real(1) / static_cast<Real>(valid_length);
    for (std::size_t t = 0; t < valid_length; ++t) {
      for (std::size_t j = 0; j < c; ++j) out[j] += x.data()[t * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) out[j] *= inv;
    if (g.wants_grad({&x})) {
      g.record({x}, {out}, [x, out, c, valid_length, inv]() mutable {
        const Real* d = out.grad().data();
        Real* dx = x.ensure_grad().data();
        for (std::size_t t = 0; t < valid_length; ++t) {
          for (std::size_t j = 0; j < c; ++j) dx[t * c + j] += d[j] * inv;
        }
      });
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// recurrent cells

/// LSTM gate rows are ordered (input, forget, candidate, output); GRU rows are
/// (update, reset, candidate).
template <std::floating_point Real>
struct RecurrentCell {
  CellKind kind = CellKind::lstm;
  std::size_t input_size = 0;
  std::size_t hidden_size = 0;
  Tensor<Real> w;  // G·H × input_size
  Tensor<Real> u;  // G·H × H
  Tensor<Real> b;  // G·H

  static std::size_t gate_count(CellKind kind) { return kind == CellKind::lstm ? 4 : 3; }

  static RecurrentCell create(CellKind kind, std::size_t input_size, std::size_t hidden_size) {
    if (input_size == 0 || hidden_size == 0) throw ParameterError("recurrent cell sizes must be positive");
    RecurrentCell cell;
    cell.kind = kind;
    cell.input_size = input_size;
    cell.hidden_size = hidden_size;
    const std::size_t rows = gate_count(kind) * hidden_size;
    cell.w = Tensor<Real>({rows, input_size}, true);
    cell.u = Tensor<Real>({rows, hidden_size}, true);
    cell.b = Tensor<Real>({rows}, true);
    return cell;
  }

  std::size_t gates() const { return gate_count(kind); }

  std::size_t parameter_count() const { return gates() * hidden_size * (input_size + hidden_size + 1); }

  /// uniform(±1/sqrt(fan_in)) weights, zero biases, forget-gate bias 1 for LSTM.
  void initialize(Rng& rng) {
    init_uniform(w, input_size, rng);
    init_uniform(u, hidden_size, rng);
    std::fill(b.values().begin(), b.values().end(), Real(0));
    if (kind == CellKind::lstm) {
      std::fill_n(b.data() + hidden_size, hidden_size, Real(1));
    }
  }
};

namespace detail {

template <std::floating_point Real>
struct ScanOutput {
  Tensor<Real> hs;      // L×H, or H for a single step
  Tensor<Real> c_last;  // LSTM only
};

// Runs the cell over a batch of sequences. Sequence i reads the first valid[i]
// rows of xs[i]; at each step the sequences still running share one matrix
// product with the recurrent weights. h0 and c0 are either empty or hold one
// initial state per sequence.
template <std::floating_point Real>
std::vector<ScanOutput<Real>> recurrent_scan_batch(Graph<Real>& g, const RecurrentCell<Real>& cell,
                                                   const std::vector<Tensor<Real>>& xs,
                                                   const std::vector<std::size_t>& valid, Direction dir,
                                                   const std::vector<Tensor<Real>>& h0,
                                                   const std::vector<Tensor<Real>>& c0, const std::vector<Shape>& shapes) {
  const std::size_t d = cell.input_size;
  const std::size_t h = cell.hidden_size;
  const std::size_t gh = cell.gates() * h;
  const bool lstm = cell.kind == CellKind::lstm;
  const std::size_t batch = xs.size();

  std::vector<std::size_t> offset(batch + 1, 0);
  for (std::size_t i = 0; i < batch; ++i) offset[i + 1] = offset[i] + valid[i];
  const std::size_t total = offset[batch];
  // slots ordered longest first, so the running sequences are always a prefix
  std::vector<std::size_t> slot(batch);
  for (std::size_t k = 0; k < batch; ++k) slot[k] = k;
  std::stable_sort(slot.begin(), slot.end(), [&](std::size_t a, std::size_t b) { return valid[a] > valid[b]; });
  const std::size_t steps = batch ? valid[slot[0]] : 0;
  std::vector<std::size_t> running(steps, 0);
  for (std::size_t t = 0; t < steps; ++t) {
    while (running[t] < batch && valid[slot[running[t]]] > t) ++running[t];
  }
  auto row_of = [offset, valid, dir](std::size_t i, std::size_t t) {
    return offset[i] + (dir == Direction::forward ? t : valid[i] - 1 - t);
  };

  // Everything saved for the backward pass has one row per (sequence, position).
  struct Saved {
    std::vector<Real> x;      // total×D
    std::vector<Real> act;    // total×GH activated gates
    std::vector<Real> hprev;  // total×H state entering each position
    std::vector<Real> cprev;  // LSTM
    std::vector<Real> tcs;    // LSTM tanh(c)
    std::vector<Real> rh;     // GRU reset-gated state
  };
  auto saved = std::make_shared<Saved>();
  saved->x.resize(total * d);
  for (std::size_t i = 0; i < batch; ++i) std::copy_n(xs[i].data(), valid[i] * d, saved->x.begin() + offset[i] * d);
  saved->act.assign(total * gh, Real(0));
  saved->hprev.assign(total * h, Real(0));
  if (lstm) {
    saved->cprev.assign(total * h, Real(0));
    saved->tcs.assign(total * h, Real(0));
  } else {
    saved->rh.assign(total * h, Real(0));
  }

  std::vector<Real> proj(total * gh);
  detail::gemm_nt(saved->x.data(), cell.w.data(), proj.data(), total, d, gh, false);
  for (std::size_t r = 0; r < total; ++r) detail::axpy(Real(1), cell.b.data(), proj.data() + r * gh, gh);

  std::vector<Tensor<Real>> hs;
  for (const auto& s : shapes) hs.emplace_back(s);
  RowMatrix<Real> state = RowMatrix<Real>::Zero(batch, h);
  RowMatrix<Real> cstate = RowMatrix<Real>::Zero(batch, h);
  RowMatrix<Real> gates(batch, gh), rhm(batch, h);
  for (std::size_t k = 0; k < batch; ++k) {
    if (!h0.empty()) std::copy_n(h0[slot[k]].data(), h, state.row(k).data());
    if (!c0.empty()) std::copy_n(c0[slot[k]].data(), h, cstate.row(k).data());
  }
  const auto u = view(cell.u.data(), gh, h);

  for (std::size_t t = 0; t < steps; ++t) {
    const std::size_t n = running[t];
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t r = row_of(slot[k], t);
      std::copy_n(state.row(k).data(), h, saved->hprev.begin() + r * h);
      std::copy_n(proj.data() + r * gh, gh, gates.row(k).data());
      if (lstm) std::copy_n(cstate.row(k).data(), h, saved->cprev.begin() + r * h);
    }
    if (lstm) {
      gates.topRows(n).noalias() += state.topRows(n) * u.transpose();
      for (std::size_t k = 0; k < n; ++k) {
        const std::size_t r = row_of(slot[k], t);
        const Real* a = gates.row(k).data();
        Real* act = saved->act.data() + r * gh;
        for (std::size_t j = 0; j < h; ++j) {
          const Real ig = stable_sigmoid(a[j]);
          const Real fg = stable_sigmoid(a[h + j]);
          const Real gg = std::tanh(a[2 * h + j]);
          const Real og = stable_sigmoid(a[3 * h + j]);
          act[j] = ig;
          act[h + j] = fg;
          act[2 * h + j] = gg;
          act[3 * h + j] = og;
          const Real c = fg * cstate(k, j) + ig * gg;
          const Real tc = std::tanh(c);
          cstate(k, j) = c;
          state(k, j) = og * tc;
          saved->tcs[r * h + j] = tc;
        }
      }
    } else {
      gates.topLeftCorner(n, 2 * h).noalias() += state.topRows(n) * u.topRows(2 * h).transpose();
      for (std::size_t k = 0; k < n; ++k) {
        const std::size_t r = row_of(slot[k], t);
        Real* act = saved->act.data() + r * gh;
        for (std::size_t j = 0; j < h; ++j) {
          act[j] = stable_sigmoid(gates(k, j));
          act[h + j] = stable_sigmoid(gates(k, h + j));
          rhm(k, j) = act[h + j] * state(k, j);
        }
        std::copy_n(rhm.row(k).data(), h, saved->rh.begin() + r * h);
      }
      gates.block(0, 2 * h, n, h).noalias() += rhm.topRows(n) * u.bottomRows(h).transpose();
      for (std::size_t k = 0; k < n; ++k) {
        Real* act = saved->act.data() + row_of(slot[k], t) * gh;
        for (std::size_t j = 0; j < h; ++j) {
          const Real cand = std::tanh(gates(k, 2 * h + j));
          act[2 * h + j] = cand;
          state(k, j) = (Real(1) - act[j]) * state(k, j) + act[j] * cand;
        }
      }
    }
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t i = slot[k];
      std::copy_n(state.row(k).data(), h, hs[i].data() + (row_of(i, t) - offset[i]) * h);
    }
  }

  std::vector<ScanOutput<Real>> result(batch);
  for (std::size_t k = 0; k < batch; ++k) {
    const std::size_t i = slot[k];
    result[i].hs = hs[i];
    if (lstm && !c0.empty()) {
      result[i].c_last = Tensor<Real>({h}, std::vector<Real>(cstate.row(k).data(), cstate.row(k).data() + h));
    }
  }

  bool any = cell.w.requires_grad() || cell.u.requires_grad() || cell.b.requires_grad();
  for (const auto& t : xs) any = any || t.requires_grad();
  for (const auto& t : h0) any = any || t.requires_grad();
  for (const auto& t : c0) any = any || t.requires_grad();
  if (!g.recording() || !any) return result;

  std::vector<Tensor<Real>> node_inputs(xs.begin(), xs.end());
  node_inputs.insert(node_inputs.end(), {cell.w, cell.u, cell.b});
  node_inputs.insert(node_inputs.end(), h0.begin(), h0.end());
  node_inputs.insert(node_inputs.end(), c0.begin(), c0.end());
  std::vector<Tensor<Real>> c_last;
  for (const auto& out : result) {
    if (out.c_last.defined()) c_last.push_back(out.c_last);
  }
  std::vector<Tensor<Real>> node_outputs(hs.begin(), hs.end());
  node_outputs.insert(node_outputs.end(), c_last.begin(), c_last.end());

  g.record(std::move(node_inputs), std::move(node_outputs),
           [=, xs = xs, h0 = h0, c0 = c0, w = cell.w, u_t = cell.u, b = cell.b]() mutable {
             const Fault fault = injected_fault().load();
             const auto uu = view(u_t.data(), gh, h);
             RowMatrix<Real> dnext = RowMatrix<Real>::Zero(batch, h);
             RowMatrix<Real> dcnext = RowMatrix<Real>::Zero(batch, h);
             RowMatrix<Real> dh(batch, h), ds(batch, gh), drh(batch, h);
             std::vector<Real> da(total * gh);
             for (std::size_t k = 0; k < batch && !c_last.empty(); ++k) {
               std::copy_n(c_last[slot[k]].grad().data(), h, dcnext.row(k).data());
             }
             for (std::size_t t = steps; t-- > 0;) {
               const std::size_t n = running[t];
               for (std::size_t k = 0; k < n; ++k) {
                 const std::size_t i = slot[k];
                 const Real* g_out = hs[i].grad().data() + (row_of(i, t) - offset[i]) * h;
                 for (std::size_t j = 0; j < h; ++j) dh(k, j) = g_out[j] + dnext(k, j);
               }
               if (lstm) {
                 const Real fsign = fault == Fault::lstm_backward_sign ? Real(-1) : Real(1);
                 for (std::size_t k = 0; k < n; ++k) {
                   const std::size_t r = row_of(slot[k], t);
                   const Real* act = saved->act.data() + r * gh;
                   const Real* cp = saved->cprev.data() + r * h;
                   const Real* tc = saved->tcs.data() + r * h;
                   for (std::size_t j = 0; j < h; ++j) {
                     const Real ig = act[j], fg = act[h + j], gg = act[2 * h + j], og = act[3 * h + j];
                     const Real dc = dcnext(k, j) + dh(k, j) * og * (Real(1) - tc[j] * tc[j]);
                     ds(k, j) = dc * gg * ig * (Real(1) - ig);
                     ds(k, h + j) = fsign * dc * cp[j] * fg * (Real(1) - fg);
                     ds(k, 2 * h + j) = dc * ig * (Real(1) - gg * gg);
                     ds(k, 3 * h + j) = dh(k, j) * tc[j] * og * (Real(1) - og);
                     dcnext(k, j) = dc * fg;
                   }
                 }
                 dnext.topRows(n).noalias() = ds.topRows(n) * uu;
               } else {
                 const Real zsign = fault == Fault::gru_backward_sign ? Real(-1) : Real(1);
                 for (std::size_t k = 0; k < n; ++k) {
                   const Real* act = saved->act.data() + row_of(slot[k], t) * gh;
                   for (std::size_t j = 0; j < h; ++j) {
                     const Real cand = act[2 * h + j];
                     ds(k, 2 * h + j) = dh(k, j) * act[j] * (Real(1) - cand * cand);
                   }
                 }
                 drh.topRows(n).noalias() = ds.block(0, 2 * h, n, h) * uu.bottomRows(h);
                 for (std::size_t k = 0; k < n; ++k) {
                   const std::size_t r = row_of(slot[k], t);
                   const Real* act = saved->act.data() + r * gh;
                   const Real* hp = saved->hprev.data() + r * h;
                   for (std::size_t j = 0; j < h; ++j) {
                     const Real z = act[j], rg = act[h + j], cand = act[2 * h + j];
                     ds(k, j) = zsign * dh(k, j) * (cand - hp[j]) * z * (Real(1) - z);
                     ds(k, h + j) = drh(k, j) * hp[j] * rg * (Real(1) - rg);
                     dnext(k, j) = dh(k, j) * (Real(1) - z) + drh(k, j) * rg;
                   }
                 }
                 dnext.topRows(n).noalias() += ds.topLeftCorner(n, 2 * h) * uu.topRows(2 * h);
               }
               for (std::size_t k = 0; k < n; ++k) {
                 std::copy_n(ds.row(k).data(), gh, da.begin() + row_of(slot[k], t) * gh);
               }
             }
             if (u_t.requires_grad()) {
               Real* du = u_t.ensure_grad().data();
               if (lstm) {
                 detail::gemm_tn_acc(da.data(), saved->hprev.data(), du, total, gh, h);
               } else {
                 detail::gemm_tn_acc(da.data(), gh, saved->hprev.data(), du, total, 2 * h, h);
                 detail::gemm_tn_acc(da.data() + 2 * h, gh, saved->rh.data(), du + 2 * h * h, total, h, h);
               }
             }
             if (w.requires_grad()) detail::gemm_tn_acc(da.data(), saved->x.data(), w.ensure_grad().data(), total, gh, d);
             if (b.requires_grad()) {
               view(b.ensure_grad().data(), 1, gh).noalias() += view(da.data(), total, gh).colwise().sum();
             }
             bool want_x = false;
             for (const auto& x : xs) want_x = want_x || x.requires_grad();
             if (want_x) {
               std::vector<Real> dx(total * d);
               detail::gemm_nn(da.data(), w.data(), dx.data(), total, gh, d, false);
               for (std::size_t i = 0; i < batch; ++i) {
                 if (!xs[i].requires_grad()) continue;
                 detail::axpy(Real(1), dx.data() + offset[i] * d, xs[i].ensure_grad().data(), valid[i] * d);
               }
             }
             for (std::size_t k = 0; k < batch; ++k) {
               const std::size_t i = slot[k];
               if (!h0.empty() && h0[i].requires_grad()) {
                 detail::axpy(Real(1), dnext.row(k).data(), h0[i].ensure_grad().data(), h);
               }
               if (!c0.empty() && c0[i].requires_grad()) {
                 detail::axpy(Real(1), dcnext.row(k).data(), c0[i].ensure_grad().data(), h);
               }
             }
           });
  return result;
}

template <std::floating_point Real>
ScanOutput<Real> recurrent_scan(Graph<Real>& g, const RecurrentCell<Real>& cell, const Tensor<Real>& xs,
                                std::size_t valid, Direction dir, const Tensor<Real>* h0,
                                const Tensor<Real>* c0, Shape hs_shape) {
  std::vector<Tensor<Real>> h0s, c0s;
  if (h0) h0s.push_back(*h0);
  if (c0) c0s.push_back(*c0);
  return recurrent_scan_batch(g, cell, {xs}, {valid}, dir, h0s, c0s, {std::move(hs_shape)}).front();
}

template <std::floating_point Real>
void check_step_sizes(const RecurrentCell<Real>& cell, const Tensor<Real>& x, const Tensor<Real>& h) {
  if (x.size() != cell.input_size || h.size() != cell.hidden_size) {
    throw DimensionError("recurrent step: cell expects input " + std::to_string(cell.input_size) + " and hidden " +
                         std::to_string(cell.hidden_size) + ", got " + shape_str(x.shape()) + " and " +
                         shape_str(h.shape()));
  }
}

}  // namespace detail

/// One LSTM step; returns (h', c').
template <std::floating_point Real>
std::pair<Tensor<Real>, Tensor<Real>> lstm_step(Graph<Real>& g, const RecurrentCell<Real>& cell, const Tensor<Real>& x,
                                                const Tensor<Real>& h, const Tensor<Real>& c) {
  if (cell.kind != CellKind::lstm) throw ParameterError("lstm_step: cell is not an LSTM");
  detail::check_step_sizes(cell, x, h);
  if (c.size() != cell.hidden_size) throw DimensionError("lstm_step: cell state has wrong size " + shape_str(c.shape()));
  auto out = detail::recurrent_scan(g, cell, x, 1, Direction::forward, &h, &c, Shape{cell.hidden_size});
  return {out.hs, out.c_last};
}

template <std::floating_point Real>
Tensor<Real> gru_step(Graph<Real>& g, const RecurrentCell<Real>& cell, const Tensor<Real>& x, const Tensor<Real>& h) {
  if (cell.kind != CellKind::gru) throw ParameterError("gru_step: cell is not a GRU");
  detail::check_step_sizes(cell, x, h);
  return detail::recurrent_scan(g, cell, x, 1, Direction::forward, &h, static_cast<const Tensor<Real>*>(nullptr),
                                Shape{cell.hidden_size})
      .hs;
}

/// Hidden states for every row of xs (L×D). Only the first valid_length rows
/// are processed; the backward direction runs from valid_length-1 down to 0.
/// Rows at or past valid_length are zero.
template <std::floating_point Real>
Tensor<Real> run_rnn(Graph<Real>& g, const RecurrentCell<Real>& cell, const Tensor<Real>& xs, Direction dir,
                     std::size_t valid_length) {
  if (xs.rank() != 2 || xs.dim(1) != cell.input_size) {
    throw DimensionError("run_rnn: input " + shape_str(xs.shape()) + " does not match cell input size " +
                         std::to_string(cell.input_size));
  }
  if (valid_length == 0) throw EmptySequenceError("run_rnn: empty sequence");
  if (valid_length > xs.dim(0)) {
    throw DimensionError("run_rnn: valid_length " + std::to_string(valid_length) + " exceeds " +
                         std::to_string(xs.dim(0)) + " rows");
  }
  return detail::recurrent_scan<Real>(g, cell, xs, valid_length, dir, nullptr, nullptr,
                                Shape{xs.dim(0), cell.hidden_size})
      .hs;
}

/// run_rnn over several sentences at once; sentence i reads the first
/// valid_lengths[i] rows of xs[i].
template <std::floating_point Real>
std::vector<Tensor<Real>> run_rnn_batch(Graph<Real>& g, const RecurrentCell<Real>& cell,
                                        const std::vector<Tensor<Real>>& xs,
                                        const std::vector<std::size_t>& valid_lengths, Direction dir) {
  if (xs.size() != valid_lengths.size()) throw DimensionError("run_rnn_batch: one valid length per sequence needed");
  std::vector<Shape> shapes;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (xs[i].rank() != 2 || xs[i].dim(1) != cell.input_size) {
      throw DimensionError("run_rnn: input " + shape_str(xs[i].shape()) + " does not match cell input size " +
                           std::to_string(cell.input_size));
    }
    if (valid_lengths[i] == 0) throw EmptySequenceError("run_rnn: empty sequence");
    if (valid_lengths[i] > xs[i].dim(0)) {
      throw DimensionError("run_rnn: valid_length " + std::to_string(valid_lengths[i]) + " exceeds " +
                           std::to_string(xs[i].dim(0)) + " rows");
    }
    shapes.push_back(Shape{xs[i].dim(0), cell.hidden_size});
  }
  auto scans = detail::recurrent_scan_batch<Real>(g, cell, xs, valid_lengths, dir, {}, {}, shapes);
  std::vector<Tensor<Real>> out;
  for (auto& s : scans) out.push_back(std::move(s.hs));
  return out;
}

/// Per-position [forward ; backward] hidden states, L×2H.
template <std::floating_point Real>
Tensor<Real> bidirectional(Graph<Real>& g, const RecurrentCell<Real>& fwd, const RecurrentCell<Real>& bwd,
                           const Tensor<Real>& xs, std::size_t valid_length) {
  if (fwd.hidden_size != bwd.hidden_size) {
    throw DimensionError("bidirectional: hidden sizes differ (" + std::to_string(fwd.hidden_size) + " vs " +
                         std::to_string(bwd.hidden_size) + ")");
  }
  auto hf = run_rnn(g, fwd, xs, Direction::forward, valid_length);
  auto hb = run_rnn(g, bwd, xs, Direction::backward, valid_length);
  return concat(g, {hf, hb}, 1);
}

// ---------------------------------------------------------------------------
// dense layers

/// W[out×in] · x[in] + b[out]
template <std::floating_point Real>
Tensor<Real> linear(Graph<Real>& g, const Tensor<Real>& w, const Tensor<Real>& b, const Tensor<Real>& x) {
  if (w.rank() != 2 || x.size() != w.dim(1) || b.size() != w.dim(0)) {
    throw DimensionError("linear: W " + shape_str(w.shape()) + ", b " + shape_str(b.shape()) + ", x " +
                         shape_str(x.shape()) + " do not agree");
  }
  const std::size_t rows = w.dim(0), cols = w.dim(1);
  Tensor<Real> out({rows});
  for (std::size_t r = 0; r < rows; ++r) out[r] = detail::dot(w.data() + r * cols, x.data(), cols) + b[r];
  if (g.wants_grad({&w, &b, &x})) {
    g.record({w, b, x}, {out}, [w, b, x, out, rows, cols]() mutable {
      const Real* d = out.grad().data();
      if (w.requires_grad()) {
        Real* dw = w.ensure_grad().data();
        for (std::size_t r = 0; r < rows; ++r) detail::axpy(d[r], x.data(), dw + r * cols, cols);
      }
      if (b.requires_grad()) detail::axpy(Real(1), d, b.ensure_grad().data(), rows);
      if (x.requires_grad()) {
        Real* dx = x.ensure_grad().data();
        for (std::size_t r = 0; r < rows; ++r) detail::axpy(d[r], w.data() + r * cols, dx, cols);
      }
    });
  }
  return out;
}

/// Row-wise affine map: X[n×in] · Wᵀ + b, giving n×out.
template <std::floating_point Real>
Tensor<Real> linear_rows(Graph<Real>& g, const Tensor<Real>& w, const Tensor<Real>& b, const Tensor<Real>& x) {
  if (w.rank() != 2 || x.rank() != 2 || x.dim(1) != w.dim(1) || b.size() != w.dim(0)) {
    throw DimensionError("linear_rows: W " + shape_str(w.shape()) + ", b " + shape_str(b.shape()) + ", X " +
                         shape_str(x.shape()) + " do not agree");
  }
  const std::size_t n = x.dim(0), in = w.dim(1), outd = w.dim(0);
  Tensor<Real> out({n, outd});
  detail::gemm_nt(x.data(), w.data(), out.data(), n, in, outd, false);
  for (std::size_t i = 0; i < n; ++i) detail::axpy(Real(1), b.data(), out.data() + i * outd, outd);
  if (g.wants_grad({&w, &b, &x})) {
    g.record({w, b, x}, {out}, [w, b, x, out, n, in, outd]() mutable {
      const Real* d = out.grad().data();
      if (w.requires_grad()) detail::gemm_tn_acc(d, x.data(), w.ensure_grad().data(), n, outd, in);
      if (b.requires_grad()) {
        Real* db = b.ensure_grad().data();
        for (std::size_t i = 0; i < n; ++i) detail::axpy(Real(1), d + i * outd, db, outd);
      }
      if (x.requires_grad()) detail::gemm_nn(d, w.data(), x.ensure_grad().data(), n, outd, in, true);
    });
  }
  return out;
}

/// Inverted dropout: in training each unit is zeroed with probability p and
/// survivors are scaled by 1/(1-p). Identity in eval mode or when p == 0.
template <std::floating_point Real>
Tensor<Real> dropout(Graph<Real>& g, const Tensor<Real>& x, double p, Mode mode, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw ParameterError("dropout probability must lie in [0, 1), got " + std::to_string(p));
  if (mode == Mode::eval || p == 0.0) return x;
  const Real keep_scale = static_cast<Real>(1.0 / (1.0 - p));
  std::vector<Real> mask(x.size());
  for (Real& m : mask) m = rng.bernoulli(p) ? Real(0) : keep_scale;
  Tensor<Real> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * mask[i];
  if (g.wants_grad({&x})) {
    g.record({x}, {out}, [x, out, mask = std::move(mask)]() mutable {
      const Real* d = out.grad().data();
      Real* dx = x.ensure_grad().data();
      for (std::size_t i = 0; i < mask.size(); ++i) dx[i] += d[i] * mask[i];
    });
  }
  return out;
}

/// Bernoulli negative log likelihood of a single logit:
/// max(z, 0) - z·y + log(1 + exp(-|z|)).
template <std::floating_point Real>
Tensor<Real> bce_loss(Graph<Real>& g, const Tensor<Real>& logit, int label) {
  if (label != 0 && label != 1) throw ParameterError("bce_loss: label must be 0 or 1, got " + std::to_string(label));
  if (logit.size() != 1) throw DimensionError("bce_loss: expected a scalar logit, got " + shape_str(logit.shape()));
  const Real z = logit[0];
  const Real y = static_cast<Real>(label);
  const Real loss = std::max(z, Real(0)) - z * y + std::log1p(std::exp(-std::abs(z)));
  Tensor<Real> out = Tensor<Real>::scalar(loss);
  if (g.wants_grad({&logit})) {
    g.record({logit}, {out}, [logit, out, z, y]() mutable {
      logit.ensure_grad()[0] += out.grad()[0] * (stable_sigmoid(z) - y);
    });
  }
  return out;
}

}  // namespace metaphor
