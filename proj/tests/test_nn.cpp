#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "metaphor/nn.hpp"
#include "support.hpp"

using namespace metaphor;
using testing_support::random_tensor;

namespace {

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Plain-loop reference cells, written independently of the fused kernels.
std::vector<double> affine(const RecurrentCell<double>& cell, std::size_t row_begin, std::size_t rows,
                           const std::vector<double>& x, const std::vector<double>& h) {
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t row = row_begin + r;
    double s = cell.b[row];
    for (std::size_t j = 0; j < cell.input_size; ++j) s += cell.w.at(row, j) * x[j];
    for (std::size_t j = 0; j < cell.hidden_size; ++j) s += cell.u.at(row, j) * h[j];
    out[r] = s;
  }
  return out;
}

void reference_lstm(const RecurrentCell<double>& cell, const std::vector<double>& x, std::vector<double>& h,
                    std::vector<double>& c) {
  const std::size_t n = cell.hidden_size;
  const auto a = affine(cell, 0, 4 * n, x, h);
  for (std::size_t j = 0; j < n; ++j) {
    const double i = sig(a[j]), f = sig(a[n + j]), g = std::tanh(a[2 * n + j]), o = sig(a[3 * n + j]);
    c[j] = f * c[j] + i * g;
    h[j] = o * std::tanh(c[j]);
  }
}

void reference_gru(const RecurrentCell<double>& cell, const std::vector<double>& x, std::vector<double>& h) {
  const std::size_t n = cell.hidden_size;
  const auto zr = affine(cell, 0, 2 * n, x, h);
  std::vector<double> rh(n);
  for (std::size_t j = 0; j < n; ++j) rh[j] = sig(zr[n + j]) * h[j];
  const auto cand = affine(cell, 2 * n, n, x, rh);
  for (std::size_t j = 0; j < n; ++j) {
    const double z = sig(zr[j]);
    h[j] = (1 - z) * h[j] + z * std::tanh(cand[j]);
  }
}

RecurrentCell<double> random_cell(CellKind kind, std::size_t d, std::size_t h, Rng& rng) {
  auto cell = RecurrentCell<double>::create(kind, d, h);
  cell.initialize(rng);
  for (double& v : cell.b.values()) v += rng.uniform(-0.3, 0.3);
  return cell;
}

std::vector<double> row(const Tensor<double>& t, std::size_t r) {
  const std::size_t c = t.dim(1);
  return {t.data() + r * c, t.data() + (r + 1) * c};
}

}  // namespace

TEST(Embedding, LooksUpRowsAndReadsPadAsZero) {
  Rng rng(1);
  EmbeddingLayer<double> layer(random_tensor({5, 3}, rng), true);
  Graph<double> g;
  std::vector<std::size_t> ids{2, 0, 4};
  auto e = embed(g, layer, ids);
  for (std::size_t j = 0; j < 3; ++j) {
    EXPECT_EQ(e.at(0, j), layer.matrix.at(2, j));
    EXPECT_EQ(e.at(1, j), 0.0);
    EXPECT_EQ(e.at(2, j), layer.matrix.at(4, j));
  }
}

TEST(Embedding, GradientScattersIntoUsedRowsOnly) {
  Rng rng(2);
  EmbeddingLayer<double> layer(random_tensor({4, 2}, rng), true);
  Graph<double> g;
  std::vector<std::size_t> ids{3, 0, 3};
  g.backward(sum(g, embed(g, layer, ids)));
  const auto grad = layer.matrix.grad();
  EXPECT_EQ(grad[0], 0.0);  // PAD
  EXPECT_EQ(grad[3 * 2], 2.0);
  EXPECT_EQ(grad[1 * 2], 0.0);
}

TEST(Embedding, RejectsOutOfRangeIds) {
  EmbeddingLayer<double> layer(Tensor<double>({3, 2}), false);
  Graph<double> g;
  std::vector<std::size_t> ids{1, 3};
  EXPECT_THROW(embed(g, layer, ids), VocabularyError);
  EXPECT_THROW(embed(g, layer, std::span<const std::size_t>()), EmptySequenceError);
}

TEST(Conv, MatchesDirectConvolution) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t d = 1 + rng.index(4), k = 1 + rng.index(3), c = 1 + rng.index(3), len = k + rng.index(5);
    auto bank = ConvBank<double>::create({k}, d, c);
    for (auto& w : bank.weights) w = random_tensor({k, d, c}, rng);
    for (auto& b : bank.biases) b = random_tensor({c}, rng);
    auto x = random_tensor({len, d}, rng);
    Graph<double> g;
    auto out = conv1d_valid(g, bank, x, k, false);
    ASSERT_EQ(out.shape(), (Shape{len - k + 1, c}));
    for (std::size_t t = 0; t + k <= len; ++t) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        double s = bank.biases[0][ch];
        for (std::size_t i = 0; i < k; ++i) {
          for (std::size_t j = 0; j < d; ++j) s += x.at(t + i, j) * bank.weights[0][(i * d + j) * c + ch];
        }
        EXPECT_NEAR(out.at(t, ch), s, 1e-12);
      }
    }
  }
}

TEST(Conv, ShortInputIsAnError) {
  auto bank = ConvBank<double>::create({3}, 2, 1);
  Graph<double> g;
  EXPECT_THROW(conv1d_valid(g, bank, Tensor<double>({2, 2}), 3), EmptySequenceError);
  EXPECT_THROW(conv1d_valid(g, bank, Tensor<double>({4, 2}), 4), ParameterError);
}

TEST(Pooling, MaxAndMeanIgnoreRowsPastValidLength) {
  auto x = Tensor<double>::matrix({{1, 5}, {3, -2}, {100, 100}});
  Graph<double> g;
  auto mx = pool_time(g, x, Pooling::max, 2);
  auto av = pool_time(g, x, Pooling::avg, 2);
  EXPECT_EQ(mx[0], 3);
  EXPECT_EQ(mx[1], 5);
  EXPECT_EQ(av[0], 2);
  EXPECT_EQ(av[1], 1.5);
  EXPECT_THROW(pool_time(g, x, Pooling::max, 0), EmptySequenceError);
  EXPECT_THROW(pool_time(g, x, Pooling::max, 4), DimensionError);
}

TEST(Pooling, MaxGradientGoesToFirstArgmax) {
  auto x = Tensor<double>::matrix({{2, 1}, {2, 3}});
  x.set_requires_grad(true);
  Graph<double> g;
  g.backward(sum(g, pool_time(g, x, Pooling::max, 2)));
  EXPECT_EQ(x.grad()[0], 1);
  EXPECT_EQ(x.grad()[2], 0);
  EXPECT_EQ(x.grad()[3], 1);
}

TEST(Recurrent, LstmStepMatchesReference) {
  Rng rng(11);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t d = 1 + rng.index(5), n = 1 + rng.index(5);
    auto cell = random_cell(CellKind::lstm, d, n, rng);
    auto x = random_tensor({d}, rng), h = random_tensor({n}, rng), c = random_tensor({n}, rng);
    Graph<double> g;
    auto [h1, c1] = lstm_step(g, cell, x, h, c);
    std::vector<double> hr(h.values().begin(), h.values().end()), cr(c.values().begin(), c.values().end());
    reference_lstm(cell, {x.values().begin(), x.values().end()}, hr, cr);
    for (std::size_t j = 0; j < n; ++j) {
      EXPECT_NEAR(h1[j], hr[j], 1e-12);
      EXPECT_NEAR(c1[j], cr[j], 1e-12);
    }
  }
}

TEST(Recurrent, GruStepMatchesReference) {
  Rng rng(12);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t d = 1 + rng.index(5), n = 1 + rng.index(5);
    auto cell = random_cell(CellKind::gru, d, n, rng);
    auto x = random_tensor({d}, rng), h = random_tensor({n}, rng);
    Graph<double> g;
    auto h1 = gru_step(g, cell, x, h);
    std::vector<double> hr(h.values().begin(), h.values().end());
    reference_gru(cell, {x.values().begin(), x.values().end()}, hr);
    for (std::size_t j = 0; j < n; ++j) EXPECT_NEAR(h1[j], hr[j], 1e-12);
  }
}

TEST(Recurrent, SequenceRunsBothDirectionsOverValidRows) {
  Rng rng(13);
  for (CellKind kind : {CellKind::lstm, CellKind::gru}) {
    const std::size_t d = 3, n = 4, len = 6, valid = 4;
    auto cell = random_cell(kind, d, n, rng);
    auto xs = random_tensor({len, d}, rng);
    for (Direction dir : {Direction::forward, Direction::backward}) {
      Graph<double> g;
      auto hs = run_rnn(g, cell, xs, dir, valid);
      std::vector<double> h(n, 0.0), c(n, 0.0);
      for (std::size_t s = 0; s < valid; ++s) {
        const std::size_t p = dir == Direction::forward ? s : valid - 1 - s;
        if (kind == CellKind::lstm) {
          reference_lstm(cell, row(xs, p), h, c);
        } else {
          reference_gru(cell, row(xs, p), h);
        }
        for (std::size_t j = 0; j < n; ++j) EXPECT_NEAR(hs.at(p, j), h[j], 1e-12);
      }
      for (std::size_t p = valid; p < len; ++p) {
        for (std::size_t j = 0; j < n; ++j) EXPECT_EQ(hs.at(p, j), 0.0);
      }
    }
  }
}

TEST(Recurrent, BatchedScanMatchesOneSentenceAtATime) {
  Rng rng(14);
  for (CellKind kind : {CellKind::lstm, CellKind::gru}) {
    for (Direction dir : {Direction::forward, Direction::backward}) {
      const std::size_t d = 3, n = 5;
      auto cell = random_cell(kind, d, n, rng);
      std::vector<Tensor<double>> xs;
      std::vector<std::size_t> valid;
      for (std::size_t i = 0; i < 5; ++i) {
        const std::size_t len = 1 + rng.index(7);
        xs.push_back(random_tensor({len + rng.index(2), d}, rng, -1, 1, true));
        valid.push_back(len);
      }
      auto weights = random_tensor({8, n}, rng);
      auto loss_of = [&](Graph<double>& g, const std::vector<Tensor<double>>& hs) {
        Tensor<double> total;
        for (const auto& h : hs) {
          auto l = sum(g, mul(g, h, slice(g, weights, 0, 0, h.dim(0))));
          total = total.defined() ? add(g, total, l) : l;
        }
        return total;
      };

      Graph<double> gb;
      auto batched = run_rnn_batch(gb, cell, xs, valid, dir);
      gb.backward(loss_of(gb, batched));
      std::vector<std::vector<double>> grads_batched;
      for (auto& x : xs) grads_batched.emplace_back(x.grad().begin(), x.grad().end());
      std::vector<double> du_batched(cell.u.grad().begin(), cell.u.grad().end());

      for (auto& x : xs) x.zero_grad();
      for (auto* p : {&cell.w, &cell.u, &cell.b}) p->zero_grad();
      std::vector<Tensor<double>> single;
      Graph<double> gs;
      for (std::size_t i = 0; i < xs.size(); ++i) single.push_back(run_rnn(gs, cell, xs[i], dir, valid[i]));
      gs.backward(loss_of(gs, single));

      for (std::size_t i = 0; i < xs.size(); ++i) {
        for (std::size_t k = 0; k < single[i].size(); ++k) EXPECT_NEAR(batched[i][k], single[i][k], 1e-12);
        for (std::size_t k = 0; k < xs[i].size(); ++k) EXPECT_NEAR(grads_batched[i][k], xs[i].grad()[k], 1e-12);
      }
      for (std::size_t k = 0; k < du_batched.size(); ++k) EXPECT_NEAR(du_batched[k], cell.u.grad()[k], 1e-12);
    }
  }
}

TEST(Recurrent, RejectsEmptyAndMisshapedInputs) {
  auto cell = RecurrentCell<double>::create(CellKind::lstm, 3, 2);
  Graph<double> g;
  EXPECT_THROW(run_rnn(g, cell, Tensor<double>({4, 3}), Direction::forward, 0), EmptySequenceError);
  EXPECT_THROW(run_rnn(g, cell, Tensor<double>({4, 2}), Direction::forward, 2), DimensionError);
  EXPECT_THROW(run_rnn(g, cell, Tensor<double>({4, 3}), Direction::forward, 5), DimensionError);
  EXPECT_THROW(gru_step(g, cell, Tensor<double>({3}), Tensor<double>({2})), ParameterError);
}

TEST(Recurrent, LstmForgetBiasStartsAtOne) {
  Rng rng(1);
  auto cell = RecurrentCell<double>::create(CellKind::lstm, 2, 3);
  cell.initialize(rng);
  for (std::size_t j = 0; j < 3; ++j) {
    EXPECT_EQ(cell.b[j], 0.0);
    EXPECT_EQ(cell.b[3 + j], 1.0);
  }
}

TEST(Dense, LinearMatchesMatrixVectorProduct) {
  Rng rng(15);
  auto w = random_tensor({3, 4}, rng), b = random_tensor({3}, rng), x = random_tensor({4}, rng);
  Graph<double> g;
  auto y = linear(g, w, b, x);
  for (std::size_t r = 0; r < 3; ++r) {
    double s = b[r];
    for (std::size_t c = 0; c < 4; ++c) s += w.at(r, c) * x[c];
    EXPECT_NEAR(y[r], s, 1e-14);
  }
  EXPECT_THROW(linear(g, w, b, Tensor<double>({3})), DimensionError);
}

TEST(Dropout, EvalIsIdentityAndTrainScalesSurvivors) {
  Rng rng(16);
  auto x = Tensor<double>(Shape{20000});
  for (double& v : x.values()) v = 1.0;
  Graph<double> g;
  auto same = dropout(g, x, 0.5, Mode::eval, rng);
  EXPECT_EQ(same.data(), x.data());
  auto y = dropout(g, x, 0.25, Mode::train, rng);
  std::size_t zeros = 0;
  for (double v : y.values()) {
    if (v == 0.0) {
      ++zeros;
    } else {
      EXPECT_DOUBLE_EQ(v, 1.0 / 0.75);
    }
  }
  EXPECT_NEAR(static_cast<double>(zeros) / 20000.0, 0.25, 0.02);
  EXPECT_THROW(dropout(g, x, 1.0, Mode::train, rng), ParameterError);
}

TEST(Loss, BinaryCrossEntropyMatchesDefinition) {
  for (double z : {-30.0, -2.0, -0.1, 0.0, 0.4, 3.0, 30.0}) {
    for (int y : {0, 1}) {
      Graph<double> g;
      auto logit = Tensor<double>::vector({z});
      logit.set_requires_grad(true);
      auto loss = bce_loss(g, logit, y);
      const double p = sig(z);
      // -log p for y = 1 and -log(1 - p) for y = 0, written as softplus
      const double expected = y ? std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
      if (std::isfinite(expected)) {
        EXPECT_NEAR(loss.item(), expected, 1e-12 * std::max(1.0, expected));
      }
      g.backward(loss);
      EXPECT_NEAR(logit.grad()[0], p - y, 1e-15);
    }
  }
  Graph<double> g;
  EXPECT_THROW(bce_loss(g, Tensor<double>::vector({0.0}), 2), ParameterError);
}
