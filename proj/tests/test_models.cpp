#include <vector>

#include <gtest/gtest.h>

#include "metaphor/models.hpp"
#include "support.hpp"

using namespace metaphor;
using testing_support::random_tensor;

namespace {

const std::vector<Architecture> all_architectures{Architecture::cnn, Architecture::bilstm, Architecture::bigru,
                                                  Architecture::crnn};

ModelConfig small_config(Architecture arch, std::size_t max_len = 12) {
  ModelConfig c;
  c.architecture = arch;
  c.embedding_dim = 6;
  c.kernel_heights = {2, 3};
  c.out_channels = 4;
  c.hidden_size = 5;
  c.fc_units = 4;
  c.max_len = max_len;
  c.seed = 3;
  return c;
}

Model<double> small_model(Architecture arch, std::size_t vocab = 20) {
  Rng rng(9);
  auto config = small_config(arch);
  return build(config, random_tensor({vocab, config.embedding_dim}, rng, -0.5, 0.5));
}

std::vector<std::size_t> padded_ids(Rng& rng, std::size_t valid, std::size_t max_len, std::size_t vocab) {
  std::vector<std::size_t> ids(max_len, 0);
  for (std::size_t i = 0; i < valid; ++i) ids[i] = 1 + rng.index(vocab - 1);
  return ids;
}

}  // namespace

TEST(Models, PaddingIsOpaque) {
  Rng rng(31);
  for (Architecture arch : all_architectures) {
    auto model = small_model(arch);
    for (int trial = 0; trial < 50; ++trial) {
      const std::size_t valid = 1 + rng.index(12);
      auto ids = padded_ids(rng, valid, 12, 20);
      const double before = logit(model, ids, valid);
      auto mutated = ids;
      for (std::size_t i = valid; i < mutated.size(); ++i) mutated[i] = rng.index(20);
      ASSERT_EQ(logit(model, mutated, valid), before) << architecture_key(arch);
      for (std::size_t j = 0; j < model.config.embedding_dim; ++j) model.embedding.matrix[j] = rng.uniform(-5, 5);
      ASSERT_EQ(logit(model, ids, valid), before) << architecture_key(arch) << " PAD row";
    }
  }
}

TEST(Models, ParameterCountsMatchHandCounts) {
  const std::size_t v = 1000;
  ModelConfig cnn;
  cnn.architecture = Architecture::cnn;
  cnn.embedding_dim = 150;
  cnn.max_len = 20;
  EXPECT_EQ(build(cnn, Tensor<double>({v, 150})).parameter_count(),
            v * 150 + (3 + 4 + 5) * 150 * 32 + 3 * 32 + 96 + 1);

  ModelConfig lstm = cnn;
  lstm.architecture = Architecture::bilstm;
  lstm.embedding_dim = 50;
  lstm.fine_tune = false;
  EXPECT_EQ(build(lstm, Tensor<double>({v, 50})).parameter_count(),
            2 * 4 * 100 * (50 + 100 + 1) + 100 * 200 + 100 + 100 + 1);

  ModelConfig gru = lstm;
  gru.architecture = Architecture::bigru;
  EXPECT_EQ(build(gru, Tensor<double>({v, 50})).parameter_count(),
            2 * 3 * 100 * (50 + 100 + 1) + 100 * 200 + 100 + 100 + 1);

  ModelConfig crnn = lstm;
  crnn.architecture = Architecture::crnn;
  crnn.fine_tune = true;
  EXPECT_EQ(build(crnn, Tensor<double>({v, 50})).parameter_count(),
            v * 50 + 2 * 4 * 100 * (50 + 100 + 1) + 100 * (200 + 50) + 100 + 100 + 1);

  for (Architecture arch : all_architectures) {
    auto m = small_model(arch);
    EXPECT_EQ(m.parameter_count(), expected_parameter_count(m.config, 20)) << architecture_key(arch);
  }
}

TEST(Models, CnnFeatureWidthIsKernelsTimesChannels) {
  ModelConfig c;
  c.architecture = Architecture::cnn;
  c.embedding_dim = 150;
  c.max_len = 10;
  const auto m = build(c, Tensor<double>({10, 150}));
  EXPECT_EQ(m.feature_width(), 96u);
  EXPECT_EQ(m.out_w.shape(), (Shape{1, 96}));
}

TEST(Models, FrozenEmbeddingIsNotAParameter) {
  auto config = small_config(Architecture::bigru);
  config.fine_tune = false;
  auto m = build(config, Tensor<double>({20, 6}));
  for (const auto& p : m.parameters()) EXPECT_NE(p.data(), m.embedding.matrix.data());
  EXPECT_FALSE(m.embedding.matrix.requires_grad());
}

TEST(Models, SameSeedSameWeights) {
  for (Architecture arch : all_architectures) {
    auto a = small_model(arch), b = small_model(arch);
    auto ta = a.tensors(), tb = b.tensors();
    ASSERT_EQ(ta.size(), tb.size());
    for (std::size_t i = 0; i < ta.size(); ++i) {
      EXPECT_EQ(std::vector<double>(ta[i].tensor.values().begin(), ta[i].tensor.values().end()),
                std::vector<double>(tb[i].tensor.values().begin(), tb[i].tensor.values().end()));
    }
  }
}

TEST(Models, BatchedForwardMatchesSingleSentences) {
  Rng rng(32);
  for (Architecture arch : all_architectures) {
    auto model = small_model(arch);
    std::vector<std::vector<std::size_t>> ids;
    std::vector<SentenceRef> refs;
    for (int i = 0; i < 7; ++i) {
      const std::size_t valid = 1 + rng.index(12);
      ids.push_back(padded_ids(rng, valid, 12, 20));
      refs.push_back({ids.back(), valid});
    }
    for (Mode mode : {Mode::eval, Mode::train}) {
      Rng r1(5), r2(5);
      Graph<double> g = Graph<double>::inference();
      const auto batched = forward_batch(g, model, std::span<const SentenceRef>(refs), mode, r1);
      for (std::size_t i = 0; i < refs.size(); ++i) {
        Graph<double> gi = Graph<double>::inference();
        const auto single = forward(gi, model, refs[i].ids, refs[i].valid_length, mode, r2);
        EXPECT_NEAR(batched[i][0], single[0], 1e-12) << architecture_key(arch);
      }
    }
  }
}

TEST(Models, RejectInvalidInputs) {
  auto model = small_model(Architecture::bilstm);
  std::vector<std::size_t> ids(12, 1);
  EXPECT_THROW(logit(model, ids, 0), EmptySequenceError);
  EXPECT_THROW(logit(model, ids, 13), DimensionError);
  ids[0] = 20;
  EXPECT_THROW(logit(model, ids, 3), VocabularyError);
}

TEST(Models, ConfigValidation) {
  auto c = small_config(Architecture::cnn, 2);
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_config(Architecture::bigru);
  c.dropout_p = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_config(Architecture::bigru);
  EXPECT_THROW(build(c, Tensor<double>({20, 7})), ConfigError);
  EXPECT_THROW(parse_architecture("transformer"), ConfigError);
}

TEST(Models, CrnnReportsOnePositionPerSemanticUnit) {
  auto model = small_model(Architecture::crnn);
  Rng rng(33);
  const auto ids = padded_ids(rng, 6, 12, 20);
  const auto positions = significant_positions(model, ids, 6);
  EXPECT_EQ(positions.size(), model.config.fc_units);
  for (std::size_t p : positions) EXPECT_LT(p, 6u);
  EXPECT_THROW(significant_positions(small_model(Architecture::cnn), ids, 6), ConfigError);
}

TEST(Models, PredictedProbabilityIsInsideTheUnitInterval) {
  Rng rng(34);
  for (Architecture arch : all_architectures) {
    auto model = small_model(arch);
    const auto ids = padded_ids(rng, 5, 12, 20);
    const double p = predict_proba(model, ids, 5);
    EXPECT_GT(p, 0.0);
    EXPECT_LT(p, 1.0);
  }
}
