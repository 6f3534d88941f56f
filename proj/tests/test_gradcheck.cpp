#include <sstream>
#include <string>

#include <gtest/gtest.h>

#include "metaphor/gradcheck_suite.hpp"

using namespace metaphor;

namespace {

GradCheckSummary run(std::vector<std::string> only, std::size_t trials, std::uint64_t seed = 1, double eps = 1e-3) {
  GradCheckOptions o;
  o.only = std::move(only);
  o.trials = trials;
  o.seed = seed;
  o.eps = eps;
  return run_gradcheck_suite(o);
}

std::vector<std::string> failures(const GradCheckSummary& s) {
  std::vector<std::string> out;
  for (const auto& c : s.components) {
    if (!c.passed) out.push_back(c.name);
  }
  return out;
}

}  // namespace

TEST(GradCheck, EveryComponentPassesAtDefaultSettings) {
  const auto s = run({}, 100);
  EXPECT_TRUE(s.passed()) << ::testing::PrintToString(failures(s));
  EXPECT_LT(s.seconds, 60.0);
  const auto names = gradcheck_component_names();
  for (const char* required : {"lstm", "gru", "conv", "model_cnn", "model_bilstm", "model_bigru", "model_crnn"}) {
    bool found = false;
    for (const auto& n : names) found = found || n.find(required) != std::string::npos;
    EXPECT_TRUE(found) << required;
  }
}

TEST(GradCheck, PassesAcrossSeedsWithSmallerStep) {
  for (std::uint64_t seed = 1; seed <= 8; ++seed) {
    const auto s = run({}, 20, seed, 1e-4);
    EXPECT_TRUE(s.passed()) << "seed " << seed << ": " << ::testing::PrintToString(failures(s));
  }
}

TEST(GradCheck, InjectedGruFaultIsNamed) {
  const ScopedFault fault(Fault::gru_backward_sign);
  const auto s = run({}, 10);
  const auto failed = failures(s);
  ASSERT_FALSE(failed.empty());
  bool names_gru = false;
  for (const auto& n : failed) names_gru = names_gru || n.find("gru") != std::string::npos;
  EXPECT_TRUE(names_gru);
  for (const auto& n : failed) {
    EXPECT_TRUE(n.find("gru") != std::string::npos || n.find("crnn") != std::string::npos) << n;
  }
}

TEST(GradCheck, InjectedLstmAndConvFaultsAreCaught) {
  {
    const ScopedFault fault(Fault::lstm_backward_sign);
    EXPECT_FALSE(run({"lstm_step"}, 10).passed());
  }
  {
    const ScopedFault fault(Fault::conv_backward_sign);
    EXPECT_FALSE(run({"conv1d"}, 10).passed());
  }
  EXPECT_TRUE(run({"lstm_step", "conv1d"}, 10).passed());
}

TEST(GradCheck, UnknownNamesAreConfigErrors) {
  EXPECT_THROW(run({"no_such_op"}, 1), ConfigError);
  EXPECT_THROW(parse_fault("everything"), ConfigError);
  EXPECT_THROW(run({}, 0), ConfigError);
}
