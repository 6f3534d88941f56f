#include <gtest/gtest.h>

#include "metaphor/config.hpp"
#include "support.hpp"

using namespace metaphor;
using testing_support::TempDir;
using testing_support::spit;

TEST(Config, DefaultsMatchTheTrainingProtocol) {
  const Config c;
  const TrainOptions t = train_options(c);
  EXPECT_EQ(t.adam.lr, 1e-3);
  EXPECT_EQ(t.batch, 32u);
  EXPECT_EQ(t.epochs, 20u);
  EXPECT_FALSE(t.stop_when_perfect);
  EXPECT_EQ(crossval_options(c).folds, 10u);
  EXPECT_EQ(c.get<std::vector<std::size_t>>("dims").size(), 10u);
  EXPECT_EQ(c.get<std::vector<std::string>>("models").size(), 4u);
}

TEST(Config, FileThenCommandLineOverrides) {
  TempDir dir;
  spit(dir.file("c.json"), R"({"architecture": "bigru", "lr": 1, "epochs": 3, "dims": [50, 100]})");
  Config c = Config::from_file(dir.file("c.json"));
  EXPECT_EQ(c.str("architecture"), "bigru");
  EXPECT_EQ(c.real("lr"), 1.0);
  c.set_text("epochs", "7");
  c.set_text("lr", "0.01");
  c.set_text("fine_tune", "false");
  c.set_text("dims", "50,150");
  c.set_text("kernel_heights", "[2, 3]");
  EXPECT_EQ(c.size("epochs"), 7u);
  EXPECT_EQ(c.real("lr"), 0.01);
  EXPECT_FALSE(c.flag("fine_tune"));
  EXPECT_EQ(c.get<std::vector<std::size_t>>("dims"), (std::vector<std::size_t>{50, 150}));
  EXPECT_EQ(model_config(c).kernel_heights, (std::vector<std::size_t>{2, 3}));
}

TEST(Config, EveryKeyIsOverridable) {
  for (const auto& key : config_help()) EXPECT_TRUE(config_defaults().contains(key.name)) << key.name;
  EXPECT_EQ(config_help().size(), config_defaults().size());
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  Config c;
  EXPECT_THROW(c.set("learning_rate", 0.1), ConfigError);
  EXPECT_THROW(c.set_text("bogus", "1"), ConfigError);
  EXPECT_THROW(c.set_text("epochs", "ten"), ConfigError);
  EXPECT_THROW(c.set_text("epochs", "-1"), ConfigError);
  EXPECT_THROW(c.set_text("fine_tune", "maybe"), ConfigError);
  EXPECT_THROW(c.set("epochs", "3"), ConfigError);
  EXPECT_THROW(c.set_text("dims", "[1, \"x\"]"), ConfigError);
  TempDir dir;
  spit(dir.file("bad.json"), "{ not json");
  EXPECT_THROW(Config::from_file(dir.file("bad.json")), ConfigError);
  spit(dir.file("list.json"), "[1]");
  EXPECT_THROW(Config::from_file(dir.file("list.json")), ConfigError);
  EXPECT_THROW(Config::from_file(dir.file("absent.json")), IoError);
}

TEST(Config, DerivedOptionsAreValidated) {
  Config c;
  c.set_text("batch", "0");
  EXPECT_THROW(train_options(c), ConfigError);
  c = Config();
  c.set_text("folds", "1");
  EXPECT_THROW(crossval_options(c), ConfigError);
  c = Config();
  c.set_text("architecture", "rnn");
  EXPECT_THROW(model_config(c), ConfigError);
}
