#include <cstdint>
#include <cstring>
#include <string>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "metaphor/checkpoint.hpp"
#include "support.hpp"

using namespace metaphor;
using testing_support::TempDir;
using testing_support::random_tensor;
using testing_support::slurp;
using testing_support::spit;

namespace {

const std::size_t header_offset = 8 + 4 + 4;

template <typename Real = double>
Model<Real> small_model(Architecture arch, std::size_t vocab) {
  ModelConfig c;
  c.architecture = arch;
  c.embedding_dim = 5;
  c.kernel_heights = {2, 3};
  c.out_channels = 3;
  c.hidden_size = 4;
  c.fc_units = 3;
  c.max_len = 8;
  Rng rng(12);
  return build(c, random_tensor<Real>({vocab, 5}, rng, -0.5, 0.5));
}

// Rewrites the JSON header of a checkpoint, keeping the tensor bytes.
void edit_header(const std::string& path, const std::function<void(nlohmann::json&)>& edit) {
  const std::string bytes = slurp(path);
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + header_offset, sizeof len);
  auto meta = nlohmann::json::parse(bytes.substr(header_offset + 8, len));
  edit(meta);
  const std::string text = meta.dump();
  const std::uint64_t new_len = text.size();
  std::string out = bytes.substr(0, header_offset);
  out.append(reinterpret_cast<const char*>(&new_len), sizeof new_len);
  out += text;
  out += bytes.substr(header_offset + 8 + len);
  spit(path, out);
}

}  // namespace

TEST(Checkpoint, ReloadGivesIdenticalPredictions) {
  TempDir dir;
  const Vocab vocab = Vocab::from_tokens({"a", "b", "c", "d", "e", "f"});
  Rng rng(13);
  for (Architecture arch : {Architecture::cnn, Architecture::bilstm, Architecture::bigru, Architecture::crnn}) {
    const auto model = small_model(arch, vocab.size());
    const std::string path = dir.file(architecture_key(arch) + ".ckpt");
    save_checkpoint(path, model, vocab, TokenizerOptions{false});
    const auto ck = load_checkpoint<double>(path);
    EXPECT_EQ(ck.vocab.entries(), vocab.entries());
    EXPECT_FALSE(ck.tokenizer.lowercase);
    EXPECT_EQ(to_json(ck.model.config), to_json(model.config));
    for (int trial = 0; trial < 20; ++trial) {
      const std::size_t valid = 1 + rng.index(8);
      std::vector<std::size_t> ids(8, 0);
      for (std::size_t i = 0; i < valid; ++i) ids[i] = 1 + rng.index(vocab.size() - 1);
      ASSERT_EQ(predict_proba(ck.model, ids, valid), predict_proba(model, ids, valid));
    }
    save_checkpoint(dir.file("again.ckpt"), ck.model, ck.vocab, ck.tokenizer);
    EXPECT_EQ(slurp(dir.file("again.ckpt")), slurp(path));
  }
}

TEST(Checkpoint, VocabularyMismatchIsACompatibilityError) {
  TempDir dir;
  const Vocab vocab = Vocab::from_tokens({"a", "b"});
  const std::string path = dir.file("m.ckpt");
  save_checkpoint(path, small_model(Architecture::bilstm, vocab.size()), vocab, TokenizerOptions{});
  edit_header(path, [](nlohmann::json& m) { m["vocab"].push_back("extra"); });
  EXPECT_THROW(load_checkpoint<double>(path), CompatibilityError);
}

TEST(Checkpoint, DimensionMismatchIsACompatibilityError) {
  TempDir dir;
  const Vocab vocab = Vocab::from_tokens({"a", "b"});
  const std::string path = dir.file("m.ckpt");
  save_checkpoint(path, small_model(Architecture::cnn, vocab.size()), vocab, TokenizerOptions{});
  edit_header(path, [](nlohmann::json& m) { m["config"]["embedding_dim"] = 6; });
  EXPECT_THROW(load_checkpoint<double>(path), CompatibilityError);
}

TEST(Checkpoint, PrecisionIsRecordedAndChecked) {
  TempDir dir;
  const Vocab vocab = Vocab::from_tokens({"a"});
  const std::string path = dir.file("f.ckpt");
  save_checkpoint(path, small_model<float>(Architecture::bigru, vocab.size()), vocab, TokenizerOptions{});
  EXPECT_EQ(checkpoint_value_bytes(path), 4u);
  EXPECT_NO_THROW(load_checkpoint<float>(path));
  EXPECT_THROW(load_checkpoint<double>(path), CompatibilityError);
}

TEST(Checkpoint, CorruptFilesAreRejected) {
  TempDir dir;
  const Vocab vocab = Vocab::from_tokens({"a"});
  const std::string path = dir.file("m.ckpt");
  save_checkpoint(path, small_model(Architecture::cnn, vocab.size()), vocab, TokenizerOptions{});
  const std::string bytes = slurp(path);
  spit(path, bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(load_checkpoint<double>(path), FormatError);
  spit(path, bytes + "x");
  EXPECT_THROW(load_checkpoint<double>(path), FormatError);
  spit(path, "not a checkpoint");
  EXPECT_THROW(load_checkpoint<double>(path), FormatError);
  EXPECT_THROW(load_checkpoint<double>(dir.file("missing.ckpt")), IoError);
}
