#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>

#include "canf/checkpoint.hpp"
#include "canf/ops.hpp"
#include "test_util.hpp"

namespace canf {
namespace {

RunConfig small_run() {
  RunConfig c;
  c.model.width = 16;
  c.model.depth = 2;
  c.model.heads = 2;
  c.model.mlp_ratio = 2;
  c.model.cond_dim = 8;
  c.model.n_classes = 3;
  c.model.n_timesteps = 50;
  c.model.control.ada_norm = true;
  return c;
}

template <typename S>
Model<S> trained_looking(const RunConfig& c, std::uint64_t seed) {
  auto m = build_model<S>(c.model, seed);
  std::mt19937_64 rng(seed);
  for (auto& [name, t] : m.named_parameters()) {
    auto r = testing::random_tensor<S>(t.shape(), rng);
    auto dst = t.mutable_data();
    std::copy(r.data().begin(), r.data().end(), dst.begin());
  }
  return m;
}

template <typename S>
void expect_same_parameters(const Model<S>& a, const Model<S>& b) {
  const auto pa = a.named_parameters(), pb = b.named_parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].first, pb[i].first);
    EXPECT_TRUE(bitwise_equal(pa[i].second, pb[i].second)) << pa[i].first;
  }
}

class CheckpointFile : public ::testing::Test {
 protected:
  void SetUp() override {
    path_ = std::filesystem::temp_directory_path() /
            ("canf_ckpt_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()) + ".canf");
  }
  void TearDown() override { std::filesystem::remove(path_); }
  std::filesystem::path path_;
};

TEST_F(CheckpointFile, RoundTripIsBitwise) {
  const auto c = small_run();
  auto m = trained_looking<float>(c, 3);
  save_checkpoint(path_, m, c);
  auto loaded = load_checkpoint<float>(path_);
  EXPECT_EQ(loaded.config, c);
  expect_same_parameters(m, loaded.model);
  std::mt19937_64 rng(1);
  auto x = testing::random_tensor<float>({2, 1, 8, 8}, rng);
  EXPECT_TRUE(bitwise_equal(forward(m, x, {3, 40}, {0, 2}), forward(loaded.model, x, {3, 40}, {0, 2})));
}

TEST_F(CheckpointFile, DoublePrecisionRoundTrip) {
  const auto c = small_run();
  auto m = trained_looking<double>(c, 4);
  save_checkpoint(path_, m, c);
  expect_same_parameters(m, load_checkpoint<double>(path_).model);
  EXPECT_THROW(load_checkpoint<float>(path_), ShapeMismatchError);
}

TEST(Checkpoint, EncodingIsDeterministic) {
  const auto c = small_run();
  EXPECT_EQ(encode_checkpoint(trained_looking<float>(c, 5), c), encode_checkpoint(trained_looking<float>(c, 5), c));
}

TEST(Checkpoint, BadMagic) {
  const auto c = small_run();
  auto bytes = encode_checkpoint(build_model<float>(c.model, 0), c);
  bytes[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bytes), FormatError);
  EXPECT_THROW(decode_checkpoint({}), FormatError);
}

TEST(Checkpoint, VersionMismatch) {
  const auto c = small_run();
  auto bytes = encode_checkpoint(build_model<float>(c.model, 0), c);
  bytes[4] = 2;
  EXPECT_THROW(decode_checkpoint(bytes), VersionError);
}

TEST(Checkpoint, PayloadCorruptionDetected) {
  const auto c = small_run();
  auto bytes = encode_checkpoint(build_model<float>(c.model, 0), c);
  bytes[bytes.size() - 3] ^= 0x10;
  EXPECT_THROW(decode_checkpoint(bytes), IntegrityError);
}

TEST(Checkpoint, TruncationDetectedAtEveryLength) {
  const auto c = small_run();
  const auto bytes = encode_checkpoint(build_model<float>(c.model, 0), c);
  for (std::size_t n : {std::size_t{5}, std::size_t{9}, std::size_t{40}, bytes.size() / 2, bytes.size() - 1}) {
    std::vector<unsigned char> cut(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(n));
    EXPECT_THROW(decode_checkpoint(cut), IntegrityError) << n;
  }
  auto longer = bytes;
  longer.push_back(0);
  EXPECT_THROW(decode_checkpoint(longer), IntegrityError);
}

TEST(Checkpoint, ShapeMismatchNamesEntry) {
  auto c = small_run();
  const auto bytes = encode_checkpoint(build_model<float>(c.model, 0), c);
  c.model.mlp_ratio = 3;
  auto other = build_model<float>(c.model, 0);
  try {
    load_parameters(decode_checkpoint(bytes), other);
    FAIL() << "expected ShapeMismatchError";
  } catch (const ShapeMismatchError& e) {
    EXPECT_EQ(e.entry(), "blocks.0.ffn.fc1.weight");
    EXPECT_NE(std::string(e.what()).find("blocks.0.ffn.fc1.weight"), std::string::npos);
  }
}

TEST(Checkpoint, MissingParameterIsIntegrityError) {
  auto c = small_run();
  const auto bytes = encode_checkpoint(build_model<float>(c.model, 0), c);
  c.model.control.cond_tokens = false;
  auto fewer = build_model<float>(c.model, 0);
  // the archive has extra entries the model does not use
  EXPECT_THROW(load_parameters(decode_checkpoint(bytes), fewer), IntegrityError);
  c.model.control.cond_tokens = true;
  c.model.cond_aware_set.insert(LayerKind::Head);
  auto more = build_model<float>(c.model, 0);
  EXPECT_THROW(load_parameters(decode_checkpoint(bytes), more), IntegrityError);
}

TEST(Checkpoint, FailedLoadLeavesModelUntouched) {
  auto c = small_run();
  const auto bytes = encode_checkpoint(trained_looking<float>(c, 6), c);
  auto target = build_model<float>(c.model, 0);
  const auto before = encode_checkpoint(target, c);
  auto archive = decode_checkpoint(bytes);
  archive.entries.back().shape = {1, 1};
  EXPECT_THROW(load_parameters(archive, target), ShapeMismatchError);
  EXPECT_EQ(encode_checkpoint(target, c), before);
}

TEST(Checkpoint, MissingFile) {
  EXPECT_THROW(load_checkpoint<float>("/nonexistent/canf/model.canf"), CheckpointError);
}

}  // namespace
}  // namespace canf
