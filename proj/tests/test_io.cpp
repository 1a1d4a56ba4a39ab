#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <unistd.h>

#include "maskforge/checkpoint.hpp"
#include "maskforge/config_io.hpp"
#include "maskforge/extraction.hpp"
#include "test_support.hpp"

using namespace maskforge;

namespace {

const conformer_config small{2, 8, 2, 16, 3, 4, 4};

checkpoint_errc decode_error(const std::vector<unsigned char>& bytes) {
  try {
    decode_checkpoint(bytes.data(), bytes.size());
  } catch (const checkpoint_error& e) {
    return e.code();
  }
  ADD_FAILURE() << "decode succeeded";
  return checkpoint_errc::io;
}

/// Rewrites the trailing CRC so a deliberately edited body still passes the checksum.
void reseal(std::vector<unsigned char>& b) {
  const auto c = detail::crc32_of(b.data(), b.size() - 4);
  for (int i = 0; i < 4; ++i) b[b.size() - 4 + i] = static_cast<unsigned char>(c >> (8 * i));
}

std::vector<named_tensor> sample_entries() {
  return {{"a", {2, 3}, {1.0f, -2.5f, 3.25f, std::numeric_limits<float>::denorm_min(), -0.0f, 1e30f}},
          {"scalar", {}, {7.0f}},
          {"empty", {0, 4}, {}},
          {"nan", {1}, {std::numeric_limits<float>::quiet_NaN()}}};
}

std::filesystem::path temp_path(const std::string& name) { return std::filesystem::temp_directory_path() / ("maskforge_test_" + std::to_string(::getpid()) + "_" + name); }

}  // namespace

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto in = sample_entries();
  const auto bytes = encode_checkpoint(in);
  const auto out = decode_checkpoint(bytes.data(), bytes.size());
  ASSERT_EQ(out.size(), in.size());
  for (std::size_t k = 0; k < in.size(); ++k) {
    EXPECT_EQ(out[k].name, in[k].name);
    EXPECT_EQ(out[k].shape, in[k].shape);
    ASSERT_EQ(out[k].values.size(), in[k].values.size());
    EXPECT_EQ(std::memcmp(out[k].values.data(), in[k].values.data(), in[k].values.size() * sizeof(float)), 0);
  }
  EXPECT_EQ(encode_checkpoint(out), bytes);
}

TEST(Checkpoint, ExplicitLittleEndianLayout) {
  const auto b = encode_checkpoint({{"w", {2}, {1.0f, -2.0f}}});
  const std::vector<unsigned char> expect_head{'C', 'P', 'K', '1', 1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 'w', 0, 1, 0, 0, 0, 2, 0, 0, 0, 0, 0, 0, 0,
                                               0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x00, 0xc0};
  ASSERT_EQ(b.size(), expect_head.size() + 4);
  EXPECT_TRUE(std::equal(expect_head.begin(), expect_head.end(), b.begin()));
  const auto crc = detail::crc32_of(b.data(), b.size() - 4);
  EXPECT_EQ(b[b.size() - 4], crc & 0xff);
  EXPECT_EQ(b.back(), crc >> 24);
}

TEST(Checkpoint, Crc32MatchesKnownValue) {
  const std::string s = "123456789";
  EXPECT_EQ(detail::crc32_of(reinterpret_cast<const unsigned char*>(s.data()), s.size()), 0xCBF43926u);
}

TEST(Checkpoint, EmptyContainer) {
  const auto b = encode_checkpoint({});
  EXPECT_EQ(b.size(), 16u);
  EXPECT_EQ(b[8], 0);
  EXPECT_TRUE(decode_checkpoint(b.data(), b.size()).empty());
}

TEST(Checkpoint, CorruptedCrcByte) {
  auto b = encode_checkpoint(sample_entries());
  b[b.size() - 2] ^= 0x01;
  EXPECT_EQ(decode_error(b), checkpoint_errc::crc_mismatch);
  auto c = encode_checkpoint(sample_entries());
  c[20] ^= 0x40;
  EXPECT_EQ(decode_error(c), checkpoint_errc::crc_mismatch);
}

TEST(Checkpoint, DistinctErrorCodes) {
  auto magic = encode_checkpoint({});
  magic[0] = 'X';
  EXPECT_EQ(decode_error(magic), checkpoint_errc::bad_magic);

  auto version = encode_checkpoint({});
  version[4] = 9;
  reseal(version);
  EXPECT_EQ(decode_error(version), checkpoint_errc::bad_version);

  auto dtype = encode_checkpoint({{"w", {1}, {1.0f}}});
  dtype[17] = 1;  // dtype byte follows the 1-byte name
  reseal(dtype);
  EXPECT_EQ(decode_error(dtype), checkpoint_errc::unknown_dtype);

  auto full = encode_checkpoint({{"w", {4}, {1.0f, 2.0f, 3.0f, 4.0f}}});
  std::vector<unsigned char> cut(full.begin(), full.end() - 8);
  reseal(cut);
  EXPECT_EQ(decode_error(cut), checkpoint_errc::truncated);

  auto count = encode_checkpoint({});
  count[8] = 3;
  reseal(count);
  EXPECT_EQ(decode_error(count), checkpoint_errc::truncated);

  std::vector<unsigned char> tiny{'C', 'P', 'K', '1', 1};
  EXPECT_EQ(decode_error(tiny), checkpoint_errc::truncated);
}

TEST(Checkpoint, HugeExtentsAreTruncationNotAllocation) {
  auto b = encode_checkpoint({{"w", {1}, {1.0f}}});
  for (int i = 0; i < 8; ++i) b[22 + i] = 0xff;  // extent u64
  reseal(b);
  EXPECT_EQ(decode_error(b), checkpoint_errc::truncated);
}

TEST(Checkpoint, RejectsBadNames) {
  EXPECT_THROW(encode_checkpoint({{"", {1}, {1.0f}}}), checkpoint_error);
  EXPECT_THROW(encode_checkpoint({{"a", {1}, {1.0f}}, {"a", {1}, {2.0f}}}), checkpoint_error);
  EXPECT_THROW(encode_checkpoint({{"a", {2}, {1.0f}}}), checkpoint_error);
}

TEST(Checkpoint, FileRoundTripAndMissingFile) {
  const auto p = temp_path("roundtrip.ckpt").string();
  save_checkpoint(p, sample_entries());
  EXPECT_EQ(load_checkpoint(p).size(), 4u);
  std::filesystem::remove(p);
  try {
    load_checkpoint(p);
    FAIL();
  } catch (const checkpoint_error& e) {
    EXPECT_EQ(e.code(), checkpoint_errc::io);
  }
}

TEST(ModelCheckpoint, DenseRoundTripPreservesEverything) {
  auto m = init_model<float>(small, 5);
  auto back = model_from_entries<float>(model_entries(m));
  EXPECT_EQ(back.config, m.config);
  EXPECT_TRUE(back.is_dense_layout());
  EXPECT_EQ(model_entries(back), model_entries(m));
}

TEST(ModelCheckpoint, ExtractedModelRoundTripComputesTheSameFunction) {
  auto m = init_model<float>(small, 6);
  auto b = maskforge::testing::random_binary(small, 3, 0.6, true);
  b.conv[1] = 0.0;
  auto e = extract(m, b);
  auto back = model_from_entries<float>(model_entries(e));
  EXPECT_FALSE(back.layers[1].conv.has_value());
  EXPECT_EQ(back.layers[0].head_ids, e.layers[0].head_ids);
  auto g = make_rng(1, stream::benchmark);
  auto x = maskforge::testing::random_tensor<float>({2, 7, 4}, g, -1, 1, false);
  EXPECT_EQ(forward(back, x).logits.values(), forward(e, x).logits.values());
}

TEST(ModelCheckpoint, LayoutMismatchIsReported) {
  auto entries = model_entries(init_model<float>(small, 1));
  for (auto& e : entries)
    if (e.name == "layer.0.ffn1.w_in") e.shape = {16, 8};
  try {
    model_from_entries<float>(entries);
    FAIL();
  } catch (const checkpoint_error& e) {
    EXPECT_EQ(e.code(), checkpoint_errc::layout_mismatch);
  }
  auto missing = model_entries(init_model<float>(small, 1));
  missing.pop_back();
  try {
    model_from_entries<float>(missing);
    FAIL();
  } catch (const checkpoint_error& e) {
    EXPECT_EQ(e.code(), checkpoint_errc::missing_entry);
  }
}

TEST(MaskCheckpoint, GateLogitsRoundTrip) {
  auto m = init_alpha<float>(small, 1.0, 0.7, 9, mask_families{.head = true, .ffn = false, .conv = true, .hidden = false});
  auto back = masks_from_entries<float>(mask_entries(m));
  EXPECT_EQ(back.families.ffn, false);
  EXPECT_EQ(back.families.hidden, false);
  EXPECT_EQ(mask_entries(back), mask_entries(m));
  EXPECT_EQ(back.count(), m.count());
}

TEST(MaskCheckpoint, BinaryMasksRoundTrip) {
  auto b = maskforge::testing::random_binary(small, 4, 0.5, false);
  conformer_config cfg;
  EXPECT_EQ(binary_masks_from_entries(binary_mask_entries(b, small), &cfg), b);
  EXPECT_EQ(cfg, small);
}

TEST(RunConfig, DefaultsAndEcho) {
  auto rc = parse_run_config("{}");
  EXPECT_EQ(rc.model, conformer_config{});
  EXPECT_EQ(rc.trainer.total_steps, 5000u);
  const auto echo = to_json(rc).dump();
  auto again = parse_run_config(echo);
  EXPECT_EQ(to_json(again).dump(), echo);
}

TEST(RunConfig, ReadsEverySection) {
  auto rc = parse_run_config(R"({"model": {"num_layers": 2, "hidden": 32},
    "task": {"noise_std": 0.25, "seed": 4},
    "trainer": {"target_sparsity": 0.3, "budget_mode": "flops", "ablation": {"enable_kd": false, "head_only_pruning": true}},
    "eval_size": 10})");
  EXPECT_EQ(rc.model.num_layers, 2u);
  EXPECT_EQ(rc.model.hidden, 32u);
  EXPECT_EQ(rc.task.noise_std, 0.25);
  EXPECT_EQ(rc.task.seed, 4u);
  EXPECT_EQ(rc.trainer.target_sparsity, 0.3);
  EXPECT_EQ(rc.trainer.mode, budget_mode::flops);
  EXPECT_FALSE(rc.trainer.ablation.enable_kd);
  EXPECT_TRUE(rc.trainer.ablation.head_only_pruning);
  EXPECT_EQ(rc.eval_size, 10u);
}

TEST(RunConfig, UnknownKeysAndBadTypesAreRejected) {
  EXPECT_THROW(parse_run_config(R"({"modle": {}})"), config_error);
  EXPECT_THROW(parse_run_config(R"({"model": {"layers": 2}})"), config_error);
  EXPECT_THROW(parse_run_config(R"({"trainer": {"ablation": {"kd": true}}})"), config_error);
  EXPECT_THROW(parse_run_config(R"({"model": {"hidden": -4}})"), config_error);
  EXPECT_THROW(parse_run_config(R"({"model": {"hidden": 6.5}})"), config_error);
  EXPECT_THROW(parse_run_config(R"({"trainer": {"budget_mode": "energy"}})"), config_error);
  EXPECT_THROW(parse_run_config(R"({"trainer": {"ablation": {"enable_kd": 1}}})"), config_error);
  EXPECT_THROW(parse_run_config("{not json"), config_error);
  EXPECT_THROW(parse_run_config("[]"), config_error);
}

TEST(RunConfig, CrossSectionValidation) {
  auto rc = parse_run_config(R"({"task": {"num_classes": 5}})");
  EXPECT_THROW(validate(rc), config_error);
  rc = parse_run_config(R"({"trainer": {"target_sparsity": 1.5}})");
  EXPECT_THROW(validate(rc), config_error);
  EXPECT_NO_THROW(validate(run_config{}));
}
