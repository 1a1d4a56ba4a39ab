#include <gtest/gtest.h>

#include <sstream>

#include "maskforge/accounting.hpp"
#include "maskforge/hard_concrete.hpp"
#include "test_support.hpp"

using namespace maskforge;
using maskforge::testing::random_binary;

namespace {

const conformer_config toy{};

}  // namespace

TEST(DenseSize, MatchesWeightEnumeration) {
  auto model = init_model<float>(toy, 1);
  EXPECT_EQ(dense_size(toy).total, encoder_parameter_count(model));
  EXPECT_EQ(dense_size(toy).total, 252416u);
  // per layer: ffn 2*(128*129 + 192), attn 4*64*64 + 3*64 + 128, conv 3*64^2 + 11*64
  EXPECT_EQ(dense_size(toy).modules[0][slot_attn], 16384u + 192 + 128);
  EXPECT_EQ(dense_size(toy).modules[0][slot_conv], 12288u + 704);
}

TEST(ExpectedSize, SaturatedGatesGiveDenseCount) {
  auto alpha = init_alpha<double>(toy, 40.0, 0.0, 1);
  auto s = expected_size(alpha.expected(), toy);
  EXPECT_NEAR(s.total.item(), 252416.0, 1e-6);
  auto off = init_alpha<double>(toy, -60.0, 0.0, 1);
  auto probs = off.expected();
  no_grad_guard guard;
  EXPECT_NEAR(expected_size(probs, toy).total.item(), 0.0, 1e-12);
}

TEST(ExpectedSize, HalfFfnChannelsHalveThatTerm) {
  auto b = binary_mask_set::ones(toy);
  for (std::size_t c = 0; c < toy.ffn_dim / 2; ++c) b.ffn1[2][c] = 0.0;
  auto s = expected_size(b.to_mask_values<double>(), toy);
  const double dense = 128.0 * 129 + 192;
  // channel-owned params halve; b_out and the pre-norm stay
  EXPECT_DOUBLE_EQ(s.breakdown.modules[2][slot_ffn1], 64.0 * 129 + 192);
  EXPECT_DOUBLE_EQ(s.breakdown.modules[1][slot_ffn1], dense);
}

TEST(ExactSize, SingleConvOffSubtractsModule) {
  auto b = binary_mask_set::ones(toy);
  b.conv[3] = 0.0;
  EXPECT_EQ(exact_size(b, toy).total, 252416u - (3u * 64 * 64 + 11 * 64));
}

TEST(ExactSize, AgreesWithExpectedSizeAtBinaryValues) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    auto b = random_binary(toy, seed, 0.3 + 0.01 * static_cast<double>(seed));
    no_grad_guard guard;
    auto e = expected_size(b.to_mask_values<double>(), toy);
    EXPECT_EQ(static_cast<std::uint64_t>(e.total.item()), exact_size(b, toy).total);
    EXPECT_EQ(e.total.item(), static_cast<double>(exact_size(b, toy).total));
  }
}

TEST(ExactSize, RejectsFractionalGateValues) {
  auto v = binary_mask_set::ones(toy).to_mask_values<double>();
  v.head[0] = basic_tensor<double>({4}, {1, 0.5, 1, 1});
  EXPECT_THROW(exact_size(v, toy), std::invalid_argument);
}

TEST(ExpectedSize, RejectsMismatchedLayout) {
  auto v = binary_mask_set::ones(toy).to_mask_values<double>();
  v.ffn2[1] = basic_tensor<double>::ones({127});
  EXPECT_THROW(expected_size(v, toy), shape_error);
}

TEST(ExpectedSize, GradientMatchesFiniteDifferences) {
  conformer_config cfg{2, 8, 2, 16, 3, 4, 4};
  auto alpha = init_alpha<double>(cfg, 0.5, 1.0, 3);
  auto loss = [&] { return expected_size(alpha.expected(), cfg).total; };
  auto flops = [&] { return scale(expected_flops(alpha.expected(), cfg, 5), 1e-3); };
  EXPECT_LT(maskforge::testing::gradient_error<double>(loss, alpha.parameters(), 1e-5), 1e-3);
  EXPECT_LT(maskforge::testing::gradient_error<double>(flops, alpha.parameters(), 1e-5), 1e-3);
}

TEST(ExpectedFlops, DenseMatchesInstrumentedForward) {
  const std::size_t T = 10;
  auto model = init_model<float>(toy, 1);
  auto x = tensor::zeros({1, T, toy.input_dim});
  flop_counter counter;
  {
    no_grad_guard guard;
    forward(model, x);
  }
  const double outside = 2.0 * T * toy.input_dim * toy.hidden + 2.0 * T * toy.hidden * toy.num_classes;
  EXPECT_DOUBLE_EQ(dense_flops(toy, T), static_cast<double>(counter.count()) - outside);
  EXPECT_EQ(dense_flops(toy, 0), 0.0);
}

TEST(ExpectedFlops, LinearInHeadGates) {
  auto full = binary_mask_set::ones(toy).to_mask_values<double>();
  auto half = full;
  auto none = full;
  for (std::size_t i = 0; i < toy.num_layers; ++i) {
    half.head[i] = basic_tensor<double>::full({4}, 0.5);
    none.head[i] = basic_tensor<double>::zeros({4});
  }
  no_grad_guard guard;
  const double f = expected_flops(full, toy, 16).item(), h = expected_flops(half, toy, 16).item(), n = expected_flops(none, toy, 16).item();
  EXPECT_NEAR(h - n, 0.5 * (f - n), 1e-6);
}

TEST(Distribution, AllOnesIsAllRatioOne) {
  auto rows = report_distribution(binary_mask_set::ones(toy), toy);
  EXPECT_EQ(rows.size(), toy.num_layers * 5);
  for (const auto& r : rows) EXPECT_EQ(r.ratio, 1.0);
  std::ostringstream os;
  write_distribution_csv(os, rows);
  EXPECT_EQ(os.str().substr(0, os.str().find('\n')), "layer,module,dense_params,retained_params,ratio");
}

TEST(Distribution, ZeroedLayerHasZeroGatedRatios) {
  auto b = binary_mask_set::ones(toy);
  std::fill(b.head[1].begin(), b.head[1].end(), 0.0);
  std::fill(b.ffn1[1].begin(), b.ffn1[1].end(), 0.0);
  std::fill(b.ffn2[1].begin(), b.ffn2[1].end(), 0.0);
  b.conv[1] = 0.0;
  std::fill(b.hidden_local[1].begin(), b.hidden_local[1].end(), 0.0);
  for (const auto& r : report_distribution(b, toy)) {
    if (r.layer == 1) {
      EXPECT_EQ(r.ratio, 0.0) << r.module;
    }
  }
}

TEST(Distribution, RatiosEqualBreakdownQuotients) {
  auto b = random_binary(toy, 77);
  const auto kept = exact_size(b, toy), full = dense_size(toy);
  for (const auto& r : report_distribution(b, toy)) {
    if (r.module == "hidden_local") {
      EXPECT_EQ(r.retained, kept.hidden[r.layer]);
      continue;
    }
    std::size_t m = 0;
    while (module_names[m] != r.module) ++m;
    EXPECT_DOUBLE_EQ(r.ratio, static_cast<double>(kept.modules[r.layer][m]) / static_cast<double>(full.modules[r.layer][m]));
  }
}

TEST(Budget, ValidatesTarget) {
  EXPECT_THROW((sparsity_budget{1.0, budget_mode::parameters, 10}).validate(), config_error);
  EXPECT_THROW((sparsity_budget{-0.1, budget_mode::parameters, 10}).validate(), config_error);
  EXPECT_DOUBLE_EQ((sparsity_budget{0.25, budget_mode::flops, 8}).target_size(), 6.0);
}
