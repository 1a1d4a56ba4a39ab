#include <gtest/gtest.h>

#include <cmath>

#include "maskforge/extraction.hpp"
#include "test_support.hpp"

using namespace maskforge;
using maskforge::testing::random_binary;
using maskforge::testing::random_tensor;

namespace {

const conformer_config toy{};

template <class T>
double max_abs_diff(const basic_tensor<T>& a, const basic_tensor<T>& b) {
  EXPECT_EQ(a.shape(), b.shape());
  double worst = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::abs(static_cast<double>(a.values()[i]) - b.values()[i]));
  return worst;
}

/// Largest output gap between the masked dense model and its extraction.
template <class T>
double equivalence_gap(const conformer_model<T>& model, const binary_mask_set& bin, std::size_t inputs, std::uint64_t seed) {
  no_grad_guard guard;
  const auto compact = extract(model, bin);
  const auto gates = bin.to_mask_values<T>();
  auto g = make_rng(seed, stream::benchmark);
  double worst = 0.0;
  for (std::size_t i = 0; i < inputs; i += 10) {
    auto x = random_tensor<T>({10, 16, toy.input_dim}, g, -2.0, 2.0, false);
    const auto masked = forward(model, x, &gates);
    const auto small = forward(compact, x);
    worst = std::max(worst, max_abs_diff(masked.logits, small.logits));
    for (std::size_t l = 0; l < toy.num_layers; ++l) {
      // compare the surviving stream positions
      const auto& full = masked.layer_hiddens[l];
      const auto& part = small.layer_hiddens[l];
      const std::size_t w = compact.width(), rows = part.numel() / w;
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t k = 0; k < w; ++k)
          worst = std::max(worst, std::abs(static_cast<double>(full.values()[r * toy.hidden + compact.hidden_index[k]]) -
                                           part.values()[r * w + k]));
    }
  }
  return worst;
}

}  // namespace

TEST(Binarize, FullGateKeepsUnitWithScaleOne) {
  auto masks = init_alpha<double>(toy, 10.0, 0.0, 1);
  auto b = binarize_and_fold(masks);
  EXPECT_EQ(b, binary_mask_set::ones(toy));
}

TEST(Binarize, ClosedGateRemovesUnit) {
  auto masks = init_alpha<double>(toy, 10.0, 0.0, 1);
  masks.ffn1[2].values()[5] = -10.0;
  masks.head[0].values()[1] = -10.0;
  auto b = binarize_and_fold(masks);
  EXPECT_EQ(b.ffn1[2][5], 0.0);
  EXPECT_EQ(b.head[0][1], 0.0);
  EXPECT_EQ(count_retained(b.ffn1[2]), toy.ffn_dim - 1);
}

TEST(Binarize, FractionalGateBecomesFoldScale) {
  auto masks = init_alpha<double>(toy, 10.0, 0.0, 1);
  // sigmoid(a) * 1.2 - 0.1 = 0.5  <=>  sigmoid(a) = 0.5
  masks.ffn2[1].values()[7] = 0.0;
  auto b = binarize_and_fold(masks);
  EXPECT_NEAR(b.ffn2[1][7], 0.5, 1e-12);
  EXPECT_EQ(binarize_and_fold(masks, {.round_to_one = true}).ffn2[1][7], 1.0);
}

TEST(Binarize, RetentionMatchesThreshold) {
  auto masks = init_alpha<double>(toy, 0.0, 3.0, 4);
  auto b = binarize_and_fold(masks);
  for (std::size_t c = 0; c < toy.ffn_dim; ++c)
    EXPECT_EQ(b.ffn1[0][c] > 0.0, masks.ffn1[0].values()[c] > retention_threshold()) << c;
}

TEST(Binarize, DisabledFamiliesStayWhole) {
  mask_families fam;
  fam.ffn = fam.conv = fam.hidden = false;
  auto masks = init_alpha<double>(toy, -10.0, 0.0, 1, fam);
  auto b = binarize_and_fold(masks);
  EXPECT_EQ(count_retained(b.hidden_global), toy.hidden);
  EXPECT_EQ(count_retained(b.ffn1[0]), toy.ffn_dim);
  EXPECT_EQ(count_retained(b.head[0]), 0u);
}

TEST(Binarize, TrimMeetsBudgetByDroppingWeakestUnits) {
  auto masks = init_alpha<double>(toy, 0.5, 1.0, 9);
  auto loose = binarize_and_fold(masks);
  const double before = static_cast<double>(exact_size(loose, toy).total) / dense_size(toy).total;
  const double target = 1.0 - (before - 0.1);
  auto trimmed = binarize_and_fold(masks, {.trim = true, .trim_target = target});
  const double after = static_cast<double>(exact_size(trimmed, toy).total) / dense_size(toy).total;
  EXPECT_LE(after, 1.0 - target);
  // only removals, and every removed unit had a gate no larger than any kept one of its family
  for (std::size_t i = 0; i < toy.num_layers; ++i)
    for (std::size_t c = 0; c < toy.ffn_dim; ++c) {
      if (trimmed.ffn1[i][c] > 0.0) {
        EXPECT_EQ(trimmed.ffn1[i][c], loose.ffn1[i][c]);
      } else if (loose.ffn1[i][c] > 0.0) {
        for (std::size_t j = 0; j < toy.ffn_dim; ++j) {
          if (trimmed.ffn1[i][j] > 0.0) {
            EXPECT_LE(loose.ffn1[i][c], trimmed.ffn1[i][j]);
          }
        }
      }
    }
}

TEST(Extract, AllOnesIsWeightIdentical) {
  auto model = init_model<float>(toy, 3);
  auto compact = extract(model, binary_mask_set::ones(toy));
  std::vector<basic_tensor<float>> a, b;
  model.for_each_tensor([&](const std::string&, const basic_tensor<float>& t, param_kind) { a.push_back(t); });
  compact.for_each_tensor([&](const std::string&, const basic_tensor<float>& t, param_kind) { b.push_back(t); });
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].shape(), b[i].shape());
    EXPECT_EQ(a[i].values(), b[i].values());
  }
  EXPECT_TRUE(compact.is_dense_layout());
}

TEST(Extract, RandomMaskSetsMatchMaskedForward) {
  auto model = init_model<float>(toy, 5);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto bin = random_binary(toy, 1000 + seed, 0.4 + 0.025 * static_cast<double>(seed), seed % 2 == 1);
    EXPECT_LE(equivalence_gap(model, bin, 100, seed), 1e-4) << "seed " << seed;
  }
}

TEST(Extract, ParameterCountEqualsExactSize) {
  auto model = init_model<float>(toy, 5);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto bin = random_binary(toy, 2000 + seed, 0.2 + 0.04 * static_cast<double>(seed), true);
    EXPECT_EQ(encoder_parameter_count(extract(model, bin)), exact_size(bin, toy).total) << seed;
  }
}

TEST(Extract, HalfGateOnOneFfnChannelFoldsExactly) {
  auto model = init_model<double>(toy, 8);
  auto bin = binary_mask_set::ones(toy);
  bin.ffn1[1][17] = 0.5;
  EXPECT_LE(equivalence_gap(model, bin, 20, 3), 1e-6);
}

TEST(Extract, ResidualOnlyNetworkIsValid) {
  auto model = init_model<float>(toy, 2);
  auto bin = binary_mask_set::ones(toy);
  for (std::size_t i = 0; i < toy.num_layers; ++i) {
    std::fill(bin.head[i].begin(), bin.head[i].end(), 0.0);
    std::fill(bin.ffn1[i].begin(), bin.ffn1[i].end(), 0.0);
    std::fill(bin.ffn2[i].begin(), bin.ffn2[i].end(), 0.0);
    bin.conv[i] = 0.0;
  }
  auto compact = extract(model, bin);
  EXPECT_EQ(encoder_parameter_count(compact), exact_size(bin, toy).total);
  for (const auto& l : compact.layers) EXPECT_FALSE(l.conv.has_value());
  EXPECT_LE(equivalence_gap(model, bin, 10, 1), 1e-4);
}

TEST(Extract, EmptyLayerIsValid) {
  auto model = init_model<float>(toy, 2);
  auto bin = binary_mask_set::ones(toy);
  std::fill(bin.hidden_local[2].begin(), bin.hidden_local[2].end(), 0.0);
  auto compact = extract(model, bin);
  EXPECT_TRUE(compact.layers[2].index.empty());
  EXPECT_EQ(encoder_parameter_count(compact), exact_size(bin, toy).total);
  EXPECT_LE(equivalence_gap(model, bin, 10, 1), 1e-4);
}

TEST(Extract, RejectsModelWithoutResidualDims) {
  auto model = init_model<float>(toy, 2);
  auto bin = binary_mask_set::ones(toy);
  std::fill(bin.hidden_global.begin(), bin.hidden_global.end(), 0.0);
  EXPECT_THROW(extract(model, bin), std::invalid_argument);
}

TEST(Extract, RejectsMismatchedLayout) {
  auto model = init_model<float>(toy, 2);
  auto bin = binary_mask_set::ones(toy);
  bin.head[0].push_back(1.0);
  EXPECT_THROW(extract(model, bin), std::invalid_argument);
}

TEST(Extract, ReextractingWithOnesIsIdentity) {
  auto model = init_model<float>(toy, 4);
  auto once = extract(model, random_binary(toy, 31, 0.6, true));
  auto twice = extract(once, binary_mask_set::ones(toy));
  std::vector<basic_tensor<float>> a, b;
  once.for_each_tensor([&](const std::string&, const basic_tensor<float>& t, param_kind) { a.push_back(t); });
  twice.for_each_tensor([&](const std::string&, const basic_tensor<float>& t, param_kind) { b.push_back(t); });
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].values(), b[i].values());
  EXPECT_EQ(once.hidden_index, twice.hidden_index);
  for (std::size_t i = 0; i < toy.num_layers; ++i) {
    EXPECT_EQ(once.layers[i].index, twice.layers[i].index);
    EXPECT_EQ(once.layers[i].head_ids, twice.layers[i].head_ids);
  }
}

TEST(Extract, SecondExtractionComposes) {
  auto model = init_model<double>(toy, 4);
  auto first = random_binary(toy, 41, 0.8);
  auto second = random_binary(toy, 42, 0.8);
  binary_mask_set both = first;
  auto meet = [](std::vector<double>& a, const std::vector<double>& b) {
    for (std::size_t i = 0; i < a.size(); ++i) a[i] *= b[i];
  };
  meet(both.hidden_global, second.hidden_global);
  meet(both.conv, second.conv);
  for (std::size_t i = 0; i < toy.num_layers; ++i) {
    meet(both.hidden_local[i], second.hidden_local[i]);
    meet(both.head[i], second.head[i]);
    meet(both.ffn1[i], second.ffn1[i]);
    meet(both.ffn2[i], second.ffn2[i]);
  }
  if (count_retained(both.hidden_global) == 0) GTEST_SKIP();
  auto twice = extract(extract(model, first), second);
  auto direct = extract(model, both);
  no_grad_guard guard;
  auto g = make_rng(5, stream::benchmark);
  auto x = random_tensor<double>({2, 12, toy.input_dim}, g, -1.0, 1.0, false);
  EXPECT_LE(max_abs_diff(forward(twice, x).logits, forward(direct, x).logits), 1e-12);
}

TEST(Benchmark, ReportsOrderStatisticsAndFlops) {
  auto model = init_model<float>(toy, 1);
  auto x = tensor::ones({2, 32, toy.input_dim});
  auto r = benchmark_forward(model, x, 5);
  EXPECT_EQ(r.samples_ms.size(), 5u);
  EXPECT_GE(r.median_ms, r.min_ms);
  EXPECT_LE(r.median_ms, r.max_ms);
  EXPECT_GE(r.variance_ms2, 0.0);
  EXPECT_DOUBLE_EQ(r.flops, 2.0 * dense_flops(toy, 32));
  EXPECT_THROW(benchmark_forward(model, x, 2), std::invalid_argument);
}

TEST(Benchmark, ExtractedModelHasFewerFlops) {
  auto model = init_model<float>(toy, 1);
  auto bin = random_binary(toy, 77, 0.7);
  auto compact = extract(model, bin);
  EXPECT_LT(model_flops(compact, 64), model_flops(model, 64));
  EXPECT_DOUBLE_EQ(model_flops(compact, 64), exact_flops(bin, toy, 64));
}
