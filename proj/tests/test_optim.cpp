#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "maskforge/optim.hpp"

using namespace maskforge;

namespace {

using dtensor = basic_tensor<double>;

void set_grad(dtensor& p, std::vector<double> g) {
  auto& buf = p.grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) buf[i] = g[i];
}

}  // namespace

TEST(AdamW, ZeroGradientIsPureDecay) {
  dtensor w({3}, {1.0, -2.0, 0.5}, true);
  adamw<double> opt({w}, {.lr = 0.1, .weight_decay = 0.1});
  set_grad(w, {0.0, 0.0, 0.0});
  opt.step();
  EXPECT_DOUBLE_EQ(w.values()[0], 1.0 * 0.99);
  EXPECT_DOUBLE_EQ(w.values()[1], -2.0 * 0.99);
  EXPECT_DOUBLE_EQ(w.values()[2], 0.5 * 0.99);
}

TEST(AdamW, MissingGradientCountsAsZero) {
  dtensor w({2}, {1.0, 4.0}, true);
  adamw<double> opt({w}, {.lr = 0.1, .weight_decay = 0.1});
  opt.step();
  EXPECT_DOUBLE_EQ(w.values()[1], 4.0 * 0.99);
}

TEST(AdamW, FirstStepIsLearningRateTimesSign) {
  // Bias correction makes m_hat = g and v_hat = g^2, so the step is lr * g / (|g| + eps).
  dtensor w({4}, {0.0, 0.0, 0.0, 0.0}, true);
  const double lr = 0.01, eps = 1e-8;
  adamw<double> opt({w}, {.lr = lr, .eps = eps});
  const std::vector<double> g{3.0, -0.2, 1e-3, -50.0};
  set_grad(w, g);
  opt.step();
  for (std::size_t i = 0; i < g.size(); ++i) {
    EXPECT_NEAR(w.values()[i], -lr * g[i] / (std::abs(g[i]) + eps), 1e-15);
    EXPECT_NEAR(w.values()[i], -lr * (g[i] > 0 ? 1.0 : -1.0), 1e-7);
  }
}

TEST(AdamW, ConstantGradientKeepsUnitStep) {
  dtensor w({1}, {0.0}, true);
  adamw<double> opt({w}, {.lr = 0.01});
  for (int t = 0; t < 5; ++t) {
    set_grad(w, {2.0});
    opt.step();
  }
  EXPECT_NEAR(w.values()[0], -0.05, 1e-9);
}

TEST(AdamW, AscentMovesAlongGradient) {
  dtensor w({1}, {0.0}, true);
  adamw<double> opt({w}, {.lr = 0.01, .ascent = true});
  set_grad(w, {0.5});
  opt.step();
  EXPECT_NEAR(w.values()[0], 0.01, 1e-9);
}

TEST(AdamW, DecayOnlyOnFlaggedParameters) {
  dtensor a({1}, {1.0}, true), b({1}, {1.0}, true);
  adamw<double> opt({a, b}, {.lr = 0.1, .weight_decay = 0.1}, {true, false});
  opt.step();
  EXPECT_DOUBLE_EQ(a.values()[0], 0.99);
  EXPECT_DOUBLE_EQ(b.values()[0], 1.0);
  EXPECT_THROW(adamw<double>({a, b}, {}, {true}), std::invalid_argument);
}

TEST(AdamW, IdenticalInputsGiveIdenticalUpdates) {
  dtensor a({3}, {0.3, -0.1, 2.0}, true), b({3}, {0.3, -0.1, 2.0}, true);
  adamw<double> oa({a}, {.lr = 0.05, .weight_decay = 0.02}), ob({b}, {.lr = 0.05, .weight_decay = 0.02});
  for (int t = 0; t < 10; ++t) {
    const std::vector<double> g{0.1 * t, -0.3, std::sin(t)};
    set_grad(a, g);
    set_grad(b, g);
    oa.step();
    ob.step();
  }
  EXPECT_EQ(a.values(), b.values());
}

TEST(AdamW, NonFiniteGradientIsRejectedWithoutSideEffects) {
  dtensor a({2}, {1.0, 2.0}, true), b({1}, {3.0}, true);
  adamw<double> opt({a, b}, {.lr = 0.1});
  set_grad(a, {0.5, 0.5});
  set_grad(b, {std::numeric_limits<double>::quiet_NaN()});
  EXPECT_THROW(opt.step(), numeric_error);
  EXPECT_EQ(a.values(), (std::vector<double>{1.0, 2.0}));
  EXPECT_EQ(b.values()[0], 3.0);
  EXPECT_EQ(opt.steps(), 0u);
  set_grad(b, {std::numeric_limits<double>::infinity()});
  EXPECT_THROW(opt.step(), numeric_error);
}

TEST(AdamW, ZeroGradClearsEveryParameter) {
  dtensor a({1}, {1.0}, true);
  adamw<double> opt({a}, {});
  set_grad(a, {1.0});
  opt.zero_grad();
  EXPECT_FALSE(a.has_grad() && a.grad()[0] != 0.0);
}
