#pragma once

// Frame classification stand-in for ASR. Each example is a Markov chain of
// class symbols; a frame's feature is its class centroid plus a fraction of
// the mean centroid of its +-2 neighbours plus Gaussian noise. Every example
// is a pure function of (spec, example index).

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "maskforge/config.hpp"
#include "maskforge/random.hpp"
#include "maskforge/tensor.hpp"

namespace maskforge {

/// Training examples use indices below this; holdout examples start here.
inline constexpr std::uint64_t holdout_offset = std::uint64_t{1} << 62;

template <class T = float>
struct labeled_batch {
  basic_tensor<T> features;  // [B, T, F]
  std::vector<int> labels;   // B * T, row-major
};

/// Unit-norm class centroids [K * F], fixed per spec.seed.
inline std::vector<double> class_centroids(const task_spec& spec) {
  auto g = make_rng(spec.seed, stream::centroids);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> c(spec.num_classes * spec.feature_dim);
  for (std::size_t k = 0; k < spec.num_classes; ++k) {
    double norm = 0.0;
    for (std::size_t f = 0; f < spec.feature_dim; ++f) {
      const double v = normal(g);
      c[k * spec.feature_dim + f] = v;
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (std::size_t f = 0; f < spec.feature_dim; ++f) c[k * spec.feature_dim + f] /= norm;
  }
  return c;
}

/// Examples offset, offset + 1, ..., offset + batch - 1.
template <class T = float>
labeled_batch<T> generate_batch(const task_spec& spec, std::size_t batch, std::uint64_t offset) {
  spec.validate();
  if (batch < 1) throw std::invalid_argument("generate_batch: batch must be >= 1");
  const std::size_t K = spec.num_classes, L = spec.seq_len, F = spec.feature_dim;
  const auto centroids = class_centroids(spec);
  std::vector<T> feats(batch * L * F);
  std::vector<int> labels(batch * L);
  for (std::size_t b = 0; b < batch; ++b) {
    auto g = make_rng(spec.seed, stream::examples, offset + b);
    std::normal_distribution<double> normal(0.0, 1.0);
    int* y = labels.data() + b * L;
    y[0] = static_cast<int>(uniform01(g) * static_cast<double>(K));
    for (std::size_t t = 1; t < L; ++t) {
      if (uniform01(g) < spec.stay_probability) {
        y[t] = y[t - 1];
      } else {
        // uniform over the other K - 1 classes
        const int r = static_cast<int>(uniform01(g) * static_cast<double>(K - 1));
        y[t] = r >= y[t - 1] ? r + 1 : r;
      }
    }
    for (std::size_t t = 0; t < L; ++t) {
      const std::size_t lo = t >= 2 ? t - 2 : 0, hi = std::min(L - 1, t + 2);
      const double neighbours = static_cast<double>(hi - lo);
      for (std::size_t f = 0; f < F; ++f) {
        double ctx = 0.0;
        for (std::size_t s = lo; s <= hi; ++s)
          if (s != t) ctx += centroids[static_cast<std::size_t>(y[s]) * F + f];
        const double mean_ctx = neighbours > 0 ? ctx / neighbours : 0.0;
        const double v = centroids[static_cast<std::size_t>(y[t]) * F + f] + spec.neighbor_mix * mean_ctx + spec.noise_std * normal(g);
        feats[(b * L + t) * F + f] = static_cast<T>(v);
      }
    }
  }
  return {basic_tensor<T>({batch, L, F}, std::move(feats)), std::move(labels)};
}

/// Training minibatch for step `step`: examples [step * batch, (step + 1) * batch).
template <class T = float>
labeled_batch<T> training_batch(const task_spec& spec, std::size_t batch, std::uint64_t step) {
  return generate_batch<T>(spec, batch, step * batch);
}

/// Fixed evaluation set drawn from indices disjoint from any training step.
template <class T = float>
labeled_batch<T> holdout_set(const task_spec& spec, std::size_t size) {
  return generate_batch<T>(spec, size, holdout_offset);
}

}  // namespace maskforge
