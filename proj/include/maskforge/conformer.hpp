#pragma once

// Toy Conformer encoder: input projection + sinusoidal positions, L blocks of
// (half-step FFN, MHSA, convolution module, half-step FFN), final norm and a
// frame classifier.
//
// The same type represents the dense model and any structurally extracted
// descendant. A model owns a residual stream of `hidden_index.size()` dims
// (original dim ids in `hidden_index`); layer i reads and writes the stream
// positions in `layers[i].index`. Layer norms always normalize over the
// nominal width `config.hidden`, so an extracted model reproduces the
// statistics of its masked parent, whose pruned positions hold exact zeros.

#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "maskforge/config.hpp"
#include "maskforge/ops.hpp"
#include "maskforge/random.hpp"

namespace maskforge {

enum class param_kind { weight, bias, norm, buffer };

template <class T>
struct ffn_block {
  basic_tensor<T> norm_gamma, norm_beta;
  basic_tensor<T> w_in, b_in;    // [d_i, f_i], [f_i]
  basic_tensor<T> w_out, b_out;  // [f_i, d_i], [d_i]
  std::size_t channels() const { return b_in.numel(); }
};

template <class T>
struct attention_block {
  basic_tensor<T> norm_gamma, norm_beta;
  basic_tensor<T> w_q, b_q, w_k, b_k, w_v, b_v;  // [d_i, h_i * d_head], [h_i * d_head]
  basic_tensor<T> w_o;                           // [h_i * d_head, d_i]; no bias so a headless block is exactly zero
};

template <class T>
struct conv_block {
  basic_tensor<T> norm_gamma, norm_beta;
  basic_tensor<T> w_pw1, b_pw1;  // [d_i, 2 d_i], [2 d_i]; GLU pairs channel c with c + d_i
  basic_tensor<T> w_dw, b_dw;    // [d_i, k], [d_i]
  basic_tensor<T> inner_gamma, inner_beta;
  basic_tensor<T> w_pw2, b_pw2;  // [d_i, d_i], [d_i]
};

template <class T>
struct conformer_layer {
  std::vector<std::size_t> index;  // stream positions this layer touches
  // original unit ids of the surviving heads / FFN channels
  std::vector<std::size_t> head_ids, ffn1_ids, ffn2_ids;
  ffn_block<T> ffn1;
  attention_block<T> attn;
  std::optional<conv_block<T>> conv;
  ffn_block<T> ffn2;
};

template <class T>
struct conformer_model {
  conformer_config config;                // nominal (dense) configuration
  std::vector<std::size_t> hidden_index;  // original dim id of each stream position
  basic_tensor<T> w_embed, b_embed;       // [F, w], [w]
  basic_tensor<T> position_scale;         // [w] buffer, folded global gates
  std::vector<conformer_layer<T>> layers;
  basic_tensor<T> final_gamma, final_beta;
  basic_tensor<T> w_cls, b_cls;  // [w, K], [K]

  std::size_t width() const { return hidden_index.size(); }
  std::size_t heads(std::size_t layer) const { return layers[layer].attn.b_q.numel() / config.head_dim(); }

  bool is_dense_layout() const {
    if (width() != config.hidden) return false;
    for (const auto& l : layers) {
      if (l.index.size() != width() || l.ffn1.channels() != config.ffn_dim || l.ffn2.channels() != config.ffn_dim || !l.conv)
        return false;
      if (l.attn.b_q.numel() != config.hidden) return false;
    }
    return true;
  }

  /// Visits every stored tensor with a stable name. Encoder-layer entries are
  /// prefixed "layer.".
  template <class Fn>
  void for_each_tensor(Fn&& fn) {
    fn("embed.weight", w_embed, param_kind::weight);
    fn("embed.bias", b_embed, param_kind::bias);
    fn("embed.position_scale", position_scale, param_kind::buffer);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      auto& l = layers[i];
      const std::string p = "layer." + std::to_string(i) + ".";
      auto ffn = [&](const std::string& q, ffn_block<T>& f) {
        fn(q + "norm_gamma", f.norm_gamma, param_kind::norm);
        fn(q + "norm_beta", f.norm_beta, param_kind::norm);
        fn(q + "w_in", f.w_in, param_kind::weight);
        fn(q + "b_in", f.b_in, param_kind::bias);
        fn(q + "w_out", f.w_out, param_kind::weight);
        fn(q + "b_out", f.b_out, param_kind::bias);
      };
      ffn(p + "ffn1.", l.ffn1);
      auto& a = l.attn;
      fn(p + "attn.norm_gamma", a.norm_gamma, param_kind::norm);
      fn(p + "attn.norm_beta", a.norm_beta, param_kind::norm);
      fn(p + "attn.w_q", a.w_q, param_kind::weight);
      fn(p + "attn.b_q", a.b_q, param_kind::bias);
      fn(p + "attn.w_k", a.w_k, param_kind::weight);
      fn(p + "attn.b_k", a.b_k, param_kind::bias);
      fn(p + "attn.w_v", a.w_v, param_kind::weight);
      fn(p + "attn.b_v", a.b_v, param_kind::bias);
      fn(p + "attn.w_o", a.w_o, param_kind::weight);
      if (l.conv) {
        auto& c = *l.conv;
        fn(p + "conv.norm_gamma", c.norm_gamma, param_kind::norm);
        fn(p + "conv.norm_beta", c.norm_beta, param_kind::norm);
        fn(p + "conv.w_pw1", c.w_pw1, param_kind::weight);
        fn(p + "conv.b_pw1", c.b_pw1, param_kind::bias);
        fn(p + "conv.w_dw", c.w_dw, param_kind::weight);
        fn(p + "conv.b_dw", c.b_dw, param_kind::bias);
        fn(p + "conv.inner_gamma", c.inner_gamma, param_kind::norm);
        fn(p + "conv.inner_beta", c.inner_beta, param_kind::norm);
        fn(p + "conv.w_pw2", c.w_pw2, param_kind::weight);
        fn(p + "conv.b_pw2", c.b_pw2, param_kind::bias);
      }
      ffn(p + "ffn2.", l.ffn2);
    }
    fn("final.norm_gamma", final_gamma, param_kind::norm);
    fn("final.norm_beta", final_beta, param_kind::norm);
    fn("classifier.weight", w_cls, param_kind::weight);
    fn("classifier.bias", b_cls, param_kind::bias);
  }

  template <class Fn>
  void for_each_tensor(Fn&& fn) const {
    const_cast<conformer_model*>(this)->for_each_tensor(
        [&](const std::string& name, basic_tensor<T>& t, param_kind kind) { fn(name, static_cast<const basic_tensor<T>&>(t), kind); });
  }

  /// Trainable tensors (everything except buffers).
  std::vector<basic_tensor<T>> parameters() const {
    std::vector<basic_tensor<T>> out;
    for_each_tensor([&](const std::string&, const basic_tensor<T>& t, param_kind k) {
      if (k != param_kind::buffer) out.push_back(t);
    });
    return out;
  }

  void set_requires_grad(bool on) {
    for_each_tensor([&](const std::string&, basic_tensor<T>& t, param_kind k) {
      if (k != param_kind::buffer) t.set_requires_grad(on);
    });
  }

  /// Independent deep copy.
  conformer_model clone() const {
    conformer_model out = *this;
    out.for_each_tensor([](const std::string&, basic_tensor<T>& t, param_kind) { t = t.clone(); });
    return out;
  }

  template <class U>
  conformer_model<U> cast() const {
    conformer_model<U> out;
    out.config = config;
    out.hidden_index = hidden_index;
    out.layers.resize(layers.size());
    for (std::size_t i = 0; i < layers.size(); ++i) {
      out.layers[i].index = layers[i].index;
      out.layers[i].head_ids = layers[i].head_ids;
      out.layers[i].ffn1_ids = layers[i].ffn1_ids;
      out.layers[i].ffn2_ids = layers[i].ffn2_ids;
      if (layers[i].conv) out.layers[i].conv.emplace();
    }
    std::vector<basic_tensor<U>*> dst;
    out.for_each_tensor([&](const std::string&, basic_tensor<U>& t, param_kind) { dst.push_back(&t); });
    std::size_t k = 0;
    for_each_tensor([&](const std::string&, const basic_tensor<T>& t, param_kind) {
      std::vector<U> v(t.values().begin(), t.values().end());
      *dst[k++] = basic_tensor<U>(t.shape(), std::move(v), t.requires_grad());
    });
    return out;
  }
};

/// Number of stored values in encoder layers (the prunable parameter count).
template <class T>
std::size_t encoder_parameter_count(const conformer_model<T>& model) {
  std::size_t n = 0;
  model.for_each_tensor([&](const std::string& name, const basic_tensor<T>& t, param_kind k) {
    if (k != param_kind::buffer && name.rfind("layer.", 0) == 0) n += t.numel();
  });
  return n;
}

template <class T>
std::size_t total_parameter_count(const conformer_model<T>& model) {
  std::size_t n = 0;
  model.for_each_tensor([&](const std::string&, const basic_tensor<T>& t, param_kind k) {
    if (k != param_kind::buffer) n += t.numel();
  });
  return n;
}

namespace detail {

template <class T>
basic_tensor<T> uniform_init(shape_t shape, double bound, rng& g) {
  std::vector<T> v(numel_of(shape));
  for (auto& x : v) x = static_cast<T>((2.0 * uniform01(g) - 1.0) * bound);
  return basic_tensor<T>(std::move(shape), std::move(v));
}

inline std::vector<std::size_t> iota_index(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

}  // namespace detail

/// Dense model, weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero biases,
/// unit norm gains.
template <class T = float>
conformer_model<T> init_model(const conformer_config& cfg, std::uint64_t seed) {
  cfg.validate();
  auto g = make_rng(seed, stream::model_init);
  const std::size_t d = cfg.hidden, f = cfg.ffn_dim, k = cfg.conv_kernel;
  auto weight = [&](std::size_t fan_in, std::size_t fan_out) {
    return detail::uniform_init<T>({fan_in, fan_out}, 1.0 / std::sqrt(static_cast<double>(fan_in)), g);
  };
  auto zeros = [](std::size_t n) { return basic_tensor<T>::zeros({n}); };
  auto ones = [](std::size_t n) { return basic_tensor<T>::ones({n}); };
  conformer_model<T> m;
  m.config = cfg;
  m.hidden_index = detail::iota_index(d);
  m.w_embed = weight(cfg.input_dim, d);
  m.b_embed = zeros(d);
  m.position_scale = ones(d);
  auto make_ffn = [&] {
    ffn_block<T> b{ones(d), zeros(d), weight(d, f), zeros(f), weight(f, d), zeros(d)};
    return b;
  };
  for (std::size_t i = 0; i < cfg.num_layers; ++i) {
    conformer_layer<T> l;
    l.index = detail::iota_index(d);
    l.head_ids = detail::iota_index(cfg.num_heads);
    l.ffn1_ids = detail::iota_index(f);
    l.ffn2_ids = detail::iota_index(f);
    l.ffn1 = make_ffn();
    l.attn = {ones(d), zeros(d), weight(d, d), zeros(d), weight(d, d), zeros(d), weight(d, d), zeros(d), weight(d, d)};
    conv_block<T> c;
    c.norm_gamma = ones(d);
    c.norm_beta = zeros(d);
    c.w_pw1 = weight(d, 2 * d);
    c.b_pw1 = zeros(2 * d);
    c.w_dw = detail::uniform_init<T>({d, k}, 1.0 / std::sqrt(static_cast<double>(k)), g);
    c.b_dw = zeros(d);
    c.inner_gamma = ones(d);
    c.inner_beta = zeros(d);
    c.w_pw2 = weight(d, d);
    c.b_pw2 = zeros(d);
    l.conv = std::move(c);
    l.ffn2 = make_ffn();
    m.layers.push_back(std::move(l));
  }
  m.final_gamma = ones(d);
  m.final_beta = zeros(d);
  m.w_cls = weight(d, cfg.num_classes);
  m.b_cls = zeros(cfg.num_classes);
  return m;
}

/// Per-layer gate values injected into forward. Undefined tensors mean "all ones"
/// and skip the multiply. Shapes follow the model layout: hidden_global [w],
/// hidden_local[i] [|index_i|], head[i] [h_i], ffn1/ffn2[i] [f_i], conv[i] [1].
template <class T>
struct mask_values {
  basic_tensor<T> hidden_global;
  std::vector<basic_tensor<T>> hidden_local, head, ffn1, ffn2, conv;

  static mask_values empty(std::size_t layers) {
    mask_values m;
    m.hidden_local.resize(layers);
    m.head.resize(layers);
    m.ffn1.resize(layers);
    m.ffn2.resize(layers);
    m.conv.resize(layers);
    return m;
  }
};

template <class T>
struct encoder_output {
  std::vector<basic_tensor<T>> layer_hiddens;  // L tensors [B, T, w]
  basic_tensor<T> logits;                      // [B, T, K]
};

/// Sinusoidal table [T, w] for the original dim ids in `dims` of a d-wide model.
template <class T>
basic_tensor<T> sinusoid_positions(std::size_t length, const std::vector<std::size_t>& dims, std::size_t d, const basic_tensor<T>& scale) {
  const std::size_t w = dims.size();
  std::vector<T> v(length * w);
  for (std::size_t t = 0; t < length; ++t)
    for (std::size_t k = 0; k < w; ++k) {
      const std::size_t j = dims[k];
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (j / 2)) / static_cast<double>(d));
      const double angle = static_cast<double>(t) * freq;
      v[t * w + k] = static_cast<T>((j % 2 == 0 ? std::sin(angle) : std::cos(angle)) * scale.values()[k]);
    }
  return basic_tensor<T>({length, w}, std::move(v));
}

namespace detail {

inline bool is_identity(const std::vector<std::size_t>& index, std::size_t width) {
  if (index.size() != width) return false;
  for (std::size_t i = 0; i < width; ++i)
    if (index[i] != i) return false;
  return true;
}

template <class T>
basic_tensor<T> gated(basic_tensor<T> x, const basic_tensor<T>& gate) {
  return gate.defined() ? mul(std::move(x), gate) : x;
}

template <class T>
basic_tensor<T> ffn_forward(const ffn_block<T>& b, basic_tensor<T> x, const basic_tensor<T>& channel_gate) {
  auto a = swish(add(matmul(std::move(x), b.w_in), b.b_in));
  a = gated(std::move(a), channel_gate);
  return add(matmul(std::move(a), b.w_out), b.b_out);
}

template <class T>
basic_tensor<T> attention_forward(const attention_block<T>& b, basic_tensor<T> x, std::size_t head_dim, const basic_tensor<T>& head_gate) {
  const std::size_t B = x.dim(0), L = x.dim(1), nh = b.b_q.numel() / head_dim;
  auto split = [&](const basic_tensor<T>& w, const basic_tensor<T>& bias) { return reshape(add(matmul(x, w), bias), {B, L, nh, head_dim}); };
  auto q = transpose(split(b.w_q, b.b_q), {0, 2, 1, 3});  // [B, h, L, dh]
  auto kt = transpose(split(b.w_k, b.b_k), {0, 2, 3, 1});  // [B, h, dh, L]
  auto v = transpose(split(b.w_v, b.b_v), {0, 2, 1, 3});
  auto scores = scale(matmul(q, kt), 1.0 / std::sqrt(static_cast<double>(head_dim)));
  auto ctx = matmul(softmax(scores, -1), v);
  if (head_gate.defined()) ctx = mul(ctx, broadcast(reshape(head_gate, {nh, 1, 1}), {nh, L, head_dim}));
  auto merged = reshape(transpose(ctx, {0, 2, 1, 3}), {B, L, nh * head_dim});
  return matmul(merged, b.w_o);
}

template <class T>
basic_tensor<T> conv_forward(const conv_block<T>& b, basic_tensor<T> x, const basic_tensor<T>& channel_gate, std::size_t nominal) {
  auto u = glu(add(matmul(std::move(x), b.w_pw1), b.b_pw1));
  auto v = gated(add(depthwise_conv1d(u, b.w_dw), b.b_dw), channel_gate);
  auto w = gated(swish(layer_norm(v, b.inner_gamma, b.inner_beta, 1e-5, nominal)), channel_gate);
  return add(matmul(std::move(w), b.w_pw2), b.b_pw2);
}

}  // namespace detail

/// Runs the encoder. `masks` may be null (equivalent to all gates = 1).
template <class T>
encoder_output<T> forward(const conformer_model<T>& model, const basic_tensor<T>& x, const mask_values<T>* masks = nullptr) {
  const auto& cfg = model.config;
  if (x.rank() != 3 || x.dim(2) != model.w_embed.dim(0)) throw shape_error("forward: input " + shape_str(x.shape()) + " does not match input_dim");
  const std::size_t L = x.dim(1), w = model.width(), nominal = cfg.hidden;
  if (masks) {
    const std::size_t nl = model.layers.size();
    if (masks->hidden_local.size() != nl || masks->head.size() != nl || masks->ffn1.size() != nl || masks->ffn2.size() != nl ||
        masks->conv.size() != nl)
      throw shape_error("forward: mask set layer count does not match model");
    if (masks->hidden_global.defined() && masks->hidden_global.numel() != w) throw shape_error("forward: global hidden mask width mismatch");
  }
  const basic_tensor<T> none;

  auto h = add(add(matmul(x, model.w_embed), model.b_embed), sinusoid_positions(L, model.hidden_index, nominal, model.position_scale));
  const basic_tensor<T>& zg = masks ? masks->hidden_global : none;
  h = detail::gated(std::move(h), zg);

  encoder_output<T> out;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const auto& layer = model.layers[i];
    const bool identity = detail::is_identity(layer.index, w);
    basic_tensor<T> gate;
    if (zg.defined()) gate = identity ? zg : gather_last(zg, layer.index);
    const auto& local = masks ? masks->hidden_local[i] : none;
    if (local.defined()) {
      if (local.numel() != layer.index.size()) throw shape_error("forward: local hidden mask width mismatch in layer " + std::to_string(i));
      gate = gate.defined() ? mul(local, gate) : local;
    }
    // Statistics always cover the whole stream; the affine part belongs to the layer.
    const auto unit_gamma = identity ? basic_tensor<T>() : basic_tensor<T>::ones({w});
    const auto unit_beta = identity ? basic_tensor<T>() : basic_tensor<T>::zeros({w});
    auto read = [&](const basic_tensor<T>& gamma, const basic_tensor<T>& beta) {
      basic_tensor<T> y;
      if (identity) {
        y = layer_norm(h, gamma, beta, 1e-5, nominal);
      } else {
        y = gather_last(layer_norm(h, unit_gamma, unit_beta, 1e-5, nominal), layer.index);
        y = add(mul(std::move(y), gamma), beta);
      }
      return detail::gated(std::move(y), gate);
    };
    auto write = [&](basic_tensor<T> y) {
      y = detail::gated(std::move(y), gate);
      if (!identity) y = scatter_last(std::move(y), layer.index, w);
      h = add(h, y);
    };
    const auto& z_ffn1 = masks ? masks->ffn1[i] : none;
    const auto& z_head = masks ? masks->head[i] : none;
    const auto& z_conv = masks ? masks->conv[i] : none;
    const auto& z_ffn2 = masks ? masks->ffn2[i] : none;

    write(scale(detail::ffn_forward(layer.ffn1, read(layer.ffn1.norm_gamma, layer.ffn1.norm_beta), z_ffn1), 0.5));
    write(detail::attention_forward(layer.attn, read(layer.attn.norm_gamma, layer.attn.norm_beta), cfg.head_dim(), z_head));
    if (layer.conv) {
      auto y = detail::conv_forward(*layer.conv, read(layer.conv->norm_gamma, layer.conv->norm_beta), gate, nominal);
      write(detail::gated(std::move(y), z_conv));
    }
    write(scale(detail::ffn_forward(layer.ffn2, read(layer.ffn2.norm_gamma, layer.ffn2.norm_beta), z_ffn2), 0.5));
    out.layer_hiddens.push_back(h);
  }
  auto top = detail::gated(layer_norm(h, model.final_gamma, model.final_beta, 1e-5, nominal), zg);
  out.logits = add(matmul(top, model.w_cls), model.b_cls);
  return out;
}

template <class T>
std::vector<basic_tensor<T>> layer_hidden_states(const conformer_model<T>& model, const basic_tensor<T>& x, const mask_values<T>* masks = nullptr) {
  return forward(model, x, masks).layer_hiddens;
}

}  // namespace maskforge
