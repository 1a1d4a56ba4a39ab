#pragma once

// CPK1 tensor container. Layout (all integers little-endian):
//   "CPK1" | version u32 | count u32 |
//   count x { name_len u32 | name bytes | dtype u8 | rank u32 | extents u64[rank] | values }
//   | crc32 u32 over every preceding byte
// dtype 0 is IEEE-754 binary32, the only code defined.

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "maskforge/binary_masks.hpp"
#include "maskforge/conformer.hpp"
#include "maskforge/hard_concrete.hpp"

namespace maskforge {

inline constexpr std::uint32_t checkpoint_version = 1;

enum class checkpoint_errc {
  io = 1,
  bad_magic,
  bad_version,
  crc_mismatch,
  unknown_dtype,
  truncated,
  invalid_entry,  // empty or duplicate names, extents that overflow
  missing_entry,
  layout_mismatch,
};

inline const char* to_string(checkpoint_errc c) {
  switch (c) {
    case checkpoint_errc::io: return "io";
    case checkpoint_errc::bad_magic: return "bad_magic";
    case checkpoint_errc::bad_version: return "bad_version";
    case checkpoint_errc::crc_mismatch: return "crc_mismatch";
    case checkpoint_errc::unknown_dtype: return "unknown_dtype";
    case checkpoint_errc::truncated: return "truncated";
    case checkpoint_errc::invalid_entry: return "invalid_entry";
    case checkpoint_errc::missing_entry: return "missing_entry";
    case checkpoint_errc::layout_mismatch: return "layout_mismatch";
  }
  return "unknown";
}

class checkpoint_error : public std::runtime_error {
 public:
  checkpoint_error(checkpoint_errc code, const std::string& what)
      : std::runtime_error(std::string("checkpoint ") + to_string(code) + ": " + what), code_(code) {}
  checkpoint_errc code() const { return code_; }

 private:
  checkpoint_errc code_;
};

struct named_tensor {
  std::string name;
  shape_t shape;
  std::vector<float> values;

  bool operator==(const named_tensor&) const = default;
};

namespace detail {

inline std::uint32_t crc32_of(const unsigned char* p, std::size_t n) {
  uLong c = ::crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    c = ::crc32(c, p, chunk);
    p += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(c);
}

class byte_writer {
 public:
  template <class U>
  void put(U v) {
    static_assert(std::is_unsigned_v<U>);
    for (std::size_t i = 0; i < sizeof(U); ++i) bytes.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void put_bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    bytes.insert(bytes.end(), c, c + n);
  }
  std::vector<unsigned char> bytes;
};

class byte_reader {
 public:
  byte_reader(const unsigned char* p, std::size_t n) : p_(p), n_(n) {}
  template <class U>
  U get(const char* what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(p_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return v;
  }
  const unsigned char* take(std::size_t n, const char* what) {
    need(n, what);
    const auto* out = p_ + pos_;
    pos_ += n;
    return out;
  }
  std::size_t remaining() const { return n_ - pos_; }

 private:
  void need(std::size_t k, const char* what) const {
    if (n_ - pos_ < k) throw checkpoint_error(checkpoint_errc::truncated, std::string("file ends inside ") + what);
  }
  const unsigned char* p_;
  std::size_t n_;
  std::size_t pos_ = 0;
};

}  // namespace detail

/// Serializes `entries` in order. Names must be unique and non-empty.
inline std::vector<unsigned char> encode_checkpoint(const std::vector<named_tensor>& entries) {
  std::set<std::string> seen;
  detail::byte_writer w;
  w.put_bytes("CPK1", 4);
  w.put(checkpoint_version);
  w.put(static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    if (e.name.empty()) throw checkpoint_error(checkpoint_errc::invalid_entry, "empty tensor name");
    if (!seen.insert(e.name).second) throw checkpoint_error(checkpoint_errc::invalid_entry, "duplicate tensor name '" + e.name + "'");
    if (numel_of(e.shape) != e.values.size())
      throw checkpoint_error(checkpoint_errc::invalid_entry, "'" + e.name + "' has " + std::to_string(e.values.size()) + " values for shape " + shape_str(e.shape));
    w.put(static_cast<std::uint32_t>(e.name.size()));
    w.put_bytes(e.name.data(), e.name.size());
    w.put(std::uint8_t{0});
    w.put(static_cast<std::uint32_t>(e.shape.size()));
    for (auto x : e.shape) w.put(static_cast<std::uint64_t>(x));
    for (float v : e.values) w.put(std::bit_cast<std::uint32_t>(v));
  }
  w.put(detail::crc32_of(w.bytes.data(), w.bytes.size()));
  return std::move(w.bytes);
}

inline std::vector<named_tensor> decode_checkpoint(const unsigned char* data, std::size_t size) {
  if (size < 4 || std::memcmp(data, "CPK1", 4) != 0) throw checkpoint_error(checkpoint_errc::bad_magic, "missing CPK1 header");
  if (size < 16) throw checkpoint_error(checkpoint_errc::truncated, "file shorter than an empty container");
  detail::byte_reader crc_reader(data + size - 4, 4);
  const auto stored = crc_reader.get<std::uint32_t>("crc");
  if (stored != detail::crc32_of(data, size - 4)) throw checkpoint_error(checkpoint_errc::crc_mismatch, "stored CRC does not match contents");

  detail::byte_reader r(data + 4, size - 8);
  const auto version = r.get<std::uint32_t>("version");
  if (version != checkpoint_version) throw checkpoint_error(checkpoint_errc::bad_version, "unsupported version " + std::to_string(version));
  const auto count = r.get<std::uint32_t>("entry count");
  std::vector<named_tensor> out;
  std::set<std::string> seen;
  for (std::uint32_t k = 0; k < count; ++k) {
    named_tensor e;
    const auto len = r.get<std::uint32_t>("name length");
    const auto* name = r.take(len, "name");
    e.name.assign(reinterpret_cast<const char*>(name), len);
    if (e.name.empty() || !seen.insert(e.name).second) throw checkpoint_error(checkpoint_errc::invalid_entry, "empty or duplicate name '" + e.name + "'");
    const auto dtype = r.get<std::uint8_t>("dtype");
    if (dtype != 0) throw checkpoint_error(checkpoint_errc::unknown_dtype, "dtype code " + std::to_string(dtype) + " in '" + e.name + "'");
    const auto rank = r.get<std::uint32_t>("rank");
    std::uint64_t n = 1;
    for (std::uint32_t a = 0; a < rank; ++a) {
      const auto x = r.get<std::uint64_t>("extents");
      if (x != 0 && n > r.remaining() / x) throw checkpoint_error(checkpoint_errc::truncated, "'" + e.name + "' extents exceed the file size");
      n *= x;
      e.shape.push_back(static_cast<std::size_t>(x));
    }
    if (n > r.remaining() / 4) throw checkpoint_error(checkpoint_errc::truncated, "values of '" + e.name + "'");
    e.values.resize(static_cast<std::size_t>(n));
    for (auto& v : e.values) v = std::bit_cast<float>(r.get<std::uint32_t>("values"));
    out.push_back(std::move(e));
  }
  if (r.remaining() != 0) throw checkpoint_error(checkpoint_errc::invalid_entry, std::to_string(r.remaining()) + " trailing bytes before the CRC");
  return out;
}

inline void write_file(const std::string& path, const std::vector<unsigned char>& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw checkpoint_error(checkpoint_errc::io, "cannot open '" + path + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw checkpoint_error(checkpoint_errc::io, "write to '" + path + "' failed");
}

inline std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw checkpoint_error(checkpoint_errc::io, "cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline void save_checkpoint(const std::string& path, const std::vector<named_tensor>& entries) { write_file(path, encode_checkpoint(entries)); }

inline std::vector<named_tensor> load_checkpoint(const std::string& path) {
  const auto bytes = read_file(path);
  return decode_checkpoint(bytes.data(), bytes.size());
}

/// Name lookup over a loaded container.
class checkpoint_view {
 public:
  explicit checkpoint_view(const std::vector<named_tensor>& entries) {
    for (const auto& e : entries) by_name_.emplace(e.name, &e);
  }
  bool has(const std::string& name) const { return by_name_.count(name) != 0; }
  const named_tensor& at(const std::string& name) const {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw checkpoint_error(checkpoint_errc::missing_entry, "no tensor named '" + name + "'");
    return *it->second;
  }
  std::vector<std::size_t> indices(const std::string& name) const {
    std::vector<std::size_t> out;
    for (float v : at(name).values) {
      if (!(v >= 0.0f) || v != static_cast<float>(static_cast<std::size_t>(v)))
        throw checkpoint_error(checkpoint_errc::layout_mismatch, "'" + name + "' holds a non-index value");
      out.push_back(static_cast<std::size_t>(v));
    }
    return out;
  }

 private:
  std::map<std::string, const named_tensor*> by_name_;
};

namespace detail {

inline named_tensor index_entry(const std::string& name, const std::vector<std::size_t>& idx) {
  return {name, {idx.size()}, std::vector<float>(idx.begin(), idx.end())};
}

template <class T>
named_tensor tensor_entry(const std::string& name, const basic_tensor<T>& t) {
  return {name, t.shape(), std::vector<float>(t.values().begin(), t.values().end())};
}

template <class T>
basic_tensor<T> entry_tensor(const named_tensor& e, const shape_t& expect, bool requires_grad) {
  if (e.shape != expect)
    throw checkpoint_error(checkpoint_errc::layout_mismatch, "'" + e.name + "' has shape " + shape_str(e.shape) + ", expected " + shape_str(expect));
  return basic_tensor<T>(e.shape, std::vector<T>(e.values.begin(), e.values.end()), requires_grad);
}

inline named_tensor config_entry(const conformer_config& c) {
  return {"meta.config", {7},
          {static_cast<float>(c.num_layers), static_cast<float>(c.hidden), static_cast<float>(c.num_heads), static_cast<float>(c.ffn_dim),
           static_cast<float>(c.conv_kernel), static_cast<float>(c.input_dim), static_cast<float>(c.num_classes)}};
}

inline conformer_config entry_config(const checkpoint_view& v) {
  const auto x = v.indices("meta.config");
  if (x.size() != 7) throw checkpoint_error(checkpoint_errc::layout_mismatch, "meta.config must hold 7 extents");
  conformer_config c{x[0], x[1], x[2], x[3], x[4], x[5], x[6]};
  try {
    c.validate();
  } catch (const config_error& e) {
    throw checkpoint_error(checkpoint_errc::layout_mismatch, e.what());
  }
  return c;
}

}  // namespace detail

/// Model tensors plus the layout metadata needed to rebuild an extracted model.
template <class T>
std::vector<named_tensor> model_entries(const conformer_model<T>& m) {
  std::vector<named_tensor> out{detail::config_entry(m.config), detail::index_entry("meta.hidden_index", m.hidden_index)};
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const auto& l = m.layers[i];
    const std::string p = "meta.layer." + std::to_string(i) + ".";
    out.push_back(detail::index_entry(p + "index", l.index));
    out.push_back(detail::index_entry(p + "head_ids", l.head_ids));
    out.push_back(detail::index_entry(p + "ffn1_ids", l.ffn1_ids));
    out.push_back(detail::index_entry(p + "ffn2_ids", l.ffn2_ids));
    out.push_back({p + "has_conv", {1}, {l.conv ? 1.0f : 0.0f}});
  }
  m.for_each_tensor([&](const std::string& name, const basic_tensor<T>& t, param_kind) { out.push_back(detail::tensor_entry(name, t)); });
  return out;
}

/// Rebuilds a model from `model_entries` output; every tensor shape is
/// checked against the layout metadata.
template <class T = float>
conformer_model<T> model_from_entries(const std::vector<named_tensor>& entries) {
  checkpoint_view v(entries);
  conformer_model<T> m;
  m.config = detail::entry_config(v);
  m.hidden_index = v.indices("meta.hidden_index");
  const std::size_t d = m.config.hidden, dh = m.config.head_dim(), w = m.hidden_index.size();
  const std::size_t F = m.config.input_dim, K = m.config.num_classes, k = m.config.conv_kernel;
  auto ids_ok = [](const std::vector<std::size_t>& ids, std::size_t bound) {
    for (std::size_t j = 0; j < ids.size(); ++j)
      if (ids[j] >= bound || (j > 0 && ids[j] <= ids[j - 1])) return false;
    return true;
  };
  if (!ids_ok(m.hidden_index, d)) throw checkpoint_error(checkpoint_errc::layout_mismatch, "meta.hidden_index is not an increasing subset of the hidden dims");
  m.layers.resize(m.config.num_layers);

  std::map<std::string, shape_t> expect{{"embed.weight", {F, w}}, {"embed.bias", {w}}, {"embed.position_scale", {w}},
                                        {"final.norm_gamma", {w}}, {"final.norm_beta", {w}}, {"classifier.weight", {w, K}},
                                        {"classifier.bias", {K}}};
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    auto& l = m.layers[i];
    const std::string p = "meta.layer." + std::to_string(i) + ".";
    l.index = v.indices(p + "index");
    l.head_ids = v.indices(p + "head_ids");
    l.ffn1_ids = v.indices(p + "ffn1_ids");
    l.ffn2_ids = v.indices(p + "ffn2_ids");
    if (!ids_ok(l.index, w) || !ids_ok(l.head_ids, m.config.num_heads) || !ids_ok(l.ffn1_ids, m.config.ffn_dim) || !ids_ok(l.ffn2_ids, m.config.ffn_dim))
      throw checkpoint_error(checkpoint_errc::layout_mismatch, "layer " + std::to_string(i) + " unit ids are out of range or unordered");
    if (v.at(p + "has_conv").values.at(0) != 0.0f) l.conv.emplace();
    const std::size_t wi = l.index.size(), a = l.head_ids.size() * dh;
    const std::string q = "layer." + std::to_string(i) + ".";
    for (auto [name, f] : {std::pair{"ffn1.", l.ffn1_ids.size()}, std::pair{"ffn2.", l.ffn2_ids.size()}}) {
      const std::string r = q + name;
      expect[r + "norm_gamma"] = {wi};
      expect[r + "norm_beta"] = {wi};
      expect[r + "w_in"] = {wi, f};
      expect[r + "b_in"] = {f};
      expect[r + "w_out"] = {f, wi};
      expect[r + "b_out"] = {wi};
    }
    expect[q + "attn.norm_gamma"] = {wi};
    expect[q + "attn.norm_beta"] = {wi};
    for (const char* n : {"attn.w_q", "attn.w_k", "attn.w_v"}) expect[q + n] = {wi, a};
    for (const char* n : {"attn.b_q", "attn.b_k", "attn.b_v"}) expect[q + n] = {a};
    expect[q + "attn.w_o"] = {a, wi};
    if (l.conv) {
      for (const char* n : {"conv.norm_gamma", "conv.norm_beta", "conv.b_dw", "conv.inner_gamma", "conv.inner_beta", "conv.b_pw2"}) expect[q + n] = {wi};
      expect[q + "conv.w_pw1"] = {wi, 2 * wi};
      expect[q + "conv.b_pw1"] = {2 * wi};
      expect[q + "conv.w_dw"] = {wi, k};
      expect[q + "conv.w_pw2"] = {wi, wi};
    }
  }
  m.for_each_tensor([&](const std::string& name, basic_tensor<T>& t, param_kind kind) {
    t = detail::entry_tensor<T>(v.at(name), expect.at(name), kind != param_kind::buffer);
  });
  return m;
}

template <class T>
void save_model(const std::string& path, const conformer_model<T>& m) {
  save_checkpoint(path, model_entries(m));
}

template <class T = float>
conformer_model<T> load_model(const std::string& path) {
  return model_from_entries<T>(load_checkpoint(path));
}

/// Gate logits, prefixed "mask.". Disabled families are stored with their
/// (unused) values and flagged in meta.mask_families.
template <class T>
std::vector<named_tensor> mask_entries(const hard_concrete_mask_set<T>& m) {
  std::vector<named_tensor> out{detail::config_entry(m.config),
                                {"meta.mask_families", {4},
                                 {m.families.head ? 1.0f : 0.0f, m.families.ffn ? 1.0f : 0.0f, m.families.conv ? 1.0f : 0.0f,
                                  m.families.hidden ? 1.0f : 0.0f}},
                                detail::tensor_entry("mask.hidden_global", m.hidden_global), detail::tensor_entry("mask.conv", m.conv)};
  for (std::size_t i = 0; i < m.head.size(); ++i) {
    const std::string p = "mask.layer." + std::to_string(i) + ".";
    out.push_back(detail::tensor_entry(p + "hidden_local", m.hidden_local[i]));
    out.push_back(detail::tensor_entry(p + "head", m.head[i]));
    out.push_back(detail::tensor_entry(p + "ffn1", m.ffn1[i]));
    out.push_back(detail::tensor_entry(p + "ffn2", m.ffn2[i]));
  }
  return out;
}

template <class T = float>
hard_concrete_mask_set<T> masks_from_entries(const std::vector<named_tensor>& entries) {
  checkpoint_view v(entries);
  hard_concrete_mask_set<T> m;
  m.config = detail::entry_config(v);
  const auto& fam = v.at("meta.mask_families").values;
  if (fam.size() != 4) throw checkpoint_error(checkpoint_errc::layout_mismatch, "meta.mask_families must hold 4 flags");
  m.families = {fam[0] != 0.0f, fam[1] != 0.0f, fam[2] != 0.0f, fam[3] != 0.0f};
  const auto& c = m.config;
  m.hidden_global = detail::entry_tensor<T>(v.at("mask.hidden_global"), {c.hidden}, true);
  m.conv = detail::entry_tensor<T>(v.at("mask.conv"), {c.num_layers}, true);
  for (std::size_t i = 0; i < c.num_layers; ++i) {
    const std::string p = "mask.layer." + std::to_string(i) + ".";
    m.hidden_local.push_back(detail::entry_tensor<T>(v.at(p + "hidden_local"), {c.hidden}, true));
    m.head.push_back(detail::entry_tensor<T>(v.at(p + "head"), {c.num_heads}, true));
    m.ffn1.push_back(detail::entry_tensor<T>(v.at(p + "ffn1"), {c.ffn_dim}, true));
    m.ffn2.push_back(detail::entry_tensor<T>(v.at(p + "ffn2"), {c.ffn_dim}, true));
  }
  return m;
}

/// Hard decisions with fold scales, prefixed "binary.". Scales are stored
/// as binary32.
inline std::vector<named_tensor> binary_mask_entries(const binary_mask_set& b, const conformer_config& cfg) {
  b.validate(cfg);
  auto vec = [](const std::string& name, const std::vector<double>& x) { return named_tensor{name, {x.size()}, std::vector<float>(x.begin(), x.end())}; };
  std::vector<named_tensor> out{detail::config_entry(cfg), vec("binary.hidden_global", b.hidden_global), vec("binary.conv", b.conv)};
  for (std::size_t i = 0; i < cfg.num_layers; ++i) {
    const std::string p = "binary.layer." + std::to_string(i) + ".";
    out.push_back(vec(p + "hidden_local", b.hidden_local[i]));
    out.push_back(vec(p + "head", b.head[i]));
    out.push_back(vec(p + "ffn1", b.ffn1[i]));
    out.push_back(vec(p + "ffn2", b.ffn2[i]));
  }
  return out;
}

inline binary_mask_set binary_masks_from_entries(const std::vector<named_tensor>& entries, conformer_config* cfg_out = nullptr) {
  checkpoint_view v(entries);
  const auto cfg = detail::entry_config(v);
  auto vec = [&](const std::string& name) {
    const auto& x = v.at(name).values;
    return std::vector<double>(x.begin(), x.end());
  };
  binary_mask_set b;
  b.hidden_global = vec("binary.hidden_global");
  b.conv = vec("binary.conv");
  for (std::size_t i = 0; i < cfg.num_layers; ++i) {
    const std::string p = "binary.layer." + std::to_string(i) + ".";
    b.hidden_local.push_back(vec(p + "hidden_local"));
    b.head.push_back(vec(p + "head"));
    b.ffn1.push_back(vec(p + "ffn1"));
    b.ffn2.push_back(vec(p + "ffn2"));
  }
  try {
    b.validate(cfg);
  } catch (const std::invalid_argument& e) {
    throw checkpoint_error(checkpoint_errc::layout_mismatch, e.what());
  }
  if (cfg_out) *cfg_out = cfg;
  return b;
}

}  // namespace maskforge
