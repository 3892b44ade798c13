#pragma once

// SFCK checkpoint format, little-endian throughout:
//
//   magic "SFCK"
//   u16  format version (currently 1)
//   u32  input channels, height, width; u32 class count; u32 layer count
//   per layer: u8 kind, u16 name length, name bytes, kind extents (u32 each)
//     kind 0 Conv2D    : in_channels, out_channels, kernel, stride, padding
//     kind 1 ReLU      : -
//     kind 2 MaxPool2D : window, stride
//     kind 3 Flatten   : -
//     kind 4 Dense     : in_features, out_features
//   per parameterized layer, in layer order: weights then bias payload
//     (raw float32, element counts derived from the descriptor)
//   per parameter tensor, same order: u8 trainable flag
//   u8 optimizer-state present; when 1:
//     u64 step; f32 lr, beta1, beta2, epsilon
//     per parameter tensor, same order: first-moment then second-moment payload
//   u32 CRC-32 (IEEE reflected) of all preceding bytes
//
// load(save(x)) reproduces every byte; a failed CRC rejects the file before
// any field is interpreted.

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "sessionfit/network.hpp"
#include "sessionfit/optim.hpp"

namespace sessionfit {

inline std::uint32_t crc32_ieee(const std::uint8_t* data, std::size_t n,
                                std::uint32_t crc = 0xFFFFFFFFu) {
  static const auto table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1u) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  for (std::size_t i = 0; i < n; ++i) crc = table[(crc ^ data[i]) & 0xFFu] ^ (crc >> 8);
  return crc;
}

inline std::uint32_t crc32_final(std::uint32_t crc) { return crc ^ 0xFFFFFFFFu; }

struct Checkpoint {
  NetworkSpec spec;
  ParameterSet params;
  std::optional<AdamState> optimizer;
};

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u16(std::uint16_t v) {
    u8(static_cast<std::uint8_t>(v));
    u8(static_cast<std::uint8_t>(v >> 8));
  }
  void u32(std::uint32_t v) {
    u16(static_cast<std::uint16_t>(v));
    u16(static_cast<std::uint16_t>(v >> 16));
  }
  void u64(std::uint64_t v) {
    u32(static_cast<std::uint32_t>(v));
    u32(static_cast<std::uint32_t>(v >> 32));
  }
  void f32(float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    u32(bits);
  }
  void str(const std::string& s) {
    u16(static_cast<std::uint16_t>(s.size()));
    for (char c : s) u8(static_cast<std::uint8_t>(c));
  }
  void floats(const std::vector<float>& values) {
    for (float v : values) f32(v);
  }
  std::vector<std::uint8_t>& bytes() { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  ByteReader(const std::uint8_t* data, std::size_t n) : data_(data), size_(n) {}
  std::uint8_t u8() {
    need(1);
    return data_[pos_++];
  }
  std::uint16_t u16() {
    const std::uint16_t lo = u8();
    return static_cast<std::uint16_t>(lo | (static_cast<std::uint16_t>(u8()) << 8));
  }
  std::uint32_t u32() {
    const std::uint32_t lo = u16();
    return lo | (static_cast<std::uint32_t>(u16()) << 16);
  }
  std::uint64_t u64() {
    const std::uint64_t lo = u32();
    return lo | (static_cast<std::uint64_t>(u32()) << 32);
  }
  float f32() {
    const std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  std::string str() {
    const std::uint16_t n = u16();
    need(n);
    std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
    pos_ += n;
    return s;
  }
  void floats(std::vector<float>& out, std::size_t count) {
    out.resize(count);
    for (std::size_t i = 0; i < count; ++i) out[i] = f32();
  }
  bool done() const { return pos_ == size_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > size_) throw std::runtime_error("checkpoint: malformed payload");
  }
  const std::uint8_t* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> serialize_checkpoint(const NetworkSpec& spec,
                                                      const ParameterSet& params,
                                                      const AdamState* optimizer) {
  if (spec.layers.size() != params.layers.size())
    throw std::invalid_argument("checkpoint: spec/params layer count mismatch");
  detail::ByteWriter w;
  w.u8('S');
  w.u8('F');
  w.u8('C');
  w.u8('K');
  w.u16(1);  // format version
  w.u32(static_cast<std::uint32_t>(spec.input.channels));
  w.u32(static_cast<std::uint32_t>(spec.input.height));
  w.u32(static_cast<std::uint32_t>(spec.input.width));
  w.u32(static_cast<std::uint32_t>(spec.class_count));
  w.u32(static_cast<std::uint32_t>(spec.layers.size()));
  for (const LayerSpec& layer : spec.layers) {
    if (const auto* conv = std::get_if<Conv2D>(&layer.op)) {
      w.u8(0);
      w.str(layer.name);
      w.u32(static_cast<std::uint32_t>(conv->in_channels));
      w.u32(static_cast<std::uint32_t>(conv->out_channels));
      w.u32(static_cast<std::uint32_t>(conv->kernel));
      w.u32(static_cast<std::uint32_t>(conv->stride));
      w.u32(static_cast<std::uint32_t>(conv->padding));
    } else if (std::holds_alternative<ReLU>(layer.op)) {
      w.u8(1);
      w.str(layer.name);
    } else if (const auto* pool = std::get_if<MaxPool2D>(&layer.op)) {
      w.u8(2);
      w.str(layer.name);
      w.u32(static_cast<std::uint32_t>(pool->window));
      w.u32(static_cast<std::uint32_t>(pool->stride));
    } else if (std::holds_alternative<Flatten>(layer.op)) {
      w.u8(3);
      w.str(layer.name);
    } else if (const auto* dense = std::get_if<Dense>(&layer.op)) {
      w.u8(4);
      w.str(layer.name);
      w.u32(static_cast<std::uint32_t>(dense->in_features));
      w.u32(static_cast<std::uint32_t>(dense->out_features));
    }
  }
  for (const LayerParams& p : params.layers) {
    if (!p.has_params()) continue;
    w.floats(p.weights.data);
    w.floats(p.bias.data);
  }
  for (const LayerParams& p : params.layers) {
    if (!p.has_params()) continue;
    w.u8(p.weights_trainable ? 1 : 0);
    w.u8(p.bias_trainable ? 1 : 0);
  }
  if (optimizer) {
    w.u8(1);
    w.u64(optimizer->step);
    w.f32(optimizer->config.lr);
    w.f32(optimizer->config.beta1);
    w.f32(optimizer->config.beta2);
    w.f32(optimizer->config.epsilon);
    for (std::size_t i = 0; i < params.layers.size(); ++i) {
      if (!params.layers[i].has_params()) continue;
      w.floats(optimizer->moments1[i].weights.data);
      w.floats(optimizer->moments1[i].bias.data);
      w.floats(optimizer->moments2[i].weights.data);
      w.floats(optimizer->moments2[i].bias.data);
    }
  } else {
    w.u8(0);
  }
  const std::uint32_t crc = crc32_final(crc32_ieee(w.bytes().data(), w.bytes().size()));
  w.u32(crc);
  return std::move(w.bytes());
}

inline void save_checkpoint(const std::filesystem::path& path, const NetworkSpec& spec,
                            const ParameterSet& params, const AdamState* optimizer = nullptr) {
  const std::vector<std::uint8_t> bytes = serialize_checkpoint(spec, params, optimizer);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("checkpoint: write failed for " + path.string());
}

inline Checkpoint parse_checkpoint(const std::vector<std::uint8_t>& bytes,
                                   const std::string& origin) {
  if (bytes.size() < 10) throw std::runtime_error("checkpoint: file too short: " + origin);
  const std::uint32_t stored = static_cast<std::uint32_t>(bytes[bytes.size() - 4]) |
                               (static_cast<std::uint32_t>(bytes[bytes.size() - 3]) << 8) |
                               (static_cast<std::uint32_t>(bytes[bytes.size() - 2]) << 16) |
                               (static_cast<std::uint32_t>(bytes[bytes.size() - 1]) << 24);
  const std::uint32_t computed = crc32_final(crc32_ieee(bytes.data(), bytes.size() - 4));
  if (stored != computed)
    throw std::runtime_error("checkpoint: CRC mismatch (corrupt or truncated): " + origin);

  detail::ByteReader r(bytes.data(), bytes.size() - 4);
  if (r.u8() != 'S' || r.u8() != 'F' || r.u8() != 'C' || r.u8() != 'K')
    throw std::runtime_error("checkpoint: bad magic: " + origin);
  const std::uint16_t version = r.u16();
  if (version != 1)
    throw std::runtime_error("checkpoint: unsupported format version " +
                             std::to_string(version) + ": " + origin);

  Checkpoint ck;
  ck.spec.input.channels = static_cast<int>(r.u32());
  ck.spec.input.height = static_cast<int>(r.u32());
  ck.spec.input.width = static_cast<int>(r.u32());
  ck.spec.class_count = static_cast<int>(r.u32());
  const std::uint32_t layer_count = r.u32();
  for (std::uint32_t i = 0; i < layer_count; ++i) {
    const std::uint8_t kind = r.u8();
    LayerSpec layer;
    layer.name = r.str();
    switch (kind) {
      case 0: {
        Conv2D conv;
        conv.in_channels = static_cast<int>(r.u32());
        conv.out_channels = static_cast<int>(r.u32());
        conv.kernel = static_cast<int>(r.u32());
        conv.stride = static_cast<int>(r.u32());
        conv.padding = static_cast<int>(r.u32());
        layer.op = conv;
        break;
      }
      case 1:
        layer.op = ReLU{};
        break;
      case 2: {
        MaxPool2D pool;
        pool.window = static_cast<int>(r.u32());
        pool.stride = static_cast<int>(r.u32());
        layer.op = pool;
        break;
      }
      case 3:
        layer.op = Flatten{};
        break;
      case 4: {
        Dense dense;
        dense.in_features = static_cast<int>(r.u32());
        dense.out_features = static_cast<int>(r.u32());
        layer.op = dense;
        break;
      }
      default:
        throw std::runtime_error("checkpoint: unknown layer kind: " + origin);
    }
    ck.spec.layers.push_back(std::move(layer));
  }

  ck.params.layers.resize(ck.spec.layers.size());
  for (std::size_t i = 0; i < ck.spec.layers.size(); ++i) {
    LayerParams& p = ck.params.layers[i];
    if (const auto* conv = std::get_if<Conv2D>(&ck.spec.layers[i].op)) {
      const Shape wshape{static_cast<std::size_t>(conv->out_channels),
                         static_cast<std::size_t>(conv->in_channels),
                         static_cast<std::size_t>(conv->kernel),
                         static_cast<std::size_t>(conv->kernel)};
      std::vector<float> values;
      r.floats(values, shape_numel(wshape));
      p.weights = Tensor(wshape, std::move(values));
      std::vector<float> bias;
      r.floats(bias, static_cast<std::size_t>(conv->out_channels));
      p.bias = Tensor({static_cast<std::size_t>(conv->out_channels)}, std::move(bias));
    } else if (const auto* dense = std::get_if<Dense>(&ck.spec.layers[i].op)) {
      const Shape wshape{static_cast<std::size_t>(dense->in_features),
                         static_cast<std::size_t>(dense->out_features)};
      std::vector<float> values;
      r.floats(values, shape_numel(wshape));
      p.weights = Tensor(wshape, std::move(values));
      std::vector<float> bias;
      r.floats(bias, static_cast<std::size_t>(dense->out_features));
      p.bias = Tensor({static_cast<std::size_t>(dense->out_features)}, std::move(bias));
    }
  }
  for (LayerParams& p : ck.params.layers) {
    if (!p.has_params()) continue;
    p.weights_trainable = r.u8() != 0;
    p.bias_trainable = r.u8() != 0;
  }
  if (r.u8() == 1) {
    AdamState state;
    state.step = r.u64();
    state.config.lr = r.f32();
    state.config.beta1 = r.f32();
    state.config.beta2 = r.f32();
    state.config.epsilon = r.f32();
    state.moments1.resize(ck.params.layers.size());
    state.moments2.resize(ck.params.layers.size());
    for (std::size_t i = 0; i < ck.params.layers.size(); ++i) {
      const LayerParams& p = ck.params.layers[i];
      if (!p.has_params()) continue;
      std::vector<float> buf;
      r.floats(buf, p.weights.size());
      state.moments1[i].weights = Tensor(p.weights.shape, std::move(buf));
      r.floats(buf, p.bias.size());
      state.moments1[i].bias = Tensor(p.bias.shape, std::move(buf));
      r.floats(buf, p.weights.size());
      state.moments2[i].weights = Tensor(p.weights.shape, std::move(buf));
      r.floats(buf, p.bias.size());
      state.moments2[i].bias = Tensor(p.bias.shape, std::move(buf));
    }
    ck.optimizer = std::move(state);
  }
  if (!r.done()) throw std::runtime_error("checkpoint: trailing bytes: " + origin);
  propagate_shapes(ck.spec);  // descriptor must describe a coherent stack
  return ck;
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes, path.string());
}

}  // namespace sessionfit
