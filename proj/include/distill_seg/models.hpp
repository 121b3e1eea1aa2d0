#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <string>
#include <utility>
#include <vector>

#include "distill_seg/error.hpp"
#include "distill_seg/ops.hpp"
#include "distill_seg/rng.hpp"
#include "distill_seg/tensor.hpp"

namespace distill_seg {

struct NamedParam {
  std::string name;
  Tensor value;
};

// Ordered, uniquely named parameter set. Order is construction order, which
// also fixes the RNG stream of each tensor.
class ParamSet {
 public:
  Tensor& add(std::string name, Shape shape) {
    for (const auto& p : params_)
      if (p.name == name) fail_validation("duplicate parameter name ", name);
    params_.push_back({std::move(name), Tensor::zeros(std::move(shape), true)});
    return params_.back().value;
  }

  std::vector<NamedParam>& entries() noexcept { return params_; }
  const std::vector<NamedParam>& entries() const noexcept { return params_; }

  std::vector<Tensor> tensors() const {
    std::vector<Tensor> out;
    for (const auto& p : params_) out.push_back(p.value);
    return out;
  }

  const NamedParam* find(const std::string& name) const {
    for (const auto& p : params_)
      if (p.name == name) return &p;
    return nullptr;
  }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.numel();
    return n;
  }

  // FNV-1a over the raw parameter bytes; cheap identity check for tests and logs.
  std::uint64_t checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& p : params_)
      for (float v : p.value.data()) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, sizeof bits);
        for (int b = 0; b < 4; ++b) {
          h ^= (bits >> (8 * b)) & 0xFF;
          h *= 0x100000001b3ULL;
        }
      }
    return h;
  }

 private:
  std::vector<NamedParam> params_;
};

namespace detail {

// He-normal weights (std = sqrt(2 / fan_in)) and zero biases.
inline void he_init(ParamSet& params, std::uint64_t seed) {
  std::uint64_t stream = 0;
  for (auto& p : params.entries()) {
    ++stream;
    if (p.value.rank() == 1) continue;
    std::int64_t fan_in = 1;
    for (std::size_t d = 1; d < p.value.rank(); ++d) fan_in *= p.value.dim(d);
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    CounterRng rng(seed, stream);
    auto data = p.value.data();
    for (std::size_t i = 0; i < data.size(); ++i)
      data[i] = static_cast<float>(stddev * rng.normal(i));
  }
}

struct ConvLayer {
  Tensor weight, bias;
  std::int64_t padding = 1;

  ConvLayer() = default;
  ConvLayer(ParamSet& params, const std::string& name, std::int64_t c_in, std::int64_t c_out,
            std::int64_t k)
      : weight(params.add(name + ".weight", {c_out, c_in, k, k})),
        bias(params.add(name + ".bias", {c_out})),
        padding(k / 2) {}

  Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias, 1, padding); }
};

struct DoubleConv {
  ConvLayer first, second;

  DoubleConv() = default;
  DoubleConv(ParamSet& params, const std::string& name, std::int64_t c_in, std::int64_t c_out)
      : first(params, name + ".conv1", c_in, c_out, 3),
        second(params, name + ".conv2", c_out, c_out, 3) {}

  Tensor operator()(const Tensor& x) const { return relu(second(relu(first(x)))); }
};

}  // namespace detail

struct SegModelConfig {
  std::int64_t in_channels = 1;
  std::int64_t channels_base = 8;
  std::int64_t depth = 2;
  std::int64_t num_classes = 4;

  std::string describe() const {
    return detail::concat("segmodel/v1 in=", in_channels, " base=", channels_base,
                          " depth=", depth, " classes=", num_classes);
  }
  std::string arch_hash() const { return hex64(fnv1a(describe())); }
};

// U-Net: `depth` encoder stages (double conv, then 2x2 max pool) with
// doubling widths, a double-conv bottleneck, mirrored decoder stages
// (nearest 2x upsample, concat with the same-resolution skip, double conv)
// and a 1x1 head producing one logit per class.
class SegModel {
 public:
  explicit SegModel(SegModelConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    if (cfg.depth < 1) fail_validation("seg model depth must be >= 1, got ", cfg.depth);
    if (cfg.channels_base < 1) fail_validation("seg model channels_base must be >= 1");
    if (cfg.num_classes < 2) fail_validation("seg model needs at least 2 classes");
    std::int64_t c_prev = cfg.in_channels;
    for (std::int64_t s = 0; s < cfg.depth; ++s) {
      const std::int64_t c = cfg.channels_base << s;
      encoder_.emplace_back(params_, "enc" + std::to_string(s), c_prev, c);
      c_prev = c;
    }
    const std::int64_t c_bottom = cfg.channels_base << cfg.depth;
    bottleneck_ = detail::DoubleConv(params_, "bottleneck", c_prev, c_bottom);
    c_prev = c_bottom;
    for (std::int64_t s = cfg.depth - 1; s >= 0; --s) {
      const std::int64_t c = cfg.channels_base << s;
      decoder_.emplace_back(params_, "dec" + std::to_string(s), c_prev + c, c);
      c_prev = c;
    }
    head_ = detail::ConvLayer(params_, "head", c_prev, cfg.num_classes, 1);
    detail::he_init(params_, seed);
  }

  SegModel(const SegModel&) = delete;
  SegModel& operator=(const SegModel&) = delete;
  SegModel(SegModel&&) = default;
  SegModel& operator=(SegModel&&) = default;

  const SegModelConfig& config() const noexcept { return cfg_; }
  std::string arch_hash() const { return cfg_.arch_hash(); }
  ParamSet& params() noexcept { return params_; }
  const ParamSet& params() const noexcept { return params_; }

  std::int64_t required_divisor() const noexcept { return std::int64_t{1} << cfg_.depth; }

  // [N, in_channels, H, W] -> logits [N, K, H, W]
  Tensor forward(const Tensor& x) const {
    if (x.rank() != 4 || x.dim(1) != cfg_.in_channels)
      fail_validation("seg model expects input [N,", cfg_.in_channels, ",H,W], got ",
                      shape_str(x.shape()));
    const std::int64_t div = required_divisor();
    if (x.dim(2) % div != 0 || x.dim(3) % div != 0)
      fail_validation("seg model of depth ", cfg_.depth, " needs spatial extents divisible by ",
                      div, ", got ", x.dim(2), "x", x.dim(3));
    std::vector<Tensor> skips;
    Tensor h = x;
    for (const auto& stage : encoder_) {
      h = stage(h);
      skips.push_back(h);
      h = max_pool2d(h, 2);
    }
    h = bottleneck_(h);
    for (std::size_t i = 0; i < decoder_.size(); ++i) {
      h = upsample_nearest_2x(h);
      h = concat_channels(h, skips[skips.size() - 1 - i]);
      h = decoder_[i](h);
    }
    return head_(h);
  }

 private:
  SegModelConfig cfg_;
  ParamSet params_;
  std::vector<detail::DoubleConv> encoder_;
  detail::DoubleConv bottleneck_;
  std::vector<detail::DoubleConv> decoder_;
  detail::ConvLayer head_;
};

struct QualityModelConfig {
  std::int64_t num_classes = 4;
  std::int64_t width = 8;

  std::int64_t in_channels() const noexcept { return 1 + num_classes; }
  std::string describe() const {
    return detail::concat("quality/v1 classes=", num_classes, " width=", width);
  }
  std::string arch_hash() const { return hex64(fnv1a(describe())); }
};

// Binary pseudo-label quality classifier over an image slice stacked with
// one binary channel per class (background included).
class QualityModel {
 public:
  QualityModel(QualityModelConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    if (cfg.num_classes < 2) fail_validation("quality model needs K >= 2, got ", cfg.num_classes);
    const std::int64_t w = cfg.width;
    conv1_ = detail::ConvLayer(params_, "trunk.conv1", cfg.in_channels(), w, 3);
    conv2_ = detail::ConvLayer(params_, "trunk.conv2", w, 2 * w, 3);
    conv3_ = detail::ConvLayer(params_, "trunk.conv3", 2 * w, 2 * w, 3);
    fc_weight_ = params_.add("head.weight", {1, 2 * w});
    fc_bias_ = params_.add("head.bias", {1});
    detail::he_init(params_, seed);
  }

  QualityModel(const QualityModel&) = delete;
  QualityModel& operator=(const QualityModel&) = delete;
  QualityModel(QualityModel&&) = default;
  QualityModel& operator=(QualityModel&&) = default;

  const QualityModelConfig& config() const noexcept { return cfg_; }
  std::string arch_hash() const { return cfg_.arch_hash(); }
  ParamSet& params() noexcept { return params_; }
  const ParamSet& params() const noexcept { return params_; }

  // [N, 1+K, H, W] -> [N, 1] logits; sigmoid gives P(pseudo-label is good).
  Tensor forward(const Tensor& x) const {
    if (x.rank() != 4 || x.dim(1) != cfg_.in_channels())
      fail_validation("quality model expects input [N,", cfg_.in_channels(), ",H,W], got ",
                      shape_str(x.shape()));
    if (x.dim(2) % 4 != 0 || x.dim(3) % 4 != 0)
      fail_validation("quality model needs spatial extents divisible by 4, got ", x.dim(2), "x",
                      x.dim(3));
    Tensor h = max_pool2d(relu(conv1_(x)), 2);
    h = max_pool2d(relu(conv2_(h)), 2);
    h = relu(conv3_(h));
    return linear(global_avg_pool(h), fc_weight_, fc_bias_);
  }

 private:
  QualityModelConfig cfg_;
  ParamSet params_;
  detail::ConvLayer conv1_, conv2_, conv3_;
  Tensor fc_weight_, fc_bias_;
};

}  // namespace distill_seg
