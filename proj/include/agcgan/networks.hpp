#pragma once

// The four network families of the coupled model:
//
//   Generator            U-net G(z|y) with a bottleneck embedding z(.) and T
//                        attribute heads. Two instances: Vis-GAN (1-channel
//                        condition) and Pol-GAN (3-channel S0/S1/S2 condition).
//   Discriminator        conditional patch discriminator D(x|y).
//   FeatureNet           frozen conv stack V used by the perceptual loss.
//   AttributePredictor   conv trunk + T sigmoid outputs (A), pretrained apart
//                        from the coupled model and frozen while it trains.
//
// Default generator (base 32, depth 4, 64x64 input), k4 s2 p1 everywhere:
//
//   enc0  conv  Cin ->  32   64->32  relu              (no norm)
//   enc1  conv   32 ->  64   32->16  inorm relu
//   enc2  conv   64 -> 128   16->8   inorm relu
//   enc3  conv  128 -> 256    8->4   relu              (bottleneck, no norm)
//   dec0  tconv 256 -> 128    4->8   inorm relu drop   cat enc2 -> 256
//   dec1  tconv 256 ->  64    8->16  inorm relu drop   cat enc1 -> 128
//   dec2  tconv 128 ->  32   16->32  inorm relu        cat enc0 ->  64
//   out   tconv  64 ->   1   32->64  tanh
//
//   z(.)  = linear(global_avg_pool(enc3)) : 256 -> d_z
//   head t: logit_t = f_t(relu(w_t z)),  w_t : d_z -> head_width, f_t : head_width -> 1
//
// Default discriminator on a 64x64 pair:
//
//   b0  conv Cin -> 32  k4 s2 p1  64->32  leaky(0.2)
//   b1  conv  32 -> 64  k4 s2 p1  32->16  inorm leaky(0.2)
//   b2  conv  64 ->128  k4 s2 p1  16->8   inorm leaky(0.2)
//   out conv 128 ->  1  k3 s1 p0   8->6   patch logits
//
// Each logit sees a 38x38 receptive field: 1 + 2*8 + 3*4 + 3*2 + 3*1.

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "agcgan/module.hpp"

namespace agc::nn {

struct GeneratorConfig {
  std::size_t in_channels = 1;
  std::size_t base_width = 32;
  std::size_t depth = 4;
  std::size_t embed_dim = 128;
  std::size_t attributes = 10;
  std::size_t head_width = 16;
  double dropout = 0.5;
  std::size_t dropout_blocks = 2;  // leading decoder blocks with dropout
  bool instance_norm = true;
  double init_std = 0.02;
};

template <typename T>
struct GeneratorOutput {
  Tensor<T> synth;        // (N, 1, H, W) in [-1, 1]
  Tensor<T> embedding;    // (N, d_z)
  Tensor<T> attr_logits;  // (N, T)
};

template <typename T>
class Generator : public Module<T> {
 public:
  Generator() = default;

  Generator(const GeneratorConfig& config, Rng& rng) : config_(config) {
    if (config.depth < 2) throw std::invalid_argument("generator: depth must be >= 2");
    if (config.attributes == 0) throw std::invalid_argument("generator: need at least one attribute head");
    const std::size_t k = 4, s = 2, p = 1;
    std::size_t cin = config.in_channels;
    for (std::size_t l = 0; l < config.depth; ++l) {
      const std::size_t cout = width(l);
      enc_.push_back(this->add_conv("enc" + std::to_string(l), cin, cout, k, s, p, config.init_std, rng));
      cin = cout;
    }
    for (std::size_t l = 0; l + 1 < config.depth; ++l) {
      const std::size_t level = config.depth - 2 - l;  // encoder level of the skip partner
      const std::size_t cout = width(level);
      dec_.push_back(this->add_transposed_conv("dec" + std::to_string(l), cin, cout, k, s, p,
                                               config.init_std, rng));
      cin = 2 * cout;
    }
    out_ = this->add_transposed_conv("out", cin, 1, k, s, p, config.init_std, rng);
    embed_ = this->add_linear("embed", width(config.depth - 1), config.embed_dim, rng);
    for (std::size_t t = 0; t < config.attributes; ++t) {
      head_hidden_.push_back(this->add_linear("head" + std::to_string(t) + ".w", config.embed_dim,
                                              config.head_width, rng));
      head_logit_.push_back(this->add_linear("head" + std::to_string(t) + ".f", config.head_width, 1, rng));
    }
  }

  const GeneratorConfig& config() const { return config_; }

  std::size_t width(std::size_t level) const { return config_.base_width << level; }

  // dropout_seed drives the train-mode dropout masks; eval mode is deterministic.
  GeneratorOutput<T> forward(const Tensor<T>& condition, Mode mode, std::uint64_t dropout_seed) const {
    if (condition.rank() != 4 || condition.dim(1) != config_.in_channels) {
      throw ShapeError("generator: expected (N, " + std::to_string(config_.in_channels) +
                       ", H, W) condition, got " + shape_str(condition.shape()));
    }
    const std::size_t unit = std::size_t{1} << config_.depth;
    if (condition.dim(2) % unit != 0 || condition.dim(3) % unit != 0) {
      throw ShapeError("generator: spatial dims " + shape_str(condition.shape()) +
                       " must be multiples of " + std::to_string(unit));
    }
    const std::size_t last = config_.depth - 1;
    std::vector<Tensor<T>> skips;
    Tensor<T> h = condition;
    for (std::size_t l = 0; l < config_.depth; ++l) {
      h = this->conv(enc_[l], h);
      if (config_.instance_norm && l != 0 && l != last) h = instance_norm(h);
      h = relu(h);
      skips.push_back(h);
    }
    const Tensor<T> bottleneck = h;

    Rng rng(dropout_seed);
    for (std::size_t l = 0; l < dec_.size(); ++l) {
      h = this->tconv(dec_[l], h);
      if (config_.instance_norm) h = instance_norm(h);
      h = relu(h);
      if (mode == Mode::kTrain && l < config_.dropout_blocks && config_.dropout > 0.0) {
        h = dropout(h, config_.dropout, rng);
      }
      h = concat_channels(h, skips[config_.depth - 2 - l]);
    }
    Tensor<T> synth = tanh(this->tconv(out_, h));

    Tensor<T> z = this->linear(embed_, global_avg_pool(bottleneck));
    Tensor<T> logits;
    for (std::size_t t = 0; t < head_hidden_.size(); ++t) {
      Tensor<T> f = this->linear(head_logit_[t], relu(this->linear(head_hidden_[t], z)));
      logits = t == 0 ? f : concat_channels(logits, f);
    }
    return {synth, z, logits};
  }

 private:
  GeneratorConfig config_;
  std::vector<ConvSlot> enc_, dec_;
  ConvSlot out_{};
  LinearSlot embed_{};
  std::vector<LinearSlot> head_hidden_, head_logit_;
};

struct DiscriminatorConfig {
  std::size_t condition_channels = 1;
  std::size_t base_width = 32;
  std::size_t blocks = 3;
  std::size_t final_kernel = 3;
  double slope = 0.2;
  bool instance_norm = true;
  double init_std = 0.02;
};

template <typename T>
class Discriminator : public Module<T> {
 public:
  Discriminator() = default;

  Discriminator(const DiscriminatorConfig& config, Rng& rng) : config_(config) {
    std::size_t cin = config.condition_channels + 1;
    for (std::size_t b = 0; b < config.blocks; ++b) {
      const std::size_t cout = config.base_width << b;
      blocks_.push_back(this->add_conv("block" + std::to_string(b), cin, cout, 4, 2, 1, config.init_std, rng));
      cin = cout;
    }
    out_ = this->add_conv("out", cin, 1, config.final_kernel, 1, 0, config.init_std, rng);
  }

  const DiscriminatorConfig& config() const { return config_; }

  // Patch logit map side length for a square input of side n.
  std::size_t output_size(std::size_t n) const {
    for (std::size_t b = 0; b < config_.blocks; ++b) n = conv_out_size(n, 4, 2, 1);
    return conv_out_size(n, config_.final_kernel, 1, 0);
  }

  std::size_t receptive_field() const {
    std::size_t rf = config_.final_kernel;
    for (std::size_t b = config_.blocks; b-- > 0;) rf = (rf - 1) * 2 + 4;
    return rf;
  }

  Tensor<T> forward(const Tensor<T>& condition, const Tensor<T>& candidate) const {
    if (condition.rank() != 4 || candidate.rank() != 4 || condition.dim(0) != candidate.dim(0) ||
        condition.dim(2) != candidate.dim(2) || condition.dim(3) != candidate.dim(3)) {
      throw ShapeError("discriminator: condition " + shape_str(condition.shape()) +
                       " and candidate " + shape_str(candidate.shape()) + " must share N, H, W");
    }
    if (condition.dim(1) != config_.condition_channels || candidate.dim(1) != 1) {
      throw ShapeError("discriminator: expected " + std::to_string(config_.condition_channels) +
                       "-channel condition and 1-channel candidate");
    }
    Tensor<T> h = concat_channels(condition, candidate);
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      h = this->conv(blocks_[b], h);
      if (config_.instance_norm && b != 0) h = instance_norm(h);
      h = leaky_relu(h, static_cast<T>(config_.slope));
    }
    return this->conv(out_, h);
  }

 private:
  DiscriminatorConfig config_;
  std::vector<ConvSlot> blocks_;
  ConvSlot out_{};
};

struct AttributePredictorConfig {
  std::size_t in_channels = 1;
  std::size_t input_size = 64;
  std::vector<std::size_t> widths = {16, 32, 64, 64};
  std::size_t attributes = 10;
};

// Trunk: one k3 s1 p1 conv then k4 s2 p1 convs, all relu; the final feature
// map is flattened (attributes are spatially localized) and mapped linearly to
// T logits; sigmoid.
template <typename T>
class AttributePredictor : public Module<T> {
 public:
  AttributePredictor() = default;

  AttributePredictor(const AttributePredictorConfig& config, Rng& rng) : config_(config) {
    if (config.widths.empty()) throw std::invalid_argument("attribute predictor: empty trunk");
    std::size_t cin = config.in_channels;
    for (std::size_t i = 0; i < config.widths.size(); ++i) {
      const std::size_t k = i == 0 ? 3 : 4, s = i == 0 ? 1 : 2;
      const double he = std::sqrt(2.0 / double(cin * k * k));
      trunk_.push_back(this->add_conv("trunk" + std::to_string(i), cin, config.widths[i], k, s, 1, he, rng));
      cin = config.widths[i];
    }
    if (config.input_size >> (config.widths.size() - 1) == 0 ||
        (config.input_size >> (config.widths.size() - 1)) << (config.widths.size() - 1) != config.input_size) {
      throw std::invalid_argument("attribute predictor: input size must be divisible by 2^(blocks - 1)");
    }
    const std::size_t side = config.input_size >> (config.widths.size() - 1);
    head_ = this->add_linear("head", cin * side * side, config.attributes, rng);
    initialized_ = true;
  }

  const AttributePredictorConfig& config() const { return config_; }
  bool initialized() const { return initialized_; }

  Tensor<T> trunk(const Tensor<T>& image, std::size_t blocks) const {
    Tensor<T> h = image;
    for (std::size_t i = 0; i < blocks && i < trunk_.size(); ++i) h = relu(this->conv(trunk_[i], h));
    return h;
  }

  Tensor<T> logits(const Tensor<T>& image) const {
    if (!initialized_) throw std::logic_error("attribute predictor: not initialized");
    if (image.rank() != 4 || image.dim(1) != config_.in_channels || image.dim(2) != config_.input_size ||
        image.dim(3) != config_.input_size) {
      throw ShapeError("attribute predictor: expected (N, " + std::to_string(config_.in_channels) + ", " +
                       std::to_string(config_.input_size) + ", " + std::to_string(config_.input_size) +
                       ") input, got " + shape_str(image.shape()));
    }
    const auto f = trunk(image, trunk_.size());
    return this->linear(head_, reshape(f, Shape{f.dim(0), f.numel() / f.dim(0)}));
  }

  // T probabilities per image, each strictly inside (0, 1).
  Tensor<T> forward(const Tensor<T>& image) const { return sigmoid(logits(image)); }

  void zero_head() {
    for (auto idx : {head_.weight, head_.bias}) {
      auto d = this->params_[idx].tensor.mutable_data();
      std::fill(d.begin(), d.end(), T(0));
    }
  }

  // Copy with a wider first conv: channel 0 keeps this network's weights,
  // additional input channels start at zero.
  AttributePredictor expand_input_channels(std::size_t channels) const {
    if (channels < config_.in_channels) throw std::invalid_argument("expand_input_channels: cannot shrink");
    AttributePredictorConfig cfg = config_;
    cfg.in_channels = channels;
    Rng rng(0);
    AttributePredictor out(cfg, rng);
    for (std::size_t i = 0; i < this->params_.size(); ++i) {
      const auto& src = this->params_[i].tensor;
      auto dst = out.params_[i].tensor.mutable_data();
      if (i == trunk_[0].weight) {
        std::fill(dst.begin(), dst.end(), T(0));
        const std::size_t cout = src.dim(0), kk = src.dim(2) * src.dim(3), cin = src.dim(1);
        for (std::size_t o = 0; o < cout; ++o)
          for (std::size_t c = 0; c < cin; ++c)
            for (std::size_t q = 0; q < kk; ++q)
              dst[(o * channels + c) * kk + q] = src.data()[(o * cin + c) * kk + q];
      } else {
        std::copy(src.data().begin(), src.data().end(), dst.begin());
      }
    }
    return out;
  }

  std::size_t trunk_weight_slot(std::size_t i) const { return trunk_.at(i).weight; }
  std::size_t trunk_bias_slot(std::size_t i) const { return trunk_.at(i).bias; }

 private:
  AttributePredictorConfig config_;
  std::vector<ConvSlot> trunk_;
  LinearSlot head_{};
  bool initialized_ = false;
};

struct FeatureNetConfig {
  std::size_t in_channels = 1;
  std::vector<std::size_t> widths = {16, 32, 64};
};

// Same block layout as the first widths.size() blocks of AttributePredictor,
// so its weights can be taken from a pretrained predictor trunk.
template <typename T>
class FeatureNet : public Module<T> {
 public:
  FeatureNet() = default;

  FeatureNet(const FeatureNetConfig& config, Rng& rng) : config_(config) {
    std::size_t cin = config.in_channels;
    for (std::size_t i = 0; i < config.widths.size(); ++i) {
      const std::size_t k = i == 0 ? 3 : 4, s = i == 0 ? 1 : 2;
      const double he = std::sqrt(2.0 / double(cin * k * k));
      blocks_.push_back(this->add_conv("block" + std::to_string(i), cin, config.widths[i], k, s, 1, he, rng));
      cin = config.widths[i];
    }
    this->set_frozen(true);
    initialized_ = true;
  }

  const FeatureNetConfig& config() const { return config_; }
  bool initialized() const { return initialized_; }

  void copy_trunk_from(const AttributePredictor<T>& a) {
    const auto& src = a.named_parameters();
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      for (auto [dst_slot, src_slot] : {std::pair{blocks_[i].weight, a.trunk_weight_slot(i)},
                                        std::pair{blocks_[i].bias, a.trunk_bias_slot(i)}}) {
        const auto& s = src[src_slot].tensor;
        auto& d = this->params_[dst_slot].tensor;
        if (s.shape() != d.shape()) {
          throw ShapeError("feature net: trunk block " + std::to_string(i) + " shape " +
                           shape_str(s.shape()) + " does not match " + shape_str(d.shape()));
        }
        std::copy(s.data().begin(), s.data().end(), d.mutable_data().begin());
      }
    }
  }

  // (N, C_p, H_p, W_p) feature map.
  Tensor<T> forward(const Tensor<T>& image) const {
    if (!initialized_) throw std::logic_error("feature net: not initialized");
    Tensor<T> h = image;
    for (const auto& b : blocks_) h = relu(this->conv(b, h));
    return h;
  }

 private:
  FeatureNetConfig config_;
  std::vector<ConvSlot> blocks_;
  bool initialized_ = false;
};

}  // namespace agc::nn
