#pragma once

// Parameter ownership shared by every network. Layers refer to their
// parameters by slot index, so a Module can be deep-copied by cloning leaves.

#include <cmath>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "agcgan/conv.hpp"
#include "agcgan/ops.hpp"
#include "agcgan/random.hpp"
#include "agcgan/tensor.hpp"

namespace agc::nn {

enum class Mode { kTrain, kEval };

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
};

struct ConvSlot {
  std::size_t weight, bias;
  std::size_t stride, padding;
};

struct LinearSlot {
  std::size_t weight, bias;  // weight stored (in, out)
};

template <typename T>
class Module {
 public:
  const std::vector<NamedParam<T>>& named_parameters() const { return params_; }

  std::vector<Tensor<T>> parameters() const {
    std::vector<Tensor<T>> out;
    out.reserve(params_.size());
    for (const auto& p : params_) out.push_back(p.tensor);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
  }

  Tensor<T>& parameter(const std::string& name) {
    for (auto& p : params_)
      if (p.name == name) return p.tensor;
    throw std::out_of_range("no parameter named '" + name + "'");
  }

  bool frozen() const { return frozen_; }

  void set_frozen(bool frozen) {
    frozen_ = frozen;
    for (auto& p : params_) p.tensor.set_requires_grad(!frozen);
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  // Independent copy: same values, fresh leaves.
  void detach_parameters() {
    for (auto& p : params_) p.tensor = p.tensor.clone_leaf(!frozen_);
  }

 protected:
  std::size_t add_param(std::string name, Shape shape, double stddev, Rng& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<T> values(numel_of(shape));
    if (stddev > 0.0)
      for (auto& v : values) v = static_cast<T>(dist(rng));
    params_.push_back({std::move(name), Tensor<T>(std::move(shape), std::move(values), !frozen_)});
    return params_.size() - 1;
  }

  ConvSlot add_conv(const std::string& name, std::size_t cin, std::size_t cout, std::size_t k,
                    std::size_t stride, std::size_t padding, double stddev, Rng& rng) {
    const auto w = add_param(name + ".weight", Shape{cout, cin, k, k}, stddev, rng);
    const auto b = add_param(name + ".bias", Shape{cout}, 0.0, rng);
    return {w, b, stride, padding};
  }

  ConvSlot add_transposed_conv(const std::string& name, std::size_t cin, std::size_t cout,
                               std::size_t k, std::size_t stride, std::size_t padding,
                               double stddev, Rng& rng) {
    const auto w = add_param(name + ".weight", Shape{cin, cout, k, k}, stddev, rng);
    const auto b = add_param(name + ".bias", Shape{cout}, 0.0, rng);
    return {w, b, stride, padding};
  }

  LinearSlot add_linear(const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
    const auto w = add_param(name + ".weight", Shape{in, out}, 1.0 / std::sqrt(double(in)), rng);
    const auto b = add_param(name + ".bias", Shape{out}, 0.0, rng);
    return {w, b};
  }

  const Tensor<T>& slot(std::size_t i) const { return params_[i].tensor; }

  Tensor<T> conv(const ConvSlot& s, const Tensor<T>& x) const {
    return bias_add(conv2d(x, slot(s.weight), s.stride, s.padding), slot(s.bias));
  }

  Tensor<T> tconv(const ConvSlot& s, const Tensor<T>& x) const {
    return bias_add(transposed_conv2d(x, slot(s.weight), s.stride, s.padding), slot(s.bias));
  }

  Tensor<T> linear(const LinearSlot& s, const Tensor<T>& x) const {
    return bias_add(matmul(x, slot(s.weight)), slot(s.bias));
  }

  std::vector<NamedParam<T>> params_;
  bool frozen_ = false;
};

}  // namespace agc::nn
