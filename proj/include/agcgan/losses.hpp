#pragma once

// Loss terms of the coupled objective, each a differentiable scalar.
//
//   L_T = L_cpl + l1 L_E + l2 L_GAN + l3 L_a + l4 L_Ppol + l5 L_pa
//
// GAN terms work on discriminator logits: -log sigmoid(x) = softplus(-x) and
// -log(1 - sigmoid(x)) = softplus(x), which never overflow.

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "agcgan/networks.hpp"
#include "agcgan/ops.hpp"

namespace agc::loss {

// y_cont: 0 for a genuine pair (same identity), 1 for an impostor pair.
enum class PairLabel : std::uint8_t { kGenuine = 0, kImpostor = 1 };

inline PairLabel pair_label_for(std::uint32_t identity_a, std::uint32_t identity_b) {
  return identity_a == identity_b ? PairLabel::kGenuine : PairLabel::kImpostor;
}

enum class Term : std::size_t {
  kCoupling = 0,
  kReconstruction,
  kAdversarial,
  kAttribute,
  kPerceptual,
  kPerceptualAttribute,
};
inline constexpr std::size_t kTermCount = 6;
inline constexpr std::array<const char*, kTermCount> kTermNames = {"L_cpl", "L_E",    "L_GAN",
                                                                   "L_a",   "L_Ppol", "L_pa"};

struct LossWeights {
  double lambda1 = 1.0;  // L_E
  double lambda2 = 1.0;  // L_GAN
  double lambda3 = 1.0;  // L_a
  double lambda4 = 0.5;  // L_Ppol
  double lambda5 = 0.5;  // L_pa
  double margin = 1.0;   // contrastive hinge on squared distance

  // Weight of each term in Term order; the coupling term is fixed at 1.
  std::array<double, kTermCount> as_array() const {
    return {1.0, lambda1, lambda2, lambda3, lambda4, lambda5};
  }

  void validate() const {
    for (double w : as_array()) {
      if (!(w >= 0.0)) throw std::invalid_argument("loss weights must be nonnegative");
    }
    if (!(margin > 0.0)) throw std::invalid_argument("contrastive margin must be positive");
  }
};

enum class ReconstructionMode { kMean, kSum };

template <typename T>
Tensor<T> labels_tensor(std::span<const PairLabel> labels) {
  std::vector<T> y(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) y[i] = static_cast<T>(labels[i]);
  return Tensor<T>(Shape{labels.size()}, std::move(y));
}

namespace detail {

// Per-pair contrastive losses, shape (N).
template <typename T>
Tensor<T> contrastive_terms(const Tensor<T>& z1, const Tensor<T>& z2, std::span<const PairLabel> labels,
                            double margin) {
  if (z1.shape() != z2.shape() || z1.rank() != 2) {
    throw ShapeError("contrastive loss: embeddings must share shape (N, d), got " + shape_str(z1.shape()) +
                     " and " + shape_str(z2.shape()));
  }
  if (labels.size() != z1.dim(0)) {
    throw ShapeError("contrastive loss: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(z1.dim(0)) + " pairs");
  }
  if (!(margin > 0.0)) throw std::invalid_argument("contrastive loss: margin must be positive");
  const std::size_t n = labels.size();
  Tensor<T> d2 = sum_rows(square(sub(z1, z2)));
  Tensor<T> y = labels_tensor<T>(labels);
  std::vector<T> not_y(n);
  for (std::size_t i = 0; i < n; ++i) not_y[i] = T(1) - y[i];
  Tensor<T> genuine = mul(Tensor<T>(Shape{n}, std::move(not_y)), scale(d2, T(0.5)));
  Tensor<T> hinge = relu(add_scalar(neg(d2), static_cast<T>(margin)));
  Tensor<T> impostor = mul(y, scale(hinge, T(0.5)));
  return add(genuine, impostor);
}

}  // namespace detail

// genuine: 1/2 |z1 - z2|^2, impostor: 1/2 max(0, m - |z1 - z2|^2).
template <typename T>
Tensor<T> contrastive_pair_loss(const Tensor<T>& z1, const Tensor<T>& z2, PairLabel label, double margin) {
  if (z1.shape() != z2.shape()) {
    throw ShapeError("contrastive loss: dimension mismatch " + shape_str(z1.shape()) + " vs " +
                     shape_str(z2.shape()));
  }
  const Shape row{1, z1.numel()};
  const std::array<PairLabel, 1> l{label};
  return reshape(detail::contrastive_terms(reshape(z1, row), reshape(z2, row), l, margin), Shape{1});
}

// Mean of the per-pair contrastive losses over a sampled batch. The sum runs
// in value order, so permuting the batch never changes the result.
template <typename T>
Tensor<T> coupling_loss(const Tensor<T>& z1, const Tensor<T>& z2, std::span<const PairLabel> labels,
                        double margin) {
  if (labels.empty()) throw std::invalid_argument("coupling loss: empty batch");
  return mean_order_invariant(detail::contrastive_terms(z1, z2, labels, margin));
}

// Sum over T attributes of binary cross-entropy on logits, averaged over the batch.
template <typename T>
Tensor<T> attribute_loss(const Tensor<T>& logits, const Tensor<T>& labels) {
  if (logits.shape() != labels.shape() || logits.rank() != 2) {
    throw ShapeError("attribute loss: logits " + shape_str(logits.shape()) + " and labels " +
                     shape_str(labels.shape()) + " must both be (N, T)");
  }
  // softplus(x) - x y = -[y log s(x) + (1 - y) log(1 - s(x))]
  Tensor<T> per = sub(softplus(logits), mul(logits, labels.detach()));
  return scale(sum(per), T(1) / static_cast<T>(logits.dim(0)));
}

template <typename T>
Tensor<T> discriminator_loss(const Tensor<T>& real_logits, const Tensor<T>& fake_logits) {
  if (real_logits.shape() != fake_logits.shape()) {
    throw ShapeError("discriminator loss: real " + shape_str(real_logits.shape()) + " vs fake " +
                     shape_str(fake_logits.shape()));
  }
  return add(mean(softplus(neg(real_logits))), mean(softplus(fake_logits)));
}

// Non-saturating generator objective: mean of -log sigmoid(fake).
template <typename T>
Tensor<T> generator_adversarial_loss(const Tensor<T>& fake_logits) {
  return mean(softplus(neg(fake_logits)));
}

template <typename T>
Tensor<T> reconstruction_loss(const Tensor<T>& synth, const Tensor<T>& target,
                              ReconstructionMode mode = ReconstructionMode::kMean) {
  if (synth.shape() != target.shape()) {
    throw ShapeError("reconstruction loss: synth " + shape_str(synth.shape()) + " vs target " +
                     shape_str(target.shape()));
  }
  Tensor<T> sq = square(sub(synth, target));
  return mode == ReconstructionMode::kMean ? mean(sq) : sum(sq);
}

// Mean absolute difference of V features. V must be frozen; the target
// branch is evaluated on a detached copy so only synth receives gradient.
template <typename T>
Tensor<T> perceptual_loss(const Tensor<T>& synth, const Tensor<T>& target, const nn::FeatureNet<T>& v) {
  if (!v.initialized()) throw std::logic_error("perceptual loss: feature network is uninitialized");
  if (!v.frozen()) throw std::logic_error("perceptual loss: feature network must be frozen");
  if (synth.shape() != target.shape()) {
    throw ShapeError("perceptual loss: synth " + shape_str(synth.shape()) + " vs target " +
                     shape_str(target.shape()));
  }
  return mean(abs(sub(v.forward(synth), v.forward(target.detach()))));
}

// Squared distance between A's attribute probabilities on a synthesis and on
// its target, per image, averaged over the batch.
template <typename T>
Tensor<T> attribute_distance(const Tensor<T>& synth, const Tensor<T>& target,
                             const nn::AttributePredictor<T>& a) {
  if (!a.initialized()) throw std::logic_error("perceptual attribute loss: predictor is uninitialized");
  if (!a.frozen()) throw std::logic_error("perceptual attribute loss: predictor must be frozen");
  Tensor<T> diff = sub(a.forward(synth), a.forward(target.detach()));
  return scale(sum(square(diff)), T(1) / static_cast<T>(synth.dim(0)));
}

// L_pa = |A(G_vis) - A(x_vis)|^2 + |A(G_pol) - A(x_pol)|^2
template <typename T>
Tensor<T> perceptual_attribute_loss(const Tensor<T>& synth_vis, const Tensor<T>& target_vis,
                                    const Tensor<T>& synth_pol, const Tensor<T>& target_pol,
                                    const nn::AttributePredictor<T>& a) {
  return add(attribute_distance(synth_vis, target_vis, a), attribute_distance(synth_pol, target_pol, a));
}

template <typename T>
Tensor<T> perceptual_attribute_loss(const Tensor<T>& synth_vis, const Tensor<T>& synth_pol,
                                    const Tensor<T>& target, const nn::AttributePredictor<T>& a) {
  return perceptual_attribute_loss(synth_vis, target, synth_pol, target, a);
}

// Which of the six terms participate in an objective.
struct AblationMask {
  std::array<bool, kTermCount> active{true, true, true, true, true, true};

  bool operator[](Term t) const { return active[static_cast<std::size_t>(t)]; }
  bool& operator[](Term t) { return active[static_cast<std::size_t>(t)]; }
  bool any() const {
    for (bool a : active)
      if (a) return true;
    return false;
  }
  bool operator==(const AblationMask&) const = default;

  static AblationMask all() { return {}; }
  static AblationMask only(std::initializer_list<Term> terms) {
    AblationMask m;
    m.active.fill(false);
    for (Term t : terms) m[t] = true;
    return m;
  }
};

// Components in Term order; a missing entry is an inactive term.
template <typename T>
using LossComponents = std::array<std::optional<Tensor<T>>, kTermCount>;

template <typename T>
Tensor<T> total_loss(const LossComponents<T>& components, const LossWeights& weights) {
  const auto w = weights.as_array();
  std::optional<Tensor<T>> total;
  for (std::size_t k = 0; k < kTermCount; ++k) {
    if (!components[k]) continue;
    Tensor<T> term = scale(*components[k], static_cast<T>(w[k]));
    total = total ? add(*total, term) : term;
  }
  return total ? *total : Tensor<T>::scalar(T(0));
}

}  // namespace agc::loss
