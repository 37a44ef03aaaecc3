#pragma once

// Attribute-predictor pretraining, the coupled training step, the training
// loop, and checkpoint conversion.
//
// One step on a balanced pair batch (vis sample i, pol sample j, y_cont):
//   1. D_vis and D_pol each take one Adam step on real (x | y) vs detached fake
//      (G(y) | y), only when L_GAN is active.
//   2. Both generators take one Adam step on the weighted sum of the active
//      terms. D, V and A are frozen during this backward pass.
// Randomness per step comes from the (seed, step) addressed streams "sampler"
// and "dropout", so resuming needs only the step counter.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "agcgan/checkpoint.hpp"
#include "agcgan/dataio.hpp"
#include "agcgan/losses.hpp"
#include "agcgan/networks.hpp"
#include "agcgan/optim.hpp"
#include "agcgan/random.hpp"
#include "json.hpp"

namespace agc {
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AdamOptions, lr, beta1, beta2, eps)
namespace loss {
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(LossWeights, lambda1, lambda2, lambda3, lambda4, lambda5, margin)
NLOHMANN_JSON_SERIALIZE_ENUM(ReconstructionMode, {{ReconstructionMode::kMean, "mean"},
                                                  {ReconstructionMode::kSum, "sum"}})
}  // namespace loss
}  // namespace agc

namespace agc::train {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// ---------------------------------------------------------------------------
// Configuration

enum class Ablation { kFull, kNoAttr, kCplE };

inline const char* ablation_name(Ablation a) {
  switch (a) {
    case Ablation::kFull: return "full";
    case Ablation::kNoAttr: return "no-attr";
    case Ablation::kCplE: return "cpl-e";
  }
  return "?";
}

inline Ablation parse_ablation(const std::string& s) {
  if (s == "cpl+E") return Ablation::kCplE;
  if (s == "full") return Ablation::kFull;
  if (s == "no-attr") return Ablation::kNoAttr;
  if (s == "cpl-e") return Ablation::kCplE;
  throw ConfigError("unknown ablation preset '" + s + "' (expected full|no-attr|cpl-e)");
}

inline loss::AblationMask ablation_mask(Ablation a) {
  using loss::Term;
  switch (a) {
    case Ablation::kFull: return loss::AblationMask::all();
    case Ablation::kNoAttr:
      return loss::AblationMask::only({Term::kCoupling, Term::kReconstruction, Term::kAdversarial,
                                       Term::kPerceptual, Term::kPerceptualAttribute});
    case Ablation::kCplE: return loss::AblationMask::only({Term::kCoupling, Term::kReconstruction});
  }
  return loss::AblationMask::all();
}

struct ModelConfig {
  std::size_t base_width = 16;
  std::size_t depth = 4;
  std::size_t embed_dim = 128;
  std::size_t head_width = 16;
  double dropout = 0.5;
  std::size_t dropout_blocks = 2;
  bool instance_norm = true;
  std::size_t disc_base_width = 16;
  std::size_t disc_blocks = 3;
  std::vector<std::size_t> attr_widths = {8, 16, 32, 32};
  std::vector<std::size_t> feature_widths = {16, 32, 64};
  bool feature_from_predictor = false;  // copy V from A's trunk instead of a seeded init
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ModelConfig, base_width, depth, embed_dim, head_width, dropout,
                                                dropout_blocks, instance_norm, disc_base_width, disc_blocks,
                                                attr_widths, feature_widths, feature_from_predictor)

// A is trained on its own synthetic corpus (identities disjoint from any
// benchmark split), then frozen.
struct PretrainConfig {
  std::size_t identities = 2000;
  std::size_t samples_per_identity = 2;
  double holdout_fraction = 0.2;
  std::size_t epochs = 6;
  std::size_t batch_size = 16;
  double lr = 1e-3;
  std::size_t finetune_epochs = 4;  // polar fine-tuning for attribute scenario 3
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PretrainConfig, identities, samples_per_identity,
                                                holdout_fraction, epochs, batch_size, lr, finetune_epochs)

struct TrainConfig {
  std::uint64_t seed = 0;
  std::size_t steps = 600;
  std::size_t batch_size = 4;
  std::size_t checkpoint_every = 0;  // 0: final checkpoint only
  std::size_t log_every = 100;
  AdamOptions adam;
  loss::LossWeights weights;
  std::string ablation = "full";   // full | no-attr | cpl-e | custom
  std::vector<std::string> terms;  // active term names when ablation == "custom"
  loss::ReconstructionMode reconstruction = loss::ReconstructionMode::kMean;
  double grad_clip = 0.0;  // global-norm clip per network; 0 disables
  ModelConfig model;
  data::PreprocessConfig preprocess;
  PretrainConfig pretrain;

  loss::AblationMask mask() const {
    if (ablation != "custom") return ablation_mask(parse_ablation(ablation));
    loss::AblationMask m;
    m.active.fill(false);
    for (const auto& name : terms) {
      const auto it = std::find(loss::kTermNames.begin(), loss::kTermNames.end(), name);
      if (it == loss::kTermNames.end()) throw ConfigError("unknown loss term '" + name + "'");
      m.active[static_cast<std::size_t>(it - loss::kTermNames.begin())] = true;
    }
    return m;
  }

  void validate() const {
    if (batch_size == 0 || batch_size % 2 != 0) {
      throw ConfigError("batch_size must be even and positive (pair balance), got " + std::to_string(batch_size));
    }
    if (!mask().any()) throw ConfigError("at least one loss term must be active");
    weights.validate();
    if (!(adam.lr > 0.0)) throw ConfigError("adam.lr must be positive");
    if (grad_clip < 0.0) throw ConfigError("grad_clip must be nonnegative");
    if (model.depth < 2) throw ConfigError("model.depth must be >= 2");
    if (pretrain.batch_size == 0) throw ConfigError("pretrain.batch_size must be positive");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, seed, steps, batch_size, checkpoint_every, log_every,
                                                adam, weights, ablation, terms, reconstruction, grad_clip, model,
                                                preprocess, pretrain)

// Rejects keys that do not exist in `reference` (compared recursively through
// objects), naming the full dotted path of the first offender.
inline void check_known_keys(const nlohmann::json& j, const nlohmann::json& reference, const std::string& path = "") {
  if (!j.is_object()) return;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!reference.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
    if (reference.at(it.key()).is_object()) check_known_keys(it.value(), reference.at(it.key()), key);
  }
}

inline TrainConfig config_from_json(const nlohmann::json& j) {
  check_known_keys(j, nlohmann::json(TrainConfig{}));
  try {
    TrainConfig c = j.get<TrainConfig>();
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Model

inline nn::GeneratorConfig generator_config(const ModelConfig& m, std::size_t in_channels) {
  nn::GeneratorConfig g;
  g.in_channels = in_channels;
  g.base_width = m.base_width;
  g.depth = m.depth;
  g.embed_dim = m.embed_dim;
  g.attributes = data::kAttributeCount;
  g.head_width = m.head_width;
  g.dropout = m.dropout;
  g.dropout_blocks = m.dropout_blocks;
  g.instance_norm = m.instance_norm;
  return g;
}

inline nn::DiscriminatorConfig discriminator_config(const ModelConfig& m, std::size_t condition_channels) {
  nn::DiscriminatorConfig d;
  d.condition_channels = condition_channels;
  d.base_width = m.disc_base_width;
  d.blocks = m.disc_blocks;
  d.instance_norm = m.instance_norm;
  return d;
}

inline nn::AttributePredictorConfig predictor_config(const ModelConfig& m, std::size_t image_size,
                                                     std::size_t in_channels = 1) {
  return {in_channels, image_size, m.attr_widths, data::kAttributeCount};
}

template <typename T>
struct CoupledModel {
  nn::Generator<T> vis_gen, pol_gen;
  nn::Discriminator<T> vis_disc, pol_disc;
  nn::FeatureNet<T> feature;
  nn::AttributePredictor<T> attr;

  CoupledModel(nn::Generator<T> vis, nn::Generator<T> pol, nn::Discriminator<T> dv, nn::Discriminator<T> dp,
               nn::FeatureNet<T> v, nn::AttributePredictor<T> a)
      : vis_gen(std::move(vis)), pol_gen(std::move(pol)), vis_disc(std::move(dv)), pol_disc(std::move(dp)),
        feature(std::move(v)), attr(std::move(a)) {
    if (vis_gen.config().embed_dim != pol_gen.config().embed_dim) {
      throw ConfigError("coupled generators need equal embedding dims, got " +
                        std::to_string(vis_gen.config().embed_dim) + " and " +
                        std::to_string(pol_gen.config().embed_dim));
    }
    if (vis_gen.config().in_channels != 1 || pol_gen.config().in_channels != data::kPolarChannels) {
      throw ConfigError("Vis-GAN takes 1 input channel and Pol-GAN 3");
    }
    feature.set_frozen(true);
    attr.set_frozen(true);
  }

  // Named modules in checkpoint order.
  template <typename F>
  void for_each_module(F&& f) {
    f("vis_gen", vis_gen);
    f("pol_gen", pol_gen);
    f("vis_disc", vis_disc);
    f("pol_disc", pol_disc);
    f("feature", feature);
    f("attr", attr);
  }
};

// Each network draws its initial weights from its own "init" sub-stream.
template <typename T>
CoupledModel<T> make_coupled_model(const ModelConfig& m, std::size_t image_size, std::uint64_t seed) {
  Rng r0 = make_rng(seed, "init", 0), r1 = make_rng(seed, "init", 1), r2 = make_rng(seed, "init", 2),
      r3 = make_rng(seed, "init", 3), r4 = make_rng(seed, "init", 4), r5 = make_rng(seed, "init", 5);
  return CoupledModel<T>(nn::Generator<T>(generator_config(m, 1), r0),
                         nn::Generator<T>(generator_config(m, data::kPolarChannels), r1),
                         nn::Discriminator<T>(discriminator_config(m, 1), r2),
                         nn::Discriminator<T>(discriminator_config(m, data::kPolarChannels), r3),
                         nn::FeatureNet<T>(nn::FeatureNetConfig{1, m.feature_widths}, r4),
                         nn::AttributePredictor<T>(predictor_config(m, image_size), r5));
}

// ---------------------------------------------------------------------------
// Batching

template <typename T>
Tensor<T> stack_images(const std::vector<std::vector<float>>& images, std::span<const std::size_t> indices,
                       std::size_t channels, std::size_t height, std::size_t width) {
  const std::size_t per = channels * height * width;
  std::vector<T> v;
  v.reserve(indices.size() * per);
  for (auto i : indices) {
    if (images.at(i).size() != per) throw ShapeError("stack_images: image " + std::to_string(i) + " has wrong size");
    v.insert(v.end(), images[i].begin(), images[i].end());
  }
  return Tensor<T>(Shape{indices.size(), channels, height, width}, std::move(v));
}

template <typename T>
Tensor<T> stack_attributes(const data::PreparedDataset& p, std::span<const std::size_t> indices) {
  std::vector<T> v;
  for (auto i : indices) v.insert(v.end(), p.attributes.at(i).begin(), p.attributes.at(i).end());
  return Tensor<T>(Shape{indices.size(), data::kAttributeCount}, std::move(v));
}

template <typename T>
struct StepInputs {
  Tensor<T> vis_cond, vis_target;  // (N, 1, H, W); Vis-GAN reconstructs its condition
  Tensor<T> pol_cond;              // (N, 3, H, W)
  Tensor<T> pol_target;            // (N, 1, H, W) visible image of the polar sample
  std::vector<loss::PairLabel> labels;
  Tensor<T> vis_attrs, pol_attrs;  // (N, T)
};

template <typename T>
StepInputs<T> make_step_inputs(const data::PreparedDataset& p, const data::PairBatch& batch) {
  std::vector<std::size_t> vi, pj;
  StepInputs<T> in;
  for (const auto& pr : batch.pairs) {
    vi.push_back(pr.visible_index);
    pj.push_back(pr.polar_index);
    in.labels.push_back(static_cast<loss::PairLabel>(pr.y_cont));
  }
  in.vis_cond = stack_images<T>(p.visible, vi, 1, p.height, p.width);
  in.vis_target = in.vis_cond;
  in.pol_cond = stack_images<T>(p.polar, pj, data::kPolarChannels, p.height, p.width);
  in.pol_target = stack_images<T>(p.visible, pj, 1, p.height, p.width);
  in.vis_attrs = stack_attributes<T>(p, vi);
  in.pol_attrs = stack_attributes<T>(p, pj);
  return in;
}

// ---------------------------------------------------------------------------
// Training state and step

template <typename T>
struct TrainState {
  TrainConfig config;
  std::size_t image_size;
  CoupledModel<T> model;
  AdamState<T> vis_gen_opt, pol_gen_opt, vis_disc_opt, pol_disc_opt;
  std::uint64_t step = 0;
  bool predictor_pretrained = false;  // model.attr holds a trained A rather than its seeded init

  TrainState(TrainConfig c, std::size_t size, CoupledModel<T> m)
      : config(std::move(c)), image_size(size), model(std::move(m)) {
    auto opt = [&](const auto& module) {
      const auto params = module.parameters();
      return make_adam_state<T>(params, config.adam);
    };
    vis_gen_opt = opt(model.vis_gen);
    pol_gen_opt = opt(model.pol_gen);
    vis_disc_opt = opt(model.vis_disc);
    pol_disc_opt = opt(model.pol_disc);
  }
};

// A pretrained predictor replaces the placeholder A; V is copied from its
// trunk when the config asks for it.
template <typename T>
TrainState<T> make_train_state(const TrainConfig& config, std::size_t image_size,
                               const nn::AttributePredictor<T>* pretrained = nullptr) {
  config.validate();
  auto model = make_coupled_model<T>(config.model, image_size, config.seed);
  if (pretrained) {
    model.attr = *pretrained;
    model.attr.detach_parameters();
    model.attr.set_frozen(true);
    if (config.model.feature_from_predictor) model.feature.copy_trunk_from(model.attr);
  }
  TrainState<T> state(config, image_size, std::move(model));
  state.predictor_pretrained = pretrained != nullptr;
  return state;
}

struct StepRecord {
  std::uint64_t step = 0;
  std::array<std::optional<double>, loss::kTermCount> terms;
  std::optional<double> d_vis, d_pol;
  double total = 0.0;
};

namespace detail {

template <typename T>
void clip_gradients(std::vector<Tensor<T>>& params, double max_norm) {
  if (max_norm <= 0.0) return;
  double sq = 0.0;
  for (auto& p : params)
    for (T g : p.grad()) sq += double(g) * double(g);
  const double norm = std::sqrt(sq);
  if (norm <= max_norm) return;
  const T f = static_cast<T>(max_norm / norm);
  for (auto& p : params)
    for (auto& g : p.node().grad) g *= f;
}

template <typename T, typename M>
void optimizer_step(M& module, AdamState<T>& opt, double clip) {
  auto params = module.parameters();
  clip_gradients(params, clip);
  adam_step<T>(params, opt);
}

template <typename F>
auto guarded(const char* term, F&& f) {
  try {
    auto v = f();
    if (!std::isfinite(static_cast<double>(v.item()))) throw NumericError("non-finite value");
    return v;
  } catch (const NumericError& e) {
    throw NumericError(std::string("non-finite loss in ") + term + ": " + e.what());
  }
}

}  // namespace detail

template <typename T>
StepRecord train_step_on(TrainState<T>& state, const StepInputs<T>& in) {
  using loss::Term;
  auto& m = state.model;
  const auto& cfg = state.config;
  const auto mask = cfg.mask();
  const std::uint64_t s = state.step;
  StepRecord rec;
  rec.step = s;

  const auto vis = m.vis_gen.forward(in.vis_cond, nn::Mode::kTrain, derive_seed(cfg.seed, "dropout", s, 0));
  const auto pol = m.pol_gen.forward(in.pol_cond, nn::Mode::kTrain, derive_seed(cfg.seed, "dropout", s, 1));

  if (mask[Term::kAdversarial]) {
    auto d_step = [&](nn::Discriminator<T>& d, AdamState<T>& opt, const Tensor<T>& cond, const Tensor<T>& real,
                      const Tensor<T>& fake, const char* name) {
      d.zero_grad();
      auto ld = detail::guarded(name, [&] { return loss::discriminator_loss(d.forward(cond, real), d.forward(cond, fake.detach())); });
      backward(ld);
      detail::optimizer_step(d, opt, cfg.grad_clip);
      return static_cast<double>(ld.item());
    };
    rec.d_vis = d_step(m.vis_disc, state.vis_disc_opt, in.vis_cond, in.vis_target, vis.synth, "D_vis");
    rec.d_pol = d_step(m.pol_disc, state.pol_disc_opt, in.pol_cond, in.pol_target, pol.synth, "D_pol");
  }

  m.vis_disc.set_frozen(true);
  m.pol_disc.set_frozen(true);
  m.vis_gen.zero_grad();
  m.pol_gen.zero_grad();
  loss::LossComponents<T> c;
  const auto name = [](Term t) { return loss::kTermNames[static_cast<std::size_t>(t)]; };
  auto set = [&](Term t, auto&& f) {
    if (mask[t]) c[static_cast<std::size_t>(t)] = detail::guarded(name(t), f);
  };
  try {
    set(Term::kCoupling, [&] { return loss::coupling_loss(vis.embedding, pol.embedding, in.labels, cfg.weights.margin); });
    set(Term::kReconstruction, [&] {
      return add(loss::reconstruction_loss(vis.synth, in.vis_target, cfg.reconstruction),
                 loss::reconstruction_loss(pol.synth, in.pol_target, cfg.reconstruction));
    });
    set(Term::kAdversarial, [&] {
      return add(loss::generator_adversarial_loss(m.vis_disc.forward(in.vis_cond, vis.synth)),
                 loss::generator_adversarial_loss(m.pol_disc.forward(in.pol_cond, pol.synth)));
    });
    set(Term::kAttribute, [&] {
      return add(loss::attribute_loss(vis.attr_logits, in.vis_attrs), loss::attribute_loss(pol.attr_logits, in.pol_attrs));
    });
    set(Term::kPerceptual, [&] { return loss::perceptual_loss(pol.synth, in.pol_target, m.feature); });
    set(Term::kPerceptualAttribute, [&] {
      return loss::perceptual_attribute_loss(vis.synth, in.vis_target, pol.synth, in.pol_target, m.attr);
    });
  } catch (...) {
    m.vis_disc.set_frozen(false);
    m.pol_disc.set_frozen(false);
    throw;
  }
  const Tensor<T> total = detail::guarded("L_T", [&] { return loss::total_loss(c, cfg.weights); });
  backward(total);
  m.vis_disc.set_frozen(false);
  m.pol_disc.set_frozen(false);
  detail::optimizer_step(m.vis_gen, state.vis_gen_opt, cfg.grad_clip);
  detail::optimizer_step(m.pol_gen, state.pol_gen_opt, cfg.grad_clip);

  for (std::size_t k = 0; k < loss::kTermCount; ++k)
    if (c[k]) rec.terms[k] = static_cast<double>(c[k]->item());
  rec.total = static_cast<double>(total.item());
  ++state.step;
  return rec;
}

inline data::PairBatch batch_for_step(const data::SplitIndex& split, std::size_t batch_size, std::uint64_t seed,
                                      std::uint64_t step) {
  Rng rng = make_rng(seed, "sampler", step);
  return data::sample_balanced_pairs(split, batch_size, rng);
}

template <typename T>
StepRecord train_step(TrainState<T>& state, const data::PreparedDataset& p, const data::SplitIndex& split) {
  const auto batch = batch_for_step(split, state.config.batch_size, state.config.seed, state.step);
  return train_step_on(state, make_step_inputs<T>(p, batch));
}

// ---------------------------------------------------------------------------
// Loss history

inline std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline std::string loss_history_header(const loss::AblationMask& mask) {
  std::string h = "step";
  for (std::size_t k = 0; k < loss::kTermCount; ++k)
    if (mask.active[k]) h += std::string(",") + loss::kTermNames[k];
  if (mask[loss::Term::kAdversarial]) h += ",D_vis,D_pol";
  return h + ",total";
}

inline std::string loss_history_row(const StepRecord& r, const loss::AblationMask& mask) {
  std::string row = std::to_string(r.step);
  for (std::size_t k = 0; k < loss::kTermCount; ++k)
    if (mask.active[k]) row += "," + format_number(r.terms[k].value_or(0.0));
  if (mask[loss::Term::kAdversarial]) row += "," + format_number(r.d_vis.value_or(0.0)) + "," + format_number(r.d_pol.value_or(0.0));
  return row + "," + format_number(r.total);
}

inline std::string loss_history_csv(const std::vector<StepRecord>& history, const loss::AblationMask& mask) {
  std::string out = loss_history_header(mask) + "\n";
  for (const auto& r : history) out += loss_history_row(r, mask) + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

template <typename T>
io::Checkpoint to_checkpoint(const TrainState<T>& state) {
  io::Checkpoint ck;
  ck.step = state.step;
  ck.seed = state.config.seed;
  ck.config = {{"kind", "coupled"},
               {"image_size", state.image_size},
               {"predictor_pretrained", state.predictor_pretrained},
               {"train", state.config}};
  auto& model = const_cast<CoupledModel<T>&>(state.model);
  model.for_each_module([&](const char* name, auto& module) {
    for (const auto& p : module.named_parameters()) ck.add(std::string(name) + "/" + p.name, p.tensor);
  });
  auto add_opt = [&](const char* name, const auto& module, const AdamState<T>& opt) {
    const auto& params = module.named_parameters();
    for (std::size_t k = 0; k < params.size(); ++k) {
      ck.add(std::string("adam/") + name + "/m/" + params[k].name, Tensor<T>(params[k].tensor.shape(), opt.m[k]));
      ck.add(std::string("adam/") + name + "/v/" + params[k].name, Tensor<T>(params[k].tensor.shape(), opt.v[k]));
    }
    ck.add(std::string("adam/") + name + "/t", Tensor<double>(Shape{1}, {static_cast<double>(opt.t)}));
  };
  add_opt("vis_gen", state.model.vis_gen, state.vis_gen_opt);
  add_opt("pol_gen", state.model.pol_gen, state.pol_gen_opt);
  add_opt("vis_disc", state.model.vis_disc, state.vis_disc_opt);
  add_opt("pol_disc", state.model.pol_disc, state.pol_disc_opt);
  return ck;
}

inline TrainConfig checkpoint_config(const io::Checkpoint& ck) {
  if (!ck.config.contains("kind") || ck.config.at("kind") != "coupled") {
    throw io::MismatchError("checkpoint does not hold a coupled model");
  }
  return config_from_json(ck.config.at("train"));
}

template <typename T>
TrainState<T> from_checkpoint(const io::Checkpoint& ck) {
  const TrainConfig config = checkpoint_config(ck);
  const std::size_t image_size = ck.config.at("image_size").get<std::size_t>();
  TrainState<T> state(config, image_size, make_coupled_model<T>(config.model, image_size, config.seed));
  state.model.for_each_module([&](const char* name, auto& module) {
    for (const auto& p : module.named_parameters()) {
      auto t = p.tensor;
      ck.restore(std::string(name) + "/" + p.name, t);
    }
  });
  auto load_opt = [&](const char* name, const auto& module, AdamState<T>& opt) {
    const auto& params = module.named_parameters();
    for (std::size_t k = 0; k < params.size(); ++k) {
      Tensor<T> m(params[k].tensor.shape(), std::vector<T>(params[k].tensor.numel()));
      Tensor<T> v = m.clone_leaf(false);
      ck.restore(std::string("adam/") + name + "/m/" + params[k].name, m);
      ck.restore(std::string("adam/") + name + "/v/" + params[k].name, v);
      opt.m[k].assign(m.data().begin(), m.data().end());
      opt.v[k].assign(v.data().begin(), v.data().end());
    }
    Tensor<double> t(Shape{1}, {0.0});
    ck.restore(std::string("adam/") + name + "/t", t);
    opt.t = static_cast<std::uint64_t>(t[0]);
  };
  load_opt("vis_gen", state.model.vis_gen, state.vis_gen_opt);
  load_opt("pol_gen", state.model.pol_gen, state.pol_gen_opt);
  load_opt("vis_disc", state.model.vis_disc, state.vis_disc_opt);
  load_opt("pol_disc", state.model.pol_disc, state.pol_disc_opt);
  state.step = ck.step;
  state.predictor_pretrained = ck.config.value("predictor_pretrained", false);
  return state;
}

template <typename T>
io::Checkpoint predictor_checkpoint(const nn::AttributePredictor<T>& a, std::uint64_t seed,
                                    const nlohmann::json& report = nlohmann::json::object()) {
  io::Checkpoint ck;
  ck.seed = seed;
  ck.config = {{"kind", "attribute_predictor"},
               {"in_channels", a.config().in_channels},
               {"input_size", a.config().input_size},
               {"widths", a.config().widths},
               {"attributes", a.config().attributes},
               {"report", report}};
  for (const auto& p : a.named_parameters()) ck.add("attr/" + p.name, p.tensor);
  return ck;
}

template <typename T>
nn::AttributePredictor<T> predictor_from_checkpoint(const io::Checkpoint& ck) {
  if (!ck.config.contains("kind") || ck.config.at("kind") != "attribute_predictor") {
    throw io::MismatchError("checkpoint does not hold an attribute predictor");
  }
  nn::AttributePredictorConfig cfg{ck.config.at("in_channels").get<std::size_t>(),
                                   ck.config.at("input_size").get<std::size_t>(),
                                   ck.config.at("widths").get<std::vector<std::size_t>>(),
                                   ck.config.at("attributes").get<std::size_t>()};
  Rng rng(0);
  nn::AttributePredictor<T> a(cfg, rng);
  for (const auto& p : a.named_parameters()) {
    auto t = p.tensor;
    ck.restore("attr/" + p.name, t);
  }
  a.set_frozen(true);
  return a;
}

// ---------------------------------------------------------------------------
// Attribute predictor fitting

template <typename T>
std::vector<std::array<T, data::kAttributeCount>> predict_attributes(const nn::AttributePredictor<T>& a,
                                                                      const std::vector<std::vector<float>>& images,
                                                                      std::span<const std::size_t> indices,
                                                                      std::size_t channels, std::size_t size) {
  std::vector<std::array<T, data::kAttributeCount>> out;
  constexpr std::size_t kChunk = 32;
  for (std::size_t b = 0; b < indices.size(); b += kChunk) {
    const auto idx = indices.subspan(b, std::min(kChunk, indices.size() - b));
    const auto probs = a.forward(stack_images<T>(images, idx, channels, size, size));
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::array<T, data::kAttributeCount> row{};
      for (std::size_t t = 0; t < data::kAttributeCount; ++t) row[t] = probs[i * data::kAttributeCount + t];
      out.push_back(row);
    }
  }
  return out;
}

// Per-attribute fraction of correct decisions at threshold 0.5.
template <typename P>
std::array<double, data::kAttributeCount> attribute_accuracy(const std::vector<P>& probs,
                                                             const data::PreparedDataset& p,
                                                             std::span<const std::size_t> indices) {
  std::array<double, data::kAttributeCount> acc{};
  if (indices.empty()) throw std::invalid_argument("attribute accuracy: no samples");
  for (std::size_t i = 0; i < indices.size(); ++i)
    for (std::size_t t = 0; t < data::kAttributeCount; ++t)
      if ((probs[i][t] > 0.5) == (p.attributes[indices[i]][t] > 0.5f)) acc[t] += 1.0;
  for (auto& a : acc) a /= static_cast<double>(indices.size());
  return acc;
}

inline double mean_of(std::span<const double> v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// Minibatch Adam on per-attribute BCE; returns the mean loss of each epoch.
// images[i] has `channels` planes; batches are reshuffled every epoch.
template <typename T>
std::vector<double> fit_attribute_predictor(nn::AttributePredictor<T>& a, const data::PreparedDataset& p,
                                            const std::vector<std::vector<float>>& images, std::size_t channels,
                                            std::span<const std::size_t> train_indices, std::size_t epochs,
                                            std::size_t batch_size, double lr, std::uint64_t seed,
                                            std::string_view stream) {
  if (train_indices.empty()) throw std::invalid_argument("attribute predictor training: empty dataset");
  a.set_frozen(false);
  AdamOptions opts;
  opts.lr = lr;
  opts.beta1 = 0.9;
  auto params = a.parameters();
  auto opt = make_adam_state<T>(params, opts);
  std::vector<double> epoch_losses;
  std::vector<std::size_t> order(train_indices.begin(), train_indices.end());
  for (std::size_t e = 0; e < epochs; ++e) {
    Rng rng = make_rng(seed, stream, e);
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < order.size(); b += batch_size) {
      const std::span<const std::size_t> idx(order.data() + b, std::min(batch_size, order.size() - b));
      a.zero_grad();
      auto l = loss::attribute_loss(a.logits(stack_images<T>(images, idx, channels, p.height, p.width)),
                                    stack_attributes<T>(p, idx));
      backward(l);
      adam_step<T>(params, opt);
      total += static_cast<double>(l.item());
      ++batches;
    }
    epoch_losses.push_back(total / static_cast<double>(batches));
  }
  a.set_frozen(true);
  return epoch_losses;
}

// Synthetic corpus used only for A: fresh identities drawn from a separate
// seed stream, split into train / held-out identities.
inline data::Dataset attribute_corpus(const PretrainConfig& cfg, std::size_t image_size, std::uint64_t seed) {
  data::SyntheticParams sp;
  sp.identities = cfg.identities;
  sp.samples_per_identity = cfg.samples_per_identity;
  sp.height = sp.width = image_size;
  sp.seed = derive_seed(seed, "attr-corpus");
  sp.test_fraction = cfg.holdout_fraction;
  return data::generate_synthetic_dataset(sp);
}

inline std::vector<std::size_t> split_samples(const data::Dataset& ds, std::span<const std::uint32_t> identities) {
  return data::index_split(ds, identities).all_samples;
}

struct PretrainReport {
  std::vector<double> epoch_losses;
  std::array<double, data::kAttributeCount> holdout_accuracy{};
  double mean_accuracy = 0.0;
};

inline nlohmann::json to_json_report(const PretrainReport& r) {
  nlohmann::json j;
  j["epoch_losses"] = r.epoch_losses;
  j["mean_accuracy"] = r.mean_accuracy;
  for (std::size_t t = 0; t < data::kAttributeCount; ++t) j["holdout_accuracy"][data::kAttributeNames[t]] = r.holdout_accuracy[t];
  return j;
}

template <typename T>
struct PretrainResult {
  nn::AttributePredictor<T> predictor;
  PretrainReport report;
};

// Trains A on visible images of the corpus' train identities; the report
// holds accuracy on the held-out identities. A is frozen on return.
template <typename T>
PretrainResult<T> pretrain_attribute_predictor(const data::Dataset& corpus, const TrainConfig& config) {
  if (corpus.samples.empty()) throw std::invalid_argument("attribute pretraining: empty dataset");
  const auto prep = data::prepare(corpus, config.preprocess);
  const auto train_idx = split_samples(corpus, corpus.manifest.train_identities);
  const auto held_idx = split_samples(corpus, corpus.manifest.test_identities);
  Rng init = make_rng(config.seed, "init", 6);
  nn::AttributePredictor<T> a(predictor_config(config.model, prep.height), init);
  PretrainResult<T> out{a, {}};
  out.report.epoch_losses = fit_attribute_predictor(out.predictor, prep, prep.visible, 1, train_idx,
                                                    config.pretrain.epochs, config.pretrain.batch_size,
                                                    config.pretrain.lr, config.seed, "attr-pretrain");
  const auto probs = predict_attributes(out.predictor, prep.visible, held_idx, 1, prep.height);
  out.report.holdout_accuracy = attribute_accuracy(probs, prep, held_idx);
  out.report.mean_accuracy = mean_of(out.report.holdout_accuracy);
  return out;
}

template <typename T>
PretrainResult<T> pretrain_attribute_predictor(const TrainConfig& config, std::size_t image_size) {
  return pretrain_attribute_predictor<T>(attribute_corpus(config.pretrain, image_size, config.seed), config);
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainOptions {
  std::filesystem::path out_dir;  // empty: nothing written
  std::ostream* log = nullptr;
};

inline std::string run_tag(std::uint64_t step, std::uint64_t seed) {
  return "step" + std::to_string(step) + "_seed" + std::to_string(seed);
}

template <typename T>
void write_checkpoint(const TrainState<T>& state, const std::filesystem::path& dir) {
  io::save_checkpoint(dir / ("checkpoint_" + run_tag(state.step, state.config.seed) + ".agck"), to_checkpoint(state));
}

// Runs steps until state.step == config.steps. History rows are appended to
// `history` and, when out_dir is set, the CSV and checkpoints are written.
template <typename T>
std::vector<StepRecord> run_training(TrainState<T>& state, const data::PreparedDataset& p,
                                     const data::SplitIndex& split, const TrainOptions& opts = {}) {
  std::vector<StepRecord> history;
  const auto& cfg = state.config;
  const auto mask = cfg.mask();
  while (state.step < cfg.steps) {
    history.push_back(train_step(state, p, split));
    const auto& r = history.back();
    if (opts.log && cfg.log_every && (state.step % cfg.log_every == 0 || state.step == cfg.steps)) {
      *opts.log << "step " << state.step << "/" << cfg.steps << " total " << format_number(r.total) << "\n";
    }
    if (!opts.out_dir.empty() && cfg.checkpoint_every && state.step % cfg.checkpoint_every == 0 &&
        state.step != cfg.steps) {
      write_checkpoint(state, opts.out_dir);
    }
  }
  if (!opts.out_dir.empty()) {
    write_checkpoint(state, opts.out_dir);
    io::write_text_atomic(opts.out_dir / ("losses_" + run_tag(state.step, cfg.seed) + ".csv"),
                          loss_history_csv(history, mask));
  }
  return history;
}

template <typename T>
struct TrainRun {
  TrainState<T> state;
  std::vector<StepRecord> history;
  std::optional<PretrainReport> pretrain;
};

// Full run: pretrains A when L_pa is active and no predictor is supplied,
// then trains on the dataset's train identities.
template <typename T>
TrainRun<T> train(const data::Dataset& ds, const TrainConfig& config,
                  const nn::AttributePredictor<T>* pretrained = nullptr, const TrainOptions& opts = {}) {
  config.validate();
  if (ds.manifest.train_identities.size() < 2) throw std::invalid_argument("training needs at least 2 train identities");
  if (ds.manifest.height != ds.manifest.width) throw ShapeError("training expects square images");
  std::optional<PretrainResult<T>> pre;
  if (!pretrained && config.mask()[loss::Term::kPerceptualAttribute]) {
    pre = pretrain_attribute_predictor<T>(config, ds.manifest.height);
    pretrained = &pre->predictor;
    if (opts.log) *opts.log << "attribute predictor held-out accuracy " << format_number(pre->report.mean_accuracy) << "\n";
  }
  const auto prep = data::prepare(ds, config.preprocess);
  const auto split = data::index_split(ds, ds.manifest.train_identities);
  TrainRun<T> run{make_train_state<T>(config, ds.manifest.height, pretrained), {}, {}};
  if (pre) run.pretrain = pre->report;
  run.history = run_training(run.state, prep, split, opts);
  return run;
}

}  // namespace agc::train
