#pragma once

// Test-phase synthesis and matching, identification (CMC) and verification
// (ROC) metrics, the four attribute-prediction scenarios, and embedding export.
//
// Protocol on the test split:
//   gallery: visible images of the first `gallery_samples` samples of each
//            test identity (default 1; 0 takes every sample)
//   probes:  polar images of the remaining test samples (all of them when
//            gallery_samples is 0)
// A probe is matched to each gallery identity by the minimum Euclidean
// distance over that identity's gallery images. Ranking ties go to the
// smaller identity label. Verification pairs are all (probe, gallery identity)
// pairs under the same distance.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "agcgan/dataio.hpp"
#include "agcgan/training.hpp"

namespace agc::eval {

// ---------------------------------------------------------------------------
// Gallery / probe sets

struct GalleryProbeSet {
  std::size_t height = 0, width = 0;
  std::vector<std::uint32_t> gallery_ids;
  std::vector<std::vector<float>> gallery;        // 1 x H x W
  std::vector<std::uint32_t> probe_ids;
  std::vector<std::size_t> probe_samples;         // dataset sample index of each probe
  std::vector<std::vector<float>> probes;         // 3 x H x W
  std::vector<std::vector<float>> probe_visible;  // ground-truth visible counterpart of each probe

  std::vector<std::uint32_t> identities() const {
    std::vector<std::uint32_t> ids = gallery_ids;
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    return ids;
  }
};

inline GalleryProbeSet make_gallery_probe_set(const data::Dataset& ds, const data::PreparedDataset& p,
                                              std::size_t gallery_samples = 1) {
  if (gallery_samples >= ds.manifest.samples_per_identity && gallery_samples != 0) {
    throw std::invalid_argument("gallery_samples must leave at least one probe sample per identity");
  }
  const auto split = data::index_split(ds, ds.manifest.test_identities);
  if (split.identities.empty()) throw std::invalid_argument("dataset has no test identities");
  GalleryProbeSet set;
  set.height = p.height;
  set.width = p.width;
  for (std::size_t k = 0; k < split.identities.size(); ++k) {
    const auto id = split.identities[k];
    const auto& samples = split.samples[k];
    for (std::size_t j = 0; j < samples.size(); ++j) {
      const std::size_t s = samples[j];
      const bool in_gallery = gallery_samples == 0 || j < gallery_samples;
      const bool is_probe = gallery_samples == 0 || j >= gallery_samples;
      if (in_gallery) {
        set.gallery_ids.push_back(id);
        set.gallery.push_back(p.visible[s]);
      }
      if (is_probe) {
        set.probe_ids.push_back(id);
        set.probe_samples.push_back(s);
        set.probes.push_back(p.polar[s]);
        set.probe_visible.push_back(p.visible[s]);
      }
    }
  }
  return set;
}

// ---------------------------------------------------------------------------
// Synthesis

template <typename T>
struct Synthesis {
  std::vector<std::vector<float>> images;  // 1 x H x W each
  std::vector<std::vector<float>> embeddings;
  std::vector<std::array<double, data::kAttributeCount>> attribute_probs;
};

// Eval mode has no stochastic layers; the seed only addresses the dropout
// stream should the generator be run in train mode.
template <typename T>
Synthesis<T> synthesize_probes(const nn::Generator<T>& gen, const std::vector<std::vector<float>>& inputs,
                               std::size_t height, std::size_t width, std::uint64_t seed = 0) {
  Synthesis<T> out;
  constexpr std::size_t kChunk = 16;
  const std::size_t channels = gen.config().in_channels;
  std::vector<std::size_t> all(inputs.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  for (std::size_t b = 0; b < inputs.size(); b += kChunk) {
    const std::span<const std::size_t> idx(all.data() + b, std::min(kChunk, inputs.size() - b));
    const auto x = train::stack_images<T>(inputs, idx, channels, height, width);
    const auto r = gen.forward(x, nn::Mode::kEval, seed);
    const std::size_t hw = height * width, d = r.embedding.dim(1), t_count = r.attr_logits.dim(1);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      out.images.emplace_back(r.synth.data().begin() + i * hw, r.synth.data().begin() + (i + 1) * hw);
      out.embeddings.emplace_back(r.embedding.data().begin() + i * d, r.embedding.data().begin() + (i + 1) * d);
      std::array<double, data::kAttributeCount> probs{};
      for (std::size_t t = 0; t < t_count && t < data::kAttributeCount; ++t) {
        probs[t] = 1.0 / (1.0 + std::exp(-static_cast<double>(r.attr_logits.data()[i * t_count + t])));
      }
      out.attribute_probs.push_back(probs);
    }
  }
  return out;
}

template <typename T>
Synthesis<T> synthesize_probe(const nn::Generator<T>& gen, std::span<const float> probe, std::size_t height,
                              std::size_t width, std::uint64_t seed = 0) {
  if (probe.size() != gen.config().in_channels * height * width) {
    throw ShapeError("synthesize_probe: probe has " + std::to_string(probe.size()) + " values, generator expects " +
                     std::to_string(gen.config().in_channels) + "x" + std::to_string(height) + "x" +
                     std::to_string(width));
  }
  return synthesize_probes(gen, {std::vector<float>(probe.begin(), probe.end())}, height, width, seed);
}

// ---------------------------------------------------------------------------
// Matching

struct Match {
  std::uint32_t identity;
  double distance;
};

inline double euclidean(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) {
    throw ShapeError("distance between vectors of size " + std::to_string(a.size()) + " and " +
                     std::to_string(b.size()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = double(a[i]) - double(b[i]);
    s += d * d;
  }
  return std::sqrt(s);
}

// Gallery identities ranked by ascending min distance to `synth`.
inline std::vector<Match> match_gallery(std::span<const float> synth, const std::vector<std::vector<float>>& gallery,
                                        std::span<const std::uint32_t> gallery_ids) {
  if (gallery.empty()) throw std::invalid_argument("match_gallery: empty gallery");
  if (gallery.size() != gallery_ids.size()) throw std::invalid_argument("match_gallery: ids/images size mismatch");
  std::map<std::uint32_t, double> best;
  for (std::size_t g = 0; g < gallery.size(); ++g) {
    const double d = euclidean(synth, gallery[g]);
    auto [it, fresh] = best.emplace(gallery_ids[g], d);
    if (!fresh) it->second = std::min(it->second, d);
  }
  std::vector<Match> ranked;
  for (const auto& [id, d] : best) ranked.push_back({id, d});
  std::stable_sort(ranked.begin(), ranked.end(), [](const Match& a, const Match& b) { return a.distance < b.distance; });
  return ranked;
}

// 1-based position of `identity` in a ranked list; 0 when absent.
inline std::size_t true_rank(const std::vector<Match>& ranked, std::uint32_t identity) {
  for (std::size_t i = 0; i < ranked.size(); ++i)
    if (ranked[i].identity == identity) return i + 1;
  return 0;
}

// cmc[k-1] = fraction of probes whose true identity ranks within the top k.
inline std::vector<double> cmc_and_rank(std::span<const std::size_t> true_ranks, std::size_t k_max,
                                        std::size_t gallery_identities) {
  if (k_max > gallery_identities) {
    throw std::invalid_argument("cmc: K = " + std::to_string(k_max) + " exceeds gallery identity count " +
                                std::to_string(gallery_identities));
  }
  if (true_ranks.empty()) throw std::invalid_argument("cmc: no probes");
  std::vector<std::size_t> hits(k_max, 0);
  for (auto r : true_ranks) {
    if (r == 0 || r > gallery_identities) throw std::invalid_argument("cmc: probe identity missing from gallery");
    if (r <= k_max) ++hits[r - 1];
  }
  std::vector<double> cmc(k_max);
  std::size_t cum = 0;
  for (std::size_t k = 0; k < k_max; ++k) {
    cum += hits[k];
    cmc[k] = static_cast<double>(cum) / static_cast<double>(true_ranks.size());
  }
  return cmc;
}

struct RocPoint {
  double threshold, fpr, tpr;
};

struct Roc {
  std::vector<RocPoint> points;  // from (0, 0) to (1, 1)
  double auc = 0.0;
};

// Accepts at distance <= threshold; thresholds sweep every distinct distance.
// AUC is the trapezoid area, accumulated in integers so it equals the
// Mann-Whitney probability P(genuine < impostor) + P(tie) / 2 exactly.
inline Roc verification_roc(std::span<const double> genuine, std::span<const double> impostor) {
  if (genuine.empty() || impostor.empty()) throw std::invalid_argument("verification_roc: empty distance list");
  std::vector<std::pair<double, bool>> all;  // (distance, is_genuine)
  for (double d : genuine) all.push_back({d, true});
  for (double d : impostor) all.push_back({d, false});
  for (const auto& [d, g] : all)
    if (std::isnan(d)) throw std::invalid_argument("verification_roc: NaN distance");
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  const std::uint64_t gn = genuine.size(), in = impostor.size();
  Roc roc;
  roc.points.push_back({-std::numeric_limits<double>::infinity(), 0.0, 0.0});
  std::uint64_t tp = 0, fp = 0, area2 = 0;  // area2 = 2 * area * gn * in
  for (std::size_t i = 0; i < all.size();) {
    const double t = all[i].first;
    const std::uint64_t tp0 = tp, fp0 = fp;
    for (; i < all.size() && all[i].first == t; ++i) (all[i].second ? tp : fp) += 1;
    area2 += (fp - fp0) * (tp + tp0);
    roc.points.push_back({t, double(fp) / double(in), double(tp) / double(gn)});
  }
  roc.auc = static_cast<double>(area2) / (2.0 * static_cast<double>(gn) * static_cast<double>(in));
  return roc;
}

struct Identification {
  std::vector<std::size_t> true_ranks;
  std::vector<double> cmc;  // k = 1 .. gallery identities
  std::vector<double> genuine, impostor;
  Roc roc;

  double rank(std::size_t k) const { return cmc.at(k - 1); }
};

// Ranks and verification distances for a set of synthesized probes.
inline Identification identify(const std::vector<std::vector<float>>& synth, std::span<const std::uint32_t> probe_ids,
                               const std::vector<std::vector<float>>& gallery,
                               std::span<const std::uint32_t> gallery_ids) {
  if (synth.size() != probe_ids.size()) throw std::invalid_argument("identify: probe ids/images size mismatch");
  Identification r;
  std::size_t identities = 0;
  for (std::size_t i = 0; i < synth.size(); ++i) {
    const auto ranked = match_gallery(synth[i], gallery, gallery_ids);
    identities = ranked.size();
    r.true_ranks.push_back(true_rank(ranked, probe_ids[i]));
    for (const auto& m : ranked) (m.identity == probe_ids[i] ? r.genuine : r.impostor).push_back(m.distance);
  }
  r.cmc = cmc_and_rank(r.true_ranks, identities, identities);
  r.roc = verification_roc(r.genuine, r.impostor);
  return r;
}

// ---------------------------------------------------------------------------
// Attribute scenarios

inline constexpr std::size_t kScenarioCount = 4;
inline constexpr std::array<const char*, kScenarioCount> kScenarioNames = {
    "visible_A", "polar_S0_A", "polar_finetuned_A", "polgan_heads"};

using AttributeAccuracy = std::array<double, data::kAttributeCount>;

struct ScenarioTable {
  std::array<AttributeAccuracy, kScenarioCount> accuracy{};

  double mean(std::size_t scenario) const { return train::mean_of(accuracy.at(scenario)); }
};

// Per-attribute fraction correct at threshold 0.5 against 0/1 labels.
inline AttributeAccuracy accuracy_of(const std::vector<std::array<double, data::kAttributeCount>>& probs,
                                     const std::vector<std::array<float, data::kAttributeCount>>& labels) {
  if (probs.empty() || probs.size() != labels.size()) throw std::invalid_argument("accuracy: size mismatch");
  AttributeAccuracy acc{};
  for (std::size_t i = 0; i < probs.size(); ++i)
    for (std::size_t t = 0; t < data::kAttributeCount; ++t)
      if ((probs[i][t] > 0.5) == (labels[i][t] > 0.5f)) acc[t] += 1.0;
  for (auto& a : acc) a /= static_cast<double>(probs.size());
  return acc;
}

inline std::vector<std::vector<float>> first_channel(const std::vector<std::vector<float>>& images, std::size_t hw) {
  std::vector<std::vector<float>> out;
  for (const auto& im : images) out.emplace_back(im.begin(), im.begin() + static_cast<std::ptrdiff_t>(hw));
  return out;
}

template <typename T>
std::vector<std::array<double, data::kAttributeCount>> predictor_probs(const nn::AttributePredictor<T>& a,
                                                                       const std::vector<std::vector<float>>& images,
                                                                       std::size_t size) {
  std::vector<std::size_t> all(images.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  const auto p = train::predict_attributes(a, images, all, a.config().in_channels, size);
  std::vector<std::array<double, data::kAttributeCount>> out;
  for (const auto& row : p) {
    std::array<double, data::kAttributeCount> r{};
    for (std::size_t t = 0; t < data::kAttributeCount; ++t) r[t] = static_cast<double>(row[t]);
    out.push_back(r);
  }
  return out;
}

// Copy of A with a 3-channel input (S0 weights kept, S1/S2 zero-initialized),
// fine-tuned on polar images of the attribute corpus' train identities.
template <typename T>
nn::AttributePredictor<T> finetune_polar_predictor(const nn::AttributePredictor<T>& a, const train::TrainConfig& config) {
  const auto corpus = train::attribute_corpus(config.pretrain, a.config().input_size, config.seed);
  const auto prep = data::prepare(corpus, config.preprocess);
  const auto train_idx = train::split_samples(corpus, corpus.manifest.train_identities);
  auto polar = a.expand_input_channels(data::kPolarChannels);
  train::fit_attribute_predictor(polar, prep, prep.polar, data::kPolarChannels, train_idx,
                                 config.pretrain.finetune_epochs, config.pretrain.batch_size, config.pretrain.lr,
                                 config.seed, "attr-finetune");
  return polar;
}

// Accuracy of the four scenarios on the test samples' attributes. A polar
// fine-tuned predictor is built when none is supplied.
template <typename T>
ScenarioTable attribute_scenarios(const nn::Generator<T>& pol_gen, const nn::AttributePredictor<T>& a,
                                  const data::Dataset& ds, const data::PreparedDataset& p,
                                  const train::TrainConfig& config,
                                  const nn::AttributePredictor<T>* polar_finetuned = nullptr) {
  if (!a.initialized()) throw std::invalid_argument("attribute scenarios: attribute predictor missing");
  const auto test = data::index_split(ds, ds.manifest.test_identities).all_samples;
  if (test.empty()) throw std::invalid_argument("attribute scenarios: no test samples");
  std::vector<std::vector<float>> vis, pol;
  std::vector<std::array<float, data::kAttributeCount>> labels;
  for (auto s : test) {
    vis.push_back(p.visible[s]);
    pol.push_back(p.polar[s]);
    labels.push_back(p.attributes[s]);
  }
  std::optional<nn::AttributePredictor<T>> tuned;
  if (!polar_finetuned) {
    tuned = finetune_polar_predictor(a, config);
    polar_finetuned = &*tuned;
  }
  ScenarioTable table;
  table.accuracy[0] = accuracy_of(predictor_probs(a, vis, p.height), labels);
  table.accuracy[1] = accuracy_of(predictor_probs(a, first_channel(pol, p.height * p.width), p.height), labels);
  table.accuracy[2] = accuracy_of(predictor_probs(*polar_finetuned, pol, p.height), labels);
  table.accuracy[3] = accuracy_of(synthesize_probes(pol_gen, pol, p.height, p.width).attribute_probs, labels);
  return table;
}

// ---------------------------------------------------------------------------
// Embeddings

struct EmbeddingRow {
  std::uint32_t identity;
  std::size_t sample;
  std::string modality;  // "visible" (z1) or "polar" (z2)
  std::vector<float> z;
};

template <typename T>
std::vector<EmbeddingRow> embed_test_split(const train::CoupledModel<T>& m, const data::Dataset& ds,
                                           const data::PreparedDataset& p) {
  const auto test = data::index_split(ds, ds.manifest.test_identities).all_samples;
  std::vector<std::vector<float>> vis, pol;
  for (auto s : test) {
    vis.push_back(p.visible[s]);
    pol.push_back(p.polar[s]);
  }
  const auto zv = synthesize_probes(m.vis_gen, vis, p.height, p.width).embeddings;
  const auto zp = synthesize_probes(m.pol_gen, pol, p.height, p.width).embeddings;
  std::vector<EmbeddingRow> rows;
  for (std::size_t i = 0; i < test.size(); ++i) {
    rows.push_back({p.identity[test[i]], test[i], "visible", zv[i]});
    rows.push_back({p.identity[test[i]], test[i], "polar", zp[i]});
  }
  return rows;
}

inline std::string embeddings_csv(const std::vector<EmbeddingRow>& rows) {
  std::string out = "identity,sample,modality";
  const std::size_t d = rows.empty() ? 0 : rows.front().z.size();
  for (std::size_t k = 0; k < d; ++k) out += ",z" + std::to_string(k);
  out += "\n";
  for (const auto& r : rows) {
    out += std::to_string(r.identity) + "," + std::to_string(r.sample) + "," + r.modality;
    for (float v : r.z) out += "," + train::format_number(v);
    out += "\n";
  }
  return out;
}

struct EmbeddingSeparation {
  double genuine_mean = 0.0, impostor_mean = 0.0;
};

// Mean visible-polar embedding distance over same-identity and
// different-identity cross-modal pairs.
inline EmbeddingSeparation embedding_separation(const std::vector<EmbeddingRow>& rows) {
  EmbeddingSeparation s;
  std::size_t gn = 0, in = 0;
  for (const auto& a : rows) {
    if (a.modality != "visible") continue;
    for (const auto& b : rows) {
      if (b.modality != "polar") continue;
      const double d = euclidean(a.z, b.z);
      if (a.identity == b.identity) {
        s.genuine_mean += d;
        ++gn;
      } else {
        s.impostor_mean += d;
        ++in;
      }
    }
  }
  if (gn) s.genuine_mean /= double(gn);
  if (in) s.impostor_mean /= double(in);
  return s;
}

// ---------------------------------------------------------------------------
// Reports

enum class MatchSpace { kPixel, kEmbedding };

struct EvalOptions {
  std::size_t gallery_samples = 1;
  MatchSpace space = MatchSpace::kPixel;
  bool scenarios = false;
};

struct MetricReport {
  std::uint64_t step = 0, seed = 0;
  std::string checkpoint;
  nlohmann::json config = nlohmann::json::object();
  Identification ident;
  std::optional<ScenarioTable> scenarios;
};

// Identification and verification on the test split with the Pol-GAN alone.
// Attribute scenarios, when requested, use `predictor` or else the
// checkpoint's A, which must then have been pretrained.
template <typename T>
MetricReport evaluate(const train::TrainState<T>& state, const data::Dataset& ds, const EvalOptions& opts = {},
                      const nn::AttributePredictor<T>* predictor = nullptr,
                      const nn::AttributePredictor<T>* polar_finetuned = nullptr) {
  if (ds.manifest.height != state.image_size || ds.manifest.width != state.image_size) {
    throw ShapeError("evaluate: dataset is " + std::to_string(ds.manifest.height) + "x" +
                     std::to_string(ds.manifest.width) + ", checkpoint expects " + std::to_string(state.image_size));
  }
  const auto p = data::prepare(ds, state.config.preprocess);
  const auto set = make_gallery_probe_set(ds, p, opts.gallery_samples);
  MetricReport r;
  r.step = state.step;
  r.seed = state.config.seed;
  r.config = state.config;
  const auto synth = synthesize_probes(state.model.pol_gen, set.probes, p.height, p.width);
  if (opts.space == MatchSpace::kPixel) {
    r.ident = identify(synth.images, set.probe_ids, set.gallery, set.gallery_ids);
  } else {
    const auto gz = synthesize_probes(state.model.vis_gen, set.gallery, p.height, p.width).embeddings;
    r.ident = identify(synth.embeddings, set.probe_ids, gz, set.gallery_ids);
  }
  if (opts.scenarios) {
    if (!predictor && !state.predictor_pretrained) {
      throw std::invalid_argument("attribute scenarios need a pretrained attribute predictor");
    }
    r.scenarios = attribute_scenarios(state.model.pol_gen, predictor ? *predictor : state.model.attr, ds, p,
                                      state.config, polar_finetuned);
  }
  return r;
}

inline std::string cmc_csv(const MetricReport& r) {
  std::string out = "rank,rate\n";
  for (std::size_t k = 0; k < r.ident.cmc.size(); ++k)
    out += std::to_string(k + 1) + "," + train::format_number(r.ident.cmc[k]) + "\n";
  return out;
}

inline std::string roc_csv(const MetricReport& r) {
  std::string out = "fpr,tpr\n";
  for (const auto& pt : r.ident.roc.points) out += train::format_number(pt.fpr) + "," + train::format_number(pt.tpr) + "\n";
  return out;
}

inline std::string attrs_csv(const ScenarioTable& t) {
  std::string out = "scenario,attribute,accuracy\n";
  for (std::size_t s = 0; s < kScenarioCount; ++s)
    for (std::size_t a = 0; a < data::kAttributeCount; ++a)
      out += std::string(kScenarioNames[s]) + "," + data::kAttributeNames[a] + "," +
             train::format_number(t.accuracy[s][a]) + "\n";
  return out;
}

inline std::string summary_text(const MetricReport& r) {
  std::string out;
  out += "checkpoint: " + r.checkpoint + "\n";
  out += "step: " + std::to_string(r.step) + "\n";
  out += "seed: " + std::to_string(r.seed) + "\n";
  out += "probes: " + std::to_string(r.ident.true_ranks.size()) + "\n";
  out += "gallery_identities: " + std::to_string(r.ident.cmc.size()) + "\n";
  for (std::size_t k : {1, 5, 10})
    if (k <= r.ident.cmc.size()) out += "rank" + std::to_string(k) + ": " + train::format_number(r.ident.rank(k)) + "\n";
  out += "auc: " + train::format_number(r.ident.roc.auc) + "\n";
  if (r.scenarios) {
    for (std::size_t s = 0; s < kScenarioCount; ++s)
      out += std::string("attr_mean_") + kScenarioNames[s] + ": " + train::format_number(r.scenarios->mean(s)) + "\n";
  }
  out += "config: " + r.config.dump() + "\n";
  return out;
}

// Writes cmc / roc / attrs CSVs and the summary, named by step and seed.
// Returns the paths written.
inline std::vector<std::filesystem::path> write_report(const MetricReport& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const std::string tag = train::run_tag(r.step, r.seed);
  std::vector<std::filesystem::path> paths{dir / ("cmc_" + tag + ".csv"), dir / ("roc_" + tag + ".csv"),
                                           dir / ("summary_" + tag + ".txt")};
  io::write_text_atomic(paths[0], cmc_csv(r));
  io::write_text_atomic(paths[1], roc_csv(r));
  io::write_text_atomic(paths[2], summary_text(r));
  if (r.scenarios) {
    paths.push_back(dir / ("attrs_" + tag + ".csv"));
    io::write_text_atomic(paths.back(), attrs_csv(*r.scenarios));
  }
  return paths;
}

}  // namespace agc::eval
