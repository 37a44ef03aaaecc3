#pragma once

// Synthetic paired visible / polarimetric face data, DoG preprocessing,
// balanced genuine/impostor pair sampling, and the on-disk dataset format.
//
// Dataset file (little-endian):
//   "AGCD" | u16 version=1 | u32 N | u16 H | u16 W | u8 T
//   N x { u32 identity | u16 attribute bitmask | f32[H*W] visible |
//         f32[3*H*W] polar (S0, S1, S2) | u32 CRC32 of the record bytes above }
// A JSON manifest is written next to it as "<path>.json".

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "agcgan/binary_io.hpp"
#include "agcgan/random.hpp"
#include "json.hpp"

namespace agc::data {

inline constexpr std::size_t kAttributeCount = 10;
inline constexpr std::array<const char*, kAttributeCount> kAttributeNames = {
    "Arched_Eyebrows", "Big_Lips",    "Big_Nose", "Bushy_Eyebrows",       "Bald",
    "Mustache",        "Narrow_Eyes", "Beard",    "Mouth_Slightly_Open", "Young"};

enum Attribute : std::size_t {
  kArchedEyebrows = 0,
  kBigLips,
  kBigNose,
  kBushyEyebrows,
  kBald,
  kMustache,
  kNarrowEyes,
  kBeard,
  kMouthOpen,
  kYoung,
};

inline constexpr std::uint16_t kDatasetVersion = 1;
inline constexpr std::size_t kPolarChannels = 3;

struct SyntheticParams {
  std::size_t identities = 20;
  std::size_t samples_per_identity = 6;
  std::size_t height = 64;
  std::size_t width = 64;
  std::uint64_t seed = 0;
  double degradation = 0.0;  // 0 = none; extra polar blur and noise
  double test_fraction = 0.3;
  double variation = 2.0;    // scales every per-sample perturbation; 0 gives identical samples
  double noise = 0.02;       // visible pixel noise (intensity units)
  double polar_noise = 0.03;

  void validate() const {
    auto pow2 = [](std::size_t v) { return v >= 32 && (v & (v - 1)) == 0; };
    if (identities < 2) throw std::invalid_argument("synthetic data: need at least 2 identities");
    if (samples_per_identity < 1) throw std::invalid_argument("synthetic data: need at least 1 sample per identity");
    if (!pow2(height) || !pow2(width)) {
      throw std::invalid_argument("synthetic data: height and width must be powers of 2 >= 32, got " +
                                  std::to_string(height) + "x" + std::to_string(width));
    }
    if (height > 65535 || width > 65535) throw std::invalid_argument("synthetic data: image too large");
    if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
      throw std::invalid_argument("synthetic data: test_fraction must be in (0, 1)");
    }
    if (degradation < 0.0 || variation < 0.0) throw std::invalid_argument("synthetic data: negative knob");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SyntheticParams, identities, samples_per_identity, height,
                                                width, seed, degradation, test_fraction, variation, noise,
                                                polar_noise)

struct PairedSample {
  std::uint32_t identity = 0;
  std::uint16_t attributes = 0;  // bit t = attribute t
  std::vector<float> visible;    // 1 x H x W in [-1, 1]
  std::vector<float> polar;      // 3 x H x W (S0, S1, S2) in [-1, 1]

  bool attribute(std::size_t t) const { return (attributes >> t) & 1u; }
  bool operator==(const PairedSample&) const = default;
};

struct DatasetManifest {
  int version = kDatasetVersion;
  std::size_t sample_count = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t attribute_count = kAttributeCount;
  std::size_t identity_count = 0;
  std::size_t samples_per_identity = 0;
  std::vector<std::uint32_t> train_identities;
  std::vector<std::uint32_t> test_identities;
  std::vector<std::string> attribute_names;
  SyntheticParams generator;

  bool operator==(const DatasetManifest& o) const {
    return version == o.version && sample_count == o.sample_count && height == o.height &&
           width == o.width && attribute_count == o.attribute_count && identity_count == o.identity_count &&
           samples_per_identity == o.samples_per_identity && train_identities == o.train_identities &&
           test_identities == o.test_identities && attribute_names == o.attribute_names &&
           nlohmann::json(generator) == nlohmann::json(o.generator);
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(DatasetManifest, version, sample_count, height, width, attribute_count,
                                   identity_count, samples_per_identity, train_identities, test_identities,
                                   attribute_names, generator)

struct Dataset {
  DatasetManifest manifest;
  std::vector<PairedSample> samples;

  std::size_t image_size() const { return manifest.height * manifest.width; }
};

// ---------------------------------------------------------------------------
// Synthetic generator

struct Blob {
  double u, v, sigma, amplitude;
};

struct IdentityLatent {
  double face_w, face_h, cx, cy;
  double skin;
  double eye_dx, eye_y;
  double nose_len;
  double mouth_y, mouth_w;
  double hairline;
  std::array<Blob, 4> blobs;
  std::uint16_t attributes;

  bool attribute(std::size_t t) const { return (attributes >> t) & 1u; }
};

struct SampleVariation {
  double shift_u, shift_v;  // in normalized [-1, 1] units
  double gain, offset;
  double mouth_scale;
};

inline IdentityLatent draw_identity(std::uint64_t seed, std::uint32_t identity) {
  Rng rng = make_rng(seed, "identity", identity);
  auto u = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  IdentityLatent l{};
  l.face_w = u(0.55, 0.72);
  l.face_h = u(0.72, 0.88);
  l.cx = u(-0.05, 0.05);
  l.cy = u(-0.04, 0.06);
  l.skin = u(0.5, 0.85);
  l.eye_dx = u(0.19, 0.29);
  l.eye_y = u(-0.24, -0.1);
  l.nose_len = u(0.14, 0.24);
  l.mouth_y = u(0.34, 0.46);
  l.mouth_w = u(0.15, 0.25);
  l.hairline = u(-0.62, -0.46);
  for (auto& b : l.blobs) b = {u(-0.4, 0.4), u(-0.45, 0.5), u(0.05, 0.11), u(-0.18, 0.18)};
  std::bernoulli_distribution coin(0.5);
  l.attributes = 0;
  for (std::size_t t = 0; t < kAttributeCount; ++t)
    if (coin(rng)) l.attributes |= static_cast<std::uint16_t>(1u << t);
  return l;
}

inline SampleVariation draw_variation(std::uint64_t seed, std::uint32_t identity, std::uint32_t sample,
                                      std::size_t width, double scale) {
  Rng rng = make_rng(seed, "sample", identity, sample);
  auto u = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  const double px = 2.0 / static_cast<double>(width);
  SampleVariation s{};
  s.shift_u = scale * u(-0.5, 0.5) * px;
  s.shift_v = scale * u(-0.5, 0.5) * px;
  s.gain = 1.0 + scale * u(-0.06, 0.06);
  s.offset = scale * u(-0.04, 0.04);
  s.mouth_scale = 1.0 + scale * u(-0.08, 0.08);
  return s;
}

namespace detail {

// Coverage of an axis-aligned ellipse with a ~1 pixel anti-aliased edge.
inline double ellipse_cover(double du, double dv, double rx, double ry, double px) {
  const double r = std::sqrt((du / rx) * (du / rx) + (dv / ry) * (dv / ry));
  const double signed_dist = (r - 1.0) * std::min(rx, ry);
  return std::clamp(0.5 - signed_dist / px, 0.0, 1.0);
}

inline double band_cover(double d, double half, double px) { return std::clamp(0.5 - (std::abs(d) - half) / px, 0.0, 1.0); }

inline double mix(double a, double b, double t) { return a + (b - a) * t; }

}  // namespace detail

// Noise-free visible intensity in [0, 1], H x W row-major.
inline std::vector<double> render_visible_clean(const IdentityLatent& l, const SampleVariation& s,
                                                std::size_t height, std::size_t width) {
  using detail::band_cover;
  using detail::ellipse_cover;
  using detail::mix;
  const double px = 2.0 / static_cast<double>(width);
  std::vector<double> img(height * width);
  const bool bald = l.attribute(kBald), narrow = l.attribute(kNarrowEyes), arched = l.attribute(kArchedEyebrows);
  const bool bushy = l.attribute(kBushyEyebrows), big_nose = l.attribute(kBigNose), big_lips = l.attribute(kBigLips);
  const bool open = l.attribute(kMouthOpen), mustache = l.attribute(kMustache), beard = l.attribute(kBeard);
  const bool young = l.attribute(kYoung);
  for (std::size_t r = 0; r < height; ++r) {
    for (std::size_t c = 0; c < width; ++c) {
      const double u = (static_cast<double>(c) + 0.5) * 2.0 / static_cast<double>(width) - 1.0 - s.shift_u - l.cx;
      const double v = (static_cast<double>(r) + 0.5) * 2.0 / static_cast<double>(height) - 1.0 - s.shift_v - l.cy;
      double I = 0.15;
      const double face = ellipse_cover(u, v, l.face_w, l.face_h, px);
      I = mix(I, l.skin, face);
      for (const auto& b : l.blobs) {
        const double d2 = (u - b.u) * (u - b.u) + (v - b.v) * (v - b.v);
        I += face * b.amplitude * std::exp(-d2 / (2 * b.sigma * b.sigma));
      }
      if (!bald) {
        const double head = ellipse_cover(u, v, l.face_w * 1.06, l.face_h * 1.04, px);
        const double top = std::clamp(0.5 - (v - l.hairline) / px, 0.0, 1.0);
        I = mix(I, 0.08, head * top);
      }
      if (!young) {
        for (int k = 0; k < 3; ++k) {
          const double y0 = l.hairline + 0.1 + 0.06 * k;
          if (std::abs(u) < 0.26) I = mix(I, 0.55 * l.skin, face * band_cover(v - y0, 0.012, px));
        }
        for (double side : {-1.0, 1.0}) {
          const double du = u - side * (0.12 + 0.25 * (v - l.mouth_y + 0.2));
          if (v > l.mouth_y - 0.22 && v < l.mouth_y + 0.02) I = mix(I, 0.55 * l.skin, face * band_cover(du, 0.01, px));
        }
      }
      if (beard) {
        const double chin = std::clamp(0.5 - (l.mouth_y + 0.07 - v) / px, 0.0, 1.0);
        I = mix(I, 0.1, 0.9 * face * chin);
      }
      for (double side : {-1.0, 1.0}) {
        const double eu = u - side * l.eye_dx, ev = v - l.eye_y;
        const double brow_half = bushy ? 0.035 : 0.012;
        const double curve = arched ? -0.07 * (1.0 - (eu / 0.1) * (eu / 0.1)) : 0.0;
        if (std::abs(eu) < 0.1) I = mix(I, 0.1, band_cover(ev + 0.1 - curve, brow_half, px));
        I = mix(I, 0.04, ellipse_cover(eu, ev, 0.075, narrow ? 0.018 : 0.045, px));
      }
      const double nose_rx = big_nose ? 0.095 : 0.04, nose_ry = (big_nose ? 1.35 : 1.0) * l.nose_len / 2;
      const double nose_cy = l.eye_y + 0.06 + l.nose_len / 2;
      I = mix(I, 0.5 * l.skin, ellipse_cover(u, v - nose_cy, nose_rx, nose_ry, px));
      if (mustache) I = mix(I, 0.07, ellipse_cover(u, v - (l.mouth_y - 0.075), l.mouth_w * 0.95, 0.028, px));
      const double mw = l.mouth_w * s.mouth_scale;
      I = mix(I, 0.28, ellipse_cover(u, v - l.mouth_y, mw, big_lips ? 0.075 : 0.03, px));
      if (open) I = mix(I, 0.0, ellipse_cover(u, v - l.mouth_y, mw * 0.8, big_lips ? 0.035 : 0.025, px));
      img[r * width + c] = std::clamp(I, 0.0, 1.0);
    }
  }
  return img;
}

// Separable Gaussian smoothing with half-sample symmetric borders, one plane.
inline std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma > 0.0)) throw std::invalid_argument("gaussian kernel: sigma must be positive");
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) total += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= total;
  return k;
}

namespace detail {

inline std::size_t reflect(long i, std::size_t n) {
  const long len = static_cast<long>(n);
  if (len == 1) return 0;
  const long period = 2 * len;
  i %= period;
  if (i < 0) i += period;
  return static_cast<std::size_t>(i < len ? i : period - 1 - i);
}

}  // namespace detail

inline std::vector<double> gaussian_blur(std::span<const double> plane, std::size_t height, std::size_t width,
                                         double sigma) {
  const auto k = gaussian_kernel(sigma);
  const long radius = static_cast<long>(k.size() / 2);
  std::vector<double> tmp(plane.size()), out(plane.size());
  for (std::size_t r = 0; r < height; ++r)
    for (std::size_t c = 0; c < width; ++c) {
      double acc = 0.0;
      for (long j = -radius; j <= radius; ++j)
        acc += k[j + radius] * plane[r * width + detail::reflect(static_cast<long>(c) + j, width)];
      tmp[r * width + c] = acc;
    }
  for (std::size_t r = 0; r < height; ++r)
    for (std::size_t c = 0; c < width; ++c) {
      double acc = 0.0;
      for (long j = -radius; j <= radius; ++j)
        acc += k[j + radius] * tmp[detail::reflect(static_cast<long>(r) + j, height) * width + c];
      out[r * width + c] = acc;
    }
  return out;
}

// S0 is a blurred, contrast-inverted intensity transform of the clean visible
// image; S1 and S2 are its horizontal and vertical gradient fields. Each
// channel gets independent noise. Result is 3 x H x W in [-1, 1].
inline std::vector<double> render_polar_clean(std::span<const double> visible, std::size_t height,
                                              std::size_t width, double degradation) {
  const auto s0 = gaussian_blur(visible, height, width, 1.2 + 2.0 * degradation);
  const auto base = gaussian_blur(visible, height, width, 0.8 + 2.0 * degradation);
  const std::size_t hw = height * width;
  std::vector<double> out(3 * hw);
  for (std::size_t r = 0; r < height; ++r)
    for (std::size_t c = 0; c < width; ++c) {
      const std::size_t i = r * width + c;
      const double gx = 0.5 * (base[r * width + std::min(c + 1, width - 1)] - base[r * width + (c ? c - 1 : 0)]);
      const double gy = 0.5 * (base[std::min(r + 1, height - 1) * width + c] - base[(r ? r - 1 : 0) * width + c]);
      out[i] = std::clamp(2.0 * (0.9 - 0.75 * s0[i]) - 1.0, -1.0, 1.0);
      out[hw + i] = std::clamp(4.0 * gx, -1.0, 1.0);
      out[2 * hw + i] = std::clamp(4.0 * gy, -1.0, 1.0);
    }
  return out;
}

inline PairedSample make_sample(const SyntheticParams& p, std::uint32_t identity, std::uint32_t index) {
  const IdentityLatent latent = draw_identity(p.seed, identity);
  const SampleVariation var = draw_variation(p.seed, identity, index, p.width, p.variation);
  const std::size_t hw = p.height * p.width;
  const auto clean = render_visible_clean(latent, var, p.height, p.width);
  const auto polar = render_polar_clean(clean, p.height, p.width, p.degradation);
  Rng rng = make_rng(p.seed, "noise", identity, index);
  std::normal_distribution<double> gauss(0.0, 1.0);
  PairedSample s;
  s.identity = identity;
  s.attributes = latent.attributes;
  s.visible.resize(hw);
  for (std::size_t i = 0; i < hw; ++i) {
    const double v = clean[i] * var.gain + var.offset + p.variation * p.noise * gauss(rng);
    s.visible[i] = static_cast<float>(std::clamp(2.0 * v - 1.0, -1.0, 1.0));
  }
  s.polar.resize(3 * hw);
  const double pn = p.variation * p.polar_noise * (1.0 + 2.0 * p.degradation);
  for (std::size_t i = 0; i < 3 * hw; ++i) {
    s.polar[i] = static_cast<float>(std::clamp(polar[i] + pn * gauss(rng), -1.0, 1.0));
  }
  return s;
}

inline Dataset generate_synthetic_dataset(const SyntheticParams& params) {
  params.validate();
  Dataset ds;
  auto& m = ds.manifest;
  m.height = params.height;
  m.width = params.width;
  m.identity_count = params.identities;
  m.samples_per_identity = params.samples_per_identity;
  m.sample_count = params.identities * params.samples_per_identity;
  m.attribute_names.assign(kAttributeNames.begin(), kAttributeNames.end());
  m.generator = params;

  std::vector<std::uint32_t> ids(params.identities);
  std::iota(ids.begin(), ids.end(), 0u);
  Rng split_rng = make_rng(params.seed, "split");
  std::shuffle(ids.begin(), ids.end(), split_rng);
  const auto n_test = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::lround(params.test_fraction * double(params.identities))), 1,
      params.identities - 1);
  m.test_identities.assign(ids.begin(), ids.begin() + static_cast<long>(n_test));
  m.train_identities.assign(ids.begin() + static_cast<long>(n_test), ids.end());
  std::sort(m.test_identities.begin(), m.test_identities.end());
  std::sort(m.train_identities.begin(), m.train_identities.end());

  ds.samples.reserve(m.sample_count);
  for (std::uint32_t id = 0; id < params.identities; ++id)
    for (std::uint32_t k = 0; k < params.samples_per_identity; ++k) ds.samples.push_back(make_sample(params, id, k));
  return ds;
}

// ---------------------------------------------------------------------------
// Difference-of-Gaussians preprocessing

struct PreprocessConfig {
  bool dog = true;
  double sigma1 = 1.0;
  double sigma2 = 2.0;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PreprocessConfig, dog, sigma1, sigma2)

// G(sigma1) * img - G(sigma2) * img for each of the C planes of a C x H x W image.
inline std::vector<double> dog_filter(std::span<const double> image, std::size_t channels, std::size_t height,
                                      std::size_t width, double sigma1, double sigma2) {
  if (!(sigma1 > 0.0) || !(sigma2 > 0.0)) throw std::invalid_argument("dog filter: sigmas must be positive");
  if (!(sigma1 < sigma2)) throw std::invalid_argument("dog filter: sigma1 must be smaller than sigma2");
  if (image.size() != channels * height * width) throw std::invalid_argument("dog filter: image size mismatch");
  const std::size_t hw = height * width;
  std::vector<double> out(image.size());
  for (std::size_t c = 0; c < channels; ++c) {
    const auto plane = image.subspan(c * hw, hw);
    const auto a = gaussian_blur(plane, height, width, sigma1);
    const auto b = gaussian_blur(plane, height, width, sigma2);
    for (std::size_t i = 0; i < hw; ++i) out[c * hw + i] = a[i] - b[i];
  }
  return out;
}

// Per channel: subtract the mean, then divide by the largest magnitude so
// values land in [-1, 1]. An all-zero channel stays zero.
inline void normalize_band(std::span<double> image, std::size_t channels) {
  const std::size_t hw = image.size() / channels;
  for (std::size_t c = 0; c < channels; ++c) {
    auto plane = image.subspan(c * hw, hw);
    const double mu = std::accumulate(plane.begin(), plane.end(), 0.0) / double(hw);
    double peak = 0.0;
    for (auto& v : plane) {
      v -= mu;
      peak = std::max(peak, std::abs(v));
    }
    if (peak > 1e-12)
      for (auto& v : plane) v /= peak;
  }
}

inline std::vector<float> preprocess(std::span<const float> image, std::size_t channels, std::size_t height,
                                     std::size_t width, const PreprocessConfig& cfg) {
  if (!cfg.dog) return std::vector<float>(image.begin(), image.end());
  std::vector<double> in(image.begin(), image.end());
  auto out = dog_filter(in, channels, height, width, cfg.sigma1, cfg.sigma2);
  normalize_band(out, channels);
  return std::vector<float>(out.begin(), out.end());
}

// Preprocessed copy of every sample, the form the networks consume.
struct PreparedDataset {
  std::size_t height = 0, width = 0;
  std::vector<std::uint32_t> identity;
  std::vector<std::vector<float>> visible;  // 1 x H x W
  std::vector<std::vector<float>> polar;    // 3 x H x W
  std::vector<std::array<float, kAttributeCount>> attributes;

  std::size_t size() const { return identity.size(); }
};

inline PreparedDataset prepare(const Dataset& ds, const PreprocessConfig& cfg) {
  PreparedDataset p;
  p.height = ds.manifest.height;
  p.width = ds.manifest.width;
  for (const auto& s : ds.samples) {
    p.identity.push_back(s.identity);
    p.visible.push_back(preprocess(s.visible, 1, p.height, p.width, cfg));
    p.polar.push_back(preprocess(s.polar, kPolarChannels, p.height, p.width, cfg));
    std::array<float, kAttributeCount> a{};
    for (std::size_t t = 0; t < kAttributeCount; ++t) a[t] = s.attribute(t) ? 1.f : 0.f;
    p.attributes.push_back(a);
  }
  return p;
}

// ---------------------------------------------------------------------------
// Balanced pair sampling

struct SplitIndex {
  std::vector<std::uint32_t> identities;
  std::vector<std::vector<std::size_t>> samples;  // parallel to identities
  std::vector<std::size_t> all_samples;
};

inline SplitIndex index_split(const std::vector<std::uint32_t>& sample_identity,
                              std::span<const std::uint32_t> split_identities) {
  SplitIndex idx;
  idx.identities.assign(split_identities.begin(), split_identities.end());
  std::sort(idx.identities.begin(), idx.identities.end());
  idx.samples.resize(idx.identities.size());
  for (std::size_t i = 0; i < sample_identity.size(); ++i) {
    auto it = std::lower_bound(idx.identities.begin(), idx.identities.end(), sample_identity[i]);
    if (it != idx.identities.end() && *it == sample_identity[i]) {
      idx.samples[static_cast<std::size_t>(it - idx.identities.begin())].push_back(i);
      idx.all_samples.push_back(i);
    }
  }
  for (std::size_t k = 0; k < idx.identities.size(); ++k) {
    if (idx.samples[k].empty()) {
      throw std::invalid_argument("split identity " + std::to_string(idx.identities[k]) + " has no samples");
    }
  }
  return idx;
}

inline SplitIndex index_split(const Dataset& ds, std::span<const std::uint32_t> split_identities) {
  std::vector<std::uint32_t> ids;
  for (const auto& s : ds.samples) ids.push_back(s.identity);
  return index_split(ids, split_identities);
}

struct SamplePair {
  std::size_t visible_index;  // sample feeding the Vis-GAN
  std::size_t polar_index;    // sample feeding the Pol-GAN
  std::uint32_t visible_identity, polar_identity;
  std::uint8_t y_cont;        // 0 genuine, 1 impostor
};

struct PairBatch {
  std::vector<SamplePair> pairs;
  std::size_t genuine_count() const {
    return static_cast<std::size_t>(std::count_if(pairs.begin(), pairs.end(), [](auto& p) { return p.y_cont == 0; }));
  }
};

// batch_size/2 genuine and batch_size/2 impostor pairs, interleaved. Anchors
// are uniform over the split's samples; impostor identities are uniform over
// the split's other identities.
inline PairBatch sample_balanced_pairs(const SplitIndex& split, std::size_t batch_size, Rng& rng) {
  if (batch_size == 0 || batch_size % 2 != 0) {
    throw std::invalid_argument("pair sampler: batch_size must be even and positive, got " +
                                std::to_string(batch_size));
  }
  if (split.identities.size() < 2) throw std::invalid_argument("pair sampler: split needs at least 2 identities");
  auto pick = [&](std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); };
  PairBatch batch;
  for (std::size_t k = 0; k < batch_size; ++k) {
    const std::size_t a = pick(split.identities.size());
    const std::size_t anchor = split.samples[a][pick(split.samples[a].size())];
    std::size_t b = a;
    if (k % 2 == 1) {
      b = pick(split.identities.size() - 1);
      if (b >= a) ++b;
    }
    const std::size_t partner = split.samples[b][pick(split.samples[b].size())];
    batch.pairs.push_back({anchor, partner, split.identities[a], split.identities[b],
                           static_cast<std::uint8_t>(k % 2)});
  }
  return batch;
}

inline PairBatch sample_balanced_pairs(const SplitIndex& split, std::size_t batch_size, std::uint64_t seed) {
  Rng rng(seed);
  return sample_balanced_pairs(split, batch_size, rng);
}

// ---------------------------------------------------------------------------
// Persistence

inline std::filesystem::path manifest_path(const std::filesystem::path& dataset_path) {
  auto p = dataset_path;
  p += ".json";
  return p;
}

inline void save_dataset(const std::filesystem::path& path, const Dataset& ds) {
  const auto& m = ds.manifest;
  const std::size_t hw = m.height * m.width;
  if (m.sample_count != ds.samples.size()) throw std::invalid_argument("save_dataset: manifest sample_count mismatch");
  io::ByteWriter w;
  w.bytes("AGCD");
  w.u16(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(ds.samples.size()));
  w.u16(static_cast<std::uint16_t>(m.height));
  w.u16(static_cast<std::uint16_t>(m.width));
  w.u8(static_cast<std::uint8_t>(m.attribute_count));
  for (const auto& s : ds.samples) {
    if (s.visible.size() != hw || s.polar.size() != kPolarChannels * hw) {
      throw std::invalid_argument("save_dataset: sample of identity " + std::to_string(s.identity) +
                                  " has wrong image size");
    }
    const std::size_t start = w.size();
    w.u32(s.identity);
    w.u16(s.attributes);
    w.f32s(s.visible);
    w.f32s(s.polar);
    w.u32(io::crc32_of(w.since(start)));
  }
  io::write_file_atomic(path, w.buffer());
  io::write_text_atomic(manifest_path(path), nlohmann::json(m).dump(2) + "\n");
}

inline Dataset load_dataset(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  const std::string ctx = "dataset '" + path.string() + "'";
  if (bytes.size() < 4 || std::string(bytes.begin(), bytes.begin() + 4) != "AGCD") {
    throw io::MagicError(ctx + ": bad magic (expected \"AGCD\")");
  }
  io::ByteReader r(bytes, ctx);
  r.str(4);
  const auto version = r.u16();
  if (version != kDatasetVersion) {
    throw io::VersionError(ctx + ": unsupported version " + std::to_string(version));
  }
  Dataset ds;
  const std::size_t n = r.u32();
  const std::size_t h = r.u16(), w = r.u16(), t = r.u8();
  const std::size_t hw = h * w;
  ds.samples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t start = r.position();
    PairedSample s;
    s.identity = r.u32();
    s.attributes = r.u16();
    s.visible.resize(hw);
    s.polar.resize(kPolarChannels * hw);
    r.f32s(s.visible);
    r.f32s(s.polar);
    const std::size_t end = r.position();
    const auto stored = r.u32();
    if (stored != io::crc32_of(r.between(start, end))) {
      throw io::ChecksumError(ctx + ": checksum mismatch in sample " + std::to_string(i), i);
    }
    ds.samples.push_back(std::move(s));
  }
  if (r.remaining() != 0) throw io::FormatError(ctx + ": trailing bytes after last sample");

  const auto mpath = manifest_path(path);
  const auto mbytes = io::read_file(mpath);
  try {
    ds.manifest = nlohmann::json::parse(mbytes.begin(), mbytes.end()).get<DatasetManifest>();
  } catch (const nlohmann::json::exception& e) {
    throw io::FormatError("manifest '" + mpath.string() + "': " + e.what());
  }
  const auto& m = ds.manifest;
  if (m.sample_count != n || m.height != h || m.width != w || m.attribute_count != t) {
    throw io::FormatError("manifest '" + mpath.string() + "' disagrees with dataset header");
  }
  return ds;
}

}  // namespace agc::data
