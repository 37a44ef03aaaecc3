#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <cstring>

#include "agcgan/dataio.hpp"

namespace fs = std::filesystem;
using namespace agc;
using namespace agc::data;

namespace {

fs::path scratch_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("agcgan_test_dataio_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

SyntheticParams small_params(std::uint64_t seed = 7) {
  SyntheticParams p;
  p.identities = 10;
  p.samples_per_identity = 4;
  p.height = 32;
  p.width = 32;
  p.seed = seed;
  return p;
}

std::vector<std::uint8_t> file_bytes(const fs::path& p) { return io::read_file(p); }

// Maps a clean intensity rendering through the sample's photometric transform,
// exactly as the generator does before adding noise.
std::vector<double> observe(const std::vector<double>& clean, const SampleVariation& v) {
  std::vector<double> out(clean.size());
  for (std::size_t i = 0; i < clean.size(); ++i) {
    out[i] = std::clamp(2.0 * (clean[i] * v.gain + v.offset) - 1.0, -1.0, 1.0);
  }
  return out;
}

double sq_dist(const std::vector<double>& a, const std::vector<float>& b) {
  double d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
  return d;
}

}  // namespace

TEST(Synthetic, ManifestCounts) {
  const auto ds = generate_synthetic_dataset(small_params());
  EXPECT_EQ(ds.manifest.identity_count, 10u);
  EXPECT_EQ(ds.manifest.sample_count, 40u);
  EXPECT_EQ(ds.samples.size(), 40u);
  std::set<std::uint32_t> ids;
  for (const auto& s : ds.samples) ids.insert(s.identity);
  EXPECT_EQ(ids.size(), 10u);
}

TEST(Synthetic, SampleInvariants) {
  const auto ds = generate_synthetic_dataset(small_params());
  for (const auto& s : ds.samples) {
    ASSERT_EQ(s.visible.size(), 32u * 32u);
    ASSERT_EQ(s.polar.size(), 3u * 32u * 32u);
    for (float v : s.visible) ASSERT_TRUE(std::isfinite(v) && v >= -1.f && v <= 1.f);
    for (float v : s.polar) ASSERT_TRUE(std::isfinite(v) && v >= -1.f && v <= 1.f);
    EXPECT_LT(s.attributes, 1u << kAttributeCount);
  }
}

TEST(Synthetic, AttributesAreIdentityLevel) {
  const auto ds = generate_synthetic_dataset(small_params());
  std::map<std::uint32_t, std::uint16_t> seen;
  for (const auto& s : ds.samples) {
    auto [it, inserted] = seen.emplace(s.identity, s.attributes);
    if (!inserted) {
      EXPECT_EQ(it->second, s.attributes);
    }
  }
}

TEST(Synthetic, SplitsPartitionIdentities) {
  for (std::uint64_t seed : {1u, 2u, 3u, 4u, 5u}) {
    auto p = small_params(seed);
    p.identities = 20;
    const auto ds = generate_synthetic_dataset(p);
    const auto& m = ds.manifest;
    std::set<std::uint32_t> train(m.train_identities.begin(), m.train_identities.end());
    std::set<std::uint32_t> test(m.test_identities.begin(), m.test_identities.end());
    EXPECT_EQ(train.size() + test.size(), 20u);
    for (auto id : test) EXPECT_EQ(train.count(id), 0u);
    EXPECT_EQ(test.size(), 6u);
  }
}

TEST(Synthetic, SeedDeterminismBitwise) {
  const auto dir = scratch_dir("determinism");
  save_dataset(dir / "a.agcd", generate_synthetic_dataset(small_params(11)));
  save_dataset(dir / "b.agcd", generate_synthetic_dataset(small_params(11)));
  EXPECT_EQ(file_bytes(dir / "a.agcd"), file_bytes(dir / "b.agcd"));
  EXPECT_EQ(file_bytes(dir / "a.agcd.json"), file_bytes(dir / "b.agcd.json"));
  save_dataset(dir / "c.agcd", generate_synthetic_dataset(small_params(12)));
  EXPECT_NE(file_bytes(dir / "a.agcd"), file_bytes(dir / "c.agcd"));
}

TEST(Synthetic, ZeroVariationGivesIdenticalSamples) {
  auto p = small_params();
  p.variation = 0.0;
  const auto ds = generate_synthetic_dataset(p);
  for (std::size_t i = 1; i < p.samples_per_identity; ++i) {
    EXPECT_EQ(ds.samples[0].visible, ds.samples[i].visible);
    EXPECT_EQ(ds.samples[0].polar, ds.samples[i].polar);
  }
}

TEST(Synthetic, RejectsInvalidParameters) {
  auto p = small_params();
  p.identities = 1;
  EXPECT_THROW(generate_synthetic_dataset(p), std::invalid_argument);
  p = small_params();
  p.height = 48;
  EXPECT_THROW(generate_synthetic_dataset(p), std::invalid_argument);
  p = small_params();
  p.width = 16;
  EXPECT_THROW(generate_synthetic_dataset(p), std::invalid_argument);
}

// Inverts the generator: with the true latent and photometric parameters of a
// sample, render it with attribute t on and off and pick the nearer rendering.
TEST(Synthetic, BayesOracleDecodesAttributes) {
  SyntheticParams p;
  p.identities = 250;
  p.samples_per_identity = 4;
  p.height = 64;
  p.width = 64;
  p.seed = 3;
  const auto ds = generate_synthetic_dataset(p);
  ASSERT_EQ(ds.samples.size(), 1000u);
  std::array<std::size_t, kAttributeCount> correct{};
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const auto& s = ds.samples[i];
    const auto latent = draw_identity(p.seed, s.identity);
    const auto var = draw_variation(p.seed, s.identity, static_cast<std::uint32_t>(i % 4), p.width, p.variation);
    for (std::size_t t = 0; t < kAttributeCount; ++t) {
      auto on = latent, off = latent;
      on.attributes |= static_cast<std::uint16_t>(1u << t);
      off.attributes &= static_cast<std::uint16_t>(~(1u << t));
      const double d_on = sq_dist(observe(render_visible_clean(on, var, 64, 64), var), s.visible);
      const double d_off = sq_dist(observe(render_visible_clean(off, var, 64, 64), var), s.visible);
      if ((d_on < d_off) == s.attribute(t)) ++correct[t];
    }
  }
  for (std::size_t t = 0; t < kAttributeCount; ++t) {
    EXPECT_GE(correct[t] / 1000.0, 0.99) << kAttributeNames[t];
  }
}

TEST(Synthetic, EveryAttributeChangesTheImage) {
  const auto latent = draw_identity(5, 0);
  const auto var = draw_variation(5, 0, 0, 64, 0.0);
  const auto base = render_visible_clean(latent, var, 64, 64);
  for (std::size_t t = 0; t < kAttributeCount; ++t) {
    auto flipped = latent;
    flipped.attributes ^= static_cast<std::uint16_t>(1u << t);
    const auto img = render_visible_clean(flipped, var, 64, 64);
    double d = 0;
    for (std::size_t i = 0; i < img.size(); ++i) d += std::abs(img[i] - base[i]);
    EXPECT_GT(d, 2.0) << kAttributeNames[t];
  }
}

TEST(Synthetic, PolarChannelsAreIntensityAndGradients) {
  // A vertical step edge has horizontal gradient only.
  const std::size_t h = 32, w = 32;
  std::vector<double> img(h * w);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) img[r * w + c] = c < w / 2 ? 0.2 : 0.8;
  const auto pol = render_polar_clean(img, h, w, 0.0);
  const std::size_t hw = h * w;
  double s1 = 0, s2 = 0;
  for (std::size_t i = 0; i < hw; ++i) {
    s1 += std::abs(pol[hw + i]);
    s2 += std::abs(pol[2 * hw + i]);
  }
  EXPECT_GT(s1, 1.0);
  EXPECT_NEAR(s2, 0.0, 1e-12);
  // S0 inverts contrast.
  EXPECT_GT(pol[5 * w + 2], pol[5 * w + w - 3]);
}

TEST(Dog, ConstantImageGivesZero) {
  std::vector<double> img(3 * 16 * 16, 0.37);
  for (double v : dog_filter(img, 3, 16, 16, 1.0, 2.0)) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(Dog, Linearity) {
  Rng rng(1);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<double> a(2 * 16 * 16), b(a.size()), ab(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    a[i] = u(rng);
    b[i] = u(rng);
    ab[i] = a[i] + b[i];
  }
  const auto da = dog_filter(a, 2, 16, 16, 1.0, 2.0), db = dog_filter(b, 2, 16, 16, 1.0, 2.0);
  const auto dab = dog_filter(ab, 2, 16, 16, 1.0, 2.0);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(dab[i], da[i] + db[i], 1e-6);
}

// The impulse response away from borders is the outer product of each 1-D
// Gaussian, tabulated here independently.
TEST(Dog, ImpulseMatchesKernelTabulation) {
  const std::size_t n = 33, mid = 16;
  std::vector<double> img(n * n, 0.0);
  img[mid * n + mid] = 1.0;
  const double s1 = 1.0, s2 = 2.0;
  const auto out = dog_filter(img, 1, n, n, s1, s2);
  auto g1d = [](double sigma, int x) {
    const int radius = static_cast<int>(std::ceil(3 * sigma));
    if (std::abs(x) > radius) return 0.0;
    double z = 0;
    for (int i = -radius; i <= radius; ++i) z += std::exp(-0.5 * i * i / (sigma * sigma));
    return std::exp(-0.5 * x * x / (sigma * sigma)) / z;
  };
  for (int dy = -8; dy <= 8; ++dy)
    for (int dx = -8; dx <= 8; ++dx) {
      const double expect = g1d(s1, dy) * g1d(s1, dx) - g1d(s2, dy) * g1d(s2, dx);
      EXPECT_NEAR(out[(mid + dy) * n + (mid + dx)], expect, 1e-12) << dy << "," << dx;
    }
}

TEST(Dog, ReflectiveBordersPreserveConstantsAtEdges) {
  std::vector<double> ramp(8 * 8);
  for (std::size_t i = 0; i < ramp.size(); ++i) ramp[i] = 1.0;
  const auto blurred = gaussian_blur(ramp, 8, 8, 2.0);
  for (double v : blurred) EXPECT_NEAR(v, 1.0, 1e-12);
}

TEST(Dog, RejectsBadSigmas) {
  std::vector<double> img(16 * 16, 0.0);
  EXPECT_THROW(dog_filter(img, 1, 16, 16, 0.0, 2.0), std::invalid_argument);
  EXPECT_THROW(dog_filter(img, 1, 16, 16, -1.0, 2.0), std::invalid_argument);
  EXPECT_THROW(dog_filter(img, 1, 16, 16, 2.0, 2.0), std::invalid_argument);
  EXPECT_THROW(dog_filter(img, 1, 16, 16, 3.0, 2.0), std::invalid_argument);
}

TEST(Dog, NormalizedOutputIsZeroMeanPerChannel) {
  const auto ds = generate_synthetic_dataset(small_params());
  for (const auto& s : ds.samples) {
    const auto pol = preprocess(s.polar, 3, 32, 32, PreprocessConfig{});
    for (std::size_t c = 0; c < 3; ++c) {
      double mu = 0, peak = 0;
      for (std::size_t i = 0; i < 1024; ++i) {
        mu += pol[c * 1024 + i];
        peak = std::max(peak, double(std::abs(pol[c * 1024 + i])));
      }
      EXPECT_NEAR(mu / 1024, 0.0, 1e-3);
      EXPECT_LE(peak, 1.0 + 1e-6);
    }
  }
}

TEST(Dog, DisabledPassesThrough) {
  std::vector<float> img{0.1f, -0.2f, 0.3f, 0.4f};
  PreprocessConfig cfg;
  cfg.dog = false;
  EXPECT_EQ(preprocess(img, 1, 2, 2, cfg), img);
}

TEST(Pairs, BalancedBatch) {
  const auto ds = generate_synthetic_dataset(small_params());
  const auto split = index_split(ds, ds.manifest.train_identities);
  const auto batch = sample_balanced_pairs(split, 8, 42);
  ASSERT_EQ(batch.pairs.size(), 8u);
  EXPECT_EQ(batch.genuine_count(), 4u);
}

TEST(Pairs, LabelsMatchIdentitiesExhaustively) {
  const auto ds = generate_synthetic_dataset(small_params());
  const auto split = index_split(ds, ds.manifest.train_identities);
  Rng rng(9);
  for (int step = 0; step < 500; ++step) {
    for (const auto& pr : sample_balanced_pairs(split, 4, rng).pairs) {
      const auto vi = ds.samples[pr.visible_index].identity, pi = ds.samples[pr.polar_index].identity;
      ASSERT_EQ(vi, pr.visible_identity);
      ASSERT_EQ(pi, pr.polar_identity);
      ASSERT_EQ(pr.y_cont == 0, vi == pi);
    }
  }
}

TEST(Pairs, SeededDeterminism) {
  const auto ds = generate_synthetic_dataset(small_params());
  const auto split = index_split(ds, ds.manifest.train_identities);
  const auto a = sample_balanced_pairs(split, 8, 5), b = sample_balanced_pairs(split, 8, 5);
  for (std::size_t k = 0; k < 8; ++k) {
    EXPECT_EQ(a.pairs[k].visible_index, b.pairs[k].visible_index);
    EXPECT_EQ(a.pairs[k].polar_index, b.pairs[k].polar_index);
  }
}

TEST(Pairs, ImpostorIdentitiesUniform) {
  // One anchor identity fixed: its impostor partners should be uniform over
  // the 9 others. Check each frequency against p = 1/9 within 3 sigma.
  std::vector<std::uint32_t> sample_ids;
  for (std::uint32_t id = 0; id < 10; ++id) sample_ids.push_back(id);
  std::vector<std::uint32_t> split_ids(10);
  std::iota(split_ids.begin(), split_ids.end(), 0u);
  const auto split = index_split(sample_ids, split_ids);
  std::map<std::uint32_t, std::map<std::uint32_t, std::size_t>> counts;
  std::map<std::uint32_t, std::size_t> totals;
  Rng rng(2024);
  std::size_t draws = 0;
  while (draws < 100000) {
    for (const auto& pr : sample_balanced_pairs(split, 2, rng).pairs) {
      if (pr.y_cont != 1) continue;
      ++counts[pr.visible_identity][pr.polar_identity];
      ++totals[pr.visible_identity];
      ++draws;
    }
  }
  for (const auto& [anchor, row] : counts) {
    const double n = static_cast<double>(totals[anchor]);
    const double p = 1.0 / 9.0, sigma = std::sqrt(p * (1 - p) / n);
    EXPECT_EQ(row.count(anchor), 0u);
    EXPECT_EQ(row.size(), 9u);
    for (const auto& [other, c] : row) EXPECT_NEAR(c / n, p, 3 * sigma) << anchor << "->" << other;
  }
}

TEST(Pairs, TenThousandImpostorDraws) {
  std::vector<std::uint32_t> ids(10);
  std::iota(ids.begin(), ids.end(), 0u);
  const auto split = index_split(ids, ids);
  // Anchor frequencies do not matter; count partner identities relative to anchor.
  std::array<std::size_t, 9> offset_counts{};
  Rng rng(77);
  std::size_t draws = 0;
  while (draws < 10000) {
    for (const auto& pr : sample_balanced_pairs(split, 2, rng).pairs) {
      if (pr.y_cont != 1) continue;
      const auto rel = (pr.polar_identity + 10 - pr.visible_identity) % 10;
      ASSERT_NE(rel, 0u);
      ++offset_counts[rel - 1];
      ++draws;
    }
  }
  const double p = 1.0 / 9.0, sigma = std::sqrt(p * (1 - p) / 10000.0);
  for (auto c : offset_counts) EXPECT_NEAR(c / 10000.0, p, 3 * sigma);
}

TEST(Pairs, Errors) {
  std::vector<std::uint32_t> ids{0, 1, 2};
  const auto split = index_split(ids, ids);
  EXPECT_THROW(sample_balanced_pairs(split, 3, 1), std::invalid_argument);
  EXPECT_THROW(sample_balanced_pairs(split, 0, 1), std::invalid_argument);
  const std::vector<std::uint32_t> one{1};
  EXPECT_THROW(sample_balanced_pairs(index_split(ids, one), 4, 1), std::invalid_argument);
}

TEST(Persistence, RoundTrip) {
  const auto dir = scratch_dir("roundtrip");
  const auto ds = generate_synthetic_dataset(small_params());
  save_dataset(dir / "d.agcd", ds);
  const auto back = load_dataset(dir / "d.agcd");
  EXPECT_TRUE(back.manifest == ds.manifest);
  ASSERT_EQ(back.samples.size(), 40u);
  for (std::size_t i = 0; i < 40; ++i) {
    EXPECT_EQ(back.samples[i].identity, ds.samples[i].identity);
    EXPECT_EQ(back.samples[i].attributes, ds.samples[i].attributes);
    EXPECT_EQ(0, std::memcmp(back.samples[i].visible.data(), ds.samples[i].visible.data(),
                             ds.samples[i].visible.size() * sizeof(float)));
    EXPECT_EQ(0, std::memcmp(back.samples[i].polar.data(), ds.samples[i].polar.data(),
                             ds.samples[i].polar.size() * sizeof(float)));
  }
}

TEST(Persistence, HeaderLayout) {
  const auto dir = scratch_dir("layout");
  const auto ds = generate_synthetic_dataset(small_params());
  save_dataset(dir / "d.agcd", ds);
  const auto b = file_bytes(dir / "d.agcd");
  const std::size_t header = 4 + 2 + 4 + 2 + 2 + 1;
  const std::size_t record = 4 + 2 + 4 * 32 * 32 + 4 * 3 * 32 * 32 + 4;
  ASSERT_EQ(b.size(), header + 40 * record);
  EXPECT_EQ(std::string(b.begin(), b.begin() + 4), "AGCD");
  EXPECT_EQ(b[4], 1);
  EXPECT_EQ(b[5], 0);
  EXPECT_EQ(b[6], 40);
  EXPECT_EQ(b[10], 32);
  EXPECT_EQ(b[12], 32);
  EXPECT_EQ(b[14], 10);
  // Trailing CRC of the first record covers the bytes before it.
  const std::span<const std::uint8_t> rec(b.data() + header, record - 4);
  const std::uint32_t crc = b[header + record - 4] | (b[header + record - 3] << 8) |
                            (b[header + record - 2] << 16) | (std::uint32_t(b[header + record - 1]) << 24);
  EXPECT_EQ(crc, io::crc32_of(rec));
}

TEST(Persistence, CorruptPayloadNamesSample) {
  const auto dir = scratch_dir("corrupt");
  save_dataset(dir / "d.agcd", generate_synthetic_dataset(small_params()));
  auto b = file_bytes(dir / "d.agcd");
  const std::size_t header = 15, record = 4 + 2 + 4 * 1024 + 4 * 3072 + 4;
  b[header + 3 * record + 100] ^= 0x40;
  io::write_file_atomic(dir / "d.agcd", b);
  try {
    load_dataset(dir / "d.agcd");
    FAIL() << "expected checksum error";
  } catch (const io::ChecksumError& e) {
    EXPECT_EQ(e.record(), 3u);
    EXPECT_NE(std::string(e.what()).find("sample 3"), std::string::npos);
  }
}

TEST(Persistence, DistinctErrors) {
  const auto dir = scratch_dir("errors");
  save_dataset(dir / "d.agcd", generate_synthetic_dataset(small_params()));
  const auto good = file_bytes(dir / "d.agcd");

  io::write_file_atomic(dir / "empty.agcd", std::vector<std::uint8_t>{});
  EXPECT_THROW(load_dataset(dir / "empty.agcd"), io::MagicError);

  auto bad_magic = good;
  bad_magic[0] = 'X';
  io::write_file_atomic(dir / "m.agcd", bad_magic);
  EXPECT_THROW(load_dataset(dir / "m.agcd"), io::MagicError);

  auto bad_version = good;
  bad_version[4] = 2;
  io::write_file_atomic(dir / "v.agcd", bad_version);
  EXPECT_THROW(load_dataset(dir / "v.agcd"), io::VersionError);

  std::vector<std::uint8_t> truncated(good.begin(), good.begin() + static_cast<long>(good.size() / 2));
  io::write_file_atomic(dir / "t.agcd", truncated);
  EXPECT_THROW(load_dataset(dir / "t.agcd"), io::TruncatedError);

  EXPECT_THROW(load_dataset(dir / "absent.agcd"), io::MissingFileError);
}

TEST(Persistence, ManifestIsJson) {
  const auto dir = scratch_dir("manifest");
  save_dataset(dir / "d.agcd", generate_synthetic_dataset(small_params()));
  std::ifstream in(dir / "d.agcd.json");
  const auto j = nlohmann::json::parse(in);
  EXPECT_EQ(j.at("sample_count"), 40);
  EXPECT_EQ(j.at("attribute_names").size(), 10u);
  EXPECT_EQ(j.at("attribute_names")[0], "Arched_Eyebrows");
  EXPECT_EQ(j.at("generator").at("seed"), 7);
}

TEST(Prepared, ShapesAndLabels) {
  const auto ds = generate_synthetic_dataset(small_params());
  const auto prep = prepare(ds, PreprocessConfig{});
  ASSERT_EQ(prep.size(), 40u);
  EXPECT_EQ(prep.visible[0].size(), 1024u);
  EXPECT_EQ(prep.polar[0].size(), 3072u);
  for (std::size_t t = 0; t < kAttributeCount; ++t) EXPECT_EQ(prep.attributes[5][t], ds.samples[5].attribute(t) ? 1.f : 0.f);
}
