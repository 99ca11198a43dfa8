#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "emma/normalization.hpp"
#include "emma/phantom.hpp"
#include "oracles.hpp"

using namespace emma;

namespace {

PhantomOptions small() {
  PhantomOptions o;
  o.extents = Extents3::cube(48);
  return o;
}

struct Stats {
  double mean = 0, sd = 0;
};

Stats masked_stats(const VolumeCase& c, std::size_t m, const Mask& mask) {
  const auto ch = c.images.channel(m);
  double s = 0, ss = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < mask.numel(); ++i) {
    if (!mask[i]) continue;
    s += ch[i];
    ++n;
  }
  const double mean = s / static_cast<double>(n);
  for (std::size_t i = 0; i < mask.numel(); ++i) {
    if (mask[i]) ss += (ch[i] - mean) * (ch[i] - mean);
  }
  return {mean, std::sqrt(ss / static_cast<double>(n))};
}

// RMS of corrected - k * clean inside the mask, relative to the masked mean of
// k * clean, where k absorbs the global intensity scale.
double relative_rms(const VolumeCase& corrected, const VolumeCase& clean, std::size_t m, const Mask& mask) {
  const auto a = corrected.images.channel(m);
  const auto b = clean.images.channel(m);
  double sa = 0, sb = 0;
  for (std::size_t i = 0; i < mask.numel(); ++i) {
    if (mask[i]) sa += a[i], sb += b[i];
  }
  const double k = sa / sb;
  double err = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < mask.numel(); ++i) {
    if (!mask[i]) continue;
    err += (a[i] - k * b[i]) * (a[i] - k * b[i]);
    ++n;
  }
  return std::sqrt(err / static_cast<double>(n)) / (sa / static_cast<double>(n));
}

}  // namespace

TEST(Phantom, DeterministicAndIndexIndependent) {
  const auto a = phantom_case(3, 2, small());
  const auto b = phantom_case(3, 2, small());
  EXPECT_EQ(a.images, b.images);
  EXPECT_EQ(a.labels, b.labels);
  const auto batch = phantom_generate(3, 3, small());
  EXPECT_EQ(batch[2].images, a.images);
  EXPECT_NE(phantom_case(4, 2, small()).images, a.images);
}

TEST(Phantom, LabelsCoverEveryTissueAndNest) {
  for (std::size_t i = 0; i < 5; ++i) {
    const auto c = phantom_case(9, i, small());
    EXPECT_NO_THROW(c.validate());
    std::array<std::size_t, 5> hist{};
    for (auto v : c.labels.storage()) {
      ASSERT_TRUE(v == 0 || v == 1 || v == 2 || v == 4);
      ++hist[v];
    }
    for (int l : {0, 1, 2, 4}) EXPECT_GT(hist[l], 0u) << "label " << l;
    // Geometry check: every label-1 voxel is inside the rim ellipsoid, and every
    // rim or core voxel is inside the oedema ellipsoid.
    const auto g = phantom_geometry(9, i, small());
    const Extents3 e = c.extents();
    std::size_t k = 0;
    for (std::size_t z = 0; z < e.d; ++z)
      for (std::size_t y = 0; y < e.h; ++y)
        for (std::size_t x = 0; x < e.w; ++x, ++k) {
          const auto l = c.labels[k];
          if (l == 1) ASSERT_TRUE(g.rim.contains(z, y, x));
          if (l == 1 || l == 4) ASSERT_TRUE(g.oedema.contains(z, y, x));
          if (l != 0) ASSERT_TRUE(g.head.contains(z, y, x));
        }
  }
}

TEST(Phantom, TooSmallIsParameterError) {
  PhantomOptions o;
  o.extents = Extents3::cube(32);
  EXPECT_THROW(phantom_case(1, 0, o), ParameterError);
}

TEST(BrainMask, EdgeCasesAndPhantomHead) {
  VolumeCase c;
  c.images = Tensor<float>({4, 3, 3, 3});
  EXPECT_THROW(brain_mask(c), DataError);
  c.images.at(2, 1, 0, 2) = 0.5f;
  const auto m = brain_mask(c);
  EXPECT_EQ(mask_count(m), 1u);
  EXPECT_EQ(m[(1 * 3 + 0) * 3 + 2], 1);

  const auto p = phantom_case(5, 0, small());
  EXPECT_EQ(brain_mask(p), phantom_head_mask(phantom_geometry(5, 0, small()), p.extents()));
}

TEST(ZScore, MaskStatisticsAndIdempotence) {
  const auto c = phantom_case(2, 1, small());
  const auto mask = brain_mask(c);
  const auto z = zscore_normalize(c, mask);
  for (std::size_t m = 0; m < 4; ++m) {
    const auto s = masked_stats(z, m, mask);
    EXPECT_LT(std::abs(s.mean), 1e-5);
    EXPECT_LT(std::abs(s.sd - 1.0), 1e-5);
    const auto ch = z.images.channel(m);
    for (std::size_t i = 0; i < mask.numel(); ++i) {
      if (!mask[i]) ASSERT_EQ(ch[i], 0.0f);
    }
  }
  const auto zz = zscore_normalize(z, mask);
  for (std::size_t i = 0; i < z.images.numel(); ++i) ASSERT_NEAR(zz.images[i], z.images[i], 1e-5);
}

TEST(ZScore, ConstantModalityNamesIt) {
  auto c = phantom_case(2, 1, small());
  const auto mask = brain_mask(c);
  for (auto& v : c.images.channel(2)) v = 7.0f;
  try {
    zscore_normalize(c, mask);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("t1ce"), std::string::npos);
  }
}

TEST(Percentile, LinearInterpolation) {
  EXPECT_EQ(percentile({1, 2, 3, 4, 5}, 50), 3.0);
  EXPECT_EQ(percentile({0, 10}, 25), 2.5);
  EXPECT_EQ(percentile({4}, 99), 4.0);
  EXPECT_THROW(percentile({}, 50), DataError);
}

TEST(Nyul, IdenticalCasesAndPiecewiseMap) {
  const auto cases = phantom_generate(7, 3, small());
  const auto same = nyul_train({cases[0], cases[0]});
  for (std::size_t m = 0; m < 4; ++m) {
    const auto own = case_landmarks(cases[0], m, brain_mask(cases[0]));
    // Standard scale is the mean over cases of landmarks after the [p1,p99] -> [0,100] rescale.
    ASSERT_EQ(same.standard[m].size(), own.size());
    for (std::size_t k = 0; k < own.size(); ++k) {
      const double r = 100.0 * (own[k] - own.front()) / (own.back() - own.front());
      EXPECT_NEAR(same.standard[m][k], r, 1e-9);
    }
  }

  const auto model = nyul_train(cases);
  for (std::size_t m = 0; m < 4; ++m) {
    for (std::size_t k = 1; k < model.standard[m].size(); ++k) EXPECT_GE(model.standard[m][k], model.standard[m][k - 1]);
  }
  // Every in-mask voxel follows the piecewise-linear map through the case's own landmarks.
  for (const auto& c : cases) {
    const auto mask = brain_mask(c);
    const auto mapped = nyul_apply(c, model, mask);
    for (std::size_t m = 0; m < 4; ++m) {
      const auto xs = case_landmarks(c, m, mask);
      const auto src = c.images.channel(m), dst = mapped.images.channel(m);
      for (std::size_t i = 0; i < mask.numel(); ++i) {
        if (!mask[i]) continue;
        const double expect = oracle::piecewise_linear(xs, model.standard[m], src[i]);
        ASSERT_NEAR(dst[i], expect, 1e-5 * std::max(1.0, std::abs(expect)));
      }
    }
  }
}

TEST(Nyul, KnotsMapExactlyAndAffineCopiesAgree) {
  const std::vector<VolumeCase> train{oracle::ladder_case(1), oracle::ladder_case(2, 3.0, -40.0)};
  const auto model = nyul_train(train);
  // Landmarks sit on voxel values 1 + 10 q (q = 1, 10, ..., 99).
  const auto lm = case_landmarks(train[0], 0, brain_mask(train[0]));
  EXPECT_EQ(lm.front(), 11.0);
  EXPECT_EQ(lm.back(), 991.0);
  for (const auto& [a, b] : {std::pair{1.0, 0.0}, std::pair{2.5, 17.0}, std::pair{0.5, 300.0}}) {
    const auto c = oracle::ladder_case(5, a, b);
    const auto mask = brain_mask(c);
    const auto out = nyul_apply(c, model, mask);
    for (std::size_t m = 0; m < 4; ++m) {
      const auto src = c.images.channel(m), dst = out.images.channel(m);
      for (std::size_t i = 0; i < mask.numel(); ++i) {
        if (!mask[i]) continue;
        const double rank = (src[i] - b) / a;
        const double q = (rank - 1.0) / 10.0;
        for (std::size_t k = 0; k < model.percentiles.size(); ++k) {
          if (q == model.percentiles[k]) ASSERT_EQ(dst[i], static_cast<float>(model.standard[m][k])) << a << "," << b;
        }
        // Affine copies share the normalized output voxel for voxel.
        const double expect = 100.0 * (rank - 11.0) / 980.0;
        ASSERT_NEAR(dst[i], expect, 1e-4);
      }
    }
  }
}

TEST(Nyul, StandardScaleCaseIsIdentity) {
  const auto c = phantom_case(3, 0, small());
  const auto mask = brain_mask(c);
  LandmarkModel own;
  for (std::size_t m = 0; m < 4; ++m) own.standard[m] = case_landmarks(c, m, mask);
  const auto out = nyul_apply(c, own, mask);
  for (std::size_t i = 0; i < c.images.numel(); ++i) ASSERT_NEAR(out.images[i], c.images[i], 1e-9);
}

TEST(Nyul, MonotoneMap) {
  const auto cases = phantom_generate(10, 2, small());
  const auto model = nyul_train(cases);
  // Place sorted random intensities into an otherwise masked case.
  VolumeCase c = cases[0];
  const auto mask = brain_mask(c);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-50, 500);
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < mask.numel(); ++i) {
    if (mask[i]) idx.push_back(i);
  }
  for (std::size_t m = 0; m < 4; ++m) {
    const auto ch = c.images.channel(m);
    std::vector<double> v(300);
    for (auto& x : v) x = u(rng);
    std::sort(v.begin(), v.end());
    for (std::size_t k = 0; k < v.size(); ++k) ch[idx[k * 37]] = static_cast<float>(v[k]);
  }
  const auto out = nyul_apply(c, model, mask);
  for (std::size_t m = 0; m < 4; ++m) {
    const auto ch = out.images.channel(m);
    for (std::size_t k = 1; k < 300; ++k) EXPECT_GE(ch[idx[k * 37]], ch[idx[(k - 1) * 37]]);
  }
}

TEST(Nyul, UntrainedModelIsUsageErrorAndJsonRoundTrips) {
  const auto c = phantom_case(1, 0, small());
  EXPECT_THROW(nyul_apply(c, LandmarkModel{}, brain_mask(c)), UsageError);
  const auto model = nyul_train(phantom_generate(1, 2, small()));
  const auto back = LandmarkModel::from_json(model.to_json());
  EXPECT_EQ(back.percentiles, model.percentiles);
  for (std::size_t m = 0; m < 4; ++m) EXPECT_EQ(back.standard[m], model.standard[m]);
}

TEST(BiasCorrection, ConstantFieldIsIdentity) {
  auto o = small();
  o.noise_sd = 0.0;
  const auto c = phantom_case(4, 0, o);
  const auto mask = brain_mask(c);
  VolumeCase flat = c;
  // Piecewise-constant tissue with no field: the robust fit sees only the brain level.
  for (std::size_t m = 0; m < 4; ++m) {
    auto ch = flat.images.channel(m);
    for (std::size_t i = 0; i < mask.numel(); ++i) {
      if (mask[i]) ch[i] = 100.0f;
    }
  }
  const auto out = polynomial_bias_correct(flat, 3, mask);
  for (std::size_t i = 0; i < flat.images.numel(); ++i) ASSERT_NEAR(out.images[i], flat.images[i], 1e-6 * 100);
}

TEST(BiasCorrection, RecoversInjectedQuadraticField) {
  auto clean_o = small();
  auto biased_o = small();
  biased_o.bias_field = true;
  biased_o.field_strength = 0.3;
  // The injected field is quadratic, so the fit uses degree 2.
  for (std::size_t i = 0; i < 3; ++i) {
    const auto clean = phantom_case(21, i, clean_o);
    const auto biased = phantom_case(21, i, biased_o);
    const auto mask = brain_mask(biased);
    const auto fixed = polynomial_bias_correct(biased, 2, mask);
    for (std::size_t m = 0; m < 4; ++m) {
      const double before = relative_rms(biased, clean, m, mask);
      const double after = relative_rms(fixed, clean, m, mask);
      EXPECT_LT(after, 0.02) << "case " << i << " modality " << m << " before " << before;
      EXPECT_LT(after, before);
      const auto src = biased.images.channel(m), dst = fixed.images.channel(m);
      for (std::size_t k = 0; k < mask.numel(); ++k) {
        if (src[k] > 0) ASSERT_GT(dst[k], 0.0f);
      }
      // In-mask mean preserved.
      EXPECT_NEAR(masked_stats(fixed, m, mask).mean / masked_stats(biased, m, mask).mean, 1.0, 1e-6);
    }
  }
  EXPECT_THROW(polynomial_bias_correct(phantom_case(21, 0, clean_o), 5, brain_mask(phantom_case(21, 0, clean_o))),
               ParameterError);
}

TEST(Pipelines, VersionsComposeInOrder) {
  const auto raw = phantom_generate(12, 3, small());
  const auto mask = brain_mask(raw[0]);
  NormalizationSpec v1;
  EXPECT_EQ(normalize_case(raw[0], v1).images, zscore_normalize(raw[0], mask).images);

  NormalizationSpec v2;
  v2.version = NormalizationVersion::v2_bfc_zscore;
  EXPECT_EQ(normalize_case(raw[0], v2).images, zscore_normalize(polynomial_bias_correct(raw[0], 3, mask), mask).images);

  NormalizationSpec v3;
  v3.version = NormalizationVersion::v3_bfc_pwl_zscore;
  EXPECT_THROW(normalize_case(raw[0], v3), UsageError);
  v3 = fit_normalization(raw, v3);
  ASSERT_TRUE(v3.landmarks && v3.landmarks->trained());
  const auto expect = zscore_normalize(nyul_apply(polynomial_bias_correct(raw[0], 3, mask), *v3.landmarks, mask), mask);
  EXPECT_EQ(normalize_case(raw[0], v3).images, expect.images);

  NormalizationSpec none = v2;
  none.bias_mode = BiasMode::none;
  EXPECT_EQ(normalize_case(raw[0], none).images, zscore_normalize(raw[0], mask).images);
}
