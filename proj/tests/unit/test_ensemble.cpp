#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "emma/checkpoint.hpp"
#include "emma/ensemble.hpp"
#include "emma/phantom.hpp"
#include "emma/toy_demo.hpp"

using namespace emma;
namespace fs = std::filesystem;

namespace {

Tensor<double> random_map(std::size_t K, Extents3 e, std::mt19937_64& rng) {
  std::gamma_distribution<double> g(0.7);
  Tensor<double> p({K, e.d, e.h, e.w});
  const std::size_t n = e.volume();
  for (std::size_t v = 0; v < n; ++v) {
    double s = 0;
    for (std::size_t c = 0; c < K; ++c) s += p[c * n + v] = g(rng) + 1e-9;
    for (std::size_t c = 0; c < K; ++c) p[c * n + v] /= s;
  }
  return p;
}

void expect_simplex(const Tensor<double>& p, double tol) {
  const std::size_t K = p.dim(0), n = p.numel() / K;
  for (std::size_t v = 0; v < n; ++v) {
    double s = 0;
    for (std::size_t c = 0; c < K; ++c) {
      ASSERT_GE(p[c * n + v], 0.0);
      ASSERT_LE(p[c * n + v], 1.0);
      s += p[c * n + v];
    }
    ASSERT_NEAR(s, 1.0, tol);
  }
}

class TempDir {
 public:
  explicit TempDir(const std::string& name) : path_(fs::temp_directory_path() / name) {
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

}  // namespace

TEST(Average, ArithmeticExamples) {
  Tensor<double> a({2, 1, 1, 1}, std::vector<double>{0.8, 0.2});
  Tensor<double> b({2, 1, 1, 1}, std::vector<double>{0.4, 0.6});
  const auto m = average_confidences(std::vector<const Tensor<double>*>{&a, &b});
  EXPECT_NEAR(m[0], 0.6, 1e-15);
  EXPECT_NEAR(m[1], 0.4, 1e-15);
  EXPECT_EQ(average_confidences(std::vector<const Tensor<double>*>{&a}), a);
  Tensor<double> c({3, 1, 1, 1}, 1.0 / 3);
  EXPECT_THROW(average_confidences(std::vector<const Tensor<double>*>{&a, &c}), DimensionError);
  EXPECT_THROW(average_confidences(std::vector<const Tensor<double>*>{}), UsageError);
}

TEST(Average, IdempotentPermutationInvariantSimplex) {
  std::mt19937_64 rng(1);
  const Extents3 e{6, 5, 4};
  std::vector<Tensor<double>> maps;
  for (int i = 0; i < 7; ++i) maps.push_back(random_map(4, e, rng));
  for (std::size_t copies : {2u, 3u, 21u}) {
    std::vector<const Tensor<double>*> dup(copies, &maps[0]);
    EXPECT_EQ(average_confidences(dup), maps[0]);
  }
  std::vector<const Tensor<double>*> ptrs;
  for (const auto& m : maps) ptrs.push_back(&m);
  const auto ref = average_confidences(ptrs);
  expect_simplex(ref, 1e-6);
  for (int t = 0; t < 20; ++t) {
    std::shuffle(ptrs.begin(), ptrs.end(), rng);
    const auto got = average_confidences(ptrs);
    for (std::size_t i = 0; i < ref.numel(); ++i) ASSERT_LE(std::abs(got[i] - ref[i]), 1e-9);
  }
}

TEST(Argmax, OneHotTieAndMonotoneInvariance) {
  Tensor<double> onehot({4, 2, 2, 2}, 0.0);
  for (std::size_t v = 0; v < 8; ++v) onehot[2 * 8 + v] = 1.0;
  const auto lab = argmax_segment(onehot);
  for (auto l : lab.storage()) EXPECT_EQ(l, 2);

  Tensor<double> tie({4, 1, 1, 1}, std::vector<double>{0.5, 0.5, 0, 0});
  EXPECT_EQ(argmax_segment(tie)[0], 0);
  Tensor<double> top({4, 1, 1, 1}, std::vector<double>{0.1, 0.2, 0.3, 0.4});
  EXPECT_EQ(argmax_segment(top)[0], 4);

  std::mt19937_64 rng(2);
  const auto m = random_map(4, {5, 5, 5}, rng);
  const auto base = argmax_segment(m);
  std::uniform_real_distribution<double> u(0.1, 5.0);
  for (int t = 0; t < 30; ++t) {
    const double a = u(rng), b = u(rng), c = u(rng);
    Tensor<double> f = m;
    for (auto& v : f.storage()) v = a * std::exp(b * v) + c * v * v * v;
    EXPECT_EQ(argmax_segment(f), base);
  }
}

TEST(Argmax, SharedMaximizerSurvivesAveraging) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0, 1);
  const Extents3 e{10, 10, 10};
  const std::size_t n = e.volume();
  std::vector<Tensor<double>> maps;
  std::vector<std::size_t> winner(n);
  for (auto& w : winner) w = rng() % 4;
  for (int m = 0; m < 5; ++m) {
    auto p = random_map(4, e, rng);
    for (std::size_t v = 0; v < n; ++v) {
      // Boost the shared class so it is each member's strict maximum.
      p[winner[v] * n + v] += 1.0 + u(rng);
      double s = 0;
      for (std::size_t c = 0; c < 4; ++c) s += p[c * n + v];
      for (std::size_t c = 0; c < 4; ++c) p[c * n + v] /= s;
    }
    maps.push_back(std::move(p));
  }
  std::vector<const Tensor<double>*> ptrs;
  for (const auto& m : maps) ptrs.push_back(&m);
  const auto lab = argmax_segment(average_confidences(ptrs));
  for (std::size_t v = 0; v < n; ++v) ASSERT_EQ(lab[v], kLabelValues[winner[v]]);
}

TEST(Tiling, DeepMedicTilesAbutAndCoverOnce) {
  const auto spec = build_deepmedic("base", 4, 0.25);
  Network<float> net(spec);
  net.initialize(1);
  PhantomOptions o;
  o.extents = {48, 50, 52};
  const auto c = phantom_case(1, 0, o);
  Tensor<std::uint32_t> cov;
  const auto p = predict_full_volume(net, c.images, {}, &cov);
  EXPECT_EQ(p.shape(), (Shape{4, 48, 50, 52}));
  for (auto v : cov.storage()) ASSERT_EQ(v, 1u);
  expect_simplex(p, 1e-5);
}

TEST(Tiling, SamePaddedSingleTileEqualsDirectPrediction) {
  const auto spec = with_training_output(build_unet("sum_skip", 4, 0.25), Extents3::cube(16));
  Network<float> net(spec);
  net.initialize(2);
  std::mt19937_64 rng(4);
  std::normal_distribution<float> nd;
  Tensor<float> img(volume_shape(4, Extents3::cube(16)));
  for (auto& v : img.storage()) v = nd(rng);
  const auto tiled = predict_full_volume(net, img);
  const std::vector<Tensor<float>> in{img};
  EXPECT_EQ(tiled, net.predict(in).cast<double>());
}

TEST(Tiling, OverlappingTilesCoverOnce) {
  const auto spec = with_training_output(build_unet("concat_skip", 4, 0.25), Extents3::cube(16));
  Network<float> net(spec);
  net.initialize(3);
  std::mt19937_64 rng(5);
  std::normal_distribution<float> nd;
  Tensor<float> img(volume_shape(4, {20, 33, 40}));
  for (auto& v : img.storage()) v = nd(rng);
  Tensor<std::uint32_t> cov;
  const auto p = predict_full_volume(net, img, {}, &cov);
  for (auto v : cov.storage()) ASSERT_EQ(v, 1u);
  expect_simplex(p, 1e-5);

  Tensor<float> tiny(volume_shape(4, {4, 40, 40}));
  EXPECT_THROW(predict_full_volume(net, tiny), DimensionError);
}

TEST(Manifest, ParsingAndValidation) {
  const auto m = EnsembleManifest::from_json(
      R"([{"checkpoint":"a.ckpt","spec_id":"unet_sum_skip","normalization":"v1_zscore"}])", "/base");
  ASSERT_EQ(m.members.size(), 1u);
  EXPECT_EQ(m.members[0].checkpoint, fs::path("/base/a.ckpt"));
  EXPECT_THROW(EnsembleManifest::from_json("[]"), ConfigError);
  EXPECT_THROW(EnsembleManifest::from_json(R"([{"checkpoint":"a","spec_id":"x","normalization":"v1_zscore","w":2}])"),
               ConfigError);
  EXPECT_THROW(EnsembleManifest::from_json("{"), ConfigError);
}

TEST(RunEmma, OneMemberDuplicatesAndPermutations) {
  TempDir dir("emma_ensemble_test");
  PhantomOptions o;
  o.extents = Extents3::cube(48);
  const auto raw = phantom_case(6, 0, o);

  std::vector<ManifestEntry> entries;
  std::uint64_t seed = 1;
  for (const char* id : {"unet_sum_skip", "fcn_residual_shallow", "deepmedic_base"}) {
    auto spec = build_network(id, 4, 0.25);
    if (spec.family != Family::deepmedic) spec = with_training_output(spec, Extents3::cube(32));
    Network<float> net(spec);
    net.initialize(seed++);
    net.metadata.normalization = "v1_zscore";
    const auto path = dir.path() / (std::string(id) + ".ckpt");
    save_checkpoint(path, net);
    entries.push_back({path, id, "v1_zscore"});
  }

  EnsembleManifest one{{entries[0]}};
  const auto r1 = run_emma(one, raw);
  const auto net = load_checkpoint<float>(entries[0].checkpoint);
  const auto direct = predict_full_volume(net, normalize_case(raw, NormalizationSpec{}).images);
  EXPECT_EQ(r1.confidence.probs, direct);
  EXPECT_EQ(r1.labels, argmax_segment(direct));

  EnsembleManifest twice{{entries[0], entries[0]}};
  EXPECT_EQ(run_emma(twice, raw).confidence.probs, r1.confidence.probs);

  EnsembleManifest all{entries};
  const auto ra = run_emma(all, raw, Precision::f32, {}, true);
  ASSERT_EQ(ra.members.size(), 3u);
  expect_simplex(ra.confidence.probs, 1e-5);
  EnsembleManifest rev{{entries[2], entries[1], entries[0]}};
  const auto rr = run_emma(rev, raw);
  for (std::size_t i = 0; i < rr.confidence.probs.numel(); ++i) {
    ASSERT_LE(std::abs(rr.confidence.probs[i] - ra.confidence.probs[i]), 1e-9);
  }
  EXPECT_EQ(run_emma(all, raw, Precision::f32, {}, false, 2).labels, ra.labels);

  EnsembleManifest wrong{{{entries[0].checkpoint, "unet_concat_skip", "v1_zscore"}}};
  EXPECT_THROW(run_emma(wrong, raw), CheckpointMismatchError);
  EnsembleManifest missing{{{dir.path() / "nope.ckpt", "unet_sum_skip", "v1_zscore"}}};
  EXPECT_THROW(run_emma(missing, raw), IoError);
}

TEST(ToyDemo, SymmetricCrossingAndBoundedPosteriors) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto r = toy_demo(seed);
    EXPECT_GE(r.members.size(), 6u);
    EXPECT_LE(std::abs(r.average_crossing), 1.0);
    for (const auto& curve : r.posteriors)
      for (double p : curve) {
        ASSERT_GE(p, 0.0);
        ASSERT_LE(p, 1.0);
      }
  }
  EXPECT_NEAR(half_crossing({0, 1, 2}, {0.0, 0.4, 0.8}), 1.25, 1e-12);
  EXPECT_TRUE(std::isnan(half_crossing({0, 1}, {0.1, 0.2})));
}

TEST(ToyDemo, FlatMemberShiftsAverageButNotCrossingSide) {
  const auto full = toy_demo(4);
  std::vector<ToyMember> without;
  for (const auto& m : default_toy_members()) {
    if (m.weight_decay < 0.4) without.push_back(m);
  }
  ASSERT_LT(without.size(), default_toy_members().size());
  const auto r = toy_demo(4, {}, without);
  EXPECT_NE(full.average, r.average);
  for (const auto* rep : {&full, &r}) {
    EXPECT_GT(rep->average_crossing, -ToyOptions{}.center);
    EXPECT_LT(rep->average_crossing, ToyOptions{}.center);
  }
}
