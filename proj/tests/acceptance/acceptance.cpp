// End-to-end acceptance run. One PASS/FAIL line per criterion; exit status is
// the number of failing criteria (0 when everything holds).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "commands.hpp"
#include "emma/ensemble.hpp"
#include "emma/gradcheck.hpp"
#include "emma/metrics.hpp"
#include "emma/network_spec.hpp"
#include "emma/normalization.hpp"
#include "emma/phantom.hpp"
#include "emma/sampling.hpp"
#include "emma/toy_demo.hpp"
#include "emma/training.hpp"
#include "oracles.hpp"

using namespace emma;
namespace fs = std::filesystem;

namespace {

// Collects failed sub-checks; a criterion passes when none failed.
struct Outcome {
  std::vector<std::string> failures;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  }
};

std::string fmt(double v, int digits = 4) {
  std::ostringstream s;
  s.precision(digits);
  s << v;
  return s.str();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

fs::path scratch_dir() {
  const auto d = fs::temp_directory_path() / "emma_acceptance";
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

PhantomOptions phantom48() {
  PhantomOptions o;
  o.extents = Extents3::cube(48);
  return o;
}

Tensor<double> random_simplex_map(std::size_t K, Extents3 e, std::mt19937_64& rng) {
  std::gamma_distribution<double> g(0.7);
  Tensor<double> p({K, e.d, e.h, e.w});
  const std::size_t n = e.volume();
  for (std::size_t v = 0; v < n; ++v) {
    double s = 0;
    for (std::size_t c = 0; c < K; ++c) s += p[c * n + v] = g(rng) + 1e-12;
    for (std::size_t c = 0; c < K; ++c) p[c * n + v] /= s;
  }
  return p;
}

double simplex_error(const Tensor<double>& p) {
  const std::size_t K = p.dim(0), n = p.numel() / K;
  double worst = 0;
  for (std::size_t v = 0; v < n; ++v) {
    double s = 0;
    for (std::size_t c = 0; c < K; ++c) {
      const double x = p[c * n + v];
      if (x < 0 || x > 1) return INFINITY;
      s += x;
    }
    worst = std::max(worst, std::abs(s - 1.0));
  }
  return worst;
}

Mask make_mask(std::vector<std::uint8_t> v) {
  const std::size_t n = v.size();
  return Mask({1, 1, n}, std::move(v));
}

// ---------------------------------------------------------------------------

void gradients(Outcome& o) {
  GradcheckOptions opt;
  opt.instances = 20;
  opt.h = 1e-4;
  opt.tolerance = 1e-4;
  std::set<std::string> seen;
  double worst = 0;
  for (const char* scope : {"ops", "losses"}) {
    for (const auto& r : run_gradcheck(scope, opt)) {
      seen.insert(r.name);
      worst = std::max(worst, r.max_error);
      o.require(r.instances >= 20, r.name + " ran " + std::to_string(r.instances) + " instances");
      o.require(r.failures == 0 && r.max_error <= 1e-4, r.name + " max_rel_error " + fmt(r.max_error));
    }
  }
  for (const char* loss : {"cross_entropy", "soft_dice", "soft_iou"}) o.require(seen.count(loss) > 0, "missing " + std::string(loss));
  o.detail << seen.size() << " checks x 20 instances, worst rel error " << fmt(worst, 3);
}

void shapes(Outcome& o) {
  const auto ids = network_ids();
  o.require(ids.size() == 7, "expected 7 builders");
  for (const auto& id : ids) {
    const auto s = build_network(id, 4);
    try {
      validate(s);
    } catch (const Error& e) {
      o.require(false, id + ": " + e.what());
    }
  }
  for (auto [variant, normal, low, out] : {std::tuple{"base", 25u, 19u, 9u}, std::tuple{"wide", 34u, 22u, 18u}}) {
    const auto s = build_deepmedic(variant, 4);
    const std::string tag = std::string("deepmedic_") + variant;
    o.require(s.pathways.size() == 2, tag + " pathways");
    if (s.pathways.size() != 2) continue;
    o.require(s.pathways[0].train_extents == Extents3::cube(normal), tag + " normal pathway width");
    o.require(s.pathways[1].train_extents == Extents3::cube(low), tag + " low-res pathway width");
    const auto got = output_extents(s, {Extents3::cube(normal), Extents3::cube(low)});
    o.require(got == Extents3::cube(out) && s.train_output_extents == got, tag + " output " + extents_str(got));
    o.detail << tag << " " << normal << "/" << low << " -> " << got.d << "  ";
  }
  o.detail << ids.size() << " builders valid";
}

void metric_oracle(Outcome& o) {
  std::mt19937_64 rng(2024);
  std::size_t exact = 0;
  for (int t = 0; t < 100; ++t) {
    const auto e = oracle::random_extents(rng, 8);
    const auto a = oracle::random_mask(e, rng), b = oracle::random_mask(e, rng);
    const double want = oracle::hausdorff95(a, b, {1.0, 1.0, 1.0});
    const double got = hausdorff95(a, b).value;
    exact += got == want;
    o.require(got == want, "pair " + std::to_string(t) + ": " + fmt(got, 17) + " vs " + fmt(want, 17));
  }
  const auto a = make_mask({1, 1, 0, 0, 0}), b = make_mask({1, 1, 1, 1, 0});
  o.require(dice(b, b) == 1.0, "dice identical");
  o.require(dice(a, b) == 4.0 / 6.0, "dice |A|=2 |B|=4 overlap 2");
  o.require(dice(make_mask({0, 0}), make_mask({0, 0})) == 1.0, "dice both empty");
  const auto ref = make_mask({1, 1, 1, 1, 0, 0});
  o.require(sensitivity(make_mask({1, 1, 1, 1, 1, 0}), ref) == 1.0, "sensitivity superset");
  o.require(sensitivity(make_mask({0, 0, 0, 0, 1, 1}), ref) == 0.0, "sensitivity disjoint");
  o.require(sensitivity(make_mask({1, 1, 1, 0, 0, 0}), ref) == 0.75, "sensitivity 3 of 4");
  Mask p({1, 5, 5}, std::uint8_t{0}), q({1, 5, 5}, std::uint8_t{0});
  p[0] = 1;
  q[3 * 5 + 4] = 1;
  o.require(hausdorff95(p, q).value == 5.0, "3-4-5 single voxels");
  o.detail << exact << "/100 hd95 pairs exact, dice/sensitivity tables match";
}

void ensemble_algebra(Outcome& o) {
  std::mt19937_64 rng(7);
  const Extents3 e{10, 10, 10};
  std::vector<Tensor<double>> maps;
  for (int i = 0; i < 8; ++i) maps.push_back(random_simplex_map(4, e, rng));

  for (std::size_t copies : {2u, 3u, 7u, 64u}) {
    std::vector<const Tensor<double>*> dup(copies, &maps[0]);
    o.require(average_confidences(dup) == maps[0], "duplicates x" + std::to_string(copies) + " not exact");
  }
  std::vector<const Tensor<double>*> ptrs;
  for (const auto& m : maps) ptrs.push_back(&m);
  const auto ref = average_confidences(ptrs);
  double perm = 0;
  for (int t = 0; t < 50; ++t) {
    std::shuffle(ptrs.begin(), ptrs.end(), rng);
    const auto got = average_confidences(ptrs);
    for (std::size_t i = 0; i < ref.numel(); ++i) perm = std::max(perm, std::abs(got[i] - ref[i]));
  }
  o.require(perm <= 1e-9, "permutation deviation " + fmt(perm));
  const double simplex = simplex_error(ref);
  o.require(simplex <= 1e-6, "simplex deviation " + fmt(simplex));

  // 10,000 voxels on which every member has the same strict maximiser.
  const Extents3 big{10, 25, 40};
  const std::size_t n = big.volume();
  std::vector<std::size_t> winner(n);
  for (auto& w : winner) w = rng() % 4;
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<Tensor<double>> shared;
  for (int m = 0; m < 6; ++m) {
    auto p = random_simplex_map(4, big, rng);
    for (std::size_t v = 0; v < n; ++v) {
      p[winner[v] * n + v] += 1.0 + u(rng);
      double s = 0;
      for (std::size_t c = 0; c < 4; ++c) s += p[c * n + v];
      for (std::size_t c = 0; c < 4; ++c) p[c * n + v] /= s;
    }
    shared.push_back(std::move(p));
  }
  std::vector<const Tensor<double>*> sp;
  for (const auto& m : shared) sp.push_back(&m);
  const auto lab = argmax_segment(average_confidences(sp));
  std::size_t kept = 0;
  for (std::size_t v = 0; v < n; ++v) kept += lab[v] == kLabelValues[winner[v]];
  o.require(kept == n, "shared argmax kept on " + std::to_string(kept) + "/" + std::to_string(n));
  o.detail << "permutation " << fmt(perm, 2) << ", simplex " << fmt(simplex, 2) << ", shared argmax " << kept << "/"
           << n;
}

void normalization(Outcome& o) {
  // z-score: mask statistics and idempotence.
  double zs_worst = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    const auto c = phantom_case(31, i, phantom48());
    const auto mask = brain_mask(c);
    const auto z = zscore_normalize(c, mask);
    const auto zz = zscore_normalize(z, mask);
    for (std::size_t m = 0; m < 4; ++m) {
      const auto ch = z.images.channel(m);
      double s = 0, ss = 0;
      std::size_t cnt = 0;
      for (std::size_t k = 0; k < mask.numel(); ++k) {
        if (mask[k]) s += ch[k], ss += static_cast<double>(ch[k]) * ch[k], ++cnt;
        else o.require(ch[k] == 0.0f, "z-score leaves outside mask nonzero");
      }
      const double mean = s / cnt, sd = std::sqrt(ss / cnt - mean * mean);
      zs_worst = std::max({zs_worst, std::abs(mean), std::abs(sd - 1.0)});
    }
    for (std::size_t k = 0; k < z.images.numel(); ++k) {
      zs_worst = std::max(zs_worst, static_cast<double>(std::abs(zz.images[k] - z.images[k])));
    }
  }
  o.require(zs_worst <= 1e-5, "z-score deviation " + fmt(zs_worst));

  // Nyul: knots land exactly on the standard scale, and positive affine
  // copies of one case normalize to the same image.
  const auto model = nyul_train({oracle::ladder_case(1), oracle::ladder_case(2, 3.0, -40.0)});
  std::size_t knots = 0;
  double affine = 0, pwl = 0;
  const auto base_case = oracle::ladder_case(5);
  const auto base_out = nyul_apply(base_case, model, brain_mask(base_case));
  for (const auto& [a, b] : {std::pair{2.5, 17.0}, std::pair{0.5, 300.0}, std::pair{7.0, -2.0}}) {
    const auto c = oracle::ladder_case(5, a, b);
    const auto mask = brain_mask(c);
    const auto out = nyul_apply(c, model, mask);
    for (std::size_t m = 0; m < 4; ++m) {
      const auto src = c.images.channel(m), dst = out.images.channel(m), ref = base_out.images.channel(m);
      for (std::size_t i = 0; i < mask.numel(); ++i) {
        if (!mask[i]) continue;
        const double q = ((src[i] - b) / a - 1.0) / 10.0;
        for (std::size_t k = 0; k < model.percentiles.size(); ++k) {
          if (q != model.percentiles[k]) continue;
          ++knots;
          o.require(dst[i] == static_cast<float>(model.standard[m][k]), "knot " + fmt(model.percentiles[k]) + " not exact");
        }
        affine = std::max(affine, static_cast<double>(std::abs(dst[i] - ref[i])));
      }
    }
  }
  o.require(knots == 3 * 4 * 11, "knot voxels found " + std::to_string(knots));
  o.require(affine <= 1e-4, "affine equivariance deviation " + fmt(affine));
  // Piecewise-linear oracle on phantom cases.
  const auto cases = phantom_generate(7, 3, phantom48());
  const auto pm = nyul_train(cases);
  for (const auto& c : cases) {
    const auto mask = brain_mask(c);
    const auto out = nyul_apply(c, pm, mask);
    for (std::size_t m = 0; m < 4; ++m) {
      const auto xs = case_landmarks(c, m, mask);
      const auto src = c.images.channel(m), dst = out.images.channel(m);
      for (std::size_t i = 0; i < mask.numel(); ++i) {
        if (!mask[i]) continue;
        const double want = oracle::piecewise_linear(xs, pm.standard[m], src[i]);
        pwl = std::max(pwl, std::abs(dst[i] - want) / std::max(1.0, std::abs(want)));
      }
    }
  }
  o.require(pwl <= 1e-5, "piecewise-linear oracle deviation " + fmt(pwl));

  // Bias: quadratic log-field injected into otherwise identical phantoms.
  auto biased_o = phantom48();
  biased_o.bias_field = true;
  biased_o.field_strength = 0.3;
  double worst_before = 0, worst_after = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    const auto clean = phantom_case(21, i, phantom48());
    const auto biased = phantom_case(21, i, biased_o);
    const auto mask = brain_mask(biased);
    const auto fixed = polynomial_bias_correct(biased, 2, mask);
    for (std::size_t m = 0; m < 4; ++m) {
      const auto f = fixed.images.channel(m), r = clean.images.channel(m), bsrc = biased.images.channel(m);
      double sf = 0, sr = 0, sb = 0;
      for (std::size_t k = 0; k < mask.numel(); ++k) {
        if (mask[k]) sf += f[k], sr += r[k], sb += bsrc[k];
      }
      auto rel = [&](auto img, double s_img) {
        const double scale = s_img / sr;
        double err = 0;
        std::size_t cnt = 0;
        for (std::size_t k = 0; k < mask.numel(); ++k) {
          if (!mask[k]) continue;
          err += (img[k] - scale * r[k]) * (img[k] - scale * r[k]);
          ++cnt;
        }
        return std::sqrt(err / cnt) / (s_img / cnt);
      };
      worst_before = std::max(worst_before, rel(bsrc, sb));
      worst_after = std::max(worst_after, rel(f, sf));
    }
  }
  o.require(worst_after <= 0.02, "bias residual " + fmt(worst_after));
  o.detail << "z-score " << fmt(zs_worst, 2) << ", " << knots << " knots exact, affine " << fmt(affine, 2) << ", pwl "
           << fmt(pwl, 2) << ", bias rms " << fmt(worst_before, 3) << " -> " << fmt(worst_after, 3);
}

void sampling(Outcome& o) {
  const std::size_t n = 10000;
  auto sigma3 = [n](double p) { return 3.0 * std::sqrt(p * (1 - p) / n); };
  const auto raw = phantom_case(1, 0, phantom48());
  const auto c = zscore_normalize(raw, brain_mask(raw));

  PatchSampler half(c, build_deepmedic("base", 4), SamplingStrategy::healthy_tumour_5050);
  std::mt19937_64 rng(42);
  std::size_t tumour = 0;
  for (std::size_t i = 0; i < n; ++i) tumour += half.draw_center(rng).second != 0;
  const double ft = static_cast<double>(tumour) / n;
  o.require(std::abs(ft - 0.5) <= sigma3(0.5), "tumour fraction " + fmt(ft));

  PatchSampler uni(c, with_training_output(build_unet("sum_skip", 4, 0.25), Extents3::cube(16)),
                   SamplingStrategy::uniform_per_label);
  std::array<std::size_t, 4> hits{};
  for (std::size_t i = 0; i < n; ++i) ++hits.at(uni.draw_center(rng).second);
  o.detail << "tumour " << fmt(ft) << " (+-" << fmt(sigma3(0.5), 2) << "), per label";
  for (std::size_t k = 0; k < 4; ++k) {
    const double f = static_cast<double>(hits[k]) / n;
    o.require(std::abs(f - 0.25) <= sigma3(0.25), "class " + std::to_string(k) + " fraction " + fmt(f));
    o.detail << " " << fmt(f);
  }
  o.detail << " (+-" << fmt(sigma3(0.25), 2) << ")";
}

// Shared by the end-to-end and determinism criteria.
struct DeskEnsemble {
  EnsembleManifest manifest;
  std::vector<VolumeCase> held_out;
};

RunConfig desk_config(const std::string& id, const fs::path& dir) {
  RunConfig cfg;
  cfg.seed = 1;
  cfg.architecture = id;
  cfg.width_scale = 0.25;
  if (id.rfind("deepmedic", 0) != 0) cfg.patch = Extents3::cube(32);
  cfg.optimizer = OptimizerConfig::defaults(OptimizerKind::adam);
  cfg.optimizer.learning_rate = 0.003;
  cfg.sampling = SamplingStrategy::uniform_per_label;
  cfg.iterations = 300;
  cfg.log_every = 100;
  cfg.checkpoint = dir / (id + ".ckpt");
  cfg.log = dir / (id + ".log");
  return cfg;
}

void end_to_end(Outcome& o, const fs::path& dir, DeskEnsemble& desk) {
  const auto all = phantom_generate(11, 24, phantom48());
  const std::vector<VolumeCase> train_cases(all.begin(), all.begin() + 16);
  desk.held_out.assign(all.begin() + 16, all.end());

  const std::vector<std::string> ids{"unet_sum_skip", "fcn_residual_shallow", "deepmedic_base"};
  for (const auto& id : ids) {
    const auto cfg = desk_config(id, dir);
    o.require(cfg.iterations <= 2000, "iteration budget");
    const auto r = train<float>(cfg, train_cases);
    desk.manifest.members.push_back({r.checkpoint, id, "v1_zscore"});
  }

  std::vector<double> member_sum(ids.size(), 0.0);
  double emma_sum = 0, simplex = 0;
  for (const auto& c : desk.held_out) {
    const auto ref = merge_regions(c.labels);
    const auto r = run_emma(desk.manifest, c, Precision::f32, {}, true);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      member_sum[k] += dice(merge_regions(argmax_segment(r.members[k].probs)).whole, ref.whole);
    }
    emma_sum += dice(merge_regions(r.labels).whole, ref.whole);
    simplex = std::max(simplex, simplex_error(r.confidence.probs));
    const auto rs = merge_regions(r.labels);
    bool nested = true;
    for (std::size_t i = 0; i < r.labels.numel(); ++i) {
      const auto l = r.labels[i];
      nested &= (l == 0 || l == 1 || l == 2 || l == 4);
      nested &= rs.enhancing[i] <= rs.core[i] && rs.core[i] <= rs.whole[i];
    }
    o.require(nested, c.id + ": region nesting");
    o.require(r.labels == argmax_segment(r.confidence.probs), c.id + ": labels are not the argmax");
  }
  const double held = static_cast<double>(desk.held_out.size());
  const double emma = emma_sum / held;
  double worst = 1.0;
  for (std::size_t k = 0; k < ids.size(); ++k) {
    const double d = member_sum[k] / held;
    worst = std::min(worst, d);
    o.require(d >= 0.70, ids[k] + " whole dice " + fmt(d));
    o.detail << ids[k] << " " << fmt(d, 3) << ", ";
  }
  o.require(emma >= worst - 0.01, "EMMA whole dice " + fmt(emma) + " below worst member " + fmt(worst));
  o.require(simplex <= 1e-6, "EMMA simplex deviation " + fmt(simplex));
  o.detail << "EMMA " << fmt(emma, 3) << " (worst member " << fmt(worst, 3) << "), simplex " << fmt(simplex, 2);
}

void determinism(Outcome& o, const fs::path& dir, const DeskEnsemble& desk) {
  std::ostringstream out, err;
  const auto ph = dir / "det_ph";
  if (cli::run({"--seed", "5", "phantom", "--out-dir", ph.string(), "--count", "2", "--extents", "48"}, out, err) != 0) {
    o.require(false, "phantom: " + err.str());
    return;
  }
  std::size_t identical = 0;
  for (const std::string id : {"unet_sum_skip", "fcn_residual_shallow", "deepmedic_base"}) {
    std::vector<std::string> bytes;
    for (int rep = 0; rep < 2; ++rep) {
      const auto ckpt = dir / (id + "_det" + std::to_string(rep) + ".ckpt");
      std::ofstream(dir / "det.json")
          << R"({"seed": 9, "architecture": ")" << id << R"(", "width_scale": 0.25, )"
          << (id == "deepmedic_base" ? "" : R"("patch": 16, )")
          << R"("iterations": 15, "log_every": 5, "train_cases": [")" << (ph / "case_000.vol").string() << R"(", ")"
          << (ph / "case_001.vol").string() << R"("], "output": {"checkpoint": ")" << ckpt.string() << R"(", "log": ")"
          << ckpt.string() << R"(.log"}})";
      const int rc = cli::run({"train", (dir / "det.json").string(), "--quiet"}, out, err);
      o.require(rc == 0, id + " train exit " + std::to_string(rc) + ": " + err.str());
      bytes.push_back(slurp(ckpt));
    }
    const bool same = !bytes[0].empty() && bytes[0] == bytes[1];
    identical += same;
    o.require(same, id + " checkpoints differ");
  }
  const auto& c = desk.held_out.front();
  const auto a = run_emma(desk.manifest, c).labels;
  const auto b = run_emma(desk.manifest, c).labels;
  const auto threaded = run_emma(desk.manifest, c, Precision::f32, {}, false, 2).labels;
  o.require(a == b, "repeated run_emma labels differ");
  o.require(a == threaded, "threaded run_emma labels differ");
  o.detail << identical << "/3 checkpoint pairs bit-identical, run_emma labels identical (serial and 2 threads)";
}

void toy(Outcome& o) {
  double worst = 0;
  std::size_t members = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto r = toy_demo(seed);
    members = r.members.size();
    o.require(r.members.size() >= 6, "seed " + std::to_string(seed) + " members " + std::to_string(members));
    const double x = r.average_crossing;
    o.require(std::isfinite(x) && std::abs(x) <= 1.0, "seed " + std::to_string(seed) + " crossing " + fmt(x));
    worst = std::max(worst, std::abs(x));
  }
  o.detail << members << " members, max |crossing - 0| " << fmt(worst, 3) << " over 10 seeds";
}

}  // namespace

int main() {
  const auto dir = scratch_dir();
  DeskEnsemble desk;
  struct Criterion {
    int number;
    std::string name;
    double budget_s;
    std::function<void(Outcome&)> run;
  };
  const std::vector<Criterion> criteria{
      {1, "gradient suite", 120, gradients},
      {2, "shape oracle", 5, shapes},
      {3, "metric oracle", 60, metric_oracle},
      {4, "ensemble algebra", 60, ensemble_algebra},
      {5, "normalization", 120, normalization},
      {6, "sampling statistics", 60, sampling},
      {7, "desk-scale end-to-end", 1800, [&](Outcome& o) { end_to_end(o, dir, desk); }},
      {8, "determinism", 600, [&](Outcome& o) {
         if (desk.manifest.members.empty()) {
           o.require(false, "no trained ensemble available");
           return;
         }
         determinism(o, dir, desk);
       }},
      {9, "toy demo", 60, toy},
  };

  int failed = 0;
  for (const auto& c : criteria) {
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      c.run(o);
    } catch (const std::exception& e) {
      o.require(false, std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    o.require(secs <= c.budget_s, "runtime " + fmt(secs, 3) + " s over budget " + fmt(c.budget_s) + " s");
    const bool ok = o.failures.empty();
    failed += !ok;
    std::cout << (ok ? "PASS" : "FAIL") << " criterion " << c.number << " (" << c.name << "): " << o.detail.str()
              << " [" << fmt(secs, 3) << " s]\n";
    for (std::size_t i = 0; i < std::min<std::size_t>(o.failures.size(), 10); ++i) {
      std::cout << "    - " << o.failures[i] << "\n";
    }
    std::cout.flush();
  }
  fs::remove_all(dir);
  std::cout << (failed ? "FAILED " : "ALL PASSED ") << 9 - failed << "/9 criteria\n";
  return failed;
}
