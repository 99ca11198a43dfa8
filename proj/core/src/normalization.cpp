#include "emma/normalization.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <json.hpp>

namespace emma {

std::string to_string(NormalizationVersion v) {
  switch (v) {
    case NormalizationVersion::v1_zscore: return "v1_zscore";
    case NormalizationVersion::v2_bfc_zscore: return "v2_bfc_zscore";
    case NormalizationVersion::v3_bfc_pwl_zscore: return "v3_bfc_pwl_zscore";
  }
  return "unknown";
}

NormalizationVersion parse_normalization(std::string_view name) {
  if (name == "v1_zscore" || name == "v1") return NormalizationVersion::v1_zscore;
  if (name == "v2_bfc_zscore" || name == "v2") return NormalizationVersion::v2_bfc_zscore;
  if (name == "v3_bfc_pwl_zscore" || name == "v3") return NormalizationVersion::v3_bfc_pwl_zscore;
  throw ConfigError("unknown normalization version '" + std::string(name) + "'");
}

std::string to_string(BiasMode m) {
  switch (m) {
    case BiasMode::external: return "external";
    case BiasMode::polynomial: return "polynomial";
    case BiasMode::none: return "none";
  }
  return "unknown";
}

BiasMode parse_bias_mode(std::string_view name) {
  if (name == "external") return BiasMode::external;
  if (name == "polynomial") return BiasMode::polynomial;
  if (name == "none") return BiasMode::none;
  throw ConfigError("unknown bias mode '" + std::string(name) + "'");
}

namespace {

void check_mask(const VolumeCase& c, const Mask& mask, const char* op) {
  const Extents3 e = c.extents();
  if (mask.shape() != Shape{e.d, e.h, e.w}) {
    throw DimensionError(std::string(op) + ": mask " + shape_str(mask.shape()) + " does not match case extents " +
                         extents_str(e));
  }
  if (mask_count(mask) == 0) throw DataError(std::string(op) + ": empty brain mask in case '" + c.id + "'");
}

std::vector<double> masked_values(const VolumeCase& c, std::size_t m, const Mask& mask) {
  std::vector<double> v;
  const auto ch = c.images.channel(m);
  for (std::size_t i = 0; i < mask.numel(); ++i) {
    if (mask[i]) v.push_back(ch[i]);
  }
  return v;
}

}  // namespace

Mask brain_mask(const VolumeCase& c) {
  const Extents3 e = c.extents();
  Mask mask({e.d, e.h, e.w}, 0);
  const std::size_t n = e.volume();
  for (std::size_t m = 0; m < c.images.dim(0); ++m) {
    const auto ch = c.images.channel(m);
    for (std::size_t i = 0; i < n; ++i) {
      if (ch[i] != 0.0f) mask[i] = 1;
    }
  }
  if (mask_count(mask) == 0) throw DataError("case '" + c.id + "': brain mask is empty (all modalities zero)");
  return mask;
}

std::size_t mask_count(const Mask& m) {
  return static_cast<std::size_t>(std::count_if(m.storage().begin(), m.storage().end(), [](auto v) { return v != 0; }));
}

VolumeCase zscore_normalize(const VolumeCase& c, const Mask& mask) {
  check_mask(c, mask, "zscore_normalize");
  VolumeCase out = c;
  const double n = static_cast<double>(mask_count(mask));
  for (std::size_t m = 0; m < c.images.dim(0); ++m) {
    const auto src = c.images.channel(m);
    double sum = 0.0;
    for (std::size_t i = 0; i < mask.numel(); ++i) {
      if (mask[i]) sum += src[i];
    }
    const double mu = sum / n;
    double ss = 0.0;
    for (std::size_t i = 0; i < mask.numel(); ++i) {
      if (mask[i]) ss += (src[i] - mu) * (src[i] - mu);
    }
    const double sd = std::sqrt(ss / n);
    if (!(sd > 0.0) || sd < 1e-12 * std::max(1.0, std::abs(mu))) {
      throw DataError("case '" + c.id + "': modality '" + kModalityNames[m] + "' has zero variance inside the mask");
    }
    auto dst = out.images.channel(m);
    for (std::size_t i = 0; i < mask.numel(); ++i) {
      dst[i] = mask[i] ? static_cast<float>((src[i] - mu) / sd) : 0.0f;
    }
  }
  return out;
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw DataError("percentile of an empty set");
  const double rank = q / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(rank));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  std::nth_element(values.begin(), values.begin() + lo, values.end());
  const double a = values[lo];
  if (hi == lo) return a;
  const double b = *std::min_element(values.begin() + lo + 1, values.end());
  return a + (rank - static_cast<double>(lo)) * (b - a);
}

std::vector<double> case_landmarks(const VolumeCase& c, std::size_t modality, const Mask& mask,
                                   const std::vector<double>& percentiles) {
  check_mask(c, mask, "case_landmarks");
  std::vector<double> values = masked_values(c, modality, mask);
  std::sort(values.begin(), values.end());
  std::vector<double> out;
  const double n1 = static_cast<double>(values.size() - 1);
  for (double q : percentiles) {
    const double rank = q / 100.0 * n1;
    const auto lo = static_cast<std::size_t>(std::floor(rank));
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    out.push_back(values[lo] + (rank - static_cast<double>(lo)) * (values[hi] - values[lo]));
  }
  return out;
}

std::string LandmarkModel::to_json() const {
  nlohmann::json j;
  j["percentiles"] = percentiles;
  for (std::size_t m = 0; m < kNumModalities; ++m) j[kModalityNames[m]] = standard[m];
  return j.dump();
}

LandmarkModel LandmarkModel::from_json(std::string_view text) {
  LandmarkModel model;
  try {
    const auto j = nlohmann::json::parse(text);
    model.percentiles = j.at("percentiles").get<std::vector<double>>();
    for (std::size_t m = 0; m < kNumModalities; ++m) {
      model.standard[m] = j.at(kModalityNames[m]).get<std::vector<double>>();
      if (model.standard[m].size() != model.percentiles.size()) {
        throw ConfigError("landmark model: '" + kModalityNames[m] + "' has " +
                          std::to_string(model.standard[m].size()) + " landmarks for " +
                          std::to_string(model.percentiles.size()) + " percentiles");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("landmark model: ") + e.what());
  }
  if (model.percentiles.size() < 2) throw ConfigError("landmark model needs at least two percentiles");
  return model;
}

LandmarkModel nyul_train(const std::vector<VolumeCase>& cases, const std::vector<double>& percentiles,
                         const std::vector<Mask>* masks) {
  if (cases.size() < 2) throw DataError("nyul_train needs at least 2 cases, got " + std::to_string(cases.size()));
  if (percentiles.size() < 2) throw ParameterError("nyul_train needs at least two percentiles");
  LandmarkModel model;
  model.percentiles = percentiles;
  for (std::size_t m = 0; m < kNumModalities; ++m) model.standard[m].assign(percentiles.size(), 0.0);
  for (std::size_t k = 0; k < cases.size(); ++k) {
    const Mask mask = masks ? masks->at(k) : brain_mask(cases[k]);
    for (std::size_t m = 0; m < kNumModalities; ++m) {
      const auto lm = case_landmarks(cases[k], m, mask, percentiles);
      const double lo = lm.front(), hi = lm.back();
      if (!(hi > lo)) {
        throw DataError("case '" + cases[k].id + "': degenerate '" + kModalityNames[m] +
                        "' histogram (first and last landmark equal)");
      }
      for (std::size_t i = 0; i < lm.size(); ++i) {
        model.standard[m][i] += 100.0 * (lm[i] - lo) / (hi - lo) / static_cast<double>(cases.size());
      }
    }
  }
  return model;
}

VolumeCase nyul_apply(const VolumeCase& c, const LandmarkModel& model, const Mask& mask) {
  if (!model.trained()) throw UsageError("nyul_apply: landmark model has not been trained");
  VolumeCase out = c;
  for (std::size_t m = 0; m < kNumModalities; ++m) {
    const auto src_knots = case_landmarks(c, m, mask, model.percentiles);
    const auto& dst_knots = model.standard[m];
    if (!(src_knots.back() > src_knots.front())) {
      throw DataError("case '" + c.id + "': degenerate '" + kModalityNames[m] + "' histogram");
    }
    // Segments of zero source width are skipped; they carry no voxels.
    std::vector<double> xs, ys;
    for (std::size_t i = 0; i < src_knots.size(); ++i) {
      if (!xs.empty() && src_knots[i] <= xs.back()) {
        ys.back() = dst_knots[i];
        continue;
      }
      xs.push_back(src_knots[i]);
      ys.push_back(dst_knots[i]);
    }
    auto map = [&](double v) {
      std::size_t seg;
      if (v <= xs.front()) {
        seg = 0;
      } else if (v >= xs.back()) {
        seg = xs.size() - 2;
      } else {
        seg = static_cast<std::size_t>(std::upper_bound(xs.begin(), xs.end(), v) - xs.begin()) - 1;
      }
      const double slope = (ys[seg + 1] - ys[seg]) / (xs[seg + 1] - xs[seg]);
      return ys[seg] + slope * (v - xs[seg]);
    };
    const auto src = c.images.channel(m);
    auto dst = out.images.channel(m);
    for (std::size_t i = 0; i < mask.numel(); ++i) {
      if (mask[i]) dst[i] = static_cast<float>(map(src[i]));
    }
  }
  return out;
}

namespace {

// Monomials z^a y^b x^c with a+b+c <= degree.
std::vector<std::array<int, 3>> monomials(int degree) {
  std::vector<std::array<int, 3>> out;
  for (int total = 0; total <= degree; ++total)
    for (int a = total; a >= 0; --a)
      for (int b = total - a; b >= 0; --b) out.push_back({a, b, total - a - b});
  return out;
}

double median(std::vector<double> v) {
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + mid, v.end());
  double m = v[mid];
  if (v.size() % 2 == 0) m = 0.5 * (m + *std::max_element(v.begin(), v.begin() + mid));
  return m;
}

}  // namespace

VolumeCase polynomial_bias_correct(const VolumeCase& c, int degree, const Mask& mask) {
  if (degree != 2 && degree != 3) throw ParameterError("bias correction degree must be 2 or 3, got " + std::to_string(degree));
  check_mask(c, mask, "polynomial_bias_correct");
  const Extents3 e = c.extents();
  const auto terms = monomials(degree);
  const std::size_t P = terms.size();

  // Design matrix over all in-mask voxels, shared by every modality.
  std::vector<std::size_t> index;
  for (std::size_t i = 0; i < mask.numel(); ++i) {
    if (mask[i]) index.push_back(i);
  }
  auto scaled = [](std::size_t v, std::size_t n) { return n > 1 ? 2.0 * v / (n - 1.0) - 1.0 : 0.0; };
  Eigen::MatrixXd A(index.size(), P);
  for (std::size_t r = 0; r < index.size(); ++r) {
    const std::size_t i = index[r];
    const double pz = scaled(i / (e.h * e.w), e.d), py = scaled((i / e.w) % e.h, e.h), px = scaled(i % e.w, e.w);
    for (std::size_t t = 0; t < P; ++t) {
      A(r, t) = std::pow(pz, terms[t][0]) * std::pow(py, terms[t][1]) * std::pow(px, terms[t][2]);
    }
  }

  VolumeCase out = c;
  for (std::size_t m = 0; m < c.images.dim(0); ++m) {
    const auto src = c.images.channel(m);
    Eigen::VectorXd y(index.size());
    std::vector<char> inlier(index.size(), 0);
    for (std::size_t r = 0; r < index.size(); ++r) {
      const double v = src[index[r]];
      inlier[r] = v > 0.0;
      y(r) = v > 0.0 ? std::log(v) : 0.0;
    }
    Eigen::VectorXd coef = Eigen::VectorXd::Zero(P);
    for (int iter = 0; iter < 8; ++iter) {
      Eigen::MatrixXd AtA = Eigen::MatrixXd::Zero(P, P);
      Eigen::VectorXd Aty = Eigen::VectorXd::Zero(P);
      std::size_t used = 0;
      for (std::size_t r = 0; r < index.size(); ++r) {
        if (!inlier[r]) continue;
        AtA.selfadjointView<Eigen::Lower>().rankUpdate(A.row(r).transpose());
        Aty += A.row(r).transpose() * y(r);
        ++used;
      }
      AtA.triangularView<Eigen::StrictlyUpper>() = AtA.transpose();
      const Eigen::LDLT<Eigen::MatrixXd> ldlt(AtA);
      if (used < P || ldlt.info() != Eigen::Success || !ldlt.isPositive() ||
          ldlt.vectorD().minCoeff() <= 1e-12 * ldlt.vectorD().maxCoeff()) {
        throw DataError("case '" + c.id + "': bias field fit for '" + kModalityNames[m] +
                        "' is singular (too few or degenerate voxels)");
      }
      coef = ldlt.solve(Aty);

      // Refit without voxels whose residual is an outlier (tissue contrast, tumour).
      std::vector<double> res;
      res.reserve(index.size());
      const Eigen::VectorXd fit = A * coef;
      for (std::size_t r = 0; r < index.size(); ++r) {
        if (src[index[r]] > 0.0) res.push_back(y(r) - fit(r));
      }
      const double med = median(res);
      std::vector<double> dev(res.size());
      for (std::size_t k = 0; k < res.size(); ++k) dev[k] = std::abs(res[k] - med);
      const double limit = 2.5 * 1.4826 * median(dev);
      bool changed = false;
      for (std::size_t r = 0; r < index.size(); ++r) {
        const bool keep = src[index[r]] > 0.0 && std::abs(y(r) - fit(r) - med) <= limit;
        changed |= keep != static_cast<bool>(inlier[r]);
        inlier[r] = keep;
      }
      if (!changed) break;
    }

    const Eigen::VectorXd field = A * coef;
    double before = 0.0, after = 0.0;
    std::vector<double> corrected(index.size());
    for (std::size_t r = 0; r < index.size(); ++r) {
      const double v = src[index[r]];
      corrected[r] = v / std::exp(field(r));
      before += v;
      after += corrected[r];
    }
    const double scale = after != 0.0 ? before / after : 1.0;
    auto dst = out.images.channel(m);
    for (std::size_t r = 0; r < index.size(); ++r) dst[index[r]] = static_cast<float>(corrected[r] * scale);
  }
  return out;
}

VolumeCase normalize_case(const VolumeCase& raw, const NormalizationSpec& spec) {
  const Mask mask = brain_mask(raw);
  VolumeCase x = raw;
  if (spec.version != NormalizationVersion::v1_zscore && spec.bias_mode == BiasMode::polynomial) {
    x = polynomial_bias_correct(x, spec.bias_degree, mask);
  }
  if (spec.version == NormalizationVersion::v3_bfc_pwl_zscore) {
    if (!spec.landmarks || !spec.landmarks->trained()) {
      throw UsageError("normalization v3_bfc_pwl_zscore needs a trained landmark model");
    }
    x = nyul_apply(x, *spec.landmarks, mask);
  }
  return zscore_normalize(x, mask);
}

NormalizationSpec fit_normalization(const std::vector<VolumeCase>& raw_cases, NormalizationSpec spec) {
  if (spec.version != NormalizationVersion::v3_bfc_pwl_zscore) return spec;
  std::vector<VolumeCase> corrected;
  std::vector<Mask> masks;
  for (const auto& c : raw_cases) {
    masks.push_back(brain_mask(c));
    corrected.push_back(spec.bias_mode == BiasMode::polynomial ? polynomial_bias_correct(c, spec.bias_degree, masks.back())
                                                               : c);
  }
  spec.landmarks = nyul_train(corrected, kLandmarkPercentiles, &masks);
  return spec;
}

}  // namespace emma
