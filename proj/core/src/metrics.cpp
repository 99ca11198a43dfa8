#include "emma/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <json.hpp>
#include <limits>
#include <sstream>

namespace emma {

RegionSet merge_regions(const LabelTensor& labels, const Spacing& spacing) {
  if (labels.rank() != 3) throw DimensionError("merge_regions: expected [D,H,W] labels, got " + shape_str(labels.shape()));
  RegionSet r{Mask(labels.shape(), 0), Mask(labels.shape(), 0), Mask(labels.shape(), 0), spacing};
  for (std::size_t i = 0; i < labels.numel(); ++i) {
    switch (labels[i]) {
      case 0: break;
      case 1: r.whole[i] = r.core[i] = 1; break;
      case 2: r.whole[i] = 1; break;
      case 4: r.whole[i] = r.core[i] = r.enhancing[i] = 1; break;
      default: throw DataError("merge_regions: unexpected label value " + std::to_string(labels[i]));
    }
  }
  return r;
}

namespace {

void check_same(const Mask& a, const Mask& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": extents " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         " differ");
  }
}

struct Counts {
  std::size_t a = 0, b = 0, both = 0;
};

Counts count(const Mask& a, const Mask& b) {
  Counts c;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const bool x = a[i] != 0, y = b[i] != 0;
    c.a += x;
    c.b += y;
    c.both += x && y;
  }
  return c;
}

}  // namespace

double dice(const Mask& pred, const Mask& ref) {
  check_same(pred, ref, "dice");
  const Counts c = count(pred, ref);
  if (c.a + c.b == 0) return 1.0;
  return 2.0 * static_cast<double>(c.both) / static_cast<double>(c.a + c.b);
}

double sensitivity(const Mask& pred, const Mask& ref) {
  check_same(pred, ref, "sensitivity");
  const Counts c = count(pred, ref);
  if (c.b == 0) return 1.0;
  return static_cast<double>(c.both) / static_cast<double>(c.b);
}

Mask surface_voxels(const Mask& m) {
  if (m.rank() != 3) throw DimensionError("surface_voxels: expected [D,H,W], got " + shape_str(m.shape()));
  const std::size_t D = m.dim(0), H = m.dim(1), W = m.dim(2);
  Mask s(m.shape(), 0);
  auto on = [&](std::size_t z, std::size_t y, std::size_t x) { return m[(z * H + y) * W + x] != 0; };
  for (std::size_t z = 0; z < D; ++z)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        if (!on(z, y, x)) continue;
        const bool border = z == 0 || y == 0 || x == 0 || z + 1 == D || y + 1 == H || x + 1 == W;
        if (border || !on(z - 1, y, x) || !on(z + 1, y, x) || !on(z, y - 1, x) || !on(z, y + 1, x) ||
            !on(z, y, x - 1) || !on(z, y, x + 1)) {
          s[(z * H + y) * W + x] = 1;
        }
      }
  return s;
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// One pass of the Felzenszwalb-Huttenlocher lower envelope on squared
// distances along a line of n samples spaced `step` apart.
void edt_line(const double* f, double* out, std::size_t n, double step, std::vector<std::size_t>& v,
              std::vector<double>& zb) {
  v.clear();
  zb.clear();
  auto pos = [&](std::size_t q) { return static_cast<double>(q) * step; };
  for (std::size_t q = 0; q < n; ++q) {
    if (f[q] == kInf) continue;
    while (!v.empty()) {
      const std::size_t p = v.back();
      const double s = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
      if (s <= zb.back()) {
        v.pop_back();
        zb.pop_back();
      } else {
        v.push_back(q);
        zb.push_back(s);
        break;
      }
    }
    if (v.empty()) {
      v.push_back(q);
      zb.push_back(-kInf);
    }
  }
  if (v.empty()) {
    std::fill(out, out + n, kInf);
    return;
  }
  std::size_t k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    while (k + 1 < v.size() && zb[k + 1] < pos(q)) ++k;
    const double d = pos(q) - pos(v[k]);
    out[q] = d * d + f[v[k]];
  }
}

}  // namespace

std::vector<double> distance_transform(const Mask& m, const Spacing& spacing) {
  if (m.rank() != 3) throw DimensionError("distance_transform: expected [D,H,W], got " + shape_str(m.shape()));
  const std::size_t dims[3] = {m.dim(0), m.dim(1), m.dim(2)};
  const std::size_t strides[3] = {dims[1] * dims[2], dims[2], 1};
  std::vector<double> sq(m.numel());
  for (std::size_t i = 0; i < m.numel(); ++i) sq[i] = m[i] ? 0.0 : kInf;

  std::vector<double> line, out;
  std::vector<std::size_t> v;
  std::vector<double> zb;
  // Innermost axis first, so the x-spacing term is added first like a direct sum.
  for (int axis = 2; axis >= 0; --axis) {
    const std::size_t n = dims[axis], stride = strides[axis];
    line.resize(n);
    out.resize(n);
    for (std::size_t base = 0; base < m.numel(); ++base) {
      // Visit each line once, from its first element.
      if ((base / stride) % n != 0) continue;
      for (std::size_t q = 0; q < n; ++q) line[q] = sq[base + q * stride];
      edt_line(line.data(), out.data(), n, spacing[axis], v, zb);
      for (std::size_t q = 0; q < n; ++q) sq[base + q * stride] = out[q];
    }
  }
  for (auto& d : sq) d = std::sqrt(d);
  return sq;
}

namespace {

double directed95(const Mask& from_surface, const std::vector<double>& to_distance) {
  std::vector<double> d;
  for (std::size_t i = 0; i < from_surface.numel(); ++i) {
    if (from_surface[i]) d.push_back(to_distance[i]);
  }
  std::sort(d.begin(), d.end());
  const auto rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(d.size())));
  return d[std::max<std::size_t>(rank, 1) - 1];
}

}  // namespace

HausdorffResult hausdorff95(const Mask& pred, const Mask& ref, const Spacing& spacing) {
  check_same(pred, ref, "hausdorff95");
  const Counts c = count(pred, ref);
  if (c.a == 0 && c.b == 0) return {0.0, true};
  if (c.a == 0 || c.b == 0) return {kHausdorffSentinel, true};
  const Mask sp = surface_voxels(pred), sr = surface_voxels(ref);
  const auto dp = distance_transform(sp, spacing), dr = distance_transform(sr, spacing);
  return {std::max(directed95(sp, dr), directed95(sr, dp)), false};
}

ConfidenceDiagnostics confidence_diagnostics(const Tensor<double>& map, const LabelTensor& ref_classes,
                                             std::size_t bins) {
  if (map.rank() != 4) throw DimensionError("confidence_diagnostics: expected [K,D,H,W], got " + shape_str(map.shape()));
  if (ref_classes.shape() != Shape{map.dim(1), map.dim(2), map.dim(3)}) {
    throw DimensionError("confidence_diagnostics: reference " + shape_str(ref_classes.shape()) + " does not match map " +
                         shape_str(map.shape()));
  }
  if (bins == 0) throw ParameterError("confidence_diagnostics: bins must be positive");
  const std::size_t K = map.dim(0), n = map.numel() / K;
  ConfidenceDiagnostics d;
  d.bins = bins;
  d.correct.assign(K, std::vector<std::size_t>(bins, 0));
  d.incorrect.assign(K, std::vector<std::size_t>(bins, 0));
  std::vector<std::size_t> pooled(bins, 0);
  double entropy = 0.0, confidence = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    double h = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      const double p = map[k * n + i];
      if (p > map[best * n + i]) best = k;
      if (p > 0.0) h -= p * std::log(p);
    }
    const double p = map[best * n + i];
    const auto bin = std::min(bins - 1, static_cast<std::size_t>(std::max(0.0, p) * static_cast<double>(bins)));
    (ref_classes[i] == best ? d.correct : d.incorrect)[best][bin] += 1;
    pooled[bin] += 1;
    entropy += h;
    confidence += p;
  }
  d.mean_entropy = entropy / static_cast<double>(n);
  d.mean_confidence = confidence / static_cast<double>(n);
  for (std::size_t b = 0; b < bins; ++b) {
    const double q = static_cast<double>(pooled[b]) / static_cast<double>(n);
    if (q > 0.0) d.histogram_entropy -= q * std::log(q);
  }
  return d;
}

const RegionScore& EvaluationReport::region(const std::string& name) const {
  for (const auto& r : regions) {
    if (r.region == name) return r;
  }
  throw UsageError("report has no region '" + name + "'");
}

namespace {

nlohmann::json report_json(const EvaluationReport& r) {
  nlohmann::json j;
  j["case_id"] = r.case_id;
  for (const auto& s : r.regions) {
    j["regions"][s.region] = {{"dice", s.dice},
                              {"sensitivity", s.sensitivity},
                              {"hausdorff95_mm", s.hausdorff95.value},
                              {"hausdorff95_empty_mask", s.hausdorff95.empty_mask}};
  }
  if (r.diagnostics) {
    const auto& d = *r.diagnostics;
    j["confidence"] = {{"bins", d.bins},
                       {"correct", d.correct},
                       {"incorrect", d.incorrect},
                       {"mean_entropy", d.mean_entropy},
                       {"histogram_entropy", d.histogram_entropy},
                       {"mean_confidence", d.mean_confidence}};
  }
  return j;
}

void table_header(std::ostringstream& os) {
  os << std::left << std::setw(24) << "case" << std::right;
  for (const char* metric : {"DSC", "Sens", "HD95"})
    for (const char* region : {"Enh.", "Whole", "Core"}) os << std::setw(12) << (std::string(metric) + " " + region);
  os << '\n';
}

void table_row(std::ostringstream& os, const EvaluationReport& r) {
  os << std::left << std::setw(24) << r.case_id.substr(0, 23) << std::right << std::fixed;
  for (int metric = 0; metric < 3; ++metric) {
    for (const char* name : {"enhancing", "whole", "core"}) {
      const RegionScore& s = r.region(name);
      if (metric == 0) os << std::setw(12) << std::setprecision(4) << s.dice;
      if (metric == 1) os << std::setw(12) << std::setprecision(4) << s.sensitivity;
      if (metric == 2) {
        std::ostringstream v;
        v << std::fixed << std::setprecision(2) << s.hausdorff95.value << (s.hausdorff95.empty_mask ? "*" : "");
        os << std::setw(12) << v.str();
      }
    }
  }
  os << '\n';
}

}  // namespace

std::string EvaluationReport::to_json() const { return report_json(*this).dump(2); }

std::string EvaluationReport::to_table() const { return reports_to_table({*this}); }

EvaluationReport evaluate(const LabelTensor& pred, const LabelTensor& ref, const Spacing& spacing,
                          const Tensor<double>* confidence, std::string case_id) {
  if (pred.shape() != ref.shape()) {
    throw DimensionError("evaluate: prediction " + shape_str(pred.shape()) + " and reference " + shape_str(ref.shape()) +
                         " differ");
  }
  const RegionSet p = merge_regions(pred, spacing), r = merge_regions(ref, spacing);
  EvaluationReport report;
  report.case_id = std::move(case_id);
  const std::pair<const char*, const Mask RegionSet::*> regions[] = {
      {"enhancing", &RegionSet::enhancing}, {"whole", &RegionSet::whole}, {"core", &RegionSet::core}};
  for (const auto& [name, member] : regions) {
    report.regions.push_back({name, dice(p.*member, r.*member), sensitivity(p.*member, r.*member),
                              hausdorff95(p.*member, r.*member, spacing)});
  }
  if (confidence) report.diagnostics = confidence_diagnostics(*confidence, labels_to_classes(ref));
  return report;
}

std::string reports_to_json(const std::vector<EvaluationReport>& reports) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : reports) j.push_back(report_json(r));
  return j.dump(2);
}

std::string reports_to_table(const std::vector<EvaluationReport>& reports) {
  std::ostringstream os;
  table_header(os);
  for (const auto& r : reports) table_row(os, r);
  if (reports.size() > 1) {
    EvaluationReport mean;
    mean.case_id = "mean";
    for (const char* name : {"enhancing", "whole", "core"}) {
      RegionScore s{name, 0.0, 0.0, {}};
      for (const auto& r : reports) {
        s.dice += r.region(name).dice / static_cast<double>(reports.size());
        s.sensitivity += r.region(name).sensitivity / static_cast<double>(reports.size());
        s.hausdorff95.value += r.region(name).hausdorff95.value / static_cast<double>(reports.size());
      }
      mean.regions.push_back(s);
    }
    table_row(os, mean);
  }
  os << "(* = empty-mask convention)\n";
  return os.str();
}

}  // namespace emma
