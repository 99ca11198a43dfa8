#include "emma/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <memory>

namespace emma {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using MutMap = Eigen::Map<RowMat<T>>;
template <typename T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

struct AxisGeom {
  std::size_t in = 0;
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t out = 0;
  std::ptrdiff_t pad_before = 0;
};

AxisGeom axis_geom(std::size_t in, std::size_t kernel, std::size_t stride, Padding pad) {
  if (stride == 0) throw UsageError("stride must be >= 1");
  if (kernel == 0) throw DimensionError("kernel extent must be >= 1");
  AxisGeom g{in, kernel, stride, 0, 0};
  if (pad == Padding::valid) {
    if (kernel > in) {
      throw DimensionError("kernel extent " + std::to_string(kernel) + " exceeds input extent " + std::to_string(in));
    }
    g.out = (in - kernel) / stride + 1;
  } else {
    g.out = (in + stride - 1) / stride;
    const std::ptrdiff_t total =
        std::max<std::ptrdiff_t>(static_cast<std::ptrdiff_t>((g.out - 1) * stride + kernel) -
                                     static_cast<std::ptrdiff_t>(in),
                                 0);
    g.pad_before = total / 2;
  }
  return g;
}

template <typename T>
const Tensor<T>& require_rank(const Tape<T>& tape, Var v, std::size_t rank, const char* op) {
  const auto& t = tape.value(v);
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + " tensor, got " +
                         shape_str(t.shape()));
  }
  return t;
}

// A run of consecutive output columns sharing the same (z, y) output row.
struct RowSegment {
  std::size_t col = 0;
  std::size_t len = 0;
  std::ptrdiff_t z = 0;
  std::ptrdiff_t y = 0;
  std::ptrdiff_t x = 0;
};

struct ConvGeom {
  std::size_t channels_in = 0;
  Extents3 in;
  std::array<AxisGeom, 3> axes;
  std::size_t out_plane() const { return axes[1].out * axes[2].out; }
  std::size_t out_count() const { return axes[0].out * axes[1].out * axes[2].out; }
  std::size_t col_rows() const { return channels_in * axes[0].kernel * axes[1].kernel * axes[2].kernel; }
};

std::vector<RowSegment> segments_for(const ConvGeom& g, std::size_t p0, std::size_t n) {
  std::vector<RowSegment> segs;
  const std::size_t wo = g.axes[2].out;
  std::size_t p = p0;
  const std::size_t end = p0 + n;
  while (p < end) {
    const std::size_t oz = p / g.out_plane();
    const std::size_t oy = (p / wo) % g.axes[1].out;
    const std::size_t ox = p % wo;
    const std::size_t len = std::min(wo - ox, end - p);
    segs.push_back({p - p0, len, static_cast<std::ptrdiff_t>(oz), static_cast<std::ptrdiff_t>(oy),
                    static_cast<std::ptrdiff_t>(ox)});
    p += len;
  }
  return segs;
}

// Calls fn(r, segment, row_offset, x_offset) for every im2col row r and output
// segment; row_offset is -1 when the tap's (z, y) lies in the padding.
template <typename Fn>
void for_each_tap(const ConvGeom& g, const std::vector<RowSegment>& segs, Fn&& fn) {
  const auto& az = g.axes[0];
  const auto& ay = g.axes[1];
  const auto& ax = g.axes[2];
  const auto D = static_cast<std::ptrdiff_t>(g.in.d);
  const auto H = static_cast<std::ptrdiff_t>(g.in.h);
  std::size_t r = 0;
  for (std::size_t ci = 0; ci < g.channels_in; ++ci) {
    for (std::size_t a = 0; a < az.kernel; ++a) {
      for (std::size_t b = 0; b < ay.kernel; ++b) {
        for (std::size_t c = 0; c < ax.kernel; ++c, ++r) {
          for (const auto& s : segs) {
            const std::ptrdiff_t iz = s.z * static_cast<std::ptrdiff_t>(az.stride) + static_cast<std::ptrdiff_t>(a) - az.pad_before;
            const std::ptrdiff_t iy = s.y * static_cast<std::ptrdiff_t>(ay.stride) + static_cast<std::ptrdiff_t>(b) - ay.pad_before;
            const bool inside = iz >= 0 && iz < D && iy >= 0 && iy < H;
            const std::ptrdiff_t row = inside ? ((static_cast<std::ptrdiff_t>(ci) * D + iz) * H + iy) * static_cast<std::ptrdiff_t>(g.in.w) : -1;
            fn(r, s, row, static_cast<std::ptrdiff_t>(c) - ax.pad_before);
          }
        }
      }
    }
  }
}

template <typename T>
void im2col(const ConvGeom& g, const T* x, const std::vector<RowSegment>& segs, std::size_t n, T* col) {
  const auto W = static_cast<std::ptrdiff_t>(g.in.w);
  const auto sx = static_cast<std::ptrdiff_t>(g.axes[2].stride);
  for_each_tap(g, segs, [&](std::size_t r, const RowSegment& s, std::ptrdiff_t row, std::ptrdiff_t xoff) {
    T* dst = col + r * n + s.col;
    if (row < 0) {
      std::fill(dst, dst + s.len, T{0});
      return;
    }
    const T* src = x + row;
    for (std::size_t t = 0; t < s.len; ++t) {
      const std::ptrdiff_t ix = (s.x + static_cast<std::ptrdiff_t>(t)) * sx + xoff;
      dst[t] = (ix >= 0 && ix < W) ? src[ix] : T{0};
    }
  });
}

template <typename T>
void col2im_add(const ConvGeom& g, const T* col, const std::vector<RowSegment>& segs, std::size_t n, T* gx) {
  const auto W = static_cast<std::ptrdiff_t>(g.in.w);
  const auto sx = static_cast<std::ptrdiff_t>(g.axes[2].stride);
  for_each_tap(g, segs, [&](std::size_t r, const RowSegment& s, std::ptrdiff_t row, std::ptrdiff_t xoff) {
    if (row < 0) return;
    const T* src = col + r * n + s.col;
    T* dst = gx + row;
    for (std::size_t t = 0; t < s.len; ++t) {
      const std::ptrdiff_t ix = (s.x + static_cast<std::ptrdiff_t>(t)) * sx + xoff;
      if (ix >= 0 && ix < W) dst[ix] += src[t];
    }
  });
}

std::size_t chunk_columns(std::size_t rows, std::size_t total) {
  constexpr std::size_t kBudget = std::size_t{1} << 21;
  const std::size_t n = std::max<std::size_t>(64, kBudget / std::max<std::size_t>(rows, 1));
  return std::min(n, total);
}

void require_same_spatial(const Shape& a, const Shape& b, const char* op) {
  if (a.size() != 4 || b.size() != 4 || a[1] != b[1] || a[2] != b[2] || a[3] != b[3]) {
    throw DimensionError(std::string(op) + ": spatial extents differ: " + shape_str(a) + " vs " + shape_str(b));
  }
}

}  // namespace

std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride, Padding pad) {
  return axis_geom(in, kernel, stride, pad).out;
}

template <typename T>
Var conv3d(Tape<T>& tape, Var input, Var kernel, Extents3 stride, Padding padding) {
  const auto& x = require_rank(tape, input, 4, "conv3d input");
  const auto& w = require_rank(tape, kernel, 5, "conv3d kernel");
  if (w.dim(1) != x.dim(0)) {
    throw DimensionError("conv3d: input has " + std::to_string(x.dim(0)) + " channels but kernel expects " +
                         std::to_string(w.dim(1)) + " (kernel shape " + shape_str(w.shape()) + ")");
  }
  ConvGeom g;
  g.channels_in = x.dim(0);
  g.in = x.spatial();
  for (std::size_t i = 0; i < 3; ++i) g.axes[i] = axis_geom(g.in[i], w.dim(2 + i), stride[i], padding);
  const std::size_t co = w.dim(0);
  const std::size_t P = g.out_count();
  const std::size_t K = g.col_rows();
  const bool pointwise = K == g.channels_in && stride == Extents3{1, 1, 1};

  Tensor<T> out({co, g.axes[0].out, g.axes[1].out, g.axes[2].out});
  ConstMap<T> wm(w.data(), co, K);
  if (pointwise) {
    MutMap<T>(out.data(), co, P).noalias() = wm * ConstMap<T>(x.data(), K, P);
  } else {
    // im2col packs each chunk densely as K x n, so the buffer is mapped per chunk.
    const std::size_t chunk = chunk_columns(K, P);
    std::vector<T> col(K * chunk);
    for (std::size_t p0 = 0; p0 < P; p0 += chunk) {
      const std::size_t n = std::min(chunk, P - p0);
      const auto segs = segments_for(g, p0, n);
      im2col(g, x.data(), segs, n, col.data());
      StridedMap<T> ob(out.data() + p0, co, n, Eigen::OuterStride<>(P));
      ob.noalias() = wm * ConstMap<T>(col.data(), K, n);
    }
  }

  return tape.record(std::move(out), {input, kernel}, [input, kernel, g, co, P, K, pointwise](Tape<T>& t, const Tensor<T>& gout) {
    const auto& x = t.value(input);
    const auto& w = t.value(kernel);
    Tensor<T>* gx = t.grad_buffer(input);
    Tensor<T>* gw = t.grad_buffer(kernel);
    ConstMap<T> wm(w.data(), co, K);
    if (pointwise) {
      ConstMap<T> go(gout.data(), co, P);
      if (gw) MutMap<T>(gw->data(), co, K).noalias() += go * ConstMap<T>(x.data(), K, P).transpose();
      if (gx) MutMap<T>(gx->data(), K, P).noalias() += wm.transpose() * go;
      return;
    }
    const std::size_t chunk = chunk_columns(K, P);
    std::vector<T> col(K * chunk);
    for (std::size_t p0 = 0; p0 < P; p0 += chunk) {
      const std::size_t n = std::min(chunk, P - p0);
      const auto segs = segments_for(g, p0, n);
      ConstStridedMap<T> go(gout.data() + p0, co, n, Eigen::OuterStride<>(P));
      if (gw) {
        im2col(g, x.data(), segs, n, col.data());
        MutMap<T>(gw->data(), co, K).noalias() += go * ConstMap<T>(col.data(), K, n).transpose();
      }
      if (gx) {
        MutMap<T>(col.data(), K, n).noalias() = wm.transpose() * go;
        col2im_add(g, col.data(), segs, n, gx->data());
      }
    }
  });
}

template <typename T>
Var bias_add(Tape<T>& tape, Var input, Var bias) {
  const auto& x = require_rank(tape, input, 4, "bias_add input");
  const auto& b = tape.value(bias);
  const std::size_t C = x.dim(0);
  if (b.numel() != C) {
    throw DimensionError("bias_add: bias has " + std::to_string(b.numel()) + " entries for " + std::to_string(C) +
                         " channels");
  }
  Tensor<T> out = x;
  const std::size_t n = x.numel() / C;
  for (std::size_t c = 0; c < C; ++c) {
    T* p = out.data() + c * n;
    for (std::size_t i = 0; i < n; ++i) p[i] += b[c];
  }
  return tape.record(std::move(out), {input, bias}, [input, bias, C, n](Tape<T>& t, const Tensor<T>& g) {
    t.accumulate(input, g);
    if (Tensor<T>* gb = t.grad_buffer(bias)) {
      for (std::size_t c = 0; c < C; ++c) {
        T s{0};
        const T* p = g.data() + c * n;
        for (std::size_t i = 0; i < n; ++i) s += p[i];
        (*gb)[c] += s;
      }
    }
  });
}

template <typename T>
Var max_pool3d(Tape<T>& tape, Var input, Extents3 window, Extents3 stride) {
  const auto& x = require_rank(tape, input, 4, "max_pool3d");
  const Extents3 in = x.spatial();
  std::array<AxisGeom, 3> ax;
  for (std::size_t i = 0; i < 3; ++i) {
    if (window[i] > in[i]) {
      throw DimensionError("max_pool3d: window " + extents_str(window) + " larger than input " + extents_str(in));
    }
    ax[i] = axis_geom(in[i], window[i], stride[i], Padding::valid);
  }
  const std::size_t C = x.dim(0);
  Tensor<T> out({C, ax[0].out, ax[1].out, ax[2].out});
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.numel());
  std::size_t o = 0;
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t z = 0; z < ax[0].out; ++z) {
      for (std::size_t y = 0; y < ax[1].out; ++y) {
        for (std::size_t xo = 0; xo < ax[2].out; ++xo, ++o) {
          std::size_t best_i = 0;
          T best{};
          bool first = true;
          for (std::size_t a = 0; a < window.d; ++a) {
            for (std::size_t b = 0; b < window.h; ++b) {
              for (std::size_t e = 0; e < window.w; ++e) {
                const std::size_t idx =
                    ((c * in.d + z * stride.d + a) * in.h + y * stride.h + b) * in.w + xo * stride.w + e;
                if (first || x[idx] > best) {
                  best = x[idx];
                  best_i = idx;
                  first = false;
                }
              }
            }
          }
          out[o] = best;
          (*argmax)[o] = best_i;
        }
      }
    }
  }
  return tape.record(std::move(out), {input}, [input, argmax](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>* gx = t.grad_buffer(input);
    for (std::size_t i = 0; i < g.numel(); ++i) (*gx)[(*argmax)[i]] += g[i];
  });
}

template <typename T>
Var downsample_average(Tape<T>& tape, Var input, std::size_t factor) {
  const auto& x = require_rank(tape, input, 4, "downsample_average");
  const Extents3 in = x.spatial();
  if (factor == 0 || in.d % factor || in.h % factor || in.w % factor) {
    throw DimensionError("downsample_average: extents " + extents_str(in) + " not divisible by factor " +
                         std::to_string(factor));
  }
  const std::size_t C = x.dim(0);
  const Extents3 oe{in.d / factor, in.h / factor, in.w / factor};
  Tensor<T> out(volume_shape(C, oe));
  const T scale = T{1} / static_cast<T>(factor * factor * factor);
  // Extended-precision sums divided once: averaging a block-constant region
  // (e.g. an upsampled volume) returns the constant exactly.
  std::vector<long double> acc(out.numel(), 0.0L);
  const std::size_t on = oe.volume();
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t z = 0; z < in.d; ++z)
      for (std::size_t y = 0; y < in.h; ++y)
        for (std::size_t xx = 0; xx < in.w; ++xx)
          acc[c * on + ((z / factor) * oe.h + y / factor) * oe.w + xx / factor] += x.at(c, z, y, xx);
  const auto count = static_cast<long double>(factor * factor * factor);
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<T>(acc[i] / count);
  return tape.record(std::move(out), {input}, [input, factor, scale](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>* gx = t.grad_buffer(input);
    const Extents3 in = gx->spatial();
    for (std::size_t c = 0; c < gx->dim(0); ++c)
      for (std::size_t z = 0; z < in.d; ++z)
        for (std::size_t y = 0; y < in.h; ++y)
          for (std::size_t xx = 0; xx < in.w; ++xx) gx->at(c, z, y, xx) += scale * g.at(c, z / factor, y / factor, xx / factor);
  });
}

namespace {

// Linear interpolation taps for one axis, half-pixel centres, edge-clamped.
struct LerpTap {
  std::size_t lo = 0;
  std::size_t hi = 0;
  double w_hi = 0.0;
};

std::vector<LerpTap> lerp_taps(std::size_t in, std::size_t factor) {
  std::vector<LerpTap> taps(in * factor);
  for (std::size_t o = 0; o < taps.size(); ++o) {
    double src = (static_cast<double>(o) + 0.5) / static_cast<double>(factor) - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto lo = static_cast<std::size_t>(std::floor(src));
    const std::size_t hi = std::min(lo + 1, in - 1);
    taps[o] = {lo, hi, src - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace

template <typename T>
Var upsample(Tape<T>& tape, Var input, std::size_t factor, UpsampleMode mode) {
  const auto& x = require_rank(tape, input, 4, "upsample");
  if (factor == 0) throw UsageError("upsample: factor must be >= 1");
  const std::size_t C = x.dim(0);
  const Extents3 in = x.spatial();
  const Extents3 oe{in.d * factor, in.h * factor, in.w * factor};
  Tensor<T> out(volume_shape(C, oe));

  if (mode == UpsampleMode::repeat) {
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t z = 0; z < oe.d; ++z)
        for (std::size_t y = 0; y < oe.h; ++y)
          for (std::size_t xx = 0; xx < oe.w; ++xx) out.at(c, z, y, xx) = x.at(c, z / factor, y / factor, xx / factor);
    return tape.record(std::move(out), {input}, [input, factor](Tape<T>& t, const Tensor<T>& g) {
      Tensor<T>* gx = t.grad_buffer(input);
      const Extents3 oe = g.spatial();
      for (std::size_t c = 0; c < g.dim(0); ++c)
        for (std::size_t z = 0; z < oe.d; ++z)
          for (std::size_t y = 0; y < oe.h; ++y)
            for (std::size_t xx = 0; xx < oe.w; ++xx) gx->at(c, z / factor, y / factor, xx / factor) += g.at(c, z, y, xx);
    });
  }

  auto tz = std::make_shared<std::vector<LerpTap>>(lerp_taps(in.d, factor));
  auto ty = std::make_shared<std::vector<LerpTap>>(lerp_taps(in.h, factor));
  auto tx = std::make_shared<std::vector<LerpTap>>(lerp_taps(in.w, factor));
  // Visits the 8 (index, weight) corner pairs of every output voxel.
  auto visit = [tz, ty, tx](const Extents3& oe, std::size_t C, auto&& fn) {
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t z = 0; z < oe.d; ++z)
        for (std::size_t y = 0; y < oe.h; ++y)
          for (std::size_t xx = 0; xx < oe.w; ++xx) {
            const auto& a = (*tz)[z];
            const auto& b = (*ty)[y];
            const auto& e = (*tx)[xx];
            const std::size_t zs[2] = {a.lo, a.hi};
            const std::size_t ys[2] = {b.lo, b.hi};
            const std::size_t xs[2] = {e.lo, e.hi};
            const double wz[2] = {1.0 - a.w_hi, a.w_hi};
            const double wy[2] = {1.0 - b.w_hi, b.w_hi};
            const double wx[2] = {1.0 - e.w_hi, e.w_hi};
            for (int i = 0; i < 2; ++i)
              for (int j = 0; j < 2; ++j)
                for (int k = 0; k < 2; ++k) fn(c, z, y, xx, zs[i], ys[j], xs[k], wz[i] * wy[j] * wx[k]);
          }
  };
  visit(oe, C, [&](auto c, auto z, auto y, auto xx, auto sz, auto sy, auto sx, double wgt) {
    out.at(c, z, y, xx) += static_cast<T>(wgt) * x.at(c, sz, sy, sx);
  });
  return tape.record(std::move(out), {input}, [input, visit](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>* gx = t.grad_buffer(input);
    visit(g.spatial(), g.dim(0), [&](auto c, auto z, auto y, auto xx, auto sz, auto sy, auto sx, double wgt) {
      gx->at(c, sz, sy, sx) += static_cast<T>(wgt) * g.at(c, z, y, xx);
    });
  });
}

template <typename T>
Var batch_norm(Tape<T>& tape, Var input, Var gamma, Var beta, BatchNormState<T>& stats, bool training) {
  const auto& x = require_rank(tape, input, 4, "batch_norm");
  const std::size_t C = x.dim(0);
  const std::size_t n = x.numel() / C;
  if (n == 0) throw DimensionError("batch_norm: zero spatial volume");
  const auto& gm = tape.value(gamma);
  const auto& bt = tape.value(beta);
  if (gm.numel() != C || bt.numel() != C) {
    throw DimensionError("batch_norm: gamma/beta length must equal channel count " + std::to_string(C));
  }
  if (stats.running_mean.size() != C) stats = BatchNormState<T>(C);

  // Per-channel scale and shift such that y = x * a + b, plus saved xhat stats.
  auto inv_std = std::make_shared<std::vector<double>>(C);
  auto mu = std::make_shared<std::vector<double>>(C);
  Tensor<T> out(x.shape());
  for (std::size_t c = 0; c < C; ++c) {
    const T* p = x.data() + c * n;
    double m, var;
    if (training) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += p[i];
      m = s / static_cast<double>(n);
      double ss = 0.0;
      for (std::size_t i = 0; i < n; ++i) ss += (p[i] - m) * (p[i] - m);
      var = ss / static_cast<double>(n);
      const double unbiased = n > 1 ? ss / static_cast<double>(n - 1) : var;
      stats.running_mean[c] = static_cast<T>(stats.momentum * stats.running_mean[c] + (1.0 - stats.momentum) * m);
      stats.running_var[c] = static_cast<T>(stats.momentum * stats.running_var[c] + (1.0 - stats.momentum) * unbiased);
    } else {
      m = stats.running_mean[c];
      var = stats.running_var[c];
    }
    (*mu)[c] = m;
    (*inv_std)[c] = 1.0 / std::sqrt(var + stats.eps);
    const T a = static_cast<T>(gm[c] * (*inv_std)[c]);
    const T b = static_cast<T>(bt[c] - gm[c] * m * (*inv_std)[c]);
    T* q = out.data() + c * n;
    for (std::size_t i = 0; i < n; ++i) q[i] = p[i] * a + b;
  }

  return tape.record(std::move(out), {input, gamma, beta},
                     [input, gamma, beta, C, n, mu, inv_std, training](Tape<T>& t, const Tensor<T>& g) {
                       const auto& x = t.value(input);
                       const auto& gm = t.value(gamma);
                       Tensor<T>* gx = t.grad_buffer(input);
                       Tensor<T>* gg = t.grad_buffer(gamma);
                       Tensor<T>* gb = t.grad_buffer(beta);
                       for (std::size_t c = 0; c < C; ++c) {
                         const T* p = x.data() + c * n;
                         const T* gp = g.data() + c * n;
                         const double m = (*mu)[c];
                         const double is = (*inv_std)[c];
                         double sum_g = 0.0, sum_gx = 0.0;
                         for (std::size_t i = 0; i < n; ++i) {
                           sum_g += gp[i];
                           sum_gx += gp[i] * (p[i] - m) * is;
                         }
                         if (gg) (*gg)[c] += static_cast<T>(sum_gx);
                         if (gb) (*gb)[c] += static_cast<T>(sum_g);
                         if (!gx) continue;
                         T* q = gx->data() + c * n;
                         const double gam = gm[c];
                         if (training) {
                           const double inv_n = 1.0 / static_cast<double>(n);
                           for (std::size_t i = 0; i < n; ++i) {
                             const double xhat = (p[i] - m) * is;
                             q[i] += static_cast<T>(gam * is * (gp[i] - inv_n * sum_g - xhat * inv_n * sum_gx));
                           }
                         } else {
                           for (std::size_t i = 0; i < n; ++i) q[i] += static_cast<T>(gam * is * gp[i]);
                         }
                       }
                     });
}

template <typename T>
Var relu(Tape<T>& tape, Var input) {
  Tensor<T> out = tape.value(input);
  for (auto& v : out.storage()) v = v > T{0} ? v : T{0};
  return tape.record(std::move(out), {input}, [input](Tape<T>& t, const Tensor<T>& g) {
    const auto& x = t.value(input);
    Tensor<T>* gx = t.grad_buffer(input);
    for (std::size_t i = 0; i < g.numel(); ++i)
      if (x[i] > T{0}) (*gx)[i] += g[i];
  });
}

template <typename T>
Var softmax_channels(Tape<T>& tape, Var input) {
  const auto& x = tape.value(input);
  if (x.rank() < 1 || x.dim(0) < 1) throw DimensionError("softmax_channels: need at least one class");
  const std::size_t K = x.dim(0);
  const std::size_t n = x.numel() / K;
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < n; ++i) {
    T mx = x[i];
    for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, x[k * n + i]);
    T s{0};
    for (std::size_t k = 0; k < K; ++k) {
      const T e = std::exp(x[k * n + i] - mx);
      out[k * n + i] = e;
      s += e;
    }
    for (std::size_t k = 0; k < K; ++k) out[k * n + i] /= s;
  }
  // The backward pass reads the output node, whose id is only known after recording.
  auto self = std::make_shared<Var>();
  *self = tape.record(std::move(out), {input}, [input, self, K, n](Tape<T>& t, const Tensor<T>& g) {
    const auto& y = t.value(*self);
    Tensor<T>* gx = t.grad_buffer(input);
    for (std::size_t i = 0; i < n; ++i) {
      T dot{0};
      for (std::size_t k = 0; k < K; ++k) dot += g[k * n + i] * y[k * n + i];
      for (std::size_t k = 0; k < K; ++k) (*gx)[k * n + i] += y[k * n + i] * (g[k * n + i] - dot);
    }
  });
  return *self;
}

template <typename T>
Var concat_channels(Tape<T>& tape, Var a, Var b) {
  const auto& x = tape.value(a);
  const auto& y = tape.value(b);
  require_same_spatial(x.shape(), y.shape(), "concat_channels");
  Shape s = x.shape();
  s[0] += y.dim(0);
  std::vector<T> data;
  data.reserve(x.numel() + y.numel());
  data.insert(data.end(), x.storage().begin(), x.storage().end());
  data.insert(data.end(), y.storage().begin(), y.storage().end());
  const std::size_t na = x.numel();
  return tape.record(Tensor<T>(std::move(s), std::move(data)), {a, b}, [a, b, na](Tape<T>& t, const Tensor<T>& g) {
    if (Tensor<T>* ga = t.grad_buffer(a))
      for (std::size_t i = 0; i < na; ++i) (*ga)[i] += g[i];
    if (Tensor<T>* gb = t.grad_buffer(b))
      for (std::size_t i = 0; i < gb->numel(); ++i) (*gb)[i] += g[na + i];
  });
}

template <typename T>
Var add(Tape<T>& tape, Var a, Var b) {
  const auto& x = tape.value(a);
  const auto& y = tape.value(b);
  if (x.shape() != y.shape()) {
    throw DimensionError("add: shapes differ: " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
  }
  Tensor<T> out = x;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += y[i];
  return tape.record(std::move(out), {a, b}, [a, b](Tape<T>& t, const Tensor<T>& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

template <typename T>
Var mul(Tape<T>& tape, Var a, Var b) {
  const auto& x = tape.value(a);
  const auto& y = tape.value(b);
  if (x.shape() != y.shape()) {
    throw DimensionError("mul: shapes differ: " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
  }
  Tensor<T> out = x;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= y[i];
  return tape.record(std::move(out), {a, b}, [a, b](Tape<T>& t, const Tensor<T>& g) {
    if (Tensor<T>* ga = t.grad_buffer(a)) {
      const auto& y = t.value(b);
      for (std::size_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i] * y[i];
    }
    if (Tensor<T>* gb = t.grad_buffer(b)) {
      const auto& x = t.value(a);
      for (std::size_t i = 0; i < g.numel(); ++i) (*gb)[i] += g[i] * x[i];
    }
  });
}

template <typename T>
Var crop_center(Tape<T>& tape, Var input, Extents3 target) {
  const auto& x = require_rank(tape, input, 4, "crop_center");
  const Extents3 in = x.spatial();
  for (std::size_t i = 0; i < 3; ++i) {
    if (target[i] > in[i] || target[i] == 0) {
      throw DimensionError("crop_center: cannot crop " + extents_str(in) + " to " + extents_str(target));
    }
  }
  const Extents3 off{(in.d - target.d) / 2, (in.h - target.h) / 2, (in.w - target.w) / 2};
  const std::size_t C = x.dim(0);
  Tensor<T> out(volume_shape(C, target));
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t z = 0; z < target.d; ++z)
      for (std::size_t y = 0; y < target.h; ++y)
        std::copy_n(&x.at(c, z + off.d, y + off.h, off.w), target.w, &out.at(c, z, y, 0));
  return tape.record(std::move(out), {input}, [input, off, target, C](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>* gx = t.grad_buffer(input);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t z = 0; z < target.d; ++z)
        for (std::size_t y = 0; y < target.h; ++y)
          for (std::size_t xx = 0; xx < target.w; ++xx) gx->at(c, z + off.d, y + off.h, xx + off.w) += g.at(c, z, y, xx);
  });
}

template <typename T>
Var dropout(Tape<T>& tape, Var input, double rate, std::mt19937_64& rng, bool training) {
  if (rate < 0.0 || rate >= 1.0) throw UsageError("dropout: rate must be in [0, 1)");
  if (!training || rate == 0.0) return input;
  const auto& x = tape.value(input);
  auto mask = std::make_shared<std::vector<T>>(x.numel());
  std::bernoulli_distribution keep(1.0 - rate);
  const T scale = static_cast<T>(1.0 / (1.0 - rate));
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    (*mask)[i] = keep(rng) ? scale : T{0};
    out[i] = x[i] * (*mask)[i];
  }
  return tape.record(std::move(out), {input}, [input, mask](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>* gx = t.grad_buffer(input);
    for (std::size_t i = 0; i < g.numel(); ++i) (*gx)[i] += g[i] * (*mask)[i];
  });
}

template <typename T>
Var sum(Tape<T>& tape, Var input) {
  const auto& x = tape.value(input);
  double s = 0.0;
  for (auto v : x.storage()) s += v;
  return tape.record(Tensor<T>({1}, static_cast<T>(s)), {input}, [input](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>* gx = t.grad_buffer(input);
    for (auto& v : gx->storage()) v += g[0];
  });
}

template <typename T>
Var mean(Tape<T>& tape, Var input) {
  const auto& x = tape.value(input);
  double s = 0.0;
  for (auto v : x.storage()) s += v;
  const T inv = static_cast<T>(1.0 / static_cast<double>(x.numel()));
  return tape.record(Tensor<T>({1}, static_cast<T>(s) * inv), {input}, [input, inv](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>* gx = t.grad_buffer(input);
    for (auto& v : gx->storage()) v += g[0] * inv;
  });
}

#define EMMA_INSTANTIATE_OPS(T)                                                                       \
  template Var conv3d<T>(Tape<T>&, Var, Var, Extents3, Padding);                                     \
  template Var bias_add<T>(Tape<T>&, Var, Var);                                                      \
  template Var max_pool3d<T>(Tape<T>&, Var, Extents3, Extents3);                                     \
  template Var downsample_average<T>(Tape<T>&, Var, std::size_t);                                    \
  template Var upsample<T>(Tape<T>&, Var, std::size_t, UpsampleMode);                                \
  template Var batch_norm<T>(Tape<T>&, Var, Var, Var, BatchNormState<T>&, bool);                     \
  template Var relu<T>(Tape<T>&, Var);                                                               \
  template Var softmax_channels<T>(Tape<T>&, Var);                                                   \
  template Var concat_channels<T>(Tape<T>&, Var, Var);                                               \
  template Var add<T>(Tape<T>&, Var, Var);                                                           \
  template Var mul<T>(Tape<T>&, Var, Var);                                                           \
  template Var crop_center<T>(Tape<T>&, Var, Extents3);                                              \
  template Var dropout<T>(Tape<T>&, Var, double, std::mt19937_64&, bool);                            \
  template Var sum<T>(Tape<T>&, Var);                                                                \
  template Var mean<T>(Tape<T>&, Var);

EMMA_INSTANTIATE_OPS(float)
EMMA_INSTANTIATE_OPS(double)

}  // namespace emma
