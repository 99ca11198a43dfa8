#include <algorithm>
#include <cmath>

#include "emma/network_spec.hpp"

namespace emma {

std::string to_string(Family f) {
  switch (f) {
    case Family::deepmedic: return "deepmedic";
    case Family::fcn: return "fcn";
    case Family::unet: return "unet";
  }
  return "unknown";
}

std::string NetworkSpec::id() const { return to_string(family) + "_" + variant; }

namespace {

std::size_t scaled(std::size_t width, double scale) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(width) * scale)));
}

// Appends layers while tracking channel counts.
class SpecBuilder {
 public:
  explicit SpecBuilder(NetworkSpec& spec) : spec_(spec) {}

  std::size_t input(std::size_t pathway) {
    LayerSpec l;
    l.kind = LayerKind::input;
    l.pathway = pathway;
    l.channels = spec_.in_channels;
    return push(std::move(l));
  }

  std::size_t conv(std::size_t x, const std::string& name, std::size_t out, std::size_t k, Padding pad,
                   std::size_t stride = 1) {
    LayerSpec l;
    l.kind = LayerKind::conv;
    l.name = name;
    l.inputs = {x};
    l.channels = out;
    l.kernel = Extents3::cube(k);
    l.stride = Extents3::cube(stride);
    l.padding = pad;
    return push(std::move(l));
  }

  std::size_t norm(std::size_t x, const std::string& name) {
    LayerSpec l;
    l.kind = LayerKind::batch_norm;
    l.name = name;
    l.inputs = {x};
    l.channels = channels(x);
    return push(std::move(l));
  }

  std::size_t unary(LayerKind kind, std::size_t x) {
    LayerSpec l;
    l.kind = kind;
    l.inputs = {x};
    l.channels = channels(x);
    return push(std::move(l));
  }

  std::size_t relu(std::size_t x) { return unary(LayerKind::relu, x); }
  std::size_t softmax(std::size_t x) { return unary(LayerKind::softmax, x); }
  // Centre crop of x to the extents of `reference`.
  std::size_t crop(std::size_t x, std::size_t reference) {
    const std::size_t i = unary(LayerKind::crop, x);
    spec_.layers[i].inputs.push_back(reference);
    return i;
  }

  std::size_t dropout(std::size_t x, double rate) {
    const std::size_t i = unary(LayerKind::dropout, x);
    spec_.layers[i].rate = rate;
    return i;
  }

  std::size_t max_pool(std::size_t x, std::size_t window, std::size_t stride) {
    const std::size_t i = unary(LayerKind::max_pool, x);
    spec_.layers[i].kernel = Extents3::cube(window);
    spec_.layers[i].stride = Extents3::cube(stride);
    return i;
  }

  std::size_t upsample(std::size_t x, std::size_t factor) {
    if (factor == 1) return x;
    const std::size_t i = unary(LayerKind::upsample, x);
    spec_.layers[i].factor = factor;
    spec_.layers[i].upsample_mode = UpsampleMode::repeat;
    return i;
  }

  std::size_t concat(std::size_t a, std::size_t b) {
    LayerSpec l;
    l.kind = LayerKind::concat;
    l.inputs = {a, b};
    l.channels = channels(a) + channels(b);
    return push(std::move(l));
  }

  std::size_t add(std::size_t a, std::size_t b) {
    LayerSpec l;
    l.kind = LayerKind::add;
    l.inputs = {a, b};
    l.channels = channels(a);
    return push(std::move(l));
  }

  // conv -> batch norm -> relu
  std::size_t cbr(std::size_t x, const std::string& name, std::size_t out, std::size_t k, Padding pad,
                  std::size_t stride = 1) {
    return relu(norm(conv(x, name, out, k, pad, stride), name + ".bn"));
  }

  // Shortcut for a residual add onto `target`: crop to the target's extents
  // when valid convs shrank the branch, then a 1^3 projection when widths differ.
  std::size_t shortcut(std::size_t from, std::size_t target, const std::string& name, bool crop_needed) {
    std::size_t s = crop_needed ? crop(from, target) : from;
    if (channels(s) != channels(target)) s = conv(s, name + ".proj", channels(target), 1, Padding::valid);
    return s;
  }

  std::size_t channels(std::size_t i) const { return spec_.layers.at(i).channels; }

 private:
  std::size_t push(LayerSpec l) {
    spec_.layers.push_back(std::move(l));
    return spec_.layers.size() - 1;
  }
  NetworkSpec& spec_;
};

void require_classes(std::size_t k) {
  if (k < 2) throw UsageError("network class count must be >= 2, got " + std::to_string(k));
}

}  // namespace

NetworkSpec build_deepmedic(std::string_view variant, std::size_t num_classes, double width_scale) {
  require_classes(num_classes);
  const bool wide = variant == "wide";
  if (!wide && variant != "base") throw UsageError("unknown deepmedic variant '" + std::string(variant) + "'");
  NetworkSpec spec;
  spec.family = Family::deepmedic;
  spec.variant = std::string(variant);
  spec.num_classes = num_classes;
  spec.width_scale = width_scale;
  const std::size_t mult = wide ? 2 : 1;
  spec.pathways = {{"normal", 1, Extents3::cube(wide ? 34 : 25)}, {"context", 3, Extents3::cube(wide ? 22 : 19)}};
  spec.train_output_extents = Extents3::cube(wide ? 18 : 9);

  const std::size_t base_widths[8] = {30, 30, 40, 40, 40, 40, 50, 50};
  SpecBuilder b(spec);
  std::size_t pathway_out[2] = {0, 0};
  for (std::size_t p = 0; p < 2; ++p) {
    const std::string prefix = spec.pathways[p].name;
    std::size_t x = b.input(p);
    std::vector<std::size_t> outs;
    for (std::size_t l = 0; l < 8; ++l) {
      const std::string name = prefix + ".conv" + std::to_string(l + 1);
      const std::size_t w = scaled(base_widths[l] * mult, width_scale);
      std::size_t y = b.norm(b.conv(x, name, w, 3, Padding::valid), name + ".bn");
      // Residual connections land after layers 4, 6 and 8, bridging two layers.
      if (l == 3 || l == 5 || l == 7) {
        const std::size_t s = b.shortcut(outs[l - 2], y, name + ".res", true);
        y = b.add(y, s);
      }
      x = b.relu(y);
      outs.push_back(x);
    }
    pathway_out[p] = x;
  }
  const std::size_t up = b.upsample(pathway_out[1], 3);
  std::size_t x = b.concat(pathway_out[0], up);
  const std::size_t head = scaled(150 * mult, width_scale);
  x = b.cbr(x, "head.fc1", head, 1, Padding::valid);
  x = b.cbr(x, "head.fc2", head, 1, Padding::valid);
  x = b.conv(x, "head.classifier", num_classes, 1, Padding::valid);
  spec.output = b.softmax(x);
  validate(spec);
  return spec;
}

NetworkSpec build_fcn(std::string_view variant, std::size_t num_classes, double width_scale) {
  require_classes(num_classes);
  const bool vgg = variant == "vgg";
  const bool residual = variant == "residual";
  const bool shallow = variant == "residual_shallow";
  if (!vgg && !residual && !shallow) throw UsageError("unknown fcn variant '" + std::string(variant) + "'");
  NetworkSpec spec;
  spec.family = Family::fcn;
  spec.variant = std::string(variant);
  spec.num_classes = num_classes;
  spec.width_scale = width_scale;
  const std::size_t patch = vgg ? 64 : 80;
  spec.pathways = {{"input", 1, Extents3::cube(patch)}};
  spec.train_output_extents = Extents3::cube(patch);

  SpecBuilder b(spec);
  auto w = [&](std::size_t n) { return scaled(n, width_scale); };
  const std::size_t scales = shallow ? 4 : 5;
  std::size_t x = b.input(0);
  std::vector<std::size_t> scale_outputs;
  for (std::size_t s = 1; s <= scales; ++s) {
    const std::string prefix = "scale" + std::to_string(s);
    if (s > 1) x = b.max_pool(x, 2, 2);
    const bool res_block = !vgg && s == 3;
    const bool bottleneck = !vgg && s == 4;
    if (res_block) {
      for (std::size_t k = 1; k <= 4; ++k) {
        const std::string name = prefix + ".block" + std::to_string(k);
        const std::size_t in = x;
        std::size_t y = b.cbr(in, name + ".conv1", w(64), 3, Padding::zero_same);
        y = b.norm(b.conv(y, name + ".conv2", w(64), 3, Padding::zero_same), name + ".conv2.bn");
        x = b.relu(b.add(y, b.shortcut(in, y, name, false)));
      }
    } else if (bottleneck) {
      for (std::size_t k = 1; k <= 4; ++k) {
        const std::string name = prefix + ".block" + std::to_string(k);
        const std::size_t in = x;
        std::size_t y = b.cbr(in, name + ".conv1", w(128), 1, Padding::zero_same);
        y = b.cbr(y, name + ".conv2", w(128), 3, Padding::zero_same);
        y = b.norm(b.conv(y, name + ".conv3", w(512), 1, Padding::zero_same), name + ".conv3.bn");
        x = b.relu(b.add(y, b.shortcut(in, y, name, false)));
      }
    } else {
      static const std::size_t widths[5] = {16, 32, 64, 128, 256};
      const std::size_t convs = s <= 2 ? 2 : 3;
      for (std::size_t k = 1; k <= convs; ++k) {
        x = b.cbr(x, prefix + ".conv" + std::to_string(k), w(widths[s - 1]), 3, Padding::zero_same);
      }
    }
    scale_outputs.push_back(x);
  }
  std::size_t merged = scale_outputs[0];
  for (std::size_t s = 1; s < scale_outputs.size(); ++s) {
    merged = b.concat(merged, b.upsample(scale_outputs[s], std::size_t{1} << s));
  }
  x = b.cbr(merged, "head.fc1", w(64), 1, Padding::zero_same);
  x = b.cbr(x, "head.fc2", w(64), 1, Padding::zero_same);
  x = b.conv(x, "head.classifier", num_classes, 1, Padding::zero_same);
  spec.output = b.softmax(x);
  validate(spec);
  return spec;
}

NetworkSpec build_unet(std::string_view variant, std::size_t num_classes, double width_scale) {
  require_classes(num_classes);
  const bool sum_skip = variant == "sum_skip";
  if (!sum_skip && variant != "concat_skip") throw UsageError("unknown unet variant '" + std::string(variant) + "'");
  NetworkSpec spec;
  spec.family = Family::unet;
  spec.variant = std::string(variant);
  spec.num_classes = num_classes;
  spec.width_scale = width_scale;
  spec.pathways = {{"input", 1, Extents3::cube(64)}};
  spec.train_output_extents = Extents3::cube(64);

  SpecBuilder b(spec);
  auto w = [&](std::size_t n) { return scaled(n, width_scale); };
  const std::size_t enc_widths[3] = {16, 32, 64};
  std::size_t x = b.input(0);
  std::vector<std::size_t> skips;
  for (std::size_t lvl = 0; lvl < 3; ++lvl) {
    const std::string prefix = "enc" + std::to_string(lvl + 1);
    x = b.cbr(x, prefix + ".conv1", w(enc_widths[lvl]), 3, Padding::zero_same);
    x = b.cbr(x, prefix + ".conv2", w(enc_widths[lvl]), 3, Padding::zero_same);
    skips.push_back(x);
    const std::size_t next = lvl < 2 ? enc_widths[lvl + 1] : 128;
    x = sum_skip ? b.max_pool(x, 2, 2) : b.cbr(x, prefix + ".down", w(next), 3, Padding::zero_same, 2);
  }
  x = b.cbr(x, "bottom.conv1", w(128), 3, Padding::zero_same);
  x = b.cbr(x, "bottom.conv2", w(128), 3, Padding::zero_same);
  x = b.dropout(x, 0.5);
  for (std::size_t i = 0; i < 3; ++i) {
    const std::size_t lvl = 2 - i;
    const std::string prefix = "dec" + std::to_string(lvl + 1);
    const std::size_t width = w(enc_widths[lvl]);
    x = b.upsample(x, 2);
    if (sum_skip) {
      x = b.cbr(x, prefix + ".conv1", width, 3, Padding::zero_same);
      x = b.add(x, skips[lvl]);
    } else {
      x = b.concat(x, skips[lvl]);
      x = b.cbr(x, prefix + ".conv1", width, 3, Padding::zero_same);
    }
    x = b.cbr(x, prefix + ".conv2", width, 3, Padding::zero_same);
    if (lvl > 0) x = b.dropout(x, 0.5);
  }
  x = b.conv(x, "head.classifier", num_classes, 3, Padding::zero_same);
  spec.output = b.softmax(x);
  validate(spec);
  return spec;
}

std::vector<std::string> network_ids() {
  return {"deepmedic_base", "deepmedic_wide",  "fcn_vgg", "fcn_residual", "fcn_residual_shallow",
          "unet_sum_skip",  "unet_concat_skip"};
}

NetworkSpec build_network(std::string_view spec_id, std::size_t num_classes, double width_scale) {
  const auto split = spec_id.find('_');
  if (split == std::string_view::npos) throw UsageError("malformed network id '" + std::string(spec_id) + "'");
  const auto family = spec_id.substr(0, split);
  const auto variant = spec_id.substr(split + 1);
  if (family == "deepmedic") return build_deepmedic(variant, num_classes, width_scale);
  if (family == "fcn") return build_fcn(variant, num_classes, width_scale);
  if (family == "unet") return build_unet(variant, num_classes, width_scale);
  throw UsageError("unknown network family in id '" + std::string(spec_id) + "'");
}

std::vector<Shape> infer_shapes(const NetworkSpec& spec, const std::vector<Extents3>& pathway_extents) {
  if (pathway_extents.size() != spec.pathways.size()) {
    throw DimensionError(spec.id() + ": expected " + std::to_string(spec.pathways.size()) + " pathway inputs, got " +
                         std::to_string(pathway_extents.size()));
  }
  std::vector<Shape> shapes(spec.layers.size());
  auto spatial = [](const Shape& s) { return Extents3{s[1], s[2], s[3]}; };
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    const std::string where = spec.id() + " layer " + std::to_string(i) + (l.name.empty() ? "" : " (" + l.name + ")");
    auto in = [&](std::size_t k) -> const Shape& { return shapes.at(l.inputs.at(k)); };
    switch (l.kind) {
      case LayerKind::input:
        shapes[i] = volume_shape(spec.in_channels, pathway_extents.at(l.pathway));
        break;
      case LayerKind::conv: {
        Shape s = in(0);
        for (std::size_t a = 0; a < 3; ++a) {
          if (l.padding == Padding::valid && l.kernel[a] > s[a + 1]) {
            throw DimensionError(where + ": kernel " + extents_str(l.kernel) + " larger than input " +
                                 extents_str(spatial(s)));
          }
          s[a + 1] = conv_output_extent(s[a + 1], l.kernel[a], l.stride[a], l.padding);
        }
        s[0] = l.channels;
        shapes[i] = s;
        break;
      }
      case LayerKind::max_pool: {
        Shape s = in(0);
        for (std::size_t a = 0; a < 3; ++a) {
          if (l.kernel[a] > s[a + 1] || s[a + 1] % l.stride[a] != 0) {
            throw DimensionError(where + ": pooling needs extents divisible by " + std::to_string(l.stride[a]) +
                                 ", got " + extents_str(spatial(s)));
          }
          s[a + 1] = conv_output_extent(s[a + 1], l.kernel[a], l.stride[a], Padding::valid);
        }
        shapes[i] = s;
        break;
      }
      case LayerKind::downsample: {
        Shape s = in(0);
        for (std::size_t a = 1; a < 4; ++a) {
          if (s[a] % l.factor) throw DimensionError(where + ": extents not divisible by " + std::to_string(l.factor));
          s[a] /= l.factor;
        }
        shapes[i] = s;
        break;
      }
      case LayerKind::upsample: {
        Shape s = in(0);
        for (std::size_t a = 1; a < 4; ++a) s[a] *= l.factor;
        shapes[i] = s;
        break;
      }
      case LayerKind::concat:
      case LayerKind::add: {
        const Shape& a = in(0);
        const Shape& c = in(1);
        if (spatial(a) != spatial(c)) {
          throw DimensionError(where + ": merged branches have extents " + extents_str(spatial(a)) + " and " +
                               extents_str(spatial(c)));
        }
        if (l.kind == LayerKind::add && a[0] != c[0]) {
          throw DimensionError(where + ": summed branches have " + std::to_string(a[0]) + " and " +
                               std::to_string(c[0]) + " channels");
        }
        Shape s = a;
        if (l.kind == LayerKind::concat) s[0] = a[0] + c[0];
        shapes[i] = s;
        break;
      }
      case LayerKind::crop: {
        Shape s = in(0);
        const Shape& ref = in(1);
        for (std::size_t a = 1; a < 4; ++a) {
          if (ref[a] > s[a]) {
            throw DimensionError(where + ": cannot crop " + extents_str(spatial(s)) + " to " +
                                 extents_str(spatial(ref)));
          }
          s[a] = ref[a];
        }
        shapes[i] = s;
        break;
      }
      case LayerKind::batch_norm:
      case LayerKind::relu:
      case LayerKind::dropout:
      case LayerKind::softmax:
        shapes[i] = in(0);
        break;
    }
    if (shapes[i][0] != l.channels && l.kind != LayerKind::input) {
      throw DimensionError(where + ": channel bookkeeping mismatch");
    }
  }
  return shapes;
}


Extents3 output_extents(const NetworkSpec& spec, const std::vector<Extents3>& pathway_extents) {
  const auto shapes = infer_shapes(spec, pathway_extents);
  const Shape& s = shapes.at(spec.output);
  return {s[1], s[2], s[3]};
}

void validate(const NetworkSpec& spec) {
  if (spec.num_classes < 2) throw DimensionError(spec.id() + ": class count must be >= 2");
  if (spec.layers.empty() || spec.layers.at(spec.output).kind != LayerKind::softmax) {
    throw DimensionError(spec.id() + ": output layer must be a softmax");
  }
  std::vector<Extents3> ext;
  for (const auto& p : spec.pathways) ext.push_back(p.train_extents);
  const auto shapes = infer_shapes(spec, ext);
  const Shape& out = shapes.at(spec.output);
  if (out[0] != spec.num_classes) throw DimensionError(spec.id() + ": output has wrong class count");
  if (Extents3{out[1], out[2], out[3]} != spec.train_output_extents) {
    throw DimensionError(spec.id() + ": training output grid " + extents_str({out[1], out[2], out[3]}) +
                         " differs from declared " + extents_str(spec.train_output_extents));
  }
}

std::vector<ParameterShape> parameter_shapes(const NetworkSpec& spec) {
  std::vector<ParameterShape> out;
  for (const auto& l : spec.layers) {
    if (l.kind == LayerKind::conv) {
      const std::size_t cin = spec.layers.at(l.inputs.at(0)).channels;
      out.push_back({l.name + ".weight", {l.channels, cin, l.kernel.d, l.kernel.h, l.kernel.w}});
      out.push_back({l.name + ".bias", {l.channels}});
    } else if (l.kind == LayerKind::batch_norm) {
      out.push_back({l.name + ".gamma", {l.channels}});
      out.push_back({l.name + ".beta", {l.channels}});
    }
  }
  return out;
}

std::size_t parameter_count(const NetworkSpec& spec) {
  std::size_t n = 0;
  for (const auto& p : parameter_shapes(spec)) n += shape_numel(p.shape);
  return n;
}

namespace {

struct FieldTrace {
  bool reached = false;
  double extent = 1.0;
  double jump = 1.0;
};

// Receptive-field bookkeeping per layer and pathway, in pathway-input voxels.
std::vector<std::vector<FieldTrace>> trace_fields(const NetworkSpec& spec) {
  const std::size_t np = spec.pathways.size();
  std::vector<std::vector<FieldTrace>> tr(spec.layers.size(), std::vector<FieldTrace>(np));
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    if (l.kind == LayerKind::input) {
      tr[i][l.pathway].reached = true;
      continue;
    }
    if (l.kind == LayerKind::concat || l.kind == LayerKind::add) {
      for (std::size_t p = 0; p < np; ++p) {
        for (std::size_t in : l.inputs) {
          const FieldTrace& f = tr[in][p];
          if (!f.reached) continue;
          auto& o = tr[i][p];
          if (!o.reached) {
            o = f;
          } else {
            o.extent = std::max(o.extent, f.extent);
            o.jump = std::max(o.jump, f.jump);
          }
        }
      }
      continue;
    }
    tr[i] = tr[l.inputs.at(0)];
    for (auto& f : tr[i]) {
      if (!f.reached) continue;
      switch (l.kind) {
        case LayerKind::conv:
        case LayerKind::max_pool:
          f.extent += static_cast<double>(l.kernel.d - 1) * f.jump;
          f.jump *= static_cast<double>(l.stride.d);
          break;
        case LayerKind::downsample:
          f.extent += static_cast<double>(l.factor - 1) * f.jump;
          f.jump *= static_cast<double>(l.factor);
          break;
        case LayerKind::upsample:
          if (l.upsample_mode == UpsampleMode::trilinear) f.extent += f.jump;
          f.jump /= static_cast<double>(l.factor);
          break;
        default:
          break;
      }
    }
  }
  return tr;
}

}  // namespace

ReceptiveField receptive_field(const NetworkSpec& spec) {
  const auto tr = trace_fields(spec);
  ReceptiveField rf;
  const auto& out = tr.at(spec.output);
  for (std::size_t p = 0; p < spec.pathways.size(); ++p) {
    const double f = static_cast<double>(spec.pathways[p].factor);
    rf.extent.push_back(out[p].reached ? static_cast<std::size_t>(std::lround(out[p].extent * f)) : 0);
  }
  rf.output_stride = out[0].jump * static_cast<double>(spec.pathways[0].factor);
  return rf;
}

std::size_t extent_multiple(const NetworkSpec& spec) {
  std::size_t m = 1;
  for (const auto& p : spec.pathways) m = std::max(m, p.factor);
  if (m > 1) return m;
  double deepest = 1.0;
  for (const auto& layer : trace_fields(spec))
    for (const auto& f : layer)
      if (f.reached) deepest = std::max(deepest, f.jump);
  return static_cast<std::size_t>(std::lround(deepest));
}

std::vector<PathwayWindow> input_windows(const NetworkSpec& spec, const Extents3& out) {
  std::vector<PathwayWindow> windows;
  for (const auto& p : spec.pathways) {
    // Valid convolutions shrink each pathway by a fixed margin, read off the
    // training geometry.
    const std::size_t shrink = p.train_extents.d - spec.train_output_extents.d / p.factor;
    PathwayWindow w;
    for (std::size_t a = 0; a < 3; ++a) {
      if (out[a] % p.factor) {
        throw DimensionError(spec.id() + ": output extent " + std::to_string(out[a]) + " not divisible by pathway factor " +
                             std::to_string(p.factor));
      }
      w.extents[a] = out[a] / p.factor + shrink;
    }
    w.offset = -static_cast<std::ptrdiff_t>(shrink / 2 * p.factor);
    windows.push_back(w);
  }
  return windows;
}

NetworkSpec with_training_output(const NetworkSpec& spec, const Extents3& out) {
  NetworkSpec s = spec;
  const auto windows = input_windows(spec, out);
  for (std::size_t p = 0; p < s.pathways.size(); ++p) s.pathways[p].train_extents = windows[p].extents;
  s.train_output_extents = out;
  validate(s);
  return s;
}

}  // namespace emma
