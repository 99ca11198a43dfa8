#include "emma/volume.hpp"

#include <cstring>

#include "binary_io.hpp"

namespace emma {

void VolumeCase::validate() const {
  if (images.rank() != 4 || images.dim(0) != kNumModalities) {
    throw DataError("case '" + id + "': expected [4,D,H,W] images, got " + shape_str(images.shape()));
  }
  if (!has_labels()) return;
  const Extents3 e = extents();
  if (labels.shape() != Shape{e.d, e.h, e.w}) {
    throw DataError("case '" + id + "': label extents " + shape_str(labels.shape()) + " differ from image extents " +
                    extents_str(e));
  }
  labels_to_classes(labels);
}

LabelTensor labels_to_classes(const LabelTensor& labels) {
  LabelTensor out(labels.shape());
  for (std::size_t i = 0; i < labels.numel(); ++i) {
    switch (labels[i]) {
      case 0: out[i] = 0; break;
      case 1: out[i] = 1; break;
      case 2: out[i] = 2; break;
      case 4: out[i] = 3; break;
      default: throw DataError("unexpected label value " + std::to_string(labels[i]) + " (allowed: 0, 1, 2, 4)");
    }
  }
  return out;
}

LabelTensor classes_to_labels(const LabelTensor& classes) {
  LabelTensor out(classes.shape());
  for (std::size_t i = 0; i < classes.numel(); ++i) {
    if (classes[i] >= kLabelValues.size()) throw DataError("class id " + std::to_string(classes[i]) + " out of range");
    out[i] = kLabelValues[classes[i]];
  }
  return out;
}

Shape VolumeFile::shape() const {
  return std::visit([](const auto& t) { return t.shape(); }, data);
}

namespace {

constexpr char kMagic[8] = {'E', 'M', 'M', 'A', 'V', 'O', 'L', '1'};

template <typename T>
Tensor<T> read_payload(detail::ByteReader& r, const Shape& shape) {
  Tensor<T> t(shape);
  r.get_array(t.data(), t.numel());
  return t;
}

}  // namespace

void write_volume(const std::filesystem::path& path, const VolumeFile& volume) {
  const Shape shape = volume.shape();
  if (shape.size() != 4) throw DimensionError("write_volume: expected [C,D,H,W], got " + shape_str(shape));
  if (volume.channel_names.size() != shape[0]) {
    throw UsageError("write_volume: " + std::to_string(volume.channel_names.size()) + " channel names for " +
                     std::to_string(shape[0]) + " channels");
  }
  detail::ByteWriter w;
  w.put_bytes(kMagic, sizeof(kMagic));
  w.put<std::uint32_t>(kVolumeVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(shape[0]));
  for (int a = 1; a < 4; ++a) w.put<std::uint64_t>(shape[a]);
  for (double s : volume.spacing) w.put<double>(s);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(volume.dtype()));
  for (const auto& name : volume.channel_names) w.put_string(name);
  std::visit([&](const auto& t) { w.put_array(t.data(), t.numel()); }, volume.data);
  w.put<std::uint32_t>(detail::crc32_of(w.bytes().data(), w.bytes().size()));
  detail::write_file_atomic(path, w.bytes());
}

VolumeFile read_volume(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  const std::string what = "volume '" + path.string() + "'";
  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw FormatError(what + ": bad magic, not an EMMAVOL1 file");
  }
  if (bytes.size() < sizeof(kMagic) + 4) throw TruncationError(what + ": header cut short");
  // Everything but the trailing CRC is parsed; a short file runs out here.
  detail::ByteReader r(bytes.data(), bytes.size() - 4, what);
  for (std::size_t i = 0; i < sizeof(kMagic); ++i) r.get<std::uint8_t>();
  const auto version = r.get<std::uint32_t>();
  if (version != kVolumeVersion) throw FormatError(what + ": unsupported version " + std::to_string(version));
  const auto channels = r.get<std::uint32_t>();
  Shape shape{channels};
  for (int a = 0; a < 3; ++a) shape.push_back(r.get<std::uint64_t>());
  for (auto e : shape) {
    if (e == 0) throw FormatError(what + ": zero extent in header " + shape_str(shape));
  }
  VolumeFile v;
  for (auto& s : v.spacing) s = r.get<double>();
  const auto tag = r.get<std::uint8_t>();
  for (std::uint32_t c = 0; c < channels; ++c) v.channel_names.push_back(r.get_string(4096));

  const std::size_t elem = tag == 0 ? 4 : tag == 1 ? 8 : tag == 2 ? 1 : 0;
  if (elem == 0) throw FormatError(what + ": unknown dtype tag " + std::to_string(tag));
  const std::size_t n = shape_numel(shape);
  if (n > r.remaining() / elem) {
    throw TruncationError(what + ": header declares " + shape_str(shape) + " but only " +
                          std::to_string(r.remaining()) + " payload bytes remain");
  }
  if (r.remaining() != n * elem) {
    throw FormatError(what + ": " + std::to_string(r.remaining() - n * elem) + " unexpected trailing bytes");
  }
  detail::ByteReader tail(bytes.data() + bytes.size() - 4, 4, what);
  if (detail::crc32_of(bytes.data(), bytes.size() - 4) != tail.get<std::uint32_t>()) {
    throw CrcError(what + ": CRC32 mismatch");
  }
  switch (tag) {
    case 0: v.data = read_payload<float>(r, shape); break;
    case 1: v.data = read_payload<double>(r, shape); break;
    default: v.data = read_payload<std::uint8_t>(r, shape); break;
  }
  return v;
}

std::filesystem::path label_path_for(const std::filesystem::path& image_path) {
  auto p = image_path;
  p.replace_filename(image_path.stem().string() + "_seg" + image_path.extension().string());
  return p;
}

void write_case(const std::filesystem::path& image_path, const VolumeCase& c) {
  c.validate();
  write_volume(image_path, {{kModalityNames.begin(), kModalityNames.end()}, c.spacing, c.images});
  if (c.has_labels()) write_labels(label_path_for(image_path), c.labels, c.spacing);
}

VolumeCase read_case(const std::filesystem::path& image_path, bool require_labels) {
  VolumeFile v = read_volume(image_path);
  VolumeCase c;
  c.id = image_path.stem().string();
  c.spacing = v.spacing;
  if (auto* f = std::get_if<Tensor<float>>(&v.data)) {
    c.images = std::move(*f);
  } else if (auto* d = std::get_if<Tensor<double>>(&v.data)) {
    c.images = d->cast<float>();
  } else {
    c.images = std::get<Tensor<std::uint8_t>>(v.data).cast<float>();
  }
  const auto seg = label_path_for(image_path);
  if (std::filesystem::exists(seg)) {
    c.labels = read_labels(seg);
  } else if (require_labels) {
    throw IoError("case '" + c.id + "' has no label file '" + seg.string() + "'");
  }
  c.validate();
  return c;
}

void write_confidence(const std::filesystem::path& path, const Tensor<double>& map, const Spacing& spacing) {
  std::vector<std::string> names;
  for (std::size_t k = 0; k < map.dim(0); ++k) names.push_back("p" + std::to_string(k));
  write_volume(path, {names, spacing, map});
}

Tensor<double> read_confidence(const std::filesystem::path& path) {
  VolumeFile v = read_volume(path);
  if (auto* d = std::get_if<Tensor<double>>(&v.data)) return std::move(*d);
  if (auto* f = std::get_if<Tensor<float>>(&v.data)) return f->cast<double>();
  throw FormatError("volume '" + path.string() + "' holds integer data, not a confidence map");
}

void write_labels(const std::filesystem::path& path, const LabelTensor& labels, const Spacing& spacing) {
  if (labels.rank() != 3) throw DimensionError("write_labels: expected [D,H,W], got " + shape_str(labels.shape()));
  write_volume(path, {{"label"}, spacing, labels.reshaped({1, labels.dim(0), labels.dim(1), labels.dim(2)})});
}

LabelTensor read_labels(const std::filesystem::path& path) {
  VolumeFile v = read_volume(path);
  auto* t = std::get_if<Tensor<std::uint8_t>>(&v.data);
  if (!t || t->dim(0) != 1) throw FormatError("volume '" + path.string() + "' is not a single-channel u8 label map");
  return t->reshaped({t->dim(1), t->dim(2), t->dim(3)});
}

}  // namespace emma
