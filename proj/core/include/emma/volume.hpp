#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <variant>
#include <vector>

#include "emma/losses.hpp"
#include "emma/tensor.hpp"

namespace emma {

inline constexpr std::size_t kNumModalities = 4;
inline const std::array<std::string, kNumModalities> kModalityNames = {"flair", "t1", "t1ce", "t2"};
// Label values present in annotations; index = class id.
inline constexpr std::array<std::uint8_t, 4> kLabelValues = {0, 1, 2, 4};

using Spacing = std::array<double, 3>;

// Registered multi-modal case: images [4,D,H,W] in the order of
// kModalityNames, optional label values {0,1,2,4} [D,H,W].
struct VolumeCase {
  std::string id;
  Tensor<float> images;
  LabelTensor labels;  // empty when unlabelled
  Spacing spacing{1.0, 1.0, 1.0};

  bool has_labels() const { return !labels.empty(); }
  Extents3 extents() const { return images.spatial(); }
  // Checks modality count, label extents and label values.
  void validate() const;
};

// Maps label values {0,1,2,4} to class ids {0,1,2,3}; anything else is a DataError.
LabelTensor labels_to_classes(const LabelTensor& labels);
LabelTensor classes_to_labels(const LabelTensor& classes);

// ---- volume container ----
//
// Byte layout (little-endian):
//   "EMMAVOL1" | u32 version | u32 channels | u64 D | u64 H | u64 W |
//   f64 spacing[3] | u8 dtype (0 f32, 1 f64, 2 u8) |
//   channels x (u32 length, UTF-8 name) | channel-major data |
//   u32 CRC32 of every preceding byte.
inline constexpr std::uint32_t kVolumeVersion = 1;

enum class VolumeDType : std::uint8_t { f32 = 0, f64 = 1, u8 = 2 };

struct VolumeFile {
  std::vector<std::string> channel_names;
  Spacing spacing{1.0, 1.0, 1.0};
  std::variant<Tensor<float>, Tensor<double>, Tensor<std::uint8_t>> data;  // [C,D,H,W]

  VolumeDType dtype() const { return static_cast<VolumeDType>(data.index()); }
  Shape shape() const;
};

void write_volume(const std::filesystem::path& path, const VolumeFile& volume);
// Throws FormatError (bad magic / header), CrcError or TruncationError.
VolumeFile read_volume(const std::filesystem::path& path);

// A case on disk is "<stem>.vol" (four f32 modalities) plus "<stem>_seg.vol"
// (one u8 channel) when labelled.
std::filesystem::path label_path_for(const std::filesystem::path& image_path);
void write_case(const std::filesystem::path& image_path, const VolumeCase& c);
VolumeCase read_case(const std::filesystem::path& image_path, bool require_labels = false);

// Confidence maps are stored as f64 volumes with channels "p0".."pK-1".
void write_confidence(const std::filesystem::path& path, const Tensor<double>& map, const Spacing& spacing);
Tensor<double> read_confidence(const std::filesystem::path& path);
void write_labels(const std::filesystem::path& path, const LabelTensor& labels, const Spacing& spacing);
LabelTensor read_labels(const std::filesystem::path& path);

}  // namespace emma
