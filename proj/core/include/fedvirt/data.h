#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fedvirt/ops.h"

namespace fedvirt {

struct Container;

struct PixelRange {
  double lo = 0.0;
  double hi = 1.0;
};

struct LabeledDataset {
  Tensor images;  // [N,C,H,W], values inside `range`
  Labels labels;
  std::int64_t class_count = 0;
  PixelRange range;
  std::string provenance;

  std::int64_t size() const { return static_cast<std::int64_t>(labels.size()); }
  std::int64_t channels() const { return images.dim(1); }
  std::int64_t side() const { return images.dim(2); }
};

// Throws ContractError unless the dataset is nonempty, square [N,C,S,S],
// labelled in [0, class_count) and inside its declared range.
void validate_dataset(const LabeledDataset& d);

LabeledDataset subset(const LabeledDataset& d, std::span<const std::int64_t> idx);

// Indices of each class 0..class_count-1, ascending.
std::vector<std::vector<std::int64_t>> class_indices(const Labels& labels,
                                                     std::int64_t class_count);

// IDX (MNIST family): big-endian magic 0x00000803 with dims N,H,W for images
// and 0x00000801 with dim N for labels, then unsigned bytes. Labels must be
// below `declared_classes` (at most 256). normalize maps bytes to [0,1];
// otherwise values stay in [0,255]. Errors are ParseError with the offset
// into the offending file.
LabeledDataset parse_idx(std::string_view image_bytes, std::string_view label_bytes,
                         bool normalize, std::int64_t declared_classes = 10);
LabeledDataset load_idx(const std::filesystem::path& images,
                        const std::filesystem::path& labels, bool normalize,
                        std::int64_t declared_classes = 10);

// Reference writers, used to author fixtures.
std::string encode_idx_images(std::int64_t n, std::int64_t rows, std::int64_t cols,
                              std::span<const std::uint8_t> pixels);
std::string encode_idx_labels(std::span<const std::uint8_t> labels);

// Replicates a single channel three times.
LabeledDataset lift_to_rgb(const LabeledDataset& d);

// Applied in this order: tint (per-channel x * scale + offset, offset in units
// of the range width), contrast about each image's mean, inversion within the
// range, rotation about the centre (bilinear, zero fill), additive Gaussian
// noise. The result is clamped to the range.
struct ShiftSpec {
  std::vector<double> tint_scale;   // empty or one per channel, each in [0, 2]
  std::vector<double> tint_offset;  // empty or one per channel, each in [-1, 1]
  double contrast = 1.0;            // (0, 4]
  bool invert = false;
  double rotate_degrees = 0.0;      // [-15, 15]
  double noise_sigma = 0.0;         // [0, 0.5] in units of the range width

  bool empty() const;
  bool operator==(const ShiftSpec&) const = default;
};

LabeledDataset synth_domain_shift(const LabeledDataset& base, const ShiftSpec& spec,
                                  std::uint64_t seed);

// Synthetic 4-class corpus of soft shapes (disc, ring, plus, hollow square)
// on colored backgrounds, with position, size and angle jitter, a distractor
// dot and pixel noise. Values in [0,1], shape [n,3,side,side].
struct BlobDigitsOptions {
  std::int64_t side = 16;
  double noise = 0.08;
  double jitter = 2.0;          // max centre offset in pixels
  double distractor_prob = 0.5;
};
inline constexpr std::int64_t kBlobDigitClasses = 4;

LabeledDataset blob_digits(std::int64_t n, std::uint64_t seed,
                           const BlobDigitsOptions& options = {});

// Index batches over one epoch. Every batch holds q samples of each present
// class, q = clamp(batch_size / classes_present, 2, largest class size); each
// class is drawn from its own shuffled order, wrapping around, until every
// sample has appeared once. Classes with one sample repeat it.
using Batches = std::vector<std::vector<std::int64_t>>;
Batches balanced_batches(const Labels& labels, std::int64_t batch_size, std::uint64_t seed);

// Container kind "dataset": tensor "images", labels and range in meta.
Container dataset_to_container(const LabeledDataset& d);
LabeledDataset dataset_from_container(const Container& c);

}  // namespace fedvirt
