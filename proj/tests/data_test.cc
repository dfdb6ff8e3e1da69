#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "fedvirt/container.h"
#include "fedvirt/data.h"
#include "fedvirt/errors.h"

namespace fedvirt {
namespace {

struct Idx {
  std::string images;
  std::string labels;
};

// Three 2x2 images with labels 0, 1, 2.
Idx fixture() {
  const std::uint8_t px[] = {0, 255, 128, 64, 1, 2, 3, 4, 255, 255, 0, 0};
  const std::uint8_t lb[] = {0, 1, 2};
  return {encode_idx_images(3, 2, 2, px), encode_idx_labels(lb)};
}

std::uint64_t offset_of(const Idx& f, std::int64_t classes = 10) {
  try {
    parse_idx(f.images, f.labels, true, classes);
  } catch (const ParseError& e) {
    return e.offset();
  }
  ADD_FAILURE() << "parse succeeded";
  return 0;
}

std::string message_of(const Idx& f) {
  try {
    parse_idx(f.images, f.labels, true);
  } catch (const ParseError& e) {
    return e.what();
  }
  return {};
}

void set_be32(std::string& s, std::size_t at, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s[at + static_cast<std::size_t>(i)] = static_cast<char>((v >> (24 - 8 * i)) & 0xff);
}

TEST(Idx, ParsesFixture) {
  const Idx f = fixture();
  LabeledDataset d = parse_idx(f.images, f.labels, true);
  EXPECT_EQ(d.images.shape(), Shape({3, 1, 2, 2}));
  EXPECT_EQ(d.labels, Labels({0, 1, 2}));
  EXPECT_EQ(d.images.at(1), 1.0);
  EXPECT_EQ(d.images.at(0), 0.0);
  EXPECT_DOUBLE_EQ(d.images.at(2), 128.0 / 255.0);
  EXPECT_EQ(d.range.hi, 1.0);
  LabeledDataset raw = parse_idx(f.images, f.labels, false);
  EXPECT_EQ(raw.images.at(1), 255.0);
  EXPECT_EQ(raw.range.hi, 255.0);
}

TEST(Idx, CorruptHeaders) {
  Idx f = fixture();
  Idx short_header = f;
  short_header.images.resize(2);
  EXPECT_EQ(offset_of(short_header), 2u);

  Idx bad_magic = f;
  bad_magic.images[2] = 0x0d;
  EXPECT_EQ(offset_of(bad_magic), 0u);

  Idx wrong_dims = f;
  wrong_dims.images[3] = 2;
  EXPECT_EQ(offset_of(wrong_dims), 3u);

  Idx zero = f;
  set_be32(zero.images, 4, 0);
  EXPECT_EQ(offset_of(zero), 4u);

  Idx oversize = f;
  set_be32(oversize.images, 8, 100000);
  EXPECT_EQ(offset_of(oversize), 8u);
}

TEST(Idx, CorruptPayloads) {
  Idx f = fixture();
  Idx truncated = f;
  truncated.images.pop_back();
  EXPECT_EQ(offset_of(truncated), truncated.images.size());

  Idx trailing = f;
  trailing.labels.push_back('\0');
  EXPECT_EQ(offset_of(trailing), 11u);

  Idx mismatch = f;
  const std::uint8_t two[] = {0, 1};
  mismatch.labels = encode_idx_labels(two);
  EXPECT_NE(message_of(mismatch).find("2"), std::string::npos);
  EXPECT_NE(message_of(mismatch).find("3"), std::string::npos);

  EXPECT_EQ(offset_of(f, 2), 10u);  // third label (2) is not below 2 classes

  const std::uint8_t px[6] = {};
  Idx nonsquare{encode_idx_images(1, 2, 3, px), encode_idx_labels(std::span<const std::uint8_t>(px, 1))};
  EXPECT_EQ(offset_of(nonsquare), 8u);
}

TEST(Idx, LiftToRgb) {
  const Idx f = fixture();
  LabeledDataset d = lift_to_rgb(parse_idx(f.images, f.labels, true));
  EXPECT_EQ(d.images.shape(), Shape({3, 3, 2, 2}));
  EXPECT_EQ(d.images.at(4 + 1), d.images.at(1));
}

TEST(BlobDigits, BalancedAndInRange) {
  LabeledDataset d = blob_digits(40, 3);
  validate_dataset(d);
  EXPECT_EQ(d.images.shape(), Shape({40, 3, 16, 16}));
  std::map<std::int64_t, int> counts;
  for (auto y : d.labels) ++counts[y];
  for (int k = 0; k < kBlobDigitClasses; ++k) EXPECT_EQ(counts[k], 10);
  LabeledDataset again = blob_digits(40, 3);
  EXPECT_EQ(again.images.at(777), d.images.at(777));
  EXPECT_NE(blob_digits(40, 4).images.at(777), d.images.at(777));
}

TEST(Shift, EmptySpecIsIdentity) {
  LabeledDataset d = blob_digits(8, 1);
  LabeledDataset s = synth_domain_shift(d, {}, 5);
  for (std::int64_t i = 0; i < d.images.numel(); ++i) ASSERT_EQ(s.images.at(i), d.images.at(i));
  EXPECT_EQ(s.labels, d.labels);
}

TEST(Shift, InvertMapsWithinRange) {
  LabeledDataset d = blob_digits(8, 1);
  ShiftSpec spec;
  spec.invert = true;
  LabeledDataset s = synth_domain_shift(d, spec, 5);
  for (std::int64_t i = 0; i < d.images.numel(); ++i) ASSERT_NEAR(s.images.at(i), 1.0 - d.images.at(i), 1e-15);
}

TEST(Shift, NoiseIsSeededAndClamped) {
  LabeledDataset d = blob_digits(8, 1);
  ShiftSpec spec;
  spec.noise_sigma = 0.5;
  spec.tint_scale = {1.5, 1.0, 0.2};
  spec.rotate_degrees = 10;
  LabeledDataset a = synth_domain_shift(d, spec, 5), b = synth_domain_shift(d, spec, 5);
  validate_dataset(a);
  EXPECT_EQ(a.images.at(100), b.images.at(100));
  EXPECT_NE(synth_domain_shift(d, spec, 6).images.at(100), a.images.at(100));
}

TEST(Shift, OutOfRangeSpecRejected) {
  LabeledDataset d = blob_digits(4, 1);
  ShiftSpec spec;
  spec.rotate_degrees = 30;
  EXPECT_THROW(synth_domain_shift(d, spec, 1), ContractError);
  spec = {};
  spec.tint_scale = {1.0};
  EXPECT_THROW(synth_domain_shift(d, spec, 1), ContractError);
}

TEST(BalancedBatches, CoversEverySampleWithEqualClassCounts) {
  Labels y;
  for (int i = 0; i < 30; ++i) y.push_back(i < 10 ? 0 : (i < 25 ? 1 : 2));
  Batches b = balanced_batches(y, 12, 9);
  std::set<std::int64_t> seen;
  for (const auto& batch : b) {
    std::map<std::int64_t, int> per;
    for (auto i : batch) {
      ++per[y[static_cast<std::size_t>(i)]];
      seen.insert(i);
    }
    EXPECT_EQ(per.size(), 3u);
    EXPECT_EQ(per[0], 4);
    EXPECT_EQ(per[1], 4);
    EXPECT_EQ(per[2], 4);
  }
  EXPECT_EQ(seen.size(), 30u);
  EXPECT_EQ(b.size(), 4u);  // ceil(15 / 4)
  EXPECT_EQ(balanced_batches(y, 12, 9), b);
  EXPECT_THROW(balanced_batches(y, 5, 9), ContractError);
}

TEST(Dataset, ContainerRoundTrip) {
  LabeledDataset d = blob_digits(12, 2);
  LabeledDataset back = dataset_from_container(decode_container(encode_container(dataset_to_container(d))));
  EXPECT_EQ(back.labels, d.labels);
  EXPECT_EQ(back.class_count, d.class_count);
  EXPECT_EQ(back.images.at(500), d.images.at(500));
}

TEST(Dataset, ValidateCatchesProblems) {
  LabeledDataset d = blob_digits(4, 2);
  d.labels[0] = 9;
  EXPECT_THROW(validate_dataset(d), ContractError);
  d = blob_digits(4, 2);
  d.images.mutable_data()[0] = 2.0;
  EXPECT_THROW(validate_dataset(d), ContractError);
}

}  // namespace
}  // namespace fedvirt
