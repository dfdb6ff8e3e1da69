#include <gtest/gtest.h>

#include "fedvirt/container.h"
#include "fedvirt/distillation.h"
#include "fedvirt/errors.h"
#include "fedvirt/federation.h"
#include "test_fixtures.h"

namespace fedvirt {
namespace {

bool bit_equal(const NamedTensors& a, const NamedTensors& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].value.shape() != b[i].value.shape()) return false;
    for (std::int64_t k = 0; k < a[i].value.numel(); ++k)
      if (a[i].value.at(k) != b[i].value.at(k)) return false;
  }
  return true;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  return bit_equal(NamedTensors{{"x", a}}, NamedTensors{{"x", b}});
}

struct Fixture {
  // Narrower or smaller nets leave GroupNorm blocks of a few values, and the
  // matching objective becomes too rough for a short descent to show.
  LabeledDataset real = blob_digits(40, 4, {.side = 16});
  ModelParams model = convnet_init(3, kBlobDigitClasses, 32, 16, 3);
  VirtualDataset virt = init_virtual(class_stats(real), 3, channel_bounds(real), 5);
};

TEST(Stats, AggregateOfOneIsIdentityAndMidpointOfTwo) {
  LabeledDataset d = blob_digits(8, 1, {.side = 8});
  const ClassStats s = class_stats(d);
  const ClassStats one[] = {s};
  ClassStats a = aggregate_stats(one);
  EXPECT_TRUE(bit_equal(a.classes[0].mean, s.classes[0].mean));
  LabeledDataset zeros = d, ones = d;
  zeros.images = Tensor::zeros(d.images.shape());
  ones.images = Tensor::full(d.images.shape(), 1.0);
  const ClassStats two[] = {class_stats(zeros), class_stats(ones)};
  const ClassStats two_rev[] = {two[1], two[0]};
  ClassStats m = aggregate_stats(two);
  EXPECT_EQ(m.classes[2].mean.at(7), 0.5);
  EXPECT_TRUE(bit_equal(m.classes[2].mean, aggregate_stats(two_rev).classes[2].mean));
}

TEST(Stats, ClassHeldByOneClientIsNotDiluted) {
  LabeledDataset a = blob_digits(8, 1, {.side = 8});
  LabeledDataset b = a;
  const std::int64_t keep[] = {0, 1, 4, 5};  // classes 0 and 1 only
  b = subset(b, keep);
  const ClassStats both[] = {class_stats(a), class_stats(b)};
  ClassStats m = aggregate_stats(both);
  ASSERT_EQ(m.classes.size(), 4u);
  EXPECT_TRUE(bit_equal(m.classes[3].mean, class_stats(a).classes[3].mean));
}

TEST(InitVirtual, ZeroSpreadGivesMeanExactly) {
  LabeledDataset d = blob_digits(8, 1, {.side = 8});
  ClassStats s = class_stats(d);
  for (ClassStat& c : s.classes) c.std = Tensor::zeros(c.std.shape());
  VirtualDataset v = init_virtual(s, 2, declared_bounds(d), 9);
  check_virtual(v);
  EXPECT_EQ(v.labels, Labels({0, 0, 1, 1, 2, 2, 3, 3}));
  const std::int64_t per = v.images.numel() / v.size();
  for (std::int64_t k = 0; k < per; ++k) EXPECT_EQ(v.images.at(per + k), s.classes[0].mean.at(k));
}

TEST(InitVirtual, DeterministicAndClamped) {
  Fixture f;
  VirtualDataset again = init_virtual(class_stats(f.real), 3, channel_bounds(f.real), 5);
  EXPECT_TRUE(bit_equal(again.images, f.virt.images));
  check_virtual(f.virt);
}

TEST(CheckVirtual, RejectsBrokenSets) {
  Fixture f;
  VirtualDataset v = f.virt;
  std::swap(v.labels[0], v.labels[5]);
  EXPECT_THROW(check_virtual(v), ContractError);
  v = f.virt;
  v.images = v.images.clone();
  v.images.mutable_data()[0] = 5.0;
  EXPECT_THROW(check_virtual(v), ContractError);
}

TEST(DistributionMatch, InvariantsHold) {
  Fixture f;
  const NamedTensors before = f.model.all();
  DistributionMatchOptions o{.steps = 20, .lr = 1.0, .real_batch_per_class = 8, .seed = 2};
  DistillResult r = distribution_match(f.real, f.virt, f.model, o);
  check_virtual(r.data);
  EXPECT_EQ(r.data.labels, f.virt.labels);
  EXPECT_EQ(r.data.ipc, f.virt.ipc);
  EXPECT_TRUE(bit_equal(f.model.all(), before));
  EXPECT_EQ(r.trace.size(), 20u);
  EXPECT_LT(r.final_loss, r.initial_loss);
  DistillResult again = distribution_match(f.real, f.virt, f.model, o);
  EXPECT_TRUE(bit_equal(again.data.images, r.data.images));
  o.augment = true;
  DistillResult aug = distribution_match(f.real, f.virt, f.model, o);
  check_virtual(aug.data);
}

TEST(DistributionMatch, ZeroStepsIsIdentity) {
  Fixture f;
  DistillResult r = distribution_match(f.real, f.virt, f.model, {.steps = 0});
  EXPECT_TRUE(bit_equal(r.data.images, f.virt.images));
  EXPECT_EQ(r.initial_loss, r.final_loss);
}

TEST(GradientMatch, InvariantsHold) {
  Fixture f;
  const NamedTensors before = f.model.all();
  const NamedTensors target = ce_gradient(f.model, f.real.images, f.real.labels);
  DistillResult r = gradient_match(f.virt, target, f.model, {.steps = 15, .lr = 0.1});
  check_virtual(r.data);
  EXPECT_EQ(r.data.labels, f.virt.labels);
  EXPECT_TRUE(bit_equal(f.model.all(), before));
  EXPECT_LT(r.final_loss, r.initial_loss);
  DistillResult again = gradient_match(f.virt, target, f.model, {.steps = 15, .lr = 0.1});
  EXPECT_TRUE(bit_equal(again.data.images, r.data.images));
}

TEST(GradientMatch, SelfTargetIsAFixedPoint) {
  Fixture f;
  const NamedTensors target = ce_gradient(f.model, f.virt.images, f.virt.labels);
  DistillResult r = gradient_match(f.virt, target, f.model, {.steps = 1, .lr = 0.1});
  EXPECT_NEAR(r.initial_loss, 0.0, 1e-12);
}

TEST(Virtual, ContainerRoundTrip) {
  Fixture f;
  VirtualDataset back = virtual_from_container(decode_container(encode_container(virtual_to_container(f.virt))));
  EXPECT_TRUE(bit_equal(back.images, f.virt.images));
  EXPECT_EQ(back.labels, f.virt.labels);
  EXPECT_EQ(back.bounds.lo, f.virt.bounds.lo);
}

}  // namespace
}  // namespace fedvirt
