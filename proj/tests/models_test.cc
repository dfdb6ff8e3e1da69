#include <gtest/gtest.h>

#include "fedvirt/container.h"
#include "fedvirt/errors.h"
#include "fedvirt/models.h"
#include "fedvirt/rng.h"

namespace fedvirt {
namespace {

TEST(ConvNet, ShapesAndGroups) {
  ModelParams m = convnet_init(3, 4, 32, 16, 1);
  EXPECT_EQ(m.norm_groups, 8);
  EXPECT_EQ(m.feature_dim, 32 * 2 * 2);
  Tensor x = Tensor::zeros({5, 3, 16, 16});
  EXPECT_EQ(extract_features(m, x).shape(), Shape({5, 128}));
  EXPECT_EQ(predict_logits(m, x).shape(), Shape({5, 4}));
  EXPECT_EQ(convnet_init(1, 4, 4, 8, 1).norm_groups, 1);
  EXPECT_THROW(convnet_init(1, 4, 4, 12, 1), ContractError);  // side must survive three halvings
}

TEST(ConvNet, SeedDeterminesWeights) {
  ModelParams a = convnet_init(1, 3, 8, 8, 5);
  ModelParams b = convnet_init(1, 3, 8, 8, 5);
  ModelParams c = convnet_init(1, 3, 8, 8, 6);
  EXPECT_EQ(a.all()[0].value.at(3), b.all()[0].value.at(3));
  EXPECT_NE(a.all()[0].value.at(3), c.all()[0].value.at(3));
}

TEST(ConvNet, WrongInputShapeRejected) {
  ModelParams m = convnet_init(3, 4, 8, 16, 1);
  EXPECT_THROW(predict_logits(m, Tensor::zeros({1, 1, 16, 16})), ContractError);
  EXPECT_THROW(predict_logits(m, Tensor::zeros({1, 3, 8, 8})), ContractError);
}

TEST(Mlp, Shapes) {
  ModelParams m = mlp_init(12, 3, 7, 1);
  EXPECT_EQ(predict_logits(m, Tensor::zeros({2, 3, 2, 2})).shape(), Shape({2, 3}));
  EXPECT_EQ(extract_features(m, Tensor::zeros({2, 12})).shape(), Shape({2, 7}));
}

TEST(Models, WithValuesChecksShapes) {
  ModelParams m = mlp_init(4, 2, 3, 1);
  std::vector<Tensor> v = values_of(m.all());
  v[0] = Tensor::zeros({1});
  EXPECT_THROW(with_values(m, v), ContractError);
  v.pop_back();
  EXPECT_THROW(with_values(m, v), ContractError);
}

TEST(Models, ContainerRoundTrip) {
  for (const ModelParams& m : {convnet_init(3, 4, 8, 16, 2), mlp_init(12, 3, 7, 1)}) {
    ModelParams back = model_from_container(decode_container(encode_container(model_to_container(m))));
    ASSERT_EQ(back.size(), m.size());
    EXPECT_EQ(back.arch, m.arch);
    EXPECT_EQ(back.extractor.size(), m.extractor.size());
    const auto a = m.all(), b = back.all();
    for (std::size_t i = 0; i < a.size(); ++i) {
      EXPECT_EQ(a[i].name, b[i].name);
      ASSERT_EQ(a[i].value.shape(), b[i].value.shape());
      for (std::int64_t k = 0; k < a[i].value.numel(); ++k) ASSERT_EQ(a[i].value.at(k), b[i].value.at(k));
    }
  }
}

TEST(Models, ContainerWithWrongKindRejected) {
  Container c = model_to_container(mlp_init(4, 2, 3, 1));
  c.kind = "virtual";
  EXPECT_THROW(model_from_container(c), ContractError);
  Container d = model_to_container(mlp_init(4, 2, 3, 1));
  d.tensors.pop_back();
  EXPECT_THROW(model_from_container(d), ContractError);
}

}  // namespace
}  // namespace fedvirt
