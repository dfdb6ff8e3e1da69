#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "fedvirt/tensor.h"

// Differentiable primitives. Every op validates shapes (ContractError naming
// the op and the shapes), checks its output for NaN/Inf (NumericError) and is
// recorded on the active record when an input requires grad. Reductions run
// left to right in index order.
namespace fedvirt {

using Labels = std::vector<std::int64_t>;

// Elementwise. Operands have equal shapes, or one side is rank 0.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double s);
Tensor relu(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
// x^p for a constant exponent; x must be positive unless p is a whole number.
Tensor pow(const Tensor& x, double p);

// Reductions to rank 0 and their broadcast adjoint.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor expand(const Tensor& scalar, const Shape& shape);

// [N,D] -> [N] and [N] -> [N,D].
Tensor row_sum(const Tensor& x);
Tensor row_broadcast(const Tensor& v, std::int64_t d);

// Rows of [N,D] scaled to unit Euclidean norm.
Tensor l2_normalize(const Tensor& x);
// [N,K] -> [N,K], rowwise x - logsumexp(x).
Tensor log_softmax(const Tensor& x);
// out[i] = x[i, labels[i]] for x [N,K].
Tensor gather(const Tensor& x, const Labels& labels);
// Adjoint of gather: [N] -> [N,K] with v[i] at column labels[i].
Tensor scatter(const Tensor& v, const Labels& labels, std::int64_t k);

// [M,K] x [K,N].
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);

// b [C] repeated along axis 1 of `shape` (rank >= 2), and its adjoint.
Tensor channel_broadcast(const Tensor& b, const Shape& shape);
Tensor channel_sum(const Tensor& x);

// x [N,C,H,W], w [O,C,k,k] -> [N,O,Ho,Wo] with zero padding. No bias.
Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad);
// d<conv2d(x,w), g>/dx and /dw. Both are linear in each argument.
Tensor conv2d_input_grad(const Tensor& g, const Tensor& w, const Shape& x_shape,
                         int stride, int pad);
Tensor conv2d_weight_grad(const Tensor& x, const Tensor& g, const Shape& w_shape,
                          int stride, int pad);

// Mean over each (sample, channel group) block of x [N,C,...], broadcast back.
Tensor group_mean(const Tensor& x, int groups);
// Per-sample group normalization followed by the per-channel affine map.
Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  int groups, double eps);

// d<group_norm(x, gamma, beta), g>/dx. Its own gradient with respect to x is
// not recorded, so a third derivative through it throws ContractError.
Tensor group_norm_input_grad(const Tensor& x, const Tensor& gamma, const Tensor& g,
                             int groups, double eps);

// Non-overlapping k x k average pooling of [N,C,H,W] and its adjoint.
Tensor avg_pool2d(const Tensor& x, int k);
Tensor avg_pool2d_grad(const Tensor& g, int k);

Tensor reshape(const Tensor& x, const Shape& shape);
// [N, ...] -> [N, prod(...)].
Tensor flatten(const Tensor& x);

// Axis-0 concatenation, slicing and zero padding.
Tensor concat0(std::span<const Tensor> parts);
Tensor slice0(const Tensor& x, std::int64_t begin, std::int64_t end);
Tensor pad0(const Tensor& x, std::int64_t begin, std::int64_t total);

// Rows idx[i] of x along axis 0, and the scatter-add adjoint into n rows.
Tensor take_rows(const Tensor& x, std::span<const std::int64_t> idx);
Tensor scatter_rows(const Tensor& g, std::span<const std::int64_t> idx,
                    std::int64_t n);

// y[n,c] = A x[n,c] B^T for x [N,C,H,W], A [Ho,H], B [Wo,W]. A and B are
// constants. Covers translation, resampling and flips.
Tensor separable_transform(const Tensor& x, const Tensor& a, const Tensor& b);

}  // namespace fedvirt
