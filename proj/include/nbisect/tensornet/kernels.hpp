#pragma once

// Pure forward/backward kernels. Each backward takes the upstream gradient
// and returns gradients with respect to the forward inputs; pointers that
// are null on output are skipped (e.g. no dx for raw image inputs).

#include <cstddef>

#include "nbisect/tensornet/tensor.hpp"

namespace nbisect::tn::kernels {

// y = x W + b over the last axis. x: [..., in], W: [in, out], b: [out].
Tensor dense_forward(const Tensor& x, const Tensor& W, const Tensor& b);
void dense_backward(const Tensor& x, const Tensor& W, const Tensor& dy, Tensor* dx, Tensor* dW,
                    Tensor* db);

struct Conv2dParams {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

std::size_t conv_output_size(std::size_t in, std::size_t kernel, Conv2dParams p);

// Cross-correlation. x: [B, C, H, W], kernels: [O, C, k, k], bias: [O].
Tensor conv2d_forward(const Tensor& x, const Tensor& kernels, const Tensor& bias, Conv2dParams p);
void conv2d_backward(const Tensor& x, const Tensor& kernels, const Tensor& dy, Conv2dParams p,
                     Tensor* dx, Tensor* dkernels, Tensor* dbias);

Tensor relu_forward(const Tensor& x);
// dx = dy where x > 0.
Tensor relu_backward(const Tensor& x, const Tensor& dy);

// Row-wise softmax over the last axis, stabilised by the row max.
Tensor softmax_rows(const Tensor& logits);

struct CrossEntropy {
  double loss = 0;  // mean over the batch
  Tensor grad;      // d loss / d logits
};

// logits, targets: [B, classes]; targets are one-hot rows.
CrossEntropy softmax_cross_entropy(const Tensor& logits, const Tensor& targets);

// Multi-head scaled dot-product self-attention without biases.
// x: [B, T, d]; all projections [d, d]; d % heads == 0.
struct AttentionCache {
  Tensor q, k, v;   // [B, T, d]
  Tensor weights;   // [B, heads, T, T]
  Tensor mixed;     // [B, T, d], heads concatenated before Wo
};

Tensor attention_forward(const Tensor& x, const Tensor& Wq, const Tensor& Wk, const Tensor& Wv,
                         const Tensor& Wo, std::size_t heads, AttentionCache* cache = nullptr);
void attention_backward(const Tensor& x, const Tensor& Wq, const Tensor& Wk, const Tensor& Wv,
                        const Tensor& Wo, std::size_t heads, const AttentionCache& cache,
                        const Tensor& dy, Tensor* dx, Tensor* dWq, Tensor* dWk, Tensor* dWv,
                        Tensor* dWo);

// Normalises the last axis, then scales by gamma and shifts by beta.
Tensor layer_norm_forward(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                          Tensor* normalized = nullptr, Tensor* inv_std = nullptr);
void layer_norm_backward(const Tensor& normalized, const Tensor& inv_std, const Tensor& gamma,
                         const Tensor& dy, Tensor* dx, Tensor* dgamma, Tensor* dbeta);

// [B, C, H, W] -> [B, (H/p)(W/p), C p p]; tokens row-major over the patch
// grid, features ordered (channel, row, column).
Tensor patchify_forward(const Tensor& x, std::size_t patch);
Tensor patchify_backward(const Shape& x_shape, const Tensor& dy, std::size_t patch);

// [B, g*g, d] -> [B, (g/2)^2, 4d]; each output token concatenates the 2x2
// block (top-left, top-right, bottom-left, bottom-right).
Tensor patch_merge_forward(const Tensor& x);
Tensor patch_merge_backward(const Tensor& dy);

// [B, C, H, W] -> [B, C]
Tensor global_avg_pool_forward(const Tensor& x);
Tensor global_avg_pool_backward(const Shape& x_shape, const Tensor& dy);

// [B, T, d] -> [B, d]
Tensor mean_tokens_forward(const Tensor& x);
Tensor mean_tokens_backward(const Shape& x_shape, const Tensor& dy);

}  // namespace nbisect::tn::kernels
