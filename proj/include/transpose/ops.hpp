#pragma once

#include <vector>

#include "transpose/rng.hpp"
#include "transpose/tensor.hpp"

namespace transpose {

// Differentiable operations. Every op allocates a fresh output and never
// mutates its inputs. Passing tape == nullptr runs pure inference; with a
// tape the op records its backward rule, which accumulates into the grad
// buffers of its inputs.

Tensor matmul(const Tensor& a, const Tensor& b, Tape* tape = nullptr);
// a[m x k] * b[n x k]^T -> [m x n]
Tensor matmul_nt(const Tensor& a, const Tensor& b, Tape* tape = nullptr);

Tensor add(const Tensor& a, const Tensor& b, Tape* tape = nullptr);
Tensor sub(const Tensor& a, const Tensor& b, Tape* tape = nullptr);
Tensor mul(const Tensor& a, const Tensor& b, Tape* tape = nullptr);
Tensor scale(const Tensor& x, double c, Tape* tape = nullptr);

// x[L x d] + bias[d] broadcast over rows
Tensor add_row_bias(const Tensor& x, const Tensor& bias, Tape* tape = nullptr);

Tensor relu(const Tensor& x, Tape* tape = nullptr);

// Row-wise softmax with per-row max subtraction.
Tensor softmax_rows(const Tensor& x, Tape* tape = nullptr);

// Per-row normalization of x[L x d] to zero mean / unit variance, then
// gamma * xhat + beta.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps, Tape* tape = nullptr);

// Inverted dropout with stored mask. Identity when tape == nullptr or p == 0.
Tensor dropout(const Tensor& x, double p, Rng& rng, Tape* tape);

// x[Ci x H x W], w[Co x Ci x kh x kw], bias[Co] (or undefined for none).
// Cross-correlation convention.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride,
              int padding, Tape* tape = nullptr);

// x[Ci x H x W], w[Ci x Co x kh x kw]; output extent (H-1)*stride - 2*padding + k.
Tensor transposed_conv2d(const Tensor& x, const Tensor& w, const Tensor& bias,
                         int stride = 2, int padding = 1, Tape* tape = nullptr);

Tensor maxpool2d(const Tensor& x, int kernel, int stride, int padding,
                 Tape* tape = nullptr);

// y[c,:,:] = gamma[c] * x[c,:,:] + beta[c]
Tensor channel_affine(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                      Tape* tape = nullptr);

// align-corners-false bilinear upsampling of x[C x H x W] by integer factor
Tensor bilinear_upsample(const Tensor& x, int factor, Tape* tape = nullptr);

// [C x H x W] -> [H*W x C] with sequence index j = y*W + x, and back.
Tensor seq_from_chw(const Tensor& x, Tape* tape = nullptr);
Tensor chw_from_seq(const Tensor& x, int height, int width, Tape* tape = nullptr);

Tensor col_slice(const Tensor& x, int first, int count, Tape* tape = nullptr);
Tensor concat_cols(const std::vector<Tensor>& parts, Tape* tape = nullptr);

Tensor sum(const Tensor& x, Tape* tape = nullptr);
Tensor select(const Tensor& x, int64_t flat_index, Tape* tape = nullptr);

// Mean squared error over the channels of pred[K x H x W] whose mask entry
// is true; returns scalar zero when no channel is selected.
Tensor mse_masked(const Tensor& pred, const Tensor& target,
                  const std::vector<bool>& channel_mask, Tape* tape = nullptr);

}  // namespace transpose
