#pragma once

#include <span>
#include <vector>

#include "drivekd/rng.hpp"
#include "drivekd/tensor.hpp"

// Differentiable ops over rank-1/2 tensors. Every op takes the recording
// tape as its first argument; pass nullptr for a pure forward evaluation.
// All ops validate shapes, reject non-finite outputs, and accumulate
// gradients into both parents on the backward sweep.

namespace drivekd {

Tensor add(Tape* tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape* tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape* tape, const Tensor& a, const Tensor& b);  // Hadamard
Tensor scale(Tape* tape, const Tensor& a, float s);

/// x: N x C, bias: length C, broadcast over rows.
Tensor add_bias(Tape* tape, const Tensor& x, const Tensor& bias);

/// x: N x C, row: 1 x C (or length C), broadcast Hadamard over rows.
Tensor mul_row(Tape* tape, const Tensor& x, const Tensor& row);

Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b);

/// x: N x In, w: In x Out, bias: length Out. Equivalent to
/// add_bias(matmul(x, w), bias) with one tape entry.
Tensor linear(Tape* tape, const Tensor& x, const Tensor& w,
              const Tensor& bias);

Tensor transpose(Tape* tape, const Tensor& x);

/// Row-wise softmax of x / temperature. temperature must be > 0.
Tensor softmax_t(Tape* tape, const Tensor& x, float temperature);

Tensor sigmoid(Tape* tape, const Tensor& x);
Tensor gelu(Tape* tape, const Tensor& x);  // exact erf form

/// Row-wise layer norm, eps 1e-5. gamma/beta have length cols(x).
Tensor layer_norm(Tape* tape, const Tensor& x, const Tensor& gamma,
                  const Tensor& beta);

/// Inverted dropout: elements zeroed with probability p, survivors scaled
/// by 1/(1-p). The mask consumes numel(x) draws from the stream in row-major
/// order, so it is a pure function of (x, p, stream state). p = 0 is the
/// identity and consumes no draws. Errors: p outside [0, 1).
Tensor dropout(Tape* tape, const Tensor& x, float p, RngStream& stream);

/// Gathers rows of table (V x C) at the given ids. Backward scatter-adds.
Tensor embedding_lookup(Tape* tape, const Tensor& table,
                        std::span<const int> ids);

Tensor concat_rows(Tape* tape, std::span<const Tensor> parts);
Tensor slice_rows(Tape* tape, const Tensor& x, int begin, int end);
std::vector<Tensor> split_rows(Tape* tape, const Tensor& x,
                               std::span<const int> sizes);

/// Mean over rows -> 1 x C.
Tensor mean_rows(Tape* tape, const Tensor& x);

/// Subtracts the mean of all elements: y = x - mean(x).
Tensor center(Tape* tape, const Tensor& x);

/// Mean over rows of the squared row difference:
///   (1/N) sum_i ||row_i(a) - row_i(b)||^2.
Tensor mse(Tape* tape, const Tensor& a, const Tensor& b);

/// Weighted variant: (1/N) sum_i w_i ||row_i(a) - row_i(b)||^2,
/// w has one entry per row. Gradient flows into a, b and w.
Tensor mse(Tape* tape, const Tensor& a, const Tensor& b, const Tensor& w);

/// Mean over rows of -log softmax(logits)[target]. Accumulated in double.
Tensor cross_entropy(Tape* tape, const Tensor& logits,
                     std::span<const int> targets);

/// Row-averaged KL(softmax(p/tau) || softmax(q/tau)), computed in log space.
Tensor kl_div(Tape* tape, const Tensor& p_logits, const Tensor& q_logits,
              float temperature);

/// Multi-head scaled dot-product attention over one sequence.
/// q, k, v: L x D with D = num_heads * head_dim. Row i attends to the
/// contiguous range [0, visible[i]); 1 <= visible[i] <= L. Masking is
/// structural (softmax runs over the visible range only), so hidden
/// positions can never leak, even at the bit level.
Tensor attention(Tape* tape, const Tensor& q, const Tensor& k,
                 const Tensor& v, int num_heads,
                 std::span<const int> visible);

// Gradient-free helpers.
int argmax_row(const Tensor& x, int row, int col_begin, int col_end);
double cross_entropy_value(const Tensor& logits, std::span<const int> targets);

}  // namespace drivekd
