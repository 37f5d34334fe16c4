#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "sfr/tensor.hpp"

SFR_BEGIN_NAMESPACE

// Differentiable operations. Each op computes its forward result eagerly and,
// when the tape is recording and some input requires a gradient, appends the
// matching backward closure. Gradients accumulate (+=) into input buffers.
namespace ops {

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);
/// x[m x in] * w[in x out] + bias[out]
Tensor linear(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& bias);

Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& a, Scalar s);
/// Adds a length-n bias to every row of an m x n matrix.
Tensor add_bias(Tape& tape, const Tensor& x, const Tensor& bias);

Tensor gelu(Tape& tape, const Tensor& x);
Tensor tanh(Tape& tape, const Tensor& x);
Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain, const Tensor& bias, Scalar eps = Scalar(1e-5));

/// Row-wise softmax with max subtraction.
Tensor softmax_rows(Tape& tape, const Tensor& x);

/// Mean of -log softmax(logits)[i, targets[i]] over rows with mask[i] = 1.
Tensor cross_entropy(Tape& tape, const Tensor& logits, std::span<const int> targets, std::span<const int> mask);

/// Mean over rows of the per-row mean squared difference.
Tensor mse_rows(Tape& tape, const Tensor& pred, const Tensor& target);

Tensor sum(Tape& tape, const Tensor& x);
Tensor mean(Tape& tape, const Tensor& x);

/// Rows of table selected by ids.
Tensor embedding(Tape& tape, const Tensor& table, std::span<const int> ids);
Tensor gather_rows(Tape& tape, const Tensor& x, std::span<const std::size_t> rows);
Tensor concat_cols(Tape& tape, const std::vector<Tensor>& parts);

/// Multi-head causal self-attention over `batch` independent sequences of
/// length `seq`. qkv holds [q | k | v] per row: shape [batch*seq x 3d].
Tensor causal_attention(Tape& tape, const Tensor& qkv, std::size_t batch, std::size_t seq, std::size_t heads);

}  // namespace ops

/// Value-identical copy that is cut off from every upstream gradient.
Tensor detach(const Tensor& x);

SFR_END_NAMESPACE
