#pragma once

#include <cstdint>
#include <vector>

#include "ipl/tensor.hpp"

namespace ipl::nn {

// Post-softmax attention matrices of one layer, one matrix per head,
// each seq_len x seq_len row-major. Rows above the causal diagonal are 0.
template <class S>
struct AttentionCapture {
  Index seq_len = 0;
  std::vector<std::vector<S>> heads;
};

template <class S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b);

// a [m x k] * transpose(b [n x k]) -> [m x n]
template <class S>
TensorT<S> matmul_nt(const TensorT<S>& a, const TensorT<S>& b);

template <class S>
TensorT<S> transpose(const TensorT<S>& a);

template <class S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b);

// x [n x d] + bias [d] broadcast over rows; the only broadcast in the library.
template <class S>
TensorT<S> add_rowwise(const TensorT<S>& x, const TensorT<S>& bias);

template <class S>
TensorT<S> scale(const TensorT<S>& a, S factor);

template <class S>
TensorT<S> elementwise_mul(const TensorT<S>& a, const TensorT<S>& b);

// tanh-form gelu, 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))
template <class S>
TensorT<S> gelu(const TensorT<S>& x);

template <class S>
TensorT<S> softmax_rows(const TensorT<S>& x);

// Normalizes each row of x (last dimension d) to zero mean / unit variance,
// then applies gain and bias.
template <class S>
TensorT<S> layer_norm(const TensorT<S>& x, const TensorT<S>& gain, const TensorT<S>& bias, S eps);

template <class S>
TensorT<S> embedding_lookup(const TensorT<S>& table, const std::vector<int>& ids);

template <class S>
TensorT<S> concat_rows(const TensorT<S>& a, const TensorT<S>& b);

template <class S>
TensorT<S> slice_rows(const TensorT<S>& a, Index row_begin, Index row_end);

template <class S>
TensorT<S> sum(const TensorT<S>& x);

// Mean over masked rows of -log softmax(logits)[target]. Rows with
// mask false are skipped entirely: they contribute exact zero to the
// value and to every gradient.
template <class S>
TensorT<S> cross_entropy_masked(const TensorT<S>& logits, const std::vector<int>& targets,
                                const std::vector<std::uint8_t>& mask);

// sum_i weights[i] * nll_i, rows with weight 0 skipped. Generalizes
// cross_entropy_masked to the per-row weighting batched training needs.
template <class S>
TensorT<S> weighted_cross_entropy(const TensorT<S>& logits, const std::vector<int>& targets,
                                  const std::vector<S>& weights);

// Multi-head causal self-attention over a packed batch.
//   qkv:       [batch*seq_len x 3*d], column blocks q|k|v
//   row_valid: batch*seq_len flags; each example's valid rows must be one
//              contiguous run (left or right padding). Empty means all valid.
// Query rows attend to valid keys at or before their own position; rows with
// no visible key (left padding) output zeros. Returns [batch*seq_len x d].
// capture requires batch == 1 and records post-softmax matrices per head.
template <class S>
TensorT<S> causal_attention(const TensorT<S>& qkv, int n_heads, Index batch, Index seq_len,
                            const std::vector<std::uint8_t>& row_valid,
                            AttentionCapture<S>* capture = nullptr);

}  // namespace ipl::nn
