#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "wav2sleep/tensor.hpp"

namespace wav2sleep {

// Boolean (queries x keys) attend/ignore pattern, stored per group. Sample n of
// a batch of N uses group n / (N / groups), so a recording's mask can be shared
// by all of its sleep epochs without copying.
struct AttentionMask {
  std::size_t groups = 1;
  std::size_t queries = 0;
  std::size_t keys = 0;
  std::vector<std::uint8_t> allowed;  // [groups, queries, keys], 1 = attend

  static AttentionMask all(std::size_t queries, std::size_t keys);
  // Same key set for every query row: keys_allowed is [groups][keys].
  static AttentionMask from_keys(const std::vector<std::vector<bool>>& keys_allowed,
                                 std::size_t queries);

  bool at(std::size_t group, std::size_t query, std::size_t key) const {
    return allowed[(group * queries + query) * keys + key] != 0;
  }
  // Throws PreconditionError if any query row has no allowed key.
  void validate() const;
};

template <typename T>
struct AttentionParams {
  Tensor<T> query_weights, query_bias;
  Tensor<T> key_weights, key_bias;
  Tensor<T> value_weights, value_bias;
  Tensor<T> out_weights, out_bias;
};

// --- elementwise and structural -------------------------------------------

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& x, T factor);
template <typename T> Tensor<T> sum(const Tensor<T>& x);
// x[..., d] + row[d]
template <typename T> Tensor<T> add_row(const Tensor<T>& x, const Tensor<T>& row);
template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);
// [A, B, C] -> [A, C, B]
template <typename T> Tensor<T> swap_last_axes(const Tensor<T>& x);
// [B, C, L] -> [B, epochs, C * (L / epochs)], channel-major within an epoch.
template <typename T> Tensor<T> fold_epochs(const Tensor<T>& x, std::size_t epochs);
// row[d] -> [n, d]
template <typename T> Tensor<T> broadcast_rows(const Tensor<T>& row, std::size_t n);
// m tensors of [N, d] -> [N, m, d]
template <typename T> Tensor<T> stack_tokens(const std::vector<Tensor<T>>& tokens);
// [N, m, d] -> [N, d]
template <typename T> Tensor<T> take_token(const Tensor<T>& x, std::size_t index);
// x[b, ...] placed at rows `rows` of a zero tensor with `total` leading rows.
template <typename T>
Tensor<T> scatter_rows(const Tensor<T>& x, std::span<const std::size_t> rows, std::size_t total);

// --- network layers --------------------------------------------------------

// input [B, Cin, L], weights [Cout, Cin, K], bias [Cout]; "same" zero padding.
template <typename T>
Tensor<T> conv1d(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias,
                 std::size_t dilation = 1);
// Window 2, stride 2. Ties send the gradient to the first index.
template <typename T> Tensor<T> maxpool1d(const Tensor<T>& input);
// input [..., Din] * weights [Din, Dout] + bias [Dout]
template <typename T>
Tensor<T> affine(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias);
// Exact erf form.
template <typename T> Tensor<T> gelu(const Tensor<T>& input);
// Per (batch, channel) over length; scale/shift are per channel.
template <typename T>
Tensor<T> instance_norm(const Tensor<T>& input, const Tensor<T>& scale, const Tensor<T>& shift,
                        T epsilon = T(1e-5));
// Over the trailing dimension; scale/shift are per feature.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& input, const Tensor<T>& scale, const Tensor<T>& shift,
                     T epsilon = T(1e-5));
// Inverted dropout. rate 0 returns the input unchanged.
template <typename T> Tensor<T> dropout(const Tensor<T>& input, double rate, std::mt19937_64& rng);
// Numerically stable softmax over the trailing dimension.
template <typename T> Tensor<T> softmax(const Tensor<T>& logits);

// q, k, v: [N, tokens, d]. Disallowed keys get exactly zero weight (the -inf
// limit of an additive mask), so their contents never reach the output.
template <typename T>
Tensor<T> scaled_dot_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               std::size_t heads, const AttentionMask& mask);

// Projections + scaled_dot_attention + output projection. Inputs [N, tokens, d].
template <typename T>
Tensor<T> masked_multi_head_attention(const Tensor<T>& queries, const Tensor<T>& keys,
                                      const Tensor<T>& values, std::size_t heads,
                                      const AttentionMask& mask, const AttentionParams<T>& params);

// logits [..., C]; labels hold one class index per row, negative = ignore.
// Returns the summed -log p of the true class over non-ignored rows.
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels);

}  // namespace wav2sleep
