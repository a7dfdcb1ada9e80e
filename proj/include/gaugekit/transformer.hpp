#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "gaugekit/adapter.hpp"
#include "gaugekit/checkpoint.hpp"
#include "gaugekit/linalg.hpp"

namespace gauge {

// Token embeddings, one hidden_size row per position.
struct ForwardInput {
  Matrix tokens;
};

// Hidden states after the last layer, one row per position.
struct ForwardOutput {
  Matrix hidden;
};

// Effective weights of one decoder layer in x*W orientation.
struct LayerWeights {
  Matrix q, k, v, o;
  Matrix gate, up, down;
  Matrix input_norm;           // 1 x hidden
  Matrix post_attention_norm;  // 1 x hidden
};

// Layer weights with any adapter deltas folded in: W + (alpha/rank) * A * B.
LayerWeights layer_weights(const CheckpointView& view, std::size_t layer, const LoraAdapter* adapter = nullptr);

struct AttentionOptions {
  bool rope = true;
  bool causal = true;
};

// Rotates one head vector in place by the RoPE angles for `position`,
// pairing dimension j with j + head_dim/2 at frequency theta^(-2j/head_dim).
void apply_rope(std::span<double> head, std::size_t position, double theta);

// Softmax-normalized attention weights for one query head: seq x seq, row t
// holding the weights position t assigns to each key position.
Matrix attention_probabilities(const Matrix& x, const LayerWeights& w, const ModelConfig& config,
                               std::size_t q_head, AttentionOptions options = {});

// Causal grouped-query attention with RoPE on Q and K, scores scaled by
// 1/sqrt(head_dim), heads concatenated and projected by W_O. x is seq x hidden.
Matrix attention_block(const Matrix& x, const LayerWeights& w, const ModelConfig& config,
                       AttentionOptions options = {});

// (silu(x W_gate) .* x W_up) W_down with silu(t) = t / (1 + e^-t).
Matrix mlp_block(const Matrix& x, const LayerWeights& w);

Matrix rms_norm(const Matrix& x, const Matrix& scale, double eps);

// Pre-norm residual stack:
//   x += attention_block(rms_norm(x)); x += mlp_block(rms_norm(x))
// Throws ShapeError / ConfigMismatchError if the adapter does not fit.
ForwardOutput forward(const CheckpointView& view, const LoraAdapter* adapter, const ForwardInput& input,
                      AttentionOptions options = {});

// i.i.d. N(0, 1) token embeddings.
ForwardInput random_input(const ModelConfig& config, std::size_t seq_len, Rng& rng);

struct DivergenceOptions {
  std::size_t n_inputs = 100;
  std::uint64_t seed = 42;
  std::size_t seq_len = 4;
};

// max over seeded random inputs of max |forward(A) - forward(B)|.
double max_divergence(const CheckpointView& a, const CheckpointView& b, const LoraAdapter* adapter_a,
                      const LoraAdapter* adapter_b, DivergenceOptions options = {});

}  // namespace gauge
