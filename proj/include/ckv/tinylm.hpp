// Copyright 2026 The ckv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "ckv/trace.hpp"
#include "ckv/types.hpp"

namespace ckv {

struct TinyLMConfig {
  int num_layers = 4;
  int num_heads = 4;
  int head_dim = 16;
  int vocab_size = 256;
  int max_seq_len = 512;
  /// Feed-forward width; 0 means 4 * model_dim.
  int ffn_dim = 0;
  /// Amplitude of the sinusoidal position encoding added to the embeddings.
  double pos_scale = 1.0;
  std::uint64_t seed = 0;

  int model_dim() const { return num_heads * head_dim; }
  int hidden_dim() const { return ffn_dim > 0 ? ffn_dim : 4 * model_dim(); }
  void validate() const;
};

/// Bias-free projections of one pre-norm decoder block. Activations are row
/// vectors, so a projection is x * W.
struct LayerWeights {
  RowMatrixXd wq, wk, wv, wo;  ///< model_dim x model_dim
  RowMatrixXd w1;              ///< model_dim x hidden_dim
  RowMatrixXd w2;              ///< hidden_dim x model_dim
};

struct TinyLMWeights {
  TinyLMConfig config;
  RowMatrixXd embedding;    ///< vocab x model_dim
  std::vector<LayerWeights> layers;
  RowMatrixXd unembedding;  ///< model_dim x vocab

  bool operator==(const TinyLMWeights& other) const;
};

/// Zero-filled weights of the right shapes.
TinyLMWeights zero_weights(const TinyLMConfig& config);

/// Scaled-uniform initialization keyed by config.seed: every entry is
/// U(-a, a) with a = sqrt(3 / fan_in) (embedding: a = 1), drawn from a
/// counter-based generator so each tensor entry depends only on
/// (seed, tensor, index).
TinyLMWeights init_weights(const TinyLMConfig& config);

/// Fixed sinusoidal position encoding (seq_len x model_dim), scaled by `scale`.
RowMatrixXd sinusoidal_positions(int seq_len, int model_dim, double scale);

inline constexpr double kRmsEps = 1e-6;

/// Exact forward results for one token sequence.
struct ForwardResult {
  /// log P(x_t | x_<t); entry 0 is 0 by convention.
  Eigen::VectorXd logprobs;
  /// Per layer: residual stream entering the block (T x model_dim).
  std::vector<RowMatrixXd> block_inputs;
  /// Per layer: keys and values of all heads (T x model_dim, head h in
  /// columns [h*head_dim, (h+1)*head_dim)).
  std::vector<RowMatrixXd> keys;
  std::vector<RowMatrixXd> values;
  /// Per head slot (layer-major): full causal attention (T x T).
  std::vector<RowMatrixXd> attention;
};

ForwardResult forward(const TinyLMWeights& weights, std::span<const std::uint32_t> tokens);

/// Prefill into a full-mode trace (attention, value norms, log-probs, K/V).
/// The observation window defaults to min(32, T).
PrefillTrace prefill(const TinyLMWeights& weights, std::span<const std::uint32_t> tokens, int window = 0);

/// Positions whose outputs predict the tokens of `window`: {t - 1 : t in window, t >= 1}.
IndexSet scoring_queries(const IndexSet& window);

/// Window NLL under a compressed cache, reusing one full forward pass.
///
/// Query positions that predict window tokens are recomputed with attention
/// restricted to the retained keys of each layer plus the scoring queries
/// themselves (the window is being scored, not evicted); the softmax is
/// renormalized over that support. All other positions are unaffected by
/// construction and come from the cached full pass.
class WindowScorer {
 public:
  WindowScorer(const TinyLMWeights& weights, std::vector<std::uint32_t> tokens, IndexSet window);

  /// Mean negative log-likelihood over the window tokens.
  double nll(const LayerSelection& retained) const;
  /// nll() with every position retained.
  double full_nll() const;

  int seq_len() const { return static_cast<int>(tokens_.size()); }
  const IndexSet& window() const { return window_; }
  const ForwardResult& full_pass() const { return full_; }

 private:
  const TinyLMWeights* weights_;
  std::vector<std::uint32_t> tokens_;
  IndexSet window_;
  IndexSet queries_;
  ForwardResult full_;
};

/// Convenience wrapper: WindowScorer(weights, tokens, window).nll(retained).
double window_nll(const TinyLMWeights& weights, std::span<const std::uint32_t> tokens,
                  const LayerSelection& retained, const IndexSet& window);

inline constexpr std::uint16_t kWeightsVersion = 1;

void save_weights(const TinyLMWeights& weights, const std::filesystem::path& path);
TinyLMWeights load_weights(const std::filesystem::path& path);

}  // namespace ckv
