// Copyright 2026 The ckv Authors
// SPDX-License-Identifier: Apache-2.0

#include "ckv/reward.hpp"

#include <vector>

#include "ckv/error.hpp"

namespace ckv {

RewardMode parse_reward_mode(const std::string& name) {
  if (name == "exact") return RewardMode::kExact;
  if (name == "surrogate") return RewardMode::kSurrogate;
  throw ConfigError("unknown reward mode '" + name + "' (expected exact or surrogate)");
}

std::string reward_mode_name(RewardMode mode) { return mode == RewardMode::kExact ? "exact" : "surrogate"; }

RewardContext::RewardContext(const PrefillTrace& trace, const TinyLMWeights* lm, RewardMode mode,
                             const UtilityOptions& utility)
    : trace_(&trace), mode_(mode), utility_(compute_utility(trace, utility)) {
  if (mode == RewardMode::kSurrogate) {
    if (lm) throw ConfigError("surrogate rewards do not use a language model; drop the weights or use exact mode");
    return;
  }
  if (!lm) throw ConfigError("exact rewards need tiny-model weights");
  const TinyLMConfig& c = lm->config;
  if (c.num_layers != trace.num_layers || c.num_heads != trace.num_heads || c.head_dim != trace.head_dim) {
    throw CompatibilityError("model shape (" + std::to_string(c.num_layers) + ", " + std::to_string(c.num_heads) +
                             ", " + std::to_string(c.head_dim) + ") does not match trace (" +
                             std::to_string(trace.num_layers) + ", " + std::to_string(trace.num_heads) + ", " +
                             std::to_string(trace.head_dim) + ")");
  }
  scorer_ = std::make_unique<WindowScorer>(*lm, trace.tokens, trace.window_positions());
  full_nll_ = scorer_->full_nll();
}

double RewardContext::lost_mass(int layer, const IndexSet& kept) const {
  const PrefillTrace& t = *trace_;
  std::vector<char> keep(static_cast<std::size_t>(t.seq_len), 0);
  for (Index j : kept) keep[static_cast<std::size_t>(j)] = 1;
  for (Index j = t.window_begin(); j < t.seq_len; ++j) keep[static_cast<std::size_t>(j)] = 1;
  double lost = 0.0;
  for (int h = 0; h < t.num_heads; ++h) {
    const auto rows = t.window_rows(layer, h);
    for (Eigen::Index r = 0; r < rows.rows(); ++r) {
      for (Eigen::Index c = 0; c < rows.cols(); ++c) {
        if (!keep[static_cast<std::size_t>(c)]) lost += static_cast<double>(rows(r, c));
      }
    }
  }
  return lost / static_cast<double>(t.num_heads * t.window);
}

double RewardContext::fidelity(int layer, const IndexSet& kept) const {
  if (layer < 0 || layer >= trace_->num_layers) throw ParameterError("layer out of range");
  if (mode_ == RewardMode::kSurrogate) return -lost_mass(layer, kept);
  IndexSet all(static_cast<std::size_t>(trace_->seq_len));
  for (int t = 0; t < trace_->seq_len; ++t) all[static_cast<std::size_t>(t)] = t;
  LayerSelection sel(static_cast<std::size_t>(trace_->num_layers), all);
  sel[static_cast<std::size_t>(layer)] = kept;
  return -(scorer_->nll(sel) - full_nll_);
}

}  // namespace ckv
