// Copyright 2026 The ckv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <memory>
#include <string>

#include "ckv/tinylm.hpp"
#include "ckv/trace.hpp"
#include "ckv/types.hpp"
#include "ckv/utility.hpp"

namespace ckv {

enum class RewardMode {
  kExact,      ///< window NLL recovery measured with the tiny model
  kSurrogate,  ///< negated window attention mass lost to eviction
};

RewardMode parse_reward_mode(const std::string& name);
std::string reward_mode_name(RewardMode mode);

/// Per-trace state shared by every reward evaluation on that trace.
///
/// fidelity() scores a single layer's retained set with every other layer
/// at full retention. Exact mode returns -(L_comp - L_full); surrogate mode
/// returns minus the attention mass that the layer's window rows place on
/// keys outside `kept` and the window itself, averaged over heads and rows.
class RewardContext {
 public:
  /// Exact mode requires `lm` with the trace's shape and token ids;
  /// surrogate mode forbids it.
  RewardContext(const PrefillTrace& trace, const TinyLMWeights* lm, RewardMode mode,
                const UtilityOptions& utility = {});

  const PrefillTrace& trace() const { return *trace_; }
  const UtilityField& utility() const { return utility_; }
  RewardMode mode() const { return mode_; }

  double fidelity(int layer, const IndexSet& kept) const;
  /// Mean lost window mass of one layer (the surrogate's magnitude).
  double lost_mass(int layer, const IndexSet& kept) const;

 private:
  const PrefillTrace* trace_;
  RewardMode mode_;
  UtilityField utility_;
  std::unique_ptr<WindowScorer> scorer_;
  double full_nll_ = 0.0;
};

}  // namespace ckv
