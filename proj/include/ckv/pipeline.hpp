// Copyright 2026 The ckv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "ckv/headtable.hpp"
#include "ckv/riskgate.hpp"
#include "ckv/select.hpp"
#include "ckv/trace.hpp"
#include "ckv/types.hpp"
#include "ckv/utility.hpp"

namespace ckv {

enum class Method { kCompiler, kSinkRecent, kTopkAccum, kFull };

Method parse_method(const std::string& name);
std::string method_name(Method method);

struct LayerProvenance {
  int budget = 0;
  int candidate_count = 0;
  bool clamped = false;
  bool fallback = false;
  double tau = 0.0;
  int b_ent = 0;
  int b_ppl = 0;
};

/// Retained positions per layer, shared by every head of the layer.
struct Selection {
  Method method = Method::kCompiler;
  LayerSelection layers;
  std::vector<LayerProvenance> provenance;
  RiskCoords risk;

  bool operator==(const Selection& other) const;
};

struct CompressOptions {
  UtilityOptions utility;
};

/// Risk bins, utility, weighted max-pool, per-layer tau lookup and gated
/// selection, in that order.
Selection compress(const PrefillTrace& trace, const HeadTable& heads, const GateTable& gate, const BinEdges& bins,
                   const BudgetConfig& budgets, const CompressOptions& options = {});

inline constexpr int kDefaultSinkTokens = 4;

/// Reference selectors: first n_sink plus most recent, Top-B by window
/// attention mass, or everything.
Selection baseline_select(const PrefillTrace& trace, Method method, const BudgetConfig& budgets,
                          int n_sink = kDefaultSinkTokens);

/// Keys and values gathered per (layer, head) at the layer's retained positions.
struct CompressedCache {
  LayerSelection index_map;
  std::vector<RowMatrixXf> keys;    ///< per head slot, |S^(l)| x head_dim
  std::vector<RowMatrixXf> values;

  /// Cached rows across all layers (each row holds every head of its layer).
  std::size_t row_count() const;
};

CompressedCache build_cache(const PrefillTrace& trace, const Selection& selection);

/// Checks sortedness, range, non-emptiness and budgets; throws SelectionError.
void check_selection(const Selection& selection, int seq_len, const BudgetConfig& budgets);

nlohmann::json selection_to_json(const Selection& selection);
Selection selection_from_json(const nlohmann::json& j);

}  // namespace ckv
