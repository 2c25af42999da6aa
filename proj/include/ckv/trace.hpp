// Copyright 2026 The ckv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ckv/types.hpp"

namespace ckv {

enum class AttentionMode : std::uint8_t {
  kWindowRows = 0,  ///< only the last `window` query rows are stored
  kFull = 1,        ///< full T x T causal matrices
};

/// One prompt's prefill record.
///
/// Attention, value norms and optional K/V are stored per (layer, head) in
/// layer-major order; use head_index() to address them. In window-rows mode
/// stored row r corresponds to query position seq_len - window + r.
struct PrefillTrace {
  int num_layers = 0;
  int num_heads = 0;
  int seq_len = 0;
  int head_dim = 0;
  int window = 0;
  AttentionMode mode = AttentionMode::kWindowRows;

  std::vector<std::uint32_t> tokens;
  bool has_logprobs = true;
  /// log P(x_t | x_<t), natural log. Position 0 has no context and is 0.
  Eigen::VectorXf logprobs;
  std::vector<RowMatrixXf> attention;
  /// (L*H) x T, row head_index(l, h).
  RowMatrixXf value_norms;
  bool has_kv = false;
  std::vector<RowMatrixXf> keys;    ///< per head, T x head_dim
  std::vector<RowMatrixXf> values;  ///< per head, T x head_dim

  int head_index(int layer, int head) const { return layer * num_heads + head; }
  int num_head_slots() const { return num_layers * num_heads; }
  int window_begin() const { return seq_len - window; }
  int stored_rows() const { return mode == AttentionMode::kFull ? seq_len : window; }
  /// Query position of stored attention row `row`.
  int query_of_row(int row) const { return mode == AttentionMode::kFull ? row : window_begin() + row; }

  const RowMatrixXf& attn(int layer, int head) const { return attention[head_index(layer, head)]; }

  /// The observation-window rows of one head, regardless of storage mode.
  auto window_rows(int layer, int head) const {
    const RowMatrixXf& a = attn(layer, head);
    return a.bottomRows(window);
  }

  /// Observation window positions, ascending.
  IndexSet window_positions() const;

  bool operator==(const PrefillTrace& other) const;
};

/// Per-layer token budgets.
struct BudgetConfig {
  std::vector<int> per_layer;
  std::optional<int> window;

  static BudgetConfig uniform(int num_layers, int budget) {
    return BudgetConfig{std::vector<int>(static_cast<std::size_t>(num_layers), budget), std::nullopt};
  }
  int at(int layer) const { return per_layer.at(static_cast<std::size_t>(layer)); }
};

/// Throws ParameterError unless every budget is >= 1 and there is one per layer.
void check_budgets(const BudgetConfig& budgets, int num_layers);

struct Violation {
  std::string path;
  std::string message;
};

struct ValidationReport {
  std::vector<Violation> violations;
  bool ok() const { return violations.empty(); }
  std::string summary(std::size_t max_entries = 10) const;
};

inline constexpr double kRowSumTolerance = 1e-5;

ValidationReport validate_trace(const PrefillTrace& trace);

// --- CKVT binary format ---------------------------------------------------

inline constexpr std::uint16_t kTraceVersion = 1;

std::vector<std::uint8_t> encode_trace(const PrefillTrace& trace);
/// Parses without validating the invariants.
PrefillTrace decode_trace(std::span<const std::uint8_t> bytes);

void save_trace(const PrefillTrace& trace, const std::filesystem::path& path);
/// Reads, parses and validates; the first violation is raised as a
/// ValidationError naming its location.
PrefillTrace load_trace(const std::filesystem::path& path);

/// `<dir>/<stem>.meta.json` next to a trace file.
std::filesystem::path meta_sidecar_path(const std::filesystem::path& trace_path);
void write_meta_sidecar(const std::filesystem::path& trace_path, const std::string& json_text);

/// Drops all but the observation-window rows. Identity on window-rows traces.
PrefillTrace to_window_rows(const PrefillTrace& trace);

// --- synthetic traces -----------------------------------------------------

enum class Regime { kConcentrated, kDiffuse, kMixed };

Regime parse_regime(const std::string& name);
std::string regime_name(Regime regime);

struct SyntheticSpec {
  int num_layers = 2;
  int num_heads = 2;
  int seq_len = 16;
  int window = 4;
  int head_dim = 8;
  Regime regime = Regime::kMixed;
  std::uint64_t seed = 0;
  /// Mass placed on the anchor key of each concentrated row.
  double peak_mass = 0.95;
  /// Relative multiplicative jitter applied to diffuse rows before renormalizing.
  double jitter = 0.05;
  bool with_kv = false;
};

/// Deterministic window-rows trace with a controllable attention regime.
/// Concentrated rows peak on one of a few shared anchor keys; diffuse rows
/// are near-uniform over their causal prefix.
PrefillTrace gen_synthetic(const SyntheticSpec& spec);

}  // namespace ckv
