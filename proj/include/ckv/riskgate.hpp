// Copyright 2026 The ckv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "ckv/bandit.hpp"
#include "ckv/error.hpp"
#include "ckv/headtable.hpp"
#include "ckv/reward.hpp"
#include "ckv/trace.hpp"
#include "ckv/types.hpp"
#include "ckv/select.hpp"
#include "ckv/utility.hpp"

namespace ckv {

/// Shannon entropy (nats) of the normalized attention mass, 0 log 0 = 0.
template <typename Derived>
double mass_entropy(const Eigen::MatrixBase<Derived>& alpha) {
  const double total = alpha.template cast<double>().sum();
  if (!(total > 0.0)) throw DegenerateRiskError("window attention mass is zero");
  double h = 0.0;
  for (Eigen::Index t = 0; t < alpha.size(); ++t) {
    const double p = static_cast<double>(alpha(t)) / total;
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

/// Structural risk of window rows: entropy of their normalized column mass.
template <typename Derived>
double structural_risk(const Eigen::MatrixBase<Derived>& window_rows) {
  return mass_entropy(window_mass(window_rows));
}

/// Local perplexity exp(-mean log-prob) over the window positions.
double semantic_risk(const Eigen::VectorXf& logprobs, const IndexSet& window);

struct BinEdges {
  int n_ent = 20;
  int n_ppl = 4;
  std::vector<double> entropy;  ///< n_ent - 1 strictly ascending edges
  std::vector<double> ppl;      ///< n_ppl - 1 strictly ascending edges
  int effective_ent = 0;        ///< distinct entropy bins hit by the calibration set
  int effective_ppl = 0;
  bool ent_collapsed = false;
  bool ppl_collapsed = false;
  int calibration_size = 0;

  std::string hash() const;
};

/// Edges at the k/n quantiles (linear interpolation between order
/// statistics). Repeated edges are nudged upward by one ulp so the result
/// is strictly ascending.
std::vector<double> quantile_edges(std::vector<double> values, int n_bins);

/// Right-open binning: the number of edges at or below `value`, so a value
/// equal to an edge falls in the upper bin.
int bin_of(double value, const std::vector<double>& edges);

BinEdges fit_bins(std::span<const std::pair<double, double>> calibration, int n_ent = 20, int n_ppl = 4);

struct RiskCoords {
  double r_struct = 0.0;
  double r_sem = 1.0;
  int b_ent = 0;
  int b_ppl = 0;
};

std::pair<int, int> discretize(double r_struct, double r_sem, const BinEdges& edges);

/// Global (per-prompt) risk of a trace; bins are filled when `edges` is given.
RiskCoords risk_coords(const PrefillTrace& trace, const BinEdges* edges = nullptr);

/// Default action grid {0.80, 0.81, ..., 1.00}.
std::vector<double> default_tau_grid();

/// Retention threshold per (budget slice, layer, entropy bin, ppl bin).
struct GateTable {
  int num_layers = 0;
  int n_ent = 0;
  int n_ppl = 0;
  std::vector<int> budgets;                ///< ascending calibration budgets, one slice each
  std::vector<std::vector<double>> tau;    ///< per slice, flat [layer][b_ent][b_ppl]
  double beta = 1.0;
  CqlParams cql;
  std::string bins_hash;
  std::vector<std::string> filled_states;  ///< states inferred from the nearest observed bin
  int dataset_size = 0;

  std::size_t flat(int layer, int b_ent, int b_ppl) const {
    return (static_cast<std::size_t>(layer) * static_cast<std::size_t>(n_ent) + static_cast<std::size_t>(b_ent)) *
               static_cast<std::size_t>(n_ppl) +
           static_cast<std::size_t>(b_ppl);
  }
  int slice_for(int budget) const;
  double lookup(int layer, int b_ent, int b_ppl, int budget) const;
  /// A table holding `tau` everywhere.
  static GateTable constant(int num_layers, int n_ent, int n_ppl, std::vector<int> budgets, double tau);
};

/// Nearest calibration budget by absolute difference, ties to the smaller.
int nearest_budget_slice(const std::vector<int>& budgets, int budget);

nlohmann::json gate_table_to_json(const GateTable& table);
GateTable gate_table_from_json(const nlohmann::json& j);
void save_gate_table(const GateTable& table, const std::filesystem::path& path);
GateTable load_gate_table(const std::filesystem::path& path);
/// One row per (budget, b_ppl, layer); columns are entropy bins.
std::string gate_table_csv(const GateTable& table);

nlohmann::json bins_to_json(const BinEdges& edges);
BinEdges bins_from_json(const nlohmann::json& j);
void save_bins(const BinEdges& edges, const std::filesystem::path& path);
BinEdges load_bins(const std::filesystem::path& path);

/// (structural, semantic) risk of every trace, in order.
std::vector<std::pair<double, double>> calibration_risks(const std::vector<PrefillTrace>& traces);

struct GateCollectOptions {
  std::vector<double> tau_grid = default_tau_grid();
  std::vector<int> budgets;
  double beta = 1.0;
  RewardMode mode = RewardMode::kExact;
  std::uint64_t sampler_seed = 0;
  /// Uniform draws per (trace, budget, layer); 0 means |tau_grid|.
  int samples_per_state = 0;
  bool exhaustive = false;
  int jobs = 1;
  UtilityOptions utility;
};

struct GateExperience {
  BanditDataset data;
  int num_layers = 0;
  int n_ent = 0;
  int n_ppl = 0;
  std::vector<int> budgets;
  std::vector<double> tau_grid;
  double beta = 1.0;
  std::string bins_hash;

  int state_id(int budget_slot, int layer, int b_ent, int b_ppl) const {
    return ((budget_slot * num_layers + layer) * n_ent + b_ent) * n_ppl + b_ppl;
  }
};

/// Threshold experience. Each trace contributes its global risk bins; for
/// each sampled tau the layer keeps gate_select(u_hat, tau, B) and earns
///   fidelity - (beta / T) * | |I_cand| - B |.
GateExperience collect_gate_experience(const std::vector<PrefillTrace>& traces, const TinyLMWeights* lm,
                                       const HeadTable& heads, const BinEdges& bins,
                                       const GateCollectOptions& options);

/// Greedy tau per state, ties to the smaller tau. States without records
/// copy the nearest observed state (same budget first, then same layer,
/// then the smallest bin distance) and are listed in filled_states.
GateTable compile_gate_table(const GateExperience& experience, const CqlParams& params = {});

}  // namespace ckv
