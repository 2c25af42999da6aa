// Copyright 2026 The ckv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "ckv/bandit.hpp"
#include "ckv/reward.hpp"
#include "ckv/tinylm.hpp"
#include "ckv/trace.hpp"
#include "ckv/types.hpp"
#include "ckv/utility.hpp"

namespace ckv {

/// Default reliability weights, from full suppression to 1.5x amplification.
std::vector<double> default_action_set();

/// Per-head reliability weights, one L x H slice per calibration budget.
struct HeadTable {
  int num_layers = 0;
  int num_heads = 0;
  std::vector<double> action_set;
  std::vector<int> budgets;
  std::vector<RowMatrixXd> weights;
  CqlParams cql;
  RewardMode mode = RewardMode::kExact;
  int dataset_size = 0;

  int slice_for(int budget) const;
  const RowMatrixXd& at_budget(int budget) const { return weights[static_cast<std::size_t>(slice_for(budget))]; }
  /// min_h W[l, h] for the slice serving `budget`.
  double min_weight(int layer, int budget) const;

  /// Every head at weight 1.0; the unweighted max-pool.
  static HeadTable uniform(int num_layers, int num_heads, std::vector<int> budgets);
};

/// Weighted max-pool of one layer: u_hat[t] = max_h u[l, h, t] * W[l, h].
Eigen::VectorXd pooled_importance(const RowMatrixXd& u, int num_heads, int layer,
                                  const Eigen::Ref<const Eigen::VectorXd>& layer_weights);

/// u_hat for every layer (L x T) under one weight slice.
RowMatrixXd pooled_importance(const UtilityField& field, const RowMatrixXd& weights);

/// Tie preference for the head table: closest to 1.0 first, then smaller.
std::vector<int> head_action_preference(const std::vector<double>& action_set);

struct HeadCollectOptions {
  std::vector<double> action_set = default_action_set();
  std::vector<int> budgets;
  RewardMode mode = RewardMode::kExact;
  /// Gate threshold applied while collecting (the gate table does not
  /// exist yet). The default is the most permissive value of the tau grid;
  /// -infinity reduces the gate to plain Top-B.
  double tau = 0.8;
  std::uint64_t sampler_seed = 0;
  /// Uniform draws per (trace, budget, layer, head); 0 means |action_set|.
  int samples_per_state = 0;
  /// Evaluate every action once instead of sampling.
  bool exhaustive = false;
  int jobs = 1;
  UtilityOptions utility;
};

struct HeadExperience {
  BanditDataset data;
  int num_layers = 0;
  int num_heads = 0;
  std::vector<double> action_set;
  std::vector<int> budgets;
  RewardMode mode = RewardMode::kExact;

  int state_id(int budget_slot, int layer, int head) const {
    return (budget_slot * num_layers + layer) * num_heads + head;
  }
};

/// Marginal-contribution experience. For each sampled (layer, head, w) the
/// head's weight is set to w with all other heads at 1.0; the layer keeps
/// budgeted_select(pooled importance, options.tau, B) and the reward is
/// that layer's fidelity (other layers at full retention).
HeadExperience collect_head_experience(const std::vector<PrefillTrace>& traces, const TinyLMWeights* lm,
                                       const HeadCollectOptions& options);

HeadTable compile_head_table(const HeadExperience& experience, const CqlParams& params = {});

nlohmann::json head_table_to_json(const HeadTable& table);
HeadTable head_table_from_json(const nlohmann::json& j);
void save_head_table(const HeadTable& table, const std::filesystem::path& path);
HeadTable load_head_table(const std::filesystem::path& path);
/// One row per (budget, layer); columns are heads.
std::string head_table_csv(const HeadTable& table);

}  // namespace ckv
