// Copyright 2026 The ckv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "ckv/types.hpp"

namespace ckv {

struct BanditRecord {
  int state = 0;
  int action = 0;
  double reward = 0.0;

  auto operator<=>(const BanditRecord&) const = default;
};

/// Offline single-step dataset. The behavior policy is implicit: the
/// empirical per-state action frequencies of `records`.
struct BanditDataset {
  std::vector<std::string> state_labels;
  std::vector<std::string> action_labels;
  std::vector<BanditRecord> records;

  int num_states() const { return static_cast<int>(state_labels.size()); }
  int num_actions() const { return static_cast<int>(action_labels.size()); }

  /// Throws DataError on an empty dataset, out-of-range ids or a non-finite reward.
  void validate() const;
  /// Sorts records into the canonical (state, action, reward) order.
  void canonicalize();
};

struct CqlParams {
  double alpha_cql = 1.0;
  double lr = 0.1;
  int iters = 2000;
  std::uint64_t seed = 0;
};

struct QTable {
  std::vector<std::string> state_labels;
  std::vector<std::string> action_labels;
  RowMatrixXd q;
  CqlParams params;
  double final_loss = 0.0;
  /// Records per state in the fitted dataset.
  std::vector<int> state_counts;
};

/// Conservative objective on a tabular Q, averaged over records:
///   alpha * E_s[logsumexp_a Q(s,a) - E_{a~pi_beta(s)} Q(s,a)] + 1/2 E[(Q(s,a) - r)^2]
double cql_objective(const BanditDataset& data, const RowMatrixXd& q, double alpha_cql);

/// Minimizes cql_objective by full-batch gradient descent from Q = 0.
///
/// The objective separates over states, so each state's block of the
/// gradient is rescaled by N / n_s (a diagonal preconditioner that leaves
/// the stationary point unchanged). Rewards are aggregated per cell in
/// canonical order, which makes the fit bit-identical under any permutation
/// of the input records. States without records keep Q = 0.
QTable fit_cql(const BanditDataset& data, const CqlParams& params = {});

/// Per-state argmax. Actions whose value is within `tie_eps` of the row
/// maximum tie; ties resolve to the earliest action in `preference`
/// (defaults to ascending action id).
std::vector<int> greedy_policy(const QTable& q, const std::vector<int>& preference = {},
                               double tie_eps = 1e-9);

nlohmann::json qtable_to_json(const QTable& q);
QTable qtable_from_json(const nlohmann::json& j);
void save_qtable(const QTable& q, const std::filesystem::path& path);
QTable load_qtable(const std::filesystem::path& path);

}  // namespace ckv
