// Copyright 2026 The ckv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <vector>

#include "json.hpp"

#include "ckv/error.hpp"
#include "ckv/headtable.hpp"
#include "ckv/pipeline.hpp"
#include "ckv/trace.hpp"
#include "ckv/types.hpp"

namespace ckv {

inline constexpr double kMinRetainedMass = 1e-12;

/// Truncates a distribution to `kept` and renormalizes it.
template <typename Derived>
Vector<double> compressed_attention(const Eigen::MatrixBase<Derived>& row, const IndexSet& kept) {
  Vector<double> out = Vector<double>::Zero(row.size());
  double mass = 0.0;
  for (Index j : kept) mass += static_cast<double>(row(j));
  if (!(mass > kMinRetainedMass)) throw DegenerateRowError("retained mass " + std::to_string(mass) + " is too small");
  for (Index j : kept) out(j) = static_cast<double>(row(j)) / mass;
  return out;
}

/// Attention mass a distribution places outside `kept`.
template <typename Derived>
double lost_mass(const Eigen::MatrixBase<Derived>& row, const IndexSet& kept) {
  double kept_mass = 0.0;
  for (Index j : kept) kept_mass += static_cast<double>(row(j));
  return static_cast<double>(row.template cast<double>().sum()) - kept_mass;
}

struct RowTruncation {
  double l1_distance = 0.0;
  double lost_mass = 0.0;
};

/// Per-row L1 distance to the renormalized truncation, and the dropped mass.
/// Rows with no retained mass are reported with l1 = lost = 1 (the
/// truncation is taken to be zero there).
std::vector<RowTruncation> l1_truncation_check(const RowMatrixXd& rows, const IndexSet& kept);

struct FrobeniusError {
  std::vector<double> per_head;
  double mean = 0.0;
};

FrobeniusError frobenius_error(const std::vector<RowMatrixXd>& exact, const std::vector<RowMatrixXd>& approx);

struct LayerBound {
  int layer = 0;
  int budget = 0;
  double lhs = 0.0;              ///< mean over heads of ||A - A~||_F
  double eps_tail = 0.0;         ///< mean lost mass over heads and rows
  double w_min = 0.0;
  double deterministic = 0.0;    ///< sqrt(T) * eps_tail
  std::optional<double> stochastic;  ///< absent for excluded layers
  std::optional<double> ratio;       ///< lhs / deterministic when the latter is positive
  std::optional<double> c_fit;       ///< smallest c with lhs <= c * deterministic + stochastic
  double max_l1_gap = 0.0;       ///< max_rows | ||.||_1 - 2 * lost |
  double min_l1_margin = 0.0;    ///< min_rows (2 * lost - ||.||_1)
  int degenerate_rows = 0;
  int rows = 0;
};

struct BoundReport {
  double delta = 0.05;
  std::vector<LayerBound> layers;
  std::vector<int> excluded_layers;
};

/// Attention error accounting on a full-mode trace: every stored row is
/// truncated to the layer's selection and renormalized.
BoundReport bound_report(const PrefillTrace& trace, const Selection& selection, const HeadTable& heads,
                         double delta);

nlohmann::json bound_report_to_json(const BoundReport& report);

}  // namespace ckv
