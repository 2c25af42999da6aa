// Copyright 2026 The ckv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

#include "ckv/error.hpp"
#include "ckv/trace.hpp"
#include "ckv/types.hpp"

namespace ckv {

/// Window attention mass: column sums of the window rows, alpha[t] = sum_j A[j, t].
template <typename Derived>
Vector<typename Derived::Scalar> window_mass(const Eigen::MatrixBase<Derived>& window_rows) {
  return window_rows.colwise().sum().transpose();
}

/// Relative value magnitude of one head: norms / mean(norms). Returns false
/// (leaving `out` untouched) when every norm is zero.
template <typename Derived, typename OutDerived>
bool relative_norm_row(const Eigen::MatrixBase<Derived>& norms, Eigen::MatrixBase<OutDerived>& out) {
  using Scalar = typename OutDerived::Scalar;
  const Scalar mean = norms.template cast<Scalar>().mean();
  if (!(mean > Scalar(0))) return false;
  out = norms.template cast<Scalar>() / mean;
  return true;
}

/// Which attention mass feeds the utility product.
enum class AlphaMode {
  kGlobal,   ///< one alpha from the layer/head mean (default)
  kPerHead,  ///< alpha computed from each head's own window rows
};

struct UtilityOptions {
  AlphaMode alpha_mode = AlphaMode::kGlobal;
  /// Raise DegenerateHeadError for an all-zero-norm head instead of using rho = 1.
  bool strict_degenerate = false;
};

/// Stabilized utility for every (layer, head). Rows of rho and u are indexed
/// by PrefillTrace::head_index.
struct UtilityField {
  Eigen::VectorXd alpha;
  RowMatrixXd rho;
  RowMatrixXd u;
  /// Head slots whose value norms were all zero and fell back to rho = 1.
  std::vector<int> degenerate_heads;
};

/// Mean of the window rows over all layers and heads (w x T).
RowMatrixXd mean_attention(const PrefillTrace& trace);

/// rho per head slot; see UtilityOptions::strict_degenerate.
RowMatrixXd relative_norms(const PrefillTrace& trace, bool strict = false,
                           std::vector<int>* degenerate_heads = nullptr);

/// u = alpha (broadcast over heads) elementwise-times rho.
RowMatrixXd base_utility(const Eigen::VectorXd& alpha, const RowMatrixXd& rho);

UtilityField compute_utility(const PrefillTrace& trace, const UtilityOptions& options = {});

}  // namespace ckv
