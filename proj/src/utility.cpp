// Copyright 2026 The ckv Authors
// SPDX-License-Identifier: Apache-2.0

#include "ckv/utility.hpp"

#include <iostream>
#include <string>

namespace ckv {

RowMatrixXd mean_attention(const PrefillTrace& trace) {
  RowMatrixXd sum = RowMatrixXd::Zero(trace.window, trace.seq_len);
  // Fixed layer-major accumulation order.
  for (int l = 0; l < trace.num_layers; ++l) {
    for (int h = 0; h < trace.num_heads; ++h) sum += trace.window_rows(l, h).cast<double>();
  }
  return sum / static_cast<double>(trace.num_head_slots());
}

RowMatrixXd relative_norms(const PrefillTrace& trace, bool strict, std::vector<int>* degenerate_heads) {
  RowMatrixXd rho(trace.num_head_slots(), trace.seq_len);
  for (int s = 0; s < trace.num_head_slots(); ++s) {
    auto out = rho.row(s);
    if (!relative_norm_row(trace.value_norms.row(s), out)) {
      if (strict) {
        throw DegenerateHeadError("all value norms are zero in layer " + std::to_string(s / trace.num_heads) +
                                  " head " + std::to_string(s % trace.num_heads));
      }
      std::cerr << "warning: head slot " << s << " has all-zero value norms; using rho = 1\n";
      out.setOnes();
      if (degenerate_heads) degenerate_heads->push_back(s);
    }
  }
  return rho;
}

RowMatrixXd base_utility(const Eigen::VectorXd& alpha, const RowMatrixXd& rho) {
  if (alpha.size() != rho.cols()) throw ParameterError("alpha and rho lengths differ");
  return rho.array().rowwise() * alpha.transpose().array();
}

UtilityField compute_utility(const PrefillTrace& trace, const UtilityOptions& options) {
  UtilityField field;
  field.alpha = window_mass(mean_attention(trace));
  field.rho = relative_norms(trace, options.strict_degenerate, &field.degenerate_heads);
  if (options.alpha_mode == AlphaMode::kGlobal) {
    field.u = base_utility(field.alpha, field.rho);
  } else {
    field.u.resize(field.rho.rows(), field.rho.cols());
    for (int l = 0; l < trace.num_layers; ++l) {
      for (int h = 0; h < trace.num_heads; ++h) {
        const int s = trace.head_index(l, h);
        const Eigen::VectorXd head_alpha = window_mass(trace.window_rows(l, h).cast<double>());
        field.u.row(s) = field.rho.row(s).array() * head_alpha.transpose().array();
      }
    }
  }
  return field;
}

}  // namespace ckv
