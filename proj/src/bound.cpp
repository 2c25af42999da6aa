// Copyright 2026 The ckv Authors
// SPDX-License-Identifier: Apache-2.0

#include "ckv/bound.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace ckv {

std::vector<RowTruncation> l1_truncation_check(const RowMatrixXd& rows, const IndexSet& kept) {
  std::vector<RowTruncation> out;
  out.reserve(static_cast<std::size_t>(rows.rows()));
  for (Eigen::Index r = 0; r < rows.rows(); ++r) {
    const auto row = rows.row(r).transpose();
    RowTruncation rt;
    rt.lost_mass = lost_mass(row, kept);
    try {
      rt.l1_distance = (row - compressed_attention(row, kept)).lpNorm<1>();
    } catch (const DegenerateRowError&) {
      rt.l1_distance = row.lpNorm<1>();
    }
    out.push_back(rt);
  }
  return out;
}

FrobeniusError frobenius_error(const std::vector<RowMatrixXd>& exact, const std::vector<RowMatrixXd>& approx) {
  if (exact.size() != approx.size() || exact.empty()) throw ParameterError("head lists must be nonempty and equal length");
  FrobeniusError fe;
  for (std::size_t h = 0; h < exact.size(); ++h) {
    fe.per_head.push_back((exact[h] - approx[h]).norm());
  }
  double sum = 0.0;
  for (double v : fe.per_head) sum += v;
  fe.mean = sum / static_cast<double>(fe.per_head.size());
  return fe;
}

BoundReport bound_report(const PrefillTrace& trace, const Selection& selection, const HeadTable& heads,
                         double delta) {
  if (!(delta > 0.0 && delta < 1.0)) throw ParameterError("delta must lie in (0, 1)");
  if (trace.mode != AttentionMode::kFull) throw DataError("bound checks need full attention matrices");
  if (static_cast<int>(selection.layers.size()) != trace.num_layers) {
    throw CompatibilityError("selection layer count does not match trace");
  }
  if (heads.num_layers != trace.num_layers || heads.num_heads != trace.num_heads) {
    throw CompatibilityError("head table shape does not match trace");
  }
  const int T = trace.seq_len;
  BoundReport rep;
  rep.delta = delta;
  for (int l = 0; l < trace.num_layers; ++l) {
    const IndexSet& kept = selection.layers[static_cast<std::size_t>(l)];
    LayerBound lb;
    lb.layer = l;
    lb.budget = l < static_cast<int>(selection.provenance.size())
                    ? selection.provenance[static_cast<std::size_t>(l)].budget
                    : static_cast<int>(kept.size());
    lb.w_min = heads.min_weight(l, lb.budget);
    lb.min_l1_margin = std::numeric_limits<double>::infinity();
    std::vector<RowMatrixXd> exact, approx;
    double lost_sum = 0.0;
    for (int h = 0; h < trace.num_heads; ++h) {
      const RowMatrixXd a = trace.attn(l, h).cast<double>();
      RowMatrixXd at = RowMatrixXd::Zero(a.rows(), a.cols());
      for (Eigen::Index r = 0; r < a.rows(); ++r) {
        const auto row = a.row(r).transpose();
        const double m = lost_mass(row, kept);
        lost_sum += m;
        ++lb.rows;
        try {
          at.row(r) = compressed_attention(row, kept).transpose();
        } catch (const DegenerateRowError&) {
          ++lb.degenerate_rows;
          continue;
        }
        const double l1 = (a.row(r) - at.row(r)).lpNorm<1>();
        lb.max_l1_gap = std::max(lb.max_l1_gap, std::abs(l1 - 2.0 * m));
        lb.min_l1_margin = std::min(lb.min_l1_margin, 2.0 * m - l1);
      }
      exact.push_back(a);
      approx.push_back(std::move(at));
    }
    if (lb.degenerate_rows == lb.rows) lb.min_l1_margin = 0.0;
    lb.lhs = frobenius_error(exact, approx).mean;
    lb.eps_tail = lost_sum / static_cast<double>(lb.rows);
    lb.deterministic = std::sqrt(static_cast<double>(T)) * lb.eps_tail;
    if (lb.deterministic > 0.0) lb.ratio = lb.lhs / lb.deterministic;
    if (lb.w_min > 0.0) {
      const double dropped = std::max(0, T - std::min(lb.budget, T));
      lb.stochastic = std::sqrt(dropped * std::log(1.0 / delta) / (T * lb.w_min * lb.w_min));
      const double excess = std::max(0.0, lb.lhs - *lb.stochastic);
      if (lb.deterministic > 0.0) {
        lb.c_fit = excess / lb.deterministic;
      } else if (excess == 0.0) {
        lb.c_fit = 0.0;
      }
    } else {
      rep.excluded_layers.push_back(l);
    }
    rep.layers.push_back(lb);
  }
  return rep;
}

nlohmann::json bound_report_to_json(const BoundReport& rep) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& lb : rep.layers) {
    layers.push_back({{"layer", lb.layer},
                      {"budget", lb.budget},
                      {"lhs", lb.lhs},
                      {"eps_tail", lb.eps_tail},
                      {"w_min", lb.w_min},
                      {"deterministic", lb.deterministic},
                      {"stochastic", opt(lb.stochastic)},
                      {"ratio", opt(lb.ratio)},
                      {"c_fit", opt(lb.c_fit)},
                      {"max_l1_gap", lb.max_l1_gap},
                      {"min_l1_margin", lb.min_l1_margin},
                      {"degenerate_rows", lb.degenerate_rows},
                      {"rows", lb.rows}});
  }
  return {{"schema_version", 1},
          {"kind", "bound_report"},
          {"delta", rep.delta},
          {"excluded_layers", rep.excluded_layers},
          {"layers", layers}};
}

}  // namespace ckv
