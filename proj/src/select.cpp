// Copyright 2026 The ckv Authors
// SPDX-License-Identifier: Apache-2.0

#include "ckv/select.hpp"

#include <algorithm>

#include "ckv/error.hpp"

namespace ckv {

IndexSet top_b(const Eigen::VectorXd& score, const IndexSet& candidates, int budget) {
  if (budget < 1) throw ParameterError("budget must be >= 1");
  IndexSet order = candidates;
  const auto keep = std::min<std::size_t>(order.size(), static_cast<std::size_t>(budget));
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(),
                    [&](Index a, Index b) {
                      if (score[a] != score[b]) return score[a] > score[b];
                      return a > b;
                    });
  order.resize(keep);
  std::sort(order.begin(), order.end());
  return order;
}

IndexSet gate_select(const Eigen::VectorXd& score, double tau, int budget, GateProvenance* provenance) {
  if (budget < 1) throw ParameterError("budget must be >= 1");
  IndexSet candidates;
  for (Eigen::Index t = 0; t < score.size(); ++t) {
    if (score[t] >= tau) candidates.push_back(t);
  }
  GateProvenance prov;
  prov.candidate_count = static_cast<int>(candidates.size());
  IndexSet out;
  if (candidates.empty()) {
    prov.fallback = true;
    IndexSet all(static_cast<std::size_t>(score.size()));
    for (Eigen::Index t = 0; t < score.size(); ++t) all[static_cast<std::size_t>(t)] = t;
    out = top_b(score, all, budget);
  } else if (static_cast<int>(candidates.size()) <= budget) {
    out = std::move(candidates);
  } else {
    prov.clamped = true;
    out = top_b(score, candidates, budget);
  }
  if (provenance) *provenance = prov;
  return out;
}

IndexSet budgeted_select(const Eigen::VectorXd& score, double tau, int budget, GateProvenance* provenance) {
  IndexSet out = gate_select(score, tau, budget, provenance);
  if (budget >= score.size()) {
    out.resize(static_cast<std::size_t>(score.size()));
    for (Eigen::Index t = 0; t < score.size(); ++t) out[static_cast<std::size_t>(t)] = t;
  }
  return out;
}

}  // namespace ckv
