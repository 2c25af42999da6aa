// Copyright 2026 The ckv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "ckv/headtable.hpp"
#include "ckv/pipeline.hpp"
#include "ckv/riskgate.hpp"
#include "ckv/tinylm.hpp"
#include "ckv/trace.hpp"

namespace ckv {

/// window_nll(selection) - window_nll(full); exactly 0 for full retention.
double nll_delta(const TinyLMWeights& lm, std::span<const std::uint32_t> tokens, const LayerSelection& selection,
                 const IndexSet& window);

struct EvalRow {
  int trace = 0;
  Method method = Method::kFull;
  int budget = 0;
  double nll_full = 0.0;
  double nll_comp = 0.0;
  double delta = 0.0;
  double recovery = 1.0;  ///< exp(-delta)
  std::vector<int> retained;
  RiskCoords risk;
};

struct EvalAggregate {
  Method method = Method::kFull;
  int budget = 0;
  int count = 0;
  double mean = 0.0;
  double median = 0.0;
  double p95 = 0.0;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  std::vector<EvalAggregate> aggregates;

  const EvalAggregate& aggregate(Method method, int budget) const;
};

/// Linear-interpolation quantile of an unsorted sample, q in [0, 1].
double quantile(std::vector<double> values, double q);

struct EvalOptions {
  std::vector<Method> methods{Method::kCompiler, Method::kTopkAccum, Method::kSinkRecent, Method::kFull};
  std::vector<int> budgets{8, 16, 32, 64};
  int n_sink = kDefaultSinkTokens;
  int jobs = 1;
  CompressOptions compress;
};

/// Every (trace, method, budget) cell with uniform per-layer budgets. The
/// compiler method needs `heads`, `gate` and `bins`; baselines ignore them.
EvalReport evaluate_run(const std::vector<PrefillTrace>& traces, const TinyLMWeights& lm, const HeadTable* heads,
                        const GateTable* gate, const BinEdges* bins, const EvalOptions& options);

nlohmann::json eval_report_to_json(const EvalReport& report);
/// Budget-vs-delta curve: one line per (method, budget) aggregate.
std::string eval_curve_csv(const EvalReport& report);

}  // namespace ckv
