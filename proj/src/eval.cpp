// Copyright 2026 The ckv Authors
// SPDX-License-Identifier: Apache-2.0

#include "ckv/eval.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "ckv/error.hpp"
#include "ckv/parallel.hpp"

namespace ckv {

double nll_delta(const TinyLMWeights& lm, std::span<const std::uint32_t> tokens, const LayerSelection& selection,
                 const IndexSet& window) {
  const WindowScorer scorer(lm, std::vector<std::uint32_t>(tokens.begin(), tokens.end()), window);
  return scorer.nll(selection) - scorer.full_nll();
}

double quantile(std::vector<double> v, double q) {
  if (v.empty()) throw DataError("quantile of an empty sample");
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

const EvalAggregate& EvalReport::aggregate(Method method, int budget) const {
  for (const auto& a : aggregates) {
    if (a.method == method && a.budget == budget) return a;
  }
  throw ParameterError("no aggregate for " + method_name(method) + " at budget " + std::to_string(budget));
}

EvalReport evaluate_run(const std::vector<PrefillTrace>& traces, const TinyLMWeights& lm, const HeadTable* heads,
                        const GateTable* gate, const BinEdges* bins, const EvalOptions& options) {
  const bool needs_tables =
      std::find(options.methods.begin(), options.methods.end(), Method::kCompiler) != options.methods.end();
  if (needs_tables && !(heads && gate && bins)) throw ConfigError("the compiler method needs head, gate and bin tables");

  const std::size_t cells = options.methods.size() * options.budgets.size();
  std::vector<std::vector<EvalRow>> per_trace(traces.size());
  parallel_for(traces.size(), options.jobs, [&](std::size_t i) {
    const PrefillTrace& t = traces[i];
    const WindowScorer scorer(lm, t.tokens, t.window_positions());
    const double full = scorer.full_nll();
    auto& out = per_trace[i];
    out.reserve(cells);
    for (Method m : options.methods) {
      for (int b : options.budgets) {
        const BudgetConfig budgets = BudgetConfig::uniform(t.num_layers, b);
        const Selection sel = m == Method::kCompiler
                                  ? compress(t, *heads, *gate, *bins, budgets, options.compress)
                                  : baseline_select(t, m, budgets, options.n_sink);
        EvalRow row;
        row.trace = static_cast<int>(i);
        row.method = m;
        row.budget = b;
        row.nll_full = full;
        row.nll_comp = m == Method::kFull ? full : scorer.nll(sel.layers);
        row.delta = row.nll_comp - row.nll_full;
        row.recovery = std::exp(-row.delta);
        for (const auto& s : sel.layers) row.retained.push_back(static_cast<int>(s.size()));
        row.risk = sel.risk;
        out.push_back(std::move(row));
      }
    }
  });

  EvalReport rep;
  for (auto& rows : per_trace) rep.rows.insert(rep.rows.end(), rows.begin(), rows.end());
  for (Method m : options.methods) {
    for (int b : options.budgets) {
      std::vector<double> d;
      for (const auto& r : rep.rows) {
        if (r.method == m && r.budget == b) d.push_back(r.delta);
      }
      EvalAggregate a;
      a.method = m;
      a.budget = b;
      a.count = static_cast<int>(d.size());
      if (!d.empty()) {
        std::vector<double> sorted = d;
        std::sort(sorted.begin(), sorted.end());
        double sum = 0.0;
        for (double x : sorted) sum += x;
        a.mean = sum / static_cast<double>(sorted.size());
        a.median = quantile(sorted, 0.5);
        a.p95 = quantile(sorted, 0.95);
      }
      rep.aggregates.push_back(a);
    }
  }
  return rep;
}

nlohmann::json eval_report_to_json(const EvalReport& rep) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : rep.rows) {
    rows.push_back({{"trace", r.trace},
                    {"method", method_name(r.method)},
                    {"budget", r.budget},
                    {"nll_full", r.nll_full},
                    {"nll_comp", r.nll_comp},
                    {"delta", r.delta},
                    {"recovery", r.recovery},
                    {"retained", r.retained},
                    {"r_struct", r.risk.r_struct},
                    {"r_sem", r.risk.r_sem}});
  }
  nlohmann::json aggs = nlohmann::json::array();
  for (const auto& a : rep.aggregates) {
    aggs.push_back({{"method", method_name(a.method)},
                    {"budget", a.budget},
                    {"count", a.count},
                    {"mean_delta", a.mean},
                    {"median_delta", a.median},
                    {"p95_delta", a.p95}});
  }
  return {{"schema_version", 1}, {"kind", "eval_report"}, {"aggregates", aggs}, {"rows", rows}};
}

std::string eval_curve_csv(const EvalReport& rep) {
  std::ostringstream os;
  os.precision(17);
  os << "method,budget,count,mean_delta,median_delta,p95_delta\n";
  for (const auto& a : rep.aggregates) {
    os << method_name(a.method) << ',' << a.budget << ',' << a.count << ',' << a.mean << ',' << a.median << ','
       << a.p95 << '\n';
  }
  return os.str();
}

}  // namespace ckv
