// Copyright 2026 The ckv Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <sstream>
#include <tuple>

#include "ckv/parallel.hpp"
#include "ckv/riskgate.hpp"
#include "ckv/rng.hpp"

namespace ckv {

std::vector<std::pair<double, double>> calibration_risks(const std::vector<PrefillTrace>& traces) {
  std::vector<std::pair<double, double>> out;
  out.reserve(traces.size());
  for (const auto& t : traces) {
    const RiskCoords rc = risk_coords(t);
    out.emplace_back(rc.r_struct, rc.r_sem);
  }
  return out;
}

GateExperience collect_gate_experience(const std::vector<PrefillTrace>& traces, const TinyLMWeights* lm,
                                       const HeadTable& heads, const BinEdges& bins,
                                       const GateCollectOptions& options) {
  if (traces.empty()) throw DataError("no calibration traces");
  if (options.tau_grid.empty()) throw ParameterError("tau grid is empty");
  for (double tau : options.tau_grid) {
    if (!(tau >= 0.8 && tau <= 1.0)) throw ParameterError("tau grid must lie in [0.8, 1.0]");
  }
  if (!(options.beta >= 0.0)) throw ParameterError("beta must be >= 0");
  if (options.budgets.empty()) throw ParameterError("no calibration budgets");
  for (int b : options.budgets) {
    if (b < 1) throw ParameterError("budgets must be >= 1");
  }
  for (const auto& t : traces) {
    if (t.num_layers != heads.num_layers || t.num_heads != heads.num_heads) {
      throw CompatibilityError("head table shape does not match calibration traces");
    }
  }

  GateExperience exp;
  exp.num_layers = heads.num_layers;
  exp.n_ent = bins.n_ent;
  exp.n_ppl = bins.n_ppl;
  exp.budgets = options.budgets;
  std::sort(exp.budgets.begin(), exp.budgets.end());
  exp.budgets.erase(std::unique(exp.budgets.begin(), exp.budgets.end()), exp.budgets.end());
  exp.tau_grid = options.tau_grid;
  std::sort(exp.tau_grid.begin(), exp.tau_grid.end());
  exp.tau_grid.erase(std::unique(exp.tau_grid.begin(), exp.tau_grid.end()), exp.tau_grid.end());
  exp.beta = options.beta;
  exp.bins_hash = bins.hash();

  const int L = exp.num_layers;
  const int A = static_cast<int>(exp.tau_grid.size());
  const int draws = options.exhaustive ? A : (options.samples_per_state > 0 ? options.samples_per_state : A);

  std::vector<std::vector<BanditRecord>> per_trace(traces.size());
  parallel_for(traces.size(), options.jobs, [&](std::size_t i) {
    const PrefillTrace& trace = traces[i];
    const RewardContext ctx(trace, lm, options.mode, options.utility);
    const RiskCoords rc = risk_coords(trace, &bins);
    const CounterRng rng(options.sampler_seed, i);
    const double lambda = options.beta / static_cast<double>(trace.seq_len);
    auto& out = per_trace[i];
    for (int b = 0; b < static_cast<int>(exp.budgets.size()); ++b) {
      const int budget = exp.budgets[static_cast<std::size_t>(b)];
      const RowMatrixXd pooled = pooled_importance(ctx.utility(), heads.at_budget(budget));
      for (int l = 0; l < L; ++l) {
        const Eigen::VectorXd u_hat = pooled.row(l).transpose();
        std::vector<double> memo(static_cast<std::size_t>(A), std::nan(""));
        for (int k = 0; k < draws; ++k) {
          const auto counter = static_cast<std::uint64_t>((b * L + l) * draws + k);
          const int a = options.exhaustive ? k : static_cast<int>(rng.below(counter, static_cast<std::uint64_t>(A)));
          double& r = memo[static_cast<std::size_t>(a)];
          if (std::isnan(r)) {
            GateProvenance prov;
            const IndexSet kept = budgeted_select(u_hat, exp.tau_grid[static_cast<std::size_t>(a)], budget, &prov);
            r = ctx.fidelity(l, kept) - lambda * std::abs(prov.candidate_count - budget);
          }
          out.push_back({exp.state_id(b, l, rc.b_ent, rc.b_ppl), a, r});
        }
      }
    }
  });

  for (int b : exp.budgets) {
    for (int l = 0; l < L; ++l) {
      for (int e = 0; e < exp.n_ent; ++e) {
        for (int p = 0; p < exp.n_ppl; ++p) {
          exp.data.state_labels.push_back("B=" + std::to_string(b) + ",l=" + std::to_string(l) +
                                          ",b_ent=" + std::to_string(e) + ",b_ppl=" + std::to_string(p));
        }
      }
    }
  }
  for (double tau : exp.tau_grid) {
    std::ostringstream os;
    os << "tau=" << tau;
    exp.data.action_labels.push_back(os.str());
  }
  for (auto& recs : per_trace) exp.data.records.insert(exp.data.records.end(), recs.begin(), recs.end());
  exp.data.canonicalize();
  return exp;
}

GateTable compile_gate_table(const GateExperience& exp, const CqlParams& params) {
  if (exp.data.records.empty()) throw CoverageError("no gate states observed");
  exp.data.validate();
  const int nb = static_cast<int>(exp.budgets.size());
  const int L = exp.num_layers;
  const int S = nb * L * exp.n_ent * exp.n_ppl;
  if (exp.data.num_states() != S || exp.data.num_actions() != static_cast<int>(exp.tau_grid.size())) {
    throw CompatibilityError("experience vocabulary does not match its declared shape");
  }

  const QTable q = fit_cql(exp.data, params);
  // Ascending action ids are ascending tau, which is the tie preference.
  const std::vector<int> policy = greedy_policy(q);

  struct Coord {
    int b, l, e, p;
  };
  std::vector<Coord> coords;
  coords.reserve(static_cast<std::size_t>(S));
  for (int b = 0; b < nb; ++b)
    for (int l = 0; l < L; ++l)
      for (int e = 0; e < exp.n_ent; ++e)
        for (int p = 0; p < exp.n_ppl; ++p) coords.push_back({b, l, e, p});

  std::vector<int> observed;
  for (int s = 0; s < S; ++s) {
    if (q.state_counts[static_cast<std::size_t>(s)] > 0) observed.push_back(s);
  }

  GateTable g;
  g.num_layers = L;
  g.n_ent = exp.n_ent;
  g.n_ppl = exp.n_ppl;
  g.budgets = exp.budgets;
  g.beta = exp.beta;
  g.cql = params;
  g.bins_hash = exp.bins_hash;
  g.dataset_size = static_cast<int>(exp.data.records.size());
  g.tau.assign(static_cast<std::size_t>(nb), std::vector<double>(static_cast<std::size_t>(L * g.n_ent * g.n_ppl)));
  for (int s = 0; s < S; ++s) {
    const Coord c = coords[static_cast<std::size_t>(s)];
    int source = s;
    if (q.state_counts[static_cast<std::size_t>(s)] == 0) {
      auto key = [&](int o) {
        const Coord d = coords[static_cast<std::size_t>(o)];
        return std::make_tuple(std::abs(d.b - c.b), std::abs(d.l - c.l), std::abs(d.e - c.e) + std::abs(d.p - c.p), o);
      };
      source = *std::min_element(observed.begin(), observed.end(), [&](int a, int b) { return key(a) < key(b); });
      g.filled_states.push_back(exp.data.state_labels[static_cast<std::size_t>(s)] + " <- " +
                                exp.data.state_labels[static_cast<std::size_t>(source)]);
    }
    g.tau[static_cast<std::size_t>(c.b)][g.flat(c.l, c.e, c.p)] =
        exp.tau_grid[static_cast<std::size_t>(policy[static_cast<std::size_t>(source)])];
  }
  return g;
}

}  // namespace ckv
