// Copyright 2026 The ckv Authors
// SPDX-License-Identifier: Apache-2.0

// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any
// FAIL. Every check compares the library against an independent oracle or
// an exact identity; nothing here is tuned to the outcome.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <limits>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"

#include "ckv/bandit.hpp"
#include "ckv/bound.hpp"
#include "ckv/corpus.hpp"
#include "ckv/eval.hpp"
#include "ckv/headtable.hpp"
#include "ckv/parallel.hpp"
#include "ckv/pipeline.hpp"
#include "ckv/riskgate.hpp"
#include "ckv/tinylm.hpp"
#include "ckv/trace.hpp"
#include "ckv/utility.hpp"
#include "reference.hpp"

namespace fs = std::filesystem;

namespace ckv {
namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

// ---------------------------------------------------------------------------
// Fixtures.

// Causal rows with a mix of exact zeros and heavy tails, window rows only.
PrefillTrace random_trace(std::mt19937_64& gen, int L, int H, int T, int w) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  PrefillTrace t;
  t.num_layers = L;
  t.num_heads = H;
  t.seq_len = T;
  t.head_dim = 4;
  t.window = w;
  t.mode = AttentionMode::kWindowRows;
  t.tokens.assign(static_cast<std::size_t>(T), 1u);
  t.logprobs = Eigen::VectorXf::Zero(T);
  for (int i = 1; i < T; ++i) t.logprobs[i] = static_cast<float>(-3.0 * u(gen));
  for (int s = 0; s < L * H; ++s) {
    RowMatrixXf a = RowMatrixXf::Zero(w, T);
    for (int r = 0; r < w; ++r) {
      const int q = T - w + r;
      double sum = 0.0;
      for (int j = 0; j <= q; ++j) {
        const double x = u(gen) < 0.2 ? 0.0 : std::pow(u(gen), 3.0);
        a(r, j) = static_cast<float>(x);
        sum += x;
      }
      if (sum == 0.0) {
        a(r, q) = 1.0f;
        sum = 1.0;
      }
      a.row(r) /= static_cast<float>(sum);
    }
    t.attention.push_back(std::move(a));
  }
  t.value_norms.resize(L * H, T);
  for (Eigen::Index i = 0; i < t.value_norms.size(); ++i) t.value_norms.data()[i] = static_cast<float>(0.1 + 2.9 * u(gen));
  return t;
}

struct Tables {
  HeadTable heads;
  GateTable gate;
  BinEdges bins;
};

Tables random_tables(std::mt19937_64& gen, int L, int H, const std::vector<int>& budgets,
                     const std::vector<PrefillTrace>& calib, int n_ent, int n_ppl) {
  const auto actions = default_action_set();
  const auto taus = default_tau_grid();
  Tables t;
  t.heads = HeadTable::uniform(L, H, budgets);
  for (auto& w : t.heads.weights) {
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = actions[gen() % actions.size()];
  }
  t.bins = fit_bins(calibration_risks(calib), n_ent, n_ppl);
  t.gate = GateTable::constant(L, t.bins.n_ent, t.bins.n_ppl, budgets, 0.9);
  t.gate.bins_hash = t.bins.hash();
  for (auto& slice : t.gate.tau) {
    for (auto& tau : slice) tau = taus[gen() % taus.size()];
  }
  return t;
}

// ---------------------------------------------------------------------------
// 1. Renormalized rows sit exactly twice the evicted mass away in L1.

Outcome l1_identity() {
  const auto t0 = Clock::now();
  std::mt19937_64 gen(101);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  int cases = 0, identity_fail = 0, bound_fail = 0;
  double worst = 0.0;
  while (cases < 10000) {
    const int T = 2 + static_cast<int>(gen() % 63);
    RowMatrixXd row(1, T);
    const double spike = u(gen);
    for (int j = 0; j < T; ++j) row(0, j) = u(gen) < 0.25 ? 0.0 : std::pow(u(gen), 1.0 + 6.0 * spike);
    if (row.sum() == 0.0) row(0, T - 1) = 1.0;
    row /= row.sum();
    IndexSet kept;
    const double p = u(gen);
    for (Index j = 0; j < T; ++j) {
      if (u(gen) < p) kept.push_back(j);
    }
    double kept_mass = 0.0;
    for (Index j : kept) kept_mass += row(0, j);
    if (kept.empty() || kept_mass <= kMinRetainedMass) continue;
    const RowTruncation rt = l1_truncation_check(row, kept).front();
    // Independent value: sum |a - a~| by hand.
    double l1 = 0.0;
    std::vector<char> in(static_cast<std::size_t>(T), 0);
    for (Index j : kept) in[static_cast<std::size_t>(j)] = 1;
    for (int j = 0; j < T; ++j) l1 += std::abs(row(0, j) - (in[static_cast<std::size_t>(j)] ? row(0, j) / kept_mass : 0.0));
    const double lost = 1.0 - kept_mass;
    worst = std::max({worst, std::abs(rt.l1_distance - 2.0 * rt.lost_mass), std::abs(l1 - 2.0 * lost)});
    if (std::abs(rt.l1_distance - 2.0 * rt.lost_mass) > 1e-5 || std::abs(rt.l1_distance - l1) > 1e-9) ++identity_fail;
    if (rt.l1_distance > 2.0 * rt.lost_mass + 1e-12) ++bound_fail;
    ++cases;
  }
  const double secs = seconds_since(t0);
  std::ostringstream os;
  os << cases << " cases, identity violations " << identity_fail << ", bound violations " << bound_fail
     << ", worst gap " << worst << ", " << secs << " s";
  return {identity_fail == 0 && bound_fail == 0 && secs < 10.0, os.str()};
}

// ---------------------------------------------------------------------------
// 2. Budgets hold, no layer is empty, and the elastic branch keeps exactly
//    the candidates an independent max-pool admits.

Outcome budget_safety() {
  std::mt19937_64 gen(202);
  int violations = 0, elastic = 0;
  for (int i = 0; i < 1000; ++i) {
    const int L = 1 + static_cast<int>(gen() % 3);
    const int H = 1 + static_cast<int>(gen() % 4);
    const int T = 4 + static_cast<int>(gen() % 60);
    const int w = 1 + static_cast<int>(gen() % std::min(T, 16));
    std::vector<PrefillTrace> calib;
    for (int c = 0; c < 4; ++c) calib.push_back(random_trace(gen, L, H, T, w));
    const PrefillTrace& trace = calib.front();
    const std::vector<int> slices{2, 8, 32};
    const Tables tb = random_tables(gen, L, H, slices, calib, 3, 2);
    std::vector<int> per_layer;
    for (int l = 0; l < L; ++l) per_layer.push_back(1 + static_cast<int>(gen() % (T + 4)));
    const BudgetConfig budgets{per_layer, std::nullopt};
    const Selection s = compress(trace, tb.heads, tb.gate, tb.bins, budgets);
    const oracle::RefCompress ref = oracle::ref_compress(trace, tb.heads, tb.gate, tb.bins, per_layer);
    for (int l = 0; l < L; ++l) {
      const auto& kept = s.layers[static_cast<std::size_t>(l)];
      const int B = per_layer[static_cast<std::size_t>(l)];
      if (kept.empty() || static_cast<int>(kept.size()) > B) ++violations;
      const auto& prov = s.provenance[static_cast<std::size_t>(l)];
      if (prov.clamped || prov.fallback || B >= T) continue;
      ++elastic;
      // I_cand from the oracle utility and the head weights of this slice.
      const RowMatrixXd& W = tb.heads.at_budget(B);
      IndexSet cand;
      for (int t = 0; t < T; ++t) {
        double best = -std::numeric_limits<double>::infinity();
        for (int h = 0; h < H; ++h) best = std::max(best, ref.u[static_cast<std::size_t>(l * H + h)][static_cast<std::size_t>(t)] * W(l, h));
        if (best >= prov.tau) cand.push_back(t);
      }
      if (cand != kept) ++violations;
    }
  }
  std::ostringstream os;
  os << "1000 traces, " << elastic << " elastic layers, violations " << violations;
  return {violations == 0 && elastic > 0, os.str()};
}

// ---------------------------------------------------------------------------
// 3. compress equals the straight-line reference index for index.

Outcome pipeline_oracle() {
  const auto t0 = Clock::now();
  std::mt19937_64 gen(303);
  int mismatches = 0;
  for (int i = 0; i < 100; ++i) {
    std::vector<PrefillTrace> calib;
    for (int c = 0; c < 6; ++c) calib.push_back(random_trace(gen, 2, 2, 8, 1 + static_cast<int>(gen() % 8)));
    const Tables tb = random_tables(gen, 2, 2, {2, 4, 6}, calib, 3, 2);
    const PrefillTrace& trace = calib[gen() % calib.size()];
    const std::vector<int> budgets{1 + static_cast<int>(gen() % 9), 1 + static_cast<int>(gen() % 9)};
    const Selection s = compress(trace, tb.heads, tb.gate, tb.bins, BudgetConfig{budgets, std::nullopt});
    const oracle::RefCompress ref = oracle::ref_compress(trace, tb.heads, tb.gate, tb.bins, budgets);
    bool same = s.risk.b_ent == ref.b_ent && s.risk.b_ppl == ref.b_ppl;
    for (std::size_t l = 0; l < 2; ++l) {
      same = same && s.layers[l] == ref.layers[l].kept && s.provenance[l].tau == ref.layers[l].tau &&
             s.provenance[l].clamped == ref.layers[l].clamped && s.provenance[l].fallback == ref.layers[l].fallback;
    }
    if (!same) ++mismatches;
  }
  const double secs = seconds_since(t0);
  std::ostringstream os;
  os << "100 fixtures, mismatches " << mismatches << ", " << secs << " s";
  return {mismatches == 0 && secs < 5.0, os.str()};
}

// ---------------------------------------------------------------------------
// 4. Full retention reproduces the full NLL exactly; single drops match an
//    independent forward pass.

Outcome nll_identity() {
  std::mt19937_64 gen(404);
  int exact_fail = 0, ref_fail = 0;
  double worst = 0.0;
  for (int i = 0; i < 50; ++i) {
    TinyLMConfig c;
    c.num_layers = 1 + static_cast<int>(gen() % 3);
    c.num_heads = 1 + static_cast<int>(gen() % 3);
    c.head_dim = 4;
    c.vocab_size = 24;
    c.max_seq_len = 32;
    c.seed = gen();
    const TinyLMWeights lm = init_weights(c);
    const int T = 3 + static_cast<int>(gen() % 12);
    std::vector<std::uint32_t> tokens(static_cast<std::size_t>(T));
    for (auto& x : tokens) x = static_cast<std::uint32_t>(gen() % 24);
    const int w = 1 + static_cast<int>(gen() % std::min(T - 1, 4));
    IndexSet window;
    for (int t = T - w; t < T; ++t) window.push_back(t);

    const WindowScorer scorer(lm, tokens, window);
    IndexSet all;
    for (int t = 0; t < T; ++t) all.push_back(t);
    const LayerSelection full(static_cast<std::size_t>(c.num_layers), all);
    const ForwardResult fr = forward(lm, tokens);
    double direct = 0.0;
    for (Index t : window) direct -= fr.logprobs[t];
    direct /= static_cast<double>(window.size());
    if (scorer.nll(full) != scorer.full_nll() || scorer.full_nll() != direct) ++exact_fail;

    const int layer = static_cast<int>(gen() % static_cast<std::uint64_t>(c.num_layers));
    const Index drop = static_cast<Index>(gen() % static_cast<std::uint64_t>(T - w));
    LayerSelection sel = full;
    auto& s = sel[static_cast<std::size_t>(layer)];
    s.erase(std::find(s.begin(), s.end(), drop));
    const double got = scorer.nll(sel);
    const double want = oracle::ref_window_nll(lm, tokens, sel, window);
    worst = std::max(worst, std::abs(got - want));
    if (std::abs(got - want) > 1e-5) ++ref_fail;
  }
  std::ostringstream os;
  os << "50 fixtures, full-retention mismatches " << exact_fail << ", single-drop mismatches " << ref_fail
     << ", worst gap " << worst;
  return {exact_fail == 0 && ref_fail == 0, os.str()};
}

// ---------------------------------------------------------------------------
// 5. Conservative fit: cell means at zero penalty, monotone suppression of
//    unobserved actions, permutation-independent bits.

BanditDataset labels(int states, int actions) {
  BanditDataset d;
  for (int s = 0; s < states; ++s) d.state_labels.push_back("s" + std::to_string(s));
  for (int a = 0; a < actions; ++a) d.action_labels.push_back("a" + std::to_string(a));
  return d;
}

Outcome cql_solver() {
  std::mt19937_64 gen(505);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  int mean_fail = 0, order_fail = 0, perm_fail = 0, fixtures = 0;
  double worst_mean = 0.0;

  for (int trial = 0; trial < 20; ++trial) {
    BanditDataset d = labels(5, 4);
    std::vector<double> sum(20, 0.0), n(20, 0.0);
    for (int s = 0; s < 5; ++s) {
      for (int a = 0; a < 4; ++a) {
        const double centre = u(gen);
        const int k = 1 + static_cast<int>(gen() % 4);
        for (int i = 0; i < k; ++i) {
          const double r = centre + 0.3 * u(gen);
          d.records.push_back({s, a, r});
          sum[static_cast<std::size_t>(s * 4 + a)] += r;
          n[static_cast<std::size_t>(s * 4 + a)] += 1.0;
        }
      }
    }
    CqlParams p;
    p.alpha_cql = 0.0;
    const QTable q = fit_cql(d, p);
    for (int s = 0; s < 5; ++s) {
      for (int a = 0; a < 4; ++a) {
        const double gap = std::abs(q.q(s, a) - sum[static_cast<std::size_t>(s * 4 + a)] / n[static_cast<std::size_t>(s * 4 + a)]);
        worst_mean = std::max(worst_mean, gap);
        if (gap > 1e-3) ++mean_fail;
      }
    }
    const QTable base = fit_cql(d);
    for (int k = 0; k < 3; ++k) {
      std::shuffle(d.records.begin(), d.records.end(), gen);
      const QTable again = fit_cql(d);
      if (again.q != base.q || again.final_loss != base.final_loss) ++perm_fail;
    }
  }

  // Every 2-state/3-action fixture: each state observes a nonempty subset.
  const std::vector<double> alphas{0.0, 0.1, 0.5, 1.0, 2.0, 5.0};
  for (int m0 = 1; m0 < 8; ++m0) {
    for (int m1 = 1; m1 < 8; ++m1) {
      ++fixtures;
      BanditDataset d = labels(2, 3);
      const int masks[2] = {m0, m1};
      for (int s = 0; s < 2; ++s) {
        for (int a = 0; a < 3; ++a) {
          if (masks[s] & (1 << a)) {
            d.records.push_back({s, a, u(gen)});
            d.records.push_back({s, a, u(gen)});
          }
        }
      }
      std::vector<double> prev(6, std::numeric_limits<double>::infinity());
      for (double alpha : alphas) {
        CqlParams p;
        p.alpha_cql = alpha;
        const QTable q = fit_cql(d, p);
        for (int s = 0; s < 2; ++s) {
          double min_seen = std::numeric_limits<double>::infinity();
          for (int a = 0; a < 3; ++a) {
            if (masks[s] & (1 << a)) min_seen = std::min(min_seen, q.q(s, a));
          }
          for (int a = 0; a < 3; ++a) {
            if (masks[s] & (1 << a)) continue;
            const double v = q.q(s, a);
            if (v > prev[static_cast<std::size_t>(s * 3 + a)] + 1e-12) ++order_fail;
            if (alpha > 0.0 && !(v < min_seen)) ++order_fail;
            prev[static_cast<std::size_t>(s * 3 + a)] = v;
          }
        }
      }
    }
  }
  std::ostringstream os;
  os << "mean gaps over 1e-3 " << mean_fail << " (worst " << worst_mean << "), ordering violations " << order_fail
     << " over " << fixtures << " fixtures, permutation mismatches " << perm_fail;
  return {mean_fail == 0 && order_fail == 0 && perm_fail == 0, os.str()};
}

// ---------------------------------------------------------------------------
// 6. Compiled tables follow planted dominant actions; ties follow the rules.

Outcome table_fidelity() {
  std::mt19937_64 gen(606);
  std::uniform_real_distribution<double> noise(-0.05, 0.05);
  int cells = 0, agree = 0, tie_fail = 0;

  // Head table: 3 slices x 2 layers x 4 heads, one dominant weight per state.
  for (int rep = 0; rep < 10; ++rep) {
    HeadExperience e;
    e.num_layers = 2;
    e.num_heads = 4;
    e.action_set = default_action_set();
    e.budgets = {8, 16, 32};
    const int A = static_cast<int>(e.action_set.size());
    const int S = 3 * 2 * 4;
    for (int s = 0; s < S; ++s) e.data.state_labels.push_back("s" + std::to_string(s));
    for (int a = 0; a < A; ++a) e.data.action_labels.push_back("w" + std::to_string(a));
    std::vector<int> best(static_cast<std::size_t>(S));
    for (int s = 0; s < S; ++s) {
      best[static_cast<std::size_t>(s)] = static_cast<int>(gen() % static_cast<std::uint64_t>(A));
      for (int a = 0; a < A; ++a) {
        for (int k = 0; k < 3; ++k) {
          e.data.records.push_back({s, a, (a == best[static_cast<std::size_t>(s)] ? 0.4 : 0.0) + noise(gen)});
        }
      }
    }
    const HeadTable t = compile_head_table(e);
    for (int b = 0; b < 3; ++b) {
      for (int l = 0; l < 2; ++l) {
        for (int h = 0; h < 4; ++h) {
          ++cells;
          const int s = e.state_id(b, l, h);
          if (t.weights[static_cast<std::size_t>(b)](l, h) == e.action_set[static_cast<std::size_t>(best[static_cast<std::size_t>(s)])]) ++agree;
        }
      }
    }
  }

  // Gate table: 2 slices x 2 layers x 4 x 3 bins, one dominant tau per state.
  for (int rep = 0; rep < 10; ++rep) {
    GateExperience e;
    e.num_layers = 2;
    e.n_ent = 4;
    e.n_ppl = 3;
    e.budgets = {8, 16};
    e.tau_grid = default_tau_grid();
    const int A = static_cast<int>(e.tau_grid.size());
    const int S = 2 * 2 * 4 * 3;
    for (int s = 0; s < S; ++s) e.data.state_labels.push_back("g" + std::to_string(s));
    for (int a = 0; a < A; ++a) e.data.action_labels.push_back("t" + std::to_string(a));
    std::vector<int> best(static_cast<std::size_t>(S));
    for (int s = 0; s < S; ++s) {
      best[static_cast<std::size_t>(s)] = static_cast<int>(gen() % static_cast<std::uint64_t>(A));
      for (int a = 0; a < A; ++a) {
        for (int k = 0; k < 2; ++k) {
          e.data.records.push_back({s, a, (a == best[static_cast<std::size_t>(s)] ? 0.4 : 0.0) + noise(gen)});
        }
      }
    }
    const GateTable g = compile_gate_table(e);
    for (int b = 0; b < 2; ++b) {
      for (int l = 0; l < 2; ++l) {
        for (int x = 0; x < 4; ++x) {
          for (int p = 0; p < 3; ++p) {
            ++cells;
            const int s = e.state_id(b, l, x, p);
            if (g.tau[static_cast<std::size_t>(b)][g.flat(l, x, p)] == e.tau_grid[static_cast<std::size_t>(best[static_cast<std::size_t>(s)])]) ++agree;
          }
        }
      }
    }
  }

  // Tie cells. Head: closest to 1.0 first, then the smaller weight. Gate:
  // the smallest threshold.
  {
    HeadExperience e;
    e.num_layers = 1;
    e.num_heads = 3;
    e.action_set = default_action_set();  // 0, .25, .5, .75, 1, 1.25, 1.5
    e.budgets = {8};
    for (int s = 0; s < 3; ++s) e.data.state_labels.push_back("s" + std::to_string(s));
    for (int a = 0; a < 7; ++a) e.data.action_labels.push_back("w" + std::to_string(a));
    const std::vector<std::vector<int>> tied{{0, 1, 2, 3, 4, 5, 6}, {2, 6}, {3, 5}};
    const std::vector<double> want{1.0, 0.5, 0.75};
    for (int s = 0; s < 3; ++s) {
      for (int a = 0; a < 7; ++a) {
        const bool top = std::find(tied[static_cast<std::size_t>(s)].begin(), tied[static_cast<std::size_t>(s)].end(), a) !=
                         tied[static_cast<std::size_t>(s)].end();
        e.data.records.push_back({s, a, top ? 0.3 : 0.1});
      }
    }
    const HeadTable t = compile_head_table(e);
    for (int h = 0; h < 3; ++h) {
      if (t.weights[0](0, h) != want[static_cast<std::size_t>(h)]) ++tie_fail;
    }
  }
  {
    GateExperience e;
    e.num_layers = 1;
    e.n_ent = 1;
    e.n_ppl = 2;
    e.budgets = {8};
    e.tau_grid = default_tau_grid();
    const int A = static_cast<int>(e.tau_grid.size());
    for (int s = 0; s < 2; ++s) e.data.state_labels.push_back("g" + std::to_string(s));
    for (int a = 0; a < A; ++a) e.data.action_labels.push_back("t" + std::to_string(a));
    for (int a = 0; a < A; ++a) {
      e.data.records.push_back({0, a, 0.2});
      e.data.records.push_back({1, a, (a == 5 || a == 11) ? 0.6 : 0.1});
    }
    const GateTable g = compile_gate_table(e);
    if (g.tau[0][g.flat(0, 0, 0)] != e.tau_grid[0]) ++tie_fail;
    if (g.tau[0][g.flat(0, 0, 1)] != e.tau_grid[5]) ++tie_fail;
  }

  const double rate = static_cast<double>(agree) / cells;
  std::ostringstream os;
  os << "dominant action in " << agree << "/" << cells << " cells (" << 100.0 * rate << "%), tie-rule violations "
     << tie_fail;
  return {rate >= 0.99 && tie_fail == 0, os.str()};
}

// ---------------------------------------------------------------------------
// 7 and 8 share the calibration runs on the planted corpus.

struct PlantedRun {
  double tau_top = 0.0;     ///< mean tau over the highest perplexity bin
  double tau_bottom = 0.0;  ///< mean tau over the lowest perplexity bin
  EvalReport report;
  double secs = 0.0;
};

PlantedRun planted_run(std::uint64_t seed, int calibration, int evaluation, int jobs) {
  const auto t0 = Clock::now();
  PlantedSpec spec;
  spec.seed = seed;
  const TinyLMWeights lm = planted_model(spec);
  const auto all = planted_corpus(lm, spec, calibration + evaluation, jobs);
  const std::vector<PrefillTrace> calib(all.begin(), all.begin() + calibration);
  const std::vector<PrefillTrace> test(all.begin() + calibration, all.end());
  const std::vector<int> budgets{8, 16, 32, 64};

  HeadCollectOptions ho;
  ho.budgets = budgets;
  ho.exhaustive = true;
  ho.sampler_seed = seed;
  ho.jobs = jobs;
  const HeadTable heads = compile_head_table(collect_head_experience(calib, &lm, ho));

  const BinEdges bins = fit_bins(calibration_risks(calib));
  GateCollectOptions go;
  go.budgets = budgets;
  go.exhaustive = true;
  go.sampler_seed = seed;
  go.jobs = jobs;
  const GateTable gate = compile_gate_table(collect_gate_experience(calib, &lm, heads, bins, go));

  PlantedRun run;
  auto bin_mean = [&](int p) {
    double s = 0.0;
    int n = 0;
    for (const auto& slice : gate.tau) {
      for (int l = 0; l < gate.num_layers; ++l) {
        for (int e = 0; e < gate.n_ent; ++e) {
          s += slice[gate.flat(l, e, p)];
          ++n;
        }
      }
    }
    return s / n;
  };
  run.tau_bottom = bin_mean(0);
  run.tau_top = bin_mean(gate.n_ppl - 1);
  if (evaluation > 0) {
    EvalOptions eo;
    eo.budgets = budgets;
    eo.methods = {Method::kCompiler, Method::kTopkAccum, Method::kSinkRecent};
    eo.jobs = jobs;
    run.report = evaluate_run(test, lm, &heads, &gate, &bins, eo);
  }
  run.secs = seconds_since(t0);
  return run;
}

Outcome gate_lowers_tau(const std::vector<PlantedRun>& runs, const std::vector<std::uint64_t>& seeds) {
  bool ok = true;
  std::ostringstream os;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const bool lower = runs[i].tau_top < runs[i].tau_bottom;
    ok = ok && lower;
    os << (i ? "; " : "") << "seed " << seeds[i] << " top " << runs[i].tau_top << " bottom " << runs[i].tau_bottom;
  }
  return {ok, os.str()};
}

Outcome budget_curve(const PlantedRun& run) {
  const EvalReport& r = run.report;
  bool ok = true;
  std::ostringstream os;
  for (int b : {8, 16, 32, 64}) {
    const double c = r.aggregate(Method::kCompiler, b).mean;
    const double k = r.aggregate(Method::kTopkAccum, b).mean;
    const double s = r.aggregate(Method::kSinkRecent, b).mean;
    ok = ok && c <= k;
    if (b <= 16) ok = ok && c <= s;
    os << "B=" << b << " compiler " << c << " topk " << k << " sink " << s << "; ";
  }
  const double cp = r.aggregate(Method::kCompiler, 8).p95;
  const double kp = r.aggregate(Method::kTopkAccum, 8).p95;
  ok = ok && cp <= kp;
  os << "p95@8 compiler " << cp << " topk " << kp << "; " << run.secs << " s";
  return {ok, os.str()};
}

// ---------------------------------------------------------------------------
// 9. Rescaling one head's value norms leaves utility and selections unchanged.

Outcome scale_invariance() {
  std::mt19937_64 gen(909);
  int u_fail = 0, sel_fail = 0, cases = 0;
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const int L = 2, H = 3, T = 24, w = 6;
    std::vector<PrefillTrace> calib;
    for (int c = 0; c < 4; ++c) calib.push_back(random_trace(gen, L, H, T, w));
    const Tables tb = random_tables(gen, L, H, {4, 8, 16}, calib, 3, 2);
    const PrefillTrace& base = calib.front();
    const UtilityField f0 = compute_utility(base);
    const BudgetConfig budgets{{1 + static_cast<int>(gen() % 20), 1 + static_cast<int>(gen() % 20)}, std::nullopt};
    const Selection s0 = compress(base, tb.heads, tb.gate, tb.bins, budgets);
    for (double c : {0.1, 7.3, 100.0}) {
      ++cases;
      PrefillTrace scaled = base;
      const int slot = static_cast<int>(gen() % static_cast<std::uint64_t>(L * H));
      scaled.value_norms.row(slot) *= static_cast<float>(c);
      const UtilityField f1 = compute_utility(scaled);
      const double gap = (f1.u - f0.u).cwiseAbs().maxCoeff();
      worst = std::max(worst, gap);
      if (gap > 1e-6) ++u_fail;
      if (!(compress(scaled, tb.heads, tb.gate, tb.bins, budgets).layers == s0.layers)) ++sel_fail;
    }
  }
  std::ostringstream os;
  os << cases << " rescalings, utility violations " << u_fail << " (worst " << worst << "), selection changes "
     << sel_fail;
  return {u_fail == 0 && sel_fail == 0, os.str()};
}

// ---------------------------------------------------------------------------
// 10. The seed script yields the same bytes across runs and worker counts.

std::map<std::string, std::string> tree_bytes(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    std::ifstream in(e.path(), std::ios::binary);
    out[fs::relative(e.path(), root).generic_string()] =
        std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }
  return out;
}

Outcome reproducibility(const fs::path& work) {
  const fs::path a = work / "repro_jobs1", b = work / "repro_jobs4", c = work / "repro_jobs1_again";
  for (const auto& d : {a, b, c}) fs::remove_all(d);
  auto run = [](const fs::path& dir, int jobs) {
    const std::string cmd = std::string("bash '") + CKV_REPRODUCE_SCRIPT + "' '" + CKV_TOOL_PATH + "' '" +
                            dir.string() + "' " + std::to_string(jobs);
    return std::system(cmd.c_str());
  };
  if (run(a, 1) != 0 || run(b, 4) != 0 || run(c, 1) != 0) return {false, "seed script failed"};
  const auto ta = tree_bytes(a), tb = tree_bytes(b), tc = tree_bytes(c);
  int differing = 0;
  for (const auto& [name, bytes] : ta) {
    for (const auto* other : {&tb, &tc}) {
      const auto it = other->find(name);
      if (it == other->end() || it->second != bytes) ++differing;
    }
  }
  const bool complete = ta.count("head_table.json") && ta.count("gate_table.json") && ta.count("selection.json") &&
                        ta.count("eval.json") && ta.count("bound.json");
  std::ostringstream os;
  os << ta.size() << " files per run, differing " << differing << " (jobs 1 vs 4 and repeat)";
  return {differing == 0 && complete && ta.size() == tb.size() && ta.size() == tc.size(), os.str()};
}

}  // namespace
}  // namespace ckv

int main(int argc, char** argv) {
  CLI::App app{"ckv acceptance gate"};
  std::string work = (fs::temp_directory_path() / "ckv_acceptance").string();
  int jobs = std::max(1u, std::thread::hardware_concurrency());
  app.add_option("--work-dir", work, "Scratch directory for the seed-script runs")->capture_default_str();
  app.add_option("--jobs", jobs, "Worker threads for the planted-corpus runs")->capture_default_str();
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(work);

  int failed = 0;
  auto report = [&](int id, const char* name, const ckv::Outcome& o) {
    std::printf("%s %2d %s: %s\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str());
    std::fflush(stdout);
    if (!o.pass) ++failed;
  };
  auto guarded = [](const std::function<ckv::Outcome()>& f) {
    try {
      return f();
    } catch (const std::exception& e) {
      return ckv::Outcome{false, std::string("exception: ") + e.what()};
    }
  };

  report(1, "L1 truncation identity", guarded(ckv::l1_identity));
  report(2, "budget safety", guarded(ckv::budget_safety));
  report(3, "pipeline vs reference", guarded(ckv::pipeline_oracle));
  report(4, "compressed NLL identity", guarded(ckv::nll_identity));
  report(5, "conservative fit", guarded(ckv::cql_solver));
  report(6, "table compilation fidelity", guarded(ckv::table_fidelity));

  const std::vector<std::uint64_t> seeds{0, 1, 2};
  std::vector<ckv::PlantedRun> runs;
  std::string planted_error;
  try {
    for (std::uint64_t s : seeds) runs.push_back(ckv::planted_run(s, 100, s == 0 ? 200 : 0, jobs));
  } catch (const std::exception& e) {
    planted_error = std::string("exception: ") + e.what();
  }
  if (planted_error.empty()) {
    report(7, "risk gate lowers tau for high perplexity", ckv::gate_lowers_tau(runs, seeds));
    report(8, "budget curve vs baselines", guarded([&] { return ckv::budget_curve(runs.front()); }));
  } else {
    report(7, "risk gate lowers tau for high perplexity", {false, planted_error});
    report(8, "budget curve vs baselines", {false, planted_error});
  }

  report(9, "utility scale invariance", guarded(ckv::scale_invariance));
  report(10, "end-to-end reproducibility", guarded([&] { return ckv::reproducibility(work); }));

  std::printf("%d of 10 criteria failed\n", failed);
  return failed == 0 ? 0 : 1;
}
