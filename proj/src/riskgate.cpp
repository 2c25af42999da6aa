// Copyright 2026 The ckv Authors
// SPDX-License-Identifier: Apache-2.0

#include "ckv/riskgate.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "ckv/hash.hpp"

namespace ckv {

double semantic_risk(const Eigen::VectorXf& logprobs, const IndexSet& window) {
  if (logprobs.size() == 0) throw DataError("trace carries no log-probabilities");
  if (window.empty()) throw ParameterError("window must not be empty");
  double sum = 0.0;
  for (Index j : window) {
    if (j < 0 || j >= logprobs.size()) throw DataError("window position " + std::to_string(j) + " has no log-probability");
    sum += static_cast<double>(logprobs[j]);
  }
  return std::exp(-sum / static_cast<double>(window.size()));
}

std::vector<double> quantile_edges(std::vector<double> values, int n_bins) {
  if (n_bins < 1) throw ParameterError("bin count must be >= 1");
  if (values.empty()) throw DataError("empty calibration set");
  std::sort(values.begin(), values.end());
  const double last = static_cast<double>(values.size() - 1);
  std::vector<double> edges;
  edges.reserve(static_cast<std::size_t>(n_bins - 1));
  for (int k = 1; k < n_bins; ++k) {
    const double pos = last * k / n_bins;
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, values.size() - 1);
    double e = values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
    if (!edges.empty() && e <= edges.back()) e = std::nextafter(edges.back(), std::numeric_limits<double>::infinity());
    edges.push_back(e);
  }
  return edges;
}

int bin_of(double value, const std::vector<double>& edges) {
  return static_cast<int>(std::upper_bound(edges.begin(), edges.end(), value) - edges.begin());
}

BinEdges fit_bins(std::span<const std::pair<double, double>> calibration, int n_ent, int n_ppl) {
  if (calibration.empty()) throw DataError("empty calibration set");
  if (n_ent < 1 || n_ppl < 1) throw ParameterError("bin counts must be >= 1");
  std::vector<double> ent, ppl;
  for (const auto& [e, p] : calibration) {
    ent.push_back(e);
    ppl.push_back(p);
  }
  BinEdges b;
  b.n_ent = n_ent;
  b.n_ppl = n_ppl;
  b.entropy = quantile_edges(ent, n_ent);
  b.ppl = quantile_edges(ppl, n_ppl);
  std::set<int> hit_e, hit_p;
  for (double e : ent) hit_e.insert(bin_of(e, b.entropy));
  for (double p : ppl) hit_p.insert(bin_of(p, b.ppl));
  b.effective_ent = static_cast<int>(hit_e.size());
  b.effective_ppl = static_cast<int>(hit_p.size());
  b.ent_collapsed = b.effective_ent < n_ent;
  b.ppl_collapsed = b.effective_ppl < n_ppl;
  b.calibration_size = static_cast<int>(calibration.size());
  return b;
}

std::string BinEdges::hash() const {
  Fnv1a h;
  h.value(n_ent);
  h.value(n_ppl);
  for (double e : entropy) h.value(e);
  for (double p : ppl) h.value(p);
  return h.hex();
}

std::pair<int, int> discretize(double r_struct, double r_sem, const BinEdges& edges) {
  return {bin_of(r_struct, edges.entropy), bin_of(r_sem, edges.ppl)};
}

RiskCoords risk_coords(const PrefillTrace& trace, const BinEdges* edges) {
  RiskCoords rc;
  rc.r_struct = structural_risk(mean_attention(trace));
  if (!trace.has_logprobs) throw DataError("trace carries no log-probabilities");
  rc.r_sem = semantic_risk(trace.logprobs, trace.window_positions());
  if (edges) std::tie(rc.b_ent, rc.b_ppl) = discretize(rc.r_struct, rc.r_sem, *edges);
  return rc;
}

std::vector<double> default_tau_grid() {
  std::vector<double> grid;
  for (int k = 80; k <= 100; ++k) grid.push_back(k / 100.0);
  return grid;
}

int nearest_budget_slice(const std::vector<int>& budgets, int budget) {
  if (budgets.empty()) throw CompatibilityError("table has no budget slices");
  int best = 0;
  for (int i = 1; i < static_cast<int>(budgets.size()); ++i) {
    const int d = std::abs(budgets[static_cast<std::size_t>(i)] - budget);
    const int bd = std::abs(budgets[static_cast<std::size_t>(best)] - budget);
    if (d < bd || (d == bd && budgets[static_cast<std::size_t>(i)] < budgets[static_cast<std::size_t>(best)])) best = i;
  }
  return best;
}

int GateTable::slice_for(int budget) const { return nearest_budget_slice(budgets, budget); }

double GateTable::lookup(int layer, int b_ent, int b_ppl, int budget) const {
  if (layer < 0 || layer >= num_layers || b_ent < 0 || b_ent >= n_ent || b_ppl < 0 || b_ppl >= n_ppl) {
    throw CompatibilityError("gate lookup (" + std::to_string(layer) + ", " + std::to_string(b_ent) + ", " +
                             std::to_string(b_ppl) + ") outside table shape");
  }
  return tau[static_cast<std::size_t>(slice_for(budget))][flat(layer, b_ent, b_ppl)];
}

GateTable GateTable::constant(int num_layers, int n_ent, int n_ppl, std::vector<int> budgets, double tau) {
  GateTable g;
  g.num_layers = num_layers;
  g.n_ent = n_ent;
  g.n_ppl = n_ppl;
  g.budgets = std::move(budgets);
  g.tau.assign(g.budgets.size(),
               std::vector<double>(static_cast<std::size_t>(num_layers * n_ent * n_ppl), tau));
  return g;
}

nlohmann::json gate_table_to_json(const GateTable& g) {
  nlohmann::json slices = nlohmann::json::array();
  for (std::size_t b = 0; b < g.budgets.size(); ++b) {
    nlohmann::json layers = nlohmann::json::array();
    for (int l = 0; l < g.num_layers; ++l) {
      nlohmann::json ent = nlohmann::json::array();
      for (int e = 0; e < g.n_ent; ++e) {
        std::vector<double> row;
        for (int p = 0; p < g.n_ppl; ++p) row.push_back(g.tau[b][g.flat(l, e, p)]);
        ent.push_back(row);
      }
      layers.push_back(ent);
    }
    slices.push_back({{"budget", g.budgets[b]}, {"tau", layers}});
  }
  return {{"schema_version", 1},
          {"kind", "gate_table"},
          {"num_layers", g.num_layers},
          {"n_ent", g.n_ent},
          {"n_ppl", g.n_ppl},
          {"slices", slices},
          {"meta",
           {{"beta", g.beta},
            {"alpha_cql", g.cql.alpha_cql},
            {"lr", g.cql.lr},
            {"iters", g.cql.iters},
            {"seed", g.cql.seed},
            {"bins_hash", g.bins_hash},
            {"dataset_size", g.dataset_size},
            {"filled_states", g.filled_states}}}};
}

GateTable gate_table_from_json(const nlohmann::json& j) {
  if (j.value("kind", "") != "gate_table") throw FormatError("not a gate table");
  GateTable g;
  g.num_layers = j.at("num_layers").get<int>();
  g.n_ent = j.at("n_ent").get<int>();
  g.n_ppl = j.at("n_ppl").get<int>();
  for (const auto& s : j.at("slices")) {
    g.budgets.push_back(s.at("budget").get<int>());
    std::vector<double> flat(static_cast<std::size_t>(g.num_layers * g.n_ent * g.n_ppl));
    const auto& layers = s.at("tau");
    if (static_cast<int>(layers.size()) != g.num_layers) throw FormatError("gate table layer count mismatch");
    for (int l = 0; l < g.num_layers; ++l) {
      const auto& ent = layers[static_cast<std::size_t>(l)];
      if (static_cast<int>(ent.size()) != g.n_ent) throw FormatError("gate table entropy-bin count mismatch");
      for (int e = 0; e < g.n_ent; ++e) {
        const auto row = ent[static_cast<std::size_t>(e)].get<std::vector<double>>();
        if (static_cast<int>(row.size()) != g.n_ppl) throw FormatError("gate table ppl-bin count mismatch");
        for (int p = 0; p < g.n_ppl; ++p) flat[g.flat(l, e, p)] = row[static_cast<std::size_t>(p)];
      }
    }
    g.tau.push_back(std::move(flat));
  }
  const auto& m = j.at("meta");
  g.beta = m.at("beta").get<double>();
  g.cql.alpha_cql = m.at("alpha_cql").get<double>();
  g.cql.lr = m.at("lr").get<double>();
  g.cql.iters = m.at("iters").get<int>();
  g.cql.seed = m.at("seed").get<std::uint64_t>();
  g.bins_hash = m.at("bins_hash").get<std::string>();
  g.dataset_size = m.at("dataset_size").get<int>();
  g.filled_states = m.at("filled_states").get<std::vector<std::string>>();
  return g;
}

namespace {

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_json(const nlohmann::json& j, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw InputError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

}  // namespace

void save_gate_table(const GateTable& table, const std::filesystem::path& path) {
  write_json(gate_table_to_json(table), path);
}

GateTable load_gate_table(const std::filesystem::path& path) { return gate_table_from_json(read_json(path)); }

std::string gate_table_csv(const GateTable& g) {
  std::ostringstream os;
  os << "budget,b_ppl,layer";
  for (int e = 0; e < g.n_ent; ++e) os << ",b_ent_" << e;
  os << '\n';
  for (std::size_t b = 0; b < g.budgets.size(); ++b) {
    for (int p = 0; p < g.n_ppl; ++p) {
      for (int l = 0; l < g.num_layers; ++l) {
        os << g.budgets[b] << ',' << p << ',' << l;
        for (int e = 0; e < g.n_ent; ++e) os << ',' << g.tau[b][g.flat(l, e, p)];
        os << '\n';
      }
    }
  }
  return os.str();
}

nlohmann::json bins_to_json(const BinEdges& b) {
  return {{"schema_version", 1},
          {"kind", "bin_edges"},
          {"n_ent", b.n_ent},
          {"n_ppl", b.n_ppl},
          {"entropy_edges", b.entropy},
          {"ppl_edges", b.ppl},
          {"effective_ent", b.effective_ent},
          {"effective_ppl", b.effective_ppl},
          {"ent_collapsed", b.ent_collapsed},
          {"ppl_collapsed", b.ppl_collapsed},
          {"calibration_size", b.calibration_size},
          {"hash", b.hash()}};
}

BinEdges bins_from_json(const nlohmann::json& j) {
  if (j.value("kind", "") != "bin_edges") throw FormatError("not a bin-edges file");
  BinEdges b;
  b.n_ent = j.at("n_ent").get<int>();
  b.n_ppl = j.at("n_ppl").get<int>();
  b.entropy = j.at("entropy_edges").get<std::vector<double>>();
  b.ppl = j.at("ppl_edges").get<std::vector<double>>();
  b.effective_ent = j.at("effective_ent").get<int>();
  b.effective_ppl = j.at("effective_ppl").get<int>();
  b.ent_collapsed = j.at("ent_collapsed").get<bool>();
  b.ppl_collapsed = j.at("ppl_collapsed").get<bool>();
  b.calibration_size = j.at("calibration_size").get<int>();
  if (static_cast<int>(b.entropy.size()) != b.n_ent - 1 || static_cast<int>(b.ppl.size()) != b.n_ppl - 1) {
    throw FormatError("bin edge counts do not match bin counts");
  }
  return b;
}

void save_bins(const BinEdges& edges, const std::filesystem::path& path) { write_json(bins_to_json(edges), path); }

BinEdges load_bins(const std::filesystem::path& path) { return bins_from_json(read_json(path)); }

}  // namespace ckv
