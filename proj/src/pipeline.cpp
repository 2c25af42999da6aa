// Copyright 2026 The ckv Authors
// SPDX-License-Identifier: Apache-2.0

#include "ckv/pipeline.hpp"

#include <algorithm>

#include "ckv/error.hpp"

namespace ckv {

Method parse_method(const std::string& name) {
  if (name == "compiler" || name == "none") return Method::kCompiler;
  if (name == "sink_recent") return Method::kSinkRecent;
  if (name == "topk" || name == "topk_accum") return Method::kTopkAccum;
  if (name == "full") return Method::kFull;
  throw ParameterError("unknown method '" + name + "'");
}

std::string method_name(Method method) {
  switch (method) {
    case Method::kCompiler: return "compiler";
    case Method::kSinkRecent: return "sink_recent";
    case Method::kTopkAccum: return "topk_accum";
    case Method::kFull: return "full";
  }
  return "unknown";
}

bool Selection::operator==(const Selection& o) const {
  if (method != o.method || layers != o.layers || provenance.size() != o.provenance.size()) return false;
  for (std::size_t i = 0; i < provenance.size(); ++i) {
    const auto& a = provenance[i];
    const auto& b = o.provenance[i];
    if (a.budget != b.budget || a.candidate_count != b.candidate_count || a.clamped != b.clamped ||
        a.fallback != b.fallback || a.tau != b.tau || a.b_ent != b.b_ent || a.b_ppl != b.b_ppl) {
      return false;
    }
  }
  return true;
}

namespace {

IndexSet all_positions(int T) {
  IndexSet all(static_cast<std::size_t>(T));
  for (int t = 0; t < T; ++t) all[static_cast<std::size_t>(t)] = t;
  return all;
}

}  // namespace

Selection compress(const PrefillTrace& trace, const HeadTable& heads, const GateTable& gate, const BinEdges& bins,
                   const BudgetConfig& budgets, const CompressOptions& options) {
  const int L = trace.num_layers;
  if (heads.num_layers != L || heads.num_heads != trace.num_heads) {
    throw CompatibilityError("head table is " + std::to_string(heads.num_layers) + "x" +
                             std::to_string(heads.num_heads) + " but trace is " + std::to_string(L) + "x" +
                             std::to_string(trace.num_heads));
  }
  if (gate.num_layers != L) {
    throw CompatibilityError("gate table has " + std::to_string(gate.num_layers) + " layers but trace has " +
                             std::to_string(L));
  }
  if (gate.n_ent != bins.n_ent || gate.n_ppl != bins.n_ppl) {
    throw CompatibilityError("gate table grid does not match the bin edges");
  }
  if (!gate.bins_hash.empty() && gate.bins_hash != bins.hash()) {
    throw CompatibilityError("gate table was compiled against different bin edges");
  }
  check_budgets(budgets, L);

  Selection sel;
  sel.method = Method::kCompiler;
  sel.risk = risk_coords(trace, &bins);
  const UtilityField field = compute_utility(trace, options.utility);
  for (int l = 0; l < L; ++l) {
    const int B = budgets.at(l);
    const Eigen::VectorXd u_hat =
        pooled_importance(field.u, trace.num_heads, l, heads.at_budget(B).row(l).transpose());
    LayerProvenance p;
    p.budget = B;
    p.tau = gate.lookup(l, sel.risk.b_ent, sel.risk.b_ppl, B);
    p.b_ent = sel.risk.b_ent;
    p.b_ppl = sel.risk.b_ppl;
    GateProvenance g;
    sel.layers.push_back(budgeted_select(u_hat, p.tau, B, &g));
    p.candidate_count = g.candidate_count;
    p.clamped = g.clamped;
    p.fallback = g.fallback;
    sel.provenance.push_back(p);
  }
  return sel;
}

Selection baseline_select(const PrefillTrace& trace, Method method, const BudgetConfig& budgets, int n_sink) {
  if (method == Method::kCompiler) throw ParameterError("the compiler method is not a baseline");
  check_budgets(budgets, trace.num_layers);
  const int T = trace.seq_len;
  Selection sel;
  sel.method = method;
  Eigen::VectorXd alpha;
  if (method == Method::kTopkAccum) alpha = window_mass(mean_attention(trace));
  for (int l = 0; l < trace.num_layers; ++l) {
    const int B = budgets.at(l);
    IndexSet s;
    if (method == Method::kFull || B >= T) {
      s = all_positions(T);
    } else if (method == Method::kSinkRecent) {
      if (B < n_sink) {
        for (int t = 0; t < B; ++t) s.push_back(t);
      } else {
        for (int t = 0; t < n_sink; ++t) s.push_back(t);
        for (int t = std::max(n_sink, T - (B - n_sink)); t < T; ++t) s.push_back(t);
      }
    } else {
      s = top_b(alpha, all_positions(T), B);
    }
    LayerProvenance p;
    p.budget = B;
    p.candidate_count = static_cast<int>(s.size());
    sel.layers.push_back(std::move(s));
    sel.provenance.push_back(p);
  }
  if (trace.has_logprobs) sel.risk = risk_coords(trace);
  return sel;
}

std::size_t CompressedCache::row_count() const {
  std::size_t n = 0;
  for (const auto& s : index_map) n += s.size();
  return n;
}

CompressedCache build_cache(const PrefillTrace& trace, const Selection& selection) {
  if (!trace.has_kv) throw DataError("trace carries no key/value vectors");
  if (static_cast<int>(selection.layers.size()) != trace.num_layers) {
    throw CompatibilityError("selection layer count does not match trace");
  }
  CompressedCache cache;
  cache.index_map = selection.layers;
  for (int l = 0; l < trace.num_layers; ++l) {
    const IndexSet& s = selection.layers[static_cast<std::size_t>(l)];
    for (Index j : s) {
      if (j < 0 || j >= trace.seq_len) throw SelectionError("index " + std::to_string(j) + " out of range");
    }
    const auto rows = Eigen::Map<const Eigen::Matrix<Index, Eigen::Dynamic, 1>>(s.data(), static_cast<Eigen::Index>(s.size()));
    for (int h = 0; h < trace.num_heads; ++h) {
      const int slot = trace.head_index(l, h);
      cache.keys.emplace_back(trace.keys[static_cast<std::size_t>(slot)](rows, Eigen::all));
      cache.values.emplace_back(trace.values[static_cast<std::size_t>(slot)](rows, Eigen::all));
    }
  }
  return cache;
}

void check_selection(const Selection& sel, int seq_len, const BudgetConfig& budgets) {
  if (sel.layers.size() != budgets.per_layer.size()) throw SelectionError("selection layer count mismatch");
  for (std::size_t l = 0; l < sel.layers.size(); ++l) {
    const IndexSet& s = sel.layers[l];
    const std::string where = "layer " + std::to_string(l);
    if (s.empty()) throw SelectionError(where + " is empty");
    if (static_cast<int>(s.size()) > budgets.per_layer[l]) throw SelectionError(where + " exceeds its budget");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i] < 0 || s[i] >= seq_len) throw SelectionError(where + " index out of range");
      if (i > 0 && s[i] <= s[i - 1]) throw SelectionError(where + " is not strictly ascending");
    }
  }
}

nlohmann::json selection_to_json(const Selection& sel) {
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t l = 0; l < sel.layers.size(); ++l) {
    const auto& p = sel.provenance[l];
    layers.push_back({{"indices", sel.layers[l]},
                      {"provenance",
                       {{"budget", p.budget},
                        {"candidate_count", p.candidate_count},
                        {"clamped", p.clamped},
                        {"fallback", p.fallback},
                        {"tau", p.tau},
                        {"b_ent", p.b_ent},
                        {"b_ppl", p.b_ppl}}}});
  }
  return {{"schema_version", 1},
          {"kind", "selection"},
          {"method", method_name(sel.method)},
          {"index_base", 0},
          {"risk",
           {{"r_struct", sel.risk.r_struct},
            {"r_sem", sel.risk.r_sem},
            {"b_ent", sel.risk.b_ent},
            {"b_ppl", sel.risk.b_ppl}}},
          {"layers", layers}};
}

Selection selection_from_json(const nlohmann::json& j) {
  if (j.value("kind", "") != "selection") throw FormatError("not a selection");
  Selection sel;
  sel.method = parse_method(j.at("method").get<std::string>());
  const auto& r = j.at("risk");
  sel.risk.r_struct = r.at("r_struct").get<double>();
  sel.risk.r_sem = r.at("r_sem").get<double>();
  sel.risk.b_ent = r.at("b_ent").get<int>();
  sel.risk.b_ppl = r.at("b_ppl").get<int>();
  for (const auto& layer : j.at("layers")) {
    sel.layers.push_back(layer.at("indices").get<IndexSet>());
    const auto& p = layer.at("provenance");
    LayerProvenance lp;
    lp.budget = p.at("budget").get<int>();
    lp.candidate_count = p.at("candidate_count").get<int>();
    lp.clamped = p.at("clamped").get<bool>();
    lp.fallback = p.at("fallback").get<bool>();
    lp.tau = p.at("tau").get<double>();
    lp.b_ent = p.at("b_ent").get<int>();
    lp.b_ppl = p.at("b_ppl").get<int>();
    sel.provenance.push_back(lp);
  }
  return sel;
}

}  // namespace ckv
