// Copyright 2026 The ckv Authors
// SPDX-License-Identifier: Apache-2.0

#include "ckv/headtable.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "ckv/error.hpp"
#include "ckv/parallel.hpp"
#include "ckv/riskgate.hpp"
#include "ckv/rng.hpp"
#include "ckv/select.hpp"

namespace ckv {

std::vector<double> default_action_set() { return {0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5}; }

int HeadTable::slice_for(int budget) const { return nearest_budget_slice(budgets, budget); }

double HeadTable::min_weight(int layer, int budget) const { return at_budget(budget).row(layer).minCoeff(); }

HeadTable HeadTable::uniform(int num_layers, int num_heads, std::vector<int> budgets) {
  HeadTable t;
  t.num_layers = num_layers;
  t.num_heads = num_heads;
  t.action_set = default_action_set();
  t.budgets = std::move(budgets);
  t.weights.assign(t.budgets.size(), RowMatrixXd::Ones(num_layers, num_heads));
  return t;
}

Eigen::VectorXd pooled_importance(const RowMatrixXd& u, int num_heads, int layer,
                                  const Eigen::Ref<const Eigen::VectorXd>& layer_weights) {
  if (layer_weights.size() != num_heads) throw CompatibilityError("head weight count does not match head count");
  Eigen::VectorXd out = (u.row(layer * num_heads).transpose() * layer_weights[0]);
  for (int h = 1; h < num_heads; ++h) {
    out = out.cwiseMax(u.row(layer * num_heads + h).transpose() * layer_weights[h]);
  }
  return out;
}

RowMatrixXd pooled_importance(const UtilityField& field, const RowMatrixXd& weights) {
  const auto L = weights.rows();
  const auto H = static_cast<int>(weights.cols());
  if (field.u.rows() != L * H) throw CompatibilityError("head table shape does not match utility field");
  RowMatrixXd out(L, field.u.cols());
  for (Eigen::Index l = 0; l < L; ++l) {
    out.row(l) = pooled_importance(field.u, H, static_cast<int>(l), weights.row(l).transpose()).transpose();
  }
  return out;
}

std::vector<int> head_action_preference(const std::vector<double>& action_set) {
  std::vector<int> order(action_set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    const double da = std::abs(action_set[static_cast<std::size_t>(a)] - 1.0);
    const double db = std::abs(action_set[static_cast<std::size_t>(b)] - 1.0);
    if (da != db) return da < db;
    return action_set[static_cast<std::size_t>(a)] < action_set[static_cast<std::size_t>(b)];
  });
  return order;
}

namespace {

std::string action_label(double w) {
  std::ostringstream os;
  os << "w=" << w;
  return os.str();
}

void check_collect_inputs(const std::vector<PrefillTrace>& traces, const std::vector<double>& actions,
                          const std::vector<int>& budgets) {
  if (traces.empty()) throw DataError("no calibration traces");
  if (actions.empty()) throw ParameterError("action set is empty");
  if (budgets.empty()) throw ParameterError("no calibration budgets");
  for (int b : budgets) {
    if (b < 1) throw ParameterError("budgets must be >= 1");
  }
  for (const auto& t : traces) {
    if (t.num_layers != traces[0].num_layers || t.num_heads != traces[0].num_heads) {
      throw CompatibilityError("calibration traces disagree on (layers, heads)");
    }
  }
}

}  // namespace

HeadExperience collect_head_experience(const std::vector<PrefillTrace>& traces, const TinyLMWeights* lm,
                                       const HeadCollectOptions& options) {
  check_collect_inputs(traces, options.action_set, options.budgets);
  HeadExperience exp;
  exp.num_layers = traces[0].num_layers;
  exp.num_heads = traces[0].num_heads;
  exp.action_set = options.action_set;
  exp.budgets = options.budgets;
  std::sort(exp.budgets.begin(), exp.budgets.end());
  exp.budgets.erase(std::unique(exp.budgets.begin(), exp.budgets.end()), exp.budgets.end());
  exp.mode = options.mode;

  const int L = exp.num_layers;
  const int H = exp.num_heads;
  const int A = static_cast<int>(exp.action_set.size());
  const int draws = options.exhaustive ? A : (options.samples_per_state > 0 ? options.samples_per_state : A);

  std::vector<std::vector<BanditRecord>> per_trace(traces.size());
  parallel_for(traces.size(), options.jobs, [&](std::size_t i) {
    const PrefillTrace& trace = traces[i];
    const RewardContext ctx(trace, lm, options.mode, options.utility);
    const CounterRng rng(options.sampler_seed, i);
    auto& out = per_trace[i];
    for (int b = 0; b < static_cast<int>(exp.budgets.size()); ++b) {
      const int budget = exp.budgets[static_cast<std::size_t>(b)];
      for (int l = 0; l < L; ++l) {
        std::map<IndexSet, double> memo;
        for (int h = 0; h < H; ++h) {
          for (int k = 0; k < draws; ++k) {
            const auto counter = static_cast<std::uint64_t>(((b * L + l) * H + h) * draws + k);
            const int a = options.exhaustive ? k : static_cast<int>(rng.below(counter, static_cast<std::uint64_t>(A)));
            Eigen::VectorXd w = Eigen::VectorXd::Ones(H);
            w[h] = exp.action_set[static_cast<std::size_t>(a)];
            const IndexSet kept = budgeted_select(pooled_importance(ctx.utility().u, H, l, w), options.tau, budget);
            auto it = memo.find(kept);
            if (it == memo.end()) it = memo.emplace(kept, ctx.fidelity(l, kept)).first;
            out.push_back({exp.state_id(b, l, h), a, it->second});
          }
        }
      }
    }
  });

  for (int b = 0; b < static_cast<int>(exp.budgets.size()); ++b) {
    for (int l = 0; l < L; ++l) {
      for (int h = 0; h < H; ++h) {
        exp.data.state_labels.push_back("B=" + std::to_string(exp.budgets[static_cast<std::size_t>(b)]) +
                                        ",l=" + std::to_string(l) + ",h=" + std::to_string(h));
      }
    }
  }
  for (double w : exp.action_set) exp.data.action_labels.push_back(action_label(w));
  for (auto& recs : per_trace) exp.data.records.insert(exp.data.records.end(), recs.begin(), recs.end());
  exp.data.canonicalize();
  return exp;
}

HeadTable compile_head_table(const HeadExperience& exp, const CqlParams& params) {
  exp.data.validate();
  const int L = exp.num_layers;
  const int H = exp.num_heads;
  const int S = static_cast<int>(exp.budgets.size()) * L * H;
  if (exp.data.num_states() != S || exp.data.num_actions() != static_cast<int>(exp.action_set.size())) {
    throw CompatibilityError("experience vocabulary does not match its declared shape");
  }
  std::vector<int> seen(static_cast<std::size_t>(S), 0);
  for (const auto& r : exp.data.records) seen[static_cast<std::size_t>(r.state)] = 1;
  std::string missing;
  for (int s = 0; s < S; ++s) {
    if (!seen[static_cast<std::size_t>(s)]) missing += (missing.empty() ? "" : "; ") + exp.data.state_labels[static_cast<std::size_t>(s)];
  }
  if (!missing.empty()) throw CoverageError("uncovered head states: " + missing);

  const QTable q = fit_cql(exp.data, params);
  const std::vector<int> policy = greedy_policy(q, head_action_preference(exp.action_set));

  HeadTable table;
  table.num_layers = L;
  table.num_heads = H;
  table.action_set = exp.action_set;
  table.budgets = exp.budgets;
  table.cql = params;
  table.mode = exp.mode;
  table.dataset_size = static_cast<int>(exp.data.records.size());
  for (int b = 0; b < static_cast<int>(exp.budgets.size()); ++b) {
    RowMatrixXd w(L, H);
    for (int l = 0; l < L; ++l) {
      for (int h = 0; h < H; ++h) {
        w(l, h) = exp.action_set[static_cast<std::size_t>(policy[static_cast<std::size_t>(exp.state_id(b, l, h))])];
      }
    }
    table.weights.push_back(std::move(w));
  }
  return table;
}

nlohmann::json head_table_to_json(const HeadTable& t) {
  nlohmann::json slices = nlohmann::json::array();
  for (std::size_t b = 0; b < t.budgets.size(); ++b) {
    nlohmann::json rows = nlohmann::json::array();
    for (int l = 0; l < t.num_layers; ++l) {
      std::vector<double> row(static_cast<std::size_t>(t.num_heads));
      for (int h = 0; h < t.num_heads; ++h) row[static_cast<std::size_t>(h)] = t.weights[b](l, h);
      rows.push_back(row);
    }
    std::vector<double> wmin;
    for (int l = 0; l < t.num_layers; ++l) wmin.push_back(t.weights[b].row(l).minCoeff());
    slices.push_back({{"budget", t.budgets[b]}, {"weights", rows}, {"w_min", wmin}});
  }
  return {{"schema_version", 1},
          {"kind", "head_table"},
          {"num_layers", t.num_layers},
          {"num_heads", t.num_heads},
          {"action_set", t.action_set},
          {"slices", slices},
          {"meta",
           {{"alpha_cql", t.cql.alpha_cql},
            {"lr", t.cql.lr},
            {"iters", t.cql.iters},
            {"seed", t.cql.seed},
            {"reward_mode", reward_mode_name(t.mode)},
            {"dataset_size", t.dataset_size}}}};
}

HeadTable head_table_from_json(const nlohmann::json& j) {
  if (j.value("kind", "") != "head_table") throw FormatError("not a head table");
  HeadTable t;
  t.num_layers = j.at("num_layers").get<int>();
  t.num_heads = j.at("num_heads").get<int>();
  t.action_set = j.at("action_set").get<std::vector<double>>();
  for (const auto& s : j.at("slices")) {
    t.budgets.push_back(s.at("budget").get<int>());
    const auto rows = s.at("weights").get<std::vector<std::vector<double>>>();
    if (static_cast<int>(rows.size()) != t.num_layers) throw FormatError("head table layer count mismatch");
    RowMatrixXd w(t.num_layers, t.num_heads);
    for (int l = 0; l < t.num_layers; ++l) {
      if (static_cast<int>(rows[static_cast<std::size_t>(l)].size()) != t.num_heads) {
        throw FormatError("head table head count mismatch");
      }
      for (int h = 0; h < t.num_heads; ++h) w(l, h) = rows[static_cast<std::size_t>(l)][static_cast<std::size_t>(h)];
    }
    t.weights.push_back(std::move(w));
  }
  const auto& m = j.at("meta");
  t.cql.alpha_cql = m.at("alpha_cql").get<double>();
  t.cql.lr = m.at("lr").get<double>();
  t.cql.iters = m.at("iters").get<int>();
  t.cql.seed = m.at("seed").get<std::uint64_t>();
  t.mode = parse_reward_mode(m.at("reward_mode").get<std::string>());
  t.dataset_size = m.at("dataset_size").get<int>();
  return t;
}

void save_head_table(const HeadTable& table, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw InputError("cannot write " + path.string());
  out << head_table_to_json(table).dump(2) << '\n';
}

HeadTable load_head_table(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  try {
    return head_table_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

std::string head_table_csv(const HeadTable& t) {
  std::ostringstream os;
  os << "budget,layer";
  for (int h = 0; h < t.num_heads; ++h) os << ",head_" << h;
  os << '\n';
  for (std::size_t b = 0; b < t.budgets.size(); ++b) {
    for (int l = 0; l < t.num_layers; ++l) {
      os << t.budgets[b] << ',' << l;
      for (int h = 0; h < t.num_heads; ++h) os << ',' << t.weights[b](l, h);
      os << '\n';
    }
  }
  return os.str();
}

}  // namespace ckv
