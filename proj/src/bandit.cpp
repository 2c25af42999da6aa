// Copyright 2026 The ckv Authors
// SPDX-License-Identifier: Apache-2.0

#include "ckv/bandit.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "ckv/error.hpp"

namespace ckv {

namespace {

double logsumexp(const Eigen::Ref<const Eigen::RowVectorXd>& row) {
  const double m = row.maxCoeff();
  return m + std::log((row.array() - m).exp().sum());
}

/// Per-cell sufficient statistics computed in canonical record order.
struct CellStats {
  RowMatrixXd count;
  RowMatrixXd mean;
  RowMatrixXd sq_dev;  // sum of (r - mean)^2
  std::vector<int> state_count;
  int total = 0;
};

CellStats aggregate(const BanditDataset& data) {
  BanditDataset sorted = data;
  sorted.canonicalize();
  const int S = data.num_states();
  const int A = data.num_actions();
  CellStats st;
  st.count = RowMatrixXd::Zero(S, A);
  st.mean = RowMatrixXd::Zero(S, A);
  st.sq_dev = RowMatrixXd::Zero(S, A);
  st.state_count.assign(static_cast<std::size_t>(S), 0);
  st.total = static_cast<int>(sorted.records.size());

  RowMatrixXd sum = RowMatrixXd::Zero(S, A);
  for (const auto& r : sorted.records) {
    st.count(r.state, r.action) += 1.0;
    sum(r.state, r.action) += r.reward;
    st.state_count[static_cast<std::size_t>(r.state)] += 1;
  }
  for (int s = 0; s < S; ++s)
    for (int a = 0; a < A; ++a)
      if (st.count(s, a) > 0) st.mean(s, a) = sum(s, a) / st.count(s, a);
  for (const auto& r : sorted.records) {
    const double d = r.reward - st.mean(r.state, r.action);
    st.sq_dev(r.state, r.action) += d * d;
  }
  return st;
}

double objective_from_stats(const CellStats& st, const RowMatrixXd& q, double alpha) {
  double conservative = 0.0;
  double regression = 0.0;
  for (Eigen::Index s = 0; s < q.rows(); ++s) {
    const int ns = st.state_count[static_cast<std::size_t>(s)];
    if (ns == 0) continue;
    const double behavior_q = (st.count.row(s).array() * q.row(s).array()).sum() / ns;
    conservative += ns * (logsumexp(q.row(s)) - behavior_q);
    for (Eigen::Index a = 0; a < q.cols(); ++a) {
      const double n = st.count(s, a);
      if (n == 0) continue;
      const double d = q(s, a) - st.mean(s, a);
      regression += n * d * d + st.sq_dev(s, a);
    }
  }
  return (alpha * conservative + 0.5 * regression) / st.total;
}

}  // namespace

void BanditDataset::validate() const {
  if (records.empty()) throw DataError("bandit dataset has no records");
  if (state_labels.empty() || action_labels.empty()) throw DataError("empty state or action vocabulary");
  for (const auto& r : records) {
    if (r.state < 0 || r.state >= num_states()) throw DataError("state id " + std::to_string(r.state) + " out of range");
    if (r.action < 0 || r.action >= num_actions()) throw DataError("action id " + std::to_string(r.action) + " out of range");
    if (!std::isfinite(r.reward)) throw DataError("non-finite reward for state " + state_labels[static_cast<std::size_t>(r.state)]);
  }
}

void BanditDataset::canonicalize() { std::sort(records.begin(), records.end()); }

double cql_objective(const BanditDataset& data, const RowMatrixXd& q, double alpha_cql) {
  data.validate();
  return objective_from_stats(aggregate(data), q, alpha_cql);
}

QTable fit_cql(const BanditDataset& data, const CqlParams& params) {
  data.validate();
  if (!(params.alpha_cql >= 0.0)) throw ParameterError("alpha_cql must be >= 0");
  if (!(params.lr > 0.0)) throw ParameterError("lr must be > 0");
  if (params.iters < 1) throw ParameterError("iters must be >= 1");

  const CellStats st = aggregate(data);
  const int S = data.num_states();
  const int A = data.num_actions();

  // Behavior policy and regression weights per state.
  RowMatrixXd behavior = RowMatrixXd::Zero(S, A);
  for (int s = 0; s < S; ++s) {
    const int ns = st.state_count[static_cast<std::size_t>(s)];
    if (ns > 0) behavior.row(s) = st.count.row(s) / static_cast<double>(ns);
  }

  RowMatrixXd q = RowMatrixXd::Zero(S, A);
  Eigen::RowVectorXd p(A);
  for (int it = 0; it < params.iters; ++it) {
    for (int s = 0; s < S; ++s) {
      if (st.state_count[static_cast<std::size_t>(s)] == 0) continue;
      auto row = q.row(s);
      const double m = row.maxCoeff();
      p = (row.array() - m).exp();
      p /= p.sum();
      for (int a = 0; a < A; ++a) {
        const double w = behavior(s, a);
        const double grad = params.alpha_cql * (p[a] - w) + w * (row[a] - st.mean(s, a));
        row[a] -= params.lr * grad;
      }
      if (!row.allFinite()) {
        throw FitError("Q diverged at iteration " + std::to_string(it) + " in state " +
                       data.state_labels[static_cast<std::size_t>(s)]);
      }
    }
  }

  QTable out;
  out.state_labels = data.state_labels;
  out.action_labels = data.action_labels;
  out.q = std::move(q);
  out.params = params;
  out.final_loss = objective_from_stats(st, out.q, params.alpha_cql);
  out.state_counts = st.state_count;
  if (!std::isfinite(out.final_loss)) throw FitError("loss is non-finite after " + std::to_string(params.iters) + " iterations");
  return out;
}

std::vector<int> greedy_policy(const QTable& q, const std::vector<int>& preference, double tie_eps) {
  const int A = static_cast<int>(q.q.cols());
  std::vector<int> order = preference;
  if (order.empty()) {
    order.resize(static_cast<std::size_t>(A));
    std::iota(order.begin(), order.end(), 0);
  }
  if (static_cast<int>(order.size()) != A) throw ParameterError("preference must list every action once");

  std::vector<int> policy(static_cast<std::size_t>(q.q.rows()));
  for (Eigen::Index s = 0; s < q.q.rows(); ++s) {
    const double best = q.q.row(s).maxCoeff();
    for (int a : order) {
      if (q.q(s, a) >= best - tie_eps) {
        policy[static_cast<std::size_t>(s)] = a;
        break;
      }
    }
  }
  return policy;
}

nlohmann::json qtable_to_json(const QTable& q) {
  nlohmann::json j;
  j["schema_version"] = 1;
  j["state_labels"] = q.state_labels;
  j["action_labels"] = q.action_labels;
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index s = 0; s < q.q.rows(); ++s) {
    std::vector<double> row(q.q.row(s).data(), q.q.row(s).data() + q.q.cols());
    rows.push_back(row);
  }
  j["q"] = rows;
  j["state_counts"] = q.state_counts;
  j["fit"] = {{"alpha_cql", q.params.alpha_cql},
              {"lr", q.params.lr},
              {"iters", q.params.iters},
              {"seed", q.params.seed},
              {"final_loss", q.final_loss}};
  return j;
}

QTable qtable_from_json(const nlohmann::json& j) {
  QTable q;
  q.state_labels = j.at("state_labels").get<std::vector<std::string>>();
  q.action_labels = j.at("action_labels").get<std::vector<std::string>>();
  const auto& rows = j.at("q");
  q.q.resize(static_cast<Eigen::Index>(q.state_labels.size()), static_cast<Eigen::Index>(q.action_labels.size()));
  if (rows.size() != q.state_labels.size()) throw DataError("q row count does not match state labels");
  for (std::size_t s = 0; s < rows.size(); ++s) {
    const auto row = rows[s].get<std::vector<double>>();
    if (row.size() != q.action_labels.size()) throw DataError("q column count does not match action labels");
    for (std::size_t a = 0; a < row.size(); ++a) q.q(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(a)) = row[a];
  }
  q.state_counts = j.value("state_counts", std::vector<int>{});
  const auto& fit = j.at("fit");
  q.params.alpha_cql = fit.at("alpha_cql").get<double>();
  q.params.lr = fit.at("lr").get<double>();
  q.params.iters = fit.at("iters").get<int>();
  q.params.seed = fit.at("seed").get<std::uint64_t>();
  q.final_loss = fit.at("final_loss").get<double>();
  return q;
}

void save_qtable(const QTable& q, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw InputError("cannot write " + path.string());
  out << qtable_to_json(q).dump(2) << '\n';
}

QTable load_qtable(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  return qtable_from_json(nlohmann::json::parse(in));
}

}  // namespace ckv
