// Copyright 2026 The ckv Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "ckv/bandit.hpp"
#include "ckv/error.hpp"

namespace ckv {
namespace {

BanditDataset empty_dataset(int states, int actions) {
  BanditDataset d;
  for (int s = 0; s < states; ++s) d.state_labels.push_back("s" + std::to_string(s));
  for (int a = 0; a < actions; ++a) d.action_labels.push_back("a" + std::to_string(a));
  return d;
}

// Every cell observed 1..4 times with rewards scattered around a cell mean.
BanditDataset dense_dataset(std::uint64_t seed, int states, int actions) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  BanditDataset d = empty_dataset(states, actions);
  for (int s = 0; s < states; ++s) {
    for (int a = 0; a < actions; ++a) {
      const double centre = u(gen);
      const int n = 1 + static_cast<int>(gen() % 4);
      for (int k = 0; k < n; ++k) d.records.push_back({s, a, centre + 0.3 * u(gen)});
    }
  }
  return d;
}

TEST(Bandit, ZeroPenaltyRecoversCellMeans) {
  const BanditDataset d = dense_dataset(1, 5, 4);
  CqlParams p;
  p.alpha_cql = 0.0;
  const QTable q = fit_cql(d, p);
  std::vector<std::vector<double>> sum(5, std::vector<double>(4, 0.0)), n = sum;
  for (const auto& r : d.records) {
    sum[static_cast<std::size_t>(r.state)][static_cast<std::size_t>(r.action)] += r.reward;
    n[static_cast<std::size_t>(r.state)][static_cast<std::size_t>(r.action)] += 1.0;
  }
  for (int s = 0; s < 5; ++s) {
    for (int a = 0; a < 4; ++a) {
      EXPECT_NEAR(q.q(s, a), sum[static_cast<std::size_t>(s)][static_cast<std::size_t>(a)] /
                                 n[static_cast<std::size_t>(s)][static_cast<std::size_t>(a)], 1e-3);
    }
  }
}

TEST(Bandit, UnobservedStatesStayZero) {
  BanditDataset d = empty_dataset(3, 2);
  d.records = {{0, 1, 0.7}};
  const QTable q = fit_cql(d);
  EXPECT_EQ(q.q.row(1), Eigen::RowVector2d::Zero());
  EXPECT_EQ(q.q.row(2), Eigen::RowVector2d::Zero());
  EXPECT_EQ(q.state_counts, (std::vector<int>{1, 0, 0}));
}

TEST(Bandit, PenaltySuppressesUnobservedActions) {
  BanditDataset d = empty_dataset(2, 3);
  d.records = {{0, 0, 0.5}, {0, 0, 0.3}, {0, 1, 0.2}, {1, 2, -0.1}};
  double last0 = 0.0;
  double last1 = 0.0;
  for (double alpha : {0.0, 0.1, 0.5, 1.0, 2.0}) {
    CqlParams p;
    p.alpha_cql = alpha;
    const QTable q = fit_cql(d, p);
    EXPECT_LE(q.q(0, 2), last0 + 1e-12);
    EXPECT_LE(q.q(1, 0), last1 + 1e-12);
    last0 = q.q(0, 2);
    last1 = q.q(1, 0);
    if (alpha > 0.0) {
      EXPECT_LT(q.q(0, 2), q.q(0, 1));
      EXPECT_LT(q.q(1, 0), q.q(1, 2));
    }
  }
  EXPECT_LT(last0, 0.0);
}

TEST(Bandit, FitIsPermutationInvariant) {
  BanditDataset d = dense_dataset(7, 4, 3);
  const QTable a = fit_cql(d);
  std::mt19937_64 gen(3);
  for (int k = 0; k < 5; ++k) {
    std::shuffle(d.records.begin(), d.records.end(), gen);
    const QTable b = fit_cql(d);
    EXPECT_EQ(a.q, b.q);
    EXPECT_EQ(a.final_loss, b.final_loss);
  }
}

TEST(Bandit, FitLowersTheObjective) {
  const BanditDataset d = dense_dataset(2, 3, 3);
  const QTable q = fit_cql(d);
  EXPECT_LT(q.final_loss, cql_objective(d, RowMatrixXd::Zero(3, 3), 1.0));
  EXPECT_DOUBLE_EQ(q.final_loss, cql_objective(d, q.q, 1.0));
}

TEST(Bandit, ObjectiveMatchesDefinition) {
  BanditDataset d = empty_dataset(1, 2);
  d.records = {{0, 0, 1.0}, {0, 0, 0.0}, {0, 1, 2.0}};
  RowMatrixXd q(1, 2);
  q << 0.5, 1.0;
  const double lse = std::log(std::exp(0.5) + std::exp(1.0));
  const double behavior = (2 * 0.5 + 1.0) / 3;
  const double regression = (0.25 + 0.25 + 1.0) / 3;
  EXPECT_NEAR(cql_objective(d, q, 0.7), 0.7 * (lse - behavior) + 0.5 * regression, 1e-12);
}

TEST(Bandit, GreedyPolicy) {
  QTable q;
  q.q.resize(3, 3);
  q.q << 0.1, 0.9, 0.3,
         0.5, 0.5, 0.5,
         0.2, 0.7, 0.7;
  EXPECT_EQ(greedy_policy(q), (std::vector<int>{1, 0, 1}));
  EXPECT_EQ(greedy_policy(q, {2, 0, 1}), (std::vector<int>{1, 2, 2}));
  EXPECT_THROW(greedy_policy(q, {0, 1}), ParameterError);
}

TEST(Bandit, GreedyMatchesScan) {
  QTable q;
  q.q = RowMatrixXd::Random(50, 6);
  const auto policy = greedy_policy(q);
  for (int s = 0; s < 50; ++s) {
    int best = 0;
    for (int a = 1; a < 6; ++a) {
      if (q.q(s, a) > q.q(s, best)) best = a;
    }
    EXPECT_EQ(policy[static_cast<std::size_t>(s)], best);
  }
}

TEST(Bandit, Errors) {
  BanditDataset d = empty_dataset(2, 2);
  EXPECT_THROW(fit_cql(d), DataError);
  d.records = {{0, 0, std::nan("")}};
  EXPECT_THROW(fit_cql(d), DataError);
  d.records = {{0, 2, 1.0}};
  EXPECT_THROW(fit_cql(d), DataError);
  d.records = {{0, 1, 1.0}};
  CqlParams p;
  p.alpha_cql = -1.0;
  EXPECT_THROW(fit_cql(d, p), ParameterError);
  p = CqlParams{};
  p.iters = 0;
  EXPECT_THROW(fit_cql(d, p), ParameterError);
}

TEST(Bandit, DivergenceIsFitError) {
  BanditDataset d = empty_dataset(1, 2);
  d.records = {{0, 0, 1.0}};
  CqlParams p;
  p.lr = 100.0;
  p.iters = 5000;
  EXPECT_THROW(fit_cql(d, p), FitError);
}

TEST(Bandit, JsonRoundTrip) {
  const QTable q = fit_cql(dense_dataset(4, 2, 3));
  const QTable r = qtable_from_json(qtable_to_json(q));
  EXPECT_EQ(r.q, q.q);
  EXPECT_EQ(r.state_labels, q.state_labels);
  EXPECT_EQ(r.final_loss, q.final_loss);
  EXPECT_EQ(r.params.iters, q.params.iters);
}

}  // namespace
}  // namespace ckv
