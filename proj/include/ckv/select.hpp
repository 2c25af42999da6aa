// Copyright 2026 The ckv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "ckv/types.hpp"

namespace ckv {

struct GateProvenance {
  int candidate_count = 0;
  bool clamped = false;
  bool fallback = false;
};

/// The `budget` highest-scoring positions among `candidates` under the
/// total order (score desc, position desc), returned ascending.
IndexSet top_b(const Eigen::VectorXd& score, const IndexSet& candidates, int budget);

/// Threshold gating with Top-B correction. Candidates are {t : score_t >=
/// tau}. At most `budget` candidates are returned unchanged; more are
/// clamped to the Top-B. No candidates falls back to the Top-min(B, T) of
/// all positions.
IndexSet gate_select(const Eigen::VectorXd& score, double tau, int budget, GateProvenance* provenance = nullptr);

/// gate_select, except that a budget covering the whole sequence keeps
/// every position.
IndexSet budgeted_select(const Eigen::VectorXd& score, double tau, int budget, GateProvenance* provenance = nullptr);

}  // namespace ckv
