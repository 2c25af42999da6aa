// Copyright 2026 The ckv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

namespace ckv {

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using RowMatrixXf = RowMatrix<float>;
using RowMatrixXd = RowMatrix<double>;

/// Token positions are 0-based throughout the library and in every file
/// format it writes.
using Index = std::int64_t;

/// Sorted, duplicate-free list of token positions.
using IndexSet = std::vector<Index>;

/// One index set per layer.
using LayerSelection = std::vector<IndexSet>;

}  // namespace ckv
