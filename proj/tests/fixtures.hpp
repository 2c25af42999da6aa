// Copyright 2026 The ckv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Small hand-built inputs shared by the unit tests.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "ckv/rng.hpp"
#include "ckv/tinylm.hpp"
#include "ckv/trace.hpp"

namespace ckv::testing {

/// Window-rows trace whose rows attend uniformly over their causal prefix,
/// with unit value norms and log-probs of -1.
inline PrefillTrace uniform_trace(int L, int H, int T, int w) {
  PrefillTrace t;
  t.num_layers = L;
  t.num_heads = H;
  t.seq_len = T;
  t.head_dim = 4;
  t.window = w;
  t.mode = AttentionMode::kWindowRows;
  t.tokens.assign(static_cast<std::size_t>(T), 1u);
  t.logprobs = Eigen::VectorXf::Constant(T, -1.0f);
  t.logprobs[0] = 0.0f;
  for (int s = 0; s < L * H; ++s) {
    RowMatrixXf a = RowMatrixXf::Zero(w, T);
    for (int r = 0; r < w; ++r) {
      const int q = T - w + r;
      for (int k = 0; k <= q; ++k) a(r, k) = 1.0f / static_cast<float>(q + 1);
    }
    t.attention.push_back(a);
  }
  t.value_norms = RowMatrixXf::Ones(L * H, T);
  return t;
}

/// Random causal window-rows trace; rows are random distributions with a
/// share of exact zeros, value norms are random positive numbers.
inline PrefillTrace random_trace(std::uint64_t seed, int L, int H, int T, int w) {
  SeqRng rng(seed, 0x7e57);
  PrefillTrace t = uniform_trace(L, H, T, w);
  for (auto& a : t.attention) {
    for (int r = 0; r < w; ++r) {
      const int q = T - w + r;
      double sum = 0.0;
      std::vector<double> row(static_cast<std::size_t>(q + 1));
      for (auto& v : row) {
        v = rng.uniform() < 0.2 ? 0.0 : std::pow(rng.uniform(), 3.0);
        sum += v;
      }
      if (sum == 0.0) row[0] = sum = 1.0;
      for (int k = 0; k <= q; ++k) a(r, k) = static_cast<float>(row[static_cast<std::size_t>(k)] / sum);
    }
  }
  for (Eigen::Index i = 0; i < t.value_norms.size(); ++i) {
    t.value_norms.data()[i] = static_cast<float>(rng.uniform(0.1, 3.0));
  }
  for (int i = 1; i < T; ++i) t.logprobs[i] = static_cast<float>(-rng.uniform(0.0, 3.0));
  return t;
}

inline TinyLMConfig toy_config(std::uint64_t seed = 3) {
  TinyLMConfig c;
  c.num_layers = 2;
  c.num_heads = 2;
  c.head_dim = 4;
  c.vocab_size = 16;
  c.max_seq_len = 64;
  c.seed = seed;
  return c;
}

inline std::vector<std::uint32_t> toy_tokens(int T, int vocab, std::uint64_t seed) {
  SeqRng rng(seed, 0x70c5);
  std::vector<std::uint32_t> out(static_cast<std::size_t>(T));
  for (auto& tok : out) tok = static_cast<std::uint32_t>(rng.below(static_cast<std::uint64_t>(vocab)));
  return out;
}

inline IndexSet range(Index begin, Index end) {
  IndexSet out;
  for (Index i = begin; i < end; ++i) out.push_back(i);
  return out;
}

/// Fresh empty directory under the system temp dir, unique per test.
inline std::filesystem::path scratch_dir() {
  const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
  auto dir = std::filesystem::temp_directory_path() / "ckv_tests" /
             (std::string(info->test_suite_name()) + "." + info->name());
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace ckv::testing
