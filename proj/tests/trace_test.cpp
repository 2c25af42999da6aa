// Copyright 2026 The ckv Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <fstream>

#include <gtest/gtest.h>

#include "ckv/error.hpp"
#include "ckv/riskgate.hpp"
#include "ckv/trace.hpp"
#include "ckv/utility.hpp"
#include "fixtures.hpp"

namespace ckv {
namespace {

using testing::scratch_dir;

SyntheticSpec spec_of(Regime regime, int T, int w, std::uint64_t seed = 1) {
  SyntheticSpec s;
  s.num_layers = 2;
  s.num_heads = 3;
  s.seq_len = T;
  s.window = w;
  s.regime = regime;
  s.seed = seed;
  return s;
}

void write_bytes(const std::filesystem::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

TEST(Trace, SaveLoadRoundTrip) {
  auto spec = spec_of(Regime::kMixed, 12, 5);
  spec.with_kv = true;
  const PrefillTrace t = gen_synthetic(spec);
  const auto path = scratch_dir() / "t.ckvt";
  save_trace(t, path);
  EXPECT_EQ(load_trace(path), t);
}

TEST(Trace, FullModeRoundTrip) {
  PrefillTrace t = testing::uniform_trace(1, 2, 6, 6);
  t.mode = AttentionMode::kFull;
  ASSERT_TRUE(validate_trace(t).ok());
  EXPECT_EQ(decode_trace(encode_trace(t)), t);
}

TEST(Trace, RowSumViolationNamesLocation) {
  PrefillTrace t = testing::uniform_trace(2, 2, 8, 4);
  t.attention[static_cast<std::size_t>(t.head_index(1, 0))].row(2) *= 0.8f;
  const auto path = scratch_dir() / "bad.ckvt";
  save_trace(t, path);
  try {
    load_trace(path);
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("attention[l=1][h=0][row=2]"), std::string::npos) << e.what();
  }
}

TEST(Trace, WindowRowsShape) {
  const PrefillTrace t = gen_synthetic(spec_of(Regime::kDiffuse, 8, 4));
  for (const auto& a : t.attention) {
    EXPECT_EQ(a.rows(), 4);
    EXPECT_EQ(a.cols(), 8);
  }
  EXPECT_EQ(t.window_positions(), (IndexSet{4, 5, 6, 7}));
}

TEST(Trace, SyntheticTracesValidate) {
  for (Regime r : {Regime::kConcentrated, Regime::kDiffuse, Regime::kMixed}) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      auto spec = spec_of(r, 20, 7, seed);
      spec.with_kv = seed % 2 == 0;
      EXPECT_TRUE(validate_trace(gen_synthetic(spec)).ok()) << regime_name(r) << " seed " << seed;
    }
  }
}

TEST(Trace, NegativeValueNormIsOneViolation) {
  PrefillTrace t = testing::uniform_trace(2, 2, 8, 4);
  t.value_norms(t.head_index(1, 1), 5) = -0.5f;
  const auto report = validate_trace(t);
  ASSERT_EQ(report.violations.size(), 1u);
  EXPECT_EQ(report.violations[0].path, "value_norms[l=1][h=1][t=5]");
}

TEST(Trace, NonCausalEntryIsOneViolation) {
  PrefillTrace t = testing::uniform_trace(1, 1, 8, 8);
  t.mode = AttentionMode::kFull;
  // Move mass from key 2 to key 5 so the row still sums to one.
  RowMatrixXf& a = t.attention[0];
  a(2, 2) -= 0.1f;
  a(2, 5) = 0.1f;
  const auto report = validate_trace(t);
  ASSERT_EQ(report.violations.size(), 1u);
  EXPECT_NE(report.violations[0].message.find("after query position 2"), std::string::npos);
}

TEST(Trace, OtherInvariants) {
  PrefillTrace t = testing::uniform_trace(1, 1, 6, 3);
  t.logprobs[3] = 0.5f;
  t.tokens.pop_back();
  const auto report = validate_trace(t);
  EXPECT_EQ(report.violations.size(), 2u);
  PrefillTrace bad_window = testing::uniform_trace(1, 1, 6, 3);
  bad_window.window = 7;
  EXPECT_FALSE(validate_trace(bad_window).ok());
}

TEST(Trace, DiffuseLastRowIsUniform) {
  auto spec = spec_of(Regime::kDiffuse, 16, 1);
  spec.jitter = 0.0;
  const PrefillTrace t = gen_synthetic(spec);
  for (const auto& a : t.attention) {
    for (int k = 0; k < 16; ++k) EXPECT_NEAR(a(0, k), 1.0 / 16, 1e-7);
  }
  EXPECT_NEAR(structural_risk(mean_attention(t)), std::log(16.0), 1e-6);
}

TEST(Trace, ConcentratedOnOneKeyHasZeroEntropy) {
  SyntheticSpec spec = spec_of(Regime::kConcentrated, 16, 6);
  spec.num_layers = 1;
  spec.num_heads = 1;
  spec.peak_mass = 1.0;
  const PrefillTrace t = gen_synthetic(spec);
  EXPECT_NEAR(structural_risk(mean_attention(t)), 0.0, 1e-12);
}

TEST(Trace, SyntheticIsDeterministic) {
  auto spec = spec_of(Regime::kMixed, 24, 8, 42);
  spec.with_kv = true;
  EXPECT_EQ(encode_trace(gen_synthetic(spec)), encode_trace(gen_synthetic(spec)));
  auto other = spec;
  other.seed = 43;
  EXPECT_NE(encode_trace(gen_synthetic(spec)), encode_trace(gen_synthetic(other)));
}

TEST(Trace, SyntheticRejectsWindowLongerThanSequence) {
  EXPECT_THROW(gen_synthetic(spec_of(Regime::kMixed, 4, 5)), ParameterError);
}

TEST(Trace, HeaderLayoutIsLittleEndian) {
  PrefillTrace t = testing::uniform_trace(2, 3, 5, 2);
  const auto bytes = encode_trace(t);
  const std::vector<std::uint8_t> header{'C', 'K', 'V', 'T', 1, 0,  // magic, version
                                         2, 0, 0, 0,  3, 0, 0, 0,  5, 0, 0, 0,  4, 0, 0, 0,  2, 0, 0, 0,
                                         0,  // window rows
                                         1}; // logprobs, no K/V
  ASSERT_GE(bytes.size(), header.size());
  EXPECT_TRUE(std::equal(header.begin(), header.end(), bytes.begin()));
  // tokens, logprobs, attention, value norms; 4 bytes each.
  EXPECT_EQ(bytes.size(), header.size() + 4u * (5 + 5 + 6 * 2 * 5 + 6 * 5));
  // First token id 1 as u32 LE.
  EXPECT_EQ(bytes[header.size()], 1);
  EXPECT_EQ(bytes[header.size() + 1], 0);
}

TEST(Trace, DecodeErrors) {
  const auto bytes = encode_trace(gen_synthetic(spec_of(Regime::kMixed, 10, 4)));
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_trace(bad_magic), FormatError);
  auto bad_version = bytes;
  bad_version[4] = 9;
  EXPECT_THROW(decode_trace(bad_version), FormatError);
  auto bad_flags = bytes;
  bad_flags[27] = 0x80;
  EXPECT_THROW(decode_trace(bad_flags), FormatError);
  for (std::size_t cut : {std::size_t{3}, std::size_t{20}, bytes.size() / 2, bytes.size() - 1}) {
    const std::vector<std::uint8_t> truncated(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
    EXPECT_THROW(decode_trace(truncated), Error) << cut;
  }
  const std::vector<std::uint8_t> half(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(bytes.size() / 2));
  EXPECT_THROW(decode_trace(half), TruncationError);
  auto trailing = bytes;
  trailing.push_back(0);
  EXPECT_THROW(decode_trace(trailing), FormatError);
}

TEST(Trace, LoadMissingFileIsInputError) {
  EXPECT_THROW(load_trace(scratch_dir() / "absent.ckvt"), InputError);
}

TEST(Trace, LoadTruncatedFileIsTruncationError) {
  const auto bytes = encode_trace(testing::uniform_trace(1, 1, 8, 4));
  const auto path = scratch_dir() / "cut.ckvt";
  write_bytes(path, std::vector<std::uint8_t>(bytes.begin(), bytes.end() - 6));
  EXPECT_THROW(load_trace(path), TruncationError);
}

TEST(Trace, ToWindowRowsKeepsTheLastRows) {
  PrefillTrace t = testing::uniform_trace(1, 2, 6, 6);
  t.mode = AttentionMode::kFull;
  t.window = 2;
  const PrefillTrace w = to_window_rows(t);
  EXPECT_EQ(w.mode, AttentionMode::kWindowRows);
  ASSERT_TRUE(validate_trace(w).ok());
  EXPECT_EQ(w.attention[1], t.attention[1].bottomRows(2));
  EXPECT_EQ(to_window_rows(w), w);
}

TEST(Trace, BudgetChecks) {
  EXPECT_NO_THROW(check_budgets(BudgetConfig::uniform(3, 4), 3));
  EXPECT_THROW(check_budgets(BudgetConfig::uniform(2, 4), 3), ParameterError);
  EXPECT_THROW(check_budgets(BudgetConfig{{4, 0}, std::nullopt}, 2), ParameterError);
}

TEST(Trace, RegimeNames) {
  for (Regime r : {Regime::kConcentrated, Regime::kDiffuse, Regime::kMixed}) {
    EXPECT_EQ(parse_regime(regime_name(r)), r);
  }
  EXPECT_THROW(parse_regime("sharp"), ParameterError);
}

}  // namespace
}  // namespace ckv
