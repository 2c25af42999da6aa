// Copyright 2026 The ckv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <vector>

#include "ckv/tinylm.hpp"
#include "ckv/trace.hpp"

namespace ckv {

/// Hand-built two-layer model with one retrieval head and a corpus of
/// prompts that exercise it.
///
/// Vocabulary: a sink that opens every prompt, fillers, key/value facts,
/// queries and their answers, and "magnet" tokens. Layer 0 head 0 is the
/// retrieval head: a query token attends to the fact carrying its key and
/// writes that fact's value into
/// a channel the unembedding turns into the answer. Every other head pulls
/// filler rows toward magnets and writes nothing (its output projection is
/// zero), so it collects attention mass without affecting predictions;
/// query and answer rows of those heads rest on the sink.
/// Magnets and facts carry value norms of varying size. Fillers predict a repeat of
/// themselves.
///
/// Prompt windows mix query/answer pairs (unpredictable queries, answers
/// that need the fact) with filler runs (predictable), so windows with
/// more retrieval have higher perplexity and depend on retaining facts.
struct PlantedSpec {
  int seq_len = 128;
  int window = 32;
  int min_facts = 12;
  int max_facts = 16;
  int min_magnets = 12;
  int max_magnets = 20;
  /// Attention logit of a query on its fact (and of filler rows on non-facts).
  double retrieval_logit = 10.0;
  /// Attention logit of a filler row on the weakest magnet.
  double magnet_logit = 6.0;
  /// Magnet strengths are spread over [1, 1 + magnet_spread].
  double magnet_spread = 2.0;
  /// Magnet value norm relative to a filler's in the magnet heads.
  double magnet_value = 1.0;
  /// Extra retrieval-head value norm of facts, spread over
  /// [fact_value, fact_value + fact_value_spread] by key.
  double fact_value = 1.0;
  double fact_value_spread = 1.0;
  /// Logit of the correct answer after a successful lookup.
  double answer_logit = 8.0;
  /// Logit of repeating the current filler.
  double copy_logit = 8.0;
  /// Logit of each query token after a filler.
  double query_logit = 2.0;
  std::uint64_t seed = 0;
};

inline constexpr int kPlantedFillers = 64;
inline constexpr int kPlantedKeys = 20;
inline constexpr int kPlantedValues = 8;
inline constexpr int kPlantedMagnetTypes = 16;
/// Token id of the sink that opens every planted prompt.
inline constexpr int kPlantedSink = kPlantedFillers + kPlantedKeys * kPlantedValues + kPlantedKeys + kPlantedValues + kPlantedMagnetTypes;

TinyLMWeights planted_model(const PlantedSpec& spec);

/// One prompt; `retrieval_share` in [0, 1] is the fraction of window
/// segments that are query/answer pairs.
std::vector<std::uint32_t> planted_prompt(const PlantedSpec& spec, std::uint64_t index, double retrieval_share);

/// `count` prompts with retrieval shares cycling through {0, 1/4, ..., 1},
/// each prefilled into a full-mode trace.
std::vector<PrefillTrace> planted_corpus(const TinyLMWeights& model, const PlantedSpec& spec, int count,
                                         int jobs = 1);

}  // namespace ckv
