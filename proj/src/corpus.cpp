// Copyright 2026 The ckv Authors
// SPDX-License-Identifier: Apache-2.0

#include "ckv/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ckv/error.hpp"
#include "ckv/parallel.hpp"
#include "ckv/rng.hpp"

namespace ckv {

namespace {

constexpr int kHeads = 4;
constexpr int kHeadDim = 24;
constexpr int kModelDim = kHeads * kHeadDim;

// Token ids.
constexpr int kFactBase = kPlantedFillers;
constexpr int kQueryBase = kFactBase + kPlantedKeys * kPlantedValues;
constexpr int kAnswerBase = kQueryBase + kPlantedKeys;
constexpr int kMagnetBase = kAnswerBase + kPlantedValues;
constexpr int kSink = kMagnetBase + kPlantedMagnetTypes;
constexpr int kVocab = kSink + 1;

// Residual dimensions.
constexpr int kDimFactKey = 0;
constexpr int kDimValue = kDimFactKey + kPlantedKeys;
constexpr int kDimQueryKey = kDimValue + kPlantedValues;
constexpr int kDimNonFact = kDimQueryKey + kPlantedKeys;
constexpr int kDimNonQuery = kDimNonFact + 1;
constexpr int kDimConst = kDimNonQuery + 1;
constexpr int kDimMagnet = kDimConst + 1;
constexpr int kDimFiller = kDimMagnet + 1;
constexpr int kDimRetrieved = kDimFiller + 1;
constexpr int kDimQA = kDimRetrieved + kPlantedValues;
constexpr int kDimSink = kDimQA + 1;
constexpr int kDimFactNorm = kDimSink + 1;
constexpr int kDimCode = kDimFactNorm + 1;
constexpr int kDimNonMagnet = kModelDim - 1;
constexpr int kCodeDims = kDimNonMagnet - kDimCode;
static_assert(kCodeDims >= 16, "residual too narrow for filler codes");

int fact_token(int key, int value) { return kFactBase + key * kPlantedValues + value; }

double fact_strength(const PlantedSpec& spec, int key) {
  return spec.fact_value + spec.fact_value_spread * key / (kPlantedKeys - 1);
}

double magnet_strength(const PlantedSpec& spec, int type) {
  return 1.0 + spec.magnet_spread * type / (kPlantedMagnetTypes - 1);
}

/// Coordinate `dim` of the RMS-normalized embedding of `token`.
double normed(const TinyLMWeights& w, int token, int dim) {
  const Eigen::RowVectorXd x = w.embedding.row(token);
  return x[dim] / std::sqrt(x.squaredNorm() / static_cast<double>(x.size()) + kRmsEps);
}

}  // namespace

TinyLMWeights planted_model(const PlantedSpec& spec) {
  TinyLMConfig c;
  c.num_layers = 2;
  c.num_heads = kHeads;
  c.head_dim = kHeadDim;
  c.vocab_size = kVocab;
  c.max_seq_len = std::max(spec.seq_len, 1);
  c.ffn_dim = 1;
  c.pos_scale = 0.0;
  c.seed = spec.seed;
  TinyLMWeights w = zero_weights(c);
  RowMatrixXd& E = w.embedding;

  const CounterRng codes(spec.seed, 0xc0de);
  for (int f = 0; f < kPlantedFillers; ++f) {
    for (int d : {kDimNonFact, kDimNonQuery, kDimConst, kDimFiller, kDimNonMagnet}) E(f, d) = 1.0;
    for (int i = 0; i < kCodeDims; ++i) {
      E(f, kDimCode + i) = codes.uniform(static_cast<std::uint64_t>(f * kCodeDims + i)) < 0.5 ? -1.0 : 1.0;
    }
  }
  for (int k = 0; k < kPlantedKeys; ++k) {
    for (int v = 0; v < kPlantedValues; ++v) {
      const int t = fact_token(k, v);
      for (int d : {kDimFactKey + k, kDimValue + v, kDimNonQuery, kDimConst, kDimNonMagnet}) E(t, d) = 1.0;
      E(t, kDimFactNorm) = fact_strength(spec, k);
    }
    for (int d : {kDimQueryKey + k, kDimNonFact, kDimConst, kDimNonMagnet, kDimQA}) E(kQueryBase + k, d) = 1.0;
  }
  for (int v = 0; v < kPlantedValues; ++v) {
    for (int d : {kDimNonFact, kDimNonQuery, kDimConst, kDimNonMagnet, kDimQA}) E(kAnswerBase + v, d) = 1.0;
  }
  for (int d : {kDimNonFact, kDimNonQuery, kDimConst, kDimNonMagnet, kDimSink}) E(kSink, d) = 1.0;
  for (int m = 0; m < kPlantedMagnetTypes; ++m) {
    for (int d : {kDimNonFact, kDimNonQuery, kDimConst}) E(kMagnetBase + m, d) = 1.0;
    E(kMagnetBase + m, kDimMagnet) = magnet_strength(spec, m);
  }

  const double scale = std::sqrt(static_cast<double>(kHeadDim));
  // Retrieval head: layer 0, head 0.
  {
    LayerWeights& lw = w.layers[0];
    const double hq = normed(w, kQueryBase, kDimQueryKey);
    const double hk = normed(w, fact_token(0, 0), kDimFactKey);
    const double s = std::sqrt(spec.retrieval_logit * scale / (hq * hk));
    for (int k = 0; k < kPlantedKeys; ++k) {
      lw.wq(kDimQueryKey + k, k) = s * std::sqrt(hk / hq);
      lw.wk(kDimFactKey + k, k) = s * std::sqrt(hq / hk);
    }
    const double fq = normed(w, 0, kDimNonQuery);
    const double fk = normed(w, 0, kDimNonFact);
    lw.wq(kDimNonQuery, kPlantedKeys) = std::sqrt(spec.retrieval_logit * scale / (fq * fk)) * std::sqrt(fk / fq);
    lw.wk(kDimNonFact, kPlantedKeys) = std::sqrt(spec.retrieval_logit * scale / (fq * fk)) * std::sqrt(fq / fk);
    for (int v = 0; v < kPlantedValues; ++v) {
      lw.wv(kDimValue + v, v) = 1.0;
      lw.wo(v, kDimRetrieved + v) = 1.0;
    }
    // Unread value column: gives facts of higher keys larger value norms.
    lw.wv(kDimFactNorm, kPlantedValues) = 1.0;
  }
  // Magnet heads: every other head of both layers.
  const double fq = normed(w, 0, kDimFiller);
  const double mk = normed(w, kMagnetBase, kDimMagnet);
  const double ms = std::sqrt(spec.magnet_logit * scale / (fq * mk));
  const double filler_norm = normed(w, 0, kDimNonMagnet);
  const double magnet_const = normed(w, kMagnetBase, kDimConst);
  const double aq = normed(w, kAnswerBase, kDimQA);
  const double sk = normed(w, kSink, kDimSink);
  const double ss = std::sqrt(spec.retrieval_logit * scale / (aq * sk));
  for (int l = 0; l < 2; ++l) {
    for (int h = (l == 0 ? 1 : 0); h < kHeads; ++h) {
      LayerWeights& lw = w.layers[static_cast<std::size_t>(l)];
      const int base = h * kHeadDim;
      lw.wq(kDimFiller, base) = ms * std::sqrt(mk / fq);
      lw.wk(kDimMagnet, base) = ms * std::sqrt(fq / mk);
      lw.wv(kDimNonMagnet, base) = 1.0;
      lw.wv(kDimConst, base + 1) = spec.magnet_value * filler_norm / magnet_const;
      // Query and answer rows park their mass on the sink.
      lw.wq(kDimQA, base + 2) = ss * std::sqrt(sk / aq);
      lw.wk(kDimSink, base + 2) = ss * std::sqrt(aq / sk);
    }
  }

  // Unembedding, calibrated on the final residual of a query row whose
  // lookup succeeded (value 0 retrieved at full strength).
  {
    Eigen::RowVectorXd x = E.row(kQueryBase);
    x[kDimRetrieved] += normed(w, fact_token(0, 0), kDimValue);
    const double hr = x[kDimRetrieved] / std::sqrt(x.squaredNorm() / kModelDim + kRmsEps);
    for (int v = 0; v < kPlantedValues; ++v) w.unembedding(kDimRetrieved + v, kAnswerBase + v) = spec.answer_logit / hr;
  }
  {
    const double hc = normed(w, 0, kDimCode);
    const double per = spec.copy_logit / (kCodeDims * std::abs(hc));
    for (int f = 0; f < kPlantedFillers; ++f) {
      for (int i = 0; i < kCodeDims; ++i) w.unembedding(kDimCode + i, f) = per * E(f, kDimCode + i);
    }
    const double hconst = normed(w, 0, kDimConst);
    for (int k = 0; k < kPlantedKeys; ++k) w.unembedding(kDimConst, kQueryBase + k) = spec.query_logit / hconst;
  }
  return w;
}

std::vector<std::uint32_t> planted_prompt(const PlantedSpec& spec, std::uint64_t index, double retrieval_share) {
  const int T = spec.seq_len;
  const int W = spec.window;
  const int P = T - W;
  if (W < 2 || P < kPlantedKeys + spec.max_magnets + 4) throw ParameterError("planted prompt is too short");
  if (spec.min_facts < 1 || spec.max_facts > kPlantedKeys || spec.min_facts > spec.max_facts ||
      spec.min_magnets < 0 || spec.min_magnets > spec.max_magnets) {
    throw ParameterError("invalid planted fact or magnet counts");
  }
  SeqRng rng(spec.seed, 0x9e0000 + index);
  auto pick = [&](int lo, int hi) { return lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi - lo + 1))); };

  std::vector<std::uint32_t> tokens;
  tokens.reserve(static_cast<std::size_t>(T));
  tokens.push_back(static_cast<std::uint32_t>(kSink));
  // Prefix: filler runs, with facts and magnets dropped at random slots.
  while (static_cast<int>(tokens.size()) < P) {
    const int f = pick(0, kPlantedFillers - 1);
    const int run = pick(2, 6);
    for (int i = 0; i < run && static_cast<int>(tokens.size()) < P; ++i) tokens.push_back(static_cast<std::uint32_t>(f));
  }
  const int n_facts = pick(spec.min_facts, spec.max_facts);
  const int n_magnets = pick(spec.min_magnets, spec.max_magnets);
  std::vector<int> slots(static_cast<std::size_t>(P - 2));
  std::iota(slots.begin(), slots.end(), 2);
  for (std::size_t i = 0; i + 1 < slots.size(); ++i) {
    std::swap(slots[i], slots[i + rng.below(slots.size() - i)]);
  }
  std::vector<int> keys(kPlantedKeys);
  std::iota(keys.begin(), keys.end(), 0);
  for (std::size_t i = 0; i + 1 < keys.size(); ++i) std::swap(keys[i], keys[i + rng.below(keys.size() - i)]);
  keys.resize(static_cast<std::size_t>(n_facts));
  std::vector<int> value_of(kPlantedKeys, -1);
  std::size_t s = 0;
  for (int k : keys) {
    value_of[static_cast<std::size_t>(k)] = pick(0, kPlantedValues - 1);
    tokens[static_cast<std::size_t>(slots[s++])] = static_cast<std::uint32_t>(fact_token(k, value_of[static_cast<std::size_t>(k)]));
  }
  for (int m = 0; m < n_magnets; ++m) {
    tokens[static_cast<std::size_t>(slots[s++])] = static_cast<std::uint32_t>(kMagnetBase + pick(0, kPlantedMagnetTypes - 1));
  }

  // Window: query/answer pairs and filler runs.
  while (static_cast<int>(tokens.size()) < T) {
    if (rng.uniform() < retrieval_share) {
      const int k = keys[rng.below(keys.size())];
      tokens.push_back(static_cast<std::uint32_t>(kQueryBase + k));
      if (static_cast<int>(tokens.size()) < T) {
        tokens.push_back(static_cast<std::uint32_t>(kAnswerBase + value_of[static_cast<std::size_t>(k)]));
      }
      if (static_cast<int>(tokens.size()) < T) tokens.push_back(static_cast<std::uint32_t>(pick(0, kPlantedFillers - 1)));
    } else {
      const int f = pick(0, kPlantedFillers - 1);
      const int run = pick(6, 12);
      for (int i = 0; i < run && static_cast<int>(tokens.size()) < T; ++i) tokens.push_back(static_cast<std::uint32_t>(f));
    }
  }
  return tokens;
}

std::vector<PrefillTrace> planted_corpus(const TinyLMWeights& model, const PlantedSpec& spec, int count, int jobs) {
  if (count < 1) throw ParameterError("corpus size must be >= 1");
  std::vector<PrefillTrace> traces(static_cast<std::size_t>(count));
  parallel_for(traces.size(), jobs, [&](std::size_t i) {
    const double share = static_cast<double>(i % 5) / 4.0;
    traces[i] = prefill(model, planted_prompt(spec, i, share), spec.window);
  });
  return traces;
}

}  // namespace ckv
