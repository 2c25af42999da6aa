// Copyright 2026 The ckv Authors
// SPDX-License-Identifier: Apache-2.0

#include "ckv/tinylm.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

#include "ckv/error.hpp"
#include "ckv/rng.hpp"

namespace ckv {

void TinyLMConfig::validate() const {
  if (num_layers < 1 || num_heads < 1 || head_dim < 1 || vocab_size < 1 || max_seq_len < 1 || ffn_dim < 0) {
    throw ParameterError("tinylm dimensions must be positive");
  }
  if (!std::isfinite(pos_scale)) throw ParameterError("pos_scale must be finite");
}

bool TinyLMWeights::operator==(const TinyLMWeights& o) const {
  auto same = [](const RowMatrixXd& a, const RowMatrixXd& b) {
    return a.rows() == b.rows() && a.cols() == b.cols() && a == b;
  };
  if (config.num_layers != o.config.num_layers || config.num_heads != o.config.num_heads ||
      config.head_dim != o.config.head_dim || config.vocab_size != o.config.vocab_size ||
      config.max_seq_len != o.config.max_seq_len || config.ffn_dim != o.config.ffn_dim ||
      config.pos_scale != o.config.pos_scale || config.seed != o.config.seed) {
    return false;
  }
  if (!same(embedding, o.embedding) || !same(unembedding, o.unembedding) || layers.size() != o.layers.size()) {
    return false;
  }
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& a = layers[l];
    const auto& b = o.layers[l];
    if (!same(a.wq, b.wq) || !same(a.wk, b.wk) || !same(a.wv, b.wv) || !same(a.wo, b.wo) || !same(a.w1, b.w1) ||
        !same(a.w2, b.w2)) {
      return false;
    }
  }
  return true;
}

TinyLMWeights zero_weights(const TinyLMConfig& config) {
  config.validate();
  const int D = config.model_dim();
  const int F = config.hidden_dim();
  TinyLMWeights w;
  w.config = config;
  w.embedding = RowMatrixXd::Zero(config.vocab_size, D);
  w.layers.resize(static_cast<std::size_t>(config.num_layers));
  for (auto& layer : w.layers) {
    layer.wq = RowMatrixXd::Zero(D, D);
    layer.wk = RowMatrixXd::Zero(D, D);
    layer.wv = RowMatrixXd::Zero(D, D);
    layer.wo = RowMatrixXd::Zero(D, D);
    layer.w1 = RowMatrixXd::Zero(D, F);
    layer.w2 = RowMatrixXd::Zero(F, D);
  }
  w.unembedding = RowMatrixXd::Zero(D, config.vocab_size);
  return w;
}

namespace {

void fill_uniform(RowMatrixXd& m, const CounterRng& rng, std::uint64_t tensor_id, double amplitude) {
  const std::uint64_t base = tensor_id << 40;
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    m.data()[i] = rng.uniform(base + static_cast<std::uint64_t>(i), -amplitude, amplitude);
  }
}

}  // namespace

TinyLMWeights init_weights(const TinyLMConfig& config) {
  TinyLMWeights w = zero_weights(config);
  const CounterRng rng(config.seed, 0x7e57);
  const double D = config.model_dim();
  const double F = config.hidden_dim();
  fill_uniform(w.embedding, rng, 0, 1.0);
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    const std::uint64_t id = 1 + 8 * l;
    auto& layer = w.layers[l];
    fill_uniform(layer.wq, rng, id + 0, std::sqrt(3.0 / D));
    fill_uniform(layer.wk, rng, id + 1, std::sqrt(3.0 / D));
    fill_uniform(layer.wv, rng, id + 2, std::sqrt(3.0 / D));
    fill_uniform(layer.wo, rng, id + 3, std::sqrt(3.0 / D));
    fill_uniform(layer.w1, rng, id + 4, std::sqrt(3.0 / D));
    fill_uniform(layer.w2, rng, id + 5, std::sqrt(3.0 / F));
  }
  fill_uniform(w.unembedding, rng, 4096, std::sqrt(3.0 / D));
  return w;
}

RowMatrixXd sinusoidal_positions(int seq_len, int model_dim, double scale) {
  RowMatrixXd pe(seq_len, model_dim);
  for (int t = 0; t < seq_len; ++t) {
    for (int i = 0; i < model_dim; ++i) {
      const int pair = i / 2;
      const double freq = std::pow(10000.0, -2.0 * pair / model_dim);
      pe(t, i) = scale * ((i % 2 == 0) ? std::sin(t * freq) : std::cos(t * freq));
    }
  }
  return pe;
}

namespace {

Eigen::RowVectorXd rms_norm(const Eigen::Ref<const Eigen::RowVectorXd>& x) {
  const double ms = x.squaredNorm() / static_cast<double>(x.size());
  return x / std::sqrt(ms + kRmsEps);
}

void check_tokens(const TinyLMConfig& config, std::span<const std::uint32_t> tokens) {
  if (tokens.empty()) throw InputError("token sequence is empty");
  if (static_cast<int>(tokens.size()) > config.max_seq_len) {
    throw InputError("sequence length " + std::to_string(tokens.size()) + " exceeds max_seq_len " +
                     std::to_string(config.max_seq_len));
  }
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] >= static_cast<std::uint32_t>(config.vocab_size)) {
      throw InputError("token id " + std::to_string(tokens[i]) + " at position " + std::to_string(i) +
                       " is >= vocab_size");
    }
  }
}

RowMatrixXd embed(const TinyLMWeights& w, std::span<const std::uint32_t> tokens) {
  const int T = static_cast<int>(tokens.size());
  RowMatrixXd x = sinusoidal_positions(T, w.config.model_dim(), w.config.pos_scale);
  for (int t = 0; t < T; ++t) x.row(t) += w.embedding.row(tokens[static_cast<std::size_t>(t)]);
  return x;
}

/// Residual state shared between the full pass and masked recomputes.
struct PassState {
  std::vector<RowMatrixXd> block_inputs;
  std::vector<RowMatrixXd> keys;
  std::vector<RowMatrixXd> values;
};

/// Runs every block for the positions in `rows` (ascending), overwriting
/// their entries in `state`. Entries of other positions are read as-is.
/// `allowed(layer, query, key)` restricts the softmax support (key <= query
/// is implied). Returns the final residual of each processed row.
template <typename Allowed>
RowMatrixXd run_rows(const TinyLMWeights& w, const IndexSet& rows, PassState& state, Allowed allowed,
                     std::vector<RowMatrixXd>* attention) {
  const int D = w.config.model_dim();
  const int H = w.config.num_heads;
  const int dh = w.config.head_dim;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto n = static_cast<Eigen::Index>(rows.size());

  RowMatrixXd x(n, D);
  for (Eigen::Index i = 0; i < n; ++i) x.row(i) = state.block_inputs[0].row(rows[static_cast<std::size_t>(i)]);

  RowMatrixXd q(n, D);
  std::vector<double> scores;
  std::vector<Index> support;
  Eigen::RowVectorXd out(D);
  for (int l = 0; l < w.config.num_layers; ++l) {
    const LayerWeights& lw = w.layers[static_cast<std::size_t>(l)];
    RowMatrixXd& K = state.keys[static_cast<std::size_t>(l)];
    RowMatrixXd& V = state.values[static_cast<std::size_t>(l)];
    for (Eigen::Index i = 0; i < n; ++i) {
      const Index t = rows[static_cast<std::size_t>(i)];
      state.block_inputs[static_cast<std::size_t>(l)].row(t) = x.row(i);
      const Eigen::RowVectorXd h = rms_norm(x.row(i));
      q.row(i) = h * lw.wq;
      K.row(t) = h * lw.wk;
      V.row(t) = h * lw.wv;
    }
    for (Eigen::Index i = 0; i < n; ++i) {
      const Index t = rows[static_cast<std::size_t>(i)];
      support.clear();
      for (Index j = 0; j <= t; ++j) {
        if (allowed(l, t, j)) support.push_back(j);
      }
      if (support.empty()) throw SelectionError("query " + std::to_string(t) + " has no key to attend to");
      for (int h = 0; h < H; ++h) {
        scores.resize(support.size());
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t s = 0; s < support.size(); ++s) {
          scores[s] = q.row(i).segment(h * dh, dh).dot(K.row(support[s]).segment(h * dh, dh)) * inv_sqrt;
          m = std::max(m, scores[s]);
        }
        double z = 0.0;
        for (double& s : scores) {
          s = std::exp(s - m);
          z += s;
        }
        auto o = out.segment(h * dh, dh);
        o.setZero();
        for (std::size_t s = 0; s < support.size(); ++s) {
          scores[s] /= z;
          o += scores[s] * V.row(support[s]).segment(h * dh, dh);
        }
        if (attention) {
          auto& a = (*attention)[static_cast<std::size_t>(l * H + h)];
          for (std::size_t s = 0; s < support.size(); ++s) a(t, support[s]) = scores[s];
        }
      }
      x.row(i) += out * lw.wo;
      const Eigen::RowVectorXd h2 = rms_norm(x.row(i));
      const Eigen::RowVectorXd hidden = (h2 * lw.w1).cwiseMax(0.0);
      x.row(i) += hidden * lw.w2;
    }
  }
  return x;
}

/// log P(next | row) for each final residual row.
double next_logprob(const TinyLMWeights& w, const Eigen::Ref<const Eigen::RowVectorXd>& final_row,
                    std::uint32_t next) {
  const Eigen::RowVectorXd logits = rms_norm(final_row) * w.unembedding;
  const double m = logits.maxCoeff();
  const double lse = m + std::log((logits.array() - m).exp().sum());
  return logits[next] - lse;
}

PassState empty_state(const TinyLMWeights& w, std::span<const std::uint32_t> tokens) {
  const int T = static_cast<int>(tokens.size());
  const int D = w.config.model_dim();
  PassState st;
  st.block_inputs.assign(static_cast<std::size_t>(w.config.num_layers), RowMatrixXd::Zero(T, D));
  st.keys.assign(static_cast<std::size_t>(w.config.num_layers), RowMatrixXd::Zero(T, D));
  st.values.assign(static_cast<std::size_t>(w.config.num_layers), RowMatrixXd::Zero(T, D));
  st.block_inputs[0] = embed(w, tokens);
  return st;
}

}  // namespace

ForwardResult forward(const TinyLMWeights& weights, std::span<const std::uint32_t> tokens) {
  check_tokens(weights.config, tokens);
  const int T = static_cast<int>(tokens.size());
  PassState st = empty_state(weights, tokens);
  IndexSet all(static_cast<std::size_t>(T));
  for (int t = 0; t < T; ++t) all[static_cast<std::size_t>(t)] = t;

  ForwardResult r;
  r.attention.assign(static_cast<std::size_t>(weights.config.num_layers * weights.config.num_heads),
                     RowMatrixXd::Zero(T, T));
  const RowMatrixXd final_x = run_rows(weights, all, st, [](int, Index, Index) { return true; }, &r.attention);
  r.logprobs = Eigen::VectorXd::Zero(T);
  for (int t = 1; t < T; ++t) r.logprobs[t] = next_logprob(weights, final_x.row(t - 1), tokens[static_cast<std::size_t>(t)]);
  r.block_inputs = std::move(st.block_inputs);
  r.keys = std::move(st.keys);
  r.values = std::move(st.values);
  return r;
}

PrefillTrace prefill(const TinyLMWeights& weights, std::span<const std::uint32_t> tokens, int window) {
  const ForwardResult r = forward(weights, tokens);
  const int T = static_cast<int>(tokens.size());
  const int H = weights.config.num_heads;
  const int dh = weights.config.head_dim;
  PrefillTrace t;
  t.num_layers = weights.config.num_layers;
  t.num_heads = H;
  t.seq_len = T;
  t.head_dim = dh;
  t.window = window > 0 ? std::min(window, T) : std::min(32, T);
  t.mode = AttentionMode::kFull;
  t.tokens.assign(tokens.begin(), tokens.end());
  t.has_logprobs = true;
  t.logprobs = r.logprobs.cast<float>();
  t.has_kv = true;
  const int slots = t.num_head_slots();
  t.attention.reserve(static_cast<std::size_t>(slots));
  t.value_norms.resize(slots, T);
  for (int l = 0; l < t.num_layers; ++l) {
    for (int h = 0; h < H; ++h) {
      t.attention.push_back(r.attention[static_cast<std::size_t>(l * H + h)].cast<float>());
      const auto k = r.keys[static_cast<std::size_t>(l)].middleCols(h * dh, dh);
      const auto v = r.values[static_cast<std::size_t>(l)].middleCols(h * dh, dh);
      t.keys.emplace_back(k.cast<float>());
      t.values.emplace_back(v.cast<float>());
      t.value_norms.row(t.head_index(l, h)) = v.rowwise().norm().transpose().cast<float>();
    }
  }
  return t;
}

IndexSet scoring_queries(const IndexSet& window) {
  IndexSet out;
  for (Index t : window) {
    if (t >= 1) out.push_back(t - 1);
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

WindowScorer::WindowScorer(const TinyLMWeights& weights, std::vector<std::uint32_t> tokens, IndexSet window)
    : weights_(&weights), tokens_(std::move(tokens)), window_(std::move(window)) {
  check_tokens(weights.config, tokens_);
  std::sort(window_.begin(), window_.end());
  window_.erase(std::unique(window_.begin(), window_.end()), window_.end());
  if (window_.empty()) throw ParameterError("window must not be empty");
  if (window_.front() < 0 || window_.back() >= seq_len()) throw ParameterError("window position out of range");
  queries_ = scoring_queries(window_);
  full_ = forward(weights, tokens_);
}

double WindowScorer::nll(const LayerSelection& retained) const {
  const TinyLMWeights& w = *weights_;
  const int T = seq_len();
  const int L = w.config.num_layers;
  if (static_cast<int>(retained.size()) != L) {
    throw SelectionError("expected " + std::to_string(L) + " retained sets, got " + std::to_string(retained.size()));
  }
  std::vector<std::vector<char>> keep(static_cast<std::size_t>(L), std::vector<char>(static_cast<std::size_t>(T), 0));
  for (int l = 0; l < L; ++l) {
    if (retained[static_cast<std::size_t>(l)].empty()) throw SelectionError("layer " + std::to_string(l) + " retains nothing");
    for (Index j : retained[static_cast<std::size_t>(l)]) {
      if (j < 0 || j >= T) throw SelectionError("retained index " + std::to_string(j) + " out of range");
      keep[static_cast<std::size_t>(l)][static_cast<std::size_t>(j)] = 1;
    }
  }
  std::vector<char> scoring(static_cast<std::size_t>(T), 0);
  for (Index t : queries_) scoring[static_cast<std::size_t>(t)] = 1;

  double sum = 0.0;
  if (!queries_.empty()) {
    PassState st{full_.block_inputs, full_.keys, full_.values};
    const RowMatrixXd final_x = run_rows(
        w, queries_, st,
        [&](int l, Index, Index j) {
          return keep[static_cast<std::size_t>(l)][static_cast<std::size_t>(j)] || scoring[static_cast<std::size_t>(j)];
        },
        nullptr);
    std::size_t qi = 0;
    for (Index t : window_) {
      if (t == 0) continue;
      while (queries_[qi] != t - 1) ++qi;
      sum += next_logprob(w, final_x.row(static_cast<Eigen::Index>(qi)), tokens_[static_cast<std::size_t>(t)]);
    }
  }
  return -sum / static_cast<double>(window_.size());
}

double WindowScorer::full_nll() const {
  IndexSet all(static_cast<std::size_t>(seq_len()));
  for (int t = 0; t < seq_len(); ++t) all[static_cast<std::size_t>(t)] = t;
  return nll(LayerSelection(static_cast<std::size_t>(weights_->config.num_layers), all));
}

double window_nll(const TinyLMWeights& weights, std::span<const std::uint32_t> tokens, const LayerSelection& retained,
                  const IndexSet& window) {
  return WindowScorer(weights, std::vector<std::uint32_t>(tokens.begin(), tokens.end()), window).nll(retained);
}

// --- CKVW ------------------------------------------------------------------

namespace {

constexpr char kWeightsMagic[4] = {'C', 'K', 'V', 'W'};

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_matrix(std::vector<std::uint8_t>& out, const RowMatrixXd& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i) put_u64(out, std::bit_cast<std::uint64_t>(m.data()[i]), 8);
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : b_(b) {}
  std::uint64_t get(int bytes, const char* section) {
    if (pos_ + static_cast<std::size_t>(bytes) > b_.size()) {
      throw TruncationError(std::string("weights section '") + section + "' is truncated");
    }
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(b_[pos_ + static_cast<std::size_t>(i)]) << (8 * i);
    pos_ += static_cast<std::size_t>(bytes);
    return v;
  }
  void matrix(RowMatrixXd& m, const char* section) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = std::bit_cast<double>(get(8, section));
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  const std::vector<std::uint8_t>& b_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_weights(const TinyLMWeights& w, const std::filesystem::path& path) {
  std::vector<std::uint8_t> out(kWeightsMagic, kWeightsMagic + 4);
  const auto& c = w.config;
  put_u64(out, kWeightsVersion, 2);
  for (int v : {c.num_layers, c.num_heads, c.head_dim, c.vocab_size, c.max_seq_len, c.ffn_dim}) {
    put_u64(out, static_cast<std::uint32_t>(v), 4);
  }
  put_u64(out, std::bit_cast<std::uint64_t>(c.pos_scale), 8);
  put_u64(out, c.seed, 8);
  put_matrix(out, w.embedding);
  for (const auto& l : w.layers) {
    for (const RowMatrixXd* m : {&l.wq, &l.wk, &l.wv, &l.wo, &l.w1, &l.w2}) put_matrix(out, *m);
  }
  put_matrix(out, w.unembedding);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw InputError("cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
}

TinyLMWeights load_weights(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot open " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kWeightsMagic, 4) != 0) throw FormatError("bad magic, expected CKVW");
  Reader r(bytes);
  r.get(4, "magic");
  const auto version = r.get(2, "version");
  if (version != kWeightsVersion) throw FormatError("unsupported weights version " + std::to_string(version));
  TinyLMConfig c;
  c.num_layers = static_cast<int>(r.get(4, "header"));
  c.num_heads = static_cast<int>(r.get(4, "header"));
  c.head_dim = static_cast<int>(r.get(4, "header"));
  c.vocab_size = static_cast<int>(r.get(4, "header"));
  c.max_seq_len = static_cast<int>(r.get(4, "header"));
  c.ffn_dim = static_cast<int>(r.get(4, "header"));
  c.pos_scale = std::bit_cast<double>(r.get(8, "header"));
  c.seed = r.get(8, "header");
  if (c.num_layers > 1024 || c.num_heads > 1024 || c.head_dim > 4096 || c.vocab_size > (1 << 20)) {
    throw FormatError("implausible weights header");
  }
  TinyLMWeights w = zero_weights(c);
  r.matrix(w.embedding, "embedding");
  for (auto& l : w.layers) {
    for (RowMatrixXd* m : {&l.wq, &l.wk, &l.wv, &l.wo, &l.w1, &l.w2}) r.matrix(*m, "layer");
  }
  r.matrix(w.unembedding, "unembedding");
  if (!r.done()) throw FormatError("trailing bytes in weights file");
  return w;
}

}  // namespace ckv
