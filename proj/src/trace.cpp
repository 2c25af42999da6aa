// Copyright 2026 The ckv Authors
// SPDX-License-Identifier: Apache-2.0

#include "ckv/trace.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "ckv/error.hpp"
#include "ckv/rng.hpp"

namespace ckv {

namespace {

constexpr char kMagic[4] = {'C', 'K', 'V', 'T'};
constexpr std::uint8_t kFlagLogprobs = 0x1;
constexpr std::uint8_t kFlagKv = 0x2;

class ByteWriter {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v) {
    for (int i = 0; i < 2; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void raw(const char* data, std::size_t n) { out_.insert(out_.end(), data, data + n); }
  template <typename Derived>
  void f32_block(const Eigen::DenseBase<Derived>& m) {
    // Row-major order regardless of the expression's storage.
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) f32(static_cast<float>(m(r, c)));
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  void need(std::size_t n, const char* section) const {
    if (pos_ + n > bytes_.size()) {
      std::ostringstream os;
      os << "section '" << section << "' needs " << n << " bytes at offset " << pos_ << ", file has "
         << bytes_.size();
      throw TruncationError(os.str());
    }
  }
  std::uint8_t u8(const char* section) {
    need(1, section);
    return bytes_[pos_++];
  }
  std::uint16_t u16(const char* section) {
    need(2, section);
    std::uint16_t v = static_cast<std::uint16_t>(bytes_[pos_] | (bytes_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  std::uint32_t u32(const char* section) {
    need(4, section);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32(const char* section) { return std::bit_cast<float>(u32(section)); }
  void f32_block(RowMatrixXf& m, const char* section) {
    need(static_cast<std::size_t>(m.size()) * 4, section);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = f32(section);
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

std::string loc(const char* field, int l, int h) {
  std::ostringstream os;
  os << field << "[l=" << l << "][h=" << h << "]";
  return os.str();
}

}  // namespace

IndexSet PrefillTrace::window_positions() const {
  IndexSet out;
  out.reserve(static_cast<std::size_t>(window));
  for (int t = window_begin(); t < seq_len; ++t) out.push_back(t);
  return out;
}

bool PrefillTrace::operator==(const PrefillTrace& o) const {
  auto same_mats = [](const std::vector<RowMatrixXf>& a, const std::vector<RowMatrixXf>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (a[i].rows() != b[i].rows() || a[i].cols() != b[i].cols() || a[i] != b[i]) return false;
    }
    return true;
  };
  return num_layers == o.num_layers && num_heads == o.num_heads && seq_len == o.seq_len &&
         head_dim == o.head_dim && window == o.window && mode == o.mode && tokens == o.tokens &&
         has_logprobs == o.has_logprobs && logprobs.size() == o.logprobs.size() &&
         logprobs == o.logprobs && same_mats(attention, o.attention) &&
         value_norms.rows() == o.value_norms.rows() && value_norms.cols() == o.value_norms.cols() &&
         value_norms == o.value_norms && has_kv == o.has_kv && same_mats(keys, o.keys) &&
         same_mats(values, o.values);
}

void check_budgets(const BudgetConfig& budgets, int num_layers) {
  if (static_cast<int>(budgets.per_layer.size()) != num_layers) {
    throw ParameterError("expected " + std::to_string(num_layers) + " per-layer budgets, got " +
                         std::to_string(budgets.per_layer.size()));
  }
  for (std::size_t l = 0; l < budgets.per_layer.size(); ++l) {
    if (budgets.per_layer[l] < 1) {
      throw ParameterError("budget for layer " + std::to_string(l) + " must be >= 1");
    }
  }
  if (budgets.window && *budgets.window < 1) throw ParameterError("window override must be >= 1");
}

std::string ValidationReport::summary(std::size_t max_entries) const {
  if (ok()) return "ok";
  std::ostringstream os;
  os << violations.size() << " violation(s)";
  for (std::size_t i = 0; i < violations.size() && i < max_entries; ++i) {
    os << "\n  " << violations[i].path << ": " << violations[i].message;
  }
  return os.str();
}

ValidationReport validate_trace(const PrefillTrace& t) {
  ValidationReport report;
  auto add = [&](std::string path, std::string msg) {
    report.violations.push_back({std::move(path), std::move(msg)});
  };

  if (t.num_layers <= 0) add("num_layers", "must be positive");
  if (t.num_heads <= 0) add("num_heads", "must be positive");
  if (t.seq_len <= 0) add("seq_len", "must be positive");
  if (t.head_dim <= 0) add("head_dim", "must be positive");
  if (t.window <= 0 || t.window > t.seq_len) add("window", "must satisfy 1 <= window <= seq_len");
  if (!report.ok()) return report;

  const int slots = t.num_head_slots();
  const int T = t.seq_len;
  if (static_cast<int>(t.tokens.size()) != T) add("tokens", "length differs from seq_len");
  if (t.has_logprobs) {
    if (t.logprobs.size() != T) {
      add("logprobs", "length differs from seq_len");
    } else {
      for (int i = 0; i < T; ++i) {
        const float lp = t.logprobs[i];
        if (!std::isfinite(lp) || lp > 0.0f) add("logprobs[" + std::to_string(i) + "]", "must be finite and <= 0");
      }
    }
  }

  if (static_cast<int>(t.attention.size()) != slots) {
    add("attention", "expected " + std::to_string(slots) + " head matrices");
  } else {
    const int rows = t.stored_rows();
    for (int l = 0; l < t.num_layers; ++l) {
      for (int h = 0; h < t.num_heads; ++h) {
        const RowMatrixXf& a = t.attn(l, h);
        if (a.rows() != rows || a.cols() != T) {
          add(loc("attention", l, h), "shape mismatch");
          continue;
        }
        for (int r = 0; r < rows; ++r) {
          const int q = t.query_of_row(r);
          double sum = 0.0;
          bool range_ok = true;
          bool causal_ok = true;
          for (int k = 0; k < T; ++k) {
            const float v = a(r, k);
            if (!std::isfinite(v) || v < 0.0f || v > 1.0f) range_ok = false;
            if (k > q && v != 0.0f) causal_ok = false;
            sum += static_cast<double>(v);
          }
          const std::string where = loc("attention", l, h) + "[row=" + std::to_string(r) + "]";
          if (!range_ok) add(where, "entry outside [0, 1]");
          if (!causal_ok) add(where, "non-zero entry after query position " + std::to_string(q));
          if (std::abs(sum - 1.0) > kRowSumTolerance) add(where, "row sums to " + std::to_string(sum));
        }
      }
    }
  }

  if (t.value_norms.rows() != slots || t.value_norms.cols() != T) {
    add("value_norms", "shape mismatch");
  } else {
    for (int l = 0; l < t.num_layers; ++l) {
      for (int h = 0; h < t.num_heads; ++h) {
        for (int k = 0; k < T; ++k) {
          const float v = t.value_norms(t.head_index(l, h), k);
          if (!std::isfinite(v) || v < 0.0f) {
            add(loc("value_norms", l, h) + "[t=" + std::to_string(k) + "]", "must be finite and >= 0");
          }
        }
      }
    }
  }

  if (t.has_kv) {
    auto check_kv = [&](const std::vector<RowMatrixXf>& m, const char* name) {
      if (static_cast<int>(m.size()) != slots) {
        add(name, "expected " + std::to_string(slots) + " head matrices");
        return;
      }
      for (int i = 0; i < slots; ++i) {
        if (m[static_cast<std::size_t>(i)].rows() != T || m[static_cast<std::size_t>(i)].cols() != t.head_dim) {
          add(loc(name, i / t.num_heads, i % t.num_heads), "shape mismatch");
        } else if (!m[static_cast<std::size_t>(i)].allFinite()) {
          add(loc(name, i / t.num_heads, i % t.num_heads), "non-finite entry");
        }
      }
    };
    check_kv(t.keys, "keys");
    check_kv(t.values, "values");
  }
  return report;
}

std::vector<std::uint8_t> encode_trace(const PrefillTrace& t) {
  ByteWriter w;
  w.raw(kMagic, 4);
  w.u16(kTraceVersion);
  w.u32(static_cast<std::uint32_t>(t.num_layers));
  w.u32(static_cast<std::uint32_t>(t.num_heads));
  w.u32(static_cast<std::uint32_t>(t.seq_len));
  w.u32(static_cast<std::uint32_t>(t.head_dim));
  w.u32(static_cast<std::uint32_t>(t.window));
  w.u8(static_cast<std::uint8_t>(t.mode));
  w.u8(static_cast<std::uint8_t>((t.has_logprobs ? kFlagLogprobs : 0) | (t.has_kv ? kFlagKv : 0)));
  for (std::uint32_t tok : t.tokens) w.u32(tok);
  if (t.has_logprobs) w.f32_block(t.logprobs.transpose());
  for (const auto& a : t.attention) w.f32_block(a);
  w.f32_block(t.value_norms);
  if (t.has_kv) {
    for (const auto& k : t.keys) w.f32_block(k);
    for (const auto& v : t.values) w.f32_block(v);
  }
  return w.take();
}

PrefillTrace decode_trace(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.need(4, "magic");
  char magic[4];
  for (char& c : magic) c = static_cast<char>(r.u8("magic"));
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("bad magic, expected CKVT");
  const std::uint16_t version = r.u16("version");
  if (version != kTraceVersion) throw FormatError("unsupported version " + std::to_string(version));

  PrefillTrace t;
  t.num_layers = static_cast<int>(r.u32("header"));
  t.num_heads = static_cast<int>(r.u32("header"));
  t.seq_len = static_cast<int>(r.u32("header"));
  t.head_dim = static_cast<int>(r.u32("header"));
  t.window = static_cast<int>(r.u32("header"));
  const std::uint8_t mode = r.u8("header");
  if (mode > 1) throw FormatError("unknown attention mode " + std::to_string(mode));
  t.mode = static_cast<AttentionMode>(mode);
  const std::uint8_t flags = r.u8("header");
  if (flags & ~(kFlagLogprobs | kFlagKv)) throw FormatError("unknown flag bits");
  t.has_logprobs = (flags & kFlagLogprobs) != 0;
  t.has_kv = (flags & kFlagKv) != 0;
  if (t.num_layers <= 0 || t.num_heads <= 0 || t.seq_len <= 0 || t.head_dim <= 0 || t.window <= 0 ||
      t.window > t.seq_len) {
    throw FormatError("invalid header dimensions");
  }

  const int T = t.seq_len;
  const int slots = t.num_head_slots();
  // Reject absurd headers before allocating.
  const std::uint64_t rows = static_cast<std::uint64_t>(t.stored_rows());
  const std::uint64_t min_bytes = 4ULL * (T + (t.has_logprobs ? T : 0) +
                                          static_cast<std::uint64_t>(slots) * rows * T +
                                          static_cast<std::uint64_t>(slots) * T);
  if (min_bytes > r.remaining()) r.need(static_cast<std::size_t>(min_bytes), "body");

  t.tokens.resize(static_cast<std::size_t>(T));
  for (auto& tok : t.tokens) tok = r.u32("tokens");
  if (t.has_logprobs) {
    RowMatrixXf lp(1, T);
    r.f32_block(lp, "logprobs");
    t.logprobs = lp.row(0).transpose();
  }
  t.attention.assign(static_cast<std::size_t>(slots), RowMatrixXf(t.stored_rows(), T));
  for (auto& a : t.attention) r.f32_block(a, "attention");
  t.value_norms.resize(slots, T);
  r.f32_block(t.value_norms, "value_norms");
  if (t.has_kv) {
    t.keys.assign(static_cast<std::size_t>(slots), RowMatrixXf(T, t.head_dim));
    t.values.assign(static_cast<std::size_t>(slots), RowMatrixXf(T, t.head_dim));
    for (auto& k : t.keys) r.f32_block(k, "keys");
    for (auto& v : t.values) r.f32_block(v, "values");
  }
  if (r.remaining() != 0) throw FormatError(std::to_string(r.remaining()) + " trailing bytes");
  return t;
}

void save_trace(const PrefillTrace& trace, const std::filesystem::path& path) {
  const auto bytes = encode_trace(trace);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InputError("failed writing " + path.string());
}

PrefillTrace load_trace(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  PrefillTrace t = decode_trace(bytes);
  const auto report = validate_trace(t);
  if (!report.ok()) {
    throw ValidationError(report.violations.front().path + ": " + report.violations.front().message);
  }
  return t;
}

std::filesystem::path meta_sidecar_path(const std::filesystem::path& trace_path) {
  auto p = trace_path;
  p.replace_extension(".meta.json");
  return p;
}

void write_meta_sidecar(const std::filesystem::path& trace_path, const std::string& json_text) {
  std::ofstream out(meta_sidecar_path(trace_path), std::ios::trunc);
  if (!out) throw InputError("cannot write sidecar for " + trace_path.string());
  out << json_text << '\n';
}

PrefillTrace to_window_rows(const PrefillTrace& trace) {
  if (trace.mode == AttentionMode::kWindowRows) return trace;
  PrefillTrace out = trace;
  out.mode = AttentionMode::kWindowRows;
  for (auto& a : out.attention) {
    RowMatrixXf rows = a.bottomRows(trace.window);
    a = std::move(rows);
  }
  return out;
}

Regime parse_regime(const std::string& name) {
  if (name == "concentrated") return Regime::kConcentrated;
  if (name == "diffuse") return Regime::kDiffuse;
  if (name == "mixed") return Regime::kMixed;
  throw ParameterError("unknown regime '" + name + "'");
}

std::string regime_name(Regime regime) {
  switch (regime) {
    case Regime::kConcentrated: return "concentrated";
    case Regime::kDiffuse: return "diffuse";
    case Regime::kMixed: return "mixed";
  }
  return "unknown";
}

namespace {

enum Stream : std::uint64_t {
  kStreamAnchors = 1,
  kStreamHeadKind,
  kStreamRows,
  kStreamNorms,
  kStreamLogprobs,
  kStreamTokens,
  kStreamKeys,
  kStreamValues,
};

}  // namespace

PrefillTrace gen_synthetic(const SyntheticSpec& spec) {
  if (spec.num_layers < 1 || spec.num_heads < 1 || spec.seq_len < 1 || spec.head_dim < 1 || spec.window < 1) {
    throw ParameterError("synthetic dimensions must be positive");
  }
  if (spec.window > spec.seq_len) throw ParameterError("window must not exceed seq_len");
  if (!(spec.peak_mass >= 0.0 && spec.peak_mass <= 1.0)) throw ParameterError("peak_mass must lie in [0, 1]");

  PrefillTrace t;
  t.num_layers = spec.num_layers;
  t.num_heads = spec.num_heads;
  t.seq_len = spec.seq_len;
  t.head_dim = spec.head_dim;
  t.window = spec.window;
  t.mode = AttentionMode::kWindowRows;
  t.has_kv = spec.with_kv;

  const int T = spec.seq_len;
  const int slots = t.num_head_slots();
  const CounterRng anchors(spec.seed, kStreamAnchors);
  const CounterRng kinds(spec.seed, kStreamHeadKind);

  // Anchor keys must be causal for every window row.
  const int anchor_span = t.window_begin() + 1;
  std::vector<int> anchor_pool(2);
  for (std::size_t i = 0; i < anchor_pool.size(); ++i) {
    anchor_pool[i] = static_cast<int>(anchors.below(i, static_cast<std::uint64_t>(anchor_span)));
  }

  t.attention.reserve(static_cast<std::size_t>(slots));
  std::vector<double> row(static_cast<std::size_t>(T));
  for (int s = 0; s < slots; ++s) {
    bool concentrated = spec.regime == Regime::kConcentrated;
    if (spec.regime == Regime::kMixed) concentrated = kinds.uniform(static_cast<std::uint64_t>(s)) < 0.5;
    const int anchor = anchor_pool[static_cast<std::size_t>(s) % anchor_pool.size()];
    const CounterRng rows(spec.seed, kStreamRows + 16 * static_cast<std::uint64_t>(s));

    RowMatrixXf a = RowMatrixXf::Zero(t.window, T);
    for (int r = 0; r < t.window; ++r) {
      const int q = t.window_begin() + r;
      std::fill(row.begin(), row.end(), 0.0);
      if (concentrated) {
        if (q == 0) {
          row[0] = 1.0;
        } else {
          const double rest = (1.0 - spec.peak_mass) / q;
          for (int k = 0; k <= q; ++k) row[static_cast<std::size_t>(k)] = rest;
          row[static_cast<std::size_t>(anchor)] = spec.peak_mass;
        }
      } else {
        double sum = 0.0;
        for (int k = 0; k <= q; ++k) {
          const double u = rows.uniform(static_cast<std::uint64_t>(r) * T + k);
          row[static_cast<std::size_t>(k)] = 1.0 + spec.jitter * (2.0 * u - 1.0);
          sum += row[static_cast<std::size_t>(k)];
        }
        for (int k = 0; k <= q; ++k) row[static_cast<std::size_t>(k)] /= sum;
      }
      for (int k = 0; k <= q; ++k) a(r, k) = static_cast<float>(row[static_cast<std::size_t>(k)]);
    }
    t.attention.push_back(std::move(a));
  }

  const CounterRng tokens(spec.seed, kStreamTokens);
  t.tokens.resize(static_cast<std::size_t>(T));
  for (int i = 0; i < T; ++i) t.tokens[static_cast<std::size_t>(i)] = static_cast<std::uint32_t>(tokens.below(static_cast<std::uint64_t>(i), 256));

  const CounterRng lps(spec.seed, kStreamLogprobs);
  double lo = 0.2, hi = 2.0;
  if (spec.regime == Regime::kConcentrated) lo = 0.0, hi = 0.3;
  if (spec.regime == Regime::kDiffuse) lo = 1.0, hi = 3.0;
  t.logprobs.resize(T);
  for (int i = 0; i < T; ++i) {
    t.logprobs[i] = i == 0 ? 0.0f : static_cast<float>(-lps.uniform(static_cast<std::uint64_t>(i), lo, hi));
  }

  t.value_norms.resize(slots, T);
  if (spec.with_kv) {
    const CounterRng keys(spec.seed, kStreamKeys);
    const CounterRng values(spec.seed, kStreamValues);
    t.keys.assign(static_cast<std::size_t>(slots), RowMatrixXf(T, spec.head_dim));
    t.values.assign(static_cast<std::size_t>(slots), RowMatrixXf(T, spec.head_dim));
    for (int s = 0; s < slots; ++s) {
      auto& k = t.keys[static_cast<std::size_t>(s)];
      auto& v = t.values[static_cast<std::size_t>(s)];
      for (Eigen::Index i = 0; i < k.size(); ++i) {
        const auto c = static_cast<std::uint64_t>(s) * static_cast<std::uint64_t>(k.size()) + static_cast<std::uint64_t>(i);
        k.data()[i] = static_cast<float>(keys.normal(c));
        v.data()[i] = static_cast<float>(values.normal(c));
      }
      t.value_norms.row(s) = v.rowwise().norm().transpose();
    }
  } else {
    const CounterRng norms(spec.seed, kStreamNorms);
    for (int s = 0; s < slots; ++s) {
      for (int i = 0; i < T; ++i) {
        const auto c = static_cast<std::uint64_t>(s) * T + i;
        t.value_norms(s, i) = static_cast<float>(std::exp(0.5 * norms.normal(c)));
      }
    }
  }
  return t;
}

}  // namespace ckv
