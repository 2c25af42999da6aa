// Copyright 2026 The ckv Authors
// SPDX-License-Identifier: Apache-2.0

#include "cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <iterator>
#include <map>
#include <optional>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "CLI11.hpp"
#include "json.hpp"

#include "ckv/bound.hpp"
#include "ckv/corpus.hpp"
#include "ckv/error.hpp"
#include "ckv/eval.hpp"
#include "ckv/hash.hpp"
#include "ckv/headtable.hpp"
#include "ckv/parallel.hpp"
#include "ckv/pipeline.hpp"
#include "ckv/riskgate.hpp"
#include "ckv/tinylm.hpp"
#include "ckv/trace.hpp"
#include "ckv/utility.hpp"

namespace ckv::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string file_hash(const fs::path& path) {
  const auto bytes = read_bytes(path);
  Fnv1a h;
  h.bytes(bytes.data(), bytes.size());
  return h.hex();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write " + path.string());
  out << text;
}

std::string json_text(const json& j) { return j.dump(2) + "\n"; }

/// Trace files of a directory in name order, or the path itself.
std::vector<fs::path> trace_files(const fs::path& path) {
  if (!fs::is_directory(path)) return {path};
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(path)) {
    if (entry.is_regular_file() && entry.path().extension() == ".ckvt") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw InputError("no .ckvt files in " + path.string());
  return files;
}

UtilityOptions utility_options(const std::string& alpha_mode) {
  UtilityOptions u;
  if (alpha_mode == "global") {
    u.alpha_mode = AlphaMode::kGlobal;
  } else if (alpha_mode == "per-head") {
    u.alpha_mode = AlphaMode::kPerHead;
  } else {
    throw ConfigError("unknown alpha mode '" + alpha_mode + "' (expected global or per-head)");
  }
  return u;
}

/// Bookkeeping shared by all subcommands: input and output files and the
/// manifest written next to the primary output.
class Session {
 public:
  Session(std::string command, bool force, std::ostream& out) : command_(std::move(command)), force_(force), out_(out) {}

  void config(json resolved) { config_ = std::move(resolved); }

  void input(const fs::path& path) { inputs_.push_back(path); }
  void inputs(const std::vector<fs::path>& paths) { inputs_.insert(inputs_.end(), paths.begin(), paths.end()); }

  /// Registers an output, refusing to replace an existing file unless forced.
  fs::path output(const fs::path& path) {
    if (fs::exists(path) && !force_) {
      throw InputError(path.string() + " exists; outputs are write-once (pass --force to overwrite)");
    }
    outputs_.push_back(path);
    return path;
  }

  void manifest_at(const fs::path& path) { manifest_ = output(path); }

  void write_manifest() const {
    if (manifest_.empty()) return;
    Fnv1a h;
    h.text(config_.dump());
    json j;
    j["schema_version"] = 1;
    j["kind"] = "manifest";
    j["command"] = command_;
    j["ckv_version"] = kVersion;
    j["config"] = config_;
    j["config_hash"] = h.hex();
    j["inputs"] = json::array();
    for (const auto& p : inputs_) j["inputs"].push_back({{"path", p.generic_string()}, {"fnv1a", file_hash(p)}});
    j["outputs"] = json::array();
    for (const auto& p : outputs_) {
      if (p == manifest_) continue;
      j["outputs"].push_back({{"path", p.generic_string()}, {"fnv1a", file_hash(p)}});
    }
    write_text(manifest_, json_text(j));
  }

  std::ostream& out() { return out_; }

 private:
  std::string command_;
  bool force_;
  std::ostream& out_;
  json config_ = json::object();
  std::vector<fs::path> inputs_;
  std::vector<fs::path> outputs_;
  fs::path manifest_;
};

fs::path manifest_for(const fs::path& output) {
  if (fs::is_directory(output)) return output / "manifest.json";
  return fs::path(output.string() + ".manifest.json");
}

std::vector<PrefillTrace> load_traces(const std::vector<fs::path>& files) {
  std::vector<PrefillTrace> traces;
  traces.reserve(files.size());
  for (const auto& f : files) traces.push_back(load_trace(f));
  return traces;
}

/// Options after parsing, as strings, for the manifest.
json resolved_options(const CLI::App& sub, std::uint64_t seed) {
  json j = json::object();
  for (const CLI::Option* opt : sub.get_options()) {
    const std::string name = opt->get_single_name();
    if (name.empty() || name == "help" || name == "jobs" || name == "config" || name == "force") continue;
    if (opt->count() > 0) {
      const auto& results = opt->results();
      j[name] = results.size() == 1 ? json(results.front()) : json(results);
    } else {
      j[name] = opt->get_default_str();
    }
  }
  j["seed"] = seed;
  return j;
}

/// Fills options the command line left unset from an INI file. Keys in
/// [global] apply to every command, keys in [<command>] to that one.
void apply_config(const fs::path& path, CLI::App& app, CLI::App& sub) {
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::read_ini(path.string(), tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(e.what());
  }
  auto fill = [&](CLI::App& target, const std::string& section) {
    const auto node = tree.get_child_optional(section);
    if (!node) return;
    for (const auto& [key, value] : *node) {
      CLI::Option* opt = nullptr;
      try {
        opt = target.get_option("--" + key);
      } catch (const CLI::OptionNotFound&) {
        throw ConfigError(path.string() + ": unknown key '" + key + "' in [" + section + "]");
      }
      if (opt->count() > 0) continue;  // flags win
      opt->add_result(value.get_value<std::string>());
      opt->run_callback();
    }
  };
  for (const auto& [section, node] : tree) {
    if (section != "global" && !app.get_subcommand_ptr(section)) {
      throw ConfigError(path.string() + ": unknown section [" + section + "]");
    }
  }
  fill(app, "global");
  fill(sub, sub.get_name());
}

struct Globals {
  int jobs = 1;
  std::uint64_t seed = 0;
  std::string config;
  bool force = false;
};

struct CqlFlags {
  double alpha_cql = 1.0;
  double lr = 0.1;
  int iters = 2000;

  void add(CLI::App* sub) {
    sub->add_option("--alpha-cql", alpha_cql, "Conservative penalty weight")->capture_default_str();
    sub->add_option("--lr", lr, "Gradient step size")->capture_default_str();
    sub->add_option("--iters", iters, "Gradient steps")->capture_default_str();
  }
  CqlParams params(std::uint64_t seed) const { return CqlParams{alpha_cql, lr, iters, seed}; }
};

// --- subcommands -----------------------------------------------------------

struct GenArgs {
  std::string regime = "mixed";
  int layers = 2, heads = 2, seq_len = 16, window = 4, head_dim = 8;
  double peak_mass = 0.95, jitter = 0.05;
  bool kv = false;
  std::string out;
};

void cmd_gen(const GenArgs& a, const Globals& g, Session& s) {
  SyntheticSpec spec;
  spec.num_layers = a.layers;
  spec.num_heads = a.heads;
  spec.seq_len = a.seq_len;
  spec.window = a.window;
  spec.head_dim = a.head_dim;
  spec.regime = parse_regime(a.regime);
  spec.seed = g.seed;
  spec.peak_mass = a.peak_mass;
  spec.jitter = a.jitter;
  spec.with_kv = a.kv;
  const fs::path out = s.output(a.out);
  s.manifest_at(manifest_for(out));
  save_trace(gen_synthetic(spec), out);
  s.out() << "wrote " << out.generic_string() << "\n";
}

int cmd_validate(const std::vector<std::string>& files, std::ostream& out) {
  int failed = 0;
  for (const auto& f : files) {
    ValidationReport report;
    try {
      const auto bytes = read_bytes(f);
      report = validate_trace(decode_trace(bytes));
    } catch (const Error& e) {
      report.violations.push_back({"file", e.what()});
    }
    if (report.ok()) {
      out << f << ": ok\n";
    } else {
      ++failed;
      out << f << ": INVALID\n" << report.summary() << "\n";
    }
  }
  return failed == 0 ? kExitOk : kExitFailure;
}

struct LmInitArgs {
  bool planted = false;
  int layers = 4, heads = 4, head_dim = 16, vocab = 256, max_seq = 512, ffn = 0;
  double pos_scale = 1.0;
  std::string out;
};

void cmd_lm_init(const LmInitArgs& a, const Globals& g, Session& s) {
  TinyLMWeights w;
  if (a.planted) {
    PlantedSpec spec;
    spec.seed = g.seed;
    w = planted_model(spec);
  } else {
    TinyLMConfig c;
    c.num_layers = a.layers;
    c.num_heads = a.heads;
    c.head_dim = a.head_dim;
    c.vocab_size = a.vocab;
    c.max_seq_len = a.max_seq;
    c.ffn_dim = a.ffn;
    c.pos_scale = a.pos_scale;
    c.seed = g.seed;
    w = init_weights(c);
  }
  const fs::path out = s.output(a.out);
  s.manifest_at(manifest_for(out));
  save_weights(w, out);
  s.out() << "wrote " << out.generic_string() << "\n";
}

struct PrefillArgs {
  std::string weights;
  std::string prompts;
  int planted = 0;
  int window = 32;
  bool full = false;
  std::string out;
};

std::vector<std::vector<std::uint32_t>> read_prompts(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  std::vector<std::vector<std::uint32_t>> prompts;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream is(line);
    std::vector<std::uint32_t> ids;
    long long id = 0;
    while (is >> id) {
      if (id < 0) throw InputError(path.string() + ":" + std::to_string(lineno) + ": negative token id");
      ids.push_back(static_cast<std::uint32_t>(id));
    }
    if (!is.eof()) throw InputError(path.string() + ":" + std::to_string(lineno) + ": expected token ids");
    if (!ids.empty()) prompts.push_back(std::move(ids));
  }
  if (prompts.empty()) throw InputError(path.string() + " holds no prompts");
  return prompts;
}

void cmd_lm_prefill(const PrefillArgs& a, const Globals& g, Session& s) {
  if (a.prompts.empty() == (a.planted == 0)) throw ConfigError("pass exactly one of --prompts and --planted");
  s.input(a.weights);
  const TinyLMWeights w = load_weights(a.weights);
  std::vector<std::vector<std::uint32_t>> prompts;
  if (!a.prompts.empty()) {
    s.input(a.prompts);
    prompts = read_prompts(a.prompts);
  } else {
    if (a.planted < 1) throw ParameterError("--planted must be >= 1");
    PlantedSpec spec;
    spec.seed = g.seed;
    for (int i = 0; i < a.planted; ++i) {
      prompts.push_back(planted_prompt(spec, static_cast<std::uint64_t>(i), static_cast<double>(i % 5) / 4.0));
    }
  }
  fs::create_directories(a.out);
  std::vector<fs::path> paths(prompts.size());
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "trace_%04zu.ckvt", i);
    paths[i] = s.output(fs::path(a.out) / name);
  }
  s.manifest_at(fs::path(a.out) / "manifest.json");
  std::vector<PrefillTrace> traces(prompts.size());
  parallel_for(prompts.size(), g.jobs, [&](std::size_t i) {
    const int window = std::min<int>(a.window, static_cast<int>(prompts[i].size()));
    PrefillTrace t = prefill(w, prompts[i], window);
    traces[i] = a.full ? std::move(t) : to_window_rows(t);
  });
  for (std::size_t i = 0; i < traces.size(); ++i) save_trace(traces[i], paths[i]);
  s.out() << "wrote " << traces.size() << " traces to " << fs::path(a.out).generic_string() << "\n";
}

struct CollectArgs {
  std::string traces;
  std::string weights;
  std::string reward = "exact";
  std::vector<int> budgets{8, 16, 32, 64};
  int samples = 0;
  bool exhaustive = false;
  std::string alpha_mode = "global";
  CqlFlags cql;
  std::string out;

  void add(CLI::App* sub) {
    sub->add_option("--traces", traces, "Trace file or directory of .ckvt files")->required();
    sub->add_option("--weights", weights, "Tiny-model weights (exact rewards)");
    sub->add_option("--reward", reward, "Reward mode: exact or surrogate")->capture_default_str();
    sub->add_option("--budgets", budgets, "Calibration budgets")->delimiter(',')->capture_default_str();
    sub->add_option("--samples", samples, "Draws per state; 0 means one per action")->capture_default_str();
    sub->add_flag("--exhaustive", exhaustive, "Evaluate every action once instead of sampling");
    sub->add_option("--alpha-mode", alpha_mode, "Utility attention mass: global or per-head")->capture_default_str();
    cql.add(sub);
    sub->add_option("--out", out, "Output table (JSON)")->required();
  }

  std::optional<TinyLMWeights> lm(Session& s) const {
    if (weights.empty()) return std::nullopt;
    s.input(weights);
    return load_weights(weights);
  }
};

struct HeadArgs : CollectArgs {
  std::vector<double> actions = default_action_set();
  double tau = 0.8;
};

void cmd_compile_head(const HeadArgs& a, const Globals& g, Session& s) {
  const auto files = trace_files(a.traces);
  s.inputs(files);
  const auto lm = a.lm(s);
  const fs::path out = s.output(a.out);
  s.manifest_at(manifest_for(out));
  HeadCollectOptions opt;
  opt.action_set = a.actions;
  opt.budgets = a.budgets;
  opt.mode = parse_reward_mode(a.reward);
  opt.tau = a.tau;
  opt.sampler_seed = g.seed;
  opt.samples_per_state = a.samples;
  opt.exhaustive = a.exhaustive;
  opt.jobs = g.jobs;
  opt.utility = utility_options(a.alpha_mode);
  const auto traces = load_traces(files);
  const HeadExperience exp = collect_head_experience(traces, lm ? &*lm : nullptr, opt);
  const HeadTable table = compile_head_table(exp, a.cql.params(g.seed));
  save_head_table(table, out);
  s.out() << "wrote " << out.generic_string() << " (" << exp.data.records.size() << " records)\n";
}

struct GateArgs : CollectArgs {
  std::string head_table;
  std::vector<double> taus = default_tau_grid();
  double beta = 1.0;
  int n_ent = 20;
  int n_ppl = 4;
  std::string bins_out;
};

void cmd_compile_gate(const GateArgs& a, const Globals& g, Session& s) {
  const auto files = trace_files(a.traces);
  s.inputs(files);
  s.input(a.head_table);
  const auto lm = a.lm(s);
  const HeadTable heads = load_head_table(a.head_table);
  const fs::path out = s.output(a.out);
  const fs::path bins_out = s.output(a.bins_out);
  s.manifest_at(manifest_for(out));
  const auto traces = load_traces(files);
  const auto risks = calibration_risks(traces);
  const BinEdges bins = fit_bins(risks, a.n_ent, a.n_ppl);
  GateCollectOptions opt;
  opt.tau_grid = a.taus;
  opt.budgets = a.budgets;
  opt.beta = a.beta;
  opt.mode = parse_reward_mode(a.reward);
  opt.sampler_seed = g.seed;
  opt.samples_per_state = a.samples;
  opt.exhaustive = a.exhaustive;
  opt.jobs = g.jobs;
  opt.utility = utility_options(a.alpha_mode);
  const GateExperience exp = collect_gate_experience(traces, lm ? &*lm : nullptr, heads, bins, opt);
  const GateTable table = compile_gate_table(exp, a.cql.params(g.seed));
  save_bins(bins, bins_out);
  save_gate_table(table, out);
  s.out() << "wrote " << out.generic_string() << " and " << bins_out.generic_string() << " ("
          << exp.data.records.size() << " records, " << table.filled_states.size() << " filled states)\n";
}

BudgetConfig budget_config(const std::vector<int>& budget, int num_layers) {
  if (budget.size() == 1) return BudgetConfig::uniform(num_layers, budget.front());
  BudgetConfig b{budget, std::nullopt};
  check_budgets(b, num_layers);
  return b;
}

struct CompressArgs {
  std::string trace, head_table, gate_table, bins;
  std::vector<int> budget;
  std::string baseline = "none";
  int n_sink = kDefaultSinkTokens;
  std::string alpha_mode = "global";
  std::string out;
};

void cmd_compress(const CompressArgs& a, const Globals&, Session& s) {
  s.input(a.trace);
  const PrefillTrace trace = load_trace(a.trace);
  const BudgetConfig budgets = budget_config(a.budget, trace.num_layers);
  const Method method = parse_method(a.baseline);
  Selection sel;
  if (method == Method::kCompiler) {
    if (a.head_table.empty() || a.gate_table.empty() || a.bins.empty()) {
      throw ConfigError("compression needs --head-table, --gate-table and --bins (or a --baseline)");
    }
    s.input(a.head_table);
    s.input(a.gate_table);
    s.input(a.bins);
    CompressOptions opt;
    opt.utility = utility_options(a.alpha_mode);
    sel = compress(trace, load_head_table(a.head_table), load_gate_table(a.gate_table), load_bins(a.bins), budgets,
                   opt);
  } else {
    sel = baseline_select(trace, method, budgets, a.n_sink);
  }
  check_selection(sel, trace.seq_len, budgets);
  const fs::path out = s.output(a.out);
  s.manifest_at(manifest_for(out));
  write_text(out, json_text(selection_to_json(sel)));
  s.out() << "wrote " << out.generic_string() << "\n";
}

struct EvalArgs {
  std::string traces, weights, head_table, gate_table, bins;
  std::vector<int> budgets{8, 16, 32, 64};
  std::vector<std::string> methods{"compiler", "topk_accum", "sink_recent", "full"};
  int n_sink = kDefaultSinkTokens;
  std::string alpha_mode = "global";
  std::string out, csv;
};

void cmd_eval(const EvalArgs& a, const Globals& g, Session& s) {
  const auto files = trace_files(a.traces);
  s.inputs(files);
  s.input(a.weights);
  const TinyLMWeights lm = load_weights(a.weights);
  EvalOptions opt;
  opt.methods.clear();
  for (const auto& m : a.methods) opt.methods.push_back(parse_method(m));
  opt.budgets = a.budgets;
  opt.n_sink = a.n_sink;
  opt.jobs = g.jobs;
  opt.compress.utility = utility_options(a.alpha_mode);
  std::optional<HeadTable> heads;
  std::optional<GateTable> gate;
  std::optional<BinEdges> bins;
  if (std::find(opt.methods.begin(), opt.methods.end(), Method::kCompiler) != opt.methods.end()) {
    if (a.head_table.empty() || a.gate_table.empty() || a.bins.empty()) {
      throw ConfigError("the compiler method needs --head-table, --gate-table and --bins");
    }
    s.input(a.head_table);
    s.input(a.gate_table);
    s.input(a.bins);
    heads = load_head_table(a.head_table);
    gate = load_gate_table(a.gate_table);
    bins = load_bins(a.bins);
  }
  const fs::path out = s.output(a.out);
  const fs::path csv = a.csv.empty() ? fs::path() : s.output(a.csv);
  s.manifest_at(manifest_for(out));
  const EvalReport report = evaluate_run(load_traces(files), lm, heads ? &*heads : nullptr, gate ? &*gate : nullptr,
                                         bins ? &*bins : nullptr, opt);
  write_text(out, json_text(eval_report_to_json(report)));
  if (!csv.empty()) write_text(csv, eval_curve_csv(report));
  for (const auto& agg : report.aggregates) {
    s.out() << method_name(agg.method) << " B=" << agg.budget << " mean " << agg.mean << " median " << agg.median
            << " p95 " << agg.p95 << "\n";
  }
}

struct BoundArgs {
  std::string trace, selection, head_table;
  double delta = 0.05;
  std::string out;
};

void cmd_bound_check(const BoundArgs& a, const Globals&, Session& s) {
  s.input(a.trace);
  s.input(a.selection);
  const PrefillTrace trace = load_trace(a.trace);
  std::ifstream in(a.selection);
  if (!in) throw InputError("cannot open " + a.selection);
  Selection sel;
  try {
    sel = selection_from_json(json::parse(in));
  } catch (const json::exception& e) {
    throw FormatError(a.selection + ": " + e.what());
  }
  HeadTable heads;
  if (a.head_table.empty()) {
    std::vector<int> budgets;
    for (const auto& p : sel.provenance) budgets.push_back(std::max(p.budget, 1));
    std::sort(budgets.begin(), budgets.end());
    budgets.erase(std::unique(budgets.begin(), budgets.end()), budgets.end());
    if (budgets.empty()) budgets.push_back(trace.seq_len);
    heads = HeadTable::uniform(trace.num_layers, trace.num_heads, budgets);
  } else {
    s.input(a.head_table);
    heads = load_head_table(a.head_table);
  }
  const BoundReport report = bound_report(trace, sel, heads, a.delta);
  const fs::path out = s.output(a.out);
  s.manifest_at(manifest_for(out));
  write_text(out, json_text(bound_report_to_json(report)));
  for (const auto& l : report.layers) {
    s.out() << "layer " << l.layer << " lhs " << l.lhs << " deterministic " << l.deterministic << " max_l1_gap "
            << l.max_l1_gap << "\n";
  }
}

struct ExportArgs {
  std::string head_table, gate_table, out_dir;
};

void cmd_export_tables(const ExportArgs& a, const Globals&, Session& s) {
  if (a.head_table.empty() && a.gate_table.empty()) throw ConfigError("pass --head-table and/or --gate-table");
  fs::create_directories(a.out_dir);
  const fs::path dir(a.out_dir);
  if (!a.head_table.empty()) {
    s.input(a.head_table);
    write_text(s.output(dir / "head_table.csv"), head_table_csv(load_head_table(a.head_table)));
  }
  if (!a.gate_table.empty()) {
    s.input(a.gate_table);
    write_text(s.output(dir / "gate_table.csv"), gate_table_csv(load_gate_table(a.gate_table)));
  }
  s.manifest_at(dir / "export.manifest.json");
  s.out() << "wrote tables to " << dir.generic_string() << "\n";
}

struct UtilityArgs {
  std::string trace;
  std::string alpha_mode = "global";
  std::string out;
};

void cmd_utility_dump(const UtilityArgs& a, const Globals&, Session& s) {
  s.input(a.trace);
  const PrefillTrace trace = load_trace(a.trace);
  const UtilityField f = compute_utility(trace, utility_options(a.alpha_mode));
  std::ostringstream os;
  os.precision(17);
  os << "layer,head,position,alpha,rho,u\n";
  for (int l = 0; l < trace.num_layers; ++l) {
    for (int h = 0; h < trace.num_heads; ++h) {
      const int slot = trace.head_index(l, h);
      for (int t = 0; t < trace.seq_len; ++t) {
        os << l << ',' << h << ',' << t << ',' << f.alpha[t] << ',' << f.rho(slot, t) << ',' << f.u(slot, t) << '\n';
      }
    }
  }
  const fs::path out = s.output(a.out);
  s.manifest_at(manifest_for(out));
  write_text(out, os.str());
  s.out() << "wrote " << out.generic_string() << "\n";
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Prefill-only KV-cache compression: utility, compiled head and gate tables, gated selection"};
  app.name(args.empty() ? "ckv" : fs::path(args.front()).filename().string());
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);
  app.fallthrough();

  Globals g;
  app.add_option("--jobs", g.jobs, "Worker threads (results do not depend on it)")->capture_default_str();
  app.add_option("--seed", g.seed, "Seed for generators and samplers")->capture_default_str();
  app.add_option("--config", g.config, "INI file; [global] and [<command>] keys fill unset flags");
  app.add_flag("--force", g.force, "Overwrite existing outputs");

  GenArgs gen;
  auto* s_gen = app.add_subcommand("gen", "Write a synthetic trace");
  s_gen->add_option("--regime", gen.regime, "concentrated, diffuse or mixed")->capture_default_str();
  s_gen->add_option("--L", gen.layers, "Layers")->capture_default_str();
  s_gen->add_option("--H", gen.heads, "Heads per layer")->capture_default_str();
  s_gen->add_option("--T", gen.seq_len, "Sequence length")->capture_default_str();
  s_gen->add_option("--w-obs", gen.window, "Observation window")->capture_default_str();
  s_gen->add_option("--head-dim", gen.head_dim, "Head dimension")->capture_default_str();
  s_gen->add_option("--peak-mass", gen.peak_mass, "Anchor mass of concentrated rows")->capture_default_str();
  s_gen->add_option("--jitter", gen.jitter, "Relative jitter of diffuse rows")->capture_default_str();
  s_gen->add_flag("--kv", gen.kv, "Include key and value vectors");
  s_gen->add_option("--out", gen.out, "Output .ckvt")->required();

  std::vector<std::string> validate_files;
  auto* s_validate = app.add_subcommand("validate", "Check trace files");
  s_validate->add_option("files", validate_files, "Trace files")->required();

  LmInitArgs lmi;
  auto* s_lmi = app.add_subcommand("lm-init", "Write tiny-model weights");
  s_lmi->add_flag("--planted", lmi.planted, "Hand-built retrieval model instead of random weights");
  s_lmi->add_option("--layers", lmi.layers)->capture_default_str();
  s_lmi->add_option("--heads", lmi.heads)->capture_default_str();
  s_lmi->add_option("--head-dim", lmi.head_dim)->capture_default_str();
  s_lmi->add_option("--vocab", lmi.vocab)->capture_default_str();
  s_lmi->add_option("--max-seq", lmi.max_seq)->capture_default_str();
  s_lmi->add_option("--ffn", lmi.ffn, "Feed-forward width; 0 means 4 * model_dim")->capture_default_str();
  s_lmi->add_option("--pos-scale", lmi.pos_scale)->capture_default_str();
  s_lmi->add_option("--out", lmi.out, "Output weights file")->required();

  PrefillArgs pre;
  auto* s_pre = app.add_subcommand("lm-prefill", "Prefill prompts into traces");
  s_pre->add_option("--weights", pre.weights, "Weights file")->required();
  s_pre->add_option("--prompts", pre.prompts, "Text file, one prompt of token ids per line");
  s_pre->add_option("--planted", pre.planted, "Generate this many planted prompts instead");
  s_pre->add_option("--w-obs", pre.window, "Observation window (clamped to the prompt length)")->capture_default_str();
  s_pre->add_flag("--full", pre.full, "Keep full attention and K/V (needed by bound-check)");
  s_pre->add_option("--out", pre.out, "Output directory")->required();

  HeadArgs head;
  auto* s_head = app.add_subcommand("compile-head", "Compile the head reliability table");
  head.add(s_head);
  s_head->add_option("--actions", head.actions, "Weight action set")->delimiter(',')->capture_default_str();
  s_head->add_option("--tau", head.tau, "Gate threshold used while collecting")->capture_default_str();

  GateArgs gate;
  auto* s_gate = app.add_subcommand("compile-gate", "Fit risk bins and compile the threshold table");
  gate.add(s_gate);
  s_gate->add_option("--head-table", gate.head_table, "Head table JSON")->required();
  s_gate->add_option("--taus", gate.taus, "Threshold grid")->delimiter(',')->capture_default_str();
  s_gate->add_option("--beta", gate.beta, "Budget penalty weight")->capture_default_str();
  s_gate->add_option("--n-ent", gate.n_ent, "Entropy bins")->capture_default_str();
  s_gate->add_option("--n-ppl", gate.n_ppl, "Perplexity bins")->capture_default_str();
  s_gate->add_option("--bins-out", gate.bins_out, "Output bin edges (JSON)")->required();

  CompressArgs comp;
  auto* s_comp = app.add_subcommand("compress", "Select retained positions for one trace");
  s_comp->add_option("--trace", comp.trace, "Trace file")->required();
  s_comp->add_option("--head-table", comp.head_table);
  s_comp->add_option("--gate-table", comp.gate_table);
  s_comp->add_option("--bins", comp.bins);
  s_comp->add_option("--budget", comp.budget, "One budget, or one per layer")->delimiter(',')->required();
  s_comp->add_option("--baseline", comp.baseline, "none, sink_recent, topk or full")->capture_default_str();
  s_comp->add_option("--n-sink", comp.n_sink)->capture_default_str();
  s_comp->add_option("--alpha-mode", comp.alpha_mode)->capture_default_str();
  s_comp->add_option("--out", comp.out, "Output selection (JSON)")->required();

  EvalArgs ev;
  auto* s_eval = app.add_subcommand("eval", "Window-NLL deltas of every method and budget");
  s_eval->add_option("--traces", ev.traces)->required();
  s_eval->add_option("--weights", ev.weights)->required();
  s_eval->add_option("--head-table", ev.head_table);
  s_eval->add_option("--gate-table", ev.gate_table);
  s_eval->add_option("--bins", ev.bins);
  s_eval->add_option("--budgets", ev.budgets)->delimiter(',')->capture_default_str();
  s_eval->add_option("--methods", ev.methods)->delimiter(',')->capture_default_str();
  s_eval->add_option("--n-sink", ev.n_sink)->capture_default_str();
  s_eval->add_option("--alpha-mode", ev.alpha_mode)->capture_default_str();
  s_eval->add_option("--out", ev.out, "Report (JSON)")->required();
  s_eval->add_option("--csv", ev.csv, "Budget curve (CSV)");

  BoundArgs bound;
  auto* s_bound = app.add_subcommand("bound-check", "Attention error accounting on a full-mode trace");
  s_bound->add_option("--trace", bound.trace)->required();
  s_bound->add_option("--selection", bound.selection)->required();
  s_bound->add_option("--head-table", bound.head_table, "Defaults to unit weights");
  s_bound->add_option("--delta", bound.delta, "Failure probability")->capture_default_str();
  s_bound->add_option("--out", bound.out)->required();

  ExportArgs exp;
  auto* s_exp = app.add_subcommand("export-tables", "Write tables as CSV");
  s_exp->add_option("--head-table", exp.head_table);
  s_exp->add_option("--gate-table", exp.gate_table);
  s_exp->add_option("--out-dir", exp.out_dir)->required();

  UtilityArgs util;
  auto* s_util = app.add_subcommand("utility-dump", "Write alpha, rho and u as CSV");
  s_util->add_option("--trace", util.trace)->required();
  s_util->add_option("--alpha-mode", util.alpha_mode)->capture_default_str();
  s_util->add_option("--out", util.out)->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    if (!reversed.empty()) reversed.pop_back();
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kExitOk : kExitUsage;
  }

  CLI::App* sub = app.get_subcommands().front();
  try {
    if (!g.config.empty()) apply_config(g.config, app, *sub);
    if (g.jobs < 1) throw ParameterError("--jobs must be >= 1");
    if (sub == s_validate) return cmd_validate(validate_files, out);

    Session session(sub->get_name(), g.force, out);
    session.config(resolved_options(*sub, g.seed));
    if (sub == s_gen) cmd_gen(gen, g, session);
    else if (sub == s_lmi) cmd_lm_init(lmi, g, session);
    else if (sub == s_pre) cmd_lm_prefill(pre, g, session);
    else if (sub == s_head) cmd_compile_head(head, g, session);
    else if (sub == s_gate) cmd_compile_gate(gate, g, session);
    else if (sub == s_comp) cmd_compress(comp, g, session);
    else if (sub == s_eval) cmd_eval(ev, g, session);
    else if (sub == s_bound) cmd_bound_check(bound, g, session);
    else if (sub == s_exp) cmd_export_tables(exp, g, session);
    else if (sub == s_util) cmd_utility_dump(util, g, session);
    session.write_manifest();
    return kExitOk;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  } catch (const CLI::Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }
}

int run(int argc, char** argv) { return run(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr); }

}  // namespace ckv::cli
