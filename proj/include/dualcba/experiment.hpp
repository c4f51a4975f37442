#pragma once

#include <json.hpp>

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "dualcba/config.hpp"
#include "dualcba/metrics.hpp"
#include "dualcba/stream.hpp"
#include "dualcba/trainer.hpp"

#ifndef DUALCBA_VERSION
#define DUALCBA_VERSION "unknown"
#endif

namespace dcba {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

struct PairingError : Error {
  using Error::Error;
};

/// Process exit codes of the command-line front end.
enum ExitCode : int {
  exit_ok = 0,
  exit_failure = 1,     // I/O and other runtime errors
  exit_usage = 2,       // invalid config or arguments
  exit_divergence = 3,  // a run diverged
  exit_pairing = 4,     // compare: seed sets differ
  exit_check = 5,       // oracle-check: a check failed
};

inline std::string version_string() { return DUALCBA_VERSION; }

inline fs::path output_root() {
  if (const char* env = std::getenv("DUALCBA_OUTPUT_ROOT"); env && *env) return env;
  return "runs";
}

inline fs::path run_directory(const ExperimentSpec& s) {
  return s.output.empty() ? output_root() / s.label : fs::path(s.output);
}

inline TaskStream build_stream(const ExperimentSpec& s, std::uint64_t seed) {
  const std::uint64_t stream_seed = s.stream_seed < 0 ? seed : static_cast<std::uint64_t>(s.stream_seed);
  TaskStream st;
  if (s.source == StreamSource::fixture) {
    st = load_stream(s.fixture);
  } else {
    SyntheticSpec sp = s.synthetic;
    sp.seed = stream_seed;
    st = make_synthetic_stream(sp);
  }
  if (s.blurry > 0) st = make_blurry(st, s.blurry, stream_seed);
  return st;
}

inline json record_json(std::uint64_t seed, const EvalRecord& r) {
  json j;
  j["seed"] = seed;
  j["step"] = r.step;
  j["task"] = r.task;
  j["accuracies"] = r.accuracies;
  j["average"] = r.average;
  if (r.probe) {
    j["probe"] = {{"inner_product", r.probe->inner_product}, {"trn_norm_sq", r.probe->trn_norm_sq}};
  } else {
    j["probe"] = nullptr;
  }
  return j;
}

struct RunSummary {
  std::uint64_t seed = 0;
  std::string config_hash;
  double acc = 0, fm = 0, acc_auc = 0;
  double wall_time_s = 0;
  long steps = 0, outer_steps = 0, outer_skipped = 0;
};

inline json summary_json(const RunSummary& s) {
  return json{{"kind", "run"},         {"seed", s.seed},
              {"config_hash", s.config_hash}, {"acc", s.acc},
              {"fm", s.fm},            {"acc_auc", s.acc_auc},
              {"wall_time_s", s.wall_time_s}, {"steps", s.steps},
              {"outer_steps", s.outer_steps}, {"outer_skipped", s.outer_skipped}};
}

inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  double m = 0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double ss = 0;
  for (double x : v) ss += (x - m) * (x - m);
  return {m, v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0};
}

inline json aggregate_json(const std::vector<RunSummary>& runs) {
  auto stat = [&](auto get) {
    std::vector<double> v;
    for (const auto& r : runs) v.push_back(get(r));
    auto [m, s] = mean_std(v);
    return json{{"mean", m}, {"std", s}};
  };
  return json{{"kind", "aggregate"},
              {"runs", runs.size()},
              {"acc", stat([](const RunSummary& r) { return r.acc; })},
              {"fm", stat([](const RunSummary& r) { return r.fm; })},
              {"acc_auc", stat([](const RunSummary& r) { return r.acc_auc; })}};
}

inline std::string trace_file_name(std::uint64_t seed) { return "trace_seed" + std::to_string(seed) + ".jsonl"; }

/// One seed: train, stream the evaluation records to `trace`, summarise.
inline RunSummary run_single(const ExperimentSpec& spec, std::uint64_t seed, std::ostream* trace) {
  const auto t0 = std::chrono::steady_clock::now();
  TaskStream stream = build_stream(spec, seed);
  TrainConfig cfg = spec.train;
  cfg.seed = seed;
  Trainer tr(cfg, stream);
  RunState& st = tr.run([&](const EvalRecord& r) {
    if (trace) *trace << record_json(seed, r).dump() << '\n';
  });
  RunSummary s;
  s.seed = seed;
  s.config_hash = config_hash(spec, seed);
  s.acc = acc(st.matrix);
  s.fm = fm(st.matrix);
  s.acc_auc = acc_auc(st.matrix);
  s.steps = st.step;
  s.outer_steps = st.outer_steps;
  s.outer_skipped = st.outer_skipped;
  s.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return s;
}

struct RunOptions {
  bool overwrite = false;
  unsigned jobs = 1;
};

/// Creates the run directory and writes header.json, one trace file per
/// seed and summary.jsonl (one record per seed, then the aggregate).
inline std::vector<RunSummary> run_experiment(const ExperimentSpec& spec, const RunOptions& opt = {}) {
  validate(spec);
  const fs::path dir = run_directory(spec);
  std::error_code ec;
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!opt.overwrite) throw IoError("run directory '" + dir.string() + "' is not empty (use --overwrite)");
    for (const auto& e : fs::directory_iterator(dir)) fs::remove_all(e.path(), ec);
  }
  fs::create_directories(dir, ec);
  if (!fs::is_directory(dir)) throw IoError("cannot create run directory '" + dir.string() + "'");

  auto open = [&](const std::string& name) {
    std::ofstream f(dir / name, std::ios::binary);
    if (!f) throw IoError("cannot write '" + (dir / name).string() + "'");
    return f;
  };
  {
    auto header = open("header.json");
    json h{{"tool", "dualcba"},
           {"version", version_string()},
           {"seeds", spec.seeds},
           {"config", spec_fields(spec)},
           {"config_text", serialize_spec(spec)}};
    header << h.dump(2) << '\n';
  }

  std::vector<std::optional<RunSummary>> results(spec.seeds.size());
  std::vector<std::exception_ptr> errors(spec.seeds.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i; (i = next++) < spec.seeds.size();) {
      try {
        auto f = open(trace_file_name(spec.seeds[i]));
        results[i] = run_single(spec, spec.seeds[i], &f);
        if (!f) throw IoError("write failed for " + trace_file_name(spec.seeds[i]));
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const unsigned jobs = std::max(1u, std::min<unsigned>(opt.jobs, static_cast<unsigned>(spec.seeds.size())));
  std::vector<std::thread> pool;
  for (unsigned j = 1; j < jobs; ++j) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  std::vector<RunSummary> out;
  auto summary = open("summary.jsonl");
  for (auto& r : results) {
    out.push_back(*r);
    summary << summary_json(*r).dump() << '\n';
  }
  summary << aggregate_json(out).dump() << '\n';
  if (!summary) throw IoError("write failed for summary.jsonl");
  return out;
}

inline std::vector<RunSummary> read_summaries(const fs::path& dir) {
  std::ifstream in(dir / "summary.jsonl");
  if (!in) throw IoError("no summary.jsonl in '" + dir.string() + "'");
  std::vector<RunSummary> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw IoError("malformed summary line in '" + dir.string() + "': " + e.what());
    }
    if (j.value("kind", "") != "run") continue;
    RunSummary s;
    s.seed = j.at("seed").get<std::uint64_t>();
    s.config_hash = j.value("config_hash", "");
    s.acc = j.at("acc").get<double>();
    s.fm = j.at("fm").get<double>();
    s.acc_auc = j.at("acc_auc").get<double>();
    out.push_back(s);
  }
  return out;
}

/// Paired per-seed deltas b - a of ACC and FM.
inline json compare_runs(const fs::path& a, const fs::path& b) {
  auto ra = read_summaries(a), rb = read_summaries(b);
  std::map<std::uint64_t, RunSummary> ma, mb;
  for (const auto& r : ra) ma[r.seed] = r;
  for (const auto& r : rb) mb[r.seed] = r;
  std::set<std::uint64_t> sa, sb;
  for (const auto& [k, v] : ma) sa.insert(k);
  for (const auto& [k, v] : mb) sb.insert(k);
  if (sa != sb || sa.empty()) {
    throw PairingError("seed sets differ: a has " + std::to_string(sa.size()) + " seeds, b has " +
                       std::to_string(sb.size()) + (sa.empty() ? " (no runs)" : ""));
  }
  json per_seed = json::array();
  double d_acc = 0, d_fm = 0;
  long acc_up = 0, acc_down = 0, fm_up = 0, fm_down = 0;
  for (auto seed : sa) {
    const auto& x = ma[seed];
    const auto& y = mb[seed];
    const double da = y.acc - x.acc, df = y.fm - x.fm;
    per_seed.push_back({{"seed", seed}, {"acc_a", x.acc}, {"acc_b", y.acc}, {"d_acc", da},
                        {"fm_a", x.fm}, {"fm_b", y.fm}, {"d_fm", df}});
    d_acc += da;
    d_fm += df;
    acc_up += da > 0;
    acc_down += da < 0;
    fm_up += df > 0;
    fm_down += df < 0;
  }
  const double n = static_cast<double>(sa.size());
  return json{{"kind", "comparison"},
              {"a", a.string()},
              {"b", b.string()},
              {"pairs", sa.size()},
              {"mean_d_acc", d_acc / n},
              {"mean_d_fm", d_fm / n},
              {"acc_sign", {{"positive", acc_up}, {"negative", acc_down}, {"zero", static_cast<long>(n) - acc_up - acc_down}}},
              {"fm_sign", {{"positive", fm_up}, {"negative", fm_down}, {"zero", static_cast<long>(n) - fm_up - fm_down}}},
              {"per_seed", per_seed}};
}

/// The synthetic stream and settings used by the acceptance experiments.
inline ExperimentSpec canonical_spec(CbaKind kind, bool ibn) {
  ExperimentSpec s;
  s.synthetic.num_tasks = 5;
  s.synthetic.classes_per_task = 2;
  s.synthetic.dim = 8;
  s.synthetic.samples_per_class = 250;  // 200 train / 50 test
  s.synthetic.separation = 1.25;
  s.train.buffer_size = 50;
  s.train.batch_size = 10;
  s.train.alpha = 0.07;
  s.train.beta = 0.01;
  s.train.hidden = {64};
  s.train.cba = kind;
  s.train.ibn = ibn;
  return s;
}

}  // namespace dcba
