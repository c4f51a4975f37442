#pragma once

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dualcba/errors.hpp"
#include "dualcba/stream.hpp"
#include "dualcba/trainer.hpp"

namespace dcba {

enum class StreamSource { synthetic, fixture };

/// Everything one `run` needs: the trainer settings, where the task stream
/// comes from, the seeds to sweep and where results go.
struct ExperimentSpec {
  TrainConfig train;
  StreamSource source = StreamSource::synthetic;
  std::string fixture;
  SyntheticSpec synthetic;
  long stream_seed = -1;  // -1: each run uses its own seed for the stream too
  double blurry = 0.0;    // percent of each task's samples moved to other tasks
  std::vector<std::uint64_t> seeds{0};
  std::string output;  // empty: $DUALCBA_OUTPUT_ROOT/<label> (or ./runs/<label>)
  std::string label = "run";
};

namespace cfg {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

// Shortest text that parses back to the same double.
inline std::string fmt_double(double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

inline double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw ConfigError(key + ": '" + v + "' is not a number");
  return out;
}

inline std::uint64_t to_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw ConfigError(key + ": '" + v + "' is not a non-negative integer");
  return out;
}

inline bool to_switch(const std::string& key, const std::string& v) {
  if (v == "on" || v == "true" || v == "1") return true;
  if (v == "off" || v == "false" || v == "0") return false;
  throw ConfigError(key + ": expected on/off, got '" + v + "'");
}

template <class E>
E to_enum(const std::string& key, const std::string& v, const std::vector<std::pair<const char*, E>>& names) {
  for (const auto& [n, e] : names)
    if (v == n) return e;
  std::string all;
  for (const auto& [n, e] : names) all += std::string(all.empty() ? "" : "|") + n;
  throw ConfigError(key + ": expected " + all + ", got '" + v + "'");
}

template <class E>
std::string from_enum(E e, const std::vector<std::pair<const char*, E>>& names) {
  for (const auto& [n, x] : names)
    if (x == e) return n;
  return "?";
}

inline const std::vector<std::pair<const char*, Baseline>> kBaselines{{"er", Baseline::er}, {"derpp", Baseline::derpp}};
inline const std::vector<std::pair<const char*, CbaKind>> kCbaKinds{
    {"off", CbaKind::off}, {"specific", CbaKind::specific}, {"agnostic", CbaKind::agnostic}, {"dual", CbaKind::dual}};
inline const std::vector<std::pair<const char*, SpecificHeads>> kHeads{{"individual", SpecificHeads::individual},
                                                                      {"single", SpecificHeads::single}};
inline const std::vector<std::pair<const char*, Activation>> kActivations{
    {"relu", Activation::relu}, {"tanh", Activation::tanh}, {"identity", Activation::identity}};
inline const std::vector<std::pair<const char*, OuterBatch>> kOuterBatches{{"fresh", OuterBatch::fresh},
                                                                          {"reuse", OuterBatch::reuse}};
inline const std::vector<std::pair<const char*, StreamSource>> kSources{{"synthetic", StreamSource::synthetic},
                                                                       {"fixture", StreamSource::fixture}};

template <class T>
std::string join(const std::vector<T>& v) {
  std::string out;
  for (const auto& x : v) out += (out.empty() ? "" : ",") + std::to_string(x);
  return out;
}

struct Key {
  const char* name;
  const char* doc;
  std::function<void(ExperimentSpec&, const std::string&)> set;
  std::function<std::string(const ExperimentSpec&)> get;
};

#define DCBA_DOUBLE(name, field, doc)                                                                    \
  Key{name, doc, [](ExperimentSpec& s, const std::string& v) { s.field = to_double(name, v); },           \
      [](const ExperimentSpec& s) { return fmt_double(s.field); }}
#define DCBA_UINT(name, field, doc)                                                                      \
  Key{name, doc, [](ExperimentSpec& s, const std::string& v) { s.field = to_uint(name, v); },             \
      [](const ExperimentSpec& s) { return std::to_string(s.field); }}
#define DCBA_ENUM(name, field, table, doc)                                                               \
  Key{name, doc, [](ExperimentSpec& s, const std::string& v) { s.field = to_enum(name, v, table); },      \
      [](const ExperimentSpec& s) { return from_enum(s.field, table); }}
#define DCBA_SWITCH(name, field, doc)                                                                    \
  Key{name, doc, [](ExperimentSpec& s, const std::string& v) { s.field = to_switch(name, v); },           \
      [](const ExperimentSpec& s) { return std::string(s.field ? "on" : "off"); }}

/// The documented key list, in serialisation order.
inline const std::vector<Key>& keys() {
  static const std::vector<Key> k{
      DCBA_DOUBLE("alpha", train.alpha, "inner (SGD) learning rate"),
      DCBA_DOUBLE("beta", train.beta, "outer (Adam) learning rate for the adaptor"),
      DCBA_UINT("batch_size", train.batch_size, "stream and buffer batch size b"),
      DCBA_UINT("buffer_size", train.buffer_size, "memory buffer capacity M"),
      DCBA_ENUM("baseline", train.baseline, kBaselines, "rehearsal baseline: er | derpp"),
      DCBA_ENUM("cba", train.cba, kCbaKinds, "bias adaptor: off | specific | agnostic | dual"),
      DCBA_ENUM("heads", train.heads, kHeads, "class-specific heads: individual (old/new) | single"),
      DCBA_SWITCH("ibn", train.ibn, "freeze BN statistics in training, re-estimate on the buffer before evaluation"),
      DCBA_DOUBLE("der_alpha", train.der_alpha, "DER++ logit distillation weight"),
      DCBA_DOUBLE("der_beta", train.der_beta, "DER++ rehearsal cross-entropy weight"),
      DCBA_UINT("epochs", train.epochs, "passes over each task's data"),
      DCBA_DOUBLE("bn_momentum", train.bn_momentum, "BN population statistic momentum eta"),
      Key{"hidden", "hidden layer widths, comma separated",
          [](ExperimentSpec& s, const std::string& v) {
            s.train.hidden.clear();
            for (const auto& w : split(v, ',')) s.train.hidden.push_back(to_uint("hidden", w));
          },
          [](const ExperimentSpec& s) { return join(s.train.hidden); }},
      DCBA_ENUM("activation", train.activation, kActivations, "hidden activation: relu | tanh | identity"),
      DCBA_UINT("nu_hidden", train.nu_hidden, "hidden width of the class-agnostic MLP"),
      DCBA_UINT("omega_factor", train.omega_factor, "class-specific MLP hidden width per adapted class"),
      DCBA_UINT("eval_interval", train.eval_interval, "steps between evaluations"),
      DCBA_ENUM("outer_batch", train.outer_batch, kOuterBatches, "outer buffer batch: fresh | reuse"),
      DCBA_UINT("ibn_batches", train.ibn_batches, "buffer batches per IBN pass (0: automatic)"),
      DCBA_DOUBLE("divergence_limit", train.divergence_limit, "abort when a loss exceeds this"),
      DCBA_SWITCH("probe", train.probe, "log the gradient alignment probe at evaluation points"),
      DCBA_ENUM("stream", source, kSources, "task stream: synthetic | fixture"),
      Key{"fixture", "path of a binary stream fixture (stream = fixture)",
          [](ExperimentSpec& s, const std::string& v) { s.fixture = v; },
          [](const ExperimentSpec& s) { return s.fixture; }},
      DCBA_UINT("tasks", synthetic.num_tasks, "synthetic: number of tasks"),
      DCBA_UINT("classes_per_task", synthetic.classes_per_task, "synthetic: classes per task"),
      DCBA_UINT("dim", synthetic.dim, "synthetic: input dimension"),
      DCBA_UINT("samples_per_class", synthetic.samples_per_class, "synthetic: samples per class (80% train)"),
      DCBA_DOUBLE("separation", synthetic.separation, "synthetic: radius of the class-mean sphere"),
      Key{"stream_seed", "stream seed, or 'auto' to reuse each run's seed",
          [](ExperimentSpec& s, const std::string& v) {
            s.stream_seed = v == "auto" ? -1 : static_cast<long>(to_uint("stream_seed", v));
          },
          [](const ExperimentSpec& s) { return s.stream_seed < 0 ? std::string("auto") : std::to_string(s.stream_seed); }},
      DCBA_DOUBLE("blurry", blurry, "Blurry-K percentage (0 disables)"),
      Key{"seeds", "run seeds, comma separated",
          [](ExperimentSpec& s, const std::string& v) {
            s.seeds.clear();
            for (const auto& x : split(v, ',')) s.seeds.push_back(to_uint("seeds", x));
          },
          [](const ExperimentSpec& s) { return join(s.seeds); }},
      Key{"output", "run directory (empty: output root / label)",
          [](ExperimentSpec& s, const std::string& v) { s.output = v; },
          [](const ExperimentSpec& s) { return s.output; }},
      Key{"label", "run label", [](ExperimentSpec& s, const std::string& v) { s.label = v; },
          [](const ExperimentSpec& s) { return s.label; }},
  };
  return k;
}

#undef DCBA_DOUBLE
#undef DCBA_UINT
#undef DCBA_ENUM
#undef DCBA_SWITCH

inline const Key* find_key(const std::string& name) {
  for (const auto& k : keys())
    if (name == k.name) return &k;
  return nullptr;
}

}  // namespace cfg

inline void set_key(ExperimentSpec& s, const std::string& key, const std::string& value) {
  const auto* k = cfg::find_key(key);
  if (!k) throw ConfigError("unknown key '" + key + "'");
  k->set(s, cfg::trim(value));
}

inline void validate(const ExperimentSpec& s) {
  s.train.validate();
  if (s.seeds.empty()) throw ConfigError("seeds: at least one seed is required");
  if (s.source == StreamSource::fixture && s.fixture.empty()) throw ConfigError("stream = fixture needs a fixture path");
  if (s.blurry < 0 || s.blurry > 100) throw ConfigError("blurry must lie in [0, 100]");
  if (s.label.empty()) throw ConfigError("label must not be empty");
}

/// `key = value` lines; '#' starts a comment. Unknown or repeated keys are errors.
inline ExperimentSpec parse_spec(std::istream& in) {
  ExperimentSpec s;
  std::map<std::string, int> seen;
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    line = cfg::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(n) + ": expected key = value");
    const std::string key = cfg::trim(line.substr(0, eq));
    if (seen.count(key)) throw ConfigError("line " + std::to_string(n) + ": '" + key + "' set twice");
    seen[key] = n;
    try {
      set_key(s, key, line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(n) + ": " + e.what());
    }
  }
  validate(s);
  return s;
}

inline ExperimentSpec parse_spec(const std::string& text) {
  std::istringstream is(text);
  return parse_spec(is);
}

inline ExperimentSpec load_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config '" + path + "'");
  return parse_spec(in);
}

/// Every key, in documented order.
inline std::string serialize_spec(const ExperimentSpec& s) {
  std::string out;
  for (const auto& k : cfg::keys()) out += std::string(k.name) + " = " + k.get(s) + "\n";
  return out;
}

inline std::map<std::string, std::string> spec_fields(const ExperimentSpec& s) {
  std::map<std::string, std::string> out;
  for (const auto& k : cfg::keys()) out[k.name] = k.get(s);
  return out;
}

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Hash of everything that determines one run's results (seed included,
/// output location excluded).
inline std::string config_hash(const ExperimentSpec& s, std::uint64_t seed) {
  ExperimentSpec t = s;
  t.seeds = {seed};
  t.output.clear();
  t.label.clear();
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(serialize_spec(t))));
  return buf;
}

}  // namespace dcba
