#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dualcba/cba.hpp"
#include "dualcba/graph.hpp"
#include "dualcba/metrics.hpp"
#include "dualcba/net.hpp"
#include "dualcba/stream.hpp"

namespace dcba {

enum class Baseline { er, derpp };
enum class OuterBatch { fresh, reuse };

struct TrainConfig {
  double alpha = 0.03;  // inner (SGD) learning rate
  double beta = 0.001;  // outer (Adam) learning rate
  std::size_t batch_size = 10;
  std::size_t buffer_size = 50;
  Baseline baseline = Baseline::er;
  CbaKind cba = CbaKind::off;
  SpecificHeads heads = SpecificHeads::individual;
  bool ibn = false;
  double der_alpha = 0.2;  // logit distillation weight
  double der_beta = 0.5;   // rehearsal CE weight
  std::size_t epochs = 1;
  std::uint64_t seed = 0;
  double bn_momentum = 0.1;
  std::vector<std::size_t> hidden{32};
  Activation activation = Activation::relu;
  std::size_t nu_hidden = 16;
  std::size_t omega_factor = 2;
  long eval_interval = 5;
  OuterBatch outer_batch = OuterBatch::fresh;
  std::size_t ibn_batches = 0;  // 0: ceil(|buffer| / b) passes of ceil(|buffer| / b) batches
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double divergence_limit = 1e6;
  bool probe = true;

  void validate() const {
    if (!(alpha > 0) || !(beta > 0)) throw ConfigError("alpha and beta must be > 0");
    if (der_alpha < 0 || der_beta < 0) throw ConfigError("DER++ weights must be >= 0");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (epochs == 0) throw ConfigError("epochs must be positive");
    if (!(bn_momentum > 0 && bn_momentum < 1)) throw ConfigError("bn_momentum must lie in (0, 1)");
    if (eval_interval <= 0) throw ConfigError("eval_interval must be positive");
    if (hidden.empty()) throw ConfigError("at least one hidden layer is required");
  }
};

/// Adaptive-moment optimiser for phi, keyed by parameter name so heads that
/// are rebuilt at a task boundary start from fresh moments.
class Adam {
 public:
  struct Slot {
    Tensor m, v;
    long t = 0;
  };

  Adam(double b1 = 0.9, double b2 = 0.999, double eps = 1e-8) : b1_(b1), b2_(b2), eps_(eps) {}

  void step(const std::vector<std::pair<std::string, Tensor*>>& params, const std::vector<Tensor>& grads, double lr) {
    for (std::size_t k = 0; k < params.size(); ++k) {
      Tensor& p = *params[k].second;
      const Tensor& g = grads[k];
      Slot& s = slots_[params[k].first];
      if (!s.m.same_shape(p)) s = Slot{Tensor(p.shape(), 0.0), Tensor(p.shape(), 0.0), 0};
      ++s.t;
      const double c1 = 1.0 - std::pow(b1_, static_cast<double>(s.t));
      const double c2 = 1.0 - std::pow(b2_, static_cast<double>(s.t));
      for (std::size_t i = 0; i < p.size(); ++i) {
        s.m[i] = b1_ * s.m[i] + (1.0 - b1_) * g[i];
        s.v[i] = b2_ * s.v[i] + (1.0 - b2_) * g[i] * g[i];
        p[i] -= lr * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + eps_);
      }
    }
  }

  void forget(const std::string& prefix) {
    for (auto it = slots_.begin(); it != slots_.end();)
      it = it->first.rfind(prefix, 0) == 0 ? slots_.erase(it) : std::next(it);
  }

  const std::map<std::string, Slot>& slots() const noexcept { return slots_; }

 private:
  double b1_, b2_, eps_;
  std::map<std::string, Slot> slots_;
};

struct ProbeValue {
  double inner_product = 0.0;  // <G_buf, G_trn>
  double trn_norm_sq = 0.0;    // ||G_trn||^2
};

struct EvalRecord {
  long step = 0;
  std::size_t task = 0;
  std::vector<double> accuracies;  // tasks 0..task
  double average = 0.0;
  std::optional<ProbeValue> probe;
};

struct RunState {
  ClassifierNet net;
  DualCbaState cba;
  MemoryBuffer buffer;
  Adam adam;
  long step = 0;
  std::size_t task = 0;
  AccuracyMatrix matrix;
  std::vector<EvalRecord> records;
  long outer_steps = 0;
  long outer_skipped = 0;
  Rng init_rng, buffer_rng, reservoir_rng, ibn_rng, probe_rng, cba_rng;
};

/// Class id -> column in the active logits.
inline std::vector<std::size_t> label_columns(const ClassifierNet& net, const std::vector<std::size_t>& labels) {
  std::vector<std::size_t> col_of(net.config().max_classes, std::numeric_limits<std::size_t>::max());
  for (std::size_t k = 0; k < net.active().size(); ++k) col_of[net.active()[k]] = k;
  std::vector<std::size_t> out;
  out.reserve(labels.size());
  for (auto y : labels) {
    if (y >= col_of.size() || col_of[y] == std::numeric_limits<std::size_t>::max()) {
      throw PartitionError("label " + std::to_string(y) + " is not an active class");
    }
    out.push_back(col_of[y]);
  }
  return out;
}

/// Training data for one inner step. `distill` and `rehearsal` are only used
/// by DER++.
struct InnerBatch {
  Samples trn;
  std::size_t n_new = 0;  // leading rows of trn that come from the stream
  Batch distill;
  Batch rehearsal;
};

struct InnerLoss {
  Var loss;
  Var logits;  // full-width logits of trn
};

/// Rehearsal loss of the adapted classifier g_phi(softmax(f_theta(x))).
inline InnerLoss inner_loss(ClassifierNet& net, const std::vector<Var>& p, const DualCbaState& cba, const CbaVars& cv,
                            const InnerBatch& b, const TrainConfig& cfg, BnMode mode) {
  if (cba.kind != CbaKind::off && cba.partition.width() != net.active().size()) {
    throw PartitionError("inner_loss: adaptor partition covers " + std::to_string(cba.partition.width()) +
                         " classes, " + std::to_string(net.active().size()) + " are active");
  }
  auto adapted_ce = [&](const Var& logits, const std::vector<std::size_t>& y) {
    Var probs = nd::softmax(net.masked(logits));
    if (cba.kind != CbaKind::off) probs = dual_cba_forward(cba, cv, probs);
    return nd::cross_entropy(probs, label_columns(net, y));
  };
  InnerLoss out;
  out.logits = net.forward(p, b.trn.x, mode).logits;
  out.loss = adapted_ce(out.logits, b.trn.y);
  if (cfg.baseline == Baseline::derpp) {
    if (!b.distill.empty()) {
      Var logits = net.forward(p, b.distill.data.x, mode).logits;
      Var diff = logits - nd::constant(b.distill.logits);
      out.loss = out.loss + nd::scale(nd::mean_all(diff * diff), cfg.der_alpha);
    }
    if (!b.rehearsal.empty()) {
      Var logits = net.forward(p, b.rehearsal.data.x, mode).logits;
      out.loss = out.loss + nd::scale(adapted_ce(logits, b.rehearsal.data.y), cfg.der_beta);
    }
  }
  return out;
}

/// Plain cross entropy of f_theta on a batch (no adaptor).
inline Var plain_loss(ClassifierNet& net, const std::vector<Var>& p, const Samples& s, BnMode mode) {
  Var logits = net.forward(p, s.x, mode).logits;
  return nd::cross_entropy(nd::softmax(net.masked(logits)), label_columns(net, s.y));
}

/// Outer objective on the looked-ahead parameters `next`: plain cross entropy
/// of f (no adaptor) on a buffer batch. Only the head is a leaf on `tape`;
/// the body enters as constants.
struct OuterLoss {
  Var loss;
  std::vector<Var> head;  // weight, bias leaves of the updated head
};

inline OuterLoss outer_loss(nd::Tape& tape, ClassifierNet& net, const std::vector<Tensor>& next, const Samples& buf) {
  std::vector<Var> q;
  q.reserve(next.size());
  for (std::size_t i = 0; i < next.size(); ++i)
    q.push_back(net.is_head(i) ? tape.leaf(next[i], net.names()[i]) : nd::constant(next[i]));
  OuterLoss out;
  out.loss = plain_loss(net, q, buf, BnMode::batch_only);
  out.head = {q[net.head_weight_index()], q[net.head_bias_index()]};
  return out;
}

/// Per-task test accuracy for tasks 0..upto with eval-mode batch norm. When
/// no population statistics exist, the test batch's own statistics are used.
inline std::vector<double> evaluate(ClassifierNet& net, const TaskStream& stream, std::size_t upto) {
  std::vector<double> out;
  for (std::size_t t = 0; t <= upto && t < stream.tasks.size(); ++t) {
    const Samples& test = stream.tasks[t].test;
    if (test.size() == 0) {
      out.push_back(0.0);
      continue;
    }
    const bool have_stats = std::all_of(net.bn().begin(), net.bn().end(), [](const BnLayer& l) { return l.initialized; });
    auto pred = net.predict(test.x, have_stats ? BnMode::eval : BnMode::batch_only);
    std::size_t hit = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == test.y[i];
    out.push_back(static_cast<double>(hit) / static_cast<double>(test.size()));
  }
  return out;
}

/// Zero the population statistics, then push each batch through in
/// stat-collect mode, in order.
inline void ibn_collect(ClassifierNet& net, const std::vector<Tensor>& batches) {
  for (auto& l : net.bn()) l.reset();
  const auto params = net.bind(nullptr, Bind::none);
  for (const auto& x : batches) net.forward(params, x, BnMode::stat_collect);
}

/// The buffer batches an IBN pass uses: `k_batches` batches cut from
/// back-to-back shuffled passes over the buffer. k_batches = 0 means
/// ceil(|buffer| / b) passes of ceil(|buffer| / b) batches each.
inline std::vector<Tensor> ibn_batches(const MemoryBuffer& buffer, std::size_t batch_size, std::size_t k_batches,
                                       Rng& rng) {
  std::vector<Tensor> out;
  if (buffer.empty()) return out;
  if (k_batches == 0) {
    const std::size_t per_pass = (buffer.size() + batch_size - 1) / batch_size;
    k_batches = per_pass * per_pass;
  }
  std::vector<std::size_t> order;
  std::size_t cursor = 0;
  for (std::size_t k = 0; k < k_batches; ++k) {
    std::vector<std::size_t> slots;
    while (slots.size() < std::min(batch_size, buffer.size())) {
      if (cursor == order.size()) {
        order.resize(buffer.size());
        std::iota(order.begin(), order.end(), 0);
        shuffle_in_place(order, rng);
        cursor = 0;
      }
      slots.push_back(order[cursor++]);
    }
    out.push_back(buffer.gather(slots).data.x);
  }
  return out;
}

/// Re-estimate the population statistics from the buffer. Returns false (and
/// leaves the statistics alone) if the buffer is empty.
inline bool ibn_refresh(ClassifierNet& net, const MemoryBuffer& buffer, std::size_t batch_size, std::size_t k_batches,
                        Rng& rng) {
  if (buffer.empty()) return false;
  ibn_collect(net, ibn_batches(buffer, batch_size, k_batches, rng));
  return true;
}

/// Gradients of the adapted training loss and of the plain buffer loss with
/// respect to all of theta, at the current parameters. Mutates nothing.
inline ProbeValue alignment_probe(RunState& st, const TrainConfig& cfg, const InnerBatch& trn, const Samples& buf) {
  ProbeValue pv;
  if (trn.trn.size() == 0 || buf.size() == 0) return pv;
  std::vector<Tensor> g_trn, g_buf;
  {
    nd::Tape tape;
    auto p = st.net.bind(&tape, Bind::all);
    auto cv = st.cba.bind(nullptr);
    Var loss = inner_loss(st.net, p, st.cba, cv, trn, cfg, BnMode::batch_only).loss;
    g_trn = tape.gradients(loss, p);
  }
  {
    nd::Tape tape;
    auto p = st.net.bind(&tape, Bind::all);
    g_buf = tape.gradients(plain_loss(st.net, p, buf, BnMode::batch_only), p);
  }
  for (std::size_t i = 0; i < g_trn.size(); ++i) {
    pv.inner_product += nd::kernel::dot(g_buf[i], g_trn[i]);
    pv.trn_norm_sq += nd::kernel::dot(g_trn[i], g_trn[i]);
  }
  return pv;
}

/// Bi-level online trainer over one task stream.
class Trainer {
 public:
  using RecordSink = std::function<void(const EvalRecord&)>;

  Trainer(TrainConfig cfg, const TaskStream& stream) : cfg_(std::move(cfg)), stream_(stream) {
    cfg_.validate();
    st_.init_rng = make_rng(cfg_.seed, RngStream::init);
    st_.buffer_rng = make_rng(cfg_.seed, RngStream::buffer);
    st_.reservoir_rng = make_rng(cfg_.seed, RngStream::reservoir);
    st_.ibn_rng = make_rng(cfg_.seed, RngStream::ibn);
    st_.probe_rng = make_rng(cfg_.seed, RngStream::probe);
    st_.cba_rng = make_rng(cfg_.seed, RngStream::cba);
    NetConfig nc;
    nc.input_dim = stream.dim;
    nc.hidden = cfg_.hidden;
    nc.max_classes = std::max<std::size_t>(stream.num_classes(), 1);
    nc.activation = cfg_.activation;
    nc.bn_momentum = cfg_.bn_momentum;
    st_.net = ClassifierNet(nc, st_.init_rng);
    st_.net.set_frozen(cfg_.ibn);
    st_.cba = DualCbaState(cfg_.cba, cfg_.heads, st_.cba_rng, cfg_.nu_hidden, cfg_.omega_factor);
    st_.buffer = MemoryBuffer(cfg_.buffer_size);
    st_.adam = Adam(cfg_.adam_beta1, cfg_.adam_beta2, cfg_.adam_eps);
    st_.matrix = AccuracyMatrix(stream.tasks.size(), cfg_.eval_interval);
  }

  RunState& state() noexcept { return st_; }
  const TrainConfig& config() const noexcept { return cfg_; }

  /// Update the active classes and partition for task t and rebuild the
  /// class-specific heads.
  void begin_task(std::size_t t) {
    st_.task = t;
    std::vector<std::size_t> active = st_.net.active();
    const std::size_t n_old = active.size();
    auto add = [&](std::size_t c) {
      if (std::find(active.begin(), active.end(), c) == active.end()) active.push_back(c);
    };
    std::vector<std::size_t> fresh = stream_.tasks[t].classes;
    fresh.insert(fresh.end(), stream_.tasks[t].train.y.begin(), stream_.tasks[t].train.y.end());
    std::sort(fresh.begin(), fresh.end());
    for (auto c : fresh) add(c);
    st_.net.set_active(active);
    if (cfg_.cba != CbaKind::off) {
      reinit_specific(st_.cba, Partition::contiguous(n_old, active.size() - n_old), st_.cba_rng);
      st_.adam.forget("omega");
    }
  }

  /// One inner step (and, with an adaptor, one outer step) on stream batch `bt`.
  void train_step(const Samples& bt) {
    InnerBatch ib;
    ib.n_new = bt.size();
    ib.trn = bt;
    Batch buf_in = st_.buffer.sample(cfg_.batch_size, st_.buffer_rng);
    if (!buf_in.empty()) ib.trn.append(buf_in.data);
    if (cfg_.baseline == Baseline::derpp) {
      ib.distill = st_.buffer.sample(cfg_.batch_size, st_.buffer_rng);
      ib.rehearsal = st_.buffer.sample(cfg_.batch_size, st_.buffer_rng);
    }

    const bool eval_now = st_.step % cfg_.eval_interval == 0;
    diverging([&] {
      std::optional<ProbeValue> probe;
      if (eval_now && cfg_.probe && !st_.buffer.empty()) {
        Batch pb = st_.buffer.sample(cfg_.batch_size, st_.probe_rng);
        probe = alignment_probe(st_, cfg_, ib, pb.data);
      }
      if (cfg_.cba == CbaKind::off) {
        single_level_step(ib);
      } else {
        bilevel_step(ib, buf_in);
      }
      if (eval_now) {
        EvalRecord r = evaluate_now();
        r.probe = probe;
        st_.matrix.push_trace(r.step, r.average);
        st_.records.push_back(r);
        if (sink_) sink_(r);
      }
    });
    ++st_.step;
  }

  /// Evaluate tasks 0..current after an optional IBN refresh.
  EvalRecord evaluate_now() {
    if (cfg_.ibn) ibn_refresh(st_.net, st_.buffer, cfg_.batch_size, cfg_.ibn_batches, st_.ibn_rng);
    EvalRecord r;
    r.step = st_.step;
    r.task = st_.task;
    r.accuracies = evaluate(st_.net, stream_, st_.task);
    double s = 0.0;
    for (double a : r.accuracies) s += a;
    r.average = r.accuracies.empty() ? 0.0 : s / static_cast<double>(r.accuracies.size());
    return r;
  }

  void end_task() {
    diverging([&] {
      EvalRecord r = evaluate_now();
      for (std::size_t i = 0; i < r.accuracies.size(); ++i) st_.matrix.set(i, st_.task, r.accuracies[i]);
    });
  }

  RunState& run(RecordSink sink = {}) {
    sink_ = std::move(sink);
    for (std::size_t t = 0; t < stream_.tasks.size(); ++t) {
      begin_task(t);
      const Samples& train = stream_.tasks[t].train;
      for (std::size_t e = 0; e < cfg_.epochs; ++e) {
        for (std::size_t lo = 0; lo < train.size(); lo += cfg_.batch_size) {
          std::vector<std::size_t> idx;
          for (std::size_t i = lo; i < std::min(lo + cfg_.batch_size, train.size()); ++i) idx.push_back(i);
          train_step(train.subset(idx));
        }
      }
      end_task();
    }
    return st_;
  }

 private:
  // Non-finite values anywhere in a step mean the run has diverged.
  template <class F>
  void diverging(F&& f) {
    try {
      f();
    } catch (const NumericError& e) {
      throw DivergenceError(e.what(), st_.step, static_cast<long>(st_.task));
    }
  }

  void check_loss(double v) const {
    if (!std::isfinite(v) || v > cfg_.divergence_limit) {
      throw DivergenceError("loss diverged: " + std::to_string(v), st_.step, static_cast<long>(st_.task));
    }
  }

  Tensor stream_logits(const InnerLoss& il, std::size_t n_new) const {
    if (cfg_.baseline != Baseline::derpp) return Tensor::matrix(0, 0);
    std::vector<std::size_t> rows(n_new);
    std::iota(rows.begin(), rows.end(), 0);
    return nd::kernel::select_rows(il.logits.value(), rows);
  }

  void commit(std::vector<Tensor>& theta, const std::vector<Tensor>& grads) {
    for (std::size_t i = 0; i < theta.size(); ++i) theta[i] = nd::kernel::axpy(-cfg_.alpha, grads[i], theta[i]);
  }

  void single_level_step(const InnerBatch& ib) {
    nd::Tape tape;
    auto p = st_.net.bind(&tape, Bind::all);
    InnerLoss il = inner_loss(st_.net, p, st_.cba, CbaVars{}, ib, cfg_, BnMode::train);
    check_loss(il.loss.value().item());
    auto g = tape.gradients(il.loss, p);
    commit(st_.net.params(), g);
    st_.buffer.reservoir_update(ib.trn.subset(first_rows(ib.n_new)), stream_logits(il, ib.n_new), st_.reservoir_rng);
  }

  void bilevel_step(const InnerBatch& ib, const Batch& buf_in) {
    nd::Tape tape;
    auto p = st_.net.bind(&tape, Bind::all);
    CbaVars cv = st_.cba.bind(&tape);
    InnerLoss il = inner_loss(st_.net, p, st_.cba, cv, ib, cfg_, BnMode::train);
    check_loss(il.loss.value().item());

    // theta^{k+1} = theta^k - alpha * grad; held as values, the head's
    // dependence on phi is recovered by head_double_backward below.
    auto g = tape.gradients(il.loss, p);
    std::vector<Tensor> next = st_.net.params();
    commit(next, g);

    Batch outer = cfg_.outer_batch == OuterBatch::reuse ? buf_in : st_.buffer.sample(cfg_.batch_size, st_.buffer_rng);
    if (outer.empty() || cv.leaves.empty()) {
      ++st_.outer_skipped;
    } else {
      nd::Tape otape;
      OuterLoss ol = outer_loss(otape, st_.net, next, outer.data);
      check_loss(ol.loss.value().item());
      auto v = otape.gradients(ol.loss, ol.head);
      std::vector<Var> head{p[st_.net.head_weight_index()], p[st_.net.head_bias_index()]};
      auto hg = nd::head_double_backward(tape, il.loss, head, v, cv.leaves, cfg_.alpha);
      for (const auto& t : hg)
        if (!t.all_finite()) throw DivergenceError("non-finite hypergradient", st_.step, static_cast<long>(st_.task));
      std::vector<std::pair<std::string, Tensor*>> named;
      auto refs = st_.cba.param_refs();
      for (std::size_t k = 0; k < refs.size(); ++k) named.emplace_back(cv.leaves[k].node()->name, refs[k]);
      st_.adam.step(named, hg, cfg_.beta);
      ++st_.outer_steps;
    }
    st_.net.params() = std::move(next);
    st_.buffer.reservoir_update(ib.trn.subset(first_rows(ib.n_new)), stream_logits(il, ib.n_new), st_.reservoir_rng);
  }

  static std::vector<std::size_t> first_rows(std::size_t n) {
    std::vector<std::size_t> r(n);
    std::iota(r.begin(), r.end(), 0);
    return r;
  }

  TrainConfig cfg_;
  const TaskStream& stream_;
  RunState st_;
  RecordSink sink_;
};

inline RunState train_stream(const TrainConfig& cfg, const TaskStream& stream, Trainer::RecordSink sink = {}) {
  Trainer tr(cfg, stream);
  return tr.run(std::move(sink));
}

}  // namespace dcba
