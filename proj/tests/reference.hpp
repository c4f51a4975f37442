#pragma once

// Plain single-level ER / DER++ written against the building blocks only;
// shared by the trainer tests and the acceptance binary.

#include <vector>

#include "dualcba/trainer.hpp"

namespace dcba::reference {

inline Samples rows(const Samples& s, std::size_t lo, std::size_t n) {
  std::vector<std::size_t> idx;
  for (std::size_t i = lo; i < lo + n && i < s.size(); ++i) idx.push_back(i);
  return s.subset(idx);
}

/// Runs at most `max_steps` stream batches and reports how many ran.
inline ClassifierNet reference_loop(const TrainConfig& cfg, const TaskStream& stream, long max_steps, long* steps_done) {
  Rng init = make_rng(cfg.seed, RngStream::init);
  Rng brng = make_rng(cfg.seed, RngStream::buffer);
  Rng rrng = make_rng(cfg.seed, RngStream::reservoir);
  NetConfig nc;
  nc.input_dim = stream.dim;
  nc.hidden = cfg.hidden;
  nc.max_classes = stream.num_classes();
  nc.activation = cfg.activation;
  nc.bn_momentum = cfg.bn_momentum;
  ClassifierNet net(nc, init);
  MemoryBuffer buf(cfg.buffer_size);
  std::vector<std::size_t> active;
  long step = 0;
  for (const auto& task : stream.tasks) {
    for (auto c : task.classes) active.push_back(c);
    net.set_active(active);
    for (std::size_t lo = 0; lo < task.train.size() && step < max_steps; lo += cfg.batch_size, ++step) {
      const Samples bt = rows(task.train, lo, cfg.batch_size);
      Samples trn = bt;
      Batch replay = buf.sample(cfg.batch_size, brng);
      if (!replay.empty()) trn.append(replay.data);
      Batch distill, rehearsal;
      if (cfg.baseline == Baseline::derpp) {
        distill = buf.sample(cfg.batch_size, brng);
        rehearsal = buf.sample(cfg.batch_size, brng);
      }
      nd::Tape tape;
      auto p = net.bind(&tape, Bind::all);
      Var logits = net.forward(p, trn.x, BnMode::train).logits;
      Var loss = nd::cross_entropy(nd::softmax(net.masked(logits)), label_columns(net, trn.y));
      if (!distill.empty()) {
        Var d = net.forward(p, distill.data.x, BnMode::train).logits - nd::constant(distill.logits);
        loss = loss + nd::scale(nd::mean_all(d * d), cfg.der_alpha);
      }
      if (!rehearsal.empty()) loss = loss + nd::scale(plain_loss(net, p, rehearsal.data, BnMode::train), cfg.der_beta);
      auto g = tape.gradients(loss, p);
      for (std::size_t i = 0; i < g.size(); ++i)
        for (std::size_t k = 0; k < g[i].size(); ++k) net.params()[i][k] -= cfg.alpha * g[i][k];
      Tensor stored = Tensor::matrix(0, 0);
      if (cfg.baseline == Baseline::derpp) {
        std::vector<std::size_t> first(bt.size());
        for (std::size_t i = 0; i < first.size(); ++i) first[i] = i;
        stored = nd::kernel::select_rows(logits.value(), first);
      }
      buf.reservoir_update(bt, stored, rrng);
    }
  }
  *steps_done = step;
  return net;
}

}  // namespace dcba::reference
