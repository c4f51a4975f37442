#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "dualcba/graph.hpp"
#include "dualcba/rng.hpp"

namespace dcba {

using nd::Tensor;
using nd::Var;

enum class CbaKind { off, specific, agnostic, dual };
enum class SpecificHeads { individual, single };

/// Split of the active posterior columns into old-task and new-task classes.
struct Partition {
  std::vector<std::size_t> old_cols;
  std::vector<std::size_t> new_cols;

  std::size_t width() const noexcept { return old_cols.size() + new_cols.size(); }
  bool degenerate() const noexcept { return old_cols.empty() || new_cols.empty(); }

  /// Disjoint and covering 0..width()-1.
  void validate() const {
    std::vector<char> seen(width(), 0);
    for (const auto* side : {&old_cols, &new_cols}) {
      for (auto c : *side) {
        if (c >= width()) throw PartitionError("partition: column " + std::to_string(c) + " outside active range");
        if (seen[c]) throw PartitionError("partition: column " + std::to_string(c) + " is in both class sets");
        seen[c] = 1;
      }
    }
  }

  /// Contiguous split: columns [0, n_old) old, [n_old, n_old + n_new) new.
  static Partition contiguous(std::size_t n_old, std::size_t n_new) {
    Partition p;
    for (std::size_t i = 0; i < n_old; ++i) p.old_cols.push_back(i);
    for (std::size_t i = 0; i < n_new; ++i) p.new_cols.push_back(n_old + i);
    return p;
  }
};

/// Two-layer perceptron in -> hidden (tanh) -> out.
struct Mlp {
  Tensor w1, b1, w2, b2;

  std::size_t in() const { return w1.rows(); }
  std::size_t hidden() const { return w1.cols(); }
  std::size_t out() const { return w2.cols(); }

  /// Random first layer, zero output layer: the MLP starts as the zero map.
  static Mlp zero_output(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng) {
    Mlp m;
    const double bound = std::sqrt(6.0 / static_cast<double>(in + hidden));
    m.w1 = Tensor::matrix(in, hidden);
    for (double& v : m.w1.data()) v = uniform(rng, -bound, bound);
    m.b1 = Tensor::matrix(1, hidden);
    m.w2 = Tensor::matrix(hidden, out);
    m.b2 = Tensor::matrix(1, out);
    return m;
  }

  std::vector<Tensor*> tensors() { return {&w1, &b1, &w2, &b2}; }
};

struct MlpVars {
  Var w1, b1, w2, b2;

  Var apply(const Var& x) const { return nd::matmul(nd::tanh(nd::matmul(x, w1) + b1), w2) + b2; }
};

/// One class-specific head and the posterior columns it adapts.
struct SpecificBlock {
  Mlp mlp;
  std::vector<std::size_t> cols;
};

struct CbaVars {
  std::vector<MlpVars> omega;  // parallel to DualCbaState::omega
  std::optional<MlpVars> nu;
  std::vector<Var> leaves;     // every leaf above, in param_refs() order
};

/// Parameters phi = {omega, nu} of the dual bias adaptor and the partition
/// they were built for.
struct DualCbaState {
  CbaKind kind = CbaKind::dual;
  SpecificHeads heads = SpecificHeads::individual;
  std::size_t nu_hidden = 16;
  std::size_t omega_hidden_factor = 2;
  Partition partition;
  std::vector<SpecificBlock> omega;
  Mlp nu;

  DualCbaState() = default;
  DualCbaState(CbaKind k, SpecificHeads h, Rng& rng, std::size_t nu_width = 16, std::size_t omega_factor = 2)
      : kind(k), heads(h), nu_hidden(nu_width), omega_hidden_factor(omega_factor) {
    nu = Mlp::zero_output(2, nu_hidden, 2, rng);
  }

  bool uses_specific() const noexcept { return kind == CbaKind::specific || kind == CbaKind::dual; }
  bool uses_agnostic() const noexcept {
    return (kind == CbaKind::agnostic || kind == CbaKind::dual) && !partition.degenerate();
  }

  const SpecificBlock* block_for(const std::vector<std::size_t>& cols) const {
    for (const auto& b : omega)
      if (b.cols == cols) return &b;
    return nullptr;
  }
  const SpecificBlock* omega_old() const { return block_for(partition.old_cols); }
  const SpecificBlock* omega_new() const { return block_for(partition.new_cols); }

  /// Parameter tensors that currently take part in the forward pass.
  std::vector<Tensor*> param_refs() {
    std::vector<Tensor*> out;
    if (uses_specific())
      for (auto& b : omega)
        for (auto* t : b.mlp.tensors()) out.push_back(t);
    if (uses_agnostic())
      for (auto* t : nu.tensors()) out.push_back(t);
    return out;
  }

  /// Leaves on `tape` (or constants when tape is null) for the active parameters.
  CbaVars bind(nd::Tape* tape) const {
    CbaVars v;
    auto mk = [&](const Tensor& t, const std::string& name) {
      Var x = tape ? tape->leaf(t, name) : nd::constant(t);
      if (tape) v.leaves.push_back(x);
      return x;
    };
    auto mk_mlp = [&](const Mlp& m, const std::string& p) {
      MlpVars out;
      out.w1 = mk(m.w1, p + ".w1");
      out.b1 = mk(m.b1, p + ".b1");
      out.w2 = mk(m.w2, p + ".w2");
      out.b2 = mk(m.b2, p + ".b2");
      return out;
    };
    if (uses_specific())
      for (std::size_t i = 0; i < omega.size(); ++i) v.omega.push_back(mk_mlp(omega[i].mlp, "omega" + std::to_string(i)));
    if (uses_agnostic()) v.nu = mk_mlp(nu, "nu");
    return v;
  }
};

/// Class-specific adaptor: each block goes through its MLP, is added back to
/// its input (skip connection), rectified at 1e-12 and the row renormalised.
inline Var cba_specific_forward(const DualCbaState& state, const CbaVars& vars, const Var& posterior) {
  const Partition& part = state.partition;
  if (posterior.cols() != part.width()) {
    throw DimensionError("cba_specific_forward: posterior has " + std::to_string(posterior.cols()) +
                         " columns, partition covers " + std::to_string(part.width()));
  }
  if (vars.omega.size() != state.omega.size()) throw DimensionError("cba_specific_forward: unbound class-specific heads");
  nd::Tape::RegionScope scope(posterior.tape() ? posterior.tape() : (vars.leaves.empty() ? nullptr : vars.leaves[0].tape()),
                              nd::Region::adaptor);
  Var raw = posterior;
  for (std::size_t i = 0; i < state.omega.size(); ++i) {
    const auto& block = state.omega[i];
    if (block.mlp.in() != block.cols.size()) throw DimensionError("cba_specific_forward: head width differs from block");
    Var sub = nd::gather_cols(posterior, block.cols);
    raw = raw + nd::scatter_cols(vars.omega[i].apply(sub), block.cols, part.width());
  }
  Var rect = nd::clamp_min(raw, nd::kProbFloor);
  return rect / nd::sum_cols(rect);
}

/// Class-agnostic adaptor over the (old mass, new mass) pair. The pair is
/// mapped to softmax(log pair + nu(pair)) and each class gets its group's
/// mass divided by the group size.
inline Var cba_agnostic_forward(const DualCbaState& state, const CbaVars& vars, const Var& posterior) {
  const Partition& part = state.partition;
  if (part.degenerate()) throw PartitionError("cba_agnostic_forward: degenerate partition (one class set is empty)");
  if (posterior.cols() != part.width()) throw DimensionError("cba_agnostic_forward: posterior width");
  if (!vars.nu) throw DimensionError("cba_agnostic_forward: class-agnostic parameters not bound");
  nd::Tape::RegionScope scope(posterior.tape() ? posterior.tape() : (vars.leaves.empty() ? nullptr : vars.leaves[0].tape()),
                              nd::Region::adaptor);
  const std::size_t n = posterior.rows();
  Var old_mass = nd::sum_cols(nd::gather_cols(posterior, part.old_cols));
  Var new_mass = nd::sum_cols(nd::gather_cols(posterior, part.new_cols));
  Var pair = nd::scatter_cols(old_mass, {0}, 2) + nd::scatter_cols(new_mass, {1}, 2);
  Var adapted = nd::softmax(nd::log(nd::clamp_min(pair, nd::kProbFloor)) + vars.nu->apply(pair));
  const auto n_old = part.old_cols.size(), n_new = part.new_cols.size();
  Var old_share = nd::scale(nd::expand(nd::gather_cols(adapted, {0}), n, n_old), 1.0 / static_cast<double>(n_old));
  Var new_share = nd::scale(nd::expand(nd::gather_cols(adapted, {1}), n, n_new), 1.0 / static_cast<double>(n_new));
  return nd::scatter_cols(old_share, part.old_cols, part.width()) +
         nd::scatter_cols(new_share, part.new_cols, part.width());
}

/// Adapted posterior for the configured kind. With one class set empty the
/// agnostic branch is bypassed.
inline Var dual_cba_forward(const DualCbaState& state, const CbaVars& vars, const Var& posterior) {
  switch (state.kind) {
    case CbaKind::off: return posterior;
    case CbaKind::specific: return cba_specific_forward(state, vars, posterior);
    case CbaKind::agnostic:
      return state.partition.degenerate() ? posterior : cba_agnostic_forward(state, vars, posterior);
    case CbaKind::dual: {
      Var spc = cba_specific_forward(state, vars, posterior);
      if (state.partition.degenerate()) return spc;
      nd::Tape::RegionScope scope(spc.tape(), nd::Region::adaptor);
      return nd::scale(spc + cba_agnostic_forward(state, vars, posterior), 0.5);
    }
  }
  return posterior;
}

/// Untaped convenience.
inline Tensor dual_cba_apply(const DualCbaState& state, const Tensor& posterior) {
  return dual_cba_forward(state, state.bind(nullptr), nd::constant(posterior)).value();
}

/// Called at a task boundary: rebuilds the class-specific heads for
/// `next` with zero output layers; nu is carried over untouched.
inline void reinit_specific(DualCbaState& state, Partition next, Rng& rng) {
  next.validate();
  state.partition = std::move(next);
  state.omega.clear();
  if (!state.uses_specific()) return;
  auto add = [&](const std::vector<std::size_t>& cols) {
    if (cols.empty()) return;
    const std::size_t w = cols.size();
    state.omega.push_back({Mlp::zero_output(w, state.omega_hidden_factor * w, w, rng), cols});
  };
  if (state.heads == SpecificHeads::individual) {
    add(state.partition.old_cols);
    add(state.partition.new_cols);
  } else {
    std::vector<std::size_t> all(state.partition.width());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    add(all);
  }
}

}  // namespace dcba
