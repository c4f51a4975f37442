#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dualcba/graph.hpp"
#include "dualcba/rng.hpp"

namespace dcba {

using nd::Tensor;
using nd::Var;

enum class Activation { relu, tanh, identity };

/// train: batch statistics, EMA update unless frozen.
/// eval: population statistics.
/// stat_collect: batch statistics, EMA update even when frozen.
/// batch_only: batch statistics, never touches the population.
enum class BnMode { train, eval, stat_collect, batch_only };

constexpr double kBnEpsilon = 1e-5;

/// Population statistics of one batch-norm layer. The affine parameters live
/// with the other network parameters.
struct BnLayer {
  Tensor population_mean;
  Tensor population_var;
  double momentum = 0.1;
  bool frozen = false;
  bool initialized = false;

  explicit BnLayer(std::size_t width = 0, double eta = 0.1)
      : population_mean(Tensor::matrix(1, width, 0.0)), population_var(Tensor::matrix(1, width, 1.0)), momentum(eta) {}

  /// Zero both statistics, the starting point of an IBN pass.
  void reset() {
    for (double& v : population_mean.data()) v = 0.0;
    for (double& v : population_var.data()) v = 0.0;
    initialized = false;
  }

  void accumulate(const Tensor& batch_mean, const Tensor& batch_var) {
    for (std::size_t j = 0; j < population_mean.size(); ++j) {
      population_mean[j] = (1.0 - momentum) * population_mean[j] + momentum * batch_mean[j];
      population_var[j] = (1.0 - momentum) * population_var[j] + momentum * batch_var[j];
    }
    initialized = true;
  }
};

struct NetConfig {
  std::size_t input_dim = 8;
  std::vector<std::size_t> hidden{32};
  std::size_t max_classes = 10;
  Activation activation = Activation::relu;
  double bn_momentum = 0.1;
};

/// Which parameters become differentiable leaves when binding to a tape.
enum class Bind { none, body, head, all };

/// MLP feature extractor with batch norm after every hidden layer, followed
/// by a linear head over `max_classes` outputs. Columns for classes that are
/// not active are dropped before the softmax.
class ClassifierNet {
 public:
  struct Output {
    Var features;
    Var logits;  // all max_classes columns
  };

  ClassifierNet() = default;

  ClassifierNet(NetConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
    std::size_t in = cfg_.input_dim;
    for (std::size_t l = 0; l < cfg_.hidden.size(); ++l) {
      const std::size_t out = cfg_.hidden[l];
      const std::string p = "hidden" + std::to_string(l);
      const double bound = cfg_.activation == Activation::relu ? std::sqrt(6.0 / static_cast<double>(in))
                                                               : std::sqrt(6.0 / static_cast<double>(in + out));
      add_param(p + ".weight", random_matrix(in, out, bound, rng));
      add_param(p + ".bias", Tensor::matrix(1, out, 0.0));
      add_param(p + ".bn.gamma", Tensor::matrix(1, out, 1.0));
      add_param(p + ".bn.beta", Tensor::matrix(1, out, 0.0));
      bn_.emplace_back(out, cfg_.bn_momentum);
      in = out;
    }
    const double bound = std::sqrt(6.0 / static_cast<double>(in + cfg_.max_classes));
    add_param("head.weight", random_matrix(in, cfg_.max_classes, bound, rng));
    add_param("head.bias", Tensor::matrix(1, cfg_.max_classes, 0.0));
  }

  const NetConfig& config() const noexcept { return cfg_; }
  std::vector<Tensor>& params() noexcept { return params_; }
  const std::vector<Tensor>& params() const noexcept { return params_; }
  const std::vector<std::string>& names() const noexcept { return names_; }
  std::vector<BnLayer>& bn() noexcept { return bn_; }
  const std::vector<BnLayer>& bn() const noexcept { return bn_; }

  std::size_t head_weight_index() const noexcept { return params_.size() - 2; }
  std::size_t head_bias_index() const noexcept { return params_.size() - 1; }
  bool is_head(std::size_t i) const noexcept { return i >= head_weight_index(); }

  void set_frozen(bool frozen) {
    for (auto& l : bn_) l.frozen = frozen;
  }

  /// Active classes in column order. Logit column k of masked output is class active()[k].
  const std::vector<std::size_t>& active() const noexcept { return active_; }
  void set_active(std::vector<std::size_t> classes) {
    for (auto c : classes)
      if (c >= cfg_.max_classes) throw IndexError("class " + std::to_string(c) + " exceeds head width");
    active_ = std::move(classes);
  }

  /// Leaves for the selected parameters, constants for the rest.
  std::vector<Var> bind(nd::Tape* tape, Bind which) const {
    std::vector<Var> out;
    out.reserve(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const bool leaf = tape && (which == Bind::all || (which == Bind::head && is_head(i)) ||
                                 (which == Bind::body && !is_head(i)));
      out.push_back(leaf ? tape->leaf(params_[i], names_[i]) : nd::constant(params_[i]));
    }
    return out;
  }

  Output forward(const std::vector<Var>& p, const Tensor& x, BnMode mode) {
    if (p.size() != params_.size()) throw DimensionError("forward: parameter list size");
    if (x.cols() != cfg_.input_dim) {
      throw DimensionError("forward: input has " + std::to_string(x.cols()) + " features, expected " +
                           std::to_string(cfg_.input_dim));
    }
    nd::Tape* tape = nullptr;
    for (const auto& v : p)
      if (v.recorded()) tape = v.tape();

    Var h = nd::constant(x);
    {
      nd::Tape::RegionScope scope(tape, nd::Region::body);
      for (std::size_t l = 0; l < bn_.size(); ++l) {
        Var z = nd::matmul(h, p[4 * l]) + p[4 * l + 1];
        z = batch_norm(z, p[4 * l + 2], p[4 * l + 3], bn_[l], mode);
        h = activate(z);
      }
    }
    nd::Tape::RegionScope scope(tape, nd::Region::head);
    Var logits = nd::matmul(h, p[head_weight_index()]) + p[head_bias_index()];
    return {h, logits};
  }

  Var masked(const Var& logits) const { return nd::gather_cols(logits, active_); }

  /// Untaped forward over active classes.
  Tensor logits(const Tensor& x, BnMode mode) {
    return masked(forward(bind(nullptr, Bind::none), x, mode).logits).value();
  }

  /// Predicted class ids for each row of `x`.
  std::vector<std::size_t> predict(const Tensor& x, BnMode mode) {
    auto cols = nd::kernel::argmax_rows(logits(x, mode));
    for (auto& c : cols) c = active_[c];
    return cols;
  }

 private:
  static Tensor random_matrix(std::size_t r, std::size_t c, double bound, Rng& rng) {
    Tensor t = Tensor::matrix(r, c);
    for (double& v : t.data()) v = uniform(rng, -bound, bound);
    return t;
  }

  void add_param(std::string name, Tensor t) {
    names_.push_back(std::move(name));
    params_.push_back(std::move(t));
  }

  Var activate(const Var& z) const {
    switch (cfg_.activation) {
      case Activation::relu: return nd::relu(z);
      case Activation::tanh: return nd::tanh(z);
      case Activation::identity: return z;
    }
    return z;
  }

  static Var batch_norm(const Var& z, const Var& gamma, const Var& beta, BnLayer& layer, BnMode mode) {
    if (mode == BnMode::eval) {
      if (!layer.initialized) throw StateError("batch norm: population statistics were never estimated");
      Tensor denom = nd::kernel::unary(layer.population_var, [](double v) { return std::sqrt(v + kBnEpsilon); });
      Var xhat = (z - nd::constant(layer.population_mean)) / nd::constant(std::move(denom));
      return xhat * gamma + beta;
    }
    const double inv_n = 1.0 / static_cast<double>(z.rows());
    Var mean = nd::scale(nd::sum_rows(z), inv_n);
    Var centered = z - mean;
    Var var = nd::scale(nd::sum_rows(centered * centered), inv_n);
    Var xhat = centered / nd::sqrt(nd::add_scalar(var, kBnEpsilon));
    if (mode == BnMode::stat_collect || (mode == BnMode::train && !layer.frozen)) {
      layer.accumulate(mean.value(), var.value());
    }
    return xhat * gamma + beta;
  }

  NetConfig cfg_;
  std::vector<Tensor> params_;
  std::vector<std::string> names_;
  std::vector<BnLayer> bn_;
  std::vector<std::size_t> active_;
};

}  // namespace dcba
