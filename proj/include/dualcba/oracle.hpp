#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "dualcba/cba.hpp"
#include "dualcba/errors.hpp"
#include "dualcba/graph.hpp"
#include "dualcba/net.hpp"
#include "dualcba/rng.hpp"

namespace dcba::oracle {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

inline double condition_number(const Mat& m) {
  Eigen::JacobiSVD<Mat> svd(m);
  const auto& s = svd.singularValues();
  if (s.size() == 0) return 0.0;
  const double lo = s(s.size() - 1);
  return lo == 0.0 ? std::numeric_limits<double>::infinity() : s(0) / lo;
}

/// min ||X^T theta phi - Y||^2 / n over theta (the classifier) and
/// ||X_buf^T theta - Y_buf||^2 / n_buf over phi (the adaptor).
struct LinearBilevelProblem {
  Mat x_trn;  // p x n_trn
  Mat y_trn;  // n_trn x c
  Mat x_buf;  // p x n_buf
  Mat y_buf;  // n_buf x c

  Eigen::Index p() const { return x_trn.rows(); }
  Eigen::Index c() const { return y_trn.cols(); }

  /// (X X^T)^{-1} X, p x n.
  static Mat pinv(const Mat& x) { return (x * x.transpose()).ldlt().solve(x); }

  Mat a_matrix() const { return x_buf.transpose() * pinv(x_trn); }

  double inner_loss(const Mat& theta, const Mat& phi) const {
    return (x_trn.transpose() * theta * phi - y_trn).squaredNorm() / static_cast<double>(x_trn.cols());
  }

  /// d inner / d theta = 2/n X (X^T theta phi - Y) phi^T.
  Mat inner_gradient(const Mat& theta, const Mat& phi) const {
    return 2.0 / static_cast<double>(x_trn.cols()) * x_trn * (x_trn.transpose() * theta * phi - y_trn) * phi.transpose();
  }

  double outer_loss(const Mat& theta) const {
    return (x_buf.transpose() * theta - y_buf).squaredNorm() / static_cast<double>(x_buf.cols());
  }
};

struct ProblemShape {
  int p = 3, n_trn = 8, n_buf = 4, c = 2;
  double noise = 0.01;  // label noise sigma
  double shift = 0.5;   // spread of the training-label shift around I
};

/// Gaussian design and noisy linear labels.
/// Regenerates until every matrix that gets inverted has condition <= 1e8
/// and phi* has condition <= 1e3.
inline LinearBilevelProblem random_problem(const ProblemShape& s, Rng& rng, double max_cond = 1e8,
                                           double max_phi_cond = 1e3) {
  if (s.c > s.p || s.p > s.n_trn || s.c > s.n_buf) throw DimensionError("random_problem: need c <= p <= n_trn, c <= n_buf");
  auto gauss = [&](Eigen::Index r, Eigen::Index c) {
    Mat m(r, c);
    for (Eigen::Index j = 0; j < c; ++j)
      for (Eigen::Index i = 0; i < r; ++i) m(i, j) = normal01(rng);
    return m;
  };
  for (int attempt = 0; attempt < 1000; ++attempt) {
    LinearBilevelProblem pr;
    pr.x_trn = gauss(s.p, s.n_trn);
    pr.x_buf = gauss(s.p, s.n_buf);
    // Buffer labels follow theta_true; training labels carry a shift phi_true
    // on top of it, which the adaptor is meant to absorb.
    const Mat t_true = gauss(s.p, s.c);
    const Mat shift = Mat::Identity(s.c, s.c) + s.shift * gauss(s.c, s.c);
    pr.y_trn = pr.x_trn.transpose() * t_true * shift + s.noise * gauss(s.n_trn, s.c);
    pr.y_buf = pr.x_buf.transpose() * t_true + s.noise * gauss(s.n_buf, s.c);
    if (condition_number(pr.x_trn * pr.x_trn.transpose()) > max_cond) continue;
    const Mat a = pr.a_matrix();
    const Mat m1 = pr.y_trn.transpose() * a.transpose() * pr.y_buf;
    const Mat m2 = pr.y_trn.transpose() * a.transpose() * a * pr.y_trn;
    if (condition_number(m1) > max_cond || condition_number(m2) > max_cond) continue;
    // phi* itself is inverted for theta*; a nearly singular phi* also leaves
    // the outer loss almost flat along one direction of phi.
    if (condition_number(m1.fullPivLu().solve(m2)) > max_phi_cond) continue;
    return pr;
  }
  throw SingularityError("random_problem: no well-conditioned instance in 1000 draws");
}

struct BilevelSolution {
  Mat theta;
  Mat phi;
  double outer = 0.0;
  long iterations = 0;
};

namespace detail {
inline Mat checked_inverse(const Mat& m, const char* what, double max_cond = 1e12) {
  const double k = condition_number(m);
  if (!std::isfinite(k) || k > max_cond) {
    throw SingularityError(std::string("closed_form_solution: ") + what + " is singular (condition " + std::to_string(k) + ")");
  }
  return m.fullPivLu().inverse();
}
}  // namespace detail

/// Pseudo-inverse/normal-equation closed form. `theta_alt` is the equivalent
/// substitution form that never inverts phi.
struct ClosedForm : BilevelSolution {
  Mat theta_alt;
};

inline ClosedForm closed_form_solution(const LinearBilevelProblem& pr) {
  const double kx = condition_number(pr.x_trn * pr.x_trn.transpose());
  if (!std::isfinite(kx) || kx > 1e12) throw SingularityError("closed_form_solution: X X^T singular (condition " + std::to_string(kx) + ")");
  const Mat xp = LinearBilevelProblem::pinv(pr.x_trn);
  const Mat a = pr.x_buf.transpose() * xp;
  const Mat m1 = pr.y_trn.transpose() * a.transpose() * pr.y_buf;
  const Mat m2 = pr.y_trn.transpose() * a.transpose() * a * pr.y_trn;
  ClosedForm out;
  out.phi = detail::checked_inverse(m1, "(Y^T A^T Y_buf)") * m2;
  out.theta = xp * pr.y_trn * detail::checked_inverse(out.phi, "phi");
  out.theta_alt = xp * pr.y_trn * detail::checked_inverse(m2, "(Y^T A^T A Y)") * m1;
  out.outer = pr.outer_loss(out.theta);
  return out;
}

/// Exact inner least squares for fixed phi via vec(X^T theta phi) =
/// (phi^T kron X^T) vec(theta), solved with column-pivoting QR.
inline Mat inner_least_squares(const LinearBilevelProblem& pr, const Mat& phi) {
  const Eigen::Index p = pr.p(), c = pr.c(), n = pr.x_trn.cols();
  const Mat xt = pr.x_trn.transpose();
  Mat k(n * c, p * c);
  for (Eigen::Index i = 0; i < c; ++i)
    for (Eigen::Index j = 0; j < c; ++j) k.block(i * n, j * p, n, p) = phi(j, i) * xt;
  const Vec y = Eigen::Map<const Vec>(pr.y_trn.data(), n * c);
  const Vec t = k.colPivHouseholderQr().solve(y);
  return Eigen::Map<const Mat>(t.data(), p, c);
}

struct DescentOptions {
  double tolerance = 1e-10;  // stop when the outer loss changes less than this
  long max_steps = 100000;
  double fd_step = 1e-6;
};

namespace detail {
/// Damped Gauss-Newton (Levenberg-Marquardt) on the outer residual
/// X_buf^T theta(phi) - Y_buf, with theta(phi) the exact inner solution and
/// the residual Jacobian taken by central differences.
inline BilevelSolution descend_from(const LinearBilevelProblem& pr, Mat phi, const DescentOptions& opt) {
  const Eigen::Index c = pr.c();
  const double inv_n = 1.0 / static_cast<double>(pr.x_buf.cols());
  auto residual = [&](const Mat& f) {
    const Mat r = pr.x_buf.transpose() * inner_least_squares(pr, f) - pr.y_buf;
    return Vec(Eigen::Map<const Vec>(r.data(), r.size()));
  };
  auto jacobian = [&](const Mat& f) {
    Mat jac(pr.y_buf.size(), c * c);
    for (Eigen::Index k = 0; k < c * c; ++k) {
      Mat up = f, dn = f;
      up(k % c, k / c) += opt.fd_step;
      dn(k % c, k / c) -= opt.fd_step;
      jac.col(k) = (residual(up) - residual(dn)) / (2.0 * opt.fd_step);
    }
    return jac;
  };

  Vec r = residual(phi);
  double f = r.squaredNorm() * inv_n;
  double lambda = 1e-3;
  for (long it = 1; it <= opt.max_steps; ++it) {
    const Mat jac = jacobian(phi);
    const Mat jtj = jac.transpose() * jac;
    const Vec jtr = jac.transpose() * r;
    bool accepted = false;
    while (lambda < 1e16) {
      Mat sys = jtj;
      sys.diagonal().array() += lambda * (1.0 + jtj.diagonal().array());
      const Vec delta = sys.ldlt().solve(-jtr);
      const Mat cand = phi + Eigen::Map<const Mat>(delta.data(), c, c);
      const Vec rc = residual(cand);
      const double fc = rc.squaredNorm() * inv_n;
      if (std::isfinite(fc) && fc < f) {
        const double change = f - fc;
        phi = cand;
        r = rc;
        f = fc;
        lambda = std::max(lambda * 0.3, 1e-12);
        accepted = true;
        if (change < opt.tolerance) return {inner_least_squares(pr, phi), phi, f, it};
        break;
      }
      lambda *= 10.0;
    }
    if (!accepted) return {inner_least_squares(pr, phi), phi, f, it};  // no descent left at this resolution
  }
  throw ConvergenceError("nested_descent_solution: no convergence in " + std::to_string(opt.max_steps) + " outer steps");
}
}  // namespace detail

/// Reference solver: exact inner minimisation alternating with damped
/// Gauss-Newton steps on phi, restarted from phi = I, diag(-1, 1, ..) (one
/// point in each component of the invertible matrices) and `random_starts`
/// seeded Gaussian matrices; keeps the best fixed point. Restarts matter:
/// a run can stall on the plateau towards singular phi when the optimum lies
/// across the singular set from its start.
inline BilevelSolution nested_descent_solution(const LinearBilevelProblem& pr, const DescentOptions& opt = {},
                                               int random_starts = 8) {
  const Eigen::Index c = pr.c();
  std::vector<Mat> starts{Mat::Identity(c, c), Mat::Identity(c, c)};
  starts[1](0, 0) = -1.0;
  Rng rng = make_rng(static_cast<std::uint64_t>(c), RngStream::init);
  for (int k = 0; k < random_starts; ++k) {
    Mat m(c, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = normal01(rng);
    starts.push_back(m);
  }
  BilevelSolution best;
  best.outer = std::numeric_limits<double>::infinity();
  long total = 0;
  for (const auto& s0 : starts) {
    BilevelSolution r = detail::descend_from(pr, s0, opt);
    total += r.iterations;
    if (r.outer < best.outer) best = r;
  }
  best.iterations = total;
  return best;
}

/// Central differences of a scalar pipeline at `phi`, one coordinate at a time.
inline std::vector<double> fd_hypergradient(const std::function<double(const std::vector<double>&)>& pipeline,
                                            const std::vector<double>& phi, double h) {
  std::vector<double> g(phi.size());
  std::vector<double> x = phi;
  for (std::size_t i = 0; i < phi.size(); ++i) {
    x[i] = phi[i] + h;
    const double up = pipeline(x);
    x[i] = phi[i] - h;
    const double dn = pipeline(x);
    x[i] = phi[i];
    g[i] = (up - dn) / (2.0 * h);
  }
  return g;
}

/// ||a - b|| / max(||a||, ||b||), zero when both vanish.
inline double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  double d = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    d += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double den = std::sqrt(std::max(na, nb));
  return den == 0.0 ? 0.0 : std::sqrt(d) / den;
}

/// A small net with a dual adaptor attached, a training batch and a buffer
/// batch: the setting in which the head-restricted hypergradient is checked.
struct HypergradCase {
  ClassifierNet net;
  DualCbaState cba;
  Tensor x_trn, x_buf;
  std::vector<std::size_t> y_trn, y_buf;  // column indices into the active classes
  double alpha = 0.1;

  static HypergradCase random(std::uint64_t seed) {
    Rng rng = make_rng(seed, RngStream::init);
    HypergradCase hc;
    NetConfig nc;
    nc.input_dim = 2 + uniform_index(rng, 7);
    nc.hidden = {3 + uniform_index(rng, 6)};
    const std::size_t classes = 2 + uniform_index(rng, 5);
    nc.max_classes = classes;
    nc.activation = Activation::tanh;
    hc.net = ClassifierNet(nc, rng);
    std::vector<std::size_t> active(classes);
    std::iota(active.begin(), active.end(), 0);
    hc.net.set_active(active);
    const std::size_t n_old = 1 + uniform_index(rng, classes - 1);
    hc.cba = DualCbaState(CbaKind::dual, SpecificHeads::individual, rng);
    reinit_specific(hc.cba, Partition::contiguous(n_old, classes - n_old), rng);
    // Non-zero adaptor outputs so every phi coordinate carries a signal.
    for (Tensor* t : hc.cba.param_refs())
      for (double& v : t->data()) v = uniform(rng, -0.5, 0.5);
    auto batch = [&](std::size_t n, Tensor& x, std::vector<std::size_t>& y) {
      x = Tensor::matrix(n, nc.input_dim);
      for (double& v : x.data()) v = normal01(rng);
      y.resize(n);
      for (auto& l : y) l = uniform_index(rng, classes);
    };
    batch(6 + uniform_index(rng, 6), hc.x_trn, hc.y_trn);
    batch(4 + uniform_index(rng, 6), hc.x_buf, hc.y_buf);
    return hc;
  }

  std::vector<double> phi_flat() {
    std::vector<double> out;
    for (Tensor* t : cba.param_refs()) out.insert(out.end(), t->data().begin(), t->data().end());
    return out;
  }

  void set_phi(DualCbaState& s, const std::vector<double>& flat) const {
    std::size_t k = 0;
    for (Tensor* t : s.param_refs())
      for (double& v : t->data()) v = flat[k++];
  }

  Var trn_loss(const std::vector<Var>& p, const DualCbaState& s, const CbaVars& cv) {
    Var logits = net.forward(p, x_trn, BnMode::batch_only).logits;
    return nd::cross_entropy(dual_cba_forward(s, cv, nd::softmax(net.masked(logits))), y_trn);
  }

  double buf_loss(const std::vector<Tensor>& theta) {
    std::vector<Var> p;
    for (const auto& t : theta) p.push_back(nd::constant(t));
    Var logits = net.forward(p, x_buf, BnMode::batch_only).logits;
    return nd::cross_entropy(nd::softmax(net.masked(logits)), y_buf).value().item();
  }

  /// Body update frozen at the base phi; head update as a function of phi.
  std::function<double(const std::vector<double>&)> pipeline() {
    std::vector<Tensor> body_next;
    {
      nd::Tape tape;
      auto p = net.bind(&tape, Bind::all);
      auto g = tape.gradients(trn_loss(p, cba, cba.bind(nullptr)), p);
      for (std::size_t i = 0; i < p.size(); ++i) body_next.push_back(nd::kernel::axpy(-alpha, g[i], net.params()[i]));
    }
    return [this, body_next](const std::vector<double>& flat) {
      DualCbaState s = cba;
      set_phi(s, flat);
      nd::Tape tape;
      auto p = net.bind(&tape, Bind::head);
      std::vector<Var> head{p[net.head_weight_index()], p[net.head_bias_index()]};
      auto g = tape.gradients(trn_loss(p, s, s.bind(nullptr)), head);
      std::vector<Tensor> theta = body_next;
      theta[net.head_weight_index()] = nd::kernel::axpy(-alpha, g[0], net.params()[net.head_weight_index()]);
      theta[net.head_bias_index()] = nd::kernel::axpy(-alpha, g[1], net.params()[net.head_bias_index()]);
      return buf_loss(theta);
    };
  }

  /// Head-restricted second-order hypergradient from the tape.
  std::vector<double> analytic() {
    nd::Tape tape;
    auto p = net.bind(&tape, Bind::all);
    CbaVars cv = cba.bind(&tape);
    Var loss = trn_loss(p, cba, cv);
    auto g = tape.gradients(loss, p);
    std::vector<Tensor> next = net.params();
    for (std::size_t i = 0; i < next.size(); ++i) next[i] = nd::kernel::axpy(-alpha, g[i], next[i]);
    nd::Tape otape;
    std::vector<Var> q;
    for (std::size_t i = 0; i < next.size(); ++i) q.push_back(net.is_head(i) ? otape.leaf(next[i]) : nd::constant(next[i]));
    Var logits = net.forward(q, x_buf, BnMode::batch_only).logits;
    Var outer = nd::cross_entropy(nd::softmax(net.masked(logits)), y_buf);
    std::vector<Var> hq{q[net.head_weight_index()], q[net.head_bias_index()]};
    auto v = otape.gradients(outer, hq);
    std::vector<Var> head{p[net.head_weight_index()], p[net.head_bias_index()]};
    auto hg = nd::head_double_backward(tape, loss, head, v, cv.leaves, alpha);
    std::vector<double> out;
    for (const auto& t : hg) out.insert(out.end(), t.data().begin(), t.data().end());
    return out;
  }
};

/// L_buf = 1/2 (theta - b)^T H (theta - b) with diagonal H, L_trn =
/// 1/2 ||theta + phi - a||^2. The gradient Lipschitz constant of L_buf is
/// exactly max(H).
struct AlignmentToy {
  std::vector<double> h, a, b;
  std::vector<double> theta, phi;
  double alpha = 0.5;
  double beta = 0.0;  // set by random(): 0.2 / eta

  struct Step {
    long k;
    double inner_product;  // <G_buf(theta^k), G_trn(theta^k, phi^{k+1})>
    double bound;          // alpha * eta / 2 * ||G_trn||^2
  };

  static AlignmentToy random(std::uint64_t seed, std::size_t dim = 4) {
    Rng rng = make_rng(seed, RngStream::init);
    AlignmentToy t;
    for (std::size_t i = 0; i < dim; ++i) {
      t.h.push_back(uniform(rng, 1.0, 1.5));
      t.a.push_back(normal01(rng));
      t.b.push_back(normal01(rng) + 2.0);
      t.theta.push_back(normal01(rng));
      t.phi.push_back(0.0);
    }
    // Per coordinate, (theta - b, G_trn) follows a 2x2 linear recursion whose
    // eigenvalues are real only while beta * alpha^2 * h stays small (about
    // 0.1 at alpha = 0.5); complex eigenvalues mean G_trn rotates against
    // G_buf. 0.2 / eta puts that product at 0.05.
    t.beta = 0.2 / t.lipschitz();
    return t;
  }

  double lipschitz() const { return *std::max_element(h.begin(), h.end()); }

  double buffer_loss(const std::vector<double>& th) const {
    double s = 0;
    for (std::size_t i = 0; i < th.size(); ++i) s += 0.5 * h[i] * (th[i] - b[i]) * (th[i] - b[i]);
    return s;
  }

  /// dL_buf(theta - alpha grad L_trn) / dphi = -alpha H (theta' - b).
  std::vector<double> hypergradient() const {
    std::vector<double> g(theta.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double next = theta[i] - alpha * (theta[i] + phi[i] - a[i]);
      g[i] = -alpha * h[i] * (next - b[i]);
    }
    return g;
  }

  /// Outer step on phi, then the inner step on theta with the updated phi.
  Step step(long k) {
    auto hg = hypergradient();
    for (std::size_t i = 0; i < phi.size(); ++i) phi[i] -= beta * hg[i];
    double ip = 0, nsq = 0;
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double g_trn = theta[i] + phi[i] - a[i];
      const double g_buf = h[i] * (theta[i] - b[i]);
      ip += g_buf * g_trn;
      nsq += g_trn * g_trn;
      theta[i] -= alpha * g_trn;
    }
    return {k, ip, 0.5 * alpha * lipschitz() * nsq};
  }

  std::vector<Step> run(long steps) {
    std::vector<Step> out;
    for (long k = 0; k < steps; ++k) out.push_back(step(k));
    return out;
  }
};

inline std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3e", v);
  return buf;
}

/// One line of the oracle cross-validation report.
struct CheckResult {
  std::string name;
  bool passed = false;
  double worst = 0.0;
  std::string detail;
};

inline CheckResult check_hypergradients(int cases = 50, double tol = 1e-4, double h = 1e-5) {
  CheckResult r{"hypergradient_vs_finite_difference", true, 0.0, ""};
  for (int s = 0; s < cases; ++s) {
    HypergradCase hc = HypergradCase::random(static_cast<std::uint64_t>(1000 + s));
    const double e = relative_error(hc.analytic(), fd_hypergradient(hc.pipeline(), hc.phi_flat(), h));
    r.worst = std::max(r.worst, e);
    if (!(e <= tol)) r.passed = false;
  }
  r.detail = std::to_string(cases) + " nets, worst relative error " + sci(r.worst) + " (tol " + sci(tol) + ")";
  return r;
}

struct LinearBilevelReport {
  CheckResult agreement, stationarity, substitution;
};

inline LinearBilevelReport check_linear_bilevel(int instances = 100, double tol_outer = 1e-6, double tol_grad = 1e-8) {
  LinearBilevelReport rep;
  rep.agreement = {"closed_form_vs_nested_descent", true, 0.0, ""};
  rep.stationarity = {"closed_form_inner_stationarity", true, 0.0, ""};
  rep.substitution = {"closed_form_substitution_form", true, 0.0, ""};
  Rng rng = make_rng(2024, RngStream::data);
  for (int i = 0; i < instances; ++i) {
    ProblemShape s;
    s.p = 2 + static_cast<int>(uniform_index(rng, 4));
    s.c = 1 + static_cast<int>(uniform_index(rng, std::min<std::size_t>(3, static_cast<std::size_t>(s.p))));
    s.n_trn = s.p + 2 + static_cast<int>(uniform_index(rng, 8));
    s.n_buf = s.c + 1 + static_cast<int>(uniform_index(rng, 8));
    auto pr = random_problem(s, rng);
    auto cf = closed_form_solution(pr);
    auto nd = nested_descent_solution(pr);
    const double d = std::abs(cf.outer - nd.outer);
    const double gn = pr.inner_gradient(cf.theta, cf.phi).norm();
    const double alt = (cf.theta - cf.theta_alt).cwiseAbs().maxCoeff();
    rep.agreement.worst = std::max(rep.agreement.worst, d);
    rep.stationarity.worst = std::max(rep.stationarity.worst, gn);
    rep.substitution.worst = std::max(rep.substitution.worst, alt);
    if (!(d <= tol_outer)) rep.agreement.passed = false;
    if (!(gn <= tol_grad)) rep.stationarity.passed = false;
    if (!(alt <= 1e-8)) rep.substitution.passed = false;
  }
  rep.agreement.detail = "worst |outer_cf - outer_nd| " + sci(rep.agreement.worst);
  rep.stationarity.detail = "worst inner gradient norm " + sci(rep.stationarity.worst);
  rep.substitution.detail = "worst |theta - theta_alt| " + sci(rep.substitution.worst);
  return rep;
}

inline CheckResult check_alignment_toy(int seeds = 10, long steps = 100, long warmup = 20) {
  CheckResult r{"alignment_inequality_on_quadratic_toy", true, std::numeric_limits<double>::infinity(), ""};
  for (int s = 0; s < seeds; ++s) {
    AlignmentToy toy = AlignmentToy::random(static_cast<std::uint64_t>(s));
    for (const auto& st : toy.run(steps)) {
      if (st.k < warmup) continue;
      r.worst = std::min(r.worst, st.inner_product - st.bound);
      if (!(st.inner_product >= st.bound)) r.passed = false;
    }
  }
  r.detail = "min slack <G_buf,G_trn> - (alpha eta/2)||G_trn||^2 after step " + std::to_string(warmup) + ": " +
             sci(r.worst);
  return r;
}

}  // namespace dcba::oracle
