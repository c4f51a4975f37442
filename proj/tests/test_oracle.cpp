#include <gtest/gtest.h>

#include <cmath>

#include "dualcba/oracle.hpp"

using namespace dcba;
using namespace dcba::oracle;

namespace {

LinearBilevelProblem default_problem(std::uint64_t seed) {
  Rng rng = make_rng(seed, RngStream::data);
  return random_problem(ProblemShape{}, rng);
}

// Noise-free labels from one linear map on both sides: no shift to absorb.
LinearBilevelProblem matched_problem(std::uint64_t seed) {
  Rng rng = make_rng(seed, RngStream::data);
  auto gauss = [&](Eigen::Index r, Eigen::Index c) {
    Mat m(r, c);
    for (Eigen::Index j = 0; j < c; ++j)
      for (Eigen::Index i = 0; i < r; ++i) m(i, j) = normal01(rng);
    return m;
  };
  LinearBilevelProblem pr;
  pr.x_trn = gauss(3, 8);
  pr.x_buf = gauss(3, 4);
  const Mat t = gauss(3, 2);
  pr.y_trn = pr.x_trn.transpose() * t;
  pr.y_buf = pr.x_buf.transpose() * t;
  return pr;
}

double max_abs(const Mat& m) { return m.cwiseAbs().maxCoeff(); }

}  // namespace

// --- closed form -----------------------------------------------------------

TEST(ClosedForm, MatchedDataGivesIdentityAdaptor) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    auto cf = closed_form_solution(matched_problem(s));
    EXPECT_LE(max_abs(cf.phi - Mat::Identity(2, 2)), 1e-10);
    EXPECT_LE(cf.outer, 1e-20);
  }
}

TEST(ClosedForm, InnerStationarity) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    auto pr = default_problem(s);
    auto cf = closed_form_solution(pr);
    EXPECT_LE(pr.inner_gradient(cf.theta, cf.phi).norm(), 1e-8) << "seed " << s;
  }
}

TEST(ClosedForm, SubstitutionFormAgrees) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    auto cf = closed_form_solution(default_problem(s));
    EXPECT_LE(max_abs(cf.theta - cf.theta_alt), 1e-8);
  }
}

TEST(ClosedForm, PerturbationsDoNotImproveOuterLoss) {
  auto pr = default_problem(7);
  auto cf = closed_form_solution(pr);
  Rng rng = make_rng(8, RngStream::data);
  for (int k = 0; k < 100; ++k) {
    Mat d(2, 2);
    for (Eigen::Index i = 0; i < 4; ++i) d(i) = 1e-3 * normal01(rng);
    const double perturbed = pr.outer_loss(inner_least_squares(pr, cf.phi + d));
    EXPECT_GE(perturbed, cf.outer - 1e-12);
  }
}

TEST(ClosedForm, InnerLeastSquaresMatchesClosedTheta) {
  auto pr = default_problem(3);
  auto cf = closed_form_solution(pr);
  EXPECT_LE(max_abs(inner_least_squares(pr, cf.phi) - cf.theta), 1e-8);
}

TEST(ClosedForm, SingularDesignIsError) {
  auto pr = default_problem(1);
  pr.x_trn.row(2) = pr.x_trn.row(0);  // rank 2 < p
  EXPECT_THROW(closed_form_solution(pr), SingularityError);
}

TEST(ClosedForm, DegenerateLabelsAreError) {
  auto pr = default_problem(1);
  pr.y_trn.col(1).setZero();  // the label cross moment loses rank
  EXPECT_THROW(closed_form_solution(pr), SingularityError);
}

TEST(ClosedForm, ShapeChecks) {
  Rng rng = make_rng(0, RngStream::data);
  ProblemShape s;
  s.p = 9;  // more features than training rows
  EXPECT_THROW(random_problem(s, rng), DimensionError);
}

// --- nested descent ----------------------------------------------------------

TEST(NestedDescent, AgreesWithClosedForm) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    auto pr = default_problem(s);
    auto cf = closed_form_solution(pr);
    auto nd = nested_descent_solution(pr);
    EXPECT_LE(std::abs(cf.outer - nd.outer), 1e-6) << "seed " << s;
    EXPECT_GT(nd.iterations, 0);
  }
}

TEST(NestedDescent, MatchedCaseReachesZeroLoss) {
  auto nd = nested_descent_solution(matched_problem(2));
  EXPECT_LE(nd.outer, 1e-12);
}

TEST(NestedDescent, Deterministic) {
  auto a = nested_descent_solution(default_problem(4));
  auto b = nested_descent_solution(default_problem(4));
  EXPECT_EQ(a.outer, b.outer);
  EXPECT_EQ(a.phi, b.phi);
  EXPECT_EQ(a.iterations, b.iterations);
}

TEST(NestedDescent, ProblemGeneratorDeterministic) {
  auto a = default_problem(11), b = default_problem(11), c = default_problem(12);
  EXPECT_EQ(a.x_trn, b.x_trn);
  EXPECT_EQ(a.y_buf, b.y_buf);
  EXPECT_NE(a.x_trn, c.x_trn);
}

TEST(NestedDescent, ReportPassesOnSmallSweep) {
  auto rep = check_linear_bilevel(10, 1e-6, 1e-8);
  EXPECT_TRUE(rep.agreement.passed) << rep.agreement.detail;
  EXPECT_TRUE(rep.stationarity.passed) << rep.stationarity.detail;
  EXPECT_TRUE(rep.substitution.passed) << rep.substitution.detail;
}

// --- finite differences ------------------------------------------------------

TEST(FiniteDifference, ConstantPipelineIsZero) {
  auto g = fd_hypergradient([](const std::vector<double>&) { return 3.5; }, {0.1, -2.0, 4.0}, 1e-5);
  for (double v : g) EXPECT_EQ(v, 0.0);
}

TEST(FiniteDifference, ScalarLookAheadMatchesSymbolic) {
  // 1/2 (theta - alpha phi (theta phi - 1))^2 with theta fixed
  const double theta = 0.8, alpha = 0.1;
  auto pipeline = [&](const std::vector<double>& phi) {
    const double next = theta - alpha * phi[0] * (theta * phi[0] - 1);
    return 0.5 * next * next;
  };
  for (double phi : {-1.0, 0.3, 1.0, 2.5}) {
    const double next = theta - alpha * phi * (theta * phi - 1);
    const double symbolic = next * (-alpha * (2 * theta * phi - 1));
    const double fd = fd_hypergradient(pipeline, {phi}, 1e-5)[0];
    EXPECT_NEAR(fd, symbolic, 1e-8 * (1 + std::abs(symbolic)));
  }
}

TEST(FiniteDifference, SecondOrderConvergence) {
  auto f = [](const std::vector<double>& x) { return std::exp(x[0]) + std::sin(x[1]); };
  const std::vector<double> at{0.3, 0.7};
  auto err = [&](double h) {
    auto g = fd_hypergradient(f, at, h);
    return std::hypot(g[0] - std::exp(0.3), g[1] - std::cos(0.7));
  };
  const double ratio = err(1e-2) / err(5e-3);
  EXPECT_NEAR(ratio, 4.0, 0.05);
}

TEST(FiniteDifference, RelativeError) {
  EXPECT_EQ(relative_error({0, 0}, {0, 0}), 0.0);
  EXPECT_DOUBLE_EQ(relative_error({1, 0}, {0, 0}), 1.0);
  EXPECT_DOUBLE_EQ(relative_error({3, 4}, {3, 4}), 0.0);
}

// --- adaptor hypergradient ---------------------------------------------------

TEST(Hypergradient, AnalyticMatchesFiniteDifference) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    HypergradCase hc = HypergradCase::random(s);
    auto a = hc.analytic();
    auto fd = fd_hypergradient(hc.pipeline(), hc.phi_flat(), 1e-5);
    ASSERT_EQ(a.size(), fd.size());
    double norm = 0;
    for (double v : a) norm += v * v;
    EXPECT_GT(norm, 0.0) << "seed " << s;
    EXPECT_LE(relative_error(a, fd), 1e-4) << "seed " << s;
  }
}

TEST(Hypergradient, CaseGeneratorDeterministic) {
  HypergradCase a = HypergradCase::random(9), b = HypergradCase::random(9);
  EXPECT_EQ(a.phi_flat(), b.phi_flat());
  EXPECT_EQ(a.analytic(), b.analytic());
}

TEST(Hypergradient, CheckReportsWorstError) {
  auto r = check_hypergradients(5, 1e-4);
  EXPECT_TRUE(r.passed) << r.detail;
  EXPECT_LE(r.worst, 1e-4);
  auto strict = check_hypergradients(5, 0.0);
  EXPECT_FALSE(strict.passed);
}

// --- alignment toy -----------------------------------------------------------

TEST(AlignmentToy, InequalityHoldsAfterWarmup) {
  auto r = check_alignment_toy();
  EXPECT_TRUE(r.passed) << r.detail;
  EXPECT_GE(r.worst, 0.0);
}

TEST(AlignmentToy, HypergradientMatchesFiniteDifference) {
  AlignmentToy toy = AlignmentToy::random(3);
  toy.phi = {0.1, -0.2, 0.3, 0.05};
  auto pipeline = [&](const std::vector<double>& phi) {
    AlignmentToy t = toy;
    std::vector<double> next(t.theta.size());
    for (std::size_t i = 0; i < next.size(); ++i) next[i] = t.theta[i] - t.alpha * (t.theta[i] + phi[i] - t.a[i]);
    return t.buffer_loss(next);
  };
  EXPECT_LE(relative_error(toy.hypergradient(), fd_hypergradient(pipeline, toy.phi, 1e-5)), 1e-8);
}

TEST(AlignmentToy, OuterStepsReduceBufferLoss) {
  AlignmentToy toy = AlignmentToy::random(5);
  const double start = toy.buffer_loss(toy.theta);
  toy.run(100);
  EXPECT_LT(toy.buffer_loss(toy.theta), start);
}
