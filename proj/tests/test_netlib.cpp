#include <gtest/gtest.h>

#include <cmath>
#include <sstream>
#include <vector>

#include "dualcba/cba.hpp"
#include "dualcba/net.hpp"
#include "dualcba/snapshot.hpp"

using namespace dcba;

namespace {

Tensor random_tensor(std::size_t r, std::size_t c, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::matrix(r, c);
  for (double& v : t.data()) v = uniform(rng, lo, hi);
  return t;
}

Tensor random_posterior(std::size_t n, std::size_t c, Rng& rng) {
  return nd::softmax(nd::constant(random_tensor(n, c, rng, -3, 3))).value();
}

// Single hidden layer of width d with identity weights and activation.
ClassifierNet identity_net(std::size_t d) {
  Rng rng = make_rng(0, RngStream::init);
  NetConfig nc;
  nc.input_dim = d;
  nc.hidden = {d};
  nc.max_classes = 2;
  nc.activation = Activation::identity;
  ClassifierNet net(nc, rng);
  Tensor w = Tensor::matrix(d, d);
  for (std::size_t i = 0; i < d; ++i) w(i, i) = 1.0;
  net.params()[0] = w;
  net.set_active({0, 1});
  return net;
}

// Columns with zero mean and biased variance `var`.
Tensor standardized_batch(std::size_t n, std::size_t d, double var, Rng& rng) {
  Tensor x = random_tensor(n, d, rng);
  for (std::size_t j = 0; j < d; ++j) {
    double m = 0, v = 0;
    for (std::size_t i = 0; i < n; ++i) m += x(i, j) / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) v += (x(i, j) - m) * (x(i, j) - m) / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) x(i, j) = (x(i, j) - m) / std::sqrt(v) * std::sqrt(var);
  }
  return x;
}

void set_mlp_constant(Mlp& m, const std::vector<double>& out) {
  for (double& v : m.w2.data()) v = 0.0;
  for (std::size_t j = 0; j < out.size(); ++j) m.b2[j] = out[j];
}

void randomize(DualCbaState& s, Rng& rng, double scale) {
  for (auto* t : s.param_refs())
    for (double& v : t->data()) v = uniform(rng, -scale, scale);
}

DualCbaState make_state(CbaKind kind, Partition p, std::uint64_t seed = 0) {
  Rng rng = make_rng(seed, RngStream::cba);
  DualCbaState s(kind, SpecificHeads::individual, rng);
  reinit_specific(s, std::move(p), rng);
  return s;
}

void expect_distribution(const Tensor& y, double tol = 1e-12) {
  for (std::size_t i = 0; i < y.rows(); ++i) {
    double sum = 0;
    for (std::size_t j = 0; j < y.cols(); ++j) {
      EXPECT_GE(y(i, j), 0.0);
      sum += y(i, j);
    }
    EXPECT_NEAR(sum, 1.0, tol);
  }
}

}  // namespace

// --- classifier / batch norm -----------------------------------------------

TEST(BatchNorm, IdentityOnStandardizedBatch) {
  // Variance 1 - eps makes the normaliser exactly 1.
  Rng rng = make_rng(1, RngStream::data);
  ClassifierNet net = identity_net(4);
  Tensor x = standardized_batch(16, 4, 1.0 - kBnEpsilon, rng);
  auto out = net.forward(net.bind(nullptr, Bind::none), x, BnMode::train).features.value();
  EXPECT_LE(nd::kernel::max_abs_diff(out, x), 1e-10);
}

TEST(BatchNorm, UnitVarianceBatchWithinEpsilon) {
  Rng rng = make_rng(2, RngStream::data);
  ClassifierNet net = identity_net(3);
  Tensor x = standardized_batch(20, 3, 1.0, rng);
  auto out = net.forward(net.bind(nullptr, Bind::none), x, BnMode::train).features.value();
  double peak = 0;
  for (double v : x.values()) peak = std::max(peak, std::abs(v));
  EXPECT_LE(nd::kernel::max_abs_diff(out, x), peak * kBnEpsilon);
}

TEST(BatchNorm, FrozenTrainForwardKeepsStatistics) {
  Rng rng = make_rng(3, RngStream::data);
  NetConfig nc;
  nc.input_dim = 5;
  nc.hidden = {6, 4};
  ClassifierNet net(nc, rng);
  net.set_frozen(true);
  const auto before = net.bn();
  Tensor x = random_tensor(8, 5, rng);
  net.forward(net.bind(nullptr, Bind::none), x, BnMode::train);
  net.forward(net.bind(nullptr, Bind::none), x, BnMode::train);
  for (std::size_t l = 0; l < before.size(); ++l) {
    EXPECT_EQ(net.bn()[l].population_mean, before[l].population_mean);
    EXPECT_EQ(net.bn()[l].population_var, before[l].population_var);
  }
}

TEST(BatchNorm, UnfrozenTrainForwardUpdatesStatistics) {
  Rng rng = make_rng(4, RngStream::data);
  NetConfig nc;
  nc.input_dim = 5;
  ClassifierNet net(nc, rng);
  const auto before = net.bn()[0].population_mean;
  net.forward(net.bind(nullptr, Bind::none), random_tensor(8, 5, rng), BnMode::train);
  EXPECT_NE(net.bn()[0].population_mean, before);
  EXPECT_TRUE(net.bn()[0].initialized);
}

TEST(BatchNorm, StatCollectIgnoresFrozenAndBatchOnlyNeverWrites) {
  Rng rng = make_rng(5, RngStream::data);
  NetConfig nc;
  nc.input_dim = 3;
  ClassifierNet net(nc, rng);
  net.set_frozen(true);
  Tensor x = random_tensor(6, 3, rng);
  auto before = net.bn()[0].population_mean;
  net.forward(net.bind(nullptr, Bind::none), x, BnMode::batch_only);
  EXPECT_EQ(net.bn()[0].population_mean, before);
  net.forward(net.bind(nullptr, Bind::none), x, BnMode::stat_collect);
  EXPECT_NE(net.bn()[0].population_mean, before);
}

TEST(BatchNorm, EvalMatchesTrainWithInjectedStatistics) {
  Rng rng = make_rng(6, RngStream::data);
  NetConfig nc;
  nc.input_dim = 4;
  nc.hidden = {5};
  nc.max_classes = 3;
  ClassifierNet net(nc, rng);
  net.set_active({0, 1, 2});
  Tensor x = random_tensor(10, 4, rng);
  // batch statistics of the pre-BN activations, computed outside the net
  Tensor z = nd::kernel::matmul(x, net.params()[0]);
  Tensor mean = Tensor::matrix(1, 5), var = Tensor::matrix(1, 5);
  for (std::size_t j = 0; j < 5; ++j) {
    for (std::size_t i = 0; i < 10; ++i) mean[j] += z(i, j) / 10.0;
    for (std::size_t i = 0; i < 10; ++i) var[j] += (z(i, j) - mean[j]) * (z(i, j) - mean[j]) / 10.0;
  }
  Tensor train = net.logits(x, BnMode::batch_only);
  net.bn()[0].population_mean = mean;
  net.bn()[0].population_var = var;
  net.bn()[0].initialized = true;
  EXPECT_LE(nd::kernel::max_abs_diff(net.logits(x, BnMode::eval), train), 1e-12);
}

TEST(BatchNorm, EvalBeforeStatisticsIsStateError) {
  Rng rng = make_rng(7, RngStream::data);
  NetConfig nc;
  nc.input_dim = 2;
  ClassifierNet net(nc, rng);
  net.set_active({0});
  EXPECT_THROW(net.logits(Tensor::matrix(3, 2, 1.0), BnMode::eval), StateError);
}

TEST(Classifier, MasksInactiveClasses) {
  Rng rng = make_rng(8, RngStream::data);
  NetConfig nc;
  nc.input_dim = 3;
  nc.max_classes = 6;
  ClassifierNet net(nc, rng);
  net.set_active({4, 1});
  Tensor x = random_tensor(7, 3, rng);
  Tensor full = net.forward(net.bind(nullptr, Bind::none), x, BnMode::batch_only).logits.value();
  Tensor masked = net.logits(x, BnMode::batch_only);
  ASSERT_EQ(masked.cols(), 2u);
  for (std::size_t i = 0; i < 7; ++i) {
    EXPECT_EQ(masked(i, 0), full(i, 4));
    EXPECT_EQ(masked(i, 1), full(i, 1));
  }
  for (auto c : net.predict(x, BnMode::batch_only)) EXPECT_TRUE(c == 4 || c == 1);
  EXPECT_THROW(net.set_active({6}), IndexError);
}

TEST(Classifier, InputWidthMismatch) {
  Rng rng = make_rng(9, RngStream::data);
  NetConfig nc;
  nc.input_dim = 3;
  ClassifierNet net(nc, rng);
  net.set_active({0});
  EXPECT_THROW(net.logits(Tensor::matrix(2, 4), BnMode::batch_only), DimensionError);
}

TEST(Classifier, BodyAndHeadRegions) {
  Rng rng = make_rng(10, RngStream::data);
  NetConfig nc;
  nc.input_dim = 3;
  ClassifierNet net(nc, rng);
  nd::Tape tape;
  auto p = net.bind(&tape, Bind::all);
  net.forward(p, random_tensor(4, 3, rng), BnMode::batch_only);
  EXPECT_GT(tape.count(nd::Region::body), 0u);
  EXPECT_EQ(tape.count(nd::Region::head), 2u);  // matmul + bias add
  EXPECT_EQ(tape.count(nd::Region::adaptor), 0u);
}

TEST(Snapshot, RoundTripIsExact) {
  Rng rng = make_rng(11, RngStream::data);
  NetConfig nc;
  nc.input_dim = 4;
  nc.hidden = {3, 5};
  ClassifierNet net(nc, rng);
  net.forward(net.bind(nullptr, Bind::none), random_tensor(6, 4, rng), BnMode::train);
  std::stringstream ss;
  write_snapshot(ss, snapshot_of(net));
  Rng other = make_rng(12, RngStream::data);
  ClassifierNet copy(nc, other);
  restore(copy, read_snapshot(ss));
  EXPECT_EQ(copy.params(), net.params());
  for (std::size_t l = 0; l < net.bn().size(); ++l) {
    EXPECT_EQ(copy.bn()[l].population_mean, net.bn()[l].population_mean);
    EXPECT_EQ(copy.bn()[l].population_var, net.bn()[l].population_var);
  }
}

TEST(Snapshot, RejectsMismatches) {
  Rng rng = make_rng(13, RngStream::data);
  NetConfig a;
  a.input_dim = 4;
  NetConfig b = a;
  b.hidden = {7};
  ClassifierNet na(a, rng), nb(b, rng);
  EXPECT_THROW(restore(nb, snapshot_of(na)), DimensionError);
  std::stringstream bad("DCBAPARX");
  EXPECT_THROW(read_snapshot(bad), IoError);
}

// --- class-specific adaptor ------------------------------------------------

TEST(CbaSpecific, FreshHeadsAreExactIdentity) {
  Rng rng = make_rng(20, RngStream::data);
  auto s = make_state(CbaKind::specific, Partition::contiguous(3, 2));
  Tensor post = random_posterior(9, 5, rng);
  Tensor out = cba_specific_forward(s, s.bind(nullptr), nd::constant(post)).value();
  // zero MLP + skip leaves the row unchanged; renormalising a distribution is exact up to rounding
  EXPECT_LE(nd::kernel::max_abs_diff(out, post), 1e-15);
}

TEST(CbaSpecific, ProportionalOutputRenormalizes) {
  auto s = make_state(CbaKind::specific, Partition::contiguous(2, 2));
  set_mlp_constant(s.omega[0].mlp, {0.1, 0.2});
  set_mlp_constant(s.omega[1].mlp, {0.3, 0.4});
  Tensor post = Tensor::from_rows({{0.1, 0.2, 0.3, 0.4}});
  Tensor out = cba_specific_forward(s, s.bind(nullptr), nd::constant(post)).value();
  for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(out[j], post[j], 1e-15);
}

TEST(CbaSpecific, RandomHeadsGiveDistributions) {
  Rng rng = make_rng(21, RngStream::data);
  for (int trial = 0; trial < 1000; ++trial) {
    auto s = make_state(CbaKind::specific, Partition::contiguous(1 + trial % 3, 1 + trial % 4), trial);
    randomize(s, rng, 3.0);
    Tensor out = dual_cba_apply(s, random_posterior(4, s.partition.width(), rng));
    expect_distribution(out);
  }
}

TEST(CbaSpecific, WidthMismatchIsDimensionError) {
  auto s = make_state(CbaKind::specific, Partition::contiguous(2, 2));
  EXPECT_THROW(dual_cba_apply(s, Tensor::matrix(1, 3, 1.0 / 3)), DimensionError);
}

TEST(CbaSpecific, SingleHeadVariant) {
  Rng rng = make_rng(22, RngStream::cba);
  DualCbaState s(CbaKind::specific, SpecificHeads::single, rng);
  reinit_specific(s, Partition::contiguous(2, 3), rng);
  ASSERT_EQ(s.omega.size(), 1u);
  EXPECT_EQ(s.omega[0].mlp.in(), 5u);
  Tensor post = random_posterior(3, 5, rng);
  EXPECT_LE(nd::kernel::max_abs_diff(dual_cba_apply(s, post), post), 1e-15);
}

// --- class-agnostic adaptor -------------------------------------------------

TEST(CbaAgnostic, IdentityNuSplitsGroupMass) {
  auto s = make_state(CbaKind::agnostic, Partition::contiguous(2, 2));
  Tensor out = cba_agnostic_forward(s, s.bind(nullptr), nd::constant(Tensor::from_rows({{0.1, 0.2, 0.3, 0.4}}))).value();
  EXPECT_NEAR(out[0], 0.15, 1e-15);
  EXPECT_NEAR(out[1], 0.15, 1e-15);
  EXPECT_NEAR(out[2], 0.35, 1e-15);
  EXPECT_NEAR(out[3], 0.35, 1e-15);
}

TEST(CbaAgnostic, GroupMasses) {
  Tensor post = Tensor::from_rows({{0.1, 0.2, 0.3, 0.4}});
  double old_mass = post[0] + post[1], new_mass = post[2] + post[3];
  EXPECT_NEAR(old_mass, 0.3, 1e-15);
  EXPECT_NEAR(new_mass, 0.7, 1e-15);
  // the adaptor sees the same pair: with identity nu the group totals are preserved
  auto s = make_state(CbaKind::agnostic, Partition::contiguous(2, 2));
  Tensor out = dual_cba_apply(s, post);
  EXPECT_NEAR(out[0] + out[1], 0.3, 1e-15);
  EXPECT_NEAR(out[2] + out[3], 0.7, 1e-15);
}

TEST(CbaAgnostic, ConstantWithinGroupsForAnyNu) {
  Rng rng = make_rng(30, RngStream::data);
  for (int trial = 0; trial < 200; ++trial) {
    Partition p;
    // interleaved columns: old = even, new = odd
    const std::size_t width = 2 + static_cast<std::size_t>(trial % 5);
    for (std::size_t c = 0; c < width; ++c) (c % 2 ? p.new_cols : p.old_cols).push_back(c);
    auto s = make_state(CbaKind::agnostic, p, trial);
    randomize(s, rng, 2.0);
    Tensor out = cba_agnostic_forward(s, s.bind(nullptr), nd::constant(random_posterior(3, width, rng))).value();
    expect_distribution(out);
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t c = 2; c < width; ++c) EXPECT_EQ(out(i, c), out(i, c - 2));
  }
}

TEST(CbaAgnostic, DegeneratePartitionIsError) {
  auto s = make_state(CbaKind::agnostic, Partition::contiguous(0, 3));
  EXPECT_THROW(cba_agnostic_forward(s, s.bind(nullptr), nd::constant(Tensor::matrix(1, 3, 1.0 / 3))), PartitionError);
  // dual_cba_forward bypasses instead
  Tensor post = Tensor::from_rows({{0.2, 0.3, 0.5}});
  EXPECT_EQ(dual_cba_apply(s, post), post);
}

// --- dual adaptor ----------------------------------------------------------

TEST(CbaDual, IdentityBranchesGiveInput) {
  Rng rng = make_rng(40, RngStream::data);
  auto s = make_state(CbaKind::dual, Partition::contiguous(3, 2));
  Tensor post = random_posterior(6, 5, rng);
  // agnostic branch with identity nu spreads group mass evenly, so identity needs a posterior
  // that is already uniform within groups
  Tensor grouped = post;
  for (std::size_t i = 0; i < 6; ++i) {
    const double o = (post(i, 0) + post(i, 1) + post(i, 2)) / 3, n = (post(i, 3) + post(i, 4)) / 2;
    for (std::size_t c = 0; c < 3; ++c) grouped(i, c) = o;
    for (std::size_t c = 3; c < 5; ++c) grouped(i, c) = n;
  }
  EXPECT_LE(nd::kernel::max_abs_diff(dual_cba_apply(s, grouped), grouped), 1e-15);
}

TEST(CbaDual, AveragesTheBranches) {
  Rng rng = make_rng(41, RngStream::data);
  for (int trial = 0; trial < 100; ++trial) {
    auto s = make_state(CbaKind::dual, Partition::contiguous(2, 3), trial);
    randomize(s, rng, 1.5);
    Var post = nd::constant(random_posterior(4, 5, rng));
    auto v = s.bind(nullptr);
    Tensor spc = cba_specific_forward(s, v, post).value();
    Tensor agn = cba_agnostic_forward(s, v, post).value();
    Tensor dual = dual_cba_forward(s, v, post).value();
    for (std::size_t k = 0; k < dual.size(); ++k) EXPECT_EQ(dual[k], 0.5 * (spc[k] + agn[k]));
    expect_distribution(dual);
  }
}

TEST(CbaDual, FirstTaskBypassesAgnosticBranch) {
  Rng rng = make_rng(42, RngStream::data);
  auto s = make_state(CbaKind::dual, Partition::contiguous(0, 4));
  EXPECT_FALSE(s.uses_agnostic());
  randomize(s, rng, 1.0);
  Var post = nd::constant(random_posterior(3, 4, rng));
  auto v = s.bind(nullptr);
  EXPECT_EQ(dual_cba_forward(s, v, post).value(), cba_specific_forward(s, v, post).value());
}

TEST(CbaDual, ForwardIsRecordedAsAdaptor) {
  Rng rng = make_rng(43, RngStream::data);
  auto s = make_state(CbaKind::dual, Partition::contiguous(2, 2));
  nd::Tape tape;
  auto v = s.bind(&tape);
  dual_cba_forward(s, v, nd::constant(random_posterior(2, 4, rng)));
  EXPECT_GT(tape.count(nd::Region::adaptor), 0u);
  EXPECT_EQ(tape.count(nd::Region::body), 0u);
}

// --- reinit ----------------------------------------------------------------

TEST(Reinit, SpecificBranchIsIdentityAfterReinit) {
  Rng rng = make_rng(50, RngStream::data);
  auto s = make_state(CbaKind::dual, Partition::contiguous(2, 2));
  randomize(s, rng, 1.0);
  reinit_specific(s, Partition::contiguous(4, 2), rng);
  Tensor post = random_posterior(5, 6, rng);
  EXPECT_LE(nd::kernel::max_abs_diff(cba_specific_forward(s, s.bind(nullptr), nd::constant(post)).value(), post), 1e-15);
}

TEST(Reinit, NuCarriedOverBitExactly) {
  Rng rng = make_rng(51, RngStream::data);
  auto s = make_state(CbaKind::dual, Partition::contiguous(2, 2));
  randomize(s, rng, 1.0);
  const Mlp nu = s.nu;
  reinit_specific(s, Partition::contiguous(4, 2), rng);
  EXPECT_EQ(s.nu.w1, nu.w1);
  EXPECT_EQ(s.nu.b1, nu.b1);
  EXPECT_EQ(s.nu.w2, nu.w2);
  EXPECT_EQ(s.nu.b2, nu.b2);
}

TEST(Reinit, HeadWidthsFollowPartition) {
  auto s = make_state(CbaKind::dual, Partition::contiguous(10, 10));
  ASSERT_EQ(s.omega.size(), 2u);
  ASSERT_NE(s.omega_old(), nullptr);
  ASSERT_NE(s.omega_new(), nullptr);
  EXPECT_EQ(s.omega_old()->mlp.in(), 10u);
  EXPECT_EQ(s.omega_old()->mlp.out(), 10u);
  EXPECT_EQ(s.omega_new()->mlp.in(), 10u);
  EXPECT_EQ(s.omega_old()->cols.front(), 0u);
  EXPECT_EQ(s.omega_new()->cols.front(), 10u);
  EXPECT_EQ(s.omega_old()->mlp.hidden(), 20u);  // default width factor 2
}

TEST(Reinit, OverlappingPartitionIsError) {
  auto s = make_state(CbaKind::dual, Partition::contiguous(1, 1));
  Rng rng = make_rng(52, RngStream::cba);
  Partition p;
  p.old_cols = {0, 1};
  p.new_cols = {1, 2};
  EXPECT_THROW(reinit_specific(s, p, rng), PartitionError);
  Partition gap;
  gap.old_cols = {0};
  gap.new_cols = {5};
  EXPECT_THROW(reinit_specific(s, gap, rng), PartitionError);
}
