#include <cmath>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "scalable_linucb/lowrank_factor.hpp"

namespace slu = scalable_linucb;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

const double kBetaUnit = 1.0 - 1.0 / std::sqrt(2.0);  // β for ‖x̄‖ = 1

VectorXd unit(Eigen::Index d, Eigen::Index i) { return VectorXd::Unit(d, i); }

// (I + Q Y Qᵀ)(I + Q Y Qᵀ)ᵀ with Y recovered from C = (Y⁻¹ + I)⁻¹.
MatrixXd factored_product(const slu::UpdatePlan& plan, Eigen::Index d) {
  const Eigen::Index b = plan.c_core.rows();
  const MatrixXd id_b = MatrixXd::Identity(b, b);
  const MatrixXd y = (plan.c_core.inverse() - id_b).inverse();
  const MatrixXd f = MatrixXd::Identity(d, d) + plan.q_basis * y * plan.q_basis.transpose();
  return f * f.transpose();
}

}  // namespace

TEST(NewFactor, IdentityInitialFactor) {
  slu::InverseFactor f(3, 1.0, 2);
  EXPECT_EQ(f.columns(), 0);
  EXPECT_FALSE(f.compressed());
  EXPECT_TRUE(f.whiten(unit(3, 0)).isApprox(unit(3, 0)));
}

TEST(NewFactor, EpsScalesInitialRoot) {
  slu::InverseFactor f(2, 4.0, 2);
  EXPECT_TRUE(f.whiten(unit(2, 0)).isApprox(2.0 * unit(2, 0)));
  EXPECT_DOUBLE_EQ(f.lambda(), 0.25);
}

TEST(NewFactor, RejectsInvalidArguments) {
  EXPECT_THROW(slu::InverseFactor(2, 0.0, 2), std::invalid_argument);
  EXPECT_THROW(slu::InverseFactor(0, 1.0, 2), std::invalid_argument);
  EXPECT_THROW(slu::InverseFactor(2, 1.0, 0), std::invalid_argument);
  EXPECT_THROW(slu::InverseFactor(2, -1.0, 2), std::invalid_argument);
}

TEST(Whiten, Examples) {
  slu::InverseFactor f(2, 1.0, 2);
  EXPECT_TRUE(f.whiten(VectorXd{{1.0, 2.0}}).isApprox(VectorXd{{1.0, 2.0}}));
  f.rank1_update(unit(2, 0));
  EXPECT_NEAR((f.whiten(unit(2, 0)) - unit(2, 0) / std::sqrt(2.0)).norm(), 0.0, 1e-15);
  EXPECT_NEAR((f.whiten(unit(2, 1)) - unit(2, 1)).norm(), 0.0, 1e-15);
  EXPECT_THROW(f.whiten(VectorXd::Ones(3)), std::invalid_argument);
}

TEST(BonusNorm, Examples) {
  slu::InverseFactor f(2, 1.0, 4);
  EXPECT_DOUBLE_EQ(f.bonus_norm(unit(2, 1)), 1.0);
  f.rank1_update(unit(2, 0));
  EXPECT_NEAR(f.bonus_norm(unit(2, 0)), 1.0 / std::sqrt(2.0), 1e-15);
  f.rank1_update(unit(2, 1));
  EXPECT_NEAR(f.bonus_norm(VectorXd{{1.0, 1.0}}), 1.0, 1e-14);
  EXPECT_THROW(f.bonus_norm(VectorXd::Ones(1)), std::invalid_argument);
}

TEST(ApplyGramInverse, Examples) {
  slu::InverseFactor f(2, 1.0, 4);
  EXPECT_TRUE(f.apply_gram_inverse(VectorXd{{3.0, -1.0}}).isApprox(VectorXd{{3.0, -1.0}}));
  f.rank1_update(unit(2, 0));
  EXPECT_NEAR((f.apply_gram_inverse(unit(2, 0)) - 0.5 * unit(2, 0)).norm(), 0.0, 1e-15);

  slu::InverseFactor g(2, 0.5, 4);
  EXPECT_NEAR((g.apply_gram_inverse(unit(2, 1)) - 0.5 * unit(2, 1)).norm(), 0.0, 1e-15);
  EXPECT_THROW(g.apply_gram_inverse(VectorXd::Ones(5)), std::invalid_argument);
}

TEST(Rank1Update, FirstUpdateMatchesClosedForm) {
  slu::InverseFactor f(2, 1.0, 4);
  ASSERT_EQ(f.rank1_update(unit(2, 0)), 1);
  ASSERT_EQ(f.columns(), 1);
  EXPECT_NEAR((f.u_factor().col(0) - kBetaUnit * unit(2, 0)).norm(), 0.0, 1e-15);
  EXPECT_NEAR((f.v_factor().col(0) - unit(2, 0)).norm(), 0.0, 1e-15);
  const MatrixXd expected = VectorXd{{0.5, 1.0}}.asDiagonal();
  EXPECT_NEAR((f.reconstruct_gram_inverse() - expected).norm(), 0.0, 1e-15);
}

TEST(Rank1Update, ZeroContextIsSkipped) {
  slu::InverseFactor f(3, 1.0, 4);
  f.rank1_update(unit(3, 2));
  const MatrixXd before = f.u_factor();
  EXPECT_EQ(f.rank1_update(VectorXd::Zero(3)), 0);
  EXPECT_EQ(f.u_factor(), before);
  EXPECT_THROW(f.rank1_update(VectorXd::Zero(2)), std::invalid_argument);
}

TEST(Rank1Update, RandomUpdatesMatchDenseInverse) {
  std::mt19937_64 rng(11);
  slu::InverseFactor f(8, 1.0, 16);
  const MatrixXd x = oracle::random_matrix(rng, 8, 10);
  for (Eigen::Index j = 0; j < x.cols(); ++j) f.rank1_update(x.col(j));
  const MatrixXd want = oracle::spd_inverse(oracle::gram(1.0, x));
  EXPECT_LE(oracle::rel_frobenius(f.reconstruct_gram_inverse(), want), 1e-8);
}

TEST(ComputeCq, SingleUnitColumn) {
  const auto plan = slu::compute_cq(unit(2, 0));
  ASSERT_EQ(plan.q_basis.cols(), 1);
  EXPECT_NEAR(std::abs(plan.q_basis(0, 0)), 1.0, 1e-15);
  EXPECT_NEAR(plan.c_core(0, 0), 0.29289321881345254, 1e-15);
}

TEST(ComputeCq, IdentityBatch) {
  const auto plan = slu::compute_cq(MatrixXd::Identity(2, 2));
  EXPECT_NEAR((plan.q_basis.transpose() * plan.q_basis - MatrixXd::Identity(2, 2)).norm(), 0.0, 1e-15);
  const MatrixXd qcq = plan.q_basis * plan.c_core * plan.q_basis.transpose();
  EXPECT_NEAR((qcq - kBetaUnit * MatrixXd::Identity(2, 2)).norm(), 0.0, 1e-15);
}

TEST(ComputeCq, SingleColumnMatchesRank1Scalars) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const VectorXd x = oracle::random_vector(rng, 7) * (0.01 + trial);
    const double n = x.norm();
    const double alpha = (std::sqrt(1 + n * n) - 1) / (n * n);
    const double beta = alpha / (1 + alpha * n * n);
    const auto plan = slu::compute_cq(x);
    // Q C Qᵀ = β x̄ x̄ᵀ, independent of the column sign.
    const MatrixXd qcq = plan.q_basis * plan.c_core * plan.q_basis.transpose();
    EXPECT_LE((qcq - beta * x * x.transpose()).norm(), 1e-12 * (1 + beta * n * n));
  }
}

TEST(ComputeCq, SymmetricFactorizationIdentity) {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 30; ++trial) {
    const Eigen::Index d = 3 + trial % 12;
    const Eigen::Index b = 1 + trial % 5;
    const MatrixXd xbar = oracle::random_matrix(rng, d, b);
    const auto plan = slu::compute_cq(xbar);
    const Eigen::Index p = std::min(d, b);
    ASSERT_EQ(plan.q_basis.cols(), p);
    EXPECT_LE((plan.q_basis.transpose() * plan.q_basis - MatrixXd::Identity(p, p)).norm(), 1e-10);
    const MatrixXd want = MatrixXd::Identity(d, d) + xbar * xbar.transpose();
    EXPECT_LE((factored_product(plan, d) - want).norm(), 1e-10);
  }
}

TEST(ComputeCq, DropsZeroColumns) {
  MatrixXd x = MatrixXd::Zero(4, 3);
  x(1, 1) = 2.0;
  const auto plan = slu::compute_cq(x);
  EXPECT_EQ(plan.q_basis.cols(), 1);
  EXPECT_THROW(slu::compute_cq(MatrixXd::Zero(4, 2)), std::invalid_argument);
}

TEST(ComputeCq, RankDeficientBatchStaysExact) {
  std::mt19937_64 rng(23);
  const VectorXd x = oracle::random_vector(rng, 6);
  MatrixXd batch(6, 3);
  batch << x, 2.0 * x, -x;
  const auto plan = slu::compute_cq(batch);
  EXPECT_TRUE(plan.c_core.allFinite());
  const MatrixXd qcq = plan.q_basis * plan.c_core * plan.q_basis.transpose();
  // (I − QCQᵀ) must be the inverse of the factor I + QYQᵀ for the batch.
  const MatrixXd a = MatrixXd::Identity(6, 6) + batch * batch.transpose();
  const MatrixXd l_inv = MatrixXd::Identity(6, 6) - qcq;
  EXPECT_LE((l_inv.transpose() * l_inv - oracle::spd_inverse(a)).norm(), 1e-10);
}

// Dependent columns ahead of independent ones: the core must keep the rank
// of the batch, otherwise a cap equal to that rank loses information.
TEST(ComputeCq, CoreRankEqualsBatchRank) {
  std::mt19937_64 rng(29);
  const Eigen::Index d = 30, k = 4;
  const MatrixXd basis = oracle::random_matrix(rng, d, k);
  MatrixXd batch(d, 12);
  batch << basis.col(0), basis.col(0), 3.0 * basis.col(0), basis * oracle::random_matrix(rng, k, 9);
  const auto plan = slu::compute_cq(batch);
  EXPECT_EQ(plan.q_basis.cols(), k);
  EXPECT_EQ(oracle::numerical_rank(plan.c_core), k);
  const MatrixXd want = MatrixXd::Identity(d, d) + batch * batch.transpose();
  EXPECT_LE((factored_product(plan, d) - want).norm(), 1e-10 * want.norm());

  slu::InverseFactor f(d, 1.0, k);
  f.batch_update(batch);
  ASSERT_TRUE(f.compressed());
  EXPECT_LE(oracle::rel_frobenius(f.reconstruct_gram_inverse(), oracle::spd_inverse(want)), 1e-10);
}

TEST(BatchUpdate, SingleColumnEqualsRank1) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    slu::InverseFactor a(6, 1.0, 32);
    slu::InverseFactor b(6, 1.0, 32);
    for (int step = 0; step < 4; ++step) {
      const VectorXd x = oracle::random_vector(rng, 6);
      a.rank1_update(x);
      b.batch_update(x);
    }
    EXPECT_LE((a.reconstruct_gram_inverse() - b.reconstruct_gram_inverse()).norm(), 1e-10);
  }
}

TEST(BatchUpdate, TwoBatchesEqualSixRank1) {
  std::mt19937_64 rng(4);
  const MatrixXd x = oracle::random_matrix(rng, 9, 6);
  slu::InverseFactor seq(9, 1.0, 64);
  slu::InverseFactor bat(9, 1.0, 64);
  for (Eigen::Index j = 0; j < 6; ++j) seq.rank1_update(x.col(j));
  bat.batch_update(x.leftCols(3));
  bat.batch_update(x.rightCols(3));
  EXPECT_LE(oracle::rel_frobenius(bat.reconstruct_gram_inverse(), seq.reconstruct_gram_inverse()), 1e-8);
  EXPECT_LE(oracle::rel_frobenius(bat.reconstruct_gram_inverse(), oracle::spd_inverse(oracle::gram(1.0, x))),
            1e-8);
}

TEST(BatchUpdate, CoordinateBatch) {
  slu::InverseFactor f(4, 1.0, 8);
  MatrixXd x = MatrixXd::Zero(4, 2);
  x(0, 0) = 1.0;
  x(1, 1) = 1.0;
  EXPECT_EQ(f.batch_update(x), 2);
  const MatrixXd a = oracle::spd_inverse(f.reconstruct_gram_inverse());
  EXPECT_LE((a - MatrixXd(VectorXd{{2.0, 2.0, 1.0, 1.0}}.asDiagonal())).norm(), 1e-12);
}

TEST(BatchUpdate, ZeroBatchAndMismatch) {
  slu::InverseFactor f(4, 1.0, 8);
  EXPECT_EQ(f.batch_update(MatrixXd::Zero(4, 3)), 0);
  EXPECT_EQ(f.columns(), 0);
  EXPECT_THROW(f.batch_update(MatrixXd::Ones(3, 2)), std::invalid_argument);
}

TEST(BatchUpdate, NonUnitEpsMatchesDenseRidge) {
  std::mt19937_64 rng(8);
  const MatrixXd x = oracle::random_matrix(rng, 5, 4);
  slu::InverseFactor f(5, 0.25, 16);
  f.batch_update(x.leftCols(2));
  f.rank1_update(x.col(2));
  f.batch_update(x.col(3));
  EXPECT_LE(oracle::rel_frobenius(f.reconstruct_gram_inverse(), oracle::spd_inverse(oracle::gram(4.0, x))), 1e-10);
}

TEST(Compress, LosslessWhenRankFits) {
  std::mt19937_64 rng(9);
  const MatrixXd u = oracle::random_matrix(rng, 10, 3);
  const MatrixXd v = oracle::random_matrix(rng, 10, 3);
  // Six columns whose product has rank 3.
  MatrixXd uu(10, 6), vv(10, 6);
  uu << u, u;
  vv << v, -0.5 * v;
  auto f = slu::InverseFactor::from_parts(uu, vv, 1.0, 4, false);
  const MatrixXd before = uu * vv.transpose();
  f.compress();
  EXPECT_EQ(f.columns(), 4);
  EXPECT_LE((f.u_factor() * f.v_factor().transpose() - before).norm(), 1e-10);
  EXPECT_LE((f.v_factor().transpose() * f.v_factor() - MatrixXd::Identity(4, 4)).norm(), 1e-10);
}

TEST(Compress, MatchesBestRankApproximation) {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 5; ++trial) {
    const Eigen::Index d = 20 + 7 * trial, r = 3 + trial;
    const MatrixXd u = oracle::random_matrix(rng, d, r + 2);
    const MatrixXd v = oracle::random_matrix(rng, d, r + 2);
    auto f = slu::InverseFactor::from_parts(u, v, 1.0, r, false);
    f.compress();
    const MatrixXd want = oracle::best_rank(u * v.transpose(), r);
    EXPECT_LE((f.u_factor() * f.v_factor().transpose() - want).norm(), 1e-8);
    EXPECT_LE((f.v_factor().transpose() * f.v_factor() - MatrixXd::Identity(r, r)).norm(), 1e-10);
  }
}

TEST(Compress, StateErrors) {
  slu::InverseFactor f(5, 1.0, 3);
  EXPECT_THROW(f.compress(), slu::InvalidState);
  std::mt19937_64 rng(1);
  f.batch_update(oracle::random_matrix(rng, 5, 3));
  ASSERT_TRUE(f.compressed());
  EXPECT_THROW(f.compress(), slu::InvalidState);
}

TEST(Compress, TriggeredWhenCapReached) {
  std::mt19937_64 rng(12);
  slu::InverseFactor f(10, 1.0, 4);
  f.batch_update(oracle::random_matrix(rng, 10, 3));
  EXPECT_FALSE(f.compressed());
  EXPECT_EQ(f.columns(), 3);
  f.batch_update(oracle::random_matrix(rng, 10, 3));
  EXPECT_TRUE(f.compressed());
  EXPECT_EQ(f.columns(), 4);
}

TEST(Compress, CapAboveDimensionIsClampedAndExact) {
  std::mt19937_64 rng(13);
  const MatrixXd x = oracle::random_matrix(rng, 3, 12);
  slu::InverseFactor f(3, 1.0, 100);
  for (Eigen::Index j = 0; j < x.cols(); ++j) f.rank1_update(x.col(j));
  EXPECT_TRUE(f.compressed());
  EXPECT_EQ(f.columns(), 3);
  EXPECT_LE(oracle::rel_frobenius(f.reconstruct_gram_inverse(), oracle::spd_inverse(oracle::gram(1.0, x))), 1e-10);
}

TEST(PsiStep, ZeroIncrementLeavesProductUnchanged) {
  std::mt19937_64 rng(14);
  slu::InverseFactor f(12, 1.0, 3);
  f.batch_update(oracle::random_matrix(rng, 12, 5));
  const MatrixXd before = f.u_factor() * f.v_factor().transpose();
  slu::UpdatePlan plan{slu::compute_cq(oracle::random_matrix(rng, 12, 2)).q_basis, MatrixXd::Zero(2, 2)};
  f.psi_step(plan);
  EXPECT_LE((f.u_factor() * f.v_factor().transpose() - before).norm(), 1e-12);
}

TEST(PsiStep, ExactWhenIncrementStaysOnManifold) {
  const Eigen::Index d = 5;
  MatrixXd u = MatrixXd::Zero(d, 2);
  u(0, 0) = 1.0;
  MatrixXd v = MatrixXd::Zero(d, 2);
  v(0, 0) = 1.0;
  v(1, 1) = 0.6;
  v(3, 1) = 0.8;
  auto f = slu::InverseFactor::from_parts(u, v, 1.0, 2, true);
  slu::UpdatePlan plan{VectorXd::Unit(d, 1), MatrixXd::Constant(1, 1, 0.3)};
  // ΔD = Q C Qᵀ (I − U Vᵀ) = 0.3 e₂e₂ᵀ here.
  const MatrixXd delta = plan.q_basis * plan.c_core * plan.q_basis.transpose() *
                         (MatrixXd::Identity(d, d) - u * v.transpose());
  const MatrixXd want = u * v.transpose() + delta;
  f.psi_step(plan);
  EXPECT_LE((f.u_factor() * f.v_factor().transpose() - want).norm(), 1e-10);
}

TEST(PsiStep, RankOneTruncationMatchesDenseReference) {
  std::mt19937_64 rng(15);
  const Eigen::Index d = 7;
  const VectorXd a = oracle::random_vector(rng, d);
  const VectorXd b = oracle::random_vector(rng, d).normalized();
  auto f = slu::InverseFactor::from_parts(a, b, 1.0, 1, true);
  const auto plan = slu::compute_cq(oracle::random_matrix(rng, d, 2));
  const MatrixXd delta = plan.q_basis * plan.c_core * plan.q_basis.transpose() *
                         (MatrixXd::Identity(d, d) - a * b.transpose());
  MatrixXd u_ref = a;
  MatrixXd v_ref = b;
  oracle::dense_psi(u_ref, v_ref, delta);
  f.psi_step(plan);
  const MatrixXd got = f.u_factor() * f.v_factor().transpose();
  EXPECT_LE((got - u_ref * v_ref.transpose()).norm(), 1e-10);
  EXPECT_LE(oracle::numerical_rank(got), 1);
}

TEST(PsiStep, RejectedBeforeCompression) {
  slu::InverseFactor f(4, 1.0, 3);
  slu::UpdatePlan plan{VectorXd::Unit(4, 0), MatrixXd::Constant(1, 1, 0.1)};
  EXPECT_THROW(f.psi_step(plan), slu::InvalidState);
}

TEST(PsiStep, KeepsOrthonormalV) {
  std::mt19937_64 rng(16);
  slu::InverseFactor f(30, 1.0, 4);
  for (int step = 0; step < 200; ++step) {
    f.batch_update(oracle::random_matrix(rng, 30, 1 + step % 3));
    if (f.compressed()) {
      ASSERT_LE((f.v_factor().transpose() * f.v_factor() - MatrixXd::Identity(4, 4)).norm(), 1e-10);
    }
  }
}

TEST(Reconstruct, SymmetricAndIdentityWhenEmpty) {
  slu::InverseFactor f(3, 1.0, 4);
  EXPECT_EQ(f.reconstruct_gram_inverse(), MatrixXd::Identity(3, 3));
  std::mt19937_64 rng(18);
  slu::InverseFactor g(10, 1.0, 4);
  for (int i = 0; i < 12; ++i) g.rank1_update(oracle::random_vector(rng, 10));
  const MatrixXd m = g.reconstruct_gram_inverse();
  EXPECT_LE((m - m.transpose()).norm(), 1e-12);
}

// Properties over random streams.

TEST(FactorProperties, ExactnessBeforeTruncation) {
  std::mt19937_64 rng(19);
  for (int trial = 0; trial < 40; ++trial) {
    const Eigen::Index d = 2 + static_cast<Eigen::Index>(rng() % 49);
    const double eps = std::pow(2.0, static_cast<int>(rng() % 5) - 2);
    const Eigen::Index cap = 4 + static_cast<Eigen::Index>(rng() % 60);
    slu::InverseFactor f(d, eps, cap);
    MatrixXd seen(d, 0);
    while (true) {
      const Eigen::Index b = 1 + static_cast<Eigen::Index>(rng() % 4);
      if (seen.cols() + b >= std::min(cap, d)) break;
      const MatrixXd x = oracle::random_matrix(rng, d, b);
      if (b == 1) f.rank1_update(x.col(0)); else f.batch_update(x);
      seen.conservativeResize(Eigen::NoChange, seen.cols() + b);
      seen.rightCols(b) = x;
    }
    const MatrixXd want = oracle::spd_inverse(oracle::gram(1.0 / eps, seen));
    EXPECT_LE(oracle::rel_frobenius(f.reconstruct_gram_inverse(), want), 1e-8) << "d=" << d;
  }
}

TEST(FactorProperties, BonusNeverGrowsBeforeTruncation) {
  std::mt19937_64 rng(20);
  for (int trial = 0; trial < 10; ++trial) {
    slu::InverseFactor f(12, 1.0, 64);
    const VectorXd probe = oracle::random_vector(rng, 12);
    double last = f.bonus_norm(probe);
    for (int step = 0; step < 11; ++step) {
      f.rank1_update(oracle::random_vector(rng, 12));
      const double now = f.bonus_norm(probe);
      EXPECT_LE(now, last + 1e-12);
      last = now;
    }
  }
}

TEST(Serialization, RoundTripAndLayout) {
  std::mt19937_64 rng(21);
  slu::InverseFactor f(6, 0.5, 3);
  f.batch_update(oracle::random_matrix(rng, 6, 2));
  std::stringstream buf;
  slu::write_factor(buf, f);
  const std::string bytes = buf.str();
  EXPECT_EQ(bytes.size(), 8u * 3 + 8 + 1 + 2 * 6 * 2 * 8);
  const auto g = slu::read_factor(buf);
  EXPECT_EQ(g.dim(), 6);
  EXPECT_EQ(g.rank_cap(), 3);
  EXPECT_EQ(g.eps(), 0.5);
  EXPECT_EQ(g.compressed(), f.compressed());
  EXPECT_EQ(g.u_factor(), f.u_factor());
  EXPECT_EQ(g.v_factor(), f.v_factor());
  std::stringstream truncated(bytes.substr(0, 20));
  EXPECT_THROW(slu::read_factor(truncated), std::runtime_error);
}
