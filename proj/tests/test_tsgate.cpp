#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "tspeft/tsgate.hpp"

using namespace tspeft;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
  Rng rng(seed);
  return seeded_init(r, c, rng, UniformInit{-1.0, 1.0});
}

}  // namespace

TEST(RelativeMagnitude, ScaledRow) {
  const auto r = relative_magnitudes(Matrix(1, 2, {3, 4}), Matrix(1, 2, {0.3, 0.4}));
  ASSERT_EQ(r.size(), 1u);
  EXPECT_NEAR(r[0], 0.1, 1e-15);
}

TEST(RelativeMagnitude, ZeroDeltaGivesZero) {
  const auto r = relative_magnitudes(random_matrix(5, 3, 1), Matrix(5, 3));
  for (double v : r) EXPECT_EQ(v, 0.0);
}

TEST(RelativeMagnitude, MatchesTwoNormRatio) {
  const Matrix base = random_matrix(9, 6, 2), delta = random_matrix(9, 6, 3);
  const auto r = relative_magnitudes(base, delta);
  for (std::size_t i = 0; i < 9; ++i) {
    double nb = 0.0, nd = 0.0;
    for (std::size_t j = 0; j < 6; ++j) {
      nb += base(i, j) * base(i, j);
      nd += delta(i, j) * delta(i, j);
    }
    const double want = std::sqrt(nd) / std::sqrt(nb);
    EXPECT_LE(std::abs(r[i] - want) / want, 1e-14);
  }
}

TEST(RelativeMagnitude, ZeroBaseRows) {
  const Matrix base(2, 2, {0, 0, 0, 0});
  const Matrix delta(2, 2, {0, 0, 1, 0});
  const auto r = relative_magnitudes(base, delta);
  EXPECT_EQ(r[0], 0.0);
  EXPECT_TRUE(std::isinf(r[1]));
  // The forced-on surrogate passes any finite threshold.
  EXPECT_EQ(gate(r, 1e300)[1], 1);
}

TEST(RelativeMagnitude, ShapeMismatchIsShapeError) {
  EXPECT_THROW(relative_magnitudes(Matrix(2, 3), Matrix(2, 4)), ShapeError);
}

TEST(Gate, BoundaryIsInclusive) {
  const std::vector<double> r = {0.1, 0.2, 0.3};
  EXPECT_EQ(gate(r, 0.2), (Mask{0, 1, 1}));
}

TEST(Gate, ZeroThresholdOpensEverything) {
  const std::vector<double> r = {0.0, 0.5, 7.0, 0.0};
  EXPECT_EQ(gate(r, 0.0), (Mask{1, 1, 1, 1}));
}

TEST(Gate, ThresholdAboveMaxClosesEverything) {
  const std::vector<double> r = {0.1, 0.5, 0.3};
  EXPECT_EQ(gate(r, 0.5000001), (Mask{0, 0, 0}));
}

TEST(Gate, DecisionRecordsThreshold) {
  const auto d = decide(Matrix(2, 2, {3, 4, 1, 0}), Matrix(2, 2, {0.3, 0.4, 0.5, 0}), 0.2);
  EXPECT_EQ(d.tau_used, 0.2);
  EXPECT_EQ(d.mask, (Mask{0, 1}));
}

TEST(Gate, RaisingThresholdNeverReopens) {
  Rng rng(5);
  std::vector<double> r(200);
  for (double& v : r) v = rng.uniform(0.0, 1.0);
  const Mask valid(200, 1);
  Mask prev = gate(r, -1.0);
  double prev_sp = sparsity(prev, valid);
  for (double tau = -0.5; tau <= 1.2; tau += 0.01) {
    const Mask m = gate(r, tau);
    for (std::size_t i = 0; i < r.size(); ++i) EXPECT_LE(m[i], prev[i]);
    const double sp = sparsity(m, valid);
    EXPECT_GE(sp, prev_sp);
    prev = m;
    prev_sp = sp;
  }
}

TEST(Gate, ScaleCovariance) {
  const Matrix base = random_matrix(16, 8, 7), delta = scaled(random_matrix(16, 8, 8), 0.3);
  const auto r = relative_magnitudes(base, delta);
  // Powers of two scale exactly, so every derived quantity is unchanged bitwise.
  for (double c : {0.25, 4.0, 1024.0}) {
    const auto rc = relative_magnitudes(scaled(base, c), scaled(delta, c));
    EXPECT_EQ(rc, r);
    EXPECT_EQ(gate(rc, 0.3), gate(r, 0.3));
  }
  // A general positive factor moves r by at most rounding.
  const auto r3 = relative_magnitudes(scaled(base, 3.7), scaled(delta, 3.7));
  for (std::size_t i = 0; i < r.size(); ++i) EXPECT_NEAR(r3[i], r[i], 1e-14 * r[i]);
}

TEST(ApplyGate, AllOnIsBitwisePlainAddition) {
  const Matrix base = random_matrix(6, 5, 9), delta = random_matrix(6, 5, 10);
  Matrix sum = base;
  add_inplace(sum, delta);
  EXPECT_EQ(apply_gate(base, delta, Mask(6, 1)), sum);
}

TEST(ApplyGate, AllOffIsBase) {
  const Matrix base = random_matrix(6, 5, 11), delta = random_matrix(6, 5, 12);
  EXPECT_EQ(apply_gate(base, delta, Mask(6, 0)), base);
}

TEST(ApplyGate, MixedMaskSelectsRows) {
  const Matrix base = random_matrix(5, 4, 13), delta = random_matrix(5, 4, 14);
  const Mask mask = {1, 0, 0, 1, 0};
  const Matrix h = apply_gate(base, delta, mask);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(h(i, j), mask[i] ? base(i, j) + delta(i, j) : base(i, j));
}

TEST(ApplyGate, NonBinaryMaskIsContractError) {
  EXPECT_THROW(apply_gate(Matrix(2, 2), Matrix(2, 2), Mask{1, 2}), ContractError);
}

TEST(Sparsity, DirectCount) { EXPECT_EQ(sparsity(Mask{1, 0, 0, 1}, Mask{1, 1, 1, 1}), 0.5); }

TEST(Sparsity, Endpoints) {
  EXPECT_EQ(sparsity(Mask{1, 1, 1}, Mask{1, 1, 1}), 0.0);
  EXPECT_EQ(sparsity(Mask{0, 0, 0}, Mask{1, 1, 1}), 1.0);
}

TEST(Sparsity, PaddingExcluded) { EXPECT_EQ(sparsity(Mask{1, 0, 1, 1}, Mask{1, 1, 0, 0}), 0.5); }

TEST(Sparsity, NoValidTokensIsEmptyInputError) {
  EXPECT_THROW(sparsity(Mask{1, 1}, Mask{0, 0}), EmptyInputError);
}
