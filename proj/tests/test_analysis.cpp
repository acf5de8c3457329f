// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <numbers>
#include <sstream>

#include "georect/analysis.hpp"
#include "georect/rng.hpp"

using namespace georect;

namespace {

Tensor random_orthogonal(std::size_t d, Rng& rng) {
  return orthonormal_columns(rng.normal_tensor({d, d}, 1.0));
}

Tensor planted(const Tensor& base, const Tensor& q, const std::vector<double>& spikes) {
  Tensor out = base;
  const std::size_t d = base.rows();
  for (std::size_t s = 0; s < spikes.size(); ++s)
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) out(i, j) += spikes[s] * q(i, s) * q(j, s);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = i + 1; j < d; ++j) out(j, i) = out(i, j);
  return out;
}

std::vector<double> eigen_abs_spectrum(const Tensor& a, const Tensor& b) {
  const std::size_t d = a.rows();
  Eigen::MatrixXd m(d, d);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) m(i, j) = a(i, j) - b(i, j);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  std::vector<double> out;
  for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) out.push_back(std::abs(es.eigenvalues()(i)));
  std::sort(out.begin(), out.end(), std::greater<>());
  return out;
}

}  // namespace

TEST(Covariance, ConstantRowsGiveZero) {
  const Tensor c = covariance(Tensor::matrix(5, 4, 2.5));
  for (double v : c.values()) EXPECT_NEAR(v, 0.0, 1e-15);
}

TEST(Covariance, AntipodalPairIsRankOne) {
  const Tensor c = covariance(Tensor::from_rows({{3.0, 4.0}, {-3.0, -4.0}}));
  EXPECT_NEAR(c(0, 0), 2.0 * 0.36, 1e-15);
  EXPECT_NEAR(c(1, 1), 2.0 * 0.64, 1e-15);
  EXPECT_NEAR(c(0, 1), 2.0 * 0.48, 1e-15);
  EXPECT_NEAR(c(0, 0) * c(1, 1) - c(0, 1) * c(1, 0), 0.0, 1e-15);
}

TEST(Covariance, MatchesScalarLoopAndIsSymmetric) {
  Rng rng(2);
  const std::size_t m = 17, d = 6;
  const Tensor x = rng.normal_tensor({m, d}, 1.0);
  const Tensor c = covariance(x);
  std::vector<std::vector<long double>> u(m, std::vector<long double>(d));
  for (std::size_t i = 0; i < m; ++i) {
    long double n = 0;
    for (std::size_t k = 0; k < d; ++k) n += static_cast<long double>(x(i, k)) * x(i, k);
    for (std::size_t k = 0; k < d; ++k) u[i][k] = x(i, k) / std::sqrt(n);
  }
  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t b = 0; b < d; ++b) {
      long double ma = 0, mb = 0, s = 0;
      for (std::size_t i = 0; i < m; ++i) {
        ma += u[i][a];
        mb += u[i][b];
      }
      ma /= m;
      mb /= m;
      for (std::size_t i = 0; i < m; ++i) s += (u[i][a] - ma) * (u[i][b] - mb);
      EXPECT_NEAR(c(a, b), static_cast<double>(s / (m - 1)), 1e-10);
      EXPECT_EQ(c(a, b), c(b, a));
    }
}

TEST(Covariance, RejectsSingleRow) { EXPECT_THROW(covariance(Tensor::matrix(1, 3, 1.0)), InputError); }

TEST(Spectrum, IdenticalInputsGiveExactZeros) {
  Rng rng(3);
  const Tensor s = covariance(rng.normal_tensor({30, 8}, 1.0));
  const SpectrumReport r = spectrum(s, s);
  ASSERT_EQ(r.singular_values.size(), 8u);
  for (double v : r.singular_values) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(r.total_energy, 0.0);
}

TEST(Spectrum, PlantedRankThreeHasAllEnergyInTopThree) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed, 4);
    const std::size_t d = 8 + rng.below(17);
    const Tensor base = covariance(rng.normal_tensor({3 * d, d}, 1.0));
    const Tensor q = random_orthogonal(d, rng);
    const SpectrumReport r = spectrum(planted(base, q, {0.9, -0.5, 0.2}), base, {3, 8});
    EXPECT_NEAR(r.cumulative_energy[2], 1.0, 1e-9) << seed;
    EXPECT_NEAR(r.top_k_energy.at(3), 1.0, 1e-9);
    EXPECT_NEAR(r.singular_values[0], 0.9, 1e-12);
    EXPECT_NEAR(r.singular_values[1], 0.5, 1e-12);
    EXPECT_NEAR(r.singular_values[2], 0.2, 1e-12);
    EXPECT_EQ(r.cumulative_energy.back(), 1.0);
  }
}

TEST(Spectrum, MatchesEigenSolver) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed, 5);
    const std::size_t d = 3 + rng.below(30);
    const Tensor a = covariance(rng.normal_tensor({2 * d, d}, 1.0));
    const Tensor b = covariance(rng.normal_tensor({2 * d, d}, 1.0));
    const SpectrumReport r = spectrum(a, b);
    const auto ref = eigen_abs_spectrum(a, b);
    ASSERT_EQ(r.singular_values.size(), ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(r.singular_values[i], ref[i], 1e-10) << seed;
    for (std::size_t i = 1; i < ref.size(); ++i) {
      EXPECT_GE(r.singular_values[i - 1], r.singular_values[i]);
      EXPECT_LE(r.cumulative_energy[i - 1], r.cumulative_energy[i]);
    }
  }
}

TEST(Spectrum, InvariantUnderSharedRotation) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed, 6);
    const std::size_t d = 4 + rng.below(13);
    const Tensor fa = rng.normal_tensor({40, d}, 1.0), fg = rng.normal_tensor({40, d}, 1.0);
    const Tensor rot = random_orthogonal(d, rng);
    const SpectrumReport r0 = spectrum(covariance(fa), covariance(fg));
    const SpectrumReport r1 = spectrum(covariance(matmul(fa, rot)), covariance(matmul(fg, rot)));
    for (std::size_t i = 0; i < d; ++i) EXPECT_NEAR(r0.singular_values[i], r1.singular_values[i], 1e-8) << seed;
  }
}

TEST(Spectrum, TopKDefaults) {
  Rng rng(7);
  const SpectrumReport r = spectrum(covariance(rng.normal_tensor({50, 20}, 1.0)), covariance(rng.normal_tensor({50, 20}, 1.0)));
  EXPECT_EQ(r.top_k_energy.count(8), 1u);
  EXPECT_EQ(r.top_k_energy.count(16), 1u);
  EXPECT_EQ(r.top_k_energy.at(8), r.cumulative_energy[7]);
}

TEST(Spectrum, RejectsAsymmetricOrMismatched) {
  Tensor a = Tensor::identity(3);
  a(0, 2) = 0.1;
  EXPECT_THROW(spectrum(a, Tensor::identity(3)), InputError);
  EXPECT_THROW(spectrum(Tensor::identity(3), Tensor::identity(4)), InputError);
}

TEST(Spectrum, CsvHasOneRowPerValue) {
  std::ostringstream os;
  write_spectrum_csv(os, spectrum_of({3.0, -4.0}));
  EXPECT_EQ(os.str(), "index,sigma,cumulative_energy\n1,4,0.64000000000000001\n2,3,1\n");
}

TEST(PrincipalAngles, KnownConfigurations) {
  const double t = 0.3;
  const Tensor a = Tensor::from_rows({{1.0}, {0.0}, {0.0}});
  const Tensor b = Tensor::from_rows({{std::cos(t)}, {std::sin(t)}, {0.0}});
  EXPECT_NEAR(principal_angles(a, b)[0], t, 1e-12);
  const Tensor c = Tensor::from_rows({{0.0}, {0.0}, {2.0}});
  EXPECT_NEAR(principal_angles(a, c)[0], std::numbers::pi / 2.0, 1e-12);
  Rng rng(8);
  const Tensor m = rng.normal_tensor({6, 3}, 1.0);
  const Tensor mixed = matmul(m, rng.normal_tensor({3, 3}, 1.0));
  for (double ang : principal_angles(m, mixed)) EXPECT_NEAR(ang, 0.0, 1e-6);
}

TEST(Jacobi, ReconstructsMatrix) {
  Rng rng(9);
  const Tensor s = covariance(rng.normal_tensor({20, 7}, 1.0));
  const EigenResult e = jacobi_eigen(s);
  for (std::size_t i = 0; i < 7; ++i)
    for (std::size_t j = 0; j < 7; ++j) {
      double v = 0.0;
      for (std::size_t k = 0; k < 7; ++k) v += e.vectors(i, k) * e.values[k] * e.vectors(j, k);
      EXPECT_NEAR(v, s(i, j), 1e-12);
    }
}
