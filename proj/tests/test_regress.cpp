#include "oracles.hpp"

#include "phidpc/regress.hpp"

#include <doctest.h>

#include <cmath>

using namespace phidpc;
using oracle::Mat;
using oracle::Vec;

namespace {

LiftedDataMatrix<double> raw_lifted(const Mat & phi, double tol = 1e-10)
{
  LiftedDataMatrix<double> lifted;
  lifted.phi = phi;
  lifted.basis = identity_basis<double>(1, 1, 1, 1);
  lifted.rank_tolerance = tol;
  lifted.singular_values = Eigen::JacobiSVD<Mat>(phi).singularValues();
  const Index r = lifted.singular_values.size();
  lifted.row_rank_ok = r == phi.rows() && lifted.singular_values(r - 1) > tol * lifted.singular_values(0);
  return lifted;
}

Mat random_matrix(CounterRng & rng, Index rows, Index cols)
{
  Mat M(rows, cols);
  for (Index i = 0; i < M.size(); ++i) M(i) = rng.normal();
  return M;
}

}  // namespace

TEST_CASE("least squares on the 2x2 example")
{
  const Mat phi = (Mat(2, 2) << 1, 1, 1, -1).finished();
  const Mat yf = (Mat(1, 2) << 3, 1).finished();
  const auto pred = fit_least_squares(raw_lifted(phi), yf);
  CHECK((pred.theta - (Mat(1, 2) << 2, 1).finished()).cwiseAbs().maxCoeff() < 1e-14);
  CHECK(pred.residuals.cwiseAbs().maxCoeff() < 1e-14);
  CHECK(consistency_diagnostic(pred) == 0.0);
}

TEST_CASE("exact linear relation is recovered")
{
  CounterRng rng(1);
  const Mat phi = random_matrix(rng, 5, 30);
  const Mat M = random_matrix(rng, 3, 5);
  const auto pred = fit_least_squares(raw_lifted(phi), Mat(M * phi));
  CHECK((pred.theta - M).cwiseAbs().maxCoeff() < 1e-10);
  CHECK(pred.residuals.cwiseAbs().maxCoeff() < 1e-10);
  CHECK(consistency_diagnostic(pred) < 1e-10);
}

TEST_CASE("least squares agrees with the normal-equations oracle")
{
  CounterRng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const Index rows = 1 + static_cast<Index>(rng.below(6));
    const Index T = rows + static_cast<Index>(rng.below(static_cast<std::uint64_t>(12 - rows + 1)));
    const Index outs = 1 + static_cast<Index>(rng.below(3));
    const Mat phi = random_matrix(rng, rows, T);
    const Mat yf = random_matrix(rng, outs, T);
    const auto pred = fit_least_squares(raw_lifted(phi), yf);
    const Mat expected = oracle::normal_equations(phi, yf);
    CHECK((pred.theta - expected).norm() <= 1e-9 * expected.norm());
  }
}

TEST_CASE("least-squares residual is orthogonal to the data and the null space is exact")
{
  CounterRng rng(3);
  const Mat phi = random_matrix(rng, 6, 40);
  const Mat yf = random_matrix(rng, 4, 40);
  const auto pred = fit_least_squares(raw_lifted(phi), yf);
  CHECK((pred.residuals * phi.transpose()).norm() <= 1e-8 * yf.norm());

  REQUIRE(pred.has_nullspace);
  CHECK(pred.rank == 6);
  CHECK(pred.nullspace_basis.cols() == 34);
  const double smax = Eigen::JacobiSVD<Mat>(phi).singularValues()(0);
  for (Index c = 0; c < pred.nullspace_basis.cols(); ++c) {
    CHECK((phi * pred.nullspace_basis.col(c)).norm() <= 1e-10 * smax);
  }
  CHECK((pred.nullspace_basis.transpose() * pred.nullspace_basis - Mat::Identity(34, 34)).cwiseAbs().maxCoeff() <
        1e-12);

  // Without the stored basis the diagnostic falls back to the projector form.
  FitOptions capped;
  capped.nullspace_cap = 0;
  const auto lean = fit_least_squares(raw_lifted(phi), yf, capped);
  CHECK_FALSE(lean.has_nullspace);
  CHECK(consistency_diagnostic(lean) == doctest::Approx(consistency_diagnostic(pred)).epsilon(1e-9));
  // For a least-squares fit the diagnostic is the spectral norm of E.
  CHECK(consistency_diagnostic(pred) ==
        doctest::Approx(Eigen::JacobiSVD<Mat>(pred.residuals).singularValues()(0)).epsilon(1e-9));
}

TEST_CASE("square full-rank data has a trivial null space")
{
  CounterRng rng(4);
  const Mat phi = random_matrix(rng, 4, 4);
  const Mat yf = random_matrix(rng, 2, 4);
  const auto pred = fit_least_squares(raw_lifted(phi), yf);
  CHECK(pred.nullspace_basis.cols() == 0);
  CHECK(consistency_diagnostic(pred) == 0.0);
}

TEST_CASE("rank-deficient data is rejected by least squares and handled by ridge")
{
  CounterRng rng(5);
  Mat phi = random_matrix(rng, 4, 20);
  phi.row(3) = phi.row(1);
  const Mat yf = random_matrix(rng, 2, 20);
  const auto lifted = raw_lifted(phi);
  CHECK_FALSE(lifted.row_rank_ok);
  CHECK_THROWS_AS(fit_least_squares(lifted, yf), RankDeficient);
  const auto ridge = fit_ridge(lifted, yf, 1e-3);
  CHECK(ridge.theta.allFinite());
  CHECK(ridge.rank == 3);
  CHECK_THROWS_AS(fit_ridge(lifted, yf, 0.0), InvalidArgument);
}

TEST_CASE("ridge limits and monotone shrinkage")
{
  CounterRng rng(6);
  const Mat phi = random_matrix(rng, 5, 25);
  const Mat yf = random_matrix(rng, 3, 25);
  const auto lifted = raw_lifted(phi);
  const auto ls = fit_least_squares(lifted, yf);

  const auto tiny = fit_ridge(lifted, yf, 1e-12);
  CHECK((tiny.theta - ls.theta).norm() <= 1e-6 * ls.theta.norm());

  const double smax = lifted.singular_values(0);
  const double huge_gamma = 1e12 * smax * smax;
  const auto huge = fit_ridge(lifted, yf, huge_gamma);
  const Mat asymptote = yf * phi.transpose() / huge_gamma;
  CHECK(huge.theta.norm() < 1e-10);
  CHECK((huge.theta - asymptote).norm() <= 1e-6 * asymptote.norm());

  // Definition: Theta = Yf Phi^T (Phi Phi^T + gamma I)^-1.
  const auto mid = fit_ridge(lifted, yf, 0.7);
  const Mat gram = phi * phi.transpose() + 0.7 * Mat::Identity(5, 5);
  const Mat expected = oracle::gauss_solve(gram, Mat(phi * yf.transpose()))->transpose();
  CHECK((mid.theta - expected).cwiseAbs().maxCoeff() < 1e-12);

  double previous = ls.theta.norm();
  for (double g : {1e-3, 1e-1, 1.0, 10.0, 1e3}) {
    const double now = fit_ridge(lifted, yf, g).theta.norm();
    CHECK(now <= previous + 1e-12);
    previous = now;
  }
}

TEST_CASE("prediction reproduces an analytic rollout")
{
  // y(k+1) = 0.5 y(k) + u(k).
  const Mat A = (Mat(1, 1) << 0.5).finished();
  const Mat B = (Mat(1, 1) << 1.0).finished();
  const Mat C = (Mat(1, 1) << 1.0).finished();
  const auto data = oracle::linear_dataset(A, B, C, 80, 3);
  const Index N = 4;
  const auto blocks = build_hankel(data, 1, N);
  const auto basis = identity_basis<double>(1, N, 1, 1);
  const auto pred = fit_least_squares(build_phi(basis, blocks), blocks.yf);

  const Vec u_ini = (Vec(1) << 0.3).finished();
  const Vec y_ini = (Vec(1) << -0.8).finished();
  const Vec u_f = (Vec(N) << 1.0, -0.5, 0.25, 2.0).finished();
  const Vec y = predict(pred, basis, u_ini, y_ini, u_f);
  double state = y_ini(0);
  for (Index i = 0; i < N; ++i) {
    state = 0.5 * state + u_f(i);
    CHECK(std::abs(y(i) - state) < 1e-8);
  }

  IdentifiedPredictor<double> zero = pred;
  zero.theta.setZero();
  CHECK(predict(zero, basis, u_ini, y_ini, u_f).cwiseAbs().maxCoeff() == 0.0);

  // Training columns replay Theta Phi.
  for (Index j = 0; j < blocks.columns(); j += 11) {
    const Vec yj = predict(pred, basis, Vec(blocks.up.col(j)), Vec(blocks.yp.col(j)), Vec(blocks.uf.col(j)));
    CHECK((yj - pred.theta * pred.phi().col(j)).cwiseAbs().maxCoeff() < 1e-12);
  }
  CHECK_THROWS_AS(predict(pred, identity_basis<double>(1, N, 1, 1, false), u_ini, y_ini, u_f), InvalidArgument);
}
