#include "oracles.hpp"

#include "phidpc/basis.hpp"
#include "phidpc/plant.hpp"

#include <doctest.h>

#include <cmath>
#include <set>

using namespace phidpc;
using oracle::Mat;
using oracle::Vec;

TEST_CASE("identity basis is the linear regressor with bias")
{
  const auto basis = identity_basis<double>(2, 3, 1, 1);
  CHECK(basis.size() == 1 + 2 + 2 + 3);
  const Vec u_ini = (Vec(2) << 1, 2).finished();
  const Vec y_ini = (Vec(2) << 3, 4).finished();
  const Vec u_f = (Vec(3) << 5, 6, 7).finished();
  const Vec phi = eval_basis<double>(basis, u_ini, y_ini, u_f);
  CHECK(phi == (Vec(8) << 1, 1, 2, 3, 4, 5, 6, 7).finished());

  const auto no_bias = identity_basis<double>(2, 3, 1, 1, false);
  CHECK(eval_basis<double>(no_bias, u_ini, y_ini, u_f) == phi.tail(7));
  CHECK_THROWS_AS(eval_basis<double>(basis, u_f, y_ini, u_f), InvalidArgument);
}

TEST_CASE("gaussian features at and away from a center")
{
  const Vec z = (Vec(2) << 0.3, -1.2).finished();
  const auto at_center = rbf_basis<double>(1, 1, 1, 1, Mat(z), 1.0);
  const Vec one = eval_lifting<double>(at_center, z);
  REQUIRE(one.size() == 1);
  CHECK(one(0) == doctest::Approx(1.0).epsilon(1e-15));

  // ||z - c||^2 = 2 with the default width gives exp(-2).
  const Mat origin = Mat::Zero(2, 1);
  const Vec w = (Vec(2) << 1.0, 1.0).finished();
  const double sigma = default_rbf_width<double>(origin);
  CHECK(sigma == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-15));
  const auto unit_kernel = rbf_basis<double>(1, 1, 1, 1, origin, sigma);
  CHECK(eval_lifting<double>(unit_kernel, w)(0) == doctest::Approx(std::exp(-2.0)).epsilon(1e-14));
  CHECK(eval_lifting<double>(unit_kernel, w)(0) == doctest::Approx(0.135335).epsilon(1e-5));

  // Width 1 gives exp(-||z - c||^2 / 2).
  const auto wide = rbf_basis<double>(1, 1, 1, 1, origin, 1.0);
  CHECK(eval_lifting<double>(wide, w)(0) == doctest::Approx(std::exp(-1.0)).epsilon(1e-14));

  CHECK_THROWS_AS(rbf_basis<double>(1, 1, 1, 1, origin, 0.0), InvalidArgument);
  CHECK_THROWS_AS(rbf_basis<double>(1, 1, 1, 1, Mat::Zero(3, 1), 1.0), InvalidArgument);
}

TEST_CASE("affine basis ends with the future inputs and is affine in them")
{
  CounterRng rng(3);
  Mat centers(4, 5);
  for (Index i = 0; i < centers.size(); ++i) centers(i) = rng.normal();
  RbfOptions opt;
  opt.includes_bias = true;
  opt.include_window = true;
  const auto basis = rbf_basis<double>(2, 3, 1, 1, centers, 0.8, opt);
  CHECK(basis.size() == 1 + 4 + 5 + 3);

  const Vec u_ini = (Vec(2) << 0.2, -0.4).finished();
  const Vec y_ini = (Vec(2) << 0.1, 0.7).finished();
  Vec u_f = (Vec(3) << 1.0, -2.0, 0.5).finished();
  const Vec base = eval_basis<double>(basis, u_ini, y_ini, u_f);
  CHECK(base(0) == 1.0);
  CHECK(base.tail(3) == u_f);
  CHECK(base.segment(1, 4) == (Vec(4) << u_ini, y_ini).finished());

  for (Index i = 0; i < 3; ++i) {
    Vec shifted = u_f;
    shifted(i) += 0.37;
    const Vec diff = eval_basis<double>(basis, u_ini, y_ini, shifted) - base;
    Vec expected = Vec::Zero(basis.size());
    expected(basis.lifted_dim() + i) = 0.37;
    CHECK((diff - expected).cwiseAbs().maxCoeff() < 1e-15);
  }
}

TEST_CASE("general structure feeds the future inputs through the features")
{
  CounterRng rng(4);
  Mat centers(5, 2);
  for (Index i = 0; i < centers.size(); ++i) centers(i) = rng.normal();
  RbfOptions opt;
  opt.structure = BasisStructure::General;
  const auto basis = rbf_basis<double>(1, 3, 1, 1, centers, 1.0, opt);
  CHECK(basis.includes_bias);
  CHECK(basis.size() == 3);
  const Vec x = (Vec(5) << 0.1, 0.2, 0.3, 0.4, 0.5).finished();
  const Vec phi = eval_basis<double>(basis, x.head(1), x.segment(1, 1), x.tail(3));
  CHECK(phi(1) == doctest::Approx(std::exp(-(x - centers.col(0)).squaredNorm() / 2.0)));
  CHECK_THROWS_AS(eval_lifting<double>(basis, x.head(2)), InvalidArgument);
}

TEST_CASE("chebyshev features stay bounded on the scaled training range")
{
  const auto data = oracle::linear_dataset(oracle::TwoStatePlant{}.A, oracle::TwoStatePlant{}.B,
                                           oracle::TwoStatePlant{}.C, 120, 21);
  const auto blocks = build_hankel(data, 2, 3);
  BasisSet<double> layout;
  layout.t_ini = 2;
  layout.horizon = 3;
  const auto scaling = minmax_scaling(layout, blocks.past());
  const auto basis = chebyshev_basis<double>(2, 3, 1, 1, {3, 2}, scaling);
  const auto lifted = build_phi(basis, blocks);
  const Index features = basis.feature_count();
  CHECK(lifted.phi.topRows(features).cwiseAbs().maxCoeff() <= 1.0 + 1e-12);

  // Count graded exponents by brute force: 4 coordinates, caps (3, 3, 2, 2), total degree 1..3.
  Index count = 0;
  for (int a = 0; a <= 3; ++a)
    for (int b = 0; b <= 3; ++b)
      for (int c = 0; c <= 2; ++c)
        for (int d = 0; d <= 2; ++d)
          if (a + b + c + d >= 1 && a + b + c + d <= 3) ++count;
  CHECK(features == count);

  // T_2(x) = 2x^2 - 1 on a single scaled coordinate.
  const auto single = chebyshev_basis<double>(1, 1, 1, 1, {0, 2}, InputScaling<double>{});
  const Vec z = (Vec(2) << 0.0, 0.3).finished();
  const Vec f = eval_features<double>(single, z);
  REQUIRE(f.size() == 2);
  std::set<double> values(f.data(), f.data() + f.size());
  CHECK(values.count(0.3) == 1);
  CHECK(std::abs(*values.begin() - (2 * 0.09 - 1)) < 1e-15);
}

TEST_CASE("lifted data matrix columns and rank flag")
{
  const oracle::TwoStatePlant sys;
  const auto data = oracle::linear_dataset(sys.A, sys.B, sys.C, 200, 31);
  const auto blocks = build_hankel(data, 2, 4);
  const auto basis = identity_basis<double>(2, 4, 1, 1);
  const auto lifted = build_phi(basis, blocks);
  CHECK(lifted.rows() == basis.size());
  CHECK(lifted.cols() == blocks.columns());
  CHECK(lifted.row_rank_ok);
  for (Index j = 0; j < blocks.columns(); j += 13) {
    CHECK(lifted.phi.col(j) == eval_basis<double>(basis, blocks.up.col(j), blocks.yp.col(j), blocks.uf.col(j)));
  }
  const Vec sv = Eigen::JacobiSVD<Mat>(lifted.phi).singularValues();
  CHECK(lifted.row_rank_ok == (sv(sv.size() - 1) > lifted.rank_tolerance * sv(0)));

  // Two identical centers give two identical rows.
  Mat centers(4, 2);
  centers.col(0) << 0.1, 0.2, 0.3, 0.4;
  centers.col(1) = centers.col(0);
  const auto dup = build_phi(rbf_basis<double>(2, 4, 1, 1, centers, 1.0), blocks);
  CHECK_FALSE(dup.row_rank_ok);

  CHECK_THROWS_AS(build_phi(identity_basis<double>(3, 4, 1, 1), blocks), InvalidArgument);
}

TEST_CASE("benchmark lifting has forty rows")
{
  PendulumPlant<double> plant;
  MultisineSpec spec;
  spec.lo = -4.0;
  spec.hi = 4.0;
  spec.n_sines = 25;
  spec.period = 1000;
  spec.seed = 1;
  const Mat u = multisine(spec).transpose();
  const auto data = simulate_open_loop(plant, u);
  const auto blocks = build_hankel(data, 5, 10);

  const Mat thirty = kmeans_centers<double>(blocks.past(), 30, 3);
  const auto pure = build_phi(rbf_basis<double>(5, 10, 1, 1, thirty, default_rbf_width<double>(thirty)), blocks);
  CHECK(pure.rows() == 40);

  RbfOptions opt;
  opt.include_window = true;
  const Mat twenty = kmeans_centers<double>(blocks.past(), 20, 3);
  const auto hybrid = build_phi(rbf_basis<double>(5, 10, 1, 1, twenty, default_rbf_width<double>(twenty), opt), blocks);
  CHECK(hybrid.rows() == 40);
  CHECK(hybrid.cols() == 985);
}

TEST_CASE("k-means on small point sets")
{
  SUBCASE("two separated points")
  {
    const Mat pts = (Mat(1, 2) << 0.0, 10.0).finished();
    const Mat c = kmeans_centers<double>(pts, 2, 1);
    CHECK(std::min(c(0, 0), c(0, 1)) == 0.0);
    CHECK(std::max(c(0, 0), c(0, 1)) == 10.0);
  }
  SUBCASE("single cluster is the mean")
  {
    CounterRng rng(5);
    Mat pts(3, 40);
    for (Index i = 0; i < pts.size(); ++i) pts(i) = rng.normal();
    const Mat c = kmeans_centers<double>(pts, 1, 8);
    CHECK((c.col(0) - pts.rowwise().mean()).cwiseAbs().maxCoeff() < 1e-14);
  }
  SUBCASE("square corners")
  {
    const Mat pts = (Mat(2, 4) << 1, 1, -1, -1, 1, -1, 1, -1).finished();
    const Mat c = kmeans_centers<double>(pts, 4, 2);
    double total = 0.0;
    for (Index j = 0; j < 4; ++j) {
      double best = 1e300;
      for (Index l = 0; l < 4; ++l) best = std::min(best, (pts.col(j) - c.col(l)).squaredNorm());
      total += best;
    }
    CHECK(total == 0.0);
  }
  SUBCASE("determinism and errors")
  {
    CounterRng rng(6);
    Mat pts(2, 50);
    for (Index i = 0; i < pts.size(); ++i) pts(i) = rng.normal();
    CHECK(kmeans_centers<double>(pts, 5, 3) == kmeans_centers<double>(pts, 5, 3));
    const Mat twice = (Mat(1, 3) << 1.0, 1.0, 2.0).finished();
    CHECK_THROWS_AS(kmeans_centers<double>(twice, 3, 1), InvalidArgument);
    CHECK_THROWS_AS(kmeans_centers<double>(pts, 0, 1), InvalidArgument);
  }
}
