#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>

#include "gradcheck.hpp"
#include "pgmap/rng.hpp"
#include "pgmap/tape.hpp"

namespace {

using namespace pgmap;
using Eigen::MatrixXd;
using testutil::check_gradients;

MatrixXd random_matrix(Rng& rng, int r, int c, double lo = -1.0, double hi = 1.0) {
  MatrixXd m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = rng.uniform(lo, hi);
  return m;
}

TEST(Tape, ForwardValuesMatchEigen) {
  ad::Tape t;
  Rng rng(1);
  const MatrixXd A = random_matrix(rng, 3, 4), B = random_matrix(rng, 4, 2);
  auto a = t.leaf(A), b = t.leaf(B);
  EXPECT_TRUE(ad::matmul(a, b).val().isApprox(A * B));
  EXPECT_TRUE(ad::matmul_nt(t.leaf(A), t.leaf(B.transpose())).val().isApprox(A * B));

  auto sm = ad::softmax_rows(t.leaf(random_matrix(rng, 5, 7)));
  for (int r = 0; r < 5; ++r) {
    EXPECT_NEAR(sm.val().row(r).sum(), 1.0, 1e-12);
    EXPECT_GT(sm.val().row(r).minCoeff(), 0.0);
  }
  auto lsm = ad::log_softmax_rows(t.leaf(sm.val()));
  EXPECT_TRUE(lsm.val().array().exp().matrix().isApprox(
      ad::softmax_rows(t.leaf(sm.val())).val()));

  auto ln = ad::layernorm_rows(t.leaf(random_matrix(rng, 4, 16)));
  for (int r = 0; r < 4; ++r) {
    EXPECT_NEAR(ln.val().row(r).mean(), 0.0, 1e-9);
    EXPECT_NEAR(ln.val().row(r).array().square().mean(), 1.0, 1e-3);
  }

  auto l2 = ad::l2_normalize_rows(t.leaf(random_matrix(rng, 6, 5)));
  for (int r = 0; r < 6; ++r) EXPECT_NEAR(l2.val().row(r).norm(), 1.0, 1e-9);
}

TEST(Tape, SharedNodeAccumulatesGradient) {
  // loss = sum(x .* x) + sum(x)  =>  d/dx = 2x + 1
  ad::Tape t;
  Rng rng(2);
  const MatrixXd X = random_matrix(rng, 3, 3);
  auto x = t.leaf(X);
  auto loss = ad::add(ad::sum_all(ad::hadamard(x, x)), ad::sum_all(x));
  t.backward(loss);
  EXPECT_TRUE(x.grad().isApprox(2.0 * X + MatrixXd::Ones(3, 3), 1e-12));
}

TEST(Tape, GradArithmetic) {
  Rng rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    auto res = check_gradients(
        {random_matrix(rng, 3, 4), random_matrix(rng, 3, 4)},
        [](ad::Tape&, std::vector<ad::Value>& in) {
          auto s = ad::sub(ad::scale(in[0], 1.7), in[1]);
          return ad::sum_all(ad::hadamard(ad::add_scalar(s, 0.3), in[0]));
        });
    EXPECT_TRUE(res.ok) << res.detail;
  }
}

TEST(Tape, GradMatmulFamily) {
  Rng rng(4);
  for (int trial = 0; trial < 5; ++trial) {
    auto res = check_gradients(
        {random_matrix(rng, 3, 5), random_matrix(rng, 5, 4), random_matrix(rng, 4, 4)},
        [](ad::Tape&, std::vector<ad::Value>& in) {
          auto c = ad::matmul(in[0], in[1]);     // 3x4
          auto d = ad::matmul_nt(c, in[2]);      // 3x4
          return ad::sum_all(ad::hadamard(d, c));
        });
    EXPECT_TRUE(res.ok) << res.detail;
  }
}

TEST(Tape, GradRowBroadcasts) {
  Rng rng(5);
  auto res = check_gradients(
      {random_matrix(rng, 4, 6), random_matrix(rng, 1, 6), random_matrix(rng, 1, 6)},
      [](ad::Tape&, std::vector<ad::Value>& in) {
        return ad::sum_all(ad::tanh_(ad::mul_rowvec(ad::add_rowvec(in[0], in[1]), in[2])));
      });
  EXPECT_TRUE(res.ok) << res.detail;
}

TEST(Tape, GradElementwise) {
  Rng rng(6);
  auto res = check_gradients(
      {random_matrix(rng, 3, 3, 0.5, 2.0)},
      [](ad::Tape&, std::vector<ad::Value>& in) {
        auto s = ad::sqrt_(in[0]);
        return ad::sum_all(ad::hadamard(ad::sin_(s), ad::cos_(ad::scale(in[0], 0.7))));
      });
  EXPECT_TRUE(res.ok) << res.detail;
}

TEST(Tape, GradSoftmaxes) {
  Rng rng(7);
  for (int trial = 0; trial < 5; ++trial) {
    const MatrixXd W = random_matrix(rng, 4, 6);
    auto res = check_gradients(
        {random_matrix(rng, 4, 6)},
        [&](ad::Tape& t, std::vector<ad::Value>& in) {
          auto w = t.leaf(W);
          auto a = ad::sum_all(ad::hadamard(ad::softmax_rows(in[0]), w));
          auto b = ad::sum_all(ad::hadamard(ad::log_softmax_rows(in[0]), w));
          return ad::add(a, b);
        });
    EXPECT_TRUE(res.ok) << res.detail;
  }
}

TEST(Tape, GradNormalizations) {
  Rng rng(8);
  for (int trial = 0; trial < 5; ++trial) {
    const MatrixXd W = random_matrix(rng, 3, 8);
    auto res = check_gradients(
        {random_matrix(rng, 3, 8)},
        [&](ad::Tape& t, std::vector<ad::Value>& in) {
          auto w = t.leaf(W);
          auto a = ad::sum_all(ad::hadamard(ad::layernorm_rows(in[0]), w));
          auto b = ad::sum_all(ad::hadamard(ad::l2_normalize_rows(in[0]), w));
          return ad::add(a, b);
        });
    EXPECT_TRUE(res.ok) << res.detail;
  }
}

TEST(Tape, GradShapeOps) {
  Rng rng(9);
  const MatrixXd W = random_matrix(rng, 4, 9);
  auto res = check_gradients(
      {random_matrix(rng, 4, 3), random_matrix(rng, 4, 2), random_matrix(rng, 4, 4)},
      [&](ad::Tape& t, std::vector<ad::Value>& in) {
        auto cat = ad::concat_cols({in[0], in[1], in[2]});
        auto mid = ad::slice_cols(cat, 2, 4);
        auto w = t.leaf(W);
        return ad::add(ad::sum_all(ad::hadamard(cat, w)),
                       ad::sum_all(ad::hadamard(mid, ad::slice_cols(w, 0, 4))));
      });
  EXPECT_TRUE(res.ok) << res.detail;
}

TEST(Tape, GradGatherWithRepeats) {
  Rng rng(10);
  const MatrixXd W = random_matrix(rng, 4, 3);
  auto res = check_gradients({random_matrix(rng, 5, 3)},
                             [&](ad::Tape& t, std::vector<ad::Value>& in) {
                               auto g = ad::gather_rows(in[0], {0, 2, 2, 4});
                               return ad::sum_all(ad::hadamard(g, t.leaf(W)));
                             });
  EXPECT_TRUE(res.ok) << res.detail;
}

TEST(Tape, GradReductions) {
  Rng rng(11);
  auto res = check_gradients(
      {random_matrix(rng, 3, 4)}, [](ad::Tape&, std::vector<ad::Value>& in) {
        auto rs = ad::rowwise_sum(in[0]);  // 3x1
        return ad::add(ad::mean_all(ad::hadamard(rs, rs)), ad::sum_all(in[0]));
      });
  EXPECT_TRUE(res.ok) << res.detail;
}

TEST(Tape, BilinearSampleMatchesRasterAndGradients) {
  Rng rng(12);
  Raster r(12, 14, 3);
  for (auto& v : r.data) v = rng.uniform();
  // positions strictly inside grid cells so FD never crosses a cell boundary
  MatrixXd P(6, 2);
  for (int i = 0; i < 6; ++i) {
    P(i, 0) = rng.uniform_int(1, 11) + rng.uniform(0.2, 0.8);
    P(i, 1) = rng.uniform_int(1, 9) + rng.uniform(0.2, 0.8);
  }
  ad::Tape t;
  auto pos = t.leaf(P);
  auto s = ad::bilinear_sample(pos, &r, {0, 1, 2});
  for (int i = 0; i < 6; ++i)
    for (int ch = 0; ch < 3; ++ch)
      EXPECT_NEAR(s.val()(i, ch), r.sample(P(i, 0), P(i, 1), ch), 1e-12);

  const MatrixXd W = random_matrix(rng, 6, 3);
  auto res = check_gradients({P}, [&](ad::Tape& tape, std::vector<ad::Value>& in) {
    auto samp = ad::bilinear_sample(in[0], &r, {0, 1, 2});
    return ad::sum_all(ad::hadamard(samp, tape.leaf(W)));
  });
  EXPECT_TRUE(res.ok) << res.detail;
}

TEST(Tape, ErrorsOnMisuse) {
  ad::Tape t1, t2;
  auto a = t1.leaf(MatrixXd::Ones(2, 2));
  auto b = t2.leaf(MatrixXd::Ones(2, 2));
  EXPECT_THROW(ad::add(a, b), BadInput);
  EXPECT_THROW(ad::matmul(a, t1.leaf(MatrixXd::Ones(3, 2))), BadInput);
  EXPECT_THROW(t1.backward(a), BadInput);  // non-scalar
  EXPECT_THROW(ad::sqrt_(t1.leaf(-MatrixXd::Ones(2, 2))), NumericError);
  EXPECT_THROW(ad::slice_cols(a, 1, 5), BadInput);
  EXPECT_THROW(ad::gather_rows(a, {0, 3}), BadInput);
}

}  // namespace
