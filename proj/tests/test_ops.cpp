#include <gtest/gtest.h>

#include "neuroalign/errors.hpp"
#include "neuroalign/ops.hpp"
#include "test_support.hpp"

namespace neuroalign {
namespace {

using testing::check_gradients;

struct OpsGrad : ::testing::Test {
  Rng rng{42};
  ad::Parameter a{randn(3, 4, rng)};
  ad::Parameter b{randn(3, 4, rng)};
  ad::Parameter w{randn(4, 5, rng)};
  ad::Parameter row{randn(1, 4, rng)};
  ad::Parameter col{randn(3, 1, rng)};
  // Projects a matrix to a scalar with fixed random weights so every output
  // entry influences the loss differently.
  double probe(ad::Tape& tape, ad::Var v, std::uint64_t s, ad::Var* out) {
    Rng r(s);
    *out = ad::sum(ad::mul(v, tape.constant(randn(v.rows(), v.cols(), r))));
    return out->item();
  }
  ad::Var reduce(ad::Tape& tape, ad::Var v) {
    ad::Var out;
    probe(tape, v, 99, &out);
    return out;
  }
  void expect_ok(const std::vector<ad::Parameter*>& ps, const testing::LossFn& f) {
    const auto r = check_gradients(ps, f);
    EXPECT_LT(r.rel_error, 1e-6) << "entries=" << r.entries;
  }
};

TEST_F(OpsGrad, Arithmetic) {
  expect_ok({&a, &b}, [&](ad::Tape& t) { return reduce(t, ad::add(t.param(a), t.param(b))); });
  expect_ok({&a, &b}, [&](ad::Tape& t) { return reduce(t, ad::sub(t.param(a), t.param(b))); });
  expect_ok({&a, &b}, [&](ad::Tape& t) { return reduce(t, ad::mul(t.param(a), t.param(b))); });
  expect_ok({&a}, [&](ad::Tape& t) { return reduce(t, ad::scale(t.param(a), -2.5)); });
  expect_ok({&a}, [&](ad::Tape& t) { return reduce(t, ad::add_scalar(t.param(a), 0.3)); });
  expect_ok({&a, &row}, [&](ad::Tape& t) { return reduce(t, ad::add_row(t.param(a), t.param(row))); });
  expect_ok({&a, &col}, [&](ad::Tape& t) { return reduce(t, ad::scale_rows(t.param(a), t.param(col))); });
}

TEST_F(OpsGrad, LinearAlgebraAndShape) {
  expect_ok({&a, &w}, [&](ad::Tape& t) { return reduce(t, ad::matmul(t.param(a), t.param(w))); });
  expect_ok({&a, &b}, [&](ad::Tape& t) { return reduce(t, ad::matmul_nt(t.param(a), t.param(b))); });
  expect_ok({&a}, [&](ad::Tape& t) { return reduce(t, ad::transpose(t.param(a))); });
  expect_ok({&a}, [&](ad::Tape& t) { return reduce(t, ad::rows(t.param(a), 1, 2)); });
  expect_ok({&a}, [&](ad::Tape& t) { return reduce(t, ad::cols(t.param(a), 1, 2)); });
  expect_ok({&a, &b}, [&](ad::Tape& t) { return reduce(t, ad::vcat({t.param(a), t.param(b)})); });
  expect_ok({&a, &b}, [&](ad::Tape& t) { return reduce(t, ad::hcat({t.param(a), t.param(b)})); });
  expect_ok({&a}, [&](ad::Tape& t) { return reduce(t, ad::reshape(t.param(a), 2, 6)); });
  expect_ok({&row}, [&](ad::Tape& t) { return reduce(t, ad::repeat_rows(t.param(row), 3)); });
  expect_ok({&a}, [&](ad::Tape& t) { return reduce(t, ad::mean_rows(t.param(a))); });
  expect_ok({&a}, [&](ad::Tape& t) { return reduce(t, ad::unfold_rows(t.param(a), 3)); });
  expect_ok({&a}, [&](ad::Tape& t) { return reduce(t, ad::patchify(t.param(a), 3, 0.5)); });
}

TEST_F(OpsGrad, Nonlinearities) {
  expect_ok({&a}, [&](ad::Tape& t) { return reduce(t, ad::softmax_rows(t.param(a))); });
  expect_ok({&a}, [&](ad::Tape& t) { return reduce(t, ad::log_softmax_rows(t.param(a))); });
  expect_ok({&a}, [&](ad::Tape& t) { return reduce(t, ad::sigmoid(t.param(a))); });
  expect_ok({&a}, [&](ad::Tape& t) { return reduce(t, ad::gelu(t.param(a))); });
  expect_ok({&a}, [&](ad::Tape& t) { return reduce(t, ad::tanh(t.param(a))); });
  expect_ok({&a}, [&](ad::Tape& t) { return reduce(t, ad::exp(t.param(a))); });
  expect_ok({&a}, [&](ad::Tape& t) { return reduce(t, ad::normalize_sum_rows(ad::sigmoid(t.param(a)))); });
  expect_ok({&a}, [&](ad::Tape& t) { return reduce(t, ad::l2_normalize_rows(t.param(a))); });
  ad::Parameter gain{Mat::Constant(1, 4, 1.2)}, bias{Mat::Constant(1, 4, 0.1)};
  expect_ok({&a, &gain, &bias},
            [&](ad::Tape& t) { return reduce(t, ad::layer_norm_rows(t.param(a), t.param(gain), t.param(bias))); });
  expect_ok({&a}, [&](ad::Tape& t) { return ad::mean(t.param(a)); });
  expect_ok({&a}, [&](ad::Tape& t) { return ad::mean_square(t.param(a)); });
}

TEST(Ops, SoftmaxRowsOnSimplex) {
  Rng rng(3);
  ad::Tape t(false);
  const Mat s = ad::softmax_rows(t.constant(randn(50, 7, rng, 30.0))).value();
  EXPECT_TRUE((s.array() >= 0.0).all());
  for (Eigen::Index i = 0; i < s.rows(); ++i) EXPECT_NEAR(s.row(i).sum(), 1.0, 1e-12);
}

TEST(Ops, L2NormalizeZeroRowThrows) {
  ad::Tape t(false);
  EXPECT_THROW(ad::l2_normalize_rows(t.constant(Mat::Zero(2, 3))), NumericError);
}

TEST(Ops, PatchifyLayoutIsTimeMajor) {
  Mat x(2, 5);
  x << 1, 2, 3, 4, 5, 10, 20, 30, 40, 50;
  ad::Tape t(false);
  const Mat p = ad::patchify(t.constant(x), 2, -1.0).value();
  ASSERT_EQ(p.rows(), 3);
  ASSERT_EQ(p.cols(), 4);
  // (p, k*C + ch) = x(ch, p*len + k)
  EXPECT_EQ(p(0, 0), 1);
  EXPECT_EQ(p(0, 1), 10);
  EXPECT_EQ(p(0, 2), 2);
  EXPECT_EQ(p(0, 3), 20);
  EXPECT_EQ(p(2, 0), 5);
  EXPECT_EQ(p(2, 1), 50);
  EXPECT_EQ(p(2, 2), -1.0);
  EXPECT_EQ(p(2, 3), -1.0);
}

TEST(Ops, UnfoldRowsZeroPads) {
  Mat x(3, 1);
  x << 1, 2, 3;
  ad::Tape t(false);
  const Mat u = ad::unfold_rows(t.constant(x), 3).value();
  Mat want(3, 3);
  want << 0, 1, 2, 1, 2, 3, 2, 3, 0;
  EXPECT_EQ(u, want);
}

TEST(Autodiff, SharedParameterGradientsAccumulate) {
  ad::Parameter p(Mat::Constant(1, 1, 3.0));
  ad::Tape t;
  const ad::Var x1 = t.param(p);
  const ad::Var x2 = t.param(p);
  const ad::Var y = ad::sum(ad::mul(x1, x2));  // p^2
  t.backward(y);
  EXPECT_DOUBLE_EQ(t.gradient(p)(0, 0), 6.0);
}

TEST(Autodiff, FrozenAndDisabledTapesRecordNoGradient) {
  ad::Parameter p(Mat::Constant(2, 2, 1.0));
  p.frozen = true;
  ad::Tape t;
  const ad::Var y = ad::sum(t.param(p));
  t.backward(y);
  EXPECT_EQ(t.gradient(p), Mat::Zero(2, 2));
  p.frozen = false;
  ad::Tape off(false);
  EXPECT_FALSE(off.requires_grad(off.param(p)));
}

}  // namespace
}  // namespace neuroalign
