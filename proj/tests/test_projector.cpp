#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "neuroalign/errors.hpp"
#include "neuroalign/projector.hpp"
#include "test_support.hpp"

namespace neuroalign {
namespace {

MoEConfig config(int k = 4, int d = 6, int f = 5) {
  MoEConfig c;
  c.input_dim = d;
  c.experts = k;
  c.output_dim = f;
  c.router_hidden = 7;
  c.hidden = 9;
  return c;
}

void zero_router_output(MoEProjector& p, const Mat& bias) {
  p.router().fc2.weight.value.setZero();
  p.router().fc2.bias.value = bias;
}

TEST(Routing, ZeroRouterIsUniform) {
  Rng rng(1);
  MoEProjector p(config(4), rng);
  zero_router_output(p, Mat::Zero(1, 4));
  const Mat w = p.route(randn(10, 6, rng));
  EXPECT_LT((w.array() - 0.25).abs().maxCoeff(), 1e-15);
}

TEST(Routing, HandSetLogits) {
  Rng rng(2);
  MoEProjector p(config(2), rng);
  zero_router_output(p, (Mat(1, 2) << 1.0, 2.0).finished());
  const Mat w = p.route(randn(3, 6, rng));
  const double e1 = std::exp(1.0), e2 = std::exp(2.0);
  for (Eigen::Index i = 0; i < 3; ++i) {
    EXPECT_NEAR(w(i, 0), e1 / (e1 + e2), 1e-12);
    EXPECT_NEAR(w(i, 1), e2 / (e1 + e2), 1e-12);
  }
  EXPECT_NEAR(w(0, 0), 0.2689, 1e-4);

  auto cs = config(2);
  cs.routing = RoutingNormalization::kSigmoidNormalized;
  MoEProjector q(cs, rng);
  zero_router_output(q, (Mat(1, 2) << 1.0, 2.0).finished());
  const double s1 = 1 / (1 + std::exp(-1.0)), s2 = 1 / (1 + std::exp(-2.0));
  EXPECT_NEAR(q.route(randn(1, 6, rng))(0, 0), s1 / (s1 + s2), 1e-12);
}

TEST(Routing, RowsOnSimplexForRandomTokensAndInits) {
  for (auto mode : {RoutingNormalization::kSoftmax, RoutingNormalization::kSigmoidNormalized}) {
    Rng data_rng(3);
    const Mat tokens = randn(1000, 6, data_rng, 5.0);
    for (int init = 0; init < 20; ++init) {
      Rng rng(1000 + static_cast<std::uint64_t>(init));
      auto c = config(1 + init % 4);
      c.routing = mode;
      MoEProjector p(c, rng);
      const Mat w = p.route(tokens);
      EXPECT_GE(w.minCoeff(), 0.0);
      EXPECT_LT((w.rowwise().sum().array() - 1.0).abs().maxCoeff(), 1e-6);
    }
  }
}

TEST(Routing, NonFiniteScoresAndWidthMismatch) {
  Rng rng(4);
  MoEProjector p(config(), rng);
  Mat bad = randn(2, 6, rng);
  bad(1, 3) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(p.route(bad), NumericError);
  EXPECT_THROW(p.project(randn(2, 5, rng)), ConfigError);
}

TEST(Project, SingleExpertEqualsExpert) {
  Rng rng(5);
  MoEProjector p(config(1), rng);
  const Mat x = randn(4, 6, rng);
  EXPECT_TRUE((p.route(x).array() == 1.0).all());
  ad::Tape t(false);
  EXPECT_EQ(p.project(x), p.expert(t, 0, t.constant(x)).value());
}

TEST(Project, IdenticalExpertsIgnoreRouting) {
  Rng rng(6);
  MoEProjector p(config(3), rng);
  p.experts()[1] = p.experts()[0];
  p.experts()[2] = p.experts()[0];
  const Mat x = randn(5, 6, rng);
  ad::Tape t(false);
  EXPECT_LT((p.project(x) - p.expert(t, 0, t.constant(x)).value()).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Project, EqualWeightsOfLinearExpertsMatchDirectAlgebra) {
  Rng rng(7);
  auto c = config(2);
  c.expert_activation = nn::Activation::kIdentity;
  MoEProjector p(c, rng);
  zero_router_output(p, Mat::Zero(1, 2));
  const Mat x = randn(3, 6, rng);
  auto apply = [&](const nn::Mlp& m) {
    Mat h = x * m.fc1.weight.value;
    h.rowwise() += m.fc1.bias.value.row(0);
    Mat y = h * m.fc2.weight.value;
    y.rowwise() += m.fc2.bias.value.row(0);
    return y;
  };
  const Mat want = 0.5 * apply(p.experts()[0]) + 0.5 * apply(p.experts()[1]);
  EXPECT_LT((p.project(x) - want).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Project, OutputInsideExpertHull) {
  Rng rng(8);
  MoEProjector p(config(4), rng);
  const Mat x = randn(50, 6, rng);
  const Mat z = p.project(x);
  ad::Tape t(false);
  Mat lo = Mat::Constant(z.rows(), z.cols(), INFINITY), hi = Mat::Constant(z.rows(), z.cols(), -INFINITY);
  for (int k = 0; k < 4; ++k) {
    const Mat e = p.expert(t, k, t.constant(x)).value();
    lo = lo.cwiseMin(e);
    hi = hi.cwiseMax(e);
  }
  EXPECT_TRUE((z.array() >= lo.array() - 1e-12).all());
  EXPECT_TRUE((z.array() <= hi.array() + 1e-12).all());
}

TEST(Project, ExpertPermutationEquivariance) {
  Rng rng(9);
  MoEProjector p(config(3), rng);
  MoEProjector q = p;
  const std::vector<int> perm{2, 0, 1};
  for (int k = 0; k < 3; ++k) {
    q.experts()[static_cast<std::size_t>(k)] = p.experts()[static_cast<std::size_t>(perm[static_cast<std::size_t>(k)])];
    q.router().fc2.weight.value.col(k) = p.router().fc2.weight.value.col(perm[static_cast<std::size_t>(k)]);
    q.router().fc2.bias.value(0, k) = p.router().fc2.bias.value(0, perm[static_cast<std::size_t>(k)]);
  }
  const Mat x = randn(7, 6, rng);
  EXPECT_LT((p.project(x) - q.project(x)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Project, GradientsMatchFiniteDifferences) {
  for (auto mode : {RoutingNormalization::kSoftmax, RoutingNormalization::kSigmoidNormalized}) {
    Rng rng(10);
    auto c = config(3);
    c.routing = mode;
    MoEProjector p(c, rng);
    const Mat x = randn(4, 6, rng);
    const Mat probe = randn(4, 5, rng);
    std::vector<ad::Parameter*> ps;
    p.visit("p", [&](const std::string&, ad::Parameter& q) { ps.push_back(&q); });
    ad::Parameter input(x);
    ps.push_back(&input);
    const auto r = testing::check_gradients(ps, [&](ad::Tape& t) {
      return ad::sum(ad::mul(p.project(t, t.param(input)), t.constant(probe)));
    });
    EXPECT_LT(r.rel_error, 1e-4);
  }
}

TEST(MoEConfig, Validation) {
  auto c = config();
  c.experts = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = config();
  c.output_dim = 1;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_EQ(config(2, 4, 5).expert_hidden(), 9);
  MoEConfig d;
  EXPECT_EQ(d.expert_hidden(), 4 * d.output_dim);
}

}  // namespace
}  // namespace neuroalign
