#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "rover/numerics/checkpoint.hpp"
#include "rover/numerics/gradcheck.hpp"
#include "rover/numerics/ops.hpp"
#include "rover/util/random.hpp"
#include "rover/verify/checks.hpp"

using namespace rover;

namespace {

Tensor random_matrix(Rng& rng, std::size_t r, std::size_t c) {
  Tensor t({r, c});
  for (double& v : t.data()) v = rng.normal();
  return t;
}

}  // namespace

TEST(Matmul, IdentityIsNeutral) {
  Rng rng(1);
  Tape t(false);
  Tensor eye({3, 3});
  for (std::size_t i = 0; i < 3; ++i) eye.at(i, i) = 1.0;
  auto a = random_matrix(rng, 3, 3);
  auto c = ops::matmul(t.constant(a), t.constant(eye));
  EXPECT_TRUE(verify::same_bits(c.value().data(), a.data()));
}

TEST(Matmul, ZerosAnnihilate) {
  Rng rng(2);
  Tape t(false);
  auto c = ops::matmul(t.constant(Tensor({2, 4})), t.constant(random_matrix(rng, 4, 5)));
  ASSERT_EQ(c.value().shape(), (Shape{2, 5}));
  for (double v : c.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(Matmul, MatchesTripleLoop) {
  Rng rng(3);
  Tape t(false);
  auto a = random_matrix(rng, 5, 7), b = random_matrix(rng, 7, 3);
  auto c = ops::matmul(t.constant(a), t.constant(b));
  const auto want = oracle::mul(oracle::mat(a), oracle::mat(b));
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(c.value().at(i, j), want[i][j], 1e-12);
}

TEST(Matmul, AssociativeOnRandomTriples) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    Tape t(false);
    auto a = t.constant(random_matrix(rng, 4, 6)), b = t.constant(random_matrix(rng, 6, 5)),
         c = t.constant(random_matrix(rng, 5, 3));
    auto l = ops::matmul(ops::matmul(a, b), c), r = ops::matmul(a, ops::matmul(b, c));
    for (std::size_t i = 0; i < l.value().size(); ++i)
      EXPECT_LE(std::abs(l.value()[i] - r.value()[i]), 1e-9 * std::max(1.0, std::abs(l.value()[i])));
  }
}

TEST(Matmul, RejectsMismatchedShapes) {
  Tape t(false);
  EXPECT_THROW(ops::matmul(t.constant(Tensor({2, 3})), t.constant(Tensor({4, 2}))), DimensionError);
}

TEST(RowSoftmax, SingleColumnIsOne) {
  Tape t(false);
  auto y = ops::row_softmax(t.constant(Tensor::matrix(3, 1, {-4.0, 0.0, 17.0})));
  for (double v : y.value().data()) EXPECT_EQ(v, 1.0);
}

TEST(RowSoftmax, UniformRow) {
  Tape t(false);
  auto y = ops::row_softmax(t.constant(Tensor::matrix(1, 3, {2.5, 2.5, 2.5})));
  for (double v : y.value().data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(RowSoftmax, LargeLogitsDoNotOverflow) {
  Tape t(false);
  auto y = ops::row_softmax(t.constant(Tensor::matrix(1, 2, {1000.0, 0.0})));
  const long double tail = std::exp(-1000.0L) / (1.0L + std::exp(-1000.0L));
  EXPECT_EQ(y.value()[0], 1.0);
  EXPECT_NEAR(y.value()[1], static_cast<double>(tail), 1e-300);
  EXPECT_TRUE(std::isfinite(y.value()[1]));
}

TEST(RowSoftmax, RowsSumToOne) {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    Tape t(false);
    const std::size_t r = 1 + rng.below(6), c = 1 + rng.below(12);
    Tensor x({r, c});
    for (double& v : x.data()) v = 30.0 * rng.normal();
    auto y = ops::row_softmax(t.constant(x));
    for (std::size_t i = 0; i < r; ++i) {
      double s = 0.0;
      for (double v : y.value().row(i)) s += v;
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(AvgPoolRows, SingleIndexIsVerbatim) {
  Rng rng(6);
  Tape t(false);
  auto x = random_matrix(rng, 4, 5);
  std::vector<std::size_t> idx{2};
  auto y = ops::avg_pool_rows(t.constant(x), idx);
  EXPECT_TRUE(verify::same_bits(y.value().data(), x.row(2)));
}

TEST(AvgPoolRows, OppositeRowsCancel) {
  Rng rng(7);
  Tape t(false);
  Tensor x({2, 6});
  for (std::size_t j = 0; j < 6; ++j) {
    x.at(0, j) = rng.normal();
    x.at(1, j) = -x.at(0, j);
  }
  std::vector<std::size_t> idx{0, 1};
  auto y = ops::avg_pool_rows(t.constant(x), idx);
  for (double v : y.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(AvgPoolRows, MatchesScalarLoop) {
  Rng rng(8);
  Tape t(false);
  auto x = random_matrix(rng, 9, 5);
  std::vector<std::size_t> idx{1, 4, 5, 8};
  auto y = ops::avg_pool_rows(t.constant(x), idx);
  for (std::size_t j = 0; j < 5; ++j) {
    double s = 0.0;
    for (auto i : idx) s += x.at(i, j);
    EXPECT_NEAR(y.value()[j], s / 4.0, 1e-15);
  }
}

TEST(Backward, SumGivesOnes) {
  Rng rng(9);
  Parameter p("x", random_matrix(rng, 3, 4));
  Tape t(true);
  t.backward(ops::sum(t.parameter(p)));
  for (double g : p.grad.data()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, UnusedParameterGetsZero) {
  Rng rng(10);
  Parameter used("a", random_matrix(rng, 2, 2)), unused("b", random_matrix(rng, 2, 2));
  Tape t(true);
  t.parameter(unused);
  t.backward(ops::sum(ops::exp(t.parameter(used))));
  for (double g : unused.grad.data()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, SoftmaxCompositionMatchesFiniteDifferences) {
  Rng rng(11);
  Parameter x("x", random_matrix(rng, 3, 4)), w("w", random_matrix(rng, 5, 4));
  std::vector<Parameter*> params{&x, &w};
  // Weight the outputs so the loss is not identically the row count.
  const Tensor weights = random_matrix(rng, 3, 5);
  auto loss = [&](Tape& t) {
    Var y = ops::row_softmax(ops::matmul_nt(t.parameter(x), t.parameter(w)));
    return ops::sum(ops::mul(y, t.constant(weights)));
  };
  auto rep = finite_diff_check(loss, params, 1e-5, 1e-6);
  for (const auto& p : rep.params) EXPECT_TRUE(p.pass) << p.name << " rel err " << p.max_rel_error;
}

TEST(Backward, TwoPathsAccumulate) {
  Rng rng(12);
  Parameter p("p", random_matrix(rng, 2, 3));
  auto grad_of = [&](int which) {
    p.zero_grad();
    Tape t(true);
    Var v = t.parameter(p);
    Var a = ops::sum(ops::exp(v)), b = ops::sum(ops::mul(v, v));
    t.backward(which == 0 ? a : which == 1 ? b : ops::add(a, b));
    return std::vector<double>(p.grad.data().begin(), p.grad.data().end());
  };
  const auto ga = grad_of(0), gb = grad_of(1), both = grad_of(2);
  for (std::size_t i = 0; i < both.size(); ++i) EXPECT_NEAR(both[i], ga[i] + gb[i], 1e-14);
}

TEST(Backward, TapeCannotBeReused) {
  Parameter p("p", Tensor::vector({1.0}));
  Tape t(true);
  Var l = ops::sum(t.parameter(p));
  t.backward(l);
  EXPECT_THROW(t.backward(l), ContractError);
}

TEST(GradCheck, SquareAtThree) {
  Parameter p("theta", Tensor::vector({3.0}));
  std::vector<Parameter*> params{&p};
  auto rep = finite_diff_check([&](Tape& t) { Var v = t.parameter(p); return ops::sum(ops::mul(v, v)); }, params,
                               1e-5, 1e-4);
  ASSERT_TRUE(rep.pass);
  EXPECT_EQ(rep.params[0].worst_analytic, 6.0);
  EXPECT_NEAR(rep.params[0].worst_numeric, 6.0, 1e-9);
}

TEST(GradCheck, ConstantLossPasses) {
  Parameter p("theta", Tensor::vector({1.0, 2.0}));
  std::vector<Parameter*> params{&p};
  auto rep = finite_diff_check(
      [&](Tape& t) {
        t.parameter(p);
        return t.constant(Tensor::vector({4.0}));
      },
      params, 1e-5, 1e-4);
  EXPECT_TRUE(rep.pass);
  EXPECT_EQ(rep.params[0].max_rel_error, 0.0);
}

TEST(GradCheck, ReportsWrongGradient) {
  // exp with a deliberately wrong backward rule.
  Parameter p("theta", Tensor::vector({0.3, -0.2}));
  std::vector<Parameter*> params{&p};
  auto bad_exp = [](const Var& x) {
    Tensor out = x.value();
    for (double& v : out.data()) v = std::exp(v);
    return x.tape()->record(std::move(out), {x}, [x](Tape& t, const Tensor& g) {
      if (Tensor* gx = t.grad_sink(x))
        for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
    });
  };
  auto rep = finite_diff_check([&](Tape& t) { return ops::sum(bad_exp(t.parameter(p))); }, params, 1e-5, 1e-4);
  EXPECT_FALSE(rep.pass);
  EXPECT_EQ(rep.params[0].mismatches.size(), 2u);
}

TEST(GradCheck, StepOutsideRangeIsRejected) {
  Parameter p("theta", Tensor::vector({1.0}));
  std::vector<Parameter*> params{&p};
  EXPECT_THROW(finite_diff_check([&](Tape& t) { return ops::sum(t.parameter(p)); }, params, 1e-2, 1e-4),
               ContractError);
}

TEST(Ops, EveryOpMatchesFiniteDifferences) {
  auto r = verify::check_op_gradients(13);
  EXPECT_TRUE(r.pass) << r.detail;
}

TEST(Checkpoint, RoundTripIsBitExact) {
  auto r = verify::check_checkpoint_roundtrip(14);
  EXPECT_TRUE(r.pass) << r.detail;
}

TEST(Checkpoint, TruncatedFileIsRejected) {
  const auto path = (std::filesystem::temp_directory_path() / "rover_numerics_trunc.bin").string();
  save_tensors(path, {{"a", Tensor::matrix(2, 2, {1, 2, 3, 4})}});
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 3);
  EXPECT_THROW(load_tensors(path), CheckpointError);
  std::filesystem::remove(path);
}
