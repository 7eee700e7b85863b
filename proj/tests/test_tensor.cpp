#include <relnav/tensor.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>

using namespace relnav;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(r, c);
  for (double& x : m.data()) x = n(rng);
  return m;
}

// Compares tape gradients of a scalar function of several inputs against
// central differences of the same function.
void expect_gradients_match(std::vector<Matrix> inputs, const std::function<Var(Tape&, std::vector<Var>&)>& f,
                            double tol = 1e-7) {
  Tape tape;
  std::vector<Var> vars;
  for (auto& m : inputs) vars.push_back(tape.parameter(m));
  const Var loss = f(tape, vars);
  tape.backward(loss);
  const double h = 1e-6;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Matrix analytic = tape.gradient(inputs[i]);
    for (std::size_t k = 0; k < inputs[i].size(); ++k) {
      const double orig = inputs[i][k];
      auto eval = [&](double x) {
        inputs[i][k] = x;
        Tape t;
        std::vector<Var> vs;
        for (auto& m : inputs) vs.push_back(t.parameter(m));
        const double v = f(t, vs).value()(0, 0);
        inputs[i][k] = orig;
        return v;
      };
      const double numeric = (eval(orig + h) - eval(orig - h)) / (2 * h);
      EXPECT_NEAR(analytic[k], numeric, tol * std::max(1.0, std::fabs(numeric))) << "input " << i << " entry " << k;
    }
  }
}

}  // namespace

TEST(Matrix, ShapeAndLiteral) {
  Matrix m{{1, 2, 3}, {4, 5, 6}};
  EXPECT_EQ(m.rows(), 2u);
  EXPECT_EQ(m.cols(), 3u);
  EXPECT_EQ(m(1, 2), 6.0);
  EXPECT_THROW(Matrix(2, 2, std::vector<double>{1, 2, 3}), ShapeError);
  EXPECT_THROW((Matrix{{1, 2}, {3}}), ShapeError);
}

TEST(Matrix, MultiplyKnownProduct) {
  const Matrix a{{1, 2}, {3, 4}};
  const Matrix b{{5, 6}, {7, 8}};
  const Matrix c = multiply(a, b);
  EXPECT_EQ(c, (Matrix{{19, 22}, {43, 50}}));
  EXPECT_THROW(multiply(a, Matrix(3, 1)), ShapeError);
}

TEST(Tape, MatmulValueAndShapeError) {
  Tape t;
  const Var a = t.constant(Matrix{{1, 2}});
  const Var b = t.constant(Matrix{{3}, {4}});
  EXPECT_DOUBLE_EQ(matmul(a, b).value()(0, 0), 11.0);
  EXPECT_THROW(matmul(a, a), ShapeError);
}

TEST(Tape, BackwardRequiresScalar) {
  Tape t;
  const Var a = t.constant(Matrix(2, 2, 1.0));
  EXPECT_THROW(t.backward(a), ContractError);
}

TEST(Tape, NonFiniteValueRaises) {
  Tape t;
  const Var a = t.constant(Matrix(1, 1, 1e308));
  EXPECT_THROW(scale(a, 1e10), NumericError);
}

TEST(Tape, GradientOfUnusedParameterIsZero) {
  Matrix w(2, 2, 1.0), unused(3, 1, 5.0);
  Tape t;
  const Var loss = sum(t.parameter(w));
  t.backward(loss);
  EXPECT_EQ(t.gradient(unused), Matrix(3, 1));
  EXPECT_EQ(t.gradient(w), Matrix(2, 2, 1.0));
}

TEST(Tape, ReusedParameterAccumulates) {
  Matrix w{{2.0}};
  Tape t;
  const Var a = t.parameter(w);
  const Var b = t.parameter(w);
  EXPECT_EQ(a.id(), b.id());
  const Var loss = sum(matmul(a, b));  // w^2
  t.backward(loss);
  EXPECT_DOUBLE_EQ(t.gradient(w)(0, 0), 4.0);
}

TEST(Gradients, MatmulAddBias) {
  std::mt19937_64 rng(1);
  const Matrix w = random_matrix(3, 2, rng);
  expect_gradients_match({random_matrix(3, 4, rng), random_matrix(4, 2, rng), random_matrix(1, 2, rng)},
                         [&](Tape&, std::vector<Var>& v) { return weighted_sum(add_bias(matmul(v[0], v[1]), v[2]), w); });
}

TEST(Gradients, ReluTanhScaleAdd) {
  std::mt19937_64 rng(2);
  const Matrix w = random_matrix(4, 3, rng);
  expect_gradients_match({random_matrix(4, 3, rng), random_matrix(4, 3, rng)}, [&](Tape&, std::vector<Var>& v) {
    return weighted_sum(add(relu(v[0]), scale(tanh(v[1]), -1.5)), w);
  });
}

TEST(Gradients, SoftmaxRows) {
  std::mt19937_64 rng(3);
  const Matrix w = random_matrix(3, 5, rng);
  expect_gradients_match({random_matrix(3, 5, rng, 2.0)},
                         [&](Tape&, std::vector<Var>& v) { return weighted_sum(softmax_rows(v[0]), w); });
}

TEST(Gradients, BlockMatmul) {
  std::mt19937_64 rng(4);
  const Matrix w = random_matrix(6, 2, rng);
  // three blocks of 2x2 times 2x2
  expect_gradients_match({random_matrix(6, 2, rng), random_matrix(6, 2, rng)},
                         [&](Tape&, std::vector<Var>& v) { return weighted_sum(block_matmul(v[0], v[1], 3), w); });
}

TEST(Gradients, BlockMatmulNT) {
  std::mt19937_64 rng(5);
  const Matrix w = random_matrix(6, 3, rng);
  expect_gradients_match({random_matrix(6, 4, rng), random_matrix(6, 4, rng)},
                         [&](Tape&, std::vector<Var>& v) { return weighted_sum(block_matmul_nt(v[0], v[1], 2), w); });
}

TEST(Gradients, SelectMergeRows) {
  std::mt19937_64 rng(6);
  const Matrix w = random_matrix(5, 2, rng);
  expect_gradients_match({random_matrix(2, 2, rng), random_matrix(3, 2, rng)}, [&](Tape&, std::vector<Var>& v) {
    const Var m = merge_rows(v[0], {0, 3}, v[1], {1, 2, 4});
    return add(weighted_sum(m, w), sum(select_rows(m, {4, 4, 0})));
  });
}

TEST(Gradients, MseLoss) {
  std::mt19937_64 rng(7);
  expect_gradients_match({random_matrix(4, 2, rng), random_matrix(4, 2, rng)},
                         [](Tape&, std::vector<Var>& v) { return mse_loss(v[0], v[1]); });
}

TEST(Gradients, RowNormLoss) {
  std::mt19937_64 rng(8);
  const Matrix target = random_matrix(5, 2, rng);
  expect_gradients_match({random_matrix(5, 2, rng)},
                         [&](Tape&, std::vector<Var>& v) { return row_norm_loss(v[0], target, 0.05); });
}

TEST(RowNormLoss, MeanEuclideanDistance) {
  Tape t;
  const Matrix target{{0, 0}, {1, 1}};
  const Matrix p{{3, 4}, {1, 1}};
  const Var l = row_norm_loss(t.parameter(p), target, 1e-9);
  EXPECT_NEAR(l.value()(0, 0), 2.5, 1e-9);  // (5 + 0) / 2
  t.backward(l);
  // an exact row gets a zero gradient
  const Matrix g = t.gradient(p);
  EXPECT_NEAR(g(0, 0), 0.3, 1e-9);
  EXPECT_NEAR(g(0, 1), 0.4, 1e-9);
  EXPECT_EQ(g(1, 0), 0.0);
  EXPECT_THROW(row_norm_loss(t.constant(Matrix(2, 2)), Matrix(2, 3)), ShapeError);
}

TEST(BlockMatmul, BlocksAreIndependent) {
  const Matrix a{{1, 0}, {0, 1}, {2, 0}, {0, 2}};
  const Matrix b{{1, 2}, {3, 4}, {5, 6}, {7, 8}};
  Tape t;
  const Var c = block_matmul(t.constant(a), t.constant(b), 2);
  EXPECT_EQ(c.value(), (Matrix{{1, 2}, {3, 4}, {10, 12}, {14, 16}}));
  const Var d = block_matmul_nt(t.constant(b), t.constant(b), 2);
  EXPECT_EQ(d.value(), (Matrix{{5, 11}, {11, 25}, {61, 83}, {83, 113}}));
  EXPECT_THROW(block_matmul(t.constant(a), t.constant(b), 3), ShapeError);
}

TEST(Softmax, LargeLogitsStayFinite) {
  Tape t;
  const Var s = softmax_rows(t.constant(Matrix{{1000.0, 0.0}}));
  EXPECT_DOUBLE_EQ(s.value()(0, 0), 1.0);
  EXPECT_NEAR(s.value()(0, 1), 0.0, 1e-300);
  EXPECT_TRUE(s.value().all_finite());
}

TEST(Softmax, RowsSumToOne) {
  std::mt19937_64 rng(8);
  const Matrix s = softmax_rows_value(random_matrix(20, 7, rng, 10.0));
  for (std::size_t r = 0; r < s.rows(); ++r) {
    double total = 0.0;
    for (double v : s.row(r)) {
      EXPECT_GE(v, 0.0);
      total += v;
    }
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
}

TEST(Relu, SubgradientAtZeroIsZero) {
  Matrix x{{0.0, -1.0, 2.0}};
  Tape t;
  const Var loss = sum(relu(t.parameter(x)));
  t.backward(loss);
  EXPECT_EQ(t.gradient(x), (Matrix{{0.0, 0.0, 1.0}}));
  EXPECT_EQ(t.activation_pattern(), (std::vector<std::uint8_t>{0, 0, 1}));
}

TEST(FanScaledUniform, RespectsBound) {
  std::mt19937_64 rng(9);
  const Matrix w = fan_scaled_uniform(50, 30, rng);
  const double bound = std::sqrt(6.0 / 80.0);
  double lo = 1.0, hi = -1.0;
  for (double v : w.data()) {
    EXPECT_LE(std::fabs(v), bound);
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  EXPECT_LT(lo, -0.8 * bound);
  EXPECT_GT(hi, 0.8 * bound);
}
