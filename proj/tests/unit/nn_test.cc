#include <gtest/gtest.h>

#include <cmath>

#include "fixtures.h"
#include "gradcheck.h"
#include "impinj/data.h"
#include "impinj/layers.h"
#include "impinj/optim.h"
#include "impinj/param_io.h"

namespace impinj {
namespace {

using nn::Tape;
using nn::Var;
using testing::check_leaf_gradients;
using testing::random_matrix;

constexpr double kGradTol = 1e-4;

// Projects an output onto fixed random weights so every entry matters.
Var project(Tape& t, Var v, std::uint64_t seed = 99) {
  Rng rng(seed);
  return nn::sum(nn::mul(v, t.constant(random_matrix(v.rows(), v.cols(), rng))));
}

struct UnaryCase {
  const char* name;
  std::function<Var(Var)> op;
  double lo;
  double hi;
};

class UnaryGradient : public ::testing::TestWithParam<UnaryCase> {};

TEST_P(UnaryGradient, MatchesCentralDifferences) {
  const auto& c = GetParam();
  Rng rng(3);
  const Matrix x = random_matrix(3, 4, rng, c.lo, c.hi);
  const double err = check_leaf_gradients([&](Tape& t, const std::vector<Var>& v) { return project(t, c.op(v[0])); }, {x});
  EXPECT_LT(err, kGradTol) << c.name;
}

INSTANTIATE_TEST_SUITE_P(
    Primitives, UnaryGradient,
    ::testing::Values(UnaryCase{"transpose", [](Var a) { return nn::transpose(a); }, -1, 1},
                      UnaryCase{"scale", [](Var a) { return nn::scale(a, -2.5); }, -1, 1},
                      UnaryCase{"add_scalar", [](Var a) { return nn::add_scalar(a, 0.7); }, -1, 1},
                      UnaryCase{"pow", [](Var a) { return nn::pow(a, 3.0); }, -1, 1},
                      UnaryCase{"pow_frac", [](Var a) { return nn::pow(a, 0.5); }, 0.2, 2},
                      UnaryCase{"log", [](Var a) { return nn::log(a); }, 0.1, 2},
                      UnaryCase{"exp", [](Var a) { return nn::exp(a); }, -1, 1},
                      UnaryCase{"relu", [](Var a) { return nn::relu(a); }, -1, 1},
                      UnaryCase{"leaky_relu", [](Var a) { return nn::leaky_relu(a, 0.2); }, -1, 1},
                      UnaryCase{"sigmoid", [](Var a) { return nn::sigmoid(a); }, -3, 3},
                      UnaryCase{"softmax_rows", [](Var a) { return nn::softmax_rows(a); }, -2, 2},
                      UnaryCase{"log_softmax_rows", [](Var a) { return nn::log_softmax_rows(a); }, -2, 2},
                      UnaryCase{"slice_cols", [](Var a) { return nn::slice_cols(a, 1, 2); }, -1, 1},
                      UnaryCase{"sum", [](Var a) { return nn::sum(a); }, -1, 1},
                      UnaryCase{"mean", [](Var a) { return nn::mean(a); }, -1, 1},
                      UnaryCase{"row_sum", [](Var a) { return nn::row_sum(a); }, -1, 1},
                      UnaryCase{"l2_normalize_rows", [](Var a) { return nn::l2_normalize_rows(a); }, -1, 1}),
    [](const auto& info) { return std::string(info.param.name); });

TEST(BinaryGradient, ElementwiseAndMatmul) {
  Rng rng(5);
  const Matrix a = random_matrix(3, 4, rng);
  const Matrix b = random_matrix(3, 4, rng);
  const Matrix w = random_matrix(4, 2, rng);
  const Matrix bias = random_matrix(1, 4, rng);
  using F = std::function<Var(const std::vector<Var>&)>;
  for (const auto& [name, f, inputs] : std::vector<std::tuple<std::string, F, std::vector<Matrix>>>{
           {"add", [](const auto& v) { return nn::add(v[0], v[1]); }, {a, b}},
           {"sub", [](const auto& v) { return nn::sub(v[0], v[1]); }, {a, b}},
           {"mul", [](const auto& v) { return nn::mul(v[0], v[1]); }, {a, b}},
           {"matmul", [](const auto& v) { return nn::matmul(v[0], v[1]); }, {a, w}},
           {"add_bias", [](const auto& v) { return nn::add_bias(v[0], v[1]); }, {a, bias}},
           {"concat_cols", [](const auto& v) { return nn::concat_cols({v[0], v[1]}); }, {a, b}},
       }) {
    const double err = check_leaf_gradients([&](Tape& t, const std::vector<Var>& v) { return project(t, f(v)); }, inputs);
    EXPECT_LT(err, kGradTol) << name;
  }
}

TEST(BinaryGradient, SparseMatmulWeight) {
  Rng rng(6);
  const SparseMatrix x = to_sparse(testing::random_binary(5, 6, 0.3, rng));
  const Matrix w = random_matrix(6, 3, rng);
  const double err = check_leaf_gradients(
      [&](Tape& t, const std::vector<Var>& v) { return project(t, nn::sparse_matmul(x, v[0])); }, {w});
  EXPECT_LT(err, kGradTol);
}

TEST(BinaryGradient, SparseMatchesDense) {
  Rng rng(7);
  const Matrix xd = testing::random_binary(5, 6, 0.3, rng);
  const Matrix w = random_matrix(6, 3, rng);
  Tape t;
  const Matrix dense = nn::matmul(t.constant(xd), t.constant(w)).value();
  const SparseMatrix xs = to_sparse(xd);
  const Matrix sparse = nn::sparse_matmul(xs, t.constant(w)).value();
  EXPECT_LT((dense - sparse).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(BinaryGradient, GatherRowsAccumulatesRepeats) {
  Rng rng(8);
  const Matrix table = random_matrix(4, 3, rng);
  const std::vector<int> rows{2, 0, 2, 3};
  const double err = check_leaf_gradients(
      [&](Tape& t, const std::vector<Var>& v) { return project(t, nn::gather_rows(v[0], rows)); }, {table});
  EXPECT_LT(err, kGradTol);
}

TEST(LossGradient, CrossEntropyAndMaskedBce) {
  Rng rng(9);
  const Matrix logits = random_matrix(4, 3, rng, -2, 2);
  const std::vector<int> labels{0, 2, 1, 2};
  EXPECT_LT(check_leaf_gradients([&](Tape&, const std::vector<Var>& v) { return nn::cross_entropy(v[0], labels); },
                                 {logits}),
            kGradTol);
  const Matrix pred = random_matrix(3, 5, rng, 0.05, 0.95);
  const Matrix target = testing::random_binary(3, 5, 0.5, rng);
  Matrix mask = testing::random_binary(3, 5, 0.6, rng);
  mask.row(1).setZero();
  EXPECT_LT(check_leaf_gradients([&](Tape&, const std::vector<Var>& v) { return nn::masked_bce(v[0], target, mask); },
                                 {pred}),
            kGradTol);
}

TEST(LossGradient, CrossEntropyMatchesScalarOracle) {
  const oracle::Rows logits{{1.0, -0.5, 0.25}, {0.0, 2.0, -1.0}};
  const std::vector<int> labels{2, 1};
  Tape t(false);
  const double got = nn::cross_entropy(t.constant(testing::to_matrix(logits)), labels).scalar();
  EXPECT_NEAR(got, oracle::cross_entropy(logits, labels), 1e-12);
}

TEST(BatchNorm, TrainingGradientAndEvalStatistics) {
  Rng rng(10);
  const Matrix x = random_matrix(6, 3, rng);
  const Matrix gamma = random_matrix(1, 3, rng, 0.5, 1.5);
  const Matrix beta = random_matrix(1, 3, rng);
  nn::BatchNormStats stats{Matrix::Zero(1, 3), Matrix::Ones(1, 3)};
  const double err = check_leaf_gradients(
      [&](Tape& t, const std::vector<Var>& v) { return project(t, nn::batchnorm(v[0], v[1], v[2], stats, true)); },
      {x, gamma, beta});
  EXPECT_LT(err, kGradTol);

  nn::BatchNormStats fresh{Matrix::Zero(1, 3), Matrix::Ones(1, 3)};
  Tape t;
  const Matrix y = nn::batchnorm(t.constant(x), t.constant(Matrix::Ones(1, 3)), t.constant(Matrix::Zero(1, 3)), fresh,
                                 false)
                       .value();
  // Eval mode with unit running variance is the identity up to eps.
  EXPECT_LT((y - x / std::sqrt(1 + fresh.eps)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Dropout, EvalIsIdentityAndTrainKeepsExpectation) {
  Rng rng(11);
  const Matrix x = Matrix::Ones(200, 50);
  Tape t;
  EXPECT_EQ(nn::dropout(t.constant(x), 0.3, false, nullptr).value(), x);
  const Matrix y = nn::dropout(t.constant(x), 0.3, true, &rng).value();
  EXPECT_NEAR(y.mean(), 1.0, 0.03);
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    const double v = y.data()[i];
    EXPECT_TRUE(v == 0.0 || std::abs(v - 1.0 / 0.7) < 1e-12);
  }
}

TEST(StraightThrough, ForwardRoundsBackwardPassesThrough) {
  Tape t;
  Var x = t.leaf((Matrix(1, 4) << 0.2, 0.5, 0.7, 0.49).finished());
  Var y = nn::straight_through_binarize(x);
  EXPECT_EQ(y.value(), (Matrix(1, 4) << 0, 1, 1, 0).finished());
  Var loss = nn::sum(nn::scale(y, 3.0));
  t.backward(loss);
  EXPECT_EQ(t.grad(x), Matrix::Constant(1, 4, 3.0));
}

TEST(Tape, NonFiniteOutputThrows) {
  Tape t;
  Var x = t.leaf(Matrix::Constant(1, 1, -1.0));
  EXPECT_THROW(nn::log(x), NumericError);
}

TEST(Tape, InferenceTapeTracksNoGradients) {
  nn::Parameter p("w", Matrix::Ones(2, 2));
  Tape t(false);
  Var v = t.param(p);
  EXPECT_FALSE(t.requires_grad(v));
  EXPECT_FALSE(t.requires_grad(nn::sum(v)));
}

TEST(Tape, FrozenParameterReceivesNoGradient) {
  nn::Parameter a("a", Matrix::Ones(1, 2));
  nn::Parameter b("b", Matrix::Ones(1, 2));
  b.trainable = false;
  Tape t;
  t.backward(nn::sum(nn::mul(t.param(a), t.param(b))));
  EXPECT_EQ(a.grad, Matrix::Ones(1, 2));
  EXPECT_EQ(b.grad.size(), 0);
}

TEST(Tape, ShapeMismatchThrows) {
  Tape t;
  EXPECT_THROW(nn::matmul(t.constant(Matrix::Ones(2, 3)), t.constant(Matrix::Ones(2, 3))), ShapeError);
  EXPECT_THROW(t.backward(t.leaf(Matrix::Ones(2, 2))), ShapeError);
}

TEST(Adam, SingleStepMatchesHandComputation) {
  nn::Parameter p("w", Matrix::Constant(1, 1, 1.0));
  nn::Adam opt({&p}, {.lr = 0.1});
  p.grad = Matrix::Constant(1, 1, 0.3);
  opt.step();
  // m_hat = 0.3, v_hat = 0.09, step = 0.1 * 0.3 / (0.3 + 1e-8)
  EXPECT_NEAR(p.value(0, 0), 0.90000000333333319, 1e-15);
  EXPECT_EQ(opt.steps(), 1);
}

TEST(Adam, ClipScalesGlobalNorm) {
  nn::Parameter a("a", Matrix::Zero(1, 1));
  nn::Parameter b("b", Matrix::Zero(1, 1));
  a.grad = Matrix::Constant(1, 1, 30.0);
  b.grad = Matrix::Constant(1, 1, 40.0);
  EXPECT_DOUBLE_EQ(nn::global_grad_norm({&a, &b}), 50.0);
  nn::Adam opt({&a, &b}, {.lr = 0.1, .clip_norm = 5.0});
  opt.step();
  EXPECT_DOUBLE_EQ(opt.last_grad_norm(), 50.0);
  // Adam normalizes magnitude; after clipping both move by ~lr with the
  // original sign.
  EXPECT_NEAR(a.value(0, 0), -0.1, 1e-6);
  EXPECT_NEAR(b.value(0, 0), -0.1, 1e-6);
}

TEST(Adam, ClipAppliesBeforeMoments) {
  nn::Parameter a("a", Matrix::Zero(1, 1));
  nn::Parameter b("b", Matrix::Zero(1, 1));
  nn::Adam opt({&a, &b}, {.lr = 0.1, .clip_norm = 5.0});
  a.grad = Matrix::Constant(1, 1, 30.0);
  b.grad = Matrix::Constant(1, 1, 40.0);
  opt.step();
  // Second step with a tiny gradient: first moment still carries the
  // clipped values 3 and 4, not 30 and 40.
  a.grad = Matrix::Constant(1, 1, 1e-3);
  b.grad = Matrix::Constant(1, 1, 1e-3);
  const double a1 = a.value(0, 0);
  opt.step();
  const double m = 0.9 * (0.1 * 3.0) + 0.1 * 1e-3;
  const double v = 0.999 * (0.001 * 9.0) + 0.001 * 1e-6;
  const double expect = a1 - 0.1 * (m / (1 - 0.81)) / (std::sqrt(v / (1 - 0.998001)) + 1e-8);
  EXPECT_NEAR(a.value(0, 0), expect, 1e-12);
}

TEST(ParamIo, RoundTripAndMismatch) {
  testing::TempDir dir("paramio");
  Rng rng(12);
  nn::Linear layer("fc", 4, 3, nn::Init::kXavierUniform, rng);
  std::vector<nn::TensorRef> refs;
  layer.tensors(refs);
  nn::save_tensors(dir.path() / "fc.bin", "demo", refs);
  EXPECT_TRUE(std::filesystem::exists(dir.path() / "fc.bin.json"));

  nn::Linear other("fc", 1, 1, nn::Init::kXavierUniform, rng);
  std::vector<nn::TensorRef> other_refs;
  other.tensors(other_refs);
  nn::load_tensors(dir.path() / "fc.bin", "demo", other_refs);
  EXPECT_EQ(other.weight.value, layer.weight.value);
  EXPECT_EQ(other.bias.value, layer.bias.value);

  EXPECT_THROW(nn::load_tensors(dir.path() / "fc.bin", "other", other_refs), Error);
  const auto header = nn::read_container_header(dir.path() / "fc.bin");
  EXPECT_EQ(header.module, "demo");
  ASSERT_EQ(header.tensors.size(), 2u);
  EXPECT_EQ(header.tensors[0].rows, 4u);
}

TEST(ParamIo, TruncatedFileIsRejected) {
  testing::TempDir dir("paramio_trunc");
  nn::save_matrix(dir.path() / "m.bin", "m", Matrix::Ones(3, 3));
  std::filesystem::resize_file(dir.path() / "m.bin", std::filesystem::file_size(dir.path() / "m.bin") - 8);
  EXPECT_THROW(nn::load_matrix(dir.path() / "m.bin", "m"), Error);
}

TEST(Linear, XavierBoundsAndForwardShape) {
  Rng rng(13);
  nn::Linear layer("fc", 10, 6, nn::Init::kXavierUniform, rng);
  const double bound = std::sqrt(6.0 / 16.0);
  EXPECT_LE(layer.weight.value.cwiseAbs().maxCoeff(), bound);
  Tape t;
  EXPECT_EQ(layer.forward(t, t.constant(Matrix::Ones(4, 10))).cols(), 6);
}

}  // namespace
}  // namespace impinj
