#include "looprec/tensor.hpp"

#include <cmath>
#include <functional>
#include <random>

#include <gtest/gtest.h>

using looprec::Shape;
using looprec::Tape;
using looprec::TapeScope;
using looprec::Tensor;

namespace {

using D = double;
using Fn = std::function<Tensor<D>(const std::vector<Tensor<D>>&)>;

std::vector<Tensor<D>> make_leaves(const std::vector<Shape>& shapes, uint64_t seed,
                                   double lo = -1.5, double hi = 1.5) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<Tensor<D>> leaves;
  for (const auto& s : shapes) {
    int64_t n = 1;
    for (auto d : s) n *= d;
    std::vector<D> v((size_t)n);
    for (auto& x : v) x = dist(rng);
    leaves.push_back(Tensor<D>::param(s, std::move(v)));
  }
  return leaves;
}

double eval_at(const Fn& fn, std::vector<Tensor<D>> leaves) {
  Tensor<D> out = fn(leaves);
  double acc = 0;
  for (size_t i = 0; i < out.values().size(); ++i)
    acc += out.values()[i] * std::sin(0.7 * (double)(i + 1));
  return acc;
}

// Checks reverse-mode gradients of sum_i sin(0.7(i+1)) * fn(leaves)_i against
// central finite differences on every leaf element.
void check_gradients(const Fn& fn, const std::vector<Shape>& shapes, uint64_t seed,
                     double tol = 1e-7, double lo = -1.5, double hi = 1.5) {
  auto leaves = make_leaves(shapes, seed, lo, hi);
  Tape<D> tape;
  {
    TapeScope<D> scope(tape);
    Tensor<D> out = fn(leaves);
    std::vector<D> w(out.values().size());
    for (size_t i = 0; i < w.size(); ++i) w[i] = std::sin(0.7 * (double)(i + 1));
    Tensor<D> loss = looprec::sum_all(looprec::mul(out, Tensor<D>::constant(out.shape(), w)));
    tape.backward(loss);
  }
  const double h = 1e-6;
  for (size_t li = 0; li < leaves.size(); ++li) {
    ASSERT_EQ(leaves[li].grad().size(), leaves[li].values().size());
    for (size_t i = 0; i < leaves[li].values().size(); ++i) {
      auto bumped = make_leaves(shapes, seed, lo, hi);
      bumped[li].mut_values()[i] += h;
      double up = eval_at(fn, bumped);
      bumped[li].mut_values()[i] -= 2 * h;
      double dn = eval_at(fn, bumped);
      double fd = (up - dn) / (2 * h);
      double an = leaves[li].grad()[i];
      double scale = std::max({1.0, std::abs(fd), std::abs(an)});
      EXPECT_NEAR(an, fd, tol * scale)
          << "leaf " << li << " element " << i << " analytic " << an << " fd " << fd;
    }
  }
}

TEST(TensorGrad, Binary) {
  check_gradients([](const auto& l) { return looprec::add(l[0], l[1]); },
                  {{2, 3}, {2, 3}}, 11);
  check_gradients([](const auto& l) { return looprec::sub(l[0], l[1]); },
                  {{2, 3}, {2, 3}}, 12);
  check_gradients([](const auto& l) { return looprec::mul(l[0], l[1]); },
                  {{2, 3}, {2, 3}}, 13);
  check_gradients([](const auto& l) { return looprec::div(l[0], l[1]); },
                  {{2, 3}, {2, 3}}, 14, 1e-6, 0.5, 1.5);
}

TEST(TensorGrad, Unary) {
  check_gradients([](const auto& l) { return looprec::neg(l[0]); }, {{3, 2}}, 21);
  check_gradients([](const auto& l) { return looprec::exp(l[0]); }, {{3, 2}}, 22);
  check_gradients([](const auto& l) { return looprec::log(l[0]); }, {{3, 2}}, 23, 1e-6, 0.2, 2.0);
  check_gradients([](const auto& l) { return looprec::sqrt(l[0]); }, {{3, 2}}, 24, 1e-6, 0.2,
                  2.0);
  check_gradients([](const auto& l) { return looprec::sin(l[0]); }, {{3, 2}}, 25);
  check_gradients([](const auto& l) { return looprec::cos(l[0]); }, {{3, 2}}, 26);
  check_gradients([](const auto& l) { return looprec::gelu(l[0]); }, {{3, 2}}, 27, 1e-6);
  check_gradients([](const auto& l) { return looprec::softplus(l[0]); }, {{3, 2}}, 28);
  check_gradients([](const auto& l) { return looprec::power(l[0], 1.7); }, {{3, 2}}, 29, 1e-6,
                  0.3, 2.0);
  check_gradients([](const auto& l) { return looprec::square(l[0]); }, {{3, 2}}, 30);
  check_gradients([](const auto& l) { return looprec::add_scalar(l[0], 0.37); }, {{3, 2}}, 31);
  check_gradients([](const auto& l) { return looprec::mul_scalar(l[0], -1.3); }, {{3, 2}}, 32);
  check_gradients([](const auto& l) { return looprec::absval(l[0]); }, {{3, 2}}, 33, 1e-6, 0.2,
                  2.0);
}

TEST(TensorGrad, Reductions) {
  check_gradients([](const auto& l) { return looprec::sum(l[0], 0); }, {{3, 4}}, 41);
  check_gradients([](const auto& l) { return looprec::sum(l[0], 1, true); }, {{3, 4}}, 42);
  check_gradients([](const auto& l) { return looprec::mean(l[0], -1); }, {{2, 3, 4}}, 43);
  check_gradients([](const auto& l) { return looprec::sum_all(l[0]); }, {{3, 4}}, 44);
  check_gradients([](const auto& l) { return looprec::mean_all(l[0]); }, {{3, 4}}, 45);
  check_gradients([](const auto& l) { return looprec::max_axis(l[0], 1); }, {{3, 5}}, 46);
}

TEST(TensorGrad, ShapeOps) {
  check_gradients([](const auto& l) { return looprec::reshape(l[0], {4, 3}); }, {{2, 6}}, 51);
  check_gradients([](const auto& l) { return looprec::transpose(l[0], {1, 0}); }, {{3, 4}}, 52);
  check_gradients([](const auto& l) { return looprec::transpose(l[0], {2, 0, 1}); }, {{2, 3, 4}},
                  53);
  check_gradients(
      [](const auto& l) { return looprec::concat(std::vector<Tensor<D>>{l[0], l[1]}, 0); },
      {{2, 3}, {1, 3}}, 54);
  check_gradients(
      [](const auto& l) { return looprec::concat(std::vector<Tensor<D>>{l[0], l[1]}, 1); },
      {{2, 2}, {2, 3}}, 55);
  check_gradients(
      [](const auto& l) {
        auto parts = looprec::split(l[0], {2, 3}, 1);
        return looprec::mul(
            looprec::concat(std::vector<Tensor<D>>{parts[1], parts[0]}, 1), l[0]);
      },
      {{2, 5}}, 56);
  check_gradients([](const auto& l) { return looprec::gather(l[0], 0, {2, 0, 2}); }, {{3, 4}},
                  57);
  check_gradients([](const auto& l) { return looprec::gather(l[0], 1, {1, 1, 3, 0}); }, {{2, 4}},
                  58);
}

TEST(TensorGrad, Matmul) {
  check_gradients([](const auto& l) { return looprec::matmul(l[0], l[1]); }, {{3, 4}, {4, 2}},
                  61);
  check_gradients([](const auto& l) { return looprec::matmul_nt(l[0], l[1]); }, {{3, 4}, {2, 4}},
                  62);
  std::vector<int64_t> segs{2, 3};
  check_gradients(
      [segs](const auto& l) { return looprec::matmul_segmented(l[0], l[1], segs); },
      {{3, 5}, {5, 4}}, 63);
}

// Segmented matmul only reorders the contraction: it must agree with the plain
// product up to rounding and be bitwise invariant when whole segments swap
// (jointly in a's columns and b's rows).
TEST(TensorOps, SegmentedMatmulReordersContraction) {
  std::mt19937_64 rng(64);
  Tensor<float> a = looprec::randn<float>({3, 5}, rng);
  Tensor<float> b = looprec::randn<float>({5, 4}, rng);
  Tensor<float> plain = looprec::matmul(a, b);
  Tensor<float> seg = looprec::matmul_segmented(a, b, {2, 3});
  for (size_t i = 0; i < plain.values().size(); ++i)
    EXPECT_NEAR(seg.values()[i], plain.values()[i], 1e-5f);

  auto swap_cols = [](const Tensor<float>& t) {
    return looprec::gather(t, 1, {2, 3, 4, 0, 1});
  };
  auto swap_rows = [](const Tensor<float>& t) {
    return looprec::gather(t, 0, {2, 3, 4, 0, 1});
  };
  Tensor<float> seg2 = looprec::matmul_segmented(swap_cols(a), swap_rows(b), {3, 2});
  for (size_t i = 0; i < seg.values().size(); ++i)
    EXPECT_EQ(seg.values()[i], seg2.values()[i]) << "element " << i;
}

TEST(TensorGrad, SoftmaxAndNorm) {
  check_gradients([](const auto& l) { return looprec::softmax(l[0]); }, {{3, 5}}, 71, 1e-6);
  std::vector<int64_t> segs{2, 3};
  check_gradients(
      [segs](const auto& l) { return looprec::softmax_segmented(l[0], segs); }, {{2, 5}}, 72,
      1e-6);
  check_gradients(
      [](const auto& l) { return looprec::layer_norm(l[0], l[1], l[2], 1e-5); },
      {{3, 6}, {6}, {6}}, 73, 1e-5);
}

// Softmax followed by log on the true-class entry has the closed-form gradient
// p - onehot, a classic cross-entropy identity worth checking exactly.
TEST(TensorGrad, SoftmaxCrossEntropyClosedForm) {
  std::mt19937_64 rng(77);
  std::vector<D> logits(7);
  for (auto& x : logits) x = std::uniform_real_distribution<double>(-2, 2)(rng);
  Tensor<D> z = Tensor<D>::param({1, 7}, std::vector<D>(logits));
  size_t target = 3;
  Tape<D> tape;
  {
    TapeScope<D> scope(tape);
    Tensor<D> p = looprec::softmax(z);
    Tensor<D> lp = looprec::log(looprec::gather(p, 1, {(int64_t)target}));
    tape.backward(looprec::neg(looprec::sum_all(lp)));
  }
  double mx = *std::max_element(logits.begin(), logits.end());
  double denom = 0;
  for (double v : logits) denom += std::exp(v - mx);
  for (size_t i = 0; i < logits.size(); ++i) {
    double pi = std::exp(logits[i] - mx) / denom;
    double expect = pi - (i == target ? 1.0 : 0.0);
    EXPECT_NEAR(z.grad()[i], expect, 1e-12);
  }
}

TEST(TensorGrad, ChainedComposite) {
  check_gradients(
      [](const auto& l) {
        auto h = looprec::gelu(looprec::matmul(l[0], l[1]));
        auto n = looprec::layer_norm(h, l[2], l[3], 1e-5);
        return looprec::mean(looprec::square(n), -1);
      },
      {{3, 4}, {4, 5}, {5}, {5}}, 81, 1e-5);
}

TEST(TensorGrad, GradAccumulatesAcrossReuse) {
  Tensor<D> x = Tensor<D>::param({2}, {1.5, -0.5});
  Tape<D> tape;
  {
    TapeScope<D> scope(tape);
    Tensor<D> y = looprec::add(looprec::mul(x, x), looprec::mul_scalar(x, 3.0));
    tape.backward(looprec::sum_all(y));
  }
  EXPECT_DOUBLE_EQ(x.grad()[0], 2 * 1.5 + 3);
  EXPECT_DOUBLE_EQ(x.grad()[1], 2 * -0.5 + 3);
}

TEST(TensorOps, SoftmaxRowsSumToOne) {
  std::mt19937_64 rng(5);
  Tensor<float> x = looprec::randn<float>({4, 9}, rng);
  Tensor<float> p = looprec::softmax(x);
  for (int r = 0; r < 4; ++r) {
    float s = 0;
    for (int c = 0; c < 9; ++c) s += p.values()[(size_t)(r * 9 + c)];
    EXPECT_NEAR(s, 1.0f, 1e-6f);
  }
}

// Segmented softmax normalizes over the whole row; segments only change how
// the denominator is accumulated. It must match plain softmax up to rounding
// and be bitwise invariant under whole-segment permutation of the row.
TEST(TensorOps, SegmentedSoftmaxMatchesPlainAndPermutes) {
  std::mt19937_64 rng(6);
  Tensor<float> x = looprec::randn<float>({3, 7}, rng);
  Tensor<float> plain = looprec::softmax(x);
  Tensor<float> seg = looprec::softmax_segmented(x, {3, 4});
  for (size_t i = 0; i < plain.values().size(); ++i)
    EXPECT_NEAR(seg.values()[i], plain.values()[i], 1e-6f);

  Tensor<float> xp = looprec::gather(x, 1, {3, 4, 5, 6, 0, 1, 2});
  Tensor<float> segp = looprec::softmax_segmented(xp, {4, 3});
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 7; ++c) {
      int src = c < 4 ? c + 3 : c - 4;
      EXPECT_EQ(segp.values()[(size_t)(r * 7 + c)], seg.values()[(size_t)(r * 7 + src)]);
    }
}

TEST(TensorOps, MatmulMatchesNaive) {
  std::mt19937_64 rng(7);
  Tensor<float> a = looprec::randn<float>({5, 3}, rng);
  Tensor<float> b = looprec::randn<float>({3, 4}, rng);
  Tensor<float> c = looprec::matmul(a, b);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 4; ++j) {
      float acc = 0;
      for (int k = 0; k < 3; ++k)
        acc += a.values()[(size_t)(i * 3 + k)] * b.values()[(size_t)(k * 4 + j)];
      EXPECT_NEAR(c.values()[(size_t)(i * 4 + j)], acc, 1e-5f);
    }
}

TEST(TensorOps, InferenceWithoutTapeLeavesNoGrads) {
  Tensor<float> x = Tensor<float>::param({2, 2}, {1, 2, 3, 4});
  Tensor<float> y = looprec::mul(looprec::add(x, x), x);
  EXPECT_EQ(y.values()[3], 32.0f);
  EXPECT_TRUE(x.grad().empty());
}

TEST(TensorOps, BackwardRequiresResultFromActiveTape) {
  Tensor<float> x = Tensor<float>::param({2}, {1, 2});
  Tensor<float> y = looprec::mul(x, x);
  Tape<float> tape;
  EXPECT_THROW(tape.backward(y), looprec::Error);
}

TEST(TensorOps, ShapeMismatchThrows) {
  Tensor<float> a = Tensor<float>::constant({2, 3}, std::vector<float>(6, 1.f));
  Tensor<float> b = Tensor<float>::constant({3, 2}, std::vector<float>(6, 1.f));
  EXPECT_THROW(looprec::add(a, b), looprec::Error);
  EXPECT_THROW(looprec::matmul(a, a), looprec::Error);
  EXPECT_THROW(looprec::reshape(a, {4, 2}), looprec::Error);
  EXPECT_THROW(looprec::concat(std::vector<Tensor<float>>{a, b}, 0), looprec::Error);
}

}  // namespace
