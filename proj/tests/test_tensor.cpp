#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "patchsim/layers.hpp"
#include "patchsim/tensor.hpp"
#include "test_util.hpp"

namespace patchsim {
namespace {

using testutil::check_gradient;
using testutil::FdReport;
using testutil::random_tensor;
using testutil::well_separated_tensor;

TEST(Tensor, ShapeAndAccessors) {
  Tensor<double> t({2, 3, 4});
  EXPECT_EQ(t.ndim(), 3);
  EXPECT_EQ(t.numel(), 24);
  t.at(1, 2, 3) = 7.0;
  EXPECT_EQ(t[23], 7.0);
  EXPECT_THROW(Tensor<double>({2, 0}), ShapeError);
  EXPECT_THROW(Tensor<double>({2}, {1.0, 2.0, 3.0}), ShapeError);
  EXPECT_THROW(t.dim(3), ShapeError);
}

TEST(Tensor, FullAndFinite) {
  Tensor<float> t = Tensor<float>::full({3}, 2.5f);
  EXPECT_EQ(t[0], 2.5f);
  EXPECT_TRUE(t.all_finite());
  t[1] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_FALSE(t.all_finite());
}

// ---------------------------------------------------------------------------
// Convolution.

TEST(Conv2d, ShapeChain64To20) {
  Rng rng(1);
  const Tensor<double> in = random_tensor<double>({2, 64, 64}, rng);
  const Tensor<double> w = random_tensor<double>({96, 2, 7, 7}, rng, -0.05, 0.05);
  const Tensor<double> b = random_tensor<double>({96}, rng);
  const Tensor<double> out = conv2d(in, w, b, 3);
  EXPECT_EQ(out.shape(), (std::vector<int>{96, 20, 20}));
}

TEST(Conv2d, IdentityKernel) {
  Tensor<double> in({1, 1, 1}, {0.37});
  Tensor<double> w({1, 1, 1, 1}, {1.0});
  Tensor<double> b({1}, {0.0});
  const Tensor<double> out = conv2d(in, w, b, 1);
  EXPECT_EQ(out.numel(), 1);
  EXPECT_DOUBLE_EQ(out[0], 0.37);
}

TEST(Conv2d, AllOnesWindowWithBias) {
  const Tensor<double> in = Tensor<double>::full({1, 3, 3}, 1.0);
  const Tensor<double> w = Tensor<double>::full({1, 1, 3, 3}, 1.0);
  Tensor<double> b({1}, {0.5});
  const Tensor<double> out = conv2d(in, w, b, 1);
  EXPECT_EQ(out.shape(), (std::vector<int>{1, 1, 1}));
  EXPECT_DOUBLE_EQ(out[0], 9.5);
}

TEST(Conv2d, RejectsBadShapes) {
  Rng rng(2);
  const Tensor<double> in = random_tensor<double>({2, 4, 4}, rng);
  const Tensor<double> w = random_tensor<double>({3, 2, 3, 3}, rng);
  const Tensor<double> b = random_tensor<double>({3}, rng);
  EXPECT_THROW(conv2d(random_tensor<double>({1, 4, 4}, rng), w, b, 1), ShapeError);
  EXPECT_THROW(conv2d(in, w, random_tensor<double>({2}, rng), 1), ShapeError);
  EXPECT_THROW(conv2d(random_tensor<double>({2, 2, 2}, rng), w, b, 1), ShapeError);
  EXPECT_THROW(conv2d(in, w, b, 0), ShapeError);
}

// Gradient of sum(conv(x) * g) against finite differences for input, weight
// and bias, over randomized geometries.
TEST(Conv2d, GradientsMatchFiniteDifferences) {
  Rng rng(42);
  double worst = 0.0;
  int done = 0;
  std::uint64_t seed = 1000;
  while (done < 20) {
    Rng inst(seed++);
    const int c = 1 + static_cast<int>(uniform_index(inst, 3));
    const int k = 1 + static_cast<int>(uniform_index(inst, 3));
    const int s = 1 + static_cast<int>(uniform_index(inst, 2));
    const int h = k + static_cast<int>(uniform_index(inst, 4));
    const int w_ext = k + static_cast<int>(uniform_index(inst, 4));
    const int n = 1 + static_cast<int>(uniform_index(inst, 3));
    Tensor<double> x = random_tensor<double>({c, h, w_ext}, inst);
    Tensor<double> w = random_tensor<double>({n, c, k, k}, inst);
    Tensor<double> b = random_tensor<double>({n}, inst);
    const Tensor<double> out = conv2d(x, w, b, s);
    const Tensor<double> g = random_tensor<double>(out.shape(), inst);

    Tensor<double> gx, gw, gb;
    conv2d_backward(x, w, s, g, &gx, &gw, &gb);
    const auto loss = [&]() {
      const Tensor<double> o = conv2d(x, w, b, s);
      double l = 0.0;
      for (std::int64_t i = 0; i < o.numel(); ++i) l += o[i] * g[i];
      return l;
    };
    bool kink = false;
    const std::pair<Tensor<double>*, const Tensor<double>*> checks[] = {
        {&x, &gx}, {&w, &gw}, {&b, &gb}};
    for (const auto& pr : checks) {
      const FdReport r = check_gradient(*pr.first, *pr.second, loss);
      if (r.probe_hit_kink) {
        kink = true;
        break;
      }
      worst = std::max(worst, r.max_rel_error);
    }
    if (!kink) ++done;
  }
  EXPECT_LT(worst, 1e-6);
}

// ---------------------------------------------------------------------------
// Max pooling.

TEST(MaxPool, ShapeAndValues) {
  Rng rng(3);
  const Tensor<double> in = random_tensor<double>({96, 20, 20}, rng);
  const Tensor<double> out = max_pool2d<double>(in, 2, 2, nullptr);
  EXPECT_EQ(out.shape(), (std::vector<int>{96, 10, 10}));
}

TEST(MaxPool, ConstantInput) {
  const Tensor<double> in = Tensor<double>::full({1, 4, 4}, 3.25);
  const Tensor<double> out = max_pool2d<double>(in, 2, 2, nullptr);
  for (std::int64_t i = 0; i < out.numel(); ++i) EXPECT_DOUBLE_EQ(out[i], 3.25);
}

TEST(MaxPool, TwoByTwoHandCase) {
  Tensor<double> in({1, 2, 2}, {1, 2, 3, 4});
  Tensor<std::int64_t> argmax;
  const Tensor<double> out = max_pool2d(in, 2, 2, &argmax);
  EXPECT_EQ(out.numel(), 1);
  EXPECT_DOUBLE_EQ(out[0], 4.0);
  EXPECT_EQ(argmax[0], 3);
}

TEST(MaxPool, TieGoesToSmallestLinearIndex) {
  Tensor<double> in({1, 2, 2}, {5, 5, 5, 5});
  Tensor<std::int64_t> argmax;
  max_pool2d(in, 2, 2, &argmax);
  EXPECT_EQ(argmax[0], 0);
}

TEST(MaxPool, WindowLargerThanInput) {
  const Tensor<double> in = Tensor<double>::full({1, 2, 2}, 1.0);
  EXPECT_THROW(max_pool2d<double>(in, 3, 1, nullptr), ShapeError);
}

TEST(MaxPool, BackwardConservesGradientSum) {
  Rng rng(7);
  const Tensor<double> in = well_separated_tensor<double>({2, 5, 5}, rng);
  Tensor<std::int64_t> argmax;
  const Tensor<double> out = max_pool2d(in, 2, 2, &argmax);
  const Tensor<double> g = random_tensor<double>(out.shape(), rng);
  const Tensor<double> gin = max_pool2d_backward(in.shape(), argmax, g);
  double sum_g = 0.0, sum_gin = 0.0;
  for (std::int64_t i = 0; i < g.numel(); ++i) sum_g += g[i];
  for (std::int64_t i = 0; i < gin.numel(); ++i) sum_gin += gin[i];
  EXPECT_NEAR(sum_g, sum_gin, 1e-12);
}

TEST(MaxPool, GradientsMatchFiniteDifferences) {
  double worst = 0.0;
  int done = 0;
  std::uint64_t seed = 2000;
  while (done < 20) {
    Rng inst(seed++);
    const int k = 1 + static_cast<int>(uniform_index(inst, 3));
    const int s = 1 + static_cast<int>(uniform_index(inst, 2));
    const int h = k + static_cast<int>(uniform_index(inst, 4));
    const int w = k + static_cast<int>(uniform_index(inst, 4));
    const int c = 1 + static_cast<int>(uniform_index(inst, 2));
    Tensor<double> x = well_separated_tensor<double>({c, h, w}, inst);
    Tensor<std::int64_t> argmax;
    const Tensor<double> out = max_pool2d(x, k, s, &argmax);
    const Tensor<double> g = random_tensor<double>(out.shape(), inst);
    const Tensor<double> gx = max_pool2d_backward(x.shape(), argmax, g);
    const auto loss = [&]() {
      const Tensor<double> o = max_pool2d<double>(x, k, s, nullptr);
      double l = 0.0;
      for (std::int64_t i = 0; i < o.numel(); ++i) l += o[i] * g[i];
      return l;
    };
    const FdReport r = check_gradient(x, gx, loss);
    if (r.probe_hit_kink) continue;
    worst = std::max(worst, r.max_rel_error);
    ++done;
  }
  EXPECT_LT(worst, 1e-6);
}

// ---------------------------------------------------------------------------
// ReLU.

TEST(Relu, HandCases) {
  Tensor<double> in({3}, {-1, 0, 2});
  const Tensor<double> out = relu(in);
  EXPECT_DOUBLE_EQ(out[0], 0);
  EXPECT_DOUBLE_EQ(out[1], 0);
  EXPECT_DOUBLE_EQ(out[2], 2);

  Rng rng(4);
  const Tensor<double> neg = random_tensor<double>({2, 3, 3}, rng, -2.0, -0.1);
  const Tensor<double> zn = relu(neg);
  for (std::int64_t i = 0; i < zn.numel(); ++i) EXPECT_DOUBLE_EQ(zn[i], 0.0);

  const Tensor<double> pos = random_tensor<double>({5}, rng, 0.0, 2.0);
  const Tensor<double> same = relu(pos);
  for (std::int64_t i = 0; i < pos.numel(); ++i) EXPECT_DOUBLE_EQ(same[i], pos[i]);
}

TEST(Relu, Idempotent) {
  Rng rng(5);
  const Tensor<double> x = random_tensor<double>({4, 4, 4}, rng);
  const Tensor<double> once = relu(x);
  const Tensor<double> twice = relu(once);
  for (std::int64_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(once[i], twice[i]);
}

TEST(Relu, BackwardMask) {
  Tensor<double> in({2}, {-1, 2});
  Tensor<double> g({2}, {5, 5});
  const Tensor<double> gin = relu_backward(in, g);
  EXPECT_DOUBLE_EQ(gin[0], 0);
  EXPECT_DOUBLE_EQ(gin[1], 5);
}

TEST(Relu, GradientsMatchFiniteDifferences) {
  double worst = 0.0;
  int done = 0;
  std::uint64_t seed = 3000;
  while (done < 20) {
    Rng inst(seed++);
    const int n = 2 + static_cast<int>(uniform_index(inst, 16));
    Tensor<double> x({n});
    for (int i = 0; i < n; ++i) {
      const double mag = uniform_range(inst, 0.1, 1.1);
      x[i] = uniform_unit(inst) < 0.5 ? -mag : mag;
    }
    const Tensor<double> g = random_tensor<double>({n}, inst);
    const Tensor<double> gx = relu_backward(x, g);
    const auto loss = [&]() {
      const Tensor<double> o = relu(x);
      double l = 0.0;
      for (std::int64_t i = 0; i < o.numel(); ++i) l += o[i] * g[i];
      return l;
    };
    const FdReport r = check_gradient(x, gx, loss);
    if (r.probe_hit_kink) continue;
    worst = std::max(worst, r.max_rel_error);
    ++done;
  }
  EXPECT_LT(worst, 1e-6);
}

// ---------------------------------------------------------------------------
// Fully connected.

TEST(Linear, IdentityAndHandCase) {
  Tensor<double> eye({2, 2}, {1, 0, 0, 1});
  Tensor<double> zero({2}, {0, 0});
  Tensor<double> x({2}, {2, 3});
  const Tensor<double> same = linear(x, eye, zero);
  EXPECT_DOUBLE_EQ(same[0], 2);
  EXPECT_DOUBLE_EQ(same[1], 3);

  Tensor<double> w({1, 2}, {1, 1});
  Tensor<double> b({1}, {0});
  const Tensor<double> out = linear(x, w, b);
  EXPECT_DOUBLE_EQ(out[0], 5);
}

TEST(Linear, FlattensAnyRank) {
  Rng rng(6);
  const Tensor<double> x = random_tensor<double>({2, 2, 2}, rng);
  const Tensor<double> w = random_tensor<double>({3, 8}, rng);
  const Tensor<double> b = random_tensor<double>({3}, rng);
  const Tensor<double> out = linear(x, w, b);
  EXPECT_EQ(out.shape(), (std::vector<int>{3}));
}

TEST(Linear, DimensionMismatch) {
  Rng rng(8);
  const Tensor<double> x = random_tensor<double>({3}, rng);
  const Tensor<double> w = random_tensor<double>({2, 4}, rng);
  const Tensor<double> b = random_tensor<double>({2}, rng);
  EXPECT_THROW(linear(x, w, b), ShapeError);
}

TEST(Linear, BackwardIdentityPassesGradientThrough) {
  Tensor<double> eye({2, 2}, {1, 0, 0, 1});
  Tensor<double> x({2}, {0.5, -0.25});
  Tensor<double> g({2}, {3, -7});
  Tensor<double> gx, gw, gb;
  linear_backward(x, eye, g, &gx, &gw, &gb);
  EXPECT_DOUBLE_EQ(gx[0], 3);
  EXPECT_DOUBLE_EQ(gx[1], -7);
}

TEST(Linear, GradientsMatchFiniteDifferences) {
  double worst = 0.0;
  for (int inst_i = 0; inst_i < 20; ++inst_i) {
    Rng inst(4000 + static_cast<std::uint64_t>(inst_i));
    const int n_in = 1 + static_cast<int>(uniform_index(inst, 8));
    const int n_out = 1 + static_cast<int>(uniform_index(inst, 5));
    Tensor<double> x = random_tensor<double>({n_in}, inst);
    Tensor<double> w = random_tensor<double>({n_out, n_in}, inst);
    Tensor<double> b = random_tensor<double>({n_out}, inst);
    const Tensor<double> g = random_tensor<double>({n_out}, inst);
    Tensor<double> gx, gw, gb;
    linear_backward(x, w, g, &gx, &gw, &gb);
    const auto loss = [&]() {
      const Tensor<double> o = linear(x, w, b);
      double l = 0.0;
      for (std::int64_t i = 0; i < o.numel(); ++i) l += o[i] * g[i];
      return l;
    };
    const std::pair<Tensor<double>*, const Tensor<double>*> checks[] = {
        {&x, &gx}, {&w, &gw}, {&b, &gb}};
    for (const auto& pr : checks) {
      const FdReport r = check_gradient(*pr.first, *pr.second, loss);
      ASSERT_FALSE(r.probe_hit_kink);  // linear map: no breakpoints exist
      worst = std::max(worst, r.max_rel_error);
    }
  }
  EXPECT_LT(worst, 1e-6);
}

// ---------------------------------------------------------------------------
// Fixed-grid pooling.

TEST(SppPool, FixedLengthAcrossSizes) {
  Rng rng(9);
  const int grid = 4;
  std::int64_t expected = -1;
  for (int side : {4, 7, 11, 16}) {
    const Tensor<double> in = random_tensor<double>({3, side, side + 2}, rng);
    const Tensor<double> out = spp_pool<double>(in, grid, nullptr);
    if (expected < 0) expected = out.numel();
    EXPECT_EQ(out.numel(), expected);
  }
  EXPECT_EQ(expected, 3 * grid * grid);
}

TEST(SppPool, GridEqualsInputIsFlatten) {
  Rng rng(10);
  const Tensor<double> in = random_tensor<double>({2, 3, 3}, rng);
  const Tensor<double> out = spp_pool<double>(in, 3, nullptr);
  ASSERT_EQ(out.numel(), in.numel());
  for (std::int64_t i = 0; i < in.numel(); ++i) EXPECT_DOUBLE_EQ(out[i], in[i]);
}

TEST(SppPool, ConstantInput) {
  const Tensor<double> in = Tensor<double>::full({2, 9, 5}, -1.5);
  const Tensor<double> out = spp_pool<double>(in, 2, nullptr);
  for (std::int64_t i = 0; i < out.numel(); ++i) EXPECT_DOUBLE_EQ(out[i], -1.5);
}

TEST(SppPool, InputSmallerThanGrid) {
  const Tensor<double> in = Tensor<double>::full({1, 3, 3}, 1.0);
  EXPECT_THROW(spp_pool<double>(in, 4, nullptr), ShapeError);
}

TEST(SppPool, GradientsMatchFiniteDifferences) {
  double worst = 0.0;
  int done = 0;
  std::uint64_t seed = 5000;
  while (done < 20) {
    Rng inst(seed++);
    const int grid = 1 + static_cast<int>(uniform_index(inst, 3));
    const int h = grid + static_cast<int>(uniform_index(inst, 2 * grid));
    const int w = grid + static_cast<int>(uniform_index(inst, 2 * grid));
    const int c = 1 + static_cast<int>(uniform_index(inst, 2));
    Tensor<double> x = well_separated_tensor<double>({c, h, w}, inst);
    Tensor<std::int64_t> argmax;
    const Tensor<double> out = spp_pool(x, grid, &argmax);
    const Tensor<double> g = random_tensor<double>(out.shape(), inst);
    const Tensor<double> gx = spp_pool_backward(x.shape(), argmax, g);
    const auto loss = [&]() {
      const Tensor<double> o = spp_pool<double>(x, grid, nullptr);
      double l = 0.0;
      for (std::int64_t i = 0; i < o.numel(); ++i) l += o[i] * g[i];
      return l;
    };
    const FdReport r = check_gradient(x, gx, loss);
    if (r.probe_hit_kink) continue;
    worst = std::max(worst, r.max_rel_error);
    ++done;
  }
  EXPECT_LT(worst, 1e-6);
}

// ---------------------------------------------------------------------------
// L2 normalization.

TEST(L2Normalize, HandCases) {
  Tensor<double> v({2}, {3, 4});
  const Tensor<double> out = l2_normalize(v);
  EXPECT_NEAR(out[0], 0.6, 1e-15);
  EXPECT_NEAR(out[1], 0.8, 1e-15);

  Tensor<double> unit({3}, {0, 1, 0});
  const Tensor<double> same = l2_normalize(unit);
  EXPECT_DOUBLE_EQ(same[1], 1.0);

  Tensor<double> neg({3}, {-2, 0, 0});
  const Tensor<double> flipped = l2_normalize(neg);
  EXPECT_DOUBLE_EQ(flipped[0], -1.0);
}

TEST(L2Normalize, OutputNormIsOne) {
  Rng rng(11);
  for (int i = 0; i < 10; ++i) {
    const Tensor<double> v = random_tensor<double>({17}, rng);
    const Tensor<double> out = l2_normalize(v);
    double sq = 0.0;
    for (std::int64_t j = 0; j < out.numel(); ++j) sq += out[j] * out[j];
    EXPECT_NEAR(std::sqrt(sq), 1.0, 1e-6);
  }
}

TEST(L2Normalize, ZeroVectorRejected) {
  const Tensor<double> zero = Tensor<double>::full({4}, 0.0);
  EXPECT_THROW(l2_normalize(zero), NumericError);
}

// ---------------------------------------------------------------------------
// Layer objects: caching, state errors.

TEST(LayerObjects, BackwardBeforeForwardThrows) {
  ReluLayer<double> relu_layer;
  Tensor<double> g({2}, {1, 1});
  EXPECT_THROW(relu_layer.backward(g), StateError);
  MaxPool2dLayer<double> pool(2, 2);
  EXPECT_THROW(pool.backward(g), StateError);
}

TEST(LayerObjects, CloneSharesParameters) {
  Rng rng(12);
  auto w = std::make_shared<ParamBlock<double>>();
  w->name = "w";
  w->value = random_tensor<double>({2, 1, 3, 3}, rng);
  w->grad = Tensor<double>({2, 1, 3, 3});
  auto b = std::make_shared<ParamBlock<double>>();
  b->name = "b";
  b->value = random_tensor<double>({2}, rng);
  b->grad = Tensor<double>({2});
  Conv2dLayer<double> layer(w, b, 1);
  auto clone = layer.clone_shared();
  std::vector<std::shared_ptr<ParamBlock<double>>> a, c;
  layer.collect_params(&a);
  clone->collect_params(&c);
  ASSERT_EQ(a.size(), c.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].get(), c[i].get());
}

}  // namespace
}  // namespace patchsim
