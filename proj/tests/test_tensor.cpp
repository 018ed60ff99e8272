// Copyright 2026 The cpplab Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <vector>

#include "cpplab/tensor.hpp"
#include "testutil.hpp"

using namespace cpplab;
using namespace cpplab::ad;
using cpplab::testing::gradcheck;
using cpplab::testing::random_vector;

namespace {

// Runs gradcheck for a scalar-valued graph builder over a single leaf.
double check_unary_graph(int rows, int cols,
                         const std::function<Value(Tape&, Value)>& build,
                         std::uint64_t seed = 1, double lo = -2.0,
                         double hi = 2.0) {
  Rng rng(seed);
  std::vector<double> x =
      random_vector(static_cast<std::size_t>(rows) * cols, rng, lo, hi);
  auto f = [&](const std::vector<double>& p) {
    Tape t;
    Value v = t.leaf(rows, cols, p, true);
    return build(t, v).scalar();
  };
  Tape t;
  Value v = t.leaf(rows, cols, x, true);
  Value loss = build(t, v);
  t.backward(loss);
  std::vector<double> g(t.grad(v).data(), t.grad(v).data() + x.size());
  return gradcheck(f, x, g);
}

}  // namespace

TEST_CASE("elementwise forward values") {
  Tape t;
  Value a = t.leaf(1, 3, std::vector<double>{1.0, -2.0, 0.5}, false);
  Value b = t.leaf(1, 3, std::vector<double>{2.0, 3.0, -1.0}, false);
  CHECK(add(a, b).array()(1) == Catch::Approx(1.0));
  CHECK(mul(a, b).array()(0) == Catch::Approx(2.0));
  CHECK(relu(a).array()(1) == 0.0);
  CHECK(sigmoid(t.constant(1, 1, 0.0)).scalar() == Catch::Approx(0.5));
  CHECK(softplus(t.constant(1, 1, 0.0)).scalar() ==
        Catch::Approx(std::log(2.0)));
  CHECK(softplus(t.constant(1, 1, 800.0)).scalar() == Catch::Approx(800.0));
}

TEST_CASE("matmul matches hand computation") {
  Tape t;
  Value a = t.leaf(2, 2, std::vector<double>{1, 2, 3, 4}, false);
  Value b = t.leaf(2, 2, std::vector<double>{5, 6, 7, 8}, false);
  Value c = matmul(a, b);
  CHECK(c(0, 0) == Catch::Approx(19));
  CHECK(c(0, 1) == Catch::Approx(22));
  CHECK(c(1, 0) == Catch::Approx(43));
  CHECK(c(1, 1) == Catch::Approx(50));
}

TEST_CASE("gradients match finite differences") {
  auto s = [](Tape&, Value v) { return v; };
  CHECK(check_unary_graph(3, 4, [](Tape&, Value v) {
          return mean(v);
        }) < 1e-6);
  CHECK(check_unary_graph(3, 4, [](Tape&, Value v) {
          return sum(sigmoid(v));
        }) < 1e-6);
  CHECK(check_unary_graph(3, 4, [](Tape&, Value v) {
          return sum(softplus(mul(v, v)));
        }) < 1e-6);
  CHECK(check_unary_graph(2, 6, [](Tape&, Value v) {
          return sum(mul(relu(v), v));
        }) < 1e-5);
  CHECK(check_unary_graph(4, 4, [](Tape& t, Value v) {
          return sum(matmul(v, transpose(v)));
        }) < 1e-6);
  CHECK(check_unary_graph(3, 5, [](Tape& t, Value v) {
          return sum(mul(softmax_rows(v), v));
        }) < 1e-6);
  CHECK(check_unary_graph(3, 5, [](Tape& t, Value v) {
          return mean(mul(log_softmax_rows(v), v));
        }) < 1e-6);
  CHECK(check_unary_graph(4, 3, [](Tape& t, Value v) {
          Value g = t.constant(1, 3, 1.3);
          Value b = t.constant(1, 3, 0.2);
          return sum(mul(layer_norm(v, g, b), v));
        }) < 1e-5);
  CHECK(check_unary_graph(3, 4, [](Tape& t, Value v) {
          Value w = slice_rows(v, 0, 1);
          Value rest = slice_rows(v, 1, 3);
          return sum(mul(concat_rows({rest, w}), concat_rows({rest, w})));
        }) < 1e-6);
  CHECK(check_unary_graph(2, 8, [](Tape& t, Value v) {
          Array targets(16);
          for (int i = 0; i < 16; ++i) targets(i) = (i % 3 == 0) ? 1.0 : 0.0;
          return mean(bce_logits(v, targets));
        }) < 1e-6);
  CHECK(check_unary_graph(4, 6, [](Tape& t, Value v) {
          return sum(cosine_rows(slice_rows(v, 0, 2), slice_rows(v, 2, 4)));
        }) < 1e-5);
  CHECK(check_unary_graph(5, 3, [](Tape& t, Value v) {
          return sum(cosine_matrix(slice_rows(v, 0, 2), slice_rows(v, 2, 5)));
        }) < 1e-5);
  CHECK(check_unary_graph(3, 4, [](Tape& t, Value v) {
          return sum(pick_cols(v, {1, 3, 0}));
        }) < 1e-6);
  CHECK(check_unary_graph(4, 3, [](Tape& t, Value v) {
          return sum(square(gather_rows(v, {2, 0, 2, 1})));
        }) < 1e-6);
}

TEST_CASE("broadcast op gradients") {
  CHECK(check_unary_graph(3, 8, [](Tape& t, Value v) {
          Value a = slice_rows(v, 0, 2);
          Value r = slice_rows(v, 2, 3);
          return sum(square(add_rowvec(a, r)));
        }) < 1e-6);
  CHECK(check_unary_graph(3, 8, [](Tape& t, Value v) {
          Value a = slice_rows(v, 0, 2);
          Value r = slice_rows(v, 2, 3);
          return sum(square(mul_rowvec(a, r)));
        }) < 1e-6);
  CHECK(check_unary_graph(2, 9, [](Tape& t, Value v) {
          Value a = reshape(slice_rows(v, 0, 1), 3, 3);
          Value c = reshape(slice_rows(v, 1, 2), 3, 3);
          return sum(square(add_colvec(a, sum_cols(c))));
        }) < 1e-6);
  CHECK(check_unary_graph(2, 9, [](Tape& t, Value v) {
          Value a = reshape(slice_rows(v, 0, 1), 3, 3);
          Value c = reshape(slice_rows(v, 1, 2), 3, 3);
          return sum(square(mul_colvec(a, mean_cols(c))));
        }) < 1e-6);
}

TEST_CASE("conv2d forward against direct convolution") {
  // 1 input channel, 4x4 image, 2 output channels, 3x3 kernel, stride 1 pad 1
  Rng rng(7);
  std::vector<double> x = random_vector(16, rng);
  std::vector<double> w = random_vector(2 * 9, rng);
  std::vector<double> b = {0.3, -0.1};
  Tape t;
  Value xv = t.leaf(1, 16, x, false);
  Value wv = t.leaf(2, 9, w, false);
  Value bv = t.leaf(2, 1, b, false);
  Value y = conv2d(xv, wv, bv, 4, 4, 3, 1, 1);
  REQUIRE(y.rows() == 2);
  REQUIRE(y.cols() == 16);
  for (int co = 0; co < 2; ++co) {
    for (int oy = 0; oy < 4; ++oy) {
      for (int ox = 0; ox < 4; ++ox) {
        double acc = b[static_cast<std::size_t>(co)];
        for (int ki = 0; ki < 3; ++ki) {
          for (int kj = 0; kj < 3; ++kj) {
            int iy = oy + ki - 1, ix = ox + kj - 1;
            if (iy < 0 || iy >= 4 || ix < 0 || ix >= 4) continue;
            acc += w[static_cast<std::size_t>(co * 9 + ki * 3 + kj)] *
                   x[static_cast<std::size_t>(iy * 4 + ix)];
          }
        }
        CHECK(y(co, oy * 4 + ox) == Catch::Approx(acc).margin(1e-12));
      }
    }
  }
}

TEST_CASE("conv2d and upsample gradients") {
  CHECK(check_unary_graph(1, 16 + 2 * 9 + 2, [](Tape& t, Value v) {
          Value x = reshape(slice_rows(reshape(v, 36, 1), 0, 16), 1, 16);
          Value w = reshape(slice_rows(reshape(v, 36, 1), 16, 34), 2, 9);
          Value b = reshape(slice_rows(reshape(v, 36, 1), 34, 36), 2, 1);
          Value y = conv2d(x, w, b, 4, 4, 3, 2, 1);
          return sum(square(y));
        }) < 1e-5);
  CHECK(check_unary_graph(2, 16, [](Tape& t, Value v) {
          Value y = upsample_bilinear(v, 4, 4, 2);
          return sum(mul(y, y));
        }) < 1e-6);
}

TEST_CASE("no-grad leaves stay at zero gradient") {
  Tape t;
  Value frozen = t.leaf(2, 3, std::vector<double>(6, 1.5), false);
  Value live = t.leaf(2, 3, std::vector<double>(6, -0.5), true);
  Value loss = sum(mul(frozen, sigmoid(live)));
  t.backward(loss);
  for (int i = 0; i < 6; ++i) {
    CHECK(t.grad(frozen)(i) == 0.0);
    CHECK(t.grad(live)(i) != 0.0);
  }
}

TEST_CASE("cosine handles zero rows as zero similarity") {
  Tape t;
  Value a = t.leaf(1, 3, std::vector<double>{0.0, 0.0, 0.0}, false);
  Value b = t.leaf(1, 3, std::vector<double>{1.0, 2.0, 3.0}, false);
  CHECK(cosine_rows(a, b).scalar() == 0.0);
}
