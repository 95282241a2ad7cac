#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "fedsim/rng.hpp"
#include "fedsim/tensor.hpp"

#include <cmath>
#include <cstring>
#include <functional>
#include <vector>

using namespace fedsim;

namespace {

// Central-difference oracle: d loss / d leaf, evaluated by re-running the
// forward pass with each coordinate nudged. Run in f64 mode.
std::vector<double> fd_grad(Tensor& leaf, const std::function<double()>& loss_value, double h) {
  std::vector<double> g(static_cast<size_t>(leaf.numel()));
  std::vector<double> vals(leaf.data().begin(), leaf.data().end());
  for (size_t i = 0; i < vals.size(); ++i) {
    double orig = vals[i];
    vals[i] = orig + h;
    leaf.apply_values(vals);
    double up = loss_value();
    vals[i] = orig - h;
    leaf.apply_values(vals);
    double dn = loss_value();
    vals[i] = orig;
    leaf.apply_values(vals);
    g[i] = (up - dn) / (2.0 * h);
  }
  return g;
}

// Runs forward() once with backward, then checks every listed leaf against
// the finite-difference oracle with the module's agreed tolerance.
void check_grads(std::vector<Tensor*> leaves, const std::function<Tensor()>& forward,
                 double h = 1e-4, double tol = 1e-4) {
  ScopedPrecision p(Precision::f64);
  for (Tensor* t : leaves) t->zero_grad();
  Tensor loss = forward();
  backward(loss);
  for (Tensor* t : leaves) {
    REQUIRE(t->has_grad());
    auto analytic = t->grad();
    auto numeric = fd_grad(*t, [&] {
      NoGradGuard ng;
      return forward().item();
    }, h);
    for (size_t i = 0; i < numeric.size(); ++i) {
      double denom = std::max(1.0, std::abs(numeric[i]));
      CHECK(std::abs(analytic[i] - numeric[i]) / denom < tol);
    }
  }
}

Tensor random_tensor(std::vector<int64_t> shape, Rng& rng, bool requires_grad = true) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  std::vector<double> data(static_cast<size_t>(n));
  for (double& v : data) v = rng.normal(0.0, 1.0);
  return Tensor::from_data(std::move(shape), std::move(data), requires_grad);
}

}  // namespace

TEST_CASE("matmul identity and hand arithmetic") {
  Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  Tensor m = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  Tensor out = matmul(eye, m);
  CHECK(out.data()[0] == 1);
  CHECK(out.data()[1] == 2);
  CHECK(out.data()[2] == 3);
  CHECK(out.data()[3] == 4);

  Tensor row = Tensor::from_data({1, 2}, {1, 2});
  Tensor col = Tensor::from_data({2, 1}, {3, 4});
  CHECK(matmul(row, col).item() == 11);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({2, 3});
  try {
    matmul(a, b);
    FAIL("expected dimension error");
  } catch (const std::invalid_argument& e) {
    std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
  }
}

TEST_CASE("gradient of sum(A*B) w.r.t. A matches frozen value and oracle") {
  ScopedPrecision p(Precision::f64);
  Tensor a = Tensor::from_data({2, 2}, {1, 0, 0, 1}, true);
  Tensor b = Tensor::from_data({2, 2}, {2, 3, 4, 5});
  auto forward = [&] { return sum_all(matmul(a, b)); };

  Tensor loss = forward();
  backward(loss);
  REQUIRE(a.has_grad());
  // Row sums of B: [5, 9] broadcast over rows of A.
  CHECK(a.grad()[0] == doctest::Approx(5));
  CHECK(a.grad()[1] == doctest::Approx(9));
  CHECK(a.grad()[2] == doctest::Approx(5));
  CHECK(a.grad()[3] == doctest::Approx(9));

  auto numeric = fd_grad(a, [&] {
    NoGradGuard ng;
    return forward().item();
  }, 1e-3);
  for (size_t i = 0; i < 4; ++i) CHECK(a.grad()[i] == doctest::Approx(numeric[i]).epsilon(1e-6));
}

TEST_CASE("matmul and bmm gradients agree with the oracle") {
  Rng rng(11);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({4, 2}, rng);
  check_grads({&a, &b}, [&] { return sum_all(gelu(matmul(a, b))); });

  Tensor ba = random_tensor({2, 3, 4}, rng);
  Tensor bb = random_tensor({2, 4, 3}, rng);
  check_grads({&ba, &bb}, [&] { return sum_all(gelu(bmm(ba, bb))); });
}

TEST_CASE("softmax basics") {
  Tensor two = Tensor::from_data({1, 2}, {0, 0});
  Tensor s = softmax_lastdim(two);
  CHECK(s.data()[0] == doctest::Approx(0.5));
  CHECK(s.data()[1] == doctest::Approx(0.5));

  Tensor big = Tensor::from_data({1, 2}, {1000, 0});
  Tensor sb = softmax_lastdim(big);
  CHECK(sb.data()[0] == doctest::Approx(1.0));
  CHECK(sb.data()[1] == doctest::Approx(0.0));

  Rng rng(3);
  Tensor x = random_tensor({5, 7}, rng, false);
  Tensor y = softmax_lastdim(x);
  for (int64_t r = 0; r < 5; ++r) {
    double sum = 0.0;
    for (int64_t j = 0; j < 7; ++j) {
      double v = y.data()[static_cast<size_t>(r * 7 + j)];
      CHECK(v > 0.0);
      CHECK(v < 1.0);
      sum += v;
    }
    CHECK(std::abs(sum - 1.0) < 1e-6);
  }
}

TEST_CASE("softmax gradient on a random 3-vector") {
  Rng rng(5);
  Tensor x = random_tensor({1, 3}, rng);
  Tensor w = random_tensor({1, 3}, rng, false);
  // Weighted sum keeps the loss sensitive to each coordinate.
  check_grads({&x}, [&] { return sum_all(mul(softmax_lastdim(x), w)); });
}

TEST_CASE("cross_entropy uniform case and label validation") {
  Tensor logits = Tensor::zeros({1, 4});
  CHECK(cross_entropy(logits, {2}).item() == doctest::Approx(std::log(4.0)));

  CHECK_THROWS_AS(cross_entropy(logits, {4}), std::invalid_argument);
  CHECK_THROWS_AS(cross_entropy(logits, {-1}), std::invalid_argument);
}

TEST_CASE("cross_entropy gradient matches the oracle") {
  Rng rng(17);
  Tensor logits = random_tensor({4, 5}, rng);
  std::vector<int> labels = {1, 0, 4, 2};
  check_grads({&logits}, [&] { return cross_entropy(logits, labels); });
}

TEST_CASE("layer_norm of a constant vector collapses to bias") {
  Tensor x = Tensor::full({2, 4}, 3.7);
  Tensor gain = Tensor::full({4}, 2.0);
  Tensor bias = Tensor::from_data({4}, {0.1, 0.2, 0.3, 0.4});
  Tensor y = layer_norm(x, gain, bias);
  for (int64_t r = 0; r < 2; ++r) {
    for (int64_t j = 0; j < 4; ++j) {
      CHECK(y.data()[static_cast<size_t>(r * 4 + j)] ==
            doctest::Approx(bias.data()[static_cast<size_t>(j)]).epsilon(1e-4));
    }
  }
}

TEST_CASE("layer_norm gradients for input, gain, and bias") {
  Rng rng(23);
  Tensor x = random_tensor({3, 6}, rng);
  Tensor gain = random_tensor({6}, rng);
  Tensor bias = random_tensor({6}, rng);
  check_grads({&x, &gain, &bias}, [&] { return sum_all(gelu(layer_norm(x, gain, bias))); });
}

TEST_CASE("gelu gradient at -1, 0, 1") {
  Tensor x = Tensor::from_data({3}, {-1, 0, 1}, true);
  check_grads({&x}, [&] { return sum_all(gelu(x)); });
}

TEST_CASE("linear with and without bias matches the oracle") {
  Rng rng(29);
  Tensor x = random_tensor({2, 3, 4}, rng);
  Tensor w = random_tensor({4, 5}, rng);
  Tensor b = random_tensor({5}, rng);
  check_grads({&x, &w, &b}, [&] { return sum_all(gelu(linear(x, w, &b))); });
  check_grads({&x, &w}, [&] { return sum_all(gelu(linear(x, w, nullptr))); });
}

TEST_CASE("elementwise ops and scale match the oracle") {
  Rng rng(31);
  Tensor a = random_tensor({2, 3}, rng);
  Tensor b = random_tensor({2, 3}, rng);
  check_grads({&a, &b}, [&] { return sum_all(mul(add(a, b), sub(a, b))); });
  check_grads({&a}, [&] { return sum_all(scale(a, -2.5)); });
}

TEST_CASE("token helpers route gradients to the right slots") {
  Rng rng(37);
  Tensor x = random_tensor({2, 5, 4}, rng);
  Tensor prompts = random_tensor({3, 4}, rng);
  Tensor pos = random_tensor({5, 4}, rng);

  check_grads({&x, &prompts}, [&] {
    Tensor with = prepend_tokens(prompts, x);
    Tensor without = drop_tokens(with, 3);
    return sum_all(gelu(without));
  });
  check_grads({&x}, [&] { return sum_all(gelu(take_token(x, 2))); });
  check_grads({&x}, [&] { return sum_all(gelu(slice_lastdim(x, 1, 2))); });
  check_grads({&x, &pos}, [&] { return sum_all(gelu(add_position_embedding(x, pos))); });
  check_grads({&x}, [&] { return sum_all(gelu(transpose_last2(x))); });
}

TEST_CASE("split_heads and merge_heads invert each other") {
  Rng rng(41);
  Tensor x = random_tensor({2, 5, 6}, rng, false);
  Tensor round = merge_heads(split_heads(x, 3), 3);
  REQUIRE(round.shape() == x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) {
    CHECK(round.data()[static_cast<size_t>(i)] == x.data()[static_cast<size_t>(i)]);
  }

  Tensor y = random_tensor({1, 4, 6}, rng);
  check_grads({&y}, [&] { return sum_all(gelu(merge_heads(split_heads(y, 2), 2))); });
}

TEST_CASE("attention-shaped composite gradient") {
  // softmax(QK^T / sqrt(d)) V over one head, the core attention arithmetic.
  Rng rng(43);
  Tensor q = random_tensor({1, 3, 4}, rng);
  Tensor k = random_tensor({1, 3, 4}, rng);
  Tensor v = random_tensor({1, 3, 4}, rng);
  check_grads({&q, &k, &v}, [&] {
    Tensor scores = scale(bmm(q, transpose_last2(k)), 0.5);
    return sum_all(bmm(softmax_lastdim(scores), v));
  });
}

TEST_CASE("backward populates leaves, skips frozen tensors") {
  Tensor w = Tensor::from_data({3}, {1, 2, 3}, true);
  Tensor frozen = Tensor::from_data({3}, {5, 5, 5}, false);
  Tensor loss = sum_all(mul(add(w, frozen), w));
  backward(loss);
  REQUIRE(w.has_grad());
  // d/dw of sum((w + c) * w) = 2w + c
  CHECK(w.grad()[0] == doctest::Approx(7));
  CHECK(w.grad()[1] == doctest::Approx(9));
  CHECK(w.grad()[2] == doctest::Approx(11));
  CHECK_FALSE(frozen.has_grad());
}

TEST_CASE("sum of squares gives 2w") {
  Tensor w = Tensor::from_data({3}, {1, 2, 3}, true);
  backward(sum_all(mul(w, w)));
  CHECK(w.grad()[0] == doctest::Approx(2));
  CHECK(w.grad()[1] == doctest::Approx(4));
  CHECK(w.grad()[2] == doctest::Approx(6));
}

TEST_CASE("backward twice without re-forward is an error") {
  Tensor w = Tensor::from_data({2}, {1, 2}, true);
  Tensor loss = sum_all(mul(w, w));
  backward(loss);
  CHECK_THROWS_AS(backward(loss), std::logic_error);
}

TEST_CASE("backward requires a scalar") {
  Tensor w = Tensor::from_data({2}, {1, 2}, true);
  Tensor y = mul(w, w);
  CHECK_THROWS_AS(backward(y), std::invalid_argument);
}

TEST_CASE("gradients accumulate across backward calls on fresh graphs") {
  Tensor w = Tensor::from_data({2}, {1, 2}, true);
  backward(sum_all(mul(w, w)));
  backward(sum_all(mul(w, w)));
  CHECK(w.grad()[0] == doctest::Approx(4));
  CHECK(w.grad()[1] == doctest::Approx(8));
  w.zero_grad();
  CHECK_FALSE(w.has_grad());
}

TEST_CASE("backward is bitwise deterministic") {
  auto run = [](std::vector<double>& out) {
    Rng rng(77);
    Tensor x = random_tensor({4, 6}, rng, false);
    Tensor w1 = random_tensor({6, 8}, rng);
    Tensor b1 = random_tensor({8}, rng);
    Tensor w2 = random_tensor({8, 3}, rng);
    Tensor h = gelu(linear(x, w1, &b1));
    Tensor logits = linear(h, w2, nullptr);
    backward(cross_entropy(logits, {0, 2, 1, 0}));
    out.assign(w1.grad().begin(), w1.grad().end());
  };
  std::vector<double> g1, g2;
  run(g1);
  run(g2);
  REQUIRE(g1.size() == g2.size());
  CHECK(std::memcmp(g1.data(), g2.data(), g1.size() * sizeof(double)) == 0);
}

TEST_CASE("f32 mode stores genuine float values") {
  ScopedPrecision p(Precision::f32);
  Tensor x = Tensor::from_data({1}, {0.1});
  double stored = x.data()[0];
  CHECK(stored == static_cast<double>(static_cast<float>(0.1)));
  CHECK(stored != 0.1);  // 0.1 is not representable in f32

  Tensor a = Tensor::from_data({1}, {1.0 / 3.0});
  Tensor b = Tensor::from_data({1}, {2.0 / 7.0});
  Tensor c = mul(a, b);
  CHECK(c.data()[0] == static_cast<double>(static_cast<float>(c.data()[0])));
}

TEST_CASE("non-finite forward output raises") {
  {
    ScopedPrecision p(Precision::f32);
    Tensor big = Tensor::full({1}, 3e38);
    CHECK_THROWS_AS(mul(big, big), std::runtime_error);  // overflows float
  }
  {
    ScopedPrecision p(Precision::f64);
    Tensor big = Tensor::full({1}, 1e308);
    CHECK_THROWS_AS(mul(big, big), std::runtime_error);  // overflows double
  }
}

TEST_CASE("NoGradGuard suppresses graph construction") {
  Tensor w = Tensor::from_data({2}, {1, 2}, true);
  {
    NoGradGuard ng;
    Tensor y = sum_all(mul(w, w));
    CHECK_FALSE(y.requires_grad());
  }
  Tensor y = sum_all(mul(w, w));
  CHECK(y.requires_grad());
}

TEST_CASE("clone detaches storage") {
  Tensor a = Tensor::from_data({2}, {1, 2}, true);
  Tensor c = a.clone(false);
  std::vector<double> vals = {9, 9};
  c.apply_values(vals);
  CHECK(a.data()[0] == 1);
  CHECK_FALSE(c.requires_grad());
}
