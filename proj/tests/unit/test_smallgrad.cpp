#include <cmath>
#include <random>
#include <sstream>

#include "doctest.h"

#include "dflab/errors.hpp"
#include "dflab/smallgrad.hpp"

using namespace dflab;

namespace {

Mlp single_layer(DenseMatrix w, DenseVector b, Activation act) {
  return Mlp({Layer{std::move(w), std::move(b), act}});
}

DenseVector random_vector(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  DenseVector v(n);
  for (double& x : v) x = g(rng);
  return v;
}

// Straight-line forward: y = act(W x + b) layer after layer.
DenseVector oracle_forward(const Mlp& net, DenseVector x) {
  for (const Layer& l : net.layers()) {
    DenseVector y(l.out_dim());
    for (std::size_t r = 0; r < l.out_dim(); ++r) {
      double acc = l.bias[r];
      for (std::size_t c = 0; c < l.in_dim(); ++c) acc += l.weight(r, c) * x[c];
      y[r] = l.activation == Activation::kTanh ? std::tanh(acc) : acc;
    }
    x = y;
  }
  return x;
}

}  // namespace

TEST_CASE("identity layer with W = I passes the input through") {
  DenseMatrix w(2, 2);
  w(0, 0) = w(1, 1) = 1.0;
  const Mlp net = single_layer(w, {0.0, 0.0}, Activation::kIdentity);
  const DenseVector in{1.0, 2.0};
  CHECK(mlp_forward(net, in) == DenseVector{1.0, 2.0});
}

TEST_CASE("zero tanh layer maps anything to zero") {
  const Mlp net = single_layer(DenseMatrix(3, 2), {0.0, 0.0, 0.0}, Activation::kTanh);
  const DenseVector in{7.0, -3.0};
  CHECK(mlp_forward(net, in) == DenseVector{0.0, 0.0, 0.0});
}

TEST_CASE("two-layer seed-42 net matches a hand-rolled forward") {
  const std::size_t dims[] = {2, 5, 3};
  const Activation acts[] = {Activation::kTanh, Activation::kIdentity};
  const Mlp net = Mlp::create(dims, acts, 42);
  const DenseVector in{0.5, -0.5};
  const DenseVector got = mlp_forward(net, in);
  const DenseVector want = oracle_forward(net, in);
  REQUIRE(got.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-15));
}

TEST_CASE("forward rejects a wrong input dimension") {
  const std::size_t dims[] = {3, 2};
  const Activation acts[] = {Activation::kTanh};
  const Mlp net = Mlp::create(dims, acts, 1);
  const DenseVector in{1.0, 2.0};
  CHECK_THROWS_AS(mlp_forward(net, in), StructuralError);
}

TEST_CASE("forward is bitwise repeatable") {
  const std::size_t dims[] = {4, 8, 8, 2};
  const Activation acts[] = {Activation::kTanh, Activation::kTanh, Activation::kIdentity};
  const Mlp net = Mlp::create(dims, acts, 3);
  const DenseVector in{0.1, -0.2, 0.3, 0.4};
  CHECK(mlp_forward(net, in) == mlp_forward(net, in));
}

TEST_CASE("glorot init stays inside its bound") {
  const std::size_t dims[] = {6, 10};
  const Activation acts[] = {Activation::kTanh};
  const Mlp net = Mlp::create(dims, acts, 9);
  const double bound = std::sqrt(6.0 / 16.0);
  for (double w : net.layers()[0].weight.values()) CHECK(std::abs(w) <= bound);
  for (double b : net.layers()[0].bias) CHECK(b == 0.0);
}

TEST_CASE("linear layer backward: input grad W^T g, weight grad g x^T") {
  DenseMatrix w(2, 3);
  double v = 0.5;
  for (double& e : w.values()) e = (v += 0.25);
  const Mlp net = single_layer(w, {0.1, -0.1}, Activation::kIdentity);
  const DenseVector x{1.0, -2.0, 3.0};
  const DenseVector g{0.7, -1.3};
  const BackwardResult back = mlp_backward(net, mlp_forward_traced(net, x), g);
  for (std::size_t c = 0; c < 3; ++c) {
    CHECK(back.input_grad[c] == doctest::Approx(w(0, c) * g[0] + w(1, c) * g[1]));
    for (std::size_t r = 0; r < 2; ++r)
      CHECK(back.tape.layers()[0].weight(r, c) == doctest::Approx(g[r] * x[c]));
  }
  CHECK(back.tape.layers()[0].bias == g);
}

TEST_CASE("zero output grad gives zero gradients") {
  const std::size_t dims[] = {3, 4, 2};
  const Activation acts[] = {Activation::kTanh, Activation::kIdentity};
  const Mlp net = Mlp::create(dims, acts, 5);
  const DenseVector x{0.3, 0.2, 0.1};
  const DenseVector g{0.0, 0.0};
  const BackwardResult back = mlp_backward(net, mlp_forward_traced(net, x), g);
  CHECK(back.tape.norm() == 0.0);
  for (double d : back.input_grad) CHECK(d == 0.0);
}

TEST_CASE("backward without a forward trace is a usage error") {
  const std::size_t dims[] = {2, 2};
  const Activation acts[] = {Activation::kTanh};
  const Mlp net = Mlp::create(dims, acts, 1);
  const DenseVector g{1.0, 1.0};
  CHECK_THROWS_AS(mlp_backward(net, ForwardTrace{}, g), UsageError);
}

TEST_CASE("finite-difference agreement across architectures") {
  struct Arch {
    std::vector<std::size_t> dims;
    std::vector<Activation> acts;
  };
  const Arch arches[] = {
      {{3, 4}, {Activation::kIdentity}},
      {{2, 8, 2}, {Activation::kTanh, Activation::kIdentity}},
      {{5, 6, 6, 3}, {Activation::kTanh, Activation::kTanh, Activation::kTanh}},
  };
  std::mt19937_64 rng(11);
  for (const Arch& a : arches) {
    for (int trial = 0; trial < 20; ++trial) {
      const Mlp net = Mlp::create(a.dims, a.acts, rng());
      const DenseVector x = random_vector(a.dims.front(), rng);
      const DenseVector g = random_vector(a.dims.back(), rng);
      CHECK(finite_difference_check(net, x, 1e-5, g) <= 1e-4);
    }
  }
}

TEST_CASE("finite-difference check on a linear net is exact to rounding") {
  const std::size_t dims[] = {4, 3};
  const Activation acts[] = {Activation::kIdentity};
  const Mlp net = Mlp::create(dims, acts, 2);
  const DenseVector x{0.5, 1.0, -1.0, 2.0};
  CHECK(finite_difference_check(net, x, 1e-3) <= 1e-9);
}

TEST_CASE("finite-difference check of a parameterless net is zero") {
  const Mlp net = single_layer(DenseMatrix(0, 0), {}, Activation::kIdentity);
  CHECK(net.parameter_count() == 0);
  CHECK(finite_difference_check(net, {}, 1e-5) == 0.0);
}

TEST_CASE("backward is linear in the output gradient") {
  const std::size_t dims[] = {3, 7, 2};
  const Activation acts[] = {Activation::kTanh, Activation::kIdentity};
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    const Mlp net = Mlp::create(dims, acts, rng());
    const ForwardTrace trace = mlp_forward_traced(net, random_vector(3, rng));
    const DenseVector g1 = random_vector(2, rng), g2 = random_vector(2, rng);
    DenseVector sum(2);
    for (int i = 0; i < 2; ++i) sum[i] = g1[i] + g2[i];
    GradientTape split = mlp_backward(net, trace, g1).tape;
    split.accumulate(mlp_backward(net, trace, g2).tape);
    const GradientTape joint = mlp_backward(net, trace, sum).tape;
    for (std::size_t p = 0; p < net.parameter_count(); ++p)
      CHECK(split.parameter(p) == doctest::Approx(joint.parameter(p)).epsilon(1e-12));
  }
}

TEST_CASE("sgd step arithmetic") {
  DenseMatrix w(1, 1, 1.0);
  Mlp net = single_layer(w, {0.0}, Activation::kIdentity);
  GradientTape tape(net);
  tape.layers()[0].weight(0, 0) = 2.0;
  sgd_step(net, tape, 0.1);
  CHECK(net.parameter(0) == doctest::Approx(0.8));
  CHECK(tape.layers()[0].weight(0, 0) == 2.0);
}

TEST_CASE("sgd with a zero tape leaves parameters unchanged") {
  const std::size_t dims[] = {2, 3, 1};
  const Activation acts[] = {Activation::kTanh, Activation::kIdentity};
  Mlp net = Mlp::create(dims, acts, 8);
  const Mlp before = net;
  sgd_step(net, GradientTape(net), 0.5);
  CHECK(net == before);
}

TEST_CASE("sgd matches a scalar loop oracle") {
  const std::size_t dims[] = {3, 5, 2};
  const Activation acts[] = {Activation::kTanh, Activation::kIdentity};
  std::mt19937_64 rng(21);
  Mlp net = Mlp::create(dims, acts, 21);
  const DenseVector x = random_vector(3, rng), g = random_vector(2, rng);
  const GradientTape tape = mlp_backward(net, mlp_forward_traced(net, x), g).tape;
  std::vector<double> expect(net.parameter_count());
  for (std::size_t p = 0; p < expect.size(); ++p) expect[p] = net.parameter(p) - 0.05 * tape.parameter(p);
  sgd_step(net, tape, 0.05);
  for (std::size_t p = 0; p < expect.size(); ++p) CHECK(net.parameter(p) == expect[p]);
}

TEST_CASE("sgd rejects non-finite gradients") {
  const std::size_t dims[] = {1, 1};
  const Activation acts[] = {Activation::kIdentity};
  Mlp net = Mlp::create(dims, acts, 1);
  GradientTape tape(net);
  tape.layers()[0].bias[0] = std::nan("");
  CHECK_THROWS_AS(sgd_step(net, tape, 0.1), TrainingError);
}

TEST_CASE("snapshot round-trips bitwise") {
  const std::size_t dims[] = {4, 6, 3};
  const Activation acts[] = {Activation::kTanh, Activation::kIdentity};
  const Mlp net = Mlp::create(dims, acts, 77);
  std::stringstream ss;
  save_snapshot(net, ss);
  const Mlp back = load_snapshot(ss);
  CHECK(back == net);
  for (std::size_t p = 0; p < net.parameter_count(); ++p)
    CHECK(std::bit_cast<std::uint64_t>(back.parameter(p)) == std::bit_cast<std::uint64_t>(net.parameter(p)));
}

TEST_CASE("snapshot rejects an unknown header") {
  std::stringstream ss("not-a-snapshot\n");
  CHECK_THROWS(load_snapshot(ss));
}

TEST_CASE("adam moves parameters against the gradient") {
  const std::size_t dims[] = {2, 1};
  const Activation acts[] = {Activation::kIdentity};
  Mlp net = Mlp::create(dims, acts, 3);
  AdamState state(net);
  GradientTape tape(net);
  tape.layers()[0].bias[0] = 1.0;
  const double before = net.layers()[0].bias[0];
  adam_step(net, state, tape, 0.01);
  // first Adam step has magnitude lr regardless of gradient scale
  CHECK(net.layers()[0].bias[0] == doctest::Approx(before - 0.01).epsilon(1e-6));
}
