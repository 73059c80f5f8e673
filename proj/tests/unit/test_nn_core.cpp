#include <doctest.h>

#include <cmath>
#include <functional>
#include <sstream>

#include "../support/oracles.hpp"
#include "step/autograd.hpp"
#include "step/error.hpp"
#include "step/optim.hpp"
#include "step/rng.hpp"

using namespace step;

namespace {

void randomize(Parameter& p, Rng& rng, double scale = 1.0) {
  for (double& x : p.value.data) x = scale * rng.normal();
  p.zero_grad();
}

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng) {
  Matrix m(r, c);
  for (double& x : m.data) x = rng.normal();
  return m;
}

// Gradient check of weighted_sum(build(tape, leaves), W) over `params`.
double check_primitive(std::vector<Parameter*> params, const Matrix& weights,
                       const std::function<Var(Tape&, std::vector<Var>&)>& build) {
  auto loss = [&](bool with_gradient) {
    Tape tape(with_gradient);
    std::vector<Var> leaves;
    for (Parameter* p : params) leaves.push_back(tape.param(*p));
    const Var out = ops::weighted_sum(tape, build(tape, leaves), weights);
    if (with_gradient) tape.backward(out);
    return tape.value(out)(0, 0);
  };
  GradCheckOptions opt;
  opt.samples = 1000;
  return grad_check(loss, params, opt).max_relative_error;
}

constexpr int kInstances = 20;
constexpr double kTolerance = 1e-4;

}  // namespace

TEST_SUITE("nn_core") {
  TEST_CASE("matmul gradient, both layouts") {
    Rng rng(1);
    for (int trial = 0; trial < kInstances; ++trial) {
      const std::size_t n = 1 + rng.below(4), k = 1 + rng.below(4), m = 1 + rng.below(4);
      const bool tb = trial % 2;
      Parameter a("a", n, k), b("b", tb ? m : k, tb ? k : m);
      randomize(a, rng);
      randomize(b, rng);
      const Matrix w = random_matrix(n, m, rng);
      CHECK(check_primitive({&a, &b}, w, [&](Tape& t, auto& v) { return ops::matmul(t, v[0], v[1], tb); }) <
            kTolerance);
    }
  }

  TEST_CASE("gradient of sum(A*B) with respect to A is ones * B^T") {
    Rng rng(2);
    Parameter a("a", 3, 4), b("b", 4, 2);
    randomize(a, rng);
    randomize(b, rng);
    Tape tape;
    const Var out = ops::weighted_sum(tape, ops::matmul(tape, tape.param(a), tape.param(b)), Matrix(3, 2, 1.0));
    tape.backward(out);
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t j = 0; j < 4; ++j) {
        const double expected = b.value(j, 0) + b.value(j, 1);
        CHECK(a.grad(i, j) == doctest::Approx(expected).epsilon(1e-12));
        // Finite difference oracle for the same entry.
        auto sum_ab = [&] {
          double s = 0;
          for (std::size_t r = 0; r < 3; ++r)
            for (std::size_t c = 0; c < 2; ++c)
              for (std::size_t q = 0; q < 4; ++q) s += a.value(r, q) * b.value(q, c);
          return s;
        };
        const double saved = a.value(i, j);
        a.value(i, j) = saved + 1e-4;
        const double up = sum_ab();
        a.value(i, j) = saved - 1e-4;
        const double down = sum_ab();
        a.value(i, j) = saved;
        CHECK(std::abs((up - down) / 2e-4 - a.grad(i, j)) < 1e-8);
      }
    }
  }

  TEST_CASE("add and add_broadcast gradients") {
    Rng rng(3);
    for (int trial = 0; trial < kInstances; ++trial) {
      const std::size_t n = 1 + rng.below(4), m = 1 + rng.below(5);
      Parameter a("a", n, m), b("b", n, m), r("r", 1, m);
      randomize(a, rng);
      randomize(b, rng);
      randomize(r, rng);
      const Matrix w = random_matrix(n, m, rng);
      CHECK(check_primitive({&a, &b}, w, [](Tape& t, auto& v) { return ops::add(t, v[0], v[1]); }) < kTolerance);
      CHECK(check_primitive({&a, &r}, w, [](Tape& t, auto& v) { return ops::add_broadcast(t, v[0], v[1]); }) <
            kTolerance);
    }
  }

  TEST_CASE("row_softmax gradient") {
    Rng rng(4);
    for (int trial = 0; trial < kInstances; ++trial) {
      const std::size_t n = 1 + rng.below(4), m = 2 + rng.below(5);
      Parameter x("x", n, m);
      randomize(x, rng, 2.0);
      CHECK(check_primitive({&x}, random_matrix(n, m, rng),
                            [](Tape& t, auto& v) { return ops::row_softmax(t, v[0]); }) < kTolerance);
    }
  }

  TEST_CASE("layer_norm gradient") {
    Rng rng(5);
    for (int trial = 0; trial < kInstances; ++trial) {
      const std::size_t n = 1 + rng.below(4), m = 2 + rng.below(6);
      Parameter x("x", n, m), g("g", 1, m), b("b", 1, m);
      randomize(x, rng);
      randomize(g, rng);
      randomize(b, rng);
      CHECK(check_primitive({&x, &g, &b}, random_matrix(n, m, rng),
                            [](Tape& t, auto& v) { return ops::layer_norm(t, v[0], v[1], v[2]); }) < kTolerance);
    }
  }

  TEST_CASE("gelu gradient") {
    Rng rng(6);
    for (int trial = 0; trial < kInstances; ++trial) {
      const std::size_t n = 1 + rng.below(4), m = 1 + rng.below(6);
      Parameter x("x", n, m);
      randomize(x, rng, 2.0);
      CHECK(check_primitive({&x}, random_matrix(n, m, rng), [](Tape& t, auto& v) { return ops::gelu(t, v[0]); }) <
            kTolerance);
    }
  }

  TEST_CASE("embedding_lookup gradient, repeated ids accumulate") {
    Rng rng(7);
    for (int trial = 0; trial < kInstances; ++trial) {
      const std::size_t vocab = 2 + rng.below(5), d = 1 + rng.below(4), n = 1 + rng.below(6);
      Parameter table("e", vocab, d);
      randomize(table, rng);
      std::vector<TokenId> ids(n);
      for (auto& id : ids) id = static_cast<TokenId>(rng.below(vocab));
      CHECK(check_primitive({&table}, random_matrix(n, d, rng),
                            [&](Tape& t, auto& v) { return ops::embedding_lookup(t, v[0], ids); }) < kTolerance);
    }
  }

  TEST_CASE("causal_attention gradient") {
    Rng rng(8);
    for (int trial = 0; trial < kInstances; ++trial) {
      const std::size_t heads = 1 + rng.below(2), dh = 1 + rng.below(3), d = heads * dh;
      const std::size_t n_seq = 1 + rng.below(2), len = 1 + rng.below(4);
      Parameter qkv("qkv", n_seq * len, 3 * d);
      randomize(qkv, rng);
      CHECK(check_primitive({&qkv}, random_matrix(n_seq * len, d, rng), [&](Tape& t, auto& v) {
              return ops::causal_attention(t, v[0], n_seq, len, heads);
            }) < kTolerance);
    }
  }

  TEST_CASE("masked_cross_entropy gradient") {
    Rng rng(9);
    for (int trial = 0; trial < kInstances; ++trial) {
      const std::size_t n = 1 + rng.below(5), vocab = 2 + rng.below(6);
      Parameter logits("z", n, vocab);
      randomize(logits, rng);
      std::vector<TokenId> targets(n);
      std::vector<std::uint8_t> mask(n);
      for (std::size_t i = 0; i < n; ++i) {
        targets[i] = static_cast<TokenId>(rng.below(vocab));
        mask[i] = rng.bernoulli(0.7);
      }
      mask[rng.below(n)] = 1;
      CHECK(check_primitive({&logits}, Matrix(1, 1, 1.0), [&](Tape& t, auto& v) {
              return ops::masked_cross_entropy(t, v[0], targets, mask);
            }) < kTolerance);
    }
  }

  TEST_CASE("shape errors") {
    Tape t;
    const Var a = t.constant(Matrix(2, 3)), b = t.constant(Matrix(2, 3));
    CHECK_THROWS_AS(ops::matmul(t, a, b), Error);
    CHECK_THROWS_AS(ops::add(t, a, t.constant(Matrix(3, 2))), Error);
    CHECK_THROWS_AS(ops::add_broadcast(t, a, t.constant(Matrix(1, 2))), Error);
    const std::vector<TokenId> targets{0, 1};
    const std::vector<std::uint8_t> none{0, 0};
    CHECK_THROWS_AS(ops::masked_cross_entropy(t, a, targets, none), Error);
    const std::vector<TokenId> bad_ids{5};
    CHECK_THROWS_AS(ops::embedding_lookup(t, a, bad_ids), Error);
  }

  TEST_CASE("softmax and layer norm output properties") {
    Rng rng(10);
    for (int trial = 0; trial < 1000; ++trial) {
      const std::size_t m = 1 + rng.below(30);
      std::vector<double> row(m);
      for (double& x : row) x = rng.normal() * 20.0;
      const auto raw = row;
      kernels::softmax_inplace(row);
      double s = 0;
      for (std::size_t i = 0; i < m; ++i) {
        REQUIRE(row[i] >= 0.0);
        s += row[i];
        REQUIRE(row[i] == doctest::Approx(oracle::naive_softmax_entry(raw, i)).epsilon(1e-9));
      }
      REQUIRE(std::abs(s - 1.0) <= 1e-12);

      const std::size_t d = 2 + rng.below(30);
      Tape t(false);
      Matrix x = random_matrix(3, d, rng);
      for (double& v : x.data) v = v * 5.0 + 3.0;
      const Var y = ops::layer_norm(t, t.constant(x), t.constant(Matrix(1, d, 1.0)), t.constant(Matrix(1, d, 0.0)));
      for (std::size_t r = 0; r < 3; ++r) {
        double mean = 0, var = 0;
        for (double v : t.value(y).row(r)) mean += v;
        mean /= double(d);
        for (double v : t.value(y).row(r)) var += (v - mean) * (v - mean);
        var /= double(d);
        double raw_var = 0, raw_mean = 0;
        for (double v : x.row(r)) raw_mean += v;
        raw_mean /= double(d);
        for (double v : x.row(r)) raw_var += (v - raw_mean) * (v - raw_mean);
        raw_var /= double(d);
        REQUIRE(std::abs(mean) <= 1e-9);
        // The 1e-5 epsilon shrinks the variance to raw / (raw + eps).
        REQUIRE(std::abs(var - raw_var / (raw_var + kernels::kLayerNormEps)) <= 1e-6);
        if (raw_var >= 10.0) REQUIRE(std::abs(var - 1.0) <= 1e-6);
      }
    }
  }

  TEST_CASE("uniform logits give ln V at every supervised position") {
    for (std::size_t vocab : {2u, 7u, 100u}) {
      Tape t(false);
      const std::vector<TokenId> targets{0, 1, 1};
      const std::vector<std::uint8_t> mask{1, 0, 1};
      const Var l = ops::masked_cross_entropy(t, t.constant(Matrix(3, vocab, 0.25)), targets, mask);
      CHECK(t.value(l)(0, 0) == doctest::Approx(std::log(double(vocab))).epsilon(1e-12));
    }
  }

  TEST_CASE("forward passes are bit-identical across runs") {
    Rng rng(11);
    const Matrix x = random_matrix(4, 6, rng);
    auto run = [&] {
      Tape t(false);
      const Var qkv = t.constant(x);
      return t.value(ops::gelu(t, ops::causal_attention(t, qkv, 1, 4, 2)));
    };
    CHECK(run() == run());
  }

  TEST_CASE("adam: zero gradient leaves parameters alone") {
    Rng rng(12);
    Parameter p("p", 3, 3);
    randomize(p, rng);
    const Matrix before = p.value;
    std::vector<Parameter*> ps{&p};
    AdamState s = AdamState::for_parameters(ps, 1e-3);
    adam_step(ps, s);
    adam_step(ps, s);
    CHECK(p.value == before);
    CHECK(s.step == 2);
  }

  TEST_CASE("adam: first step on a unit gradient moves by the learning rate") {
    Parameter p("p", 1, 1);
    std::vector<Parameter*> ps{&p};
    AdamState s = AdamState::for_parameters(ps, 1e-3);
    p.grad(0, 0) = 1.0;
    adam_step(ps, s);
    // m = 0.1, v = 0.001; bias correction gives m_hat = 1, v_hat = 1.
    const double first = -1e-3 * 1.0 / (1.0 + 1e-8);
    CHECK(p.value(0, 0) == doctest::Approx(first).epsilon(1e-12));
    CHECK(p.grad(0, 0) == 0.0);

    p.grad(0, 0) = 1.0;
    const double before = p.value(0, 0);
    adam_step(ps, s);
    const double second = p.value(0, 0) - before;
    CHECK(std::abs(second) <= std::abs(first) * (1 + 1e-6));
  }

  TEST_CASE("adam: non-finite gradient names the parameter") {
    Parameter p("weights.7", 1, 2);
    std::vector<Parameter*> ps{&p};
    AdamState s = AdamState::for_parameters(ps, 1e-3);
    p.grad(0, 1) = std::nan("");
    CHECK_THROWS_WITH_AS(adam_step(ps, s), doctest::Contains("weights.7"), Error);
    CHECK(p.value(0, 0) == 0.0);
  }

  TEST_CASE("clip_grad_norm rescales to the limit") {
    Parameter p("p", 1, 2);
    p.grad(0, 0) = 3;
    p.grad(0, 1) = 4;
    std::vector<Parameter*> ps{&p};
    CHECK(clip_grad_norm(ps, 1.0) == doctest::Approx(5.0));
    CHECK(p.grad(0, 0) == doctest::Approx(0.6));
    CHECK(p.grad(0, 1) == doctest::Approx(0.8));
  }

  TEST_CASE("grad_check on closed forms") {
    Rng rng(13);
    Parameter x("x", 4, 5);
    randomize(x, rng);
    std::vector<Parameter*> ps{&x};
    auto quadratic = [&](bool with_gradient) {
      double l = 0;
      for (std::size_t i = 0; i < x.value.size(); ++i) {
        l += 0.5 * x.value.data[i] * x.value.data[i];
        if (with_gradient) x.grad.data[i] += x.value.data[i];
      }
      return l;
    };
    CHECK(grad_check(quadratic, ps).max_relative_error < 1e-9);
    auto zero = [](bool) { return 0.0; };
    const auto r = grad_check(zero, ps);
    CHECK(r.max_relative_error == 0.0);
    CHECK(r.coordinates == 20);
  }

  TEST_CASE("parameter and optimizer serialization") {
    Rng rng(14);
    Parameter a("a", 2, 3), b("b", 1, 4);
    randomize(a, rng);
    randomize(b, rng);
    std::vector<Parameter*> ps{&a, &b};
    AdamState s = AdamState::for_parameters(ps, 3e-4);
    a.grad.fill(0.5);
    adam_step(ps, s);
    std::stringstream buf;
    write_parameters(buf, ps);
    write_adam(buf, s);

    Parameter a2("a", 2, 3), b2("b", 1, 4);
    std::vector<Parameter*> ps2{&a2, &b2};
    read_parameters(buf, ps2);
    const AdamState s2 = read_adam(buf, ps2);
    CHECK(a2.value == a.value);
    CHECK(b2.value == b.value);
    CHECK(s2.step == s.step);
    CHECK(s2.m == s.m);
    CHECK(s2.v == s.v);
    CHECK(s2.learning_rate == s.learning_rate);

    std::stringstream again;
    write_parameters(again, ps);
    Parameter wrong_shape("a", 3, 2), b3("b", 1, 4);
    std::vector<Parameter*> bad{&wrong_shape, &b3};
    CHECK_THROWS_WITH_AS(read_parameters(again, bad), doctest::Contains("shape mismatch"), Error);
    std::stringstream third;
    write_parameters(third, ps);
    Parameter renamed("z", 2, 3), b4("b", 1, 4);
    std::vector<Parameter*> bad2{&renamed, &b4};
    CHECK_THROWS_WITH_AS(read_parameters(third, bad2), doctest::Contains("name mismatch"), Error);
  }
}
