#include <doctest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "percap/tensor.hpp"

using percap::Tensor;
using percap::Tape;
using percap::TapeScope;
using percap::Rng;
using D = Tensor<double>;

namespace {

D rand_tensor(percap::Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  D t = D::zeros(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = rng.uniform(lo, hi);
  return t;
}

}  // namespace

TEST_CASE("matmul forward") {
  D eye = D::from_data({2, 2}, {1, 0, 0, 1});
  D x = D::from_data({2, 3}, {5, 6, 7, 8, 9, 10});
  D y = percap::matmul(eye, x);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(y.data()[i] == x.data()[i]);

  D a = D::from_data({2, 2}, {1, 2, 3, 4});
  D b = D::from_data({2, 1}, {1, 1});
  D c = percap::matmul(a, b);
  CHECK(c.at(0, 0) == 3);
  CHECK(c.at(1, 0) == 7);

  CHECK_THROWS_AS(percap::matmul(a, D::zeros({3, 2})), percap::ContractError);
}

TEST_CASE("matmul gradient vs finite differences") {
  Rng rng(7);
  D a = rand_tensor({5, 7}, rng);
  D b = rand_tensor({7, 3}, rng);
  D w = rand_tensor({5, 3}, rng);
  auto loss = [&]() { return percap::sum(percap::mul(percap::matmul(a, b), w)); };
  auto res = percap::grad_check_params<double>(loss, {a, b});
  CHECK(res.pass);
  CHECK(res.max_rel_err <= 1e-4);
}

TEST_CASE("softmax forward") {
  D z = percap::softmax(D::from_data({3}, {0, 0, 0}), 0);
  for (std::size_t i = 0; i < 3; ++i) CHECK(z.data()[i] == doctest::Approx(1.0 / 3).epsilon(1e-9));

  D big = percap::softmax(D::from_data({2}, {1000, 1000}), 0);
  CHECK(big.data()[0] == doctest::Approx(0.5));
  CHECK(big.data()[1] == doctest::Approx(0.5));

  D s = percap::softmax(D::from_data({3}, {1, 2, 3}), 0);
  CHECK(std::abs(s.data()[0] - 0.09003) < 1e-5);
  CHECK(std::abs(s.data()[1] - 0.24473) < 1e-5);
  CHECK(std::abs(s.data()[2] - 0.66524) < 1e-5);
}

TEST_CASE("softmax slices sum to 1 and shift invariance") {
  Rng rng(11);
  D x = rand_tensor({4, 6}, rng, -3, 3);
  for (std::size_t axis = 0; axis < 2; ++axis) {
    D y = percap::softmax(x, axis);
    std::size_t outer = axis == 0 ? 6 : 4;
    std::size_t mid = axis == 0 ? 4 : 6;
    for (std::size_t o = 0; o < outer; ++o) {
      double s = 0;
      for (std::size_t m = 0; m < mid; ++m)
        s += axis == 0 ? y.at(m, o) : y.at(o, m);
      CHECK(std::abs(s - 1.0) < 1e-6);
    }
  }
  D shifted = D::zeros({4, 6});
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 6; ++c) shifted.at(r, c) = x.at(r, c) + 17.5;
  D y0 = percap::softmax(x, 1);
  D y1 = percap::softmax(shifted, 1);
  for (std::size_t i = 0; i < y0.size(); ++i)
    CHECK(std::abs(y0.data()[i] - y1.data()[i]) < 1e-6);
}

TEST_CASE("softmax and log_softmax gradients") {
  Rng rng(13);
  D x = rand_tensor({3, 5}, rng);
  D w = rand_tensor({3, 5}, rng);
  auto f1 = [&](D v) { return percap::sum(percap::mul(percap::softmax(v, 1), w)); };
  CHECK(percap::grad_check<double>(f1, x).pass);
  auto f2 = [&](D v) { return percap::sum(percap::mul(percap::log_softmax(v, 1), w)); };
  CHECK(percap::grad_check<double>(f2, x).pass);
}

TEST_CASE("layer_norm forward") {
  D gain = percap::init_ones<double>(4);
  D bias = percap::init_bias<double>(4);
  D c = percap::layer_norm(D::from_data({4}, {2, 2, 2, 2}), gain, bias);
  for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(c.data()[i]) < 1e-6);

  D g2 = percap::init_ones<double>(2);
  D b2 = percap::init_bias<double>(2);
  D y = percap::layer_norm(D::from_data({2}, {1, 3}), g2, b2, 1e-12);
  CHECK(y.data()[0] == doctest::Approx(-1.0));
  CHECK(y.data()[1] == doctest::Approx(1.0));
}

TEST_CASE("layer_norm gradient") {
  Rng rng(17);
  D x = rand_tensor({4, 8}, rng);
  D gain = rand_tensor({8}, rng, 0.5, 1.5);
  D bias = rand_tensor({8}, rng);
  D w = rand_tensor({4, 8}, rng);
  auto loss = [&]() { return percap::sum(percap::mul(percap::layer_norm(x, gain, bias), w)); };
  auto res = percap::grad_check_params<double>(loss, {x, gain, bias});
  CHECK(res.pass);
}

TEST_CASE("embedding_lookup") {
  D table = D::from_data({2, 2}, {1, 0, 0, 1});
  D out = percap::embedding_lookup(table, {1, 0});
  CHECK(out.at(0, 0) == 0);
  CHECK(out.at(0, 1) == 1);
  CHECK(out.at(1, 0) == 1);
  CHECK(out.at(1, 1) == 0);
  CHECK_THROWS_AS(percap::embedding_lookup(table, {2}), percap::IndexError);
  CHECK_THROWS_AS(percap::embedding_lookup(table, {-1}), percap::IndexError);
}

TEST_CASE("embedding_lookup duplicate ids accumulate") {
  D table = D::from_data({3, 2}, {0, 0, 0, 0, 0, 0});
  table.set_requires_grad(true);
  D w = D::from_data({2, 2}, {1, 1, 2, 2});
  Tape<double> tape;
  TapeScope<double> scope(tape);
  D out = percap::embedding_lookup(table, {0, 0});
  D loss = percap::sum(percap::mul(out, w));
  tape.backward(loss);
  CHECK(table.grad()[0] == 3);
  CHECK(table.grad()[1] == 3);
  CHECK(table.grad()[2] == 0);
}

TEST_CASE("embedding_lookup gradient") {
  Rng rng(19);
  D table = rand_tensor({5, 3}, rng);
  D w = rand_tensor({4, 3}, rng);
  std::vector<int> ids{0, 2, 2, 4};
  auto loss = [&]() { return percap::sum(percap::mul(percap::embedding_lookup(table, ids), w)); };
  CHECK(percap::grad_check_params<double>(loss, {table}).pass);
}

TEST_CASE("backward basics") {
  Rng rng(23);
  D x = rand_tensor({3, 4}, rng);
  x.set_requires_grad(true);
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    D loss = percap::sum(x);
    tape.backward(loss);
  }
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(x.grad()[i] == 1.0);

  D a = D::from_data({3}, {1, 2, 3}).set_requires_grad(true);
  D b = D::from_data({3}, {4, 5, 6});
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    D loss = percap::dot(a, b);
    tape.backward(loss);
  }
  for (std::size_t i = 0; i < 3; ++i) CHECK(a.grad()[i] == b.data()[i]);
}

TEST_CASE("backward rejects non-scalar loss") {
  D x = D::from_data({2}, {1, 2}).set_requires_grad(true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  D y = percap::scale(x, 2.0);
  CHECK_THROWS_AS(tape.backward(y), percap::ContractError);
}

TEST_CASE("repeated backward accumulates") {
  D x = D::from_data({2}, {1, 2}).set_requires_grad(true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  D loss = percap::sum(percap::mul(x, x));
  tape.backward(loss);
  CHECK(x.grad()[0] == 2.0);
  tape.backward(loss);
  CHECK(x.grad()[0] == 4.0);
}

TEST_CASE("backward linear in the loss") {
  Rng rng(29);
  D x0 = rand_tensor({4}, rng);

  auto run = [&](bool joint) {
    D x = D::from_data({4}, std::vector<double>(x0.data(), x0.data() + 4));
    x.set_requires_grad(true);
    Tape<double> tape;
    TapeScope<double> scope(tape);
    D l1 = percap::sum(percap::mul(x, x));
    D l2 = percap::sum(percap::tanh(x));
    if (joint) {
      tape.backward(percap::add(l1, l2));
    } else {
      tape.backward(l1);
      tape.backward(l2);
    }
    return std::vector<double>(x.grad().begin(), x.grad().end());
  };
  auto ga = run(true);
  auto gb = run(false);
  for (std::size_t i = 0; i < 4; ++i) CHECK(ga[i] == gb[i]);
}

TEST_CASE("three-layer MLP parameter gradients") {
  Rng rng(31);
  D x = rand_tensor({2, 6}, rng);
  D w1 = rand_tensor({6, 5}, rng), b1 = rand_tensor({5}, rng);
  D w2 = rand_tensor({5, 4}, rng), b2 = rand_tensor({4}, rng);
  D w3 = rand_tensor({4, 3}, rng), b3 = rand_tensor({3}, rng);
  std::vector<int> gold{0, 2};
  auto loss = [&]() {
    D h1 = percap::relu(percap::add_bias(percap::matmul(x, w1), b1));
    D h2 = percap::tanh(percap::add_bias(percap::matmul(h1, w2), b2));
    D logits = percap::add_bias(percap::matmul(h2, w3), b3);
    D lp = percap::log_softmax(logits, 1);
    return percap::scale(percap::sum(percap::pick(lp, gold)), -0.5);
  };
  auto res = percap::grad_check_params<double>(loss, {x, w1, b1, w2, b2, w3, b3});
  CHECK(res.pass);
  CHECK(res.max_rel_err <= 1e-4);
}

TEST_CASE("grad_check quadratic and negative control") {
  Rng rng(37);
  D x = rand_tensor({6}, rng);
  auto quad = [](D v) { return percap::scale(percap::sum(percap::mul(v, v)), 0.5); };
  auto res = percap::grad_check<double>(quad, x);
  CHECK(res.pass);
  CHECK(res.max_rel_err < 1e-7);

  // forward 2x but a backward rule that claims 3: must be flagged
  auto wrong = [](D v) {
    D out = percap::Tensor<double>::zeros(v.shape());
    for (std::size_t i = 0; i < v.size(); ++i) out.data()[i] = 2.0 * v.data()[i];
    if (Tape<double>::active() && v.requires_grad()) {
      percap::detail::mark_output<double>(out, {v}, [v, out]() mutable {
        const double* g = out.grad_data();
        double* gv = v.grad_data();
        for (std::size_t i = 0; i < v.size(); ++i) gv[i] += 3.0 * g[i];
      });
    }
    return percap::sum(out);
  };
  auto bad = percap::grad_check<double>(wrong, x);
  CHECK(!bad.pass);
  CHECK(bad.max_rel_err > 0.1);
}

TEST_CASE("optimizer sgd and adam") {
  D w = D::from_data({1}, {1.0}).set_requires_grad(true);
  percap::OptimizerConfig<double> cfg;
  cfg.kind = percap::OptKind::sgd;
  cfg.lr = 0.1;
  percap::Optimizer<double> opt({w}, cfg);
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    D loss = percap::mul(w, w);
    tape.backward(loss);
  }
  opt.step();
  CHECK(w.data()[0] == doctest::Approx(0.8));

  D w2 = D::from_data({1}, {1.0}).set_requires_grad(true);
  percap::OptimizerConfig<double> acfg;
  acfg.kind = percap::OptKind::adam;
  acfg.lr = 0.05;
  percap::Optimizer<double> aopt({w2}, acfg);
  int steps = 0;
  for (; steps < 500; ++steps) {
    aopt.zero_grad();
    Tape<double> tape;
    TapeScope<double> scope(tape);
    D loss = percap::mul(w2, w2);
    tape.backward(loss);
    aopt.step();
    if (std::abs(w2.data()[0]) < 1e-3) break;
  }
  CHECK(std::abs(w2.data()[0]) < 1e-3);
  CHECK(steps < 500);
}

TEST_CASE("optimizer clip and nan abort") {
  D w = D::from_data({2}, {0.0, 0.0}).set_requires_grad(true);
  w.ensure_grad();
  w.grad_data()[0] = 6.0;
  w.grad_data()[1] = 8.0;  // norm 10
  percap::OptimizerConfig<double> cfg;
  cfg.kind = percap::OptKind::sgd;
  cfg.lr = 1.0;
  cfg.clip = 1.0;
  percap::Optimizer<double> opt({w}, cfg);
  opt.step();
  double applied = std::hypot(w.data()[0], w.data()[1]);
  CHECK(applied == doctest::Approx(1.0));

  D v = D::from_data({1}, {0.0}).set_requires_grad(true);
  v.ensure_grad();
  v.grad_data()[0] = std::nan("");
  percap::Optimizer<double> opt2({v}, cfg);
  CHECK_THROWS_AS(opt2.step(), percap::ContractError);
}

TEST_CASE("optimizer skips frozen parameters") {
  D a = D::from_data({1}, {1.0}).set_requires_grad(true);
  D b = D::from_data({1}, {1.0}).set_requires_grad(true);
  percap::OptimizerConfig<double> cfg;
  cfg.kind = percap::OptKind::sgd;
  cfg.lr = 0.1;
  percap::Optimizer<double> opt({a, b}, cfg);
  a.ensure_grad();
  a.grad_data()[0] = 1.0;
  b.ensure_grad();
  b.grad_data()[0] = 1.0;
  b.set_requires_grad(false);
  opt.step();
  CHECK(a.data()[0] == doctest::Approx(0.9));
  CHECK(b.data()[0] == doctest::Approx(1.0));
}

TEST_CASE("kernel sweep over random shapes") {
  Rng rng(41);
  int cases = 0;
  for (int rep = 0; rep < 4; ++rep) {
    std::size_t m = 2 + rng.index(3), k = 2 + rng.index(3), n = 2 + rng.index(3);

    {
      D a = rand_tensor({m, k}, rng), b = rand_tensor({k, n}, rng), w = rand_tensor({m, n}, rng);
      auto loss = [&]() { return percap::sum(percap::mul(percap::matmul(a, b), w)); };
      CHECK(percap::grad_check_params<double>(loss, {a, b}).pass);
      ++cases;
    }
    {
      D a = rand_tensor({m, n}, rng), b = rand_tensor({m, n}, rng);
      auto loss = [&]() { return percap::sum(percap::mul(percap::add(a, b), b)); };
      CHECK(percap::grad_check_params<double>(loss, {a, b}).pass);
      ++cases;
    }
    {
      D a = rand_tensor({m, n}, rng), b = rand_tensor({m, n}, rng);
      auto loss = [&]() { return percap::sum(percap::mul(a, b)); };
      CHECK(percap::grad_check_params<double>(loss, {a, b}).pass);
      ++cases;
    }
    {
      D a = rand_tensor({m, n}, rng), w = rand_tensor({m, n}, rng);
      auto loss = [&]() { return percap::sum(percap::mul(percap::relu(a), w)); };
      CHECK(percap::grad_check_params<double>(loss, {a}).pass);
      ++cases;
    }
    {
      D a = rand_tensor({m, n}, rng), w = rand_tensor({m, n}, rng);
      auto loss = [&]() { return percap::sum(percap::mul(percap::tanh(a), w)); };
      CHECK(percap::grad_check_params<double>(loss, {a}).pass);
      ++cases;
    }
    {
      D a = rand_tensor({m, n}, rng), w = rand_tensor({m, n}, rng);
      auto loss = [&]() { return percap::sum(percap::mul(percap::sigmoid(a), w)); };
      CHECK(percap::grad_check_params<double>(loss, {a}).pass);
      ++cases;
    }
    {
      D a = rand_tensor({m, n}, rng), w = rand_tensor({m, n}, rng);
      auto loss = [&]() { return percap::sum(percap::mul(percap::softmax(a, rep % 2), w)); };
      CHECK(percap::grad_check_params<double>(loss, {a}).pass);
      ++cases;
    }
    {
      D a = rand_tensor({m, n}, rng), w = rand_tensor({m, n}, rng);
      auto loss = [&]() { return percap::sum(percap::mul(percap::log_softmax(a, rep % 2), w)); };
      CHECK(percap::grad_check_params<double>(loss, {a}).pass);
      ++cases;
    }
    {
      D a = rand_tensor({m, n}, rng), g = rand_tensor({n}, rng, 0.5, 1.5),
        b = rand_tensor({n}, rng), w = rand_tensor({m, n}, rng);
      auto loss = [&]() { return percap::sum(percap::mul(percap::layer_norm(a, g, b), w)); };
      CHECK(percap::grad_check_params<double>(loss, {a, g, b}).pass);
      ++cases;
    }
    {
      D t = rand_tensor({m + 2, n}, rng), w = rand_tensor({3, n}, rng);
      std::vector<int> ids{0, static_cast<int>(m), static_cast<int>(m + 1)};
      auto loss = [&]() {
        return percap::sum(percap::mul(percap::embedding_lookup(t, ids), w));
      };
      CHECK(percap::grad_check_params<double>(loss, {t}).pass);
      ++cases;
    }
    {
      D a = rand_tensor({m, n}, rng), b = rand_tensor({m, n}, rng), w = rand_tensor({2 * m, n}, rng);
      auto loss = [&]() {
        return percap::sum(percap::mul(percap::concat<double>({a, b}, 0), w));
      };
      CHECK(percap::grad_check_params<double>(loss, {a, b}).pass);
      ++cases;
    }
    {
      D a = rand_tensor({m, n}, rng);
      auto loss = [&]() { return percap::mean(percap::mul(a, a)); };
      CHECK(percap::grad_check_params<double>(loss, {a}).pass);
      ++cases;
    }
    {
      D a = rand_tensor({m, n}, rng), w = rand_tensor({n, m}, rng);
      auto loss = [&]() { return percap::sum(percap::mul(percap::transpose(a), w)); };
      CHECK(percap::grad_check_params<double>(loss, {a}).pass);
      ++cases;
    }
    {
      D a = rand_tensor({m + 2, n}, rng), w = rand_tensor({2, n}, rng);
      auto loss = [&]() {
        return percap::sum(percap::mul(percap::slice(a, 0, 1, 3), w));
      };
      CHECK(percap::grad_check_params<double>(loss, {a}).pass);
      ++cases;
    }
    {
      D a = rand_tensor({m, n}, rng), b = rand_tensor({n}, rng), w = rand_tensor({m, n}, rng);
      auto loss = [&]() { return percap::sum(percap::mul(percap::add_bias(a, b), w)); };
      CHECK(percap::grad_check_params<double>(loss, {a, b}).pass);
      ++cases;
    }
    {
      D a = rand_tensor({m, n}, rng), w = rand_tensor({m * n}, rng);
      auto loss = [&]() {
        return percap::sum(percap::mul(percap::reshape(a, {m * n}), w));
      };
      CHECK(percap::grad_check_params<double>(loss, {a}).pass);
      ++cases;
    }
    {
      D a = rand_tensor({m, n}, rng), w = rand_tensor({n}, rng);
      auto loss = [&]() { return percap::sum(percap::mul(percap::sum_axis(a, 0), w)); };
      CHECK(percap::grad_check_params<double>(loss, {a}).pass);
      ++cases;
    }
    {
      D a = rand_tensor({m, n}, rng), w = rand_tensor({m}, rng);
      auto loss = [&]() { return percap::sum(percap::mul(percap::mean_axis(a, 1), w)); };
      CHECK(percap::grad_check_params<double>(loss, {a}).pass);
      ++cases;
    }
    {
      D a = rand_tensor({m, n}, rng);
      std::vector<int> ids(m);
      for (std::size_t i = 0; i < m; ++i) ids[i] = static_cast<int>(rng.index(n));
      auto loss = [&]() { return percap::sum(percap::pick(a, ids)); };
      CHECK(percap::grad_check_params<double>(loss, {a}).pass);
      ++cases;
    }
    {
      D a = rand_tensor({n}, rng), b = rand_tensor({n}, rng);
      auto loss = [&]() { return percap::dot(a, b); };
      CHECK(percap::grad_check_params<double>(loss, {a, b}).pass);
      ++cases;
    }
    {
      D r0 = rand_tensor({n}, rng), r1 = rand_tensor({n}, rng), w = rand_tensor({2, n}, rng);
      auto loss = [&]() {
        return percap::sum(percap::mul(percap::stack_rows<double>({r0, r1}), w));
      };
      CHECK(percap::grad_check_params<double>(loss, {r0, r1}).pass);
      ++cases;
    }
    {
      D a = rand_tensor({m, n}, rng), b = rand_tensor({m, n}, rng);
      auto loss = [&]() { return percap::sum(percap::mul(percap::sub(a, b), b)); };
      CHECK(percap::grad_check_params<double>(loss, {a, b}).pass);
      ++cases;
    }
  }
  CHECK(cases >= 20);
}

TEST_CASE("forward op shapes and values") {
  D a = D::from_data({2, 2}, {1, 2, 3, 4});
  D b = D::from_data({2, 2}, {10, 20, 30, 40});
  D s = percap::add(a, b);
  CHECK(s.at(1, 1) == 44);
  D d = percap::sub(b, a);
  CHECK(d.at(0, 0) == 9);
  D m = percap::mul(a, b);
  CHECK(m.at(0, 1) == 40);
  D sc = percap::scale(a, 3.0);
  CHECK(sc.at(1, 0) == 9);

  D bias = D::from_data({2}, {100, 200});
  D ab = percap::add_bias(a, bias);
  CHECK(ab.at(0, 0) == 101);
  CHECK(ab.at(1, 1) == 204);

  D t = percap::transpose(a);
  CHECK(t.at(0, 1) == 3);

  D cat0 = percap::concat<double>({a, b}, 0);
  CHECK(cat0.shape() == percap::Shape{4, 2});
  CHECK(cat0.at(2, 0) == 10);
  D cat1 = percap::concat<double>({a, b}, 1);
  CHECK(cat1.shape() == percap::Shape{2, 4});
  CHECK(cat1.at(0, 2) == 10);

  D sl = percap::slice(cat0, 0, 1, 3);
  CHECK(sl.shape() == percap::Shape{2, 2});
  CHECK(sl.at(0, 0) == 3);
  CHECK(sl.at(1, 0) == 10);

  D sx = percap::sum_axis(a, 0);
  CHECK(sx.at(0) == 4);
  CHECK(sx.at(1) == 6);
  D mx = percap::mean_axis(a, 1);
  CHECK(mx.at(0) == doctest::Approx(1.5));
  CHECK(mx.at(1) == doctest::Approx(3.5));

  CHECK(percap::sum(a).item() == 10);
  CHECK(percap::mean(a).item() == doctest::Approx(2.5));

  D p = percap::pick(a, {1, 0});
  CHECK(p.at(0) == 2);
  CHECK(p.at(1) == 3);
}

TEST_CASE("seeded init is bitwise reproducible") {
  auto make = [](std::uint64_t seed) {
    Rng rng(seed);
    auto w = percap::init_matrix<float>(7, 5, rng);
    auto e = percap::init_embedding<float>(6, 4, rng);
    std::vector<float> all(w.data(), w.data() + w.size());
    all.insert(all.end(), e.data(), e.data() + e.size());
    return all;
  };
  auto a = make(123), b = make(123), c = make(124);
  CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
  CHECK(std::memcmp(a.data(), c.data(), a.size() * sizeof(float)) != 0);

  auto mat = [](std::uint64_t seed) {
    Rng rng(seed);
    auto w = percap::init_matrix<float>(4, 4, rng);
    double bound = 1.0 / 2.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      REQUIRE(w.data()[i] >= -bound);
      REQUIRE(w.data()[i] <= bound);
    }
    return w;
  };
  mat(5);
}

TEST_CASE("seeded training trajectory is bitwise reproducible") {
  auto run = [](std::uint64_t seed) {
    Rng rng(seed);
    using F = Tensor<float>;
    F x = F::zeros({4, 3});
    for (std::size_t i = 0; i < x.size(); ++i)
      x.data()[i] = static_cast<float>(rng.uniform(-1, 1));
    F w = percap::init_matrix<float>(3, 2, rng).set_requires_grad(true);
    F b = percap::init_bias<float>(2).set_requires_grad(true);
    percap::OptimizerConfig<float> cfg;
    cfg.kind = percap::OptKind::adam;
    cfg.lr = 0.01f;
    percap::Optimizer<float> opt({w, b}, cfg);
    std::vector<int> gold{0, 1, 0, 1};
    for (int step = 0; step < 5; ++step) {
      opt.zero_grad();
      Tape<float> tape;
      TapeScope<float> scope(tape);
      F lp = percap::log_softmax(percap::add_bias(percap::matmul(x, w), b), 1);
      F loss = percap::scale(percap::sum(percap::pick(lp, gold)), -0.25f);
      tape.backward(loss);
      opt.step();
    }
    std::vector<float> out(w.data(), w.data() + w.size());
    out.insert(out.end(), b.data(), b.data() + b.size());
    return out;
  };
  auto a = run(9), b = run(9);
  CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
}
