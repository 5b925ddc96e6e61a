// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "test_util.hpp"
#include "unlearn/gradcheck.hpp"
#include "unlearn/ops.hpp"
#include "unlearn/optim.hpp"
#include "unlearn/rng.hpp"
#include "unlearn/tape.hpp"
#include "unlearn/tensor.hpp"

using namespace unlearn;
using namespace unlearn::ad;
using testutil::rand_tensor;
using testutil::randn_tensor;

namespace {

std::vector<double> vec(const Tensor& t) {
  return {t.data().begin(), t.data().end()};
}

}  // namespace

TEST_CASE("tensor invariants") {
  CHECK_THROWS(Tensor::from({2, 2}, {1.0, 2.0, 3.0}));
  CHECK_THROWS(Tensor::from({0}, {}));
  CHECK_THROWS(Tensor::from({2}, {1.0, std::nan("")}));
  CHECK_THROWS(Tensor::from({1}, {INFINITY}));
  Tensor t = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.numel() == 6);
  CHECK(t.shape() == Shape{2, 3});
}

TEST_CASE("relu and sign basic definitions") {
  Tensor x = Tensor::from({3}, {-1.0, 0.0, 2.0});
  CHECK(vec(relu(x)) == std::vector<double>{0.0, 0.0, 2.0});

  Tensor s = Tensor::from({3}, {-3.0, 0.0, 5.0});
  CHECK(vec(sign(s)) == std::vector<double>{-1.0, 0.0, 1.0});
}

TEST_CASE("clamp to band around a reference signal") {
  Tensor x = Tensor::from({2}, {0.2, 1.7});
  Tensor center = Tensor::from({2}, {0.0, 1.0});
  Tensor lo = Tensor::from({2}, {-0.5, 0.5});
  Tensor hi = Tensor::from({2}, {0.5, 1.5});
  CHECK(vec(clamp(x, lo, hi)) == std::vector<double>{0.2, 1.5});
  CHECK(vec(clamp_scalar(Tensor::from({3}, {-2.0, 0.3, 9.0}), -1.0, 1.0)) ==
        std::vector<double>{-1.0, 0.3, 1.0});
  CHECK_THROWS(clamp(x, hi, lo));
  (void)center;
}

TEST_CASE("conv1d identity and constant kernels") {
  Tensor x = Tensor::from({1, 1, 3}, {1.0, 2.0, 3.0});
  Tensor k1 = Tensor::from({1, 1, 1}, {1.0});
  Tensor b0 = Tensor::zeros({1});
  CHECK(vec(conv1d(x, k1, b0, 1, 0)) == std::vector<double>{1.0, 2.0, 3.0});

  Tensor ones = Tensor::from({1, 1, 4}, {1.0, 1.0, 1.0, 1.0});
  Tensor k2 = Tensor::from({1, 1, 2}, {1.0, 1.0});
  CHECK(vec(conv1d(ones, k2, b0, 1, 0)) == std::vector<double>{2.0, 2.0, 2.0});

  // contract errors
  Tensor kbad = Tensor::from({1, 2, 1}, {1.0, 1.0});
  CHECK_THROWS(conv1d(x, kbad, b0, 1, 0));
  Tensor kwide = Tensor::from({1, 1, 5}, {1, 1, 1, 1, 1});
  CHECK_THROWS(conv1d(x, kwide, b0, 1, 0));  // out_len < 1
}

TEST_CASE("conv1d gradient matches central finite differences") {
  Rng rng(101);
  Tensor x = randn_tensor({2, 3, 8}, rng);
  Tensor w = randn_tensor({4, 3, 3}, rng, 0.0, 0.5);
  Tensor b = randn_tensor({4}, rng, 0.0, 0.1);

  auto wrt_x = [&](const Tensor& p, Tape* tape) {
    Tensor y = conv1d(p, w, b, 2, 1, tape);
    Tensor pooled = global_avg_pool(y, tape);
    // collapse to scalar with a fixed weighting so every output matters
    Tensor flat = reshape(pooled, {1, pooled.numel()}, tape);
    std::vector<double> wv(pooled.numel());
    for (std::size_t i = 0; i < wv.size(); ++i) wv[i] = 0.3 + 0.1 * static_cast<double>(i);
    Tensor mix = Tensor::from({1, pooled.numel()}, std::move(wv));
    // dot product via linear with zero bias
    return reshape(linear(flat, mix, Tensor::zeros({1}), tape), {1}, tape);
  };
  auto res = finite_diff_gradcheck(wrt_x, x);
  CHECK(res.checked == x.numel());
  CHECK(res.max_rel_err < 1e-6);

  auto wrt_w = [&](const Tensor& p, Tape* tape) {
    Tensor y = conv1d(x, p, b, 1, 0, tape);
    Tensor pooled = global_avg_pool(y, tape);
    Tensor flat = reshape(pooled, {1, pooled.numel()}, tape);
    Tensor mix = Tensor::full({1, pooled.numel()}, 0.7);
    return reshape(linear(flat, mix, Tensor::zeros({1}), tape), {1}, tape);
  };
  CHECK(finite_diff_gradcheck(wrt_w, w).max_rel_err < 1e-6);
}

TEST_CASE("batch_norm1d basic behavior") {
  auto state = BatchNormState::init(2);
  Tensor gamma = Tensor::full({2}, 1.0);
  Tensor beta = Tensor::zeros({2});

  SUBCASE("constant input normalizes to zero") {
    Tensor x = Tensor::full({2, 2, 4}, 3.5);
    Tensor y = batch_norm1d(x, gamma, beta, state, 1e-5, true);
    for (double v : y.data()) CHECK(v == doctest::Approx(0.0).epsilon(1e-12));
  }
  SUBCASE("gamma zero collapses to beta") {
    Rng rng(7);
    Tensor x = randn_tensor({2, 2, 4}, rng);
    Tensor g0 = Tensor::zeros({2});
    Tensor b5 = Tensor::full({2}, 5.0);
    Tensor y = batch_norm1d(x, g0, b5, state, 1e-5, true);
    for (double v : y.data()) CHECK(v == doctest::Approx(5.0));
  }
  SUBCASE("train mode output statistics match gamma/beta") {
    Rng rng(42);
    Tensor x = randn_tensor({4, 2, 50}, rng, 1.5, 2.0);
    Tensor g = Tensor::from({2}, {0.8, 1.3});
    Tensor b = Tensor::from({2}, {-0.4, 2.0});
    Tensor y = batch_norm1d(x, g, b, state, 1e-8, true);
    const std::size_t B = 4, C = 2, L = 50, n = B * L;
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0.0, s2 = 0.0;
      for (std::size_t bi = 0; bi < B; ++bi)
        for (std::size_t l = 0; l < L; ++l) {
          double v = y.data()[(bi * C + c) * L + l];
          s += v;
          s2 += v * v;
        }
      double mean = s / n;
      double sd = std::sqrt(s2 / n - mean * mean);
      CHECK(mean == doctest::Approx(b.data()[c]).epsilon(1e-6));
      CHECK(sd == doctest::Approx(std::abs(g.data()[c])).epsilon(1e-6));
    }
  }
  SUBCASE("degenerate train batch rejected") {
    Tensor x = Tensor::full({1, 2, 1}, 1.0);
    CHECK_THROWS(batch_norm1d(x, gamma, beta, state, 1e-5, true));
  }
}

TEST_CASE("batch_norm1d gradcheck (train and eval)") {
  Rng rng(55);
  Tensor x = randn_tensor({3, 2, 5}, rng);
  Tensor g = Tensor::from({2}, {0.9, 1.2});
  Tensor b = Tensor::from({2}, {0.1, -0.2});
  auto run = [&](bool train) {
    auto state = BatchNormState::init(2);
    state.running_mean = {0.2, -0.1};
    state.running_var = {1.3, 0.7};
    auto wrt_x = [&](const Tensor& p, Tape* tape) {
      auto st = state;  // keep eval stats fixed; discard train-mode updates
      Tensor y = batch_norm1d(p, g, b, st, 1e-5, train, tape);
      Tensor pooled = global_avg_pool(y, tape);
      Tensor flat = reshape(pooled, {1, pooled.numel()}, tape);
      std::vector<double> wv(pooled.numel());
      for (std::size_t i = 0; i < wv.size(); ++i) wv[i] = 0.2 + 0.05 * static_cast<double>(i);
      return reshape(linear(flat, Tensor::from({1, pooled.numel()}, std::move(wv)),
                            Tensor::zeros({1}), tape),
                     {1}, tape);
    };
    CHECK(finite_diff_gradcheck(wrt_x, x).max_rel_err < 1e-6);
    auto wrt_gamma = [&](const Tensor& p, Tape* tape) {
      auto st = state;
      Tensor y = batch_norm1d(x, p, b, st, 1e-5, train, tape);
      Tensor pooled = global_avg_pool(y, tape);
      Tensor flat = reshape(pooled, {1, pooled.numel()}, tape);
      return reshape(linear(flat, Tensor::full({1, pooled.numel()}, 0.5),
                            Tensor::zeros({1}), tape),
                     {1}, tape);
    };
    CHECK(finite_diff_gradcheck(wrt_gamma, g).max_rel_err < 1e-6);
  };
  run(true);
  run(false);
}

TEST_CASE("softmax_cross_entropy values and gradient") {
  SUBCASE("uniform logits give log C") {
    Tensor logits = Tensor::zeros({1, 5});
    Tensor loss = softmax_cross_entropy(logits, {2});
    CHECK(loss.item() == doctest::Approx(std::log(5.0)).epsilon(1e-12));
  }
  SUBCASE("saturated true class gives ~0") {
    Tensor logits = Tensor::from({1, 4}, {0.0, 50.0, 0.0, 0.0});
    CHECK(softmax_cross_entropy(logits, {1}).item() < 1e-9);
  }
  SUBCASE("label out of range rejected") {
    Tensor logits = Tensor::zeros({1, 3});
    CHECK_THROWS(softmax_cross_entropy(logits, {3}));
    CHECK_THROWS(softmax_cross_entropy(logits, {-1}));
  }
  SUBCASE("gradient equals (softmax - onehot)/batch and matches FD") {
    Rng rng(77);
    Tensor logits = randn_tensor({4, 3}, rng);
    std::vector<int> labels{0, 2, 1, 1};

    Tensor x = logits.detached();
    x.set_requires_grad(true);
    Tape tape;
    Tensor loss = softmax_cross_entropy(x, labels, &tape);
    tape.backward(loss);
    Tensor probs = softmax(logits);
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t c = 0; c < 3; ++c) {
        double expect =
            (probs.data()[b * 3 + c] - (labels[b] == static_cast<int>(c) ? 1.0 : 0.0)) /
            4.0;
        CHECK(x.grad()[b * 3 + c] == doctest::Approx(expect).epsilon(1e-12));
      }

    auto fn = [&](const Tensor& p, Tape* t) {
      return softmax_cross_entropy(p, labels, t);
    };
    CHECK(finite_diff_gradcheck(fn, logits).max_rel_err < 1e-6);
  }
}

TEST_CASE("kl_divergence values and properties") {
  Tensor t = Tensor::from({1, 2}, {0.3, 0.7});
  CHECK(kl_divergence(t, t).item() == doctest::Approx(0.0));

  Tensor t2 = Tensor::from({1, 2}, {1.0, 0.0});
  Tensor s2 = Tensor::from({1, 2}, {0.5, 0.5});
  CHECK(kl_divergence(t2, s2).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  CHECK_THROWS(kl_divergence(Tensor::from({1, 2}, {0.6, 0.6}), s2));

  Rng rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor a = softmax(randn_tensor({3, 4}, rng, 0.0, 2.0));
    Tensor b = softmax(randn_tensor({3, 4}, rng, 0.0, 2.0));
    CHECK(kl_divergence(a, b).item() >= 0.0);
  }
}

TEST_CASE("softmax rows sum to one") {
  Rng rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor p = softmax(randn_tensor({5, 7}, rng, 0.0, 5.0));
    for (std::size_t b = 0; b < 5; ++b) {
      double s = 0.0;
      for (std::size_t c = 0; c < 7; ++c) s += p.data()[b * 7 + c];
      CHECK(std::abs(s - 1.0) <= 1e-9);
    }
  }
}

TEST_CASE("backward basics") {
  SUBCASE("y = 2x") {
    Tensor x = Tensor::scalar(3.0);
    x.set_requires_grad(true);
    Tape tape;
    Tensor y = scalar_mul(x, 2.0, &tape);
    tape.backward(y);
    CHECK(x.grad()[0] == doctest::Approx(2.0));
  }
  SUBCASE("unused parameter keeps zero gradient") {
    Tensor x = Tensor::scalar(1.0);
    Tensor p = Tensor::scalar(4.0);
    x.set_requires_grad(true);
    p.set_requires_grad(true);
    p.ensure_grad();
    Tape tape;
    Tensor y = scalar_mul(x, 3.0, &tape);
    tape.backward(y);
    CHECK(p.grad()[0] == 0.0);
  }
  SUBCASE("backward on detached value throws") {
    Tensor x = Tensor::scalar(1.0);
    Tape tape;
    CHECK_THROWS_WITH_AS(tape.backward(x), doctest::Contains("detached"),
                         std::runtime_error);
  }
  SUBCASE("repeated backward without reset throws") {
    Tensor x = Tensor::scalar(1.0);
    x.set_requires_grad(true);
    Tape tape;
    Tensor y = scalar_mul(x, 2.0, &tape);
    tape.backward(y);
    CHECK_THROWS_WITH_AS(tape.backward(y), doctest::Contains("repeated backward"),
                         std::runtime_error);
    tape.reset();
    CHECK_NOTHROW(tape.backward(y));
  }
}

TEST_CASE("three layer composite passes full gradcheck") {
  Rng rng(2024);
  Tensor x = randn_tensor({2, 2, 10}, rng);
  Tensor w = randn_tensor({3, 2, 3}, rng, 0.0, 0.6);
  Tensor b = randn_tensor({3}, rng, 0.0, 0.1);
  Tensor hw = randn_tensor({2, 3}, rng, 0.0, 0.6);
  Tensor hb = Tensor::zeros({2});
  std::vector<int> labels{0, 1};

  auto model_loss = [&](const Tensor& xin, const Tensor& win, Tape* tape) {
    Tensor h = conv1d(xin, win, b, 1, 1, tape);
    h = relu(h, tape);
    h = global_avg_pool(h, tape);
    Tensor logits = linear(h, hw, hb, tape);
    return softmax_cross_entropy(logits, labels, tape);
  };

  auto wrt_x = [&](const Tensor& p, Tape* tape) { return model_loss(p, w, tape); };
  auto rx = finite_diff_gradcheck(wrt_x, x);
  CHECK(rx.max_rel_err < 1e-5);

  auto wrt_w = [&](const Tensor& p, Tape* tape) { return model_loss(x, p, tape); };
  auto rw = finite_diff_gradcheck(wrt_w, w);
  CHECK(rw.max_rel_err < 1e-5);
}

TEST_CASE("gradient accumulation is linear") {
  Rng rng(8);
  Tensor base = randn_tensor({1, 4}, rng);
  std::vector<int> labels{1};
  const double a = 2.5, bcoef = -1.25;

  auto grad_of = [&](auto&& lossfn) {
    Tensor x = base.detached();
    x.set_requires_grad(true);
    Tape tape;
    tape.backward(lossfn(x, &tape));
    return std::vector<double>(x.grad().begin(), x.grad().end());
  };

  auto l1 = [&](const Tensor& x, Tape* t) { return softmax_cross_entropy(x, labels, t); };
  auto l2 = [&](const Tensor& x, Tape* t) {
    return reshape(linear(x, Tensor::full({1, 4}, 0.3), Tensor::zeros({1}), t), {1}, t);
  };
  auto combined = [&](const Tensor& x, Tape* t) {
    return add(scalar_mul(l1(x, t), a, t), scalar_mul(l2(x, t), bcoef, t), t);
  };

  auto g1 = grad_of(l1);
  auto g2 = grad_of(l2);
  auto gc = grad_of(combined);
  for (std::size_t i = 0; i < gc.size(); ++i)
    CHECK(gc[i] == doctest::Approx(a * g1[i] + bcoef * g2[i]).epsilon(1e-12));
}

TEST_CASE("tape replay reproduces outputs bit-exactly") {
  Rng rng(99);
  Tensor x = randn_tensor({2, 2, 6}, rng);
  x.set_requires_grad(true);
  Tensor w = randn_tensor({2, 2, 3}, rng);
  w.set_requires_grad(true);
  Tape tape;
  Tensor h = relu(conv1d(x, w, Tensor::zeros({2}), 1, 1, &tape), &tape);
  Tensor out = global_avg_pool(h, &tape);
  std::vector<double> before = vec(out);
  tape.replay_forward();
  CHECK(vec(out) == before);
  CHECK(vec(h) == vec(h));  // still finite/alive
}

TEST_CASE("same seed gives bit-identical forward and gradients") {
  auto run = [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor x = randn_tensor({2, 3}, rng);
    x.set_requires_grad(true);
    Tape tape;
    Tensor loss = softmax_cross_entropy(x, {0, 2}, &tape);
    tape.backward(loss);
    return std::make_pair(loss.item(), std::vector<double>(x.grad().begin(), x.grad().end()));
  };
  auto [l1, g1] = run(1234);
  auto [l2, g2] = run(1234);
  CHECK(l1 == l2);
  CHECK(g1 == g2);
}

TEST_CASE("sgd optimizer contract") {
  SUBCASE("lr zero leaves parameters unchanged") {
    Tensor p = Tensor::from({2}, {1.0, -2.0});
    p.set_requires_grad(true);
    p.ensure_grad();
    p.grad()[0] = 0.7;
    SgdOptimizer opt({p}, 0.0, 0.0);
    opt.step();
    CHECK(vec(p) == std::vector<double>{1.0, -2.0});
  }
  SUBCASE("single plain step") {
    Tensor p = Tensor::scalar(1.0);
    p.set_requires_grad(true);
    p.ensure_grad();
    p.grad()[0] = 0.5;
    SgdOptimizer opt({p}, 0.1, 0.0);
    opt.step();
    CHECK(p.item() == doctest::Approx(0.95).epsilon(1e-15));
  }
  SUBCASE("missing gradient rejected") {
    Tensor p = Tensor::scalar(1.0);
    p.set_requires_grad(true);
    SgdOptimizer opt({p}, 0.1, 0.0);
    CHECK_THROWS(opt.step());
  }
  SUBCASE("quadratic converges") {
    Tensor p = Tensor::scalar(0.0);
    p.set_requires_grad(true);
    SgdOptimizer opt({p}, 0.1, 0.0);
    for (int i = 0; i < 200; ++i) {
      opt.zero_grad();
      // f(p) = (p-3)^2, grad = 2(p-3)
      p.grad()[0] = 2.0 * (p.item() - 3.0);
      opt.step();
    }
    CHECK(std::abs(p.item() - 3.0) < 1e-3);
  }
}

TEST_CASE("gradcheck oracle contract") {
  SUBCASE("linear function is exact") {
    Tensor x = Tensor::from({3}, {0.5, -1.0, 2.0});
    auto fn = [](const Tensor& p, Tape* t) {
      return reshape(linear(reshape(p, {1, 3}, t), Tensor::full({1, 3}, 1.5),
                            Tensor::zeros({1}), t),
                     {1}, t);
    };
    auto res = finite_diff_gradcheck(fn, x);
    CHECK(res.max_rel_err < 1e-10);
    CHECK(res.skipped_kinks == 0);
  }
  SUBCASE("relu kink coordinate is excluded") {
    Tensor x = Tensor::from({3}, {0.0, 1.0, -1.0});  // exact kink at coord 0
    auto fn = [](const Tensor& p, Tape* t) {
      Tensor r = relu(reshape(p, {1, 1, 3}, t), t);
      Tensor pooled = global_avg_pool(r, t);
      return reshape(pooled, {1}, t);
    };
    auto res = finite_diff_gradcheck(fn, x, 1e-5);
    CHECK(res.skipped_kinks == 1);
    CHECK(res.checked == 2);
    CHECK(res.max_rel_err < 1e-8);
  }
}

TEST_CASE("attention_pair_loss gradcheck and upsample/tanh primitives") {
  Rng rng(404);
  Tensor t_act = randn_tensor({2, 3, 4}, rng, 0.0, 1.0);
  Tensor s_act = randn_tensor({2, 3, 4}, rng, 0.5, 1.0);
  auto fn = [&](const Tensor& p, Tape* tape) {
    return attention_pair_loss(t_act, p, tape);
  };
  CHECK(finite_diff_gradcheck(fn, s_act).max_rel_err < 1e-6);

  auto fn_t = [&](const Tensor& p, Tape* tape) {
    return attention_pair_loss(p, s_act, tape);
  };
  CHECK(finite_diff_gradcheck(fn_t, t_act).max_rel_err < 1e-6);

  Tensor u = Tensor::from({1, 1, 2}, {1.0, 2.0});
  CHECK(vec(upsample_nearest(u, 3)) ==
        std::vector<double>{1.0, 1.0, 1.0, 2.0, 2.0, 2.0});
  auto fn_up = [&](const Tensor& p, Tape* tape) {
    Tensor y = tanh_act(upsample_nearest(p, 2, tape), tape);
    return reshape(global_avg_pool(y, tape), {1}, tape);
  };
  CHECK(finite_diff_gradcheck(fn_up, randn_tensor({1, 2, 3}, rng)).max_rel_err < 1e-7);
}

TEST_CASE("primitive_forward dispatcher") {
  Tensor x = Tensor::from({2}, {-1.0, 2.0});
  CHECK(vec(primitive_forward("relu", {x}, {})) == std::vector<double>{0.0, 2.0});
  CHECK(vec(primitive_forward("scalar_mul", {x}, {2.0})) ==
        std::vector<double>{-2.0, 4.0});
  CHECK(vec(primitive_forward("sign", {x}, {})) == std::vector<double>{-1.0, 1.0});
  CHECK_THROWS_WITH_AS(primitive_forward("conv9d", {x}, {}),
                       doctest::Contains("unknown primitive kind"),
                       std::invalid_argument);
  CHECK_THROWS(primitive_forward("add", {x, Tensor::zeros({3})}, {}));
}
