#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "lvrpo/optim.hpp"
#include "lvrpo/tensor.hpp"

using namespace lvrpo;

namespace {

Tensor<double> randn_d(std::vector<int> shape, Rng& rng, double s = 1.0) {
  return Tensor<double>::randn(std::move(shape), rng, s);
}

}  // namespace

TEST_CASE("matmul basics") {
  auto I = Tensor<float>::from({2, 2}, {1, 0, 0, 1});
  auto B = Tensor<float>::from({2, 3}, {1, 2, 3, 4, 5, 6});
  auto C = matmul<float>(I, B, nullptr);
  for (std::size_t i = 0; i < 6; ++i) CHECK(C.v()[i] == doctest::Approx(B.v()[i]));

  auto A = Tensor<float>::from({2, 2}, {1, 2, 3, 4});
  auto ones = Tensor<float>::from({2, 1}, {1, 1});
  auto r = matmul<float>(A, ones, nullptr);
  CHECK(r.v()[0] == doctest::Approx(3.0f));
  CHECK(r.v()[1] == doctest::Approx(7.0f));

  auto bad = Tensor<float>::zeros({3, 2});
  CHECK_THROWS_WITH_AS(matmul<float>(A, bad, nullptr), doctest::Contains("[2x2]"), std::runtime_error);
}

TEST_CASE("matmul gradient of sum is ones * b^T") {
  Rng rng(7);
  auto a = Tensor<double>::randn({2, 3}, rng, 1.0);
  auto b = Tensor<double>::randn({3, 4}, rng, 1.0);
  a.set_requires_grad();
  Tape<double> tape;
  auto loss = sum_all(matmul(a, b, &tape), &tape);
  tape.backward(loss);
  // d/dA sum(A*B) = ones(m,n) * B^T
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 3; ++j) {
      double expect = 0.0;
      for (int k = 0; k < 4; ++k) expect += b.at(j, k);
      CHECK((*a.grad)[static_cast<std::size_t>(i * 3 + j)] == doctest::Approx(expect));
    }
  }
}

TEST_CASE("softmax rows") {
  auto x = Tensor<float>::from({1, 3}, {0, 0, 0});
  auto p = softmax_rows<float>(x, nullptr);
  for (int j = 0; j < 3; ++j) CHECK(p.v()[static_cast<std::size_t>(j)] == doctest::Approx(1.0 / 3.0));

  auto big = Tensor<float>::from({1, 3}, {1000, 0, 0});
  auto pb = softmax_rows<float>(big, nullptr);
  CHECK(pb.v()[0] == doctest::Approx(1.0));
  CHECK(all_finite(pb));

  auto h = Tensor<float>::from({1, 3}, {1, 2, 3});
  auto ph = softmax_rows<float>(h, nullptr);
  CHECK(ph.v()[0] == doctest::Approx(0.09003).epsilon(1e-3));
  CHECK(ph.v()[1] == doctest::Approx(0.24473).epsilon(1e-3));
  CHECK(ph.v()[2] == doctest::Approx(0.66524).epsilon(1e-3));
  float sum = ph.v()[0] + ph.v()[1] + ph.v()[2];
  CHECK(std::abs(sum - 1.0f) < 1e-6f);
}

TEST_CASE("layer_norm examples") {
  auto gain = Tensor<float>::from({2}, {1, 1});
  auto bias = Tensor<float>::from({2}, {0, 0});
  auto flat = Tensor<float>::from({1, 2}, {5, 5});
  auto out = layer_norm<float>(flat, gain, bias, nullptr);
  CHECK(out.v()[0] == doctest::Approx(0.0));
  CHECK(out.v()[1] == doctest::Approx(0.0));

  auto x = Tensor<float>::from({1, 2}, {1, 3});
  auto o2 = layer_norm<float>(x, gain, bias, nullptr);
  CHECK(o2.v()[0] == doctest::Approx(-1.0).epsilon(1e-4));
  CHECK(o2.v()[1] == doctest::Approx(1.0).epsilon(1e-4));

  auto zero_gain = Tensor<float>::from({2}, {0, 0});
  auto b = Tensor<float>::from({2}, {2.5f, -1.0f});
  auto o3 = layer_norm<float>(x, zero_gain, b, nullptr);
  CHECK(o3.v()[0] == doctest::Approx(2.5));
  CHECK(o3.v()[1] == doctest::Approx(-1.0));
}

TEST_CASE("cross_entropy examples") {
  auto uniform = Tensor<float>::zeros({3, 4});
  auto l1 = cross_entropy<float>(uniform, {0, 1, 3}, nullptr);
  CHECK(l1.item() == doctest::Approx(std::log(4.0)).epsilon(1e-6));

  auto hot = Tensor<float>::from({1, 3}, {0, 0, 50});
  CHECK(cross_entropy<float>(hot, {2}, nullptr).item() == doctest::Approx(0.0).epsilon(1e-6));

  auto l = Tensor<float>::from({1, 3}, {1, 2, 3});
  CHECK(cross_entropy<float>(l, {2}, nullptr).item() == doctest::Approx(0.40761).epsilon(1e-4));

  CHECK_THROWS_AS(cross_entropy<float>(l, {3}, nullptr), std::runtime_error);
}

TEST_CASE("gaussian_log_density examples") {
  const double half_log_2pi = 0.5 * std::log(2.0 * 3.14159265358979323846);
  auto x = Tensor<float>::from({1}, {0.5f});
  auto lp = gaussian_log_density<float>(x, x, 1.0f, nullptr);
  CHECK(lp.item() == doctest::Approx(-half_log_2pi).epsilon(1e-5));

  auto m = Tensor<float>::from({1}, {0.0f});
  auto x1 = Tensor<float>::from({1}, {2.0f});
  auto lp2 = gaussian_log_density<float>(x1, m, 2.0f, nullptr);
  CHECK(lp2.item() == doctest::Approx(-0.5 - std::log(2.0) - half_log_2pi).epsilon(1e-5));

  auto x2 = Tensor<float>::from({2}, {1.0f, 2.0f});
  auto m2 = Tensor<float>::zeros({2});
  auto lp3 = gaussian_log_density<float>(x2, m2, 1.0f, nullptr);
  CHECK(lp3.item() == doctest::Approx(-2.5 - std::log(2.0 * 3.14159265358979323846)).epsilon(1e-5));

  CHECK_THROWS_AS(gaussian_log_density<float>(x2, m2, 0.0f, nullptr), std::runtime_error);
}

TEST_CASE("backward basics and fan-out accumulation") {
  auto x = Tensor<float>::from({2, 2}, {1, 2, 3, 4});
  x.set_requires_grad();
  {
    Tape<float> tape;
    auto loss = sum_all(x, &tape);
    tape.backward(loss);
    for (float g : *x.grad) CHECK(g == doctest::Approx(1.0));
  }
  x.zero_grad();
  {
    Tape<float> tape;
    auto y = add(x, x, &tape);  // grad of x in (x + x) is 2
    auto loss = sum_all(y, &tape);
    tape.backward(loss);
    for (float g : *x.grad) CHECK(g == doctest::Approx(2.0));
  }
  x.zero_grad();
  {
    Tape<float> tape;
    auto sq = mul(x, x, &tape);
    auto loss = sum_all(sq, &tape);
    tape.backward(loss);
    CHECK((*x.grad)[2] == doctest::Approx(6.0));  // d(x^2)/dx at 3
  }
  {
    Tape<float> tape;
    auto y = add(x, x, &tape);
    CHECK_THROWS_AS(tape.backward(y), std::runtime_error);  // non-scalar loss
  }
}

TEST_CASE("finite differences validate every primitive op") {
  Rng rng(13);
  auto a = randn_d({3, 4}, rng);
  auto b = randn_d({4, 5}, rng);
  auto c = randn_d({3, 4}, rng);
  auto gain = randn_d({4}, rng, 0.5);
  auto bias = randn_d({4}, rng, 0.5);
  auto colv = randn_d({3}, rng);
  auto table = randn_d({6, 4}, rng);

  SUBCASE("matmul") {
    double err = check_gradients_fd(
        [&](Tape<double>* t) { return sum_all(mul(matmul(a, b, t), matmul(a, b, t), t), t); }, {&a, &b});
    CHECK(err < 1e-6);
  }
  SUBCASE("matmul_nt") {
    auto bt = randn_d({5, 4}, rng);
    double err = check_gradients_fd(
        [&](Tape<double>* t) { return mean_all(mul(matmul_nt(a, bt, t), matmul_nt(a, bt, t), t), t); },
        {&a, &bt});
    CHECK(err < 1e-6);
  }
  SUBCASE("add sub mul scale rowvec colvec") {
    double err = check_gradients_fd(
        [&](Tape<double>* t) {
          auto z = add(mul(a, c, t), scale(sub(a, c, t), 0.7, t), t);
          z = add_rowvec(z, gain, t);
          z = mul_colvec(z, colv, t);
          return mean_all(mul(z, z, t), t);
        },
        {&a, &c, &gain, &colv});
    CHECK(err < 1e-6);
  }
  SUBCASE("softmax + slice + concat") {
    double err = check_gradients_fd(
        [&](Tape<double>* t) {
          auto p = softmax_rows(a, t);
          auto left = slice_cols(p, 0, 2, t);
          auto right = slice_cols(p, 2, 4, t);
          auto back = concat_cols<double>({right, left}, t);
          auto top = slice_rows(back, 0, 2, t);
          auto bot = slice_rows(back, 2, 3, t);
          auto whole = concat_rows<double>({bot, top}, t);
          return mean_all(mul(whole, whole, t), t);
        },
        {&a});
    CHECK(err < 1e-5);
  }
  SUBCASE("layer_norm") {
    double err = check_gradients_fd(
        [&](Tape<double>* t) {
          auto y = layer_norm(a, gain, bias, t);
          return mean_all(mul(y, y, t), t);
        },
        {&a, &gain, &bias});
    CHECK(err < 1e-5);
  }
  SUBCASE("gelu") {
    double err = check_gradients_fd(
        [&](Tape<double>* t) { return mean_all(mul(gelu(a, t), gelu(a, t), t), t); }, {&a});
    CHECK(err < 1e-6);
  }
  SUBCASE("cross_entropy") {
    double err = check_gradients_fd(
        [&](Tape<double>* t) { return cross_entropy(a, {1, 3, 0}, t); }, {&a});
    CHECK(err < 1e-6);
  }
  SUBCASE("gaussian_log_density wrt x and mean") {
    double err = check_gradients_fd(
        [&](Tape<double>* t) { return gaussian_log_density(a, c, 0.35, t); }, {&a, &c});
    CHECK(err < 1e-6);
  }
  SUBCASE("gather_rows") {
    double err = check_gradients_fd(
        [&](Tape<double>* t) {
          auto rows = gather_rows(table, {0, 3, 3, 5}, t);
          return mean_all(mul(rows, rows, t), t);
        },
        {&table});
    CHECK(err < 1e-6);
  }
  SUBCASE("rope") {
    auto pos = std::make_shared<std::vector<int>>(std::vector<int>{0, 2, -1});
    double err = check_gradients_fd(
        [&](Tape<double>* t) {
          auto y = rope_rows(a, pos, t);
          return mean_all(mul(y, y, t), t);
        },
        {&a});
    CHECK(err < 1e-6);
  }
  SUBCASE("row_l2_normalize") {
    double err = check_gradients_fd(
        [&](Tape<double>* t) {
          auto y = row_l2_normalize(a, t);
          auto w = mul(y, c, t);
          return sum_all(w, t);
        },
        {&a});
    CHECK(err < 1e-5);
  }
  SUBCASE("exp min clamp") {
    double err = check_gradients_fd(
        [&](Tape<double>* t) {
          auto e = elem_exp(scale(a, 0.3, t), t);
          auto m = elem_min(e, c, t);
          auto cl = elem_clamp(m, -0.5, 0.5, t);
          return mean_all(mul(cl, cl, t), t);
        },
        {&a, &c});
    CHECK(err < 1e-5);
  }
  SUBCASE("mse + masked softmax") {
    auto mask = std::make_shared<std::vector<std::uint8_t>>(12, std::uint8_t(1));
    (*mask)[1] = 0;
    (*mask)[7] = 0;
    double err = check_gradients_fd(
        [&](Tape<double>* t) {
          auto p = masked_softmax_rows(a, mask, t);
          return mse_loss(p, c, t);
        },
        {&a});
    CHECK(err < 1e-5);
  }
}

TEST_CASE("check_gradients_fd calibration cases") {
  Rng rng(3);
  auto w = randn_d({4}, rng);
  // Linear function: central difference is exact up to roundoff.
  auto lin = [&](Tape<double>* t) { return sum_all(scale(w, 3.0, t), t); };
  CHECK(check_gradients_fd(lin, {&w}) < 1e-9);
  // Quadratic: central difference exact as well.
  auto quad = [&](Tape<double>* t) { return sum_all(mul(w, w, t), t); };
  CHECK(check_gradients_fd(quad, {&w}) < 1e-6);
}

TEST_CASE("adamw") {
  auto p = Tensor<float>::from({1}, {1.0f});
  p.set_requires_grad();
  auto state = OptimizerState::make({&p}, 1e-2f, 0.0f);

  SUBCASE("zero grad leaves parameter unchanged") {
    adamw_step({&p}, state);
    CHECK(p.v()[0] == doctest::Approx(1.0f));
  }
  SUBCASE("unit grad moves by about lr on the first step") {
    (*p.grad)[0] = 1.0f;
    adamw_step({&p}, state);
    CHECK(p.v()[0] == doctest::Approx(1.0f - 1e-2f).epsilon(1e-4));
    CHECK((*p.grad)[0] == 0.0f);  // grads zeroed after the step
  }
  SUBCASE("missing grad is an error") {
    auto q = Tensor<float>::from({1}, {1.0f});
    auto st = OptimizerState::make({&q}, 1e-2f, 0.0f);
    CHECK_THROWS_AS(adamw_step({&q}, st), std::runtime_error);
  }
}

TEST_CASE("clip_global_grad_norm") {
  auto p = Tensor<float>::from({2}, {0.f, 0.f});
  p.set_requires_grad();
  (*p.grad)[0] = 3.0f;
  (*p.grad)[1] = 4.0f;

  SUBCASE("under the bound: untouched") {
    CHECK(clip_global_grad_norm({&p}, 10.0) == doctest::Approx(1.0));
    CHECK((*p.grad)[0] == 3.0f);
  }
  SUBCASE("scales to the bound") {
    double s = clip_global_grad_norm({&p}, 1.0);
    CHECK(s == doctest::Approx(0.2));
    CHECK((*p.grad)[0] == doctest::Approx(0.6f));
    CHECK((*p.grad)[1] == doctest::Approx(0.8f));
  }
  SUBCASE("idempotent") {
    clip_global_grad_norm({&p}, 1.0);
    const float g0 = (*p.grad)[0], g1 = (*p.grad)[1];
    clip_global_grad_norm({&p}, 1.0);
    CHECK((*p.grad)[0] == g0);
    CHECK((*p.grad)[1] == g1);
  }
}

TEST_CASE("rng determinism and normal moments") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng n(1);
  double sum = 0, ss = 0;
  const int N = 20000;
  for (int i = 0; i < N; ++i) {
    double z = n.normal();
    sum += z;
    ss += z * z;
  }
  CHECK(std::abs(sum / N) < 0.03);
  CHECK(std::abs(ss / N - 1.0) < 0.05);
}
