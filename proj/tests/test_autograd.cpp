#include <cmath>
#include <random>

#include "doctest.h"
#include "spn/autograd.hpp"
#include "spn/gradcheck.hpp"

using namespace spn::ag;

namespace {

Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> n(0.0, sd);
  Tensor<double> t(std::move(shape));
  for (auto& x : t.data) x = n(rng);
  return t;
}

// Strict raster-past mask for a single 3x3 kernel: rows above, and left of
// the center on the center row.
Mask raster_past_mask3() {
  Mask m({1, 1, 3, 3}, std::uint8_t{0});
  for (int ky = 0; ky < 3; ++ky)
    for (int kx = 0; kx < 3; ++kx) m.data[ky * 3 + kx] = (ky < 1 || (ky == 1 && kx < 1)) ? 1 : 0;
  return m;
}

}  // namespace

TEST_CASE("conv2d_masked: 1x1 scalar product") {
  Tape<float> tape;
  auto x = tape.constant(Tensor<float>({1, 1, 1, 1}, {2.0f}));
  auto w = tape.leaf(Tensor<float>({1, 1, 1, 1}, {3.0f}));
  auto b = tape.leaf(Tensor<float>({1}, {0.0f}));
  auto y = conv2d_masked(x, w, Mask({1, 1, 1, 1}, std::uint8_t{1}), b);
  CHECK(y.item() == 6.0f);
}

TEST_CASE("conv2d_masked: all-zero mask yields the bias everywhere") {
  std::mt19937_64 rng(3);
  Tape<double> tape;
  auto x = tape.constant(random_tensor({2, 3, 4, 5}, rng));
  auto w = tape.leaf(random_tensor({2, 3, 3, 3}, rng));
  auto b = tape.leaf(Tensor<double>({2}, {0.25, -1.5}));
  auto y = conv2d_masked(x, w, Mask({2, 3, 3, 3}, std::uint8_t{0}), b);
  auto v = y.value();
  for (std::size_t i = 0; i < v.size(); ++i) {
    const int o = static_cast<int>((i / 20) % 2);
    CHECK(v[i] == (o == 0 ? 0.25 : -1.5));
  }
}

TEST_CASE("conv2d_masked: raster-past mask on a ramp sums strictly preceding pixels") {
  Tape<double> tape;
  std::vector<double> ramp(9);
  for (int i = 0; i < 9; ++i) ramp[i] = i;
  auto x = tape.constant(Tensor<double>({1, 1, 3, 3}, ramp));
  auto w = tape.leaf(Tensor<double>({1, 1, 3, 3}, 1.0));
  auto b = tape.leaf(Tensor<double>({1}, 0.0));
  auto y = conv2d_masked(x, w, raster_past_mask3(), b);
  // Hand cross-correlation at the center: pixels 0,1,2 above and 3 to the left.
  CHECK(y.value()[4] == doctest::Approx(6.0));
}

TEST_CASE("conv2d matches a direct cross-correlation loop") {
  std::mt19937_64 rng(11);
  auto xt = random_tensor({2, 3, 5, 4}, rng);
  auto wt = random_tensor({4, 3, 3, 3}, rng);
  auto bt = random_tensor({4}, rng);
  Tape<double> tape;
  auto y = conv2d(tape.constant(xt), tape.constant(wt), tape.constant(bt));
  for (int n = 0; n < 2; ++n)
    for (int o = 0; o < 4; ++o)
      for (int r = 0; r < 5; ++r)
        for (int c = 0; c < 4; ++c) {
          double acc = bt.data[o];
          for (int ch = 0; ch < 3; ++ch)
            for (int ky = 0; ky < 3; ++ky)
              for (int kx = 0; kx < 3; ++kx) {
                const int sr = r + ky - 1, sc = c + kx - 1;
                if (sr < 0 || sr >= 5 || sc < 0 || sc >= 4) continue;
                acc += wt.data[((o * 3 + ch) * 3 + ky) * 3 + kx] * xt.data[((n * 3 + ch) * 5 + sr) * 4 + sc];
              }
          CHECK(y.value()[((n * 4 + o) * 5 + r) * 4 + c] == doctest::Approx(acc).epsilon(1e-12));
        }
}

TEST_CASE("conv2d_masked: errors") {
  Tape<float> tape;
  auto x = tape.constant(Tensor<float>({1, 2, 3, 3}));
  auto w = tape.leaf(Tensor<float>({1, 3, 3, 3}));
  CHECK_THROWS_AS(conv2d(x, w, Var<float>()), ShapeError);
  auto w2 = tape.leaf(Tensor<float>({1, 2, 3, 3}));
  Mask bad({1, 2, 3, 3}, std::uint8_t{2});
  CHECK_THROWS_AS(conv2d_masked(x, w2, bad, Var<float>()), std::invalid_argument);
  auto w_even = tape.leaf(Tensor<float>({1, 2, 2, 2}));
  CHECK_THROWS_AS(conv2d(x, w_even, Var<float>()), ShapeError);
}

TEST_CASE("masked weight gradient is exactly zero outside the mask") {
  std::mt19937_64 rng(5);
  Tape<double> tape;
  auto x = tape.leaf(random_tensor({1, 2, 4, 4}, rng));
  auto w = tape.leaf(random_tensor({2, 2, 3, 3}, rng));
  Mask m({2, 2, 3, 3}, std::uint8_t{0});
  std::bernoulli_distribution coin(0.5);
  for (auto& bit : m.data) bit = coin(rng) ? 1 : 0;
  auto y = conv2d_masked(x, w, m, Var<double>());
  auto loss = weighted_sum(y, std::span<const double>(random_tensor({32}, rng).data));
  tape.backward(loss);
  auto gw = tape.grad(w);
  int nonzero_in_mask = 0;
  for (std::size_t i = 0; i < gw.size(); ++i) {
    if (m.data[i] == 0) {
      CHECK(gw[i] == 0.0);
    } else if (gw[i] != 0.0) {
      ++nonzero_in_mask;
    }
  }
  CHECK(nonzero_in_mask > 0);
}

TEST_CASE("linear: identity, sum plus bias, and naive matmul oracle") {
  {
    Tape<float> tape;
    auto y = linear(tape.constant(Tensor<float>({1, 2}, {1, 0})),
                    tape.constant(Tensor<float>({2, 2}, {1, 0, 0, 1})),
                    tape.constant(Tensor<float>({2}, {0, 0})));
    CHECK(y.value()[0] == 1.0f);
    CHECK(y.value()[1] == 0.0f);
  }
  {
    Tape<float> tape;
    auto y = linear(tape.constant(Tensor<float>({1, 2}, {1, 2})),
                    tape.constant(Tensor<float>({2, 1}, {1, 1})),
                    tape.constant(Tensor<float>({1}, {0.5f})));
    CHECK(y.item() == 3.5f);
  }
  std::mt19937_64 rng(7);
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({4, 2}, rng);
  Tape<double> tape;
  auto y = linear(tape.constant(a), tape.constant(b), Var<double>());
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 2; ++j) {
      double acc = 0;
      for (int k = 0; k < 4; ++k) acc += a.data[i * 4 + k] * b.data[k * 2 + j];
      CHECK(std::abs(y.value()[i * 2 + j] - acc) < 1e-6);
    }
  CHECK_THROWS_AS(linear(tape.constant(a), tape.constant(a), Var<double>()), ShapeError);
}

TEST_CASE("softmax_cross_entropy: uniform, saturated, extended-precision oracle") {
  for (int k : {2, 3, 8, 17, 256}) {
    Tape<double> tape;
    std::vector<int> target{k - 1};
    auto loss = softmax_cross_entropy(tape.constant(Tensor<double>({1, k}, 0.0)), target);
    CHECK(loss.item() == doctest::Approx(std::log(static_cast<double>(k))).epsilon(1e-15));
  }
  {
    Tape<float> tape;
    std::vector<int> target{0};
    auto loss = softmax_cross_entropy(tape.constant(Tensor<float>({1, 2}, {30.f, -30.f})), target);
    CHECK(loss.item() < 1e-9);
    CHECK(loss.item() >= 0.0f);
  }
  std::mt19937_64 rng(13);
  auto logits = random_tensor({4, 5}, rng, 3.0);
  std::vector<int> targets{0, 4, 2, 1};
  Tape<double> tape;
  auto mean = softmax_cross_entropy(tape.constant(logits), targets, Reduction::Mean);
  long double total = 0;
  for (int r = 0; r < 4; ++r) {
    long double z = 0;
    for (int c = 0; c < 5; ++c) z += std::exp(static_cast<long double>(logits.data[r * 5 + c]));
    total += std::log(z) - logits.data[r * 5 + targets[r]];
  }
  const double expected = static_cast<double>(total / 4);
  CHECK(std::abs(mean.item() - expected) / expected < 1e-6);
  std::vector<int> bad{5, 0, 0, 0};
  CHECK_THROWS_AS(softmax_cross_entropy(tape.constant(logits), bad), std::out_of_range);
}

TEST_CASE("softmax_cross_entropy gradient is softmax minus one-hot") {
  Tape<double> tape;
  auto logits = tape.leaf(Tensor<double>({1, 3}, {0.5, -1.0, 2.0}));
  std::vector<int> target{1};
  tape.backward(softmax_cross_entropy(logits, target));
  const double z = std::exp(0.5) + std::exp(-1.0) + std::exp(2.0);
  auto g = tape.grad(logits);
  CHECK(g[0] == doctest::Approx(std::exp(0.5) / z));
  CHECK(g[1] == doctest::Approx(std::exp(-1.0) / z - 1.0));
  CHECK(g[2] == doctest::Approx(std::exp(2.0) / z));
}

TEST_CASE("elementwise suite") {
  Tape<double> tape;
  CHECK(sigmoid(tape.constant(Tensor<double>({1}, {0.0}))).item() == 0.5);
  auto c = concat<double>({tape.constant(Tensor<double>({2, 3})), tape.constant(Tensor<double>({2, 5}))}, -1);
  CHECK(c.shape() == Shape{2, 8});
  Tensor<double> table({4, 8});
  for (std::size_t i = 0; i < table.data.size(); ++i) table.data[i] = static_cast<double>(i);
  std::vector<int> ids{2};
  auto row = embed_lookup(tape.constant(table), ids);
  for (int e = 0; e < 8; ++e) CHECK(row.value()[e] == table.data[16 + e]);
  std::vector<int> bad{4};
  CHECK_THROWS_AS(embed_lookup(tape.constant(table), bad), std::out_of_range);
  CHECK_THROWS_AS(reshape(c, {3, 5}), ShapeError);
  CHECK(relu(tape.constant(Tensor<double>({2}, {-1.0, 2.0}))).value()[0] == 0.0);
}

TEST_CASE("concat along a middle axis interleaves rows") {
  Tape<double> tape;
  auto a = tape.constant(Tensor<double>({2, 1, 2}, {1, 2, 3, 4}));
  auto b = tape.constant(Tensor<double>({2, 2, 2}, {5, 6, 7, 8, 9, 10, 11, 12}));
  auto c = concat<double>({a, b}, 1);
  std::vector<double> expect{1, 2, 5, 6, 7, 8, 3, 4, 9, 10, 11, 12};
  CHECK(std::vector<double>(c.value().begin(), c.value().end()) == expect);
}

TEST_CASE("backward: x^2, contract errors") {
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>({1}, {3.0}));
  auto loss = mul(x, x);
  tape.backward(loss);
  CHECK(tape.grad(x)[0] == 6.0);
  CHECK_THROWS_AS(tape.backward(loss), TapeError);

  Tape<double> t2;
  auto v = t2.leaf(Tensor<double>({2}, {1.0, 2.0}));
  CHECK_THROWS_AS(t2.backward(mul(v, v)), TapeError);
  Tape<double> t3;
  auto k = t3.constant(Tensor<double>({1}, {1.0}));
  CHECK_THROWS_AS(t3.backward(mul(k, k)), TapeError);
}

TEST_CASE("backward: sum(A*B) against finite differences") {
  std::mt19937_64 rng(17);
  std::vector<Tensor<double>> params{random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)};
  auto f = [](Tape<double>&, const std::vector<Var<double>>& p) { return sum(mul(p[0], p[1])); };
  auto rep = check_gradients(f, params, {.step = 1e-5});
  CHECK(rep.max_rel_error < 1e-8);
  Tape<double> tape;
  auto a = tape.leaf(params[0]);
  auto b = tape.leaf(params[1]);
  tape.backward(sum(mul(a, b)));
  CHECK(tape.grad(a) == params[1].data);
}

TEST_CASE("check_gradients: quadratic form") {
  std::mt19937_64 rng(19);
  auto m = random_tensor({4, 4}, rng);
  std::vector<Tensor<double>> params{random_tensor({1, 4}, rng)};
  auto f = [m](Tape<double>& tape, const std::vector<Var<double>>& p) {
    auto mx = linear(p[0], tape.constant(m), Var<double>());
    return sum(mul(mx, p[0]));
  };
  CHECK(check_gradients(f, params, {.step = 1e-5}).max_rel_error < 1e-8);
}

TEST_CASE("gradients of layer ops pass finite-difference checks") {
  std::mt19937_64 rng(23);
  auto weights = random_tensor({6 * 8}, rng);
  SUBCASE("layer_norm + tanh + sigmoid") {
    std::vector<Tensor<double>> params{random_tensor({6, 8}, rng), random_tensor({8}, rng),
                                       random_tensor({8}, rng)};
    auto f = [&](Tape<double>&, const std::vector<Var<double>>& p) {
      auto y = layer_norm(p[0], p[1], p[2]);
      return weighted_sum(mul(tanh(y), sigmoid(y)), std::span<const double>(weights.data));
    };
    CHECK(check_gradients(f, params, {.step = 1e-6}).max_rel_error < 1e-5);
  }
  SUBCASE("causal and full attention") {
    for (bool causal : {true, false}) {
      std::vector<Tensor<double>> params{random_tensor({6, 8}, rng), random_tensor({6, 8}, rng),
                                         random_tensor({6, 8}, rng)};
      auto f = [&](Tape<double>&, const std::vector<Var<double>>& p) {
        return weighted_sum(attention(p[0], p[1], p[2], 2, causal),
                            std::span<const double>(weights.data));
      };
      CHECK(check_gradients(f, params, {.step = 1e-6}).max_rel_error < 1e-5);
    }
  }
  SUBCASE("embedding, concat, rows, transpose, tile, reshape") {
    std::vector<Tensor<double>> params{random_tensor({5, 4}, rng), random_tensor({2}, rng)};
    std::vector<int> ids{0, 3, 3, 1, 4, 2};
    auto f = [&](Tape<double>&, const std::vector<Var<double>>& p) {
      auto e = embed_lookup(p[0], ids);                       // [6,4]
      auto shifted = concat<double>({rows(e, 3, 6), rows(e, 0, 3)}, 0);
      auto t = reshape(transpose(shifted), {4, 2, 3});        // [4,2,3]
      auto tiled = tile_spatial(p[1], 2, 3);                  // [2,2,3]
      auto joined = concat<double>({t, tiled}, 0);            // [6,2,3]
      return weighted_sum(mul(joined, joined), std::span<const double>(weights.data).first(36));
    };
    CHECK(check_gradients(f, params, {.step = 1e-6}).max_rel_error < 1e-5);
  }
}

TEST_CASE("attention: uniform logits average the causal prefix") {
  Tape<double> tape;
  Tensor<double> v({3, 2}, {1.0, 0.0, 3.0, 6.0, -1.0, 3.0});
  auto zero = tape.constant(Tensor<double>({3, 2}, 0.0));
  auto out = attention(zero, zero, tape.constant(v), 1, true);
  auto o = out.value();
  CHECK(o[0] == doctest::Approx(1.0));
  CHECK(o[1] == doctest::Approx(0.0));
  CHECK(o[2] == doctest::Approx(2.0));
  CHECK(o[3] == doctest::Approx(3.0));
  CHECK(o[4] == doctest::Approx(1.0));
  CHECK(o[5] == doctest::Approx(3.0));
}

TEST_CASE("backward is linear in the loss") {
  std::mt19937_64 rng(29);
  auto xt = random_tensor({2, 5}, rng);
  auto wt = random_tensor({5, 3}, rng);
  std::vector<int> t1{0, 2}, t2{1, 1};
  auto grad_of = [&](int which) {
    Tape<double> tape;
    auto w = tape.leaf(wt);
    auto logits = linear(tape.constant(xt), w, Var<double>());
    Var<double> loss;
    if (which == 1) loss = softmax_cross_entropy(logits, t1);
    if (which == 2) loss = softmax_cross_entropy(logits, t2);
    if (which == 3) loss = add(softmax_cross_entropy(logits, t1), softmax_cross_entropy(logits, t2));
    tape.backward(loss);
    return tape.grad(w);
  };
  auto g1 = grad_of(1), g2 = grad_of(2), g12 = grad_of(3);
  for (std::size_t i = 0; i < g12.size(); ++i) CHECK(std::abs(g12[i] - (g1[i] + g2[i])) < 1e-6);
}

TEST_CASE("non-finite values are surfaced") {
  REQUIRE(finite_checks());
  Tape<double> tape;
  auto big = tape.constant(Tensor<double>({1}, {1e200}));
  CHECK_THROWS_AS(mul(big, big), NonFiniteError);
  set_finite_checks(false);
  CHECK_NOTHROW(mul(big, big));
  set_finite_checks(true);
}

TEST_CASE("forward ops are deterministic") {
  std::mt19937_64 rng(31);
  auto xt = random_tensor({1, 3, 6, 6}, rng);
  auto wt = random_tensor({6, 3, 3, 3}, rng);
  auto run = [&] {
    Tape<float> tape;
    auto y = conv2d(tape.constant(xt.cast<float>()), tape.constant(wt.cast<float>()), Var<float>());
    return y.tensor();
  };
  CHECK(run() == run());
}
