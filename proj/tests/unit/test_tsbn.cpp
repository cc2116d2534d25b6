#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "helpers.hpp"
#include "stcore/autograd.hpp"
#include "stcore/error.hpp"
#include "stcore/ops.hpp"
#include "stcore/tsbn.hpp"

using namespace stcore;
using stcore::testing::random_tensor;

namespace {

using Index = std::int64_t;

std::size_t flat(const Shape& s, Index t, Index b, Index c, Index h, Index w) {
  return static_cast<std::size_t>((((t * s[1] + b) * s[2] + c) * s[3] + h) * s[4] + w);
}

// Plain BN over a subset of timesteps, written directly from the definition.
std::vector<double> bn_oracle(const Tensor& x, const std::vector<Index>& steps, Index c) {
  const auto& s = x.shape();
  double sum = 0.0;
  double n = 0.0;
  for (Index t : steps)
    for (Index b = 0; b < s[1]; ++b)
      for (Index h = 0; h < s[3]; ++h)
        for (Index w = 0; w < s[4]; ++w) {
          sum += x.data()[flat(s, t, b, c, h, w)];
          n += 1.0;
        }
  const double mu = sum / n;
  double ss = 0.0;
  for (Index t : steps)
    for (Index b = 0; b < s[1]; ++b)
      for (Index h = 0; h < s[3]; ++h)
        for (Index w = 0; w < s[4]; ++w) {
          const double d = x.data()[flat(s, t, b, c, h, w)] - mu;
          ss += d * d;
        }
  return {mu, ss / n};
}

void set_tc(Tensor& t, Index T, Index C, const std::vector<float>& per_channel) {
  auto d = t.mutable_data();
  for (Index tt = 0; tt < T; ++tt)
    for (Index c = 0; c < C; ++c) d[static_cast<std::size_t>(tt * C + c)] = per_channel[static_cast<std::size_t>(c)];
}

}  // namespace

TEST_SUITE("tsbn") {
  TEST_CASE("layer construction") {
    auto layer = TsbnLayer::create(4, 3, 2);
    CHECK(layer.gamma_param.shape() == Shape{4, 3});
    CHECK(layer.momentum == 0.1);
    CHECK(layer.eps == 1e-5);
    CHECK_FALSE(layer.stats_ready);
    CHECK_THROWS_AS(TsbnLayer::create(4, 3, 5), ValueError);
    CHECK_THROWS_AS(TsbnLayer::create(4, 3, 0), ValueError);
    auto logl = TsbnLayer::create(2, 2, 2, GammaStorage::Log);
    for (double g : logl.gamma_values()) CHECK(g == 1.0);
  }

  TEST_CASE("window placement") {
    CHECK(tsbn_window_start(0, 1, 4) == 0);
    CHECK(tsbn_window_start(3, 1, 4) == 3);
    CHECK(tsbn_window_start(3, 2, 4) == 2);
    CHECK(tsbn_window_start(1, 2, 4) == 0);
    // early steps keep the full width
    CHECK(tsbn_window_start(0, 3, 4) == 0);
    CHECK(tsbn_window_start(2, 4, 4) == 0);
  }

  TEST_CASE("window stats examples") {
    std::vector<float> v(2 * 1 * 1 * 2 * 2);
    std::fill(v.begin() + 4, v.end(), 2.0f);
    const Tensor x({2, 1, 1, 2, 2}, v);
    auto [mu, var] = tsbn_window_stats(x, 1, 2);
    CHECK(mu.item() == 1.0f);
    CHECK(var.item() == 1.0f);
    auto [mu0, var0] = tsbn_window_stats(x, 0, 1);
    CHECK(mu0.item() == 0.0f);
    CHECK(var0.item() == 0.0f);
    auto [mu1, var1] = tsbn_window_stats(x, 1, 1);
    CHECK(mu1.item() == 2.0f);
    CHECK_THROWS_AS(tsbn_window_stats(x, 2, 1), ValueError);
    CHECK_THROWS_AS(tsbn_window_stats(x, -1, 1), ValueError);
  }

  TEST_CASE("window stats match a brute-force oracle") {
    const Tensor x = random_tensor({5, 2, 3, 2, 3}, 11, -2.0, 3.0);
    for (Index w = 1; w <= 5; ++w) {
      for (Index t = 0; t < 5; ++t) {
        auto [mu, var] = tsbn_window_stats_f64(x, t, w);
        const Index s = std::max<Index>(0, std::min<Index>(t - w + 1, 5 - w));
        std::vector<Index> steps;
        for (Index k = s; k < s + w; ++k) steps.push_back(k);
        CHECK(std::find(steps.begin(), steps.end(), t) != steps.end());
        for (Index c = 0; c < 3; ++c) {
          const auto o = bn_oracle(x, steps, c);
          CHECK(std::abs(mu[static_cast<std::size_t>(c)] - o[0]) < 1e-12);
          CHECK(std::abs(var[static_cast<std::size_t>(c)] - o[1]) < 1e-12);
        }
      }
    }
  }

  TEST_CASE("full window equals pooled BN with shared affine") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const Tensor x = random_tensor({4, 3, 2, 3, 3}, seed, -1.0, 2.0);
      auto layer = TsbnLayer::create(4, 2, 4);
      const std::vector<float> g{1.5f, 0.7f}, bta{0.2f, -0.4f};
      set_tc(layer.gamma_param, 4, 2, g);
      set_tc(layer.beta, 4, 2, bta);
      const Tensor y = tsbn_forward_train(x, layer);
      double worst = 0.0;
      for (Index c = 0; c < 2; ++c) {
        const auto o = bn_oracle(x, {0, 1, 2, 3}, c);
        const double inv = 1.0 / std::sqrt(o[1] + 1e-5);
        for (Index t = 0; t < 4; ++t)
          for (Index b = 0; b < 3; ++b)
            for (Index h = 0; h < 3; ++h)
              for (Index w = 0; w < 3; ++w) {
                const auto j = flat(x.shape(), t, b, c, h, w);
                const double ref = g[static_cast<std::size_t>(c)] * (x.data()[j] - o[0]) * inv + bta[static_cast<std::size_t>(c)];
                worst = std::max(worst, std::abs(y.data()[j] - ref));
              }
      }
      CHECK(worst < 1e-6);
    }
  }

  TEST_CASE("unit window equals per-timestep BN") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const Tensor x = random_tensor({3, 2, 2, 4, 2}, seed + 40, -3.0, 1.0);
      auto layer = TsbnLayer::create(3, 2, 1);
      const Tensor gam = random_tensor({3, 2}, seed + 1, 0.5, 2.0);
      const Tensor bet = random_tensor({3, 2}, seed + 2);
      std::copy(gam.data().begin(), gam.data().end(), layer.gamma_param.mutable_data().begin());
      std::copy(bet.data().begin(), bet.data().end(), layer.beta.mutable_data().begin());
      const Tensor y = tsbn_forward_train(x, layer);
      double worst = 0.0;
      for (Index t = 0; t < 3; ++t)
        for (Index c = 0; c < 2; ++c) {
          const auto o = bn_oracle(x, {t}, c);
          const double gg = gam.at({t, c}), bb = bet.at({t, c});
          for (Index b = 0; b < 2; ++b)
            for (Index h = 0; h < 4; ++h)
              for (Index w = 0; w < 2; ++w) {
                const auto j = flat(x.shape(), t, b, c, h, w);
                const double ref = gg * (x.data()[j] - o[0]) / std::sqrt(o[1] + 1e-5) + bb;
                worst = std::max(worst, std::abs(y.data()[j] - ref));
              }
        }
      CHECK(worst < 1e-6);
    }
  }

  TEST_CASE("full window output has zero mean and shrunk unit variance") {
    const Tensor x = random_tensor({4, 2, 1, 4, 4}, 3, 0.0, 5.0);
    auto layer = TsbnLayer::create(4, 1, 4);
    const Tensor y = tsbn_forward_train(x, layer);
    const auto o = bn_oracle(x, {0, 1, 2, 3}, 0);
    double m = 0.0;
    for (float v : y.data()) m += v;
    m /= static_cast<double>(y.numel());
    double s = 0.0;
    for (float v : y.data()) s += (v - m) * (v - m);
    s /= static_cast<double>(y.numel());
    CHECK(std::abs(m) < 1e-6);
    CHECK(std::abs(s - o[1] / (o[1] + 1e-5)) < 1e-6);
  }

  TEST_CASE("constant window gives beta") {
    const Tensor x = Tensor::full({2, 3, 1, 2, 2}, 4.25f);
    auto layer = TsbnLayer::create(2, 1, 2);
    set_tc(layer.gamma_param, 2, 1, {2.0f});
    set_tc(layer.beta, 2, 1, {0.5f});
    const Tensor y = tsbn_forward_train(x, layer);
    for (float v : y.data()) CHECK(v == 0.5f);
  }

  TEST_CASE("unit window isolates timesteps") {
    const Tensor x = random_tensor({4, 2, 2, 3, 3}, 5);
    auto l1 = TsbnLayer::create(4, 2, 1);
    auto l2 = TsbnLayer::create(4, 2, 1);
    const Tensor y = tsbn_forward_train(x, l1);
    // swap timesteps 0 and 3; output at 1 and 2 must not move
    std::vector<float> p(x.data().begin(), x.data().end());
    const std::size_t step = static_cast<std::size_t>(x.numel() / 4);
    std::swap_ranges(p.begin(), p.begin() + static_cast<std::ptrdiff_t>(step), p.begin() + static_cast<std::ptrdiff_t>(3 * step));
    const Tensor yp = tsbn_forward_train(Tensor(x.shape(), p), l2);
    for (std::size_t i = step; i < 3 * step; ++i) CHECK(y.data()[i] == yp.data()[i]);
  }

  TEST_CASE("z-scores from window stats reproduce training output") {
    for (Index w = 1; w <= 3; ++w) {
      const Tensor x = random_tensor({3, 2, 2, 2, 3}, static_cast<std::uint64_t>(w) + 70, -1.0, 1.5);
      auto layer = TsbnLayer::create(3, 2, w);
      const Tensor y = tsbn_forward_train(x, layer);
      double worst = 0.0;
      for (Index t = 0; t < 3; ++t) {
        auto [mu, var] = tsbn_window_stats(x, t, w);
        for (Index b = 0; b < 2; ++b)
          for (Index c = 0; c < 2; ++c)
            for (Index h = 0; h < 2; ++h)
              for (Index ww = 0; ww < 3; ++ww) {
                const auto j = flat(x.shape(), t, b, c, h, ww);
                const double z = (x.data()[j] - mu.at({c})) / std::sqrt(static_cast<double>(var.at({c})) + 1e-5);
                worst = std::max(worst, std::abs(z - y.data()[j]));
              }
      }
      CHECK(worst < 1e-6);
    }
  }

  TEST_CASE("running statistics contract by (1 - momentum)^n") {
    const Tensor x = random_tensor({3, 2, 2, 2, 2}, 8, 1.0, 4.0);
    auto layer = TsbnLayer::create(3, 2, 2);
    std::vector<double> mu_gap0, var_gap0;
    std::vector<std::pair<std::vector<double>, std::vector<double>>> stats;
    for (Index t = 0; t < 3; ++t) stats.push_back(tsbn_window_stats_f64(x, t, 2));
    for (Index t = 0; t < 3; ++t)
      for (Index c = 0; c < 2; ++c) {
        mu_gap0.push_back(0.0 - stats[static_cast<std::size_t>(t)].first[static_cast<std::size_t>(c)]);
        var_gap0.push_back(1.0 - stats[static_cast<std::size_t>(t)].second[static_cast<std::size_t>(c)]);
      }
    for (int n = 1; n <= 12; ++n) {
      tsbn_forward_train(x, layer);
      const double f = std::pow(0.9, n);
      for (Index t = 0; t < 3; ++t)
        for (Index c = 0; c < 2; ++c) {
          const auto k = static_cast<std::size_t>(t * 2 + c);
          const double mg = layer.running_mu.data()[k] - stats[static_cast<std::size_t>(t)].first[static_cast<std::size_t>(c)];
          const double vg = layer.running_var.data()[k] - stats[static_cast<std::size_t>(t)].second[static_cast<std::size_t>(c)];
          CHECK(mg == doctest::Approx(f * mu_gap0[k]).epsilon(1e-5));
          CHECK(vg == doctest::Approx(f * var_gap0[k]).epsilon(1e-5));
        }
    }
  }

  TEST_CASE("inference path") {
    const Tensor x = random_tensor({2, 1, 3, 2, 2}, 12);
    auto layer = TsbnLayer::create(2, 3, 2);
    CHECK_THROWS_AS(tsbn_forward_infer(x, layer), StateError);

    // identity statistics
    layer.stats_ready = true;
    layer.eps = 1e-12;
    const Tensor id = tsbn_forward_infer(x, layer);
    CHECK(stcore::testing::max_abs_diff(id, x) < 1e-6);

    const Tensor a = tsbn_forward_infer(x, layer);
    const Tensor b = tsbn_forward_infer(x, layer);
    CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));

    CHECK_THROWS_AS(tsbn_forward_infer(random_tensor({2, 1, 4, 2, 2}, 1), layer), ShapeError);
  }

  TEST_CASE("inference converges to training output on a fixed batch") {
    const Tensor x = random_tensor({3, 4, 2, 3, 3}, 21, -1.0, 3.0);
    auto layer = TsbnLayer::create(3, 2, 2);
    const Tensor gam = random_tensor({3, 2}, 4, 0.5, 1.5);
    std::copy(gam.data().begin(), gam.data().end(), layer.gamma_param.mutable_data().begin());
    Tensor y;
    for (int i = 0; i < 200; ++i) y = tsbn_forward_train(x, layer);
    const Tensor yi = tsbn_forward_infer(x, layer);
    CHECK(stcore::testing::max_abs_diff(y, yi) < 1e-3);
    // batch of one accepted at inference
    const Tensor one = random_tensor({3, 1, 2, 3, 3}, 2);
    CHECK(tsbn_forward_infer(one, layer).shape() == one.shape());
  }

  TEST_CASE("backward through x, gamma and beta") {
    for (auto storage : {GammaStorage::Linear, GammaStorage::Log}) {
      for (Index w : {1, 2, 3}) {
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
          auto layer = TsbnLayer::create(3, 2, w, storage);
          const Tensor x = random_tensor({3, 2, 2, 2, 2}, seed, -1.0, 2.0);
          const Tensor gp = random_tensor({3, 2}, seed + 100, storage == GammaStorage::Log ? -0.5 : 0.5,
                                          storage == GammaStorage::Log ? 0.5 : 1.5);
          const Tensor bp = random_tensor({3, 2}, seed + 200);
          layer.gamma_param = gp;
          layer.beta = bp;

          const double ex = grad_check([&](const Tensor& v) { return tsbn_forward_train(v, layer); }, x, 1e-3, seed);
          const double eg = grad_check(
              [&](const Tensor& v) {
                auto l = layer;
                l.gamma_param = v;
                return tsbn_forward_train(x, l);
              },
              gp, 1e-3, seed);
          const double eb = grad_check(
              [&](const Tensor& v) {
                auto l = layer;
                l.beta = v;
                return tsbn_forward_train(x, l);
              },
              bp, 1e-3, seed);
          CHECK(ex < 1e-3);
          CHECK(eg < 1e-3);
          CHECK(eb < 1e-3);
        }
      }
    }
  }

  TEST_CASE("shape and window errors") {
    auto layer = TsbnLayer::create(2, 2, 2);
    CHECK_THROWS_AS(tsbn_forward_train(Tensor::zeros({3, 1, 2, 1, 1}), layer), ShapeError);
    CHECK_THROWS_AS(tsbn_forward_train(Tensor::zeros({2, 2, 1, 1}), layer), ShapeError);
    layer.w = 3;
    CHECK_THROWS_AS(tsbn_forward_train(Tensor::zeros({2, 1, 2, 1, 1}), layer), ValueError);
  }
}
