#include <cmath>
#include <limits>

#include "doctest.h"
#include "helpers.hpp"
#include "stcore/error.hpp"
#include "stcore/temporal_fold.hpp"

using namespace stcore;
using stcore::testing::random_tensor;

namespace {

TsbnLayer scalar_layer(float gamma, float beta, float mu, float var, double eps) {
  auto l = TsbnLayer::create(1, 1, 1, GammaStorage::Linear, "probe");
  l.gamma_param = Tensor({1, 1}, {gamma});
  l.beta = Tensor({1, 1}, {beta});
  l.running_mu = Tensor({1, 1}, {mu});
  l.running_var = Tensor({1, 1}, {var});
  l.eps = eps;
  l.stats_ready = true;
  return l;
}

TsbnLayer random_layer(std::uint64_t seed, std::int64_t T, std::int64_t C) {
  auto l = TsbnLayer::create(T, C, T, GammaStorage::Log, "rand");
  l.gamma_param = random_tensor({T, C}, seed, -1.5, 1.5);
  l.beta = random_tensor({T, C}, seed + 1, -1.0, 1.0);
  l.running_mu = random_tensor({T, C}, seed + 2, -2.0, 2.0);
  l.running_var = random_tensor({T, C}, seed + 3, 0.01, 4.0);
  l.stats_ready = true;
  return l;
}

}  // namespace

TEST_SUITE("temporal_fold") {
  TEST_CASE("fold worked examples") {
    const auto a = fold_threshold_f64(scalar_layer(2.0f, 0.5f, 0.3f, 1.0f, 1e-14), 1.0);
    CHECK(a[0] == doctest::Approx(0.55).epsilon(1e-7));
    const auto b = fold_threshold_f64(scalar_layer(1.0f, 0.0f, 0.0f, 1.0f, 1e-14), 1.0);
    CHECK(b[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(fold_threshold(scalar_layer(1.0f, 0.0f, 0.0f, 1.0f, 1e-14), 1.0).source == "probe");
  }

  TEST_CASE("non-positive gamma is rejected with its position") {
    auto l = TsbnLayer::create(3, 2, 3, GammaStorage::Linear, "bad");
    l.stats_ready = true;
    l.gamma_param.mutable_data()[3] = -1.0f;
    try {
      fold_threshold(l, 1.0);
      FAIL("expected an error");
    } catch (const ValueError& e) {
      CHECK(std::string(e.what()).find("t=1, c=1") != std::string::npos);
    }
    auto fresh = TsbnLayer::create(2, 2, 2);
    CHECK_THROWS_AS(fold_threshold(fresh, 1.0), StateError);
  }

  TEST_CASE("rounded threshold agrees with the exact one for float inputs") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const auto l = random_layer(seed, 2, 3);
      const auto exact = fold_threshold_f64(l, 1.0);
      const auto ft = fold_threshold(l, 1.0);
      for (std::size_t i = 0; i < exact.size(); ++i) {
        const float f = ft.v_th_eff.data()[i];
        CHECK(static_cast<double>(f) >= exact[i]);
        CHECK(static_cast<double>(std::nextafter(f, -std::numeric_limits<float>::infinity())) < exact[i]);
      }
    }
  }

  TEST_CASE("boundary convention on both paths") {
    // gamma=1, beta=0, mu=0, var+eps=1 exactly: normalized value == x
    const auto l = scalar_layer(1.0f, 0.0f, 0.0f, 0.75f, 0.25);
    const Tensor at({1, 1, 1, 1, 1}, {1.0f});
    CHECK(spike_normalized(at, l, 1.0).item() == 1.0f);
    const auto ft = fold_threshold(l, 1.0);
    CHECK(ft.v_th_eff.item() == 1.0f);
    CHECK(spike_folded(at, ft).item() == 1.0f);
    const Tensor below({1, 1, 1, 1, 1}, {std::nextafter(1.0f, 0.0f)});
    CHECK(spike_folded(below, ft).item() == 0.0f);
  }

  TEST_CASE("inputs far below the mean never spike") {
    const auto l = random_layer(3, 2, 3);
    const Tensor x = Tensor::full({2, 4, 3, 2, 2}, -1e4f);
    const Tensor none = spike_normalized(x, l, 1.0);
    for (float v : none.data()) CHECK(v == 0.0f);
    const Tensor all = spike_folded(x, FoldedThreshold{Tensor::full({2, 3}, -1e30f), "low"});
    for (float v : all.data()) CHECK(v == 1.0f);
  }

  TEST_CASE("folded and normalized spikes agree outside the band") {
    std::int64_t mismatches = 0, in_band = 0, total = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const auto l = random_layer(seed + 40, 4, 8);
      const Tensor x = random_tensor({4, 2, 8, 6, 6}, seed + 80, -4.0, 4.0);
      const Tensor a = spike_normalized(x, l, 1.0);
      const Tensor b = spike_folded(x, fold_threshold(l, 1.0));
      const auto margin = normalized_margin(x, l, 1.0);
      for (std::size_t i = 0; i < margin.size(); ++i) {
        ++total;
        if (std::abs(margin[i]) < 1e-6) {
          ++in_band;
          continue;
        }
        if (a.data()[i] != b.data()[i]) ++mismatches;
      }
    }
    CHECK(total == 10 * 4 * 2 * 8 * 36);
    CHECK(mismatches == 0);
    CHECK(in_band < total / 1000);
  }

  TEST_CASE("threshold moves monotonically") {
    auto l = random_layer(7, 2, 2);
    const auto base = fold_threshold_f64(l, 1.0);
    const auto higher_vth = fold_threshold_f64(l, 1.25);
    auto lb = l;
    lb.beta = Tensor::zeros({2, 2});
    auto lb2 = lb;
    lb2.beta = Tensor::full({2, 2}, 0.1f);
    const auto b0 = fold_threshold_f64(lb, 1.0);
    const auto b1 = fold_threshold_f64(lb2, 1.0);
    for (std::size_t i = 0; i < base.size(); ++i) {
      CHECK(higher_vth[i] > base[i]);
      CHECK(b1[i] < b0[i]);
    }
  }

  TEST_CASE("folded compare rejects mismatched thresholds") {
    FoldedThreshold ft{Tensor::zeros({2, 3}), "x"};
    CHECK_THROWS_AS(spike_folded(Tensor::zeros({3, 1, 3, 2, 2}), ft), ShapeError);
    CHECK_THROWS_AS(spike_folded(Tensor::zeros({2, 1, 4, 2, 2}), ft), ShapeError);
  }
}
