#include <cstring>
#include <set>

#include "doctest.h"
#include "helpers.hpp"
#include "stcore/autograd.hpp"
#include "stcore/error.hpp"
#include "stcore/io/events.hpp"
#include "stcore/model.hpp"
#include "stcore/ops.hpp"

using namespace stcore;
using stcore::testing::random_binary;

namespace {

RtformerConfig small_config() {
  RtformerConfig c;
  c.T = 4;
  c.depth = 1;
  c.dim = 16;
  c.heads = 2;
  c.classes = 2;
  c.height = c.width = 8;
  c.attn_scale = 0.5;  // 16 tokens instead of 64
  c.seed = 3;
  return c;
}

Dataset toy(std::int64_t classes, std::int64_t per_class, std::uint64_t seed, std::int64_t T = 4) {
  io::ToyEventOptions o;
  o.classes = classes;
  o.samples_per_class = per_class;
  o.size = 8;
  o.seed = seed;
  return io::toy_event_dataset(o, T);
}

std::vector<float> flat_params(const RtformerNet& net) {
  std::vector<float> out;
  for (const auto& [n, t] : net.named_tensors()) out.insert(out.end(), t.data().begin(), t.data().end());
  return out;
}

// Plain loops over [T,B,h,N,d]: (q k^T) v.
std::vector<double> attention_oracle(const Tensor& q, const Tensor& k, const Tensor& v, double s) {
  const auto& sh = q.shape();
  const std::int64_t G = sh[0] * sh[1] * sh[2], N = sh[3], d = sh[4];
  std::vector<double> out(q.data().size(), 0.0);
  for (std::int64_t g = 0; g < G; ++g) {
    const std::int64_t base = g * N * d;
    for (std::int64_t i = 0; i < N; ++i)
      for (std::int64_t j = 0; j < N; ++j) {
        double qk = 0.0;
        for (std::int64_t e = 0; e < d; ++e) qk += q.data()[base + i * d + e] * k.data()[base + j * d + e];
        for (std::int64_t e = 0; e < d; ++e) out[base + i * d + e] += qk * v.data()[base + j * d + e] * s;
      }
  }
  return out;
}

RtformerNet trained_small(std::int64_t epochs = 1) {
  auto net = RtformerNet::build(small_config());
  SgdOptimizer opt(0.05);
  const Dataset data = toy(2, 12, 5);
  for (std::int64_t e = 0; e < epochs; ++e) train_epoch(net, data, opt, 8, 40 + e);
  return net;
}

}  // namespace

TEST_SUITE("model") {
  TEST_CASE("config validation and records") {
    RtformerConfig c;
    c.validate();
    c.heads = 5;
    CHECK_THROWS_AS(c.validate(), ValueError);
    c = RtformerConfig{};
    c.w = 5;
    CHECK_THROWS_AS(c.validate(), ValueError);
    c = RtformerConfig{};
    c.T = 0;
    CHECK_THROWS_AS(c.validate(), ValueError);
    CHECK_THROWS_AS(RtformerNet::build(c), ValueError);

    c = small_config();
    c.attn_scale = 0.3;
    c.lif.k_tau = 1.7;
    const auto back = RtformerConfig::from_records(c.to_records());
    CHECK(back.to_records() == c.to_records());
    CHECK(back.attn_scale == 0.3);
    CHECK_THROWS_AS(RtformerConfig::from_records({{"bogus", "1"}}), FormatError);
  }

  TEST_CASE("build is deterministic in the seed") {
    const auto a = flat_params(RtformerNet::build(small_config()));
    const auto b = flat_params(RtformerNet::build(small_config()));
    REQUIRE(a.size() == b.size());
    CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
    auto c = small_config();
    c.seed = 4;
    CHECK(flat_params(RtformerNet::build(c)) != a);
  }

  TEST_CASE("initial gamma is one, beta zero") {
    const auto net = RtformerNet::build(small_config());
    for (float g : net.embed().tsbn->gamma_values()) CHECK(g == 1.0f);
    for (float b : net.embed().tsbn->beta.data()) CHECK(b == 0.0f);
  }

  TEST_CASE("depth zero runs") {
    auto c = small_config();
    c.depth = 0;
    auto net = RtformerNet::build(c);
    CHECK(net.blocks().empty());
    const Tensor logits = net.forward(random_binary({4, 3, 2, 8, 8}, 1));
    CHECK(logits.shape() == Shape{3, 2});
  }

  TEST_CASE("parameter count matches closed form") {
    const RtformerConfig c;  // T=4, depth=2, dim=64, 4 classes, 2 input channels, mlp ratio 2
    // embed 64*2*9 + 4*4*64 = 2176
    // block: core 64*(1+1+1+9+9) + 5*4*4*64 = 6464; q,k,v,proj 4*(64*64 + 4*4*64) = 20480;
    //        fc1 128*64 + 4*4*128 = 10240; fc2 64*128 + 4*4*64 = 9216  -> 46400
    // head 64*4 + 4 = 260
    const std::int64_t hand = 2176 + 2 * 46400 + 260;
    CHECK(hand == 95236);
    auto net = RtformerNet::build(c);
    CHECK(net.parameter_count() == hand);
    CHECK(RtformerNet::expected_parameter_count(c) == hand);

    net.set_stats_ready(true);
    const auto fused = fuse_network(net);
    // embed 1152 + 4*64; block 4*64*10 + 4*(4096+256) + (8192+512) + (8192+256) = 37120; head 260
    CHECK(fused.parameter_count() == 1408 + 2 * 37120 + 260);
    CHECK(RtformerNet::expected_fused_parameter_count(c) == fused.parameter_count());
    CHECK(fused.parameter_count() < net.parameter_count());
  }

  TEST_CASE("spiking attention examples") {
    const Tensor z = Tensor::zeros({1, 1, 1, 3, 2});
    const Tensor r = random_binary({1, 1, 1, 3, 2}, 2, 0.6);
    const Tensor zq = spiking_attention(z, r, r, 0.5);
    for (float v : zq.data()) CHECK(v == 0.0f);

    const Tensor one = Tensor::ones({1, 1, 1, 1, 1});
    CHECK(spiking_attention(one, one, one, 1.0).item() == 1.0f);

    CHECK_THROWS_AS(spiking_attention(Tensor::full({1, 1, 1, 1, 1}, 0.5f), one, one, 1.0), ValueError);
    CHECK_THROWS_AS(spiking_attention(one, Tensor::zeros({1, 1, 1, 2, 1}), one, 1.0), ShapeError);
  }

  TEST_CASE("attention association order") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const Shape s{2, 2, 3, 10, 4};
      const Tensor q = random_binary(s, 10 + seed), k = random_binary(s, 20 + seed), v = random_binary(s, 30 + seed);
      const Tensor got = spiking_attention(q, k, v, 0.125);
      const auto want = attention_oracle(q, k, v, 0.125);
      const std::vector<double> got_d(got.data().begin(), got.data().end());
      CHECK(max_relative_error(got_d, want) < 1e-5);
    }
  }

  TEST_CASE("spike OR") {
    const Tensor a({4}, {0, 1, 0, 1}), b({4}, {0, 0, 1, 1});
    const Tensor o = spike_or(a, b);
    CHECK(std::vector<float>(o.data().begin(), o.data().end()) == std::vector<float>{0, 1, 1, 1});
    CHECK_THROWS_AS(spike_or(Tensor::full({4}, 2.0f), b), ValueError);
  }

  TEST_CASE("inter-block activations are binary") {
    auto net = trained_small();
    net.set_mode(NetMode::Infer);
    ForwardTrace tr;
    net.forward(random_binary({4, 2, 2, 8, 8}, 8), &tr);
    for (const auto& l : tr.layers) CHECK_MESSAGE(is_binary(l.spikes), l.name);
    CHECK(is_binary(tr.head_input));
  }

  TEST_CASE("learning rate zero leaves parameters unchanged") {
    auto net = RtformerNet::build(small_config());
    const Dataset data = toy(2, 6, 1);
    SgdOptimizer opt(0.0);
    const auto before = flat_params(net);
    std::vector<double> losses;
    for (int e = 0; e < 3; ++e) losses.push_back(train_epoch(net, data, opt, 4, 7).loss);
    // running statistics move; trainable tensors must not
    std::vector<float> trainable_before, trainable_after;
    auto fresh = RtformerNet::build(small_config());
    for (const auto& p : fresh.parameters()) trainable_before.insert(trainable_before.end(), p.data().begin(), p.data().end());
    for (const auto& p : net.parameters()) trainable_after.insert(trainable_after.end(), p.data().begin(), p.data().end());
    CHECK(trainable_before == trainable_after);
    CHECK(before.size() == flat_params(net).size());
    // the same shuffle seed and frozen weights give the same loss once the
    // running statistics no longer feed the training forward
    CHECK(losses[1] == losses[2]);
    CHECK(losses[0] == losses[1]);
  }

  TEST_CASE("training is seed deterministic") {
    const auto a = flat_params(trained_small());
    const auto b = flat_params(trained_small());
    CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
  }

  TEST_CASE("loss decreases over the first five epochs") {
    auto net = RtformerNet::build(small_config());
    const Dataset data = toy(2, 32, 11);
    SgdOptimizer opt(0.05);
    double prev = 1e30;
    for (int e = 0; e < 5; ++e) {
      const double loss = train_epoch(net, data, opt, 8, 100 + e).loss;
      CHECK_MESSAGE(loss < prev, "epoch " << e);
      prev = loss;
    }
  }

  TEST_CASE("every trainable tensor receives gradient") {
    auto net = RtformerNet::build(small_config());
    const Dataset data = toy(2, 4, 2);
    const auto params = net.parameters();
    GradTape tape;
    Tensor loss;
    {
      GradTape::Recording rec(tape);
      const std::vector<std::int64_t> labels{0, 1, 0, 1, 0, 1, 0, 1};
      loss = cross_entropy(net.forward(data.batch({0, 1, 2, 3, 4, 5, 6, 7})), labels);
    }
    backward(loss, tape);
    std::set<std::uint64_t> ids;
    for (const auto& p : params) ids.insert(p.id());
    for (const auto& [name, t] : net.named_tensors()) {
      if (!ids.count(t.id())) continue;
      bool nonzero = false;
      if (t.has_grad()) {
        for (float g : t.grad()) nonzero |= g != 0.0f;
      }
      CHECK_MESSAGE(nonzero, name);
    }
  }

  TEST_CASE("zero surrogate stops gradient below the head") {
    auto c = small_config();
    c.lif.surrogate_alpha = 0.0;
    auto net = RtformerNet::build(c);
    const Dataset data = toy(2, 2, 2);
    GradTape tape;
    Tensor loss;
    {
      GradTape::Recording rec(tape);
      const std::vector<std::int64_t> labels{0, 1, 0, 1};
      loss = cross_entropy(net.forward(data.batch({0, 1, 2, 3})), labels);
    }
    backward(loss, tape);
    for (const auto& [name, t] : net.named_tensors()) {
      if (!t.requires_grad() || name.rfind("head.", 0) == 0) continue;
      if (!t.has_grad()) continue;
      for (float g : t.grad()) REQUIRE_MESSAGE(g == 0.0f, name);
    }
    bool head_moves = false;
    for (float g : net.head_weight().grad()) head_moves |= g != 0.0f;
    CHECK(head_moves);
  }

  TEST_CASE("fused nets reject training and refusing") {
    auto net = trained_small();
    const auto fused = fuse_network(net);
    CHECK(fused.fused());
    CHECK_FALSE(net.fused());
    CHECK_THROWS_AS(fuse_network(fused), StateError);
    auto f2 = fused;
    SgdOptimizer opt(0.1);
    CHECK_THROWS_AS(train_epoch(f2, toy(2, 1, 1), opt, 1, 0), StateError);
    CHECK_THROWS_AS(f2.set_mode(NetMode::Train), StateError);
    for (const auto& [name, t] : fused.named_tensors()) {
      CHECK(name.find(".branch") == std::string::npos);
      CHECK(name.find(".tsbn") == std::string::npos);
    }
  }

  TEST_CASE("fusing without statistics names the layer") {
    const auto net = RtformerNet::build(small_config());
    try {
      fuse_network(net);
      FAIL("expected StateError");
    } catch (const StateError& e) {
      CHECK(std::string(e.what()).find("embed.tsbn") != std::string::npos);
    }
  }

  TEST_CASE("fusion leaves the source untouched") {
    auto net = trained_small();
    const auto before = flat_params(net);
    const auto fused = fuse_network(net);
    CHECK(flat_params(net) == before);
  }

  TEST_CASE("end-to-end fused equivalence") {
    auto net = trained_small(2);
    auto fused = fuse_network(net);
    Dataset probe;
    for (std::uint64_t i = 0; i < 30; ++i) probe.append(random_binary({4, 2, 8, 8}, 500 + i, 0.15), 0);
    const auto rep = verify_fusion(net, fused, probe, 1e-4);
    INFO(rep.summary());
    CHECK(rep.mismatches == 0);
    CHECK(rep.passed());
    CHECK(rep.argmax_agree == 30);
  }

  TEST_CASE("block order is configurable") {
    auto c = small_config();
    c.block_order = "mlp-attn";
    auto net = RtformerNet::build(c);
    auto ref = RtformerNet::build(small_config());
    CHECK(flat_params(net) == flat_params(ref));
    const Tensor x = random_binary({4, 3, 2, 8, 8}, 12, 0.3);
    const Tensor a = net.forward(x), b = ref.forward(x);
    CHECK(std::vector<float>(a.data().begin(), a.data().end()) != std::vector<float>(b.data().begin(), b.data().end()));
    SgdOptimizer opt(0.05);
    train_epoch(net, toy(2, 8, 3), opt, 8, 1);
    auto fused = fuse_network(net);
    Dataset probe;
    for (std::uint64_t i = 0; i < 10; ++i) probe.append(random_binary({4, 2, 8, 8}, 700 + i, 0.15), 0);
    CHECK(verify_fusion(net, fused, probe, 1e-4).passed());
    c.block_order = "sideways";
    CHECK_THROWS_AS(c.validate(), ValueError);
  }

  TEST_CASE("energy estimate") {
    auto net = trained_small();
    net.set_mode(NetMode::Infer);
    auto fused = fuse_network(net);
    const Tensor probe = toy(2, 2, 9).batch({0, 1, 2, 3});
    const auto ru = estimate_energy(net, probe);
    const auto rf = estimate_energy(fused, probe);
    CHECK(rf.total_acs() <= ru.total_acs());
    CHECK(rf.total_macs() <= ru.total_macs());
    CHECK(rf.total_pj() < ru.total_pj());

    auto train_net = RtformerNet::build(small_config());
    CHECK_THROWS_AS(estimate_energy(train_net, probe), StateError);

    const auto rz = estimate_energy(fused, Tensor::zeros({4, 1, 2, 8, 8}));
    CHECK(rz.layers.front().acs == 0.0);
    CHECK(rz.layers.front().spike_driven);
  }
}
