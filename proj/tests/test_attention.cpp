#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "dida/attention.hpp"
#include "dida/gradcheck.hpp"
#include "dida/rng.hpp"

using namespace dida;

TEST_CASE("mask_salient_region") {
  int n = 8;
  Tensor image = Tensor::full({3, n, n}, 0.25);

  SECTION("all-zero saliency raises NoSalientRegion") {
    CHECK_THROWS_AS(mask_salient_region(image, Tensor::zeros({n, n})),
                    NoSalientRegion);
  }
  SECTION("all-one saliency replaces the whole image by per-channel mean") {
    std::vector<double> img(3 * n * n);
    Rng rng(2);
    for (double& v : img) v = rng.uniform();
    Tensor varying({3, n, n}, img);
    auto [masked, spec] = mask_salient_region(varying, Tensor::full({n, n}, 1.0));
    CHECK(spec.row0 == 0);
    CHECK(spec.row1 == n);
    for (int c = 0; c < 3; ++c) {
      double mean = 0.0;
      for (int i = 0; i < n * n; ++i) mean += varying[c * n * n + i];
      mean /= n * n;
      for (int i = 0; i < n * n; ++i)
        CHECK(masked[c * n * n + i] == Catch::Approx(mean).margin(1e-15));
    }
  }
  SECTION("single on-pixel gives a 1x1 box changing only that pixel") {
    Tensor sal = Tensor::zeros({n, n});
    sal.mutable_data()[3 * n + 4] = 1.0;
    auto [masked, spec] = mask_salient_region(image, sal);
    CHECK(spec.row0 == 3);
    CHECK(spec.col0 == 4);
    CHECK(spec.row1 == 4);
    CHECK(spec.col1 == 5);
    int changed = 0;
    for (int i = 0; i < image.size(); ++i)
      changed += masked[i] != image[i] ? 1 : 0;
    CHECK(changed == 0);  // constant image: mean fill equals original value
  }
}

TEST_CASE("difference_vector") {
  Tensor f({2}, {0.9, 0.2}), fm({2}, {0.1, 0.2});
  Tensor d = difference_vector(f, fm);
  CHECK(d[0] == Catch::Approx(0.8));
  CHECK(d[1] == 0.0);

  Tensor same = difference_vector(f, f);
  CHECK(same[0] == 0.0);
  CHECK(same[1] == 0.0);

  SECTION("backward routes +1 to f and -1 to f_m") {
    Tensor a({2}, {0.9, 0.2}), b({2}, {0.1, 0.2});
    a.set_leaf();
    b.set_leaf();
    auto grads = backward(sum(difference_vector(a, b)), {a, b});
    CHECK(grads[0][0] == 1.0);
    CHECK(grads[0][1] == 1.0);
    CHECK(grads[1][0] == -1.0);
    CHECK(grads[1][1] == -1.0);
  }
}

TEST_CASE("dominant_difference") {
  Tensor fd({4}, {0.9, 0.1, -0.8, 0.05});
  Tensor kept = dominant_difference(fd, 0.5);
  CHECK(kept[0] == Catch::Approx(0.9));
  CHECK(kept[1] == 0.0);
  CHECK(kept[2] == Catch::Approx(-0.8));
  CHECK(kept[3] == 0.0);

  SECTION("ties broken toward lower index") {
    Tensor tie({4}, {0.5, -0.5, 0.5, 0.5});
    Tensor k = dominant_difference(tie, 0.5);
    CHECK(k[0] == 0.5);
    CHECK(k[1] == -0.5);
    CHECK(k[2] == 0.0);
    CHECK(k[3] == 0.0);
  }
  SECTION("zero vector stays zero") {
    Tensor z = dominant_difference(Tensor::zeros({4}), 0.25);
    for (int i = 0; i < 4; ++i) CHECK(z[i] == 0.0);
  }
}

TEST_CASE("vda_signal") {
  Tensor f({2}, {1.0, 0.5}), fm({2}, {0.8, 0.1});
  CHECK(vda_signal(f, fm, SignalMode::kDot).value() == Catch::Approx(0.4));
  CHECK(vda_signal(f, f, SignalMode::kDot).value() == 0.0);
  CHECK(vda_signal(f, f, SignalMode::kThreshold).value() == 0.0);

  SECTION("threshold mode sums the dominant entries") {
    // f - f_m = [0.9, 0.1, -0.8, 0.05]; keep half -> 0.9 - 0.8 = 0.1
    Tensor a({4}, {1.0, 0.2, 0.1, 0.15});
    Tensor b({4}, {0.1, 0.1, 0.9, 0.1});
    CHECK(vda_signal(a, b, SignalMode::kThreshold, 0.5).value() ==
          Catch::Approx(0.1));
  }
  SECTION("threshold equals dot when keep_fraction=1 and f is all-ones") {
    Tensor ones = Tensor::full({4}, 1.0);
    Tensor fm2({4}, {0.3, 0.8, 0.1, 0.5});
    CHECK(vda_signal(ones, fm2, SignalMode::kThreshold, 1.0).value() ==
          Catch::Approx(vda_signal(ones, fm2, SignalMode::kDot).value()));
  }
}

TEST_CASE("attention_map hand cases") {
  SECTION("signal constant wrt activations gives the zero map") {
    Tensor a = Tensor::full({2, 2, 2}, 1.0);
    a.set_leaf();
    Tensor s = affine(sum(mul(a, Tensor::zeros({2, 2, 2}))), 1.0, 3.0);
    AttentionMap m = attention_map(s, a, false);
    for (int i = 0; i < m.raw.size(); ++i) CHECK(m.raw[i] == 0.0);
  }
  SECTION("s = sum of first channel: map is the normalized first channel") {
    Tensor a({2, 2, 2}, {1, 2, 3, 4, -9, 7, 0, 2});
    a.set_leaf();
    Tensor s = sum(mul(a, Tensor({2, 2, 2}, {1, 1, 1, 1, 0, 0, 0, 0})));
    AttentionMap m = attention_map(s, a, false);
    CHECK(m.raw[0] == Catch::Approx(0.25));
    CHECK(m.raw[1] == Catch::Approx(0.5));
    CHECK(m.raw[2] == Catch::Approx(0.75));
    CHECK(m.raw[3] == Catch::Approx(1.0));
  }
}

TEST_CASE("attention_map equals finite-difference oracle on tiny encoders") {
  auto r = check_attention_map_oracle(GradCheckSize::kSmall, 1e-5);
  INFO(r.name << " worst=" << r.worst_rel_error);
  CHECK(r.pass());
}

TEST_CASE("soften fixed points") {
  Tensor m({3}, {0.5, 1.0, 0.0});
  Tensor soft = soften(m);
  CHECK(soft[0] == 0.5);  // sigma(16*(0.5-0.5)) exactly
  CHECK(soft[1] == Catch::Approx(0.999665).margin(1e-6));
  CHECK(soft[2] == Catch::Approx(0.000335).margin(1e-6));
}

TEST_CASE("dida_loss identities") {
  Tensor x({4}, {0.2, 0.8, 0.5, 0.1});
  CHECK(dida_loss(x, x).value() == Catch::Approx(0.0).margin(1e-9));
  CHECK(dida_loss(Tensor({2}, {1, 0}), Tensor({2}, {0, 1})).value() ==
        Catch::Approx(1.0));
  CHECK(dida_loss(Tensor({2}, {1, 0}), Tensor({2}, {1, 1})).value() ==
        Catch::Approx(1.0 - 1.0 / std::sqrt(2.0)));

  SECTION("range [0,1] and scale invariance on random nonnegative maps") {
    Rng rng(6);
    for (int t = 0; t < 50; ++t) {
      std::vector<double> a(9), b(9);
      for (auto& v : a) v = rng.uniform();
      for (auto& v : b) v = rng.uniform();
      Tensor ta({3, 3}, a), tb({3, 3}, b);
      double loss = dida_loss(ta, tb).value();
      CHECK(loss >= 0.0);
      CHECK(loss <= 1.0);
      double c = rng.uniform(0.1, 10.0);
      CHECK(dida_loss(scale(ta, c), tb).value() ==
            Catch::Approx(loss).margin(1e-9));
    }
  }
}

TEST_CASE("dida_forward") {
  EncoderConfig cfg;
  cfg.input_size = 16;
  cfg.channels = {4, 6};
  cfg.feature_dim = 8;
  cfg.seed = 21;
  Encoder enc(cfg);
  DataConfig dc;
  dc.size = 16;
  dc.min_obj_size = 3;
  dc.max_obj_size = 4;
  dc.seed = 17;
  Scene scene = generate_scene(dc, 0);

  SECTION("loss in [0,1] and bit-identical across calls") {
    auto [l1, m1] = dida_forward(enc, scene);
    auto [l2, m2] = dida_forward(enc, scene);
    CHECK(l1.value() >= 0.0);
    CHECK(l1.value() <= 1.0);
    CHECK(l1.value() == l2.value());
  }
  SECTION("raw map normalized, softened in (0,1)") {
    auto [loss, map] = dida_forward(enc, scene);
    double peak = 0.0;
    for (int i = 0; i < map.raw.size(); ++i) {
      CHECK(map.raw[i] >= 0.0);
      CHECK(map.raw[i] <= 1.0);
      peak = std::max(peak, map.raw[i]);
      CHECK(map.softened[i] > 0.0);
      CHECK(map.softened[i] < 1.0);
    }
    CHECK(peak == Catch::Approx(1.0));
  }
  SECTION("propagates NoSalientRegion") {
    Scene bad = scene;
    bad.saliency = Tensor::zeros({16, 16});
    CHECK_THROWS_AS(dida_forward(enc, bad), NoSalientRegion);
  }
  SECTION("full-pipeline gradient matches finite differences (double backprop)") {
    auto r = check_dida_double_backprop(GradCheckSize::kTiny, 1e-4);
    INFO(r.name << " worst=" << r.worst_rel_error);
    CHECK(r.pass());
  }
  SECTION("gradient vanishes when the softened map already matches the target") {
    // Construct the optimum directly: target := softened map. Cosine of a
    // vector with itself is stationary, so all parameter gradients vanish.
    auto [masked, spec] = mask_salient_region(scene.image, scene.saliency);
    (void)spec;
    EncoderOutput out = enc.forward(scene.image);
    EncoderOutput out_m = enc.forward(masked);
    Tensor s = vda_signal(out.features, out_m.features, SignalMode::kDot);
    AttentionMap map = attention_map(s, out.activations, true);
    Tensor soft = soften(map.raw);
    Tensor loss = dida_loss(soft, soft.detached());
    auto grads = backward(loss, enc.parameters());
    for (const auto& g : grads)
      for (int i = 0; i < g.size(); ++i)
        CHECK(std::fabs(g[i]) < 1e-10);
  }
}

TEST_CASE("contrastive_loss") {
  SECTION("identical positives with orthogonal negatives beat uniform logits") {
    std::vector<Tensor> feats{
        Tensor({4}, {1, 0, 0, 0}), Tensor({4}, {1, 0, 0, 0}),
        Tensor({4}, {0, 0, 1, 0}), Tensor({4}, {0, 0, 1, 0})};
    CHECK(contrastive_loss(feats, 0.5).value() < std::log(2.0));
  }
  SECTION("permutation of scene order leaves the loss unchanged") {
    Rng rng(12);
    std::vector<Tensor> feats;
    for (int i = 0; i < 6; ++i) {
      std::vector<double> v(5);
      for (auto& x : v) x = rng.uniform(0.05, 1.0);
      feats.emplace_back(std::vector<int>{5}, v);
    }
    double base = contrastive_loss(feats, 0.7).value();
    std::vector<Tensor> permuted{feats[4], feats[5], feats[0],
                                 feats[1], feats[2], feats[3]};
    CHECK(contrastive_loss(permuted, 0.7).value() ==
          Catch::Approx(base).margin(1e-12));
  }
  SECTION("batch below two scenes rejected") {
    std::vector<Tensor> feats{Tensor({2}, {1, 0}), Tensor({2}, {1, 0})};
    CHECK_THROWS_AS(contrastive_loss(feats, 0.5), std::invalid_argument);
    CHECK_THROWS_AS(contrastive_loss({}, 0.5), std::invalid_argument);
  }
  SECTION("gradient matches finite differences") {
    auto r = check_loss_ops(GradCheckSize::kTiny, 1e-6);
    INFO(r.name << " worst=" << r.worst_rel_error);
    CHECK(r.pass());
  }
}
