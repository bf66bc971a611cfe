#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <fstream>
#include <sstream>

#include "dida/train.hpp"

using namespace dida;

namespace {

std::vector<Scene> make_scenes(int count, std::uint64_t seed, int size = 16) {
  DataConfig cfg;
  cfg.size = size;
  cfg.min_obj_size = 3;
  cfg.max_obj_size = 4;
  cfg.seed = seed;
  std::vector<Scene> out;
  for (int i = 0; i < count; ++i) out.push_back(generate_scene(cfg, i));
  return out;
}

Encoder make_encoder(std::uint64_t seed) {
  EncoderConfig cfg;
  cfg.input_size = 16;
  cfg.channels = {4, 6};
  cfg.feature_dim = 8;
  cfg.seed = seed;
  return Encoder(cfg);
}

}  // namespace

TEST_CASE("binarize") {
  Tensor t({3}, {0.4, 0.5, 0.6});
  Tensor b = binarize(t);
  CHECK(b[0] == 0.0);
  CHECK(b[1] == 0.0);  // strictly greater than the threshold
  CHECK(b[2] == 1.0);
}

TEST_CASE("iou") {
  CHECK(iou(Tensor({4}, {1, 1, 0, 0}), Tensor({4}, {0, 1, 1, 0})) ==
        Catch::Approx(1.0 / 3.0));
  CHECK(iou(Tensor({2}, {1, 1}), Tensor({2}, {1, 1})) == 1.0);
  CHECK(iou(Tensor({2}, {1, 0}), Tensor({2}, {0, 1})) == 0.0);
  CHECK(iou(Tensor::zeros({4}), Tensor::zeros({4})) == 1.0);
  CHECK_THROWS_AS(iou(Tensor::zeros({4}), Tensor::zeros({5})),
                  std::invalid_argument);
}

TEST_CASE("grabcut_seeds") {
  Tensor map({5}, {0.95, 0.71, 0.5, 0.1, 0.05});
  Tensor tri = grabcut_seeds(map);
  CHECK(tri[0] == static_cast<double>(TrimapLabel::kForeground));
  CHECK(tri[1] == static_cast<double>(TrimapLabel::kForeground));
  CHECK(tri[2] == static_cast<double>(TrimapLabel::kUnknown));
  CHECK(tri[3] == static_cast<double>(TrimapLabel::kUnknown));  // lo is strict
  CHECK(tri[4] == static_cast<double>(TrimapLabel::kBackground));

  SECTION("label is monotone in the map value") {
    Rng rng(4);
    for (int t = 0; t < 200; ++t) {
      double a = rng.uniform(), b = rng.uniform();
      if (a > b) std::swap(a, b);
      Tensor tr = grabcut_seeds(Tensor({2}, {a, b}));
      CHECK(tr[0] <= tr[1]);
    }
  }
  SECTION("pgm encoding uses 0, 128, 255") {
    Tensor vals = trimap_to_pgm_values(tri);
    CHECK(vals[0] == 1.0);
    CHECK(vals[2] == Catch::Approx(128.0 / 255.0));
    CHECK(vals[4] == 0.0);
  }
}

TEST_CASE("optimizer") {
  SECTION("zero gradients leave parameters untouched") {
    for (auto tag : {OptimizerTag::kSgd, OptimizerTag::kAdam}) {
      Tensor p({3}, {0.1, -0.2, 0.3});
      p.set_leaf();
      Optimizer opt(tag, {p}, 0.5);
      opt.step({Tensor::zeros({3})});
      CHECK(p[0] == 0.1);
      CHECK(p[1] == -0.2);
      CHECK(p[2] == 0.3);
    }
  }
  SECTION("sgd follows -lr * g") {
    Tensor p({2}, {1.0, 2.0});
    p.set_leaf();
    Optimizer opt(OptimizerTag::kSgd, {p}, 0.1);
    opt.step({Tensor({2}, {1.0, -2.0})});
    CHECK(p[0] == Catch::Approx(0.9));
    CHECK(p[1] == Catch::Approx(2.2));
  }
  SECTION("adam first step moves by lr per coordinate") {
    Tensor p({2}, {0.0, 0.0});
    p.set_leaf();
    Optimizer opt(OptimizerTag::kAdam, {p}, 0.01);
    opt.step({Tensor({2}, {3.0, -0.5})});
    // Bias correction makes m_hat/sqrt(v_hat) = sign(g) on step one.
    CHECK(p[0] == Catch::Approx(-0.01).margin(1e-6));
    CHECK(p[1] == Catch::Approx(0.01).margin(1e-6));
  }
  SECTION("gradient count mismatch rejected") {
    Tensor p({2}, {0.0, 0.0});
    p.set_leaf();
    Optimizer opt(OptimizerTag::kSgd, {p}, 0.1);
    CHECK_THROWS_AS(opt.step({}), std::invalid_argument);
  }
}

TEST_CASE("train rejects bad configs") {
  auto scenes = make_scenes(8, 1);
  Encoder enc = make_encoder(3);
  TrainConfig cfg;
  cfg.steps = 0;
  CHECK_THROWS_AS(train(enc, scenes, scenes, cfg), std::invalid_argument);
  cfg = TrainConfig{};
  cfg.learning_rate = 0.0;
  CHECK_THROWS_AS(train(enc, scenes, scenes, cfg), std::invalid_argument);
  cfg = TrainConfig{};
  cfg.steps = 1;
  CHECK_THROWS_AS(train(enc, {}, scenes, cfg), std::invalid_argument);
}

TEST_CASE("training is deterministic and reduces the saliency loss") {
  auto scenes = make_scenes(16, 2);
  std::vector<Scene> heldout(scenes.begin() + 12, scenes.end());
  std::vector<Scene> trainset(scenes.begin(), scenes.begin() + 12);

  TrainConfig cfg;
  cfg.steps = 60;
  cfg.batch_size = 4;
  cfg.eval_interval = 20;
  cfg.seed = 5;

  Encoder a = make_encoder(7), b = make_encoder(7);
  TrainReport ra = train(a, trainset, heldout, cfg);
  TrainReport rb = train(b, trainset, heldout, cfg);

  SECTION("identical seeds give bit-identical parameters and records") {
    auto pa = a.parameters(), pb = b.parameters();
    for (std::size_t i = 0; i < pa.size(); ++i)
      for (int j = 0; j < pa[i].size(); ++j)
        CHECK(pa[i][j] == pb[i][j]);
    REQUIRE(ra.records.size() == rb.records.size());
    for (std::size_t i = 0; i < ra.records.size(); ++i) {
      CHECK(ra.records[i].dida_loss == rb.records[i].dida_loss);
      CHECK(ra.records[i].mean_iou == rb.records[i].mean_iou);
    }
  }
  SECTION("report covers the run and the loss drops") {
    REQUIRE(ra.records.size() >= 3);
    CHECK(ra.records.front().step < ra.records.back().step);
    CHECK(ra.records.back().dida_loss < ra.records.front().dida_loss);
  }
  SECTION("csv format") {
    ra.write_csv("train_report_test.csv");
    std::ifstream in("train_report_test.csv");
    std::string header;
    REQUIRE(std::getline(in, header));
    CHECK(header == "step,dida_loss,contrastive_loss,mean_iou");
    int rows = 0;
    std::string line;
    while (std::getline(in, line))
      if (!line.empty()) ++rows;
    CHECK(rows == static_cast<int>(ra.records.size()));
    std::remove("train_report_test.csv");
  }
}

TEST_CASE("checkpoints written during training load back") {
  auto scenes = make_scenes(8, 9);
  Encoder enc = make_encoder(11);
  TrainConfig cfg;
  cfg.steps = 10;
  cfg.eval_interval = 5;
  cfg.seed = 1;
  cfg.checkpoint_path = "train_ckpt_test.bin";
  train(enc, scenes, scenes, cfg);

  Encoder loaded = Encoder::load("train_ckpt_test.bin");
  auto pa = enc.parameters(), pb = loaded.parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i)
    for (int j = 0; j < pa[i].size(); ++j)
      CHECK(pa[i][j] == pb[i][j]);
  std::remove("train_ckpt_test.bin");
}

TEST_CASE("trained encoders separate original from masked features") {
  // After a short run, the feature distance between a scene and its
  // saliency-masked version should beat an untrained encoder's on a clear
  // majority of fresh scenes.
  auto scenes = make_scenes(24, 13);
  std::vector<Scene> trainset(scenes.begin(), scenes.begin() + 16);
  TrainConfig cfg;
  cfg.steps = 120;
  cfg.batch_size = 4;
  cfg.eval_interval = 40;
  cfg.seed = 2;

  Encoder trained = make_encoder(17);
  Encoder untrained = make_encoder(17);
  train(trained, trainset, trainset, cfg);

  auto gap = [](const Encoder& e, const Scene& s) {
    auto [masked, spec] = mask_salient_region(s.image, s.saliency);
    (void)spec;
    GradMode off(false);
    Tensor d = difference_vector(e.forward(s.image).features,
                                 e.forward(masked).features);
    return l2_norm(d).value();
  };

  int wins = 0;
  DataConfig fresh;
  fresh.size = 16;
  fresh.min_obj_size = 3;
  fresh.max_obj_size = 4;
  fresh.seed = 99;
  for (int i = 0; i < 20; ++i) {
    Scene s = generate_scene(fresh, i);
    if (gap(trained, s) > gap(untrained, s)) ++wins;
  }
  CHECK(wins >= 16);
}

TEST_CASE("divergence raises instead of silently corrupting the run") {
  auto scenes = make_scenes(8, 21);
  Encoder enc = make_encoder(23);
  TrainConfig cfg;
  cfg.steps = 200;
  cfg.batch_size = 4;
  cfg.learning_rate = 1e6;  // guaranteed blow-up
  cfg.eval_interval = 200;
  cfg.seed = 3;
  CHECK_THROWS_AS(train(enc, scenes, scenes, cfg), std::exception);
}
