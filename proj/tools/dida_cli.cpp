// Command-line front end: scene generation, training, attention export,
// grounding evaluation, and gradient auditing.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "dida/attention.hpp"
#include "dida/encoder.hpp"
#include "dida/gradcheck.hpp"
#include "dida/image_io.hpp"
#include "dida/scene.hpp"
#include "dida/train.hpp"

namespace fs = std::filesystem;

namespace {

int worker_threads() {
  if (const char* env = std::getenv("DIDA_THREADS")) {
    int n = std::atoi(env);
    if (n >= 1) return n;
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw ? static_cast<int>(hw) : 1;
}

/// Runs fn(i) for i in [0, n) on up to worker_threads() threads. Each
/// iteration owns its differentiation graph, so chunks are independent.
template <typename Fn>
void parallel_for(int n, Fn&& fn) {
  int threads = std::min(worker_threads(), n);
  if (threads <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  for (int t = 0; t < threads; ++t)
    pool.emplace_back([&, t] {
      for (int i = t; i < n; i += threads) fn(i);
    });
  for (auto& th : pool) th.join();
}

bool parse_range(const std::string& text, int& lo, int& hi) {
  auto pos = text.find("..");
  if (pos == std::string::npos) return false;
  try {
    lo = std::stoi(text.substr(0, pos));
    hi = std::stoi(text.substr(pos + 2));
  } catch (...) {
    return false;
  }
  return true;
}

struct GenArgs {
  std::string out;
  int count = 16;
  int size = 32;
  std::uint64_t seed = 1;
  std::string objects = "1..3";
  std::string obj_size = "6..9";
  std::string background = "noise";
};

int cmd_gen(const GenArgs& a) {
  dida::DataConfig cfg;
  cfg.size = a.size;
  cfg.seed = a.seed;
  if (!parse_range(a.objects, cfg.min_objects, cfg.max_objects))
    throw std::invalid_argument("--objects: expected MIN..MAX");
  if (!parse_range(a.obj_size, cfg.min_obj_size, cfg.max_obj_size))
    throw std::invalid_argument("--obj-size: expected MIN..MAX");
  cfg.background = a.background == "gradient" ? dida::Background::kSmoothGradient
                                              : dida::Background::kUniformNoise;
  cfg.validate();

  std::cout << "config: gen out=" << a.out << " count=" << a.count
            << " size=" << cfg.size << " seed=" << cfg.seed
            << " objects=" << cfg.min_objects << ".." << cfg.max_objects
            << " obj-size=" << cfg.min_obj_size << ".." << cfg.max_obj_size
            << " background=" << a.background << "\n";

  fs::create_directories(a.out);
  std::vector<dida::ManifestEntry> entries(a.count);
  std::vector<dida::Scene> scenes(a.count);
  parallel_for(a.count,
               [&](int i) { scenes[i] = dida::generate_scene(cfg, i); });
  for (int i = 0; i < a.count; ++i) {
    dida::ManifestEntry e;
    e.index = i;
    e.image_path = (fs::path(a.out) / ("image_" + std::to_string(i) + ".ppm")).string();
    e.mask_path = (fs::path(a.out) / ("mask_" + std::to_string(i) + ".pgm")).string();
    dida::write_image(e.image_path, scenes[i].image);
    dida::write_image(e.mask_path, scenes[i].saliency);
    entries[i] = std::move(e);
  }
  dida::write_manifest((fs::path(a.out) / "manifest.tsv").string(), entries);
  std::cout << "wrote " << a.count << " scenes to " << a.out << "\n";
  return 0;
}

struct TrainArgs {
  std::string data;
  std::string out = "encoder.ckpt";
  std::string report = "report.csv";
  int steps = 800;
  int batch = 4;
  double lr = 1e-3;
  double lambda_dida = 1.0;
  double lambda_con = 1.0;
  double temperature = 2.0;
  int eval_interval = 100;
  std::uint64_t seed = 0;
  std::string optimizer = "adam";
  int feature_dim = 32;
};

int cmd_train(const TrainArgs& a) {
  auto scenes = dida::load_dataset((fs::path(a.data) / "manifest.tsv").string());
  if (scenes.empty()) throw std::runtime_error("train: empty dataset");
  int image_size = scenes.front().saliency.shape()[0];

  // Held-out split: last 20% of scene indices.
  int split = static_cast<int>(scenes.size()) -
              static_cast<int>(scenes.size()) / 5;
  if (split < 1) split = 1;
  std::vector<dida::Scene> train_set(scenes.begin(), scenes.begin() + split);
  std::vector<dida::Scene> heldout(scenes.begin() + split, scenes.end());

  dida::EncoderConfig ec;
  ec.input_size = image_size;
  ec.feature_dim = a.feature_dim;
  ec.seed = a.seed;
  dida::Encoder encoder(ec);

  dida::TrainConfig tc;
  tc.steps = a.steps;
  tc.batch_size = a.batch;
  tc.learning_rate = a.lr;
  tc.lambda_dida = a.lambda_dida;
  tc.lambda_contrastive = a.lambda_con;
  tc.temperature = a.temperature;
  tc.eval_interval = a.eval_interval;
  tc.seed = a.seed;
  tc.checkpoint_path = a.out;
  tc.optimizer = a.optimizer == "sgd" ? dida::OptimizerTag::kSgd
                                      : dida::OptimizerTag::kAdam;
  tc.validate();

  std::cout << "config: train data=" << a.data << " steps=" << tc.steps
            << " batch=" << tc.batch_size << " lr=" << tc.learning_rate
            << " lambda-dida=" << tc.lambda_dida
            << " lambda-con=" << tc.lambda_contrastive
            << " temperature=" << tc.temperature
            << " eval-interval=" << tc.eval_interval << " seed=" << tc.seed
            << " optimizer=" << a.optimizer << " out=" << a.out
            << " report=" << a.report << " (train=" << train_set.size()
            << " heldout=" << heldout.size() << ")\n";

  auto report = dida::train(encoder, train_set, heldout, tc);
  encoder.save(a.out);
  report.write_csv(a.report);
  for (const auto& r : report.records)
    std::cout << "step " << r.step << " dida=" << r.dida_loss
              << " contrastive=" << r.contrastive_loss
              << " mean_iou=" << r.mean_iou << "\n";
  return 0;
}

struct AttendArgs {
  std::string ckpt, image, mask, out = "attend";
  std::string mode = "dot";
};

int cmd_attend(const AttendArgs& a) {
  std::cout << "config: attend ckpt=" << a.ckpt << " image=" << a.image
            << " mask=" << a.mask << " mode=" << a.mode << " out=" << a.out
            << "\n";
  dida::Encoder encoder = dida::Encoder::load(a.ckpt);
  dida::Scene scene;
  scene.image = dida::read_image(a.image);
  dida::Tensor m = dida::read_image(a.mask);
  scene.saliency = dida::binarize(m, 0.5);
  if (scene.image.shape()[1] != encoder.config().input_size)
    throw std::runtime_error("attend: image size does not match checkpoint");

  dida::SignalMode mode = a.mode == "threshold" ? dida::SignalMode::kThreshold
                                                : dida::SignalMode::kDot;
  dida::AttentionMap map = dida::vda_diagnostic(encoder, scene, mode);
  int h = scene.saliency.shape()[0], w = scene.saliency.shape()[1];
  dida::Tensor raw_up = dida::bilinear_upsample(map.raw, h, w);
  dida::Tensor soft_up = dida::bilinear_upsample(map.softened, h, w);
  dida::Tensor seeds = dida::trimap_to_pgm_values(dida::grabcut_seeds(soft_up));

  dida::write_image(a.out + "_raw.pgm", raw_up);
  dida::write_image(a.out + "_soft.pgm", soft_up);
  dida::write_image(a.out + "_seeds.pgm", seeds);
  std::cout << "wrote " << a.out << "_{raw,soft,seeds}.pgm\n";
  return 0;
}

struct EvalArgs {
  std::string ckpt, data, out = "eval.csv";
  std::string mode = "dot";
};

int cmd_eval(const EvalArgs& a) {
  std::cout << "config: eval ckpt=" << a.ckpt << " data=" << a.data
            << " mode=" << a.mode << " out=" << a.out << "\n";
  dida::Encoder encoder = dida::Encoder::load(a.ckpt);
  auto entries = dida::read_manifest((fs::path(a.data) / "manifest.tsv").string());
  if (entries.empty()) throw std::runtime_error("eval: empty dataset");
  auto scenes = dida::load_dataset((fs::path(a.data) / "manifest.tsv").string());
  dida::SignalMode mode = a.mode == "threshold" ? dida::SignalMode::kThreshold
                                                : dida::SignalMode::kDot;
  std::vector<double> ious(scenes.size());
  parallel_for(static_cast<int>(scenes.size()), [&](int i) {
    ious[i] = dida::scene_iou(encoder, scenes[i], mode);
  });
  std::ofstream csv(a.out);
  if (!csv) throw std::runtime_error("eval: cannot open " + a.out);
  csv.precision(17);
  csv << "index,iou\n";
  double mean = 0.0;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    csv << entries[i].index << ',' << ious[i] << '\n';
    mean += ious[i];
  }
  mean /= scenes.size();
  csv << "mean," << mean << '\n';
  std::cout << "mean_iou " << mean << "\n";
  return 0;
}

struct GradcheckArgs {
  std::string size = "small";
  double tol = -1.0;
};

int cmd_gradcheck(const GradcheckArgs& a) {
  std::cout << "config: gradcheck size=" << a.size << " tol="
            << (a.tol >= 0 ? std::to_string(a.tol) : std::string("per-suite defaults"))
            << "\n";
  auto size = a.size == "tiny" ? dida::GradCheckSize::kTiny
                               : dida::GradCheckSize::kSmall;
  auto results = dida::run_gradcheck(size, a.tol);
  bool ok = true;
  for (const auto& r : results) {
    std::printf("%-32s worst_rel_error=%.3e tol=%.1e %s\n", r.name.c_str(),
                r.worst_rel_error, r.tolerance, r.pass() ? "PASS" : "FAIL");
    ok = ok && r.pass();
  }
  if (!ok) throw std::runtime_error("gradcheck: tolerance exceeded");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Visual difference attention: synthetic-scene training and "
               "evaluation toolkit"};
  app.require_subcommand(1);
  app.set_config("--config")->description(
      "key=value file; command-line flags override file entries");

  GenArgs gen;
  auto* sgen = app.add_subcommand("gen", "generate a synthetic dataset");
  sgen->add_option("--out", gen.out, "output directory")->required();
  sgen->add_option("--count", gen.count, "number of scenes");
  sgen->add_option("--size", gen.size, "image height/width");
  sgen->add_option("--seed", gen.seed, "generator seed");
  sgen->add_option("--objects", gen.objects, "object count range MIN..MAX");
  sgen->add_option("--obj-size", gen.obj_size, "object size range MIN..MAX");
  sgen->add_option("--background", gen.background, "noise|gradient")
      ->check(CLI::IsMember({"noise", "gradient"}));

  TrainArgs tr;
  auto* strain = app.add_subcommand("train", "train an encoder");
  strain->add_option("--data", tr.data, "dataset directory")->required();
  strain->add_option("--steps", tr.steps, "optimizer steps");
  strain->add_option("--batch", tr.batch, "batch size");
  strain->add_option("--lr", tr.lr, "learning rate");
  strain->add_option("--lambda-dida", tr.lambda_dida, "DiDA loss weight");
  strain->add_option("--lambda-con", tr.lambda_con, "contrastive loss weight");
  strain->add_option("--temperature", tr.temperature, "contrastive temperature");
  strain->add_option("--eval-interval", tr.eval_interval, "steps between evals");
  strain->add_option("--seed", tr.seed, "training/init seed");
  strain->add_option("--optimizer", tr.optimizer, "adam|sgd")
      ->check(CLI::IsMember({"adam", "sgd"}));
  strain->add_option("--feature-dim", tr.feature_dim, "feature dimension k");
  strain->add_option("--out", tr.out, "checkpoint path");
  strain->add_option("--report", tr.report, "training report CSV path");

  AttendArgs at;
  auto* sat = app.add_subcommand("attend", "export attention maps for one scene");
  sat->add_option("--ckpt", at.ckpt, "checkpoint path")->required();
  sat->add_option("--image", at.image, "scene image (PPM)")->required();
  sat->add_option("--mask", at.mask, "saliency mask (PGM)")->required();
  sat->add_option("--mode", at.mode, "threshold|dot")
      ->check(CLI::IsMember({"threshold", "dot"}));
  sat->add_option("--out", at.out, "output prefix");

  EvalArgs ev;
  auto* sev = app.add_subcommand("eval", "mean IoU over a dataset");
  sev->add_option("--ckpt", ev.ckpt, "checkpoint path")->required();
  sev->add_option("--data", ev.data, "dataset directory")->required();
  sev->add_option("--mode", ev.mode, "threshold|dot")
      ->check(CLI::IsMember({"threshold", "dot"}));
  sev->add_option("--out", ev.out, "per-scene IoU CSV path");

  GradcheckArgs gc;
  auto* sgc = app.add_subcommand("gradcheck", "run the gradient-oracle suites");
  sgc->add_option("--size", gc.size, "small|tiny")
      ->check(CLI::IsMember({"small", "tiny"}));
  sgc->add_option("--tol", gc.tol, "tolerance override for every suite");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;  // stable contract: 1 = usage error
  }

  try {
    if (sgen->parsed()) return cmd_gen(gen);
    if (strain->parsed()) return cmd_train(tr);
    if (sat->parsed()) return cmd_attend(at);
    if (sev->parsed()) return cmd_eval(ev);
    if (sgc->parsed()) return cmd_gradcheck(gc);
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
