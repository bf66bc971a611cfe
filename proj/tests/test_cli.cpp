#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "dida/image_io.hpp"
#include "dida/train.hpp"

namespace fs = std::filesystem;

namespace {

std::string cli_path() {
#ifdef DIDA_CLI_PATH
  return DIDA_CLI_PATH;
#else
  return "./dida_cli";
#endif
}

int run(const std::string& args) {
  std::string cmd = cli_path() + " " + args + " > cli_stdout.txt 2>&1";
  int rc = std::system(cmd.c_str());
  return rc == -1 ? -1 : WEXITSTATUS(rc);
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::path("cli_tmp") / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str() const { return path.string(); }
};

}  // namespace

TEST_CASE("cli exit codes") {
  CHECK(run("--help") == 0);
  CHECK(run("gen --help") == 0);
  CHECK(run("definitely-not-a-command") == 1);
  CHECK(run("gen") == 1);  // missing required --out
  CHECK(run("train --data no/such/dir --steps 1") == 2);
  CHECK(run("attend --ckpt missing.bin --image missing.ppm --mask missing.pgm") ==
        2);
}

TEST_CASE("cli gen writes a loadable dataset") {
  TempDir dir("gen");
  REQUIRE(run("gen --out " + dir.str() + " --count 3 --seed 5") == 0);
  CHECK(fs::exists(dir.path / "manifest.tsv"));
  for (int i = 0; i < 3; ++i) {
    CHECK(fs::exists(dir.path / ("image_" + std::to_string(i) + ".ppm")));
    CHECK(fs::exists(dir.path / ("mask_" + std::to_string(i) + ".pgm")));
  }
  auto scenes = dida::load_dataset((dir.path / "manifest.tsv").string());
  REQUIRE(scenes.size() == 3);
  CHECK(scenes[0].image.shape() == std::vector<int>{3, 32, 32});

  SECTION("same seed reproduces identical bytes") {
    TempDir again("gen2");
    REQUIRE(run("gen --out " + again.str() + " --count 3 --seed 5") == 0);
    for (int i = 0; i < 3; ++i) {
      CHECK(slurp((dir.path / ("image_" + std::to_string(i) + ".ppm")).string()) ==
            slurp((again.path / ("image_" + std::to_string(i) + ".ppm")).string()));
      CHECK(slurp((dir.path / ("mask_" + std::to_string(i) + ".pgm")).string()) ==
            slurp((again.path / ("mask_" + std::to_string(i) + ".pgm")).string()));
    }
  }
  SECTION("object count range is honored") {
    TempDir two("gen3");
    REQUIRE(run("gen --out " + two.str() + " --count 4 --size 48 --seed 7 "
                "--objects 2..2") == 0);
    auto pair_scenes = dida::load_dataset((two.path / "manifest.tsv").string());
    for (const auto& s : pair_scenes) CHECK(sum(s.saliency).value() > 0.0);
  }
}

TEST_CASE("cli train, eval and attend round trip") {
  TempDir dir("pipeline");
  REQUIRE(run("gen --out " + dir.str() + " --count 12 --seed 11") == 0);
  std::string ckpt = (dir.path / "model.bin").string();
  std::string report = (dir.path / "report.csv").string();
  REQUIRE(run("train --data " + dir.str() + " --steps 30 --batch 4 "
              "--eval-interval 10 --seed 2 --out " + ckpt +
              " --report " + report) == 0);
  REQUIRE(fs::exists(ckpt));

  SECTION("report csv has the expected header and rows") {
    std::ifstream in(report);
    std::string header;
    REQUIRE(std::getline(in, header));
    CHECK(header == "step,dida_loss,contrastive_loss,mean_iou");
    int rows = 0;
    std::string line;
    while (std::getline(in, line))
      if (!line.empty()) ++rows;
    CHECK(rows >= 3);
  }
  SECTION("training is reproducible end to end") {
    std::string ckpt2 = (dir.path / "model2.bin").string();
    REQUIRE(run("train --data " + dir.str() + " --steps 30 --batch 4 "
                "--eval-interval 10 --seed 2 --out " + ckpt2 +
                " --report " + report + ".2") == 0);
    CHECK(slurp(ckpt) == slurp(ckpt2));
    CHECK(slurp(report) == slurp(report + ".2"));
  }
  SECTION("eval writes per-scene rows plus a mean line") {
    std::string csv = (dir.path / "eval.csv").string();
    REQUIRE(run("eval --ckpt " + ckpt + " --data " + dir.str() +
                " --out " + csv) == 0);
    std::ifstream in(csv);
    std::string header;
    REQUIRE(std::getline(in, header));
    CHECK(header == "index,iou");
    std::string line, last;
    int rows = 0;
    while (std::getline(in, line))
      if (!line.empty()) {
        last = line;
        ++rows;
      }
    CHECK(rows == 13);  // 12 scenes + mean
    CHECK(last.rfind("mean,", 0) == 0);
    double mean = std::stod(last.substr(5));
    CHECK(mean >= 0.0);
    CHECK(mean <= 1.0);
  }
  SECTION("attend emits raw, soft and seed maps") {
    std::string prefix = (dir.path / "att").string();
    REQUIRE(run("attend --ckpt " + ckpt + " --image " +
                (dir.path / "image_0.ppm").string() + " --mask " +
                (dir.path / "mask_0.pgm").string() + " --out " + prefix) == 0);
    for (const char* suffix : {"_raw.pgm", "_soft.pgm", "_seeds.pgm"}) {
      REQUIRE(fs::exists(prefix + suffix));
      dida::Tensor t = dida::read_image(prefix + suffix);
      CHECK(t.shape() == std::vector<int>{32, 32});
    }
    // Seed maps carry only the three trimap levels.
    dida::Tensor seeds = dida::read_image(prefix + "_seeds.pgm");
    for (int i = 0; i < seeds.size(); ++i) {
      double v = seeds[i] * 255.0;
      CHECK((std::fabs(v) < 0.5 || std::fabs(v - 128) < 0.5 ||
             std::fabs(v - 255) < 0.5));
    }
  }
}

TEST_CASE("cli gradcheck subcommand passes") {
  CHECK(run("gradcheck --size tiny") == 0);
}

TEST_CASE("cli attend matches the golden outputs") {
#ifdef DIDA_GOLDEN_DIR
  std::string golden = DIDA_GOLDEN_DIR;
  TempDir dir("golden");
  std::string prefix = (dir.path / "att").string();
  REQUIRE(run("attend --ckpt " + golden + "/model.bin --image " + golden +
              "/scene.ppm --mask " + golden + "/scene_mask.pgm --out " +
              prefix) == 0);
  for (const char* suffix : {"_raw.pgm", "_soft.pgm", "_seeds.pgm"}) {
    INFO(suffix);
    CHECK(slurp(prefix + suffix) == slurp(golden + "/att" + suffix));
  }
#else
  WARN("golden directory not configured");
#endif
}
