#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "affect/data.hpp"
#include "affect/model_io.hpp"
#include "affect/training.hpp"
#include "doctest.h"
#include "helpers.hpp"
#include "json.hpp"

using namespace affect;

namespace {

struct Run {
  int status = -1;
  std::string out;
};

/// Runs the CLI; stderr is merged into the captured output only when asked.
Run affectctl(const std::string& args, bool merge_stderr = false) {
  const std::string cmd = std::string(AFFECTCTL_PATH) + " " + args + (merge_stderr ? " 2>&1" : " 2>/dev/null");
  Run r;
  FILE* p = ::popen(cmd.c_str(), "r");
  REQUIRE(p != nullptr);
  std::array<char, 4096> buf{};
  while (std::size_t n = std::fread(buf.data(), 1, buf.size(), p)) r.out.append(buf.data(), n);
  const int raw = ::pclose(p);
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  return r;
}

std::string q(const std::filesystem::path& p) { return "'" + p.string() + "'"; }

struct Workspace {
  testing::TempDir dir;
  std::vector<std::filesystem::path> images;

  Workspace() {
    Rng rng(3);
    for (int c = 0; c < 4; ++c) {
      const auto t = testing::class_pattern(c * 2, rng);
      image::RgbImage img{128, 128, std::vector<std::uint8_t>(128 * 128 * 3)};
      for (std::size_t i = 0; i < t.size(); ++i) img.pixels[i] = std::uint8_t(std::lround(t[i] * 255.0f));
      images.push_back(dir / ("img" + std::to_string(c) + ".png"));
      image::write_png(img, images.back());
    }
  }

  std::filesystem::path manifest(const std::string& name, const std::vector<int>& labels) {
    const auto path = dir / name;
    std::ofstream out(path);
    out << data::kManifestHeader << "\n";
    for (std::size_t i = 0; i < images.size(); ++i) {
      out << images[i].filename().string() << ",,,,," << labels[i] << "," << (0.2 * double(i) - 0.3) << ","
          << (0.5 - 0.25 * double(i)) << "\n";
    }
    return path;
  }
};

}  // namespace

TEST_CASE("train with zero epochs saves the initial weights") {
  Workspace w;
  const auto m = w.manifest("train.csv", {0, 2, 4, 6});
  const auto out = w.dir / "em.afw";
  const auto r = affectctl("train --arch arch3-mobilenet --head emotion --manifest " + q(m) +
                           " --epochs 0 --seed 9 --out " + q(out));
  CAPTURE(r.out);
  REQUIRE(r.status == 0);
  const auto model = io::load(out);
  CHECK(model.graph.arch == arch::ArchId::MobileNet);
  CHECK(io::serialize(model) == io::serialize(arch::build(arch::ArchId::MobileNet, arch::Head::Emotion, 9)));
  const auto log = w.dir / "em.afw.log.jsonl";
  REQUIRE(std::filesystem::exists(log));
  CHECK(std::filesystem::file_size(log) == 0);
}

TEST_CASE("train one epoch, then fine-tune a va head from it") {
  Workspace w;
  const auto m = w.manifest("train.csv", {0, 2, 4, 6});
  const auto em = w.dir / "em.afw";
  auto r = affectctl("train --arch arch3-mobilenet --head emotion --manifest " + q(m) + " --val-manifest " + q(m) +
                     " --epochs 1 --batch 4 --seed 1 --out " + q(em));
  CAPTURE(r.out);
  REQUIRE(r.status == 0);
  std::ifstream log(w.dir / "em.afw.log.jsonl");
  std::string line;
  REQUIRE(std::getline(log, line));
  const auto j = nlohmann::json::parse(line);
  CHECK(j.at("epoch") == 1);
  CHECK(j.at("metrics").contains("acc"));

  const auto va = w.dir / "va.afw";
  r = affectctl("train --head va --init " + q(em) + " --manifest " + q(m) + " --epochs 1 --batch 2 --out " + q(va));
  CAPTURE(r.out);
  REQUIRE(r.status == 0);
  const auto tuned = io::load(va);
  CHECK(tuned.graph.head == arch::Head::ValenceArousal);

  r = affectctl("train --arch arch1-alexnet --head va --init " + q(em) + " --manifest " + q(m) +
                " --epochs 1 --out " + q(w.dir / "x.afw"));
  CHECK(r.status != 0);
}

TEST_CASE("eval prints the metric table") {
  Workspace w;
  const auto em_path = w.dir / "em.afw";
  const auto va_path = w.dir / "va.afw";
  io::save(arch::build(arch::ArchId::MobileNet, arch::Head::Emotion, 4), em_path);
  io::save(arch::build(arch::ArchId::MobileNet, arch::Head::ValenceArousal, 4), va_path);

  // Label each image with the model's own prediction: a perfectly predicted set.
  const auto model = io::load(em_path);
  std::vector<int> labels;
  for (const auto& p : w.images) {
    const auto probs = model.predict(data::preprocess(image::read_file(p)));
    labels.push_back(int(std::max_element(probs.data().begin(), probs.data().end()) - probs.data().begin()));
  }
  const auto m = w.manifest("self.csv", labels);

  auto r = affectctl("eval --model " + q(em_path) + " --manifest " + q(m));
  CAPTURE(r.out);
  REQUIRE(r.status == 0);
  std::istringstream lines(r.out);
  std::vector<std::string> names;
  std::string line;
  while (std::getline(lines, line)) {
    std::istringstream ls(line);
    std::string name;
    ls >> name;
    names.push_back(name);
  }
  REQUIRE(names.size() >= 7);
  CHECK(names[0] == "Metric");
  CHECK(std::vector<std::string>(names.begin() + 1, names.begin() + 7) ==
        std::vector<std::string>{"ACC", "F1", "KAPPA", "ALPHA", "AUCPR", "AUC"});
  CHECK(r.out.find("ACC     1.000\n") != std::string::npos);

  r = affectctl("eval --json --model " + q(em_path) + " --manifest " + q(m));
  REQUIRE(r.status == 0);
  CHECK(nlohmann::json::parse(r.out).at("acc").get<double>() == 1.0);

  r = affectctl("eval --model " + q(va_path) + " --manifest " + q(m));
  CAPTURE(r.out);
  REQUIRE(r.status == 0);
  for (const char* row : {"RMSE", "CORR", "SAGR", "CCC", "Valence", "Arousal"}) CHECK(r.out.find(row) != std::string::npos);
}

TEST_CASE("predict, bench and inspect") {
  Workspace w;
  const auto em = w.dir / "em.afw";
  const auto va = w.dir / "va.afw";
  io::save(arch::build(arch::ArchId::MobileNet, arch::Head::Emotion, 4), em);
  io::save(arch::build(arch::ArchId::MobileNet, arch::Head::ValenceArousal, 4), va);

  auto r = affectctl("predict --emotion-model " + q(em) + " --va-model " + q(va) + " --image " + q(w.images[0]) +
                     " --bbox 0,0,100,100");
  CAPTURE(r.out);
  REQUIRE(r.status == 0);
  const auto j = nlohmann::json::parse(r.out);
  double sum = 0;
  for (const auto& [k, v] : j.at("probabilities").items()) sum += v.get<double>();
  CHECK(std::abs(sum - 1.0) < 1e-6);

  r = affectctl("bench --model " + q(em) + " --image " + q(w.images[1]) + " --runs 3 --json");
  REQUIRE(r.status == 0);
  const auto b = nlohmann::json::parse(r.out);
  CHECK(b.at("latencies_ms").size() == 3);
  CHECK(b.at("fps").get<double>() * b.at("mean_ms").get<double>() == doctest::Approx(1000.0));

  r = affectctl("inspect --model " + q(em));
  REQUIRE(r.status == 0);
  CHECK(r.out.find("arch3-mobilenet") != std::string::npos);
  CHECK(r.out.find("3237064") != std::string::npos);

  r = affectctl("inspect --arch arch2-vggnet --head emotion");
  CAPTURE(r.out);
  REQUIRE(r.status == 0);
  CHECK(r.out.find("3746872") != std::string::npos);
  CHECK(r.out.find("4x4x128") != std::string::npos);
}

TEST_CASE("bad invocations fail cleanly") {
  Workspace w;
  CHECK(affectctl("").status != 0);
  CHECK(affectctl("train --arch arch9 --head emotion --manifest x --out y").status != 0);
  CHECK(affectctl("train --arch arch3-mobilenet --head emotion --manifest " + q(w.dir / "none.csv") +
                  " --epochs 0 --out " + q(w.dir / "o.afw"))
            .status != 0);
  io::save(arch::build(arch::ArchId::MobileNet, arch::Head::Emotion), w.dir / "em.afw");
  CHECK(affectctl("inspect --model " + q(w.dir / "em.afw") + " --arch arch2-vggnet").status != 0);
  const auto r =
      affectctl("eval --model " + q(w.images[0]) + " --manifest " + q(w.manifest("m.csv", {0, 1, 2, 3})), true);
  CHECK(r.status == 1);
  CHECK(r.out.rfind("error:", 0) == 0);
}
