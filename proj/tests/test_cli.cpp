#include <sys/wait.h>
#include <unistd.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"
#include "ifnet/dataset.hpp"
#include "ifnet/eval.hpp"

namespace fs = std::filesystem;
using namespace ifnet;

namespace {

struct Run {
  int code;
  std::string out;
};

class Sandbox {
 public:
  Sandbox() : root_(fs::temp_directory_path() / ("ifnet_cli_" + std::to_string(::getpid()))) {
    fs::remove_all(root_);
    fs::create_directories(root_);
  }
  ~Sandbox() { fs::remove_all(root_); }

  fs::path path(const std::string& rel) const { return root_ / rel; }

  Run run(const std::string& args) const {
    const auto log = root_ / "stdout.txt";
    const std::string cmd = "cd '" + root_.string() + "' && '" IFNET_CLI_PATH "' " + args + " > '" +
                            log.string() + "' 2>&1";
    const int status = std::system(cmd.c_str());
    std::ifstream in(log);
    std::stringstream ss;
    ss << in.rdbuf();
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, ss.str()};
  }

  std::string read(const std::string& rel) const {
    std::ifstream in(path(rel));
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  }

 private:
  fs::path root_;
};

std::size_t count_lines(const std::string& s) {
  std::size_t n = 0;
  for (char c : s) n += c == '\n';
  return n;
}

const Sandbox& sandbox() {
  static const Sandbox box;
  return box;
}

}  // namespace

TEST_CASE("build-dataset from synthesis") {
  const auto& box = sandbox();
  const auto r = box.run("build-dataset --synth --tracks 100 --views 4 --mode illumination --seed 7 --out s1/");
  REQUIRE(r.code == 0);
  CHECK(r.out.find("400 patches") != std::string::npos);
  CHECK(load_store(box.path("s1")).patch_count() == 400);
  REQUIRE(box.run("build-dataset --synth --tracks 100 --views 4 --mode illumination --seed 7 --out s1b/").code == 0);
  CHECK(box.read("s1/manifest.tsv") == box.read("s1b/manifest.tsv"));
  CHECK(box.read("s1/config.ini").find("tracks=100") != std::string::npos);

  CHECK(box.run("build-dataset --synth --tracks 10").code == 2);
  CHECK(box.run("build-dataset --synth --tracks 10 --mode sideways --out x").code == 2);
  CHECK(box.run("build-dataset --out x").code == 2);
}

TEST_CASE("build-dataset from a frame directory") {
  const auto& box = sandbox();
  const auto seq = planted_corner_sequence(12, 10, 4);
  fs::create_directories(box.path("frames"));
  for (std::size_t i = 0; i < seq.scene.frames.size(); ++i) {
    std::ostringstream name;
    name << "frames/f" << (100 + i) << ".pgm";
    write_pgm(box.path(name.str()), seq.scene.frames[i]);
  }
  const auto r = box.run("build-dataset --frames frames --out planted");
  REQUIRE(r.code == 0);
  // 8-bit frames can add weak short tracks; each planted corner must still
  // come back as one full-length track at its position.
  const auto store = load_store(box.path("planted"));
  for (const auto& [cx, cy] : seq.corners) {
    std::size_t full = 0;
    for (const auto& t : store.tracks)
      if (std::hypot(t.x - cx, t.y - cy) <= 2.0 && t.patches.size() == 12) ++full;
    CHECK(full == 1);
  }
  CHECK(box.run("build-dataset --frames missing_dir --out y").code == 2);
}

TEST_CASE("config file supplies flags and the command line wins") {
  const auto& box = sandbox();
  {
    std::ofstream cfg(box.path("build.ini"));
    cfg << "[build-dataset]\nsynth=true\ntracks=6\nviews=3\nout=\"from_config\"\n";
  }
  REQUIRE(box.run("--config build.ini build-dataset").code == 0);
  CHECK(load_store(box.path("from_config")).patch_count() == 18);
  REQUIRE(box.run("--config build.ini build-dataset --tracks 5").code == 0);
  CHECK(load_store(box.path("from_config")).patch_count() == 15);
}

TEST_CASE("train, eval, compare and export") {
  const auto& box = sandbox();
  REQUIRE(box.run("build-dataset --synth --tracks 100 --mode geometry --seed 1 --out g").code == 0);
  REQUIRE(box.run("build-dataset --synth --tracks 100 --mode illumination --seed 2 --out i").code == 0);

  auto r = box.run("train --schedule separation --geo g/ --ill i/ --epochs 5 --toy --seed 1 --out sep");
  REQUIRE(r.code == 0);
  CHECK(count_lines(box.read("sep/report.csv")) == 6);
  CHECK(fs::exists(box.path("sep/final.ckpt")));
  CHECK(box.read("sep/config.ini").find("schedule=\"separation\"") != std::string::npos);

  r = box.run("train --schedule finetune --first g/ --second i/ --split-epoch 3 --epochs 5 --toy "
              "--batch-size 96 --checkpoint-every 2 --out ft");
  REQUIRE(r.code == 0);
  CHECK(r.out.find("epoch 3: switching to the second store") != std::string::npos);
  CHECK(fs::exists(box.path("ft/epoch_1.ckpt")));
  CHECK(fs::exists(box.path("ft/epoch_3.ckpt")));

  REQUIRE(box.run("build-dataset --synth --tracks 2 --out tiny").code == 0);
  r = box.run("train --schedule basic --store tiny/ --toy --out bad");
  CHECK(r.code == 3);
  CHECK(r.out.find("InsufficientTracks") != std::string::npos);
  CHECK(box.run("train --schedule separation --geo g/ --toy --out bad").code == 2);

  REQUIRE(box.run("build-dataset --synth --tracks 40 --seed 99 --out held").code == 0);
  r = box.run("eval --checkpoint sep/final.ckpt --split held --out ev");
  REQUIRE(r.code == 0);
  const auto csv = box.read("ev/eval.csv");
  for (const char* task : {"verification,intra", "verification,inter", "matching,all", "retrieval,all"})
    CHECK(csv.find(task) != std::string::npos);
  CHECK(box.read("ev/precision_by_rank.txt").rfind("# rank precision\n", 0) == 0);

  REQUIRE(box.run("train --schedule basic --store g/ --epochs 1 --toy --dim 4 --batch-size 96 --out d4").code == 0);
  REQUIRE(box.run("build-dataset --synth --tracks 40 --seed 99 --expect-dim 128 --out held128").code == 0);
  r = box.run("eval --checkpoint d4/final.ckpt --split held128 --out ev4");
  CHECK(r.code == 4);
  CHECK(r.out.find("descriptor_dim=4") != std::string::npos);
  CHECK(r.out.find("descriptor_dim=128") != std::string::npos);

  r = box.run("eval --compare sep/final.ckpt ft/final.ckpt --split held --out cmp");
  REQUIRE(r.code == 0);
  const auto cmp = box.read("cmp/compare.csv");
  CHECK(cmp.rfind("task,split,value_a,value_b,delta\n", 0) == 0);
  CHECK(count_lines(cmp) == 6);

  REQUIRE(box.run("build-dataset --synth --tracks 5 --views 2 --seed 3 --out ten").code == 0);
  REQUIRE(box.run("export-descriptors --checkpoint sep/final.ckpt --store ten --out desc.txt").code == 0);
  REQUIRE(box.run("export-descriptors --checkpoint sep/final.ckpt --store ten --out desc2.txt").code == 0);
  const auto text = box.read("desc.txt");
  CHECK(text == box.read("desc2.txt"));
  CHECK(text.rfind("IFDESC1 dim=128 count=10\n", 0) == 0);
  CHECK(count_lines(text) == 11);
  std::istringstream in(text);
  const auto desc = read_descriptors(in);
  for (std::size_t i = 0; i < desc.count; ++i) {
    double s = 0;
    for (float v : desc.row(i)) s += double(v) * double(v);
    CHECK(std::abs(std::sqrt(s) - 1.0) < 1e-5);
  }
  CHECK(box.run("export-descriptors --checkpoint d4/final.ckpt --store held128 --out x.txt").code == 4);
  {
    std::ofstream bad(box.path("bad.ckpt"));
    bad << "not a checkpoint\n";
  }
  CHECK(box.run("eval --checkpoint bad.ckpt --split held --out evb").code == 4);
}

TEST_CASE("repro-table1 at a tiny scale") {
  const auto& box = sandbox();
  const auto r = box.run("repro-table1 --seeds 1 --tracks 40 --eval-tracks 40 --epochs 2 --out t1");
  REQUIRE(r.code == 0);
  const auto csv = box.read("t1/table1.csv");
  CHECK(csv.rfind("schedule,seed,matching_map\n", 0) == 0);
  CHECK(count_lines(csv) == 6);
  for (const char* s : {"random_init", "mixed", "finetune_geo_ill", "finetune_ill_geo", "separation"})
    CHECK(csv.find(s) != std::string::npos);
}
