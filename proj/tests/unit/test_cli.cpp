#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "stcore/cli.hpp"
#include "stcore/io/checkpoint.hpp"
#include "stcore/io/file.hpp"

using namespace stcore;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "stcore");
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// One shared workspace: gen-data, train and fuse run once for the suite.
struct Workspace {
  fs::path dir;
  Workspace() {
    dir = fs::temp_directory_path() / ("stcore_cli_" + std::to_string(::getpid()));
    fs::remove_all(dir);
    fs::create_directories(dir);
    std::ofstream(dir / "tiny.cfg") << "T=2\ndepth=1\ndim=8\nheads=2\nattn_scale=0.5\n";
  }
  ~Workspace() { fs::remove_all(dir); }
  std::string p(const std::string& name) const { return (dir / name).string(); }
};

Workspace& ws() {
  static Workspace w;
  return w;
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("usage errors exit 2") {
    auto r = run({"frobnicate"});
    CHECK(r.code == cli::kExitUsage);
    CHECK(r.err.find("unknown command 'frobnicate'") != std::string::npos);
    CHECK(r.err.find("gen-data") != std::string::npos);
    CHECK(run({}).code == cli::kExitUsage);
    CHECK(run({"fuse", "--out", "x"}).code == cli::kExitUsage);
    CHECK(run({"energy", "--checkpoint", ws().p("missing.rtfs")}).code == cli::kExitUsage);
    CHECK(run({"--help"}).code == cli::kExitOk);
  }

  TEST_CASE("gen-data, train, fuse, verify, energy") {
    const auto& w = ws();
    auto r = run({"gen-data", "--out", w.p("data"), "--samples", "6", "--test-samples", "3", "--size", "8",
                  "--seed", "5"});
    REQUIRE(r.code == 0);
    CHECK(fs::exists(w.dir / "data" / "train" / "manifest.csv"));
    CHECK(fs::exists(w.dir / "data" / "test" / "c3_00002.rtev"));

    r = run({"train", "--data", w.p("data"), "--config", w.p("tiny.cfg"), "--epochs", "2", "--batch", "8", "--out",
             w.p("net.rtfs")});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    const std::string metrics = slurp(w.dir / "net.rtfs.metrics.csv");
    CHECK(metrics.rfind("epoch,loss,train_accuracy,test_accuracy\n1,", 0) == 0);
    CHECK(std::count(metrics.begin(), metrics.end(), '\n') == 3);

    r = run({"eval", "--checkpoint", w.p("net.rtfs"), "--data", w.p("data")});
    CHECK(r.code == 0);
    CHECK(r.out.find("on 12 samples") != std::string::npos);

    r = run({"fuse", "--checkpoint", w.p("net.rtfs"), "--out", w.p("fused.rtfs")});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    CHECK(r.out.find("parameters before fusion:") != std::string::npos);
    CHECK(fs::exists(w.dir / "fused.rtfs.params.txt"));
    const auto before = io::load_checkpoint(w.p("net.rtfs")).parameter_count();
    const auto after = io::load_checkpoint(w.p("fused.rtfs")).parameter_count();
    CHECK(after < before);

    r = run({"fuse", "--checkpoint", w.p("fused.rtfs"), "--out", w.p("again.rtfs")});
    CHECK(r.code == cli::kExitUsage);
    CHECK(r.err.find("already fused") != std::string::npos);
    CHECK_FALSE(fs::exists(w.dir / "again.rtfs"));

    r = run({"verify", "--checkpoint", w.p("net.rtfs"), "--fused", w.p("fused.rtfs"), "--data", w.p("data"),
             "--out", w.p("verify.csv")});
    CHECK_MESSAGE(r.code == 0, r.out);
    CHECK(r.out.find("0 mismatches outside boundary band") != std::string::npos);
    CHECK(slurp(w.dir / "verify.csv").rfind("sample,logit_rel_error", 0) == 0);

    r = run({"verify", "--checkpoint", w.p("fused.rtfs")});
    CHECK(r.code == cli::kExitUsage);

    r = run({"energy", "--checkpoint", w.p("fused.rtfs"), "--probe", "zeros", "--out", w.p("ez")});
    REQUIRE(r.code == 0);
    CHECK(r.out.find("E_MAC = 4.6 pJ, E_AC = 0.9 pJ") != std::string::npos);
    const std::string csv = slurp(w.dir / "ez.csv");
    std::istringstream lines(csv);
    std::string line;
    std::getline(lines, line);
    int spike_rows = 0;
    while (std::getline(lines, line)) {
      if (line.find(",spike,") == std::string::npos) continue;
      ++spike_rows;
      // layer,kind,firing_rate,macs,acs,energy
      CHECK_MESSAGE(line.find(",spike,0,0,0,0") != std::string::npos, line);
    }
    CHECK(spike_rows > 0);
    CHECK(fs::exists(w.dir / "ez.svg"));
    CHECK(slurp(w.dir / "ez.txt").find("E_AC = 0.9 pJ") != std::string::npos);

    r = run({"energy", "--checkpoint", w.p("net.rtfs"), "--data", w.p("data"), "--out", w.p("e1")});
    REQUIRE(r.code == 0);
    run({"energy", "--checkpoint", w.p("net.rtfs"), "--data", w.p("data"), "--out", w.p("e2")});
    CHECK(slurp(w.dir / "e1.csv") == slurp(w.dir / "e2.csv"));
    CHECK(slurp(w.dir / "e1.svg") == slurp(w.dir / "e2.svg"));
  }

  TEST_CASE("verify reports failure with exit 1") {
    const auto& w = ws();
    REQUIRE(fs::exists(w.dir / "fused.rtfs"));
    // perturb one folded threshold so spikes flip well outside the band
    auto fused = io::load_checkpoint(w.p("fused.rtfs"));
    auto th = fused.embed().folded->v_th_eff;
    for (auto& v : th.mutable_data()) v -= 0.5f;
    io::save_checkpoint(w.p("broken.rtfs"), fused);
    const auto r = run({"verify", "--checkpoint", w.p("net.rtfs"), "--fused", w.p("broken.rtfs"), "--data",
                        w.p("data")});
    CHECK(r.code == cli::kExitVerifyFailed);
    CHECK(r.out.find("FAIL") != std::string::npos);
  }

  TEST_CASE("seeded runs are reproducible") {
    const auto& w = ws();
    REQUIRE(fs::exists(w.dir / "data"));
    for (const char* name : {"r1.rtfs", "r2.rtfs"}) {
      REQUIRE(run({"train", "--data", w.p("data"), "--config", w.p("tiny.cfg"), "--epochs", "1", "--seed", "8",
                   "--out", w.p(name)})
                  .code == 0);
    }
    CHECK(io::read_file(w.p("r1.rtfs")) == io::read_file(w.p("r2.rtfs")));
    CHECK(slurp(w.dir / "r1.rtfs.metrics.csv") == slurp(w.dir / "r2.rtfs.metrics.csv"));
  }
}
