#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "vqa/checkpoint.hpp"
#include "vqa/cli.hpp"
#include "vqa/model.hpp"

using namespace vqa;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

// A scratch directory holding a tiny dataset and a one-epoch checkpoint.
struct Workspace {
  fs::path dir = fs::temp_directory_path() / "vqa-cli-test";
  std::string path(const char* name) const { return (dir / name).string(); }

  Workspace() {
    fs::remove_all(dir);
    fs::create_directories(dir);
    REQUIRE(run({"gen-data", "--count", "20", "--seed", "3", "--out", path("train.jsonl")}).code == 0);
    REQUIRE(run({"gen-data", "--count", "1", "--seed", "4", "--out", path("one.jsonl")}).code == 0);
    REQUIRE(run({"train", "--data", path("train.jsonl"), "--out", path("m.ckpt"), "--epochs", "1"})
                .code == 0);
  }
  ~Workspace() { fs::remove_all(dir); }
};

}  // namespace

TEST_CASE("cli exit codes for malformed invocations") {
  CHECK(run({}).code == cli::kExitValidation);
  CHECK(run({"frobnicate"}).code == cli::kExitValidation);
  CHECK(run({"gen-data", "--seed", "1"}).code == cli::kExitValidation);
  CHECK(run({"train", "--data", "/nonexistent/x.jsonl", "--out", "/tmp/x.ckpt"}).code ==
        cli::kExitValidation);
  const auto help = run({"--help"});
  CHECK(help.code == cli::kExitOk);
  CHECK(help.out.find("attribute") != std::string::npos);
}

TEST_CASE("cli pipeline on a tiny workspace") {
  Workspace ws;

  SUBCASE("occlusion attribution of one example writes one 16x16 map") {
    const auto r = run({"attribute", "--ckpt", ws.path("m.ckpt"), "--data", ws.path("one.jsonl"),
                        "--out", ws.path("maps"), "--method", "occlusion"});
    REQUIRE(r.code == 0);
    std::vector<fs::path> maps;
    for (const auto& e : fs::directory_iterator(ws.dir / "maps")) {
      const auto name = e.path().filename().string();
      if (name.ends_with(".occlusion.json")) maps.push_back(e.path());
    }
    REQUIRE(maps.size() == 1);
    const auto j = json::parse(std::ifstream(maps[0]));
    CHECK(j.at("dims") == json::array({16, 16}));
    CHECK(j.at("scores").size() == 256);
    CHECK(fs::exists(ws.dir / "maps" / "run-manifest.json"));
  }

  SUBCASE("unknown method is a validation error") {
    CHECK(run({"attribute", "--ckpt", ws.path("m.ckpt"), "--data", ws.path("one.jsonl"), "--out",
               ws.path("maps"), "--method", "saliency"})
              .code == cli::kExitValidation);
  }

  SUBCASE("bad patch is a validation error") {
    CHECK(run({"attribute", "--ckpt", ws.path("m.ckpt"), "--data", ws.path("one.jsonl"), "--out",
               ws.path("maps"), "--method", "occlusion", "--patch", "1,2"})
              .code == cli::kExitValidation);
  }

  SUBCASE("checkpoint and dataset vocabularies must agree") {
    save_checkpoint(VqaModel::initialize(20, 9, 1), ws.dir / "other.ckpt");
    const auto r = run({"attribute", "--ckpt", ws.path("other.ckpt"), "--data",
                        ws.path("one.jsonl"), "--out", ws.path("maps"), "--method", "random"});
    CHECK(r.code == cli::kExitValidation);
    CHECK(r.err.find("vocabulary") != std::string::npos);
  }

  SUBCASE("missing checkpoint is a validation error") {
    CHECK(run({"evaluate", "--ckpt", ws.path("absent.ckpt"), "--data", ws.path("one.jsonl"),
               "--out", ws.path("eval"), "--methods", "all"})
              .code == cli::kExitValidation);
  }

  SUBCASE("evaluate then report") {
    REQUIRE(run({"evaluate", "--ckpt", ws.path("m.ckpt"), "--data", ws.path("train.jsonl"),
                 "--out", ws.path("eval"), "--methods", "all"})
                .code == 0);
    for (const char* f : {"correlations.csv", "pos_histogram.csv", "pos_histogram.svg",
                          "flip_predictor.json", "eval_report.json", "run-manifest.json"}) {
      CHECK_MESSAGE(fs::exists(ws.dir / "eval" / f), f);
    }
    const auto r = run({"report", "--in", ws.path("eval")});
    CHECK(r.code == 0);
    CHECK(r.out.find("occlusion") != std::string::npos);
    CHECK(r.out.find("failure prediction") != std::string::npos);

    const auto manifest = json::parse(std::ifstream(ws.dir / "eval" / "run-manifest.json"));
    CHECK(manifest.at("artifacts").contains("eval_report.json"));
    CHECK(manifest.at("config").is_object());
  }
}
