#include <cstdlib>
#include <filesystem>
#include <functional>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <doctest.h>
#include <unistd.h>
#include <json.hpp>

#include "cli.hpp"
#include "experiment.hpp"
#include "mtlforge/error.hpp"
#include "mtlforge/metrics.hpp"
#include "mtlforge/numerics/rng.hpp"

using namespace mtlforge;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

const fs::path kFixtures = fs::path(MTLFORGE_FIXTURE_DIR) / "cli";
const std::string kConfig = (kFixtures / "config.json").string();

struct Invocation {
  int code = 0;
  std::string out;
  std::string err;
  fs::path run_dir;
};

Invocation invoke(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  Invocation r;
  r.code = cli::run(args, out, err);
  r.out = out.str();
  r.err = err.str();
  const std::string marker = "run directory: ";
  if (const auto pos = r.out.rfind(marker); pos != std::string::npos) {
    std::string line = r.out.substr(pos + marker.size());
    r.run_dir = line.substr(0, line.find('\n'));
  }
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json load_json(const fs::path& p) { return json::parse(slurp(p)); }

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() / ("mtlforge_cli_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str() const { return path.string(); }
};

// Writes a copy of the fixture config with absolute paths and one edit applied.
fs::path edited_config(const TempDir& dir, const std::function<void(json&)>& edit) {
  json j = load_json(kConfig);
  for (auto* key : {"datasets", "domain"}) {
    for (auto& d : j[key]) d["path"] = (kFixtures / d["path"].get<std::string>()).string();
  }
  edit(j);
  const fs::path p = dir.path / "config.json";
  std::ofstream(p) << j.dump(2);
  return p;
}

struct SeedEnv {
  explicit SeedEnv(const char* value) {
    if (value) {
      setenv("MTLFORGE_SEED", value, 1);
    } else {
      unsetenv("MTLFORGE_SEED");
    }
  }
  ~SeedEnv() { unsetenv("MTLFORGE_SEED"); }
};

}  // namespace

TEST_CASE("usage errors exit 64 and help exits 0") {
  CHECK(invoke({"mtl", "--config", kConfig, "--bogus"}).code == cli::kExitUsage);
  CHECK(invoke({}).code == cli::kExitUsage);
  CHECK(invoke({"frobnicate"}).code == cli::kExitUsage);
  CHECK(invoke({"sweep"}).code == cli::kExitUsage);
  CHECK(invoke({"pretrain", "--config", kConfig, "--mode", "bert"}).code == cli::kExitUsage);
  CHECK(invoke({"--help"}).code == cli::kExitOk);
  const auto help = invoke({"sweep", "--help"});
  CHECK(help.code == cli::kExitOk);
  CHECK(help.out.find("--beam") != std::string::npos);
  CHECK(help.out.find("--no-ft") != std::string::npos);
}

TEST_CASE("missing inputs exit 2 naming the path") {
  TempDir tmp;
  const auto cfg = edited_config(tmp, [](json& j) { j["datasets"][0]["path"] = "/nonexistent/edos_train.csv"; });
  const auto r = invoke({"compile-tasks", "--config", cfg.string(), "--out", tmp.str()});
  CHECK(r.code == cli::kExitIo);
  CHECK(r.err.find("/nonexistent/edos_train.csv") != std::string::npos);

  const auto missing_config = invoke({"mtl", "--config", (tmp.path / "absent.json").string()});
  CHECK(missing_config.code == cli::kExitIo);
  CHECK(missing_config.err.find("absent.json") != std::string::npos);

  const auto missing_ckpt =
      invoke({"finetune", "--config", kConfig, "--out", tmp.str(), "--init", (tmp.path / "none.ckpt").string()});
  CHECK(missing_ckpt.code == cli::kExitIo);
  CHECK(missing_ckpt.err.find("none.ckpt") != std::string::npos);
}

TEST_CASE("contract and config errors exit 1") {
  TempDir tmp;
  SUBCASE("unknown task") {
    const auto cfg = edited_config(tmp, [](json& j) { j["tasks"] = {"nosuchtask"}; });
    const auto r = invoke({"mtl", "--config", cfg.string(), "--out", tmp.str()});
    CHECK(r.code == cli::kExitError);
    CHECK(r.err.find("nosuchtask") != std::string::npos);
  }
  SUBCASE("unknown config key") {
    const auto cfg = edited_config(tmp, [](json& j) { j["mtl"]["learning_rate"] = 0.1; });
    const auto r = invoke({"mtl", "--config", cfg.string(), "--out", tmp.str()});
    CHECK(r.code == cli::kExitError);
    CHECK(r.err.find("learning_rate") != std::string::npos);
  }
  SUBCASE("unsupported version") {
    const auto cfg = edited_config(tmp, [](json& j) { j["version"] = 7; });
    CHECK(invoke({"mtl", "--config", cfg.string(), "--out", tmp.str()}).code == cli::kExitError);
  }
  SUBCASE("sweep without candidates") {
    const auto cfg = edited_config(tmp, [](json& j) { j["candidates"] = json::array(); });
    CHECK(invoke({"sweep", "--config", cfg.string(), "--out", tmp.str()}).code == cli::kExitError);
  }
}

TEST_CASE("config round-trips through its resolved form") {
  const auto c = cli::ExperimentConfig::load(kConfig);
  const auto again = cli::ExperimentConfig::parse(c.to_json(), "/");
  CHECK(again.to_json() == c.to_json());
  CHECK(c.datasets.at(0).path.is_absolute());
  CHECK(c.encoder.d_model == 16);
  CHECK(c.sweep.ft_top == 1);
  CHECK_THROWS_AS(cli::ExperimentConfig::parse(R"({"tasks": []})", "/"), ConfigError);
  CHECK_THROWS_AS(cli::ExperimentConfig::parse(R"({"version": 1, "mtl": {"lr": -1}})", "/"), ConfigError);
}

TEST_CASE("seed precedence: flag over environment over config") {
  TempDir tmp;
  auto seed_of = [&](const std::vector<std::string>& extra) {
    std::vector<std::string> args{"compile-tasks", "--config", kConfig, "--out", tmp.str()};
    args.insert(args.end(), extra.begin(), extra.end());
    const auto r = invoke(args);
    REQUIRE(r.code == 0);
    const auto m = load_json(r.run_dir / "manifest.json");
    CHECK(r.run_dir.filename().string().find("-seed" + std::to_string(m["seed"].get<std::uint64_t>()) + "-") !=
          std::string::npos);
    CHECK(load_json(r.run_dir / "config.json")["seed"] == m["seed"]);
    return std::make_pair(m["seed"].get<std::uint64_t>(), m["seed_source"].get<std::string>());
  };
  {
    SeedEnv env(nullptr);
    CHECK(seed_of({}) == std::make_pair(std::uint64_t{11}, std::string("config")));
    CHECK(seed_of({"--seed", "5"}) == std::make_pair(std::uint64_t{5}, std::string("flag")));
  }
  {
    SeedEnv env("23");
    CHECK(seed_of({}) == std::make_pair(std::uint64_t{23}, std::string("env")));
    CHECK(seed_of({"--seed", "5"}) == std::make_pair(std::uint64_t{5}, std::string("flag")));
  }
  {
    SeedEnv env("abc");
    CHECK(invoke({"compile-tasks", "--config", kConfig, "--out", tmp.str()}).code == cli::kExitError);
  }
}

TEST_CASE("evaluate on a predictions file matches the metrics module") {
  TempDir tmp;
  const auto r = invoke({"evaluate", "--predictions", (kFixtures / "predictions.jsonl").string(), "--labels",
                         "ind,grp,unt,oth", "--task", "target", "--out", tmp.str()});
  REQUIRE(r.code == 0);
  std::vector<std::string> golds, preds;
  std::ifstream in(kFixtures / "predictions.jsonl");
  std::string line;
  while (std::getline(in, line)) {
    const auto j = json::parse(line);
    golds.push_back(j["gold"]);
    preds.push_back(j["pred"]);
  }
  const auto expected = metrics::macro_f1(preds, golds, {"ind", "grp", "unt", "oth"});
  CHECK(slurp(r.run_dir / "eval.json") == metrics::to_json(expected) + "\n");
  CHECK(load_json(r.run_dir / "scores.json")["scores"][0]["value"].get<double>() == expected.macro_f1);
  CHECK(slurp(r.run_dir / "confusion.csv") == metrics::confusion_csv(expected));
  CHECK(r.out.find("| target |") != std::string::npos);
}

TEST_CASE("preprocess, build-vocab and compile-tasks artifacts") {
  TempDir tmp;
  const auto pre = invoke({"preprocess", "--config", kConfig, "--out", tmp.str()});
  REQUIRE(pre.code == 0);
  const std::string records = slurp(pre.run_dir / "edos.jsonl");
  CHECK(records.find("[USER]") != std::string::npos);
  CHECK(records.find("[URL]") != std::string::npos);
  CHECK(records.find("face with tears of joy") != std::string::npos);
  CHECK(load_json(pre.run_dir / "preprocess.json")["edos"]["loaded"] == 80);

  const auto vocab = invoke({"build-vocab", "--config", kConfig, "--out", tmp.str()});
  REQUIRE(vocab.code == 0);
  CHECK(fs::exists(vocab.run_dir / "vocab.txt"));

  const auto compiled = invoke({"compile-tasks", "--config", kConfig, "--out", tmp.str()});
  REQUIRE(compiled.code == 0);
  const auto summary = load_json(compiled.run_dir / "compile.json");
  CHECK(summary["tasks"]["edosA"]["train"] == 64);
  CHECK(summary["tasks"]["edosA"]["eval"] == 16);
  CHECK(summary["tasks"]["edosC"]["labels"].size() == 11);
  CHECK(summary["hierarchy"]["ok"] == true);
  for (const char* f : {"edosA.train.jsonl", "edosA.eval.jsonl", "edosB.train.jsonl", "edosC.eval.jsonl"}) {
    CHECK(fs::exists(compiled.run_dir / f));
  }
  // Every output file is listed with its hash.
  const auto m = load_json(compiled.run_dir / "manifest.json");
  for (const auto& o : m["outputs"]) {
    const std::string bytes = slurp(compiled.run_dir / o["path"].get<std::string>());
    char hex[17];
    std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(numerics::fnv1a64(bytes)));
    CHECK(o["fnv1a64"] == hex);
  }
  CHECK(m["inputs"].size() == 5);
}

TEST_CASE("pretrain then finetune: chained manifests and a reproducible golden") {
  TempDir tmp;
  SeedEnv env(nullptr);
  const auto pre = invoke({"pretrain", "--config", kConfig, "--out", tmp.str(), "--mode", "tapt"});
  REQUIRE_MESSAGE(pre.code == 0, pre.err);
  for (const char* f : {"model.ckpt", "model.ckpt.config.json", "vocab.txt", "curve_tapt.csv", "pretrain.json"}) {
    CHECK(fs::exists(pre.run_dir / f));
  }
  const auto pre_stats = load_json(pre.run_dir / "pretrain.json");
  CHECK(pre_stats["stages"].size() == 1);
  CHECK(pre_stats["stages"][0]["best_val_loss"].get<double>() < pre_stats["stages"][0]["initial_val_loss"].get<double>());

  const std::string ckpt = (pre.run_dir / "model.ckpt").string();
  const auto ft = invoke({"finetune", "--config", kConfig, "--out", tmp.str(), "--init", ckpt});
  REQUIRE_MESSAGE(ft.code == 0, ft.err);
  const auto m = load_json(ft.run_dir / "manifest.json");
  REQUIRE(m["parents"].size() == 1);
  CHECK(m["parents"][0]["checkpoint"]["path"] == ckpt);
  CHECK(m["parents"][0]["manifest"]["path"] == (pre.run_dir / "manifest.json").string());
  char hex[17];
  std::snprintf(hex, sizeof hex, "%016llx",
                static_cast<unsigned long long>(numerics::fnv1a64(slurp(pre.run_dir / "manifest.json"))));
  CHECK(m["parents"][0]["manifest"]["fnv1a64"] == hex);

  const auto golden = load_json(kFixtures / "golden_finetune.json");
  const auto scores = load_json(ft.run_dir / "scores.json");
  CHECK(scores["scores"][0]["value"].get<double>() ==
        doctest::Approx(golden["edosA_eval_macro_f1"].get<double>()).epsilon(1e-9));
  CHECK(load_json(ft.run_dir / "report.json")["best_epoch"] == golden["best_epoch"]);

  // The run directory alone is enough to re-run, with byte-identical metrics.
  const auto again = invoke({"finetune", "--config", (ft.run_dir / "config.json").string(), "--init", ckpt});
  REQUIRE_MESSAGE(again.code == 0, again.err);
  CHECK(again.run_dir.parent_path() == ft.run_dir.parent_path());
  for (const char* f : {"scores.json", "eval_edosA.json", "confusion_edosA.csv", "report.json", "loss_curve.csv"}) {
    CHECK_MESSAGE(slurp(again.run_dir / f) == slurp(ft.run_dir / f), f);
  }
  CHECK(slurp(again.run_dir / "model.ckpt") == slurp(ft.run_dir / "model.ckpt"));
}

TEST_CASE("mtl then finetune is labelled +FT and report compares runs") {
  TempDir tmp;
  const auto mtl = invoke({"mtl", "--config", kConfig, "--out", tmp.str()});
  REQUIRE_MESSAGE(mtl.code == 0, mtl.err);
  CHECK(load_json(mtl.run_dir / "scores.json")["name"] == "edosA");
  const auto ft =
      invoke({"finetune", "--config", kConfig, "--out", tmp.str(), "--init", (mtl.run_dir / "model.ckpt").string()});
  REQUIRE_MESSAGE(ft.code == 0, ft.err);
  CHECK(load_json(ft.run_dir / "scores.json")["name"] == "edosA +FT");

  const auto ev = invoke({"evaluate", "--config", kConfig, "--out", tmp.str(), "--checkpoint",
                          (mtl.run_dir / "model.ckpt").string(), "--task", "edosA"});
  REQUIRE_MESSAGE(ev.code == 0, ev.err);
  CHECK(slurp(ev.run_dir / "eval_edosA.json") == slurp(mtl.run_dir / "eval_edosA.json"));

  const auto rep = invoke({"report", mtl.run_dir.string(), ft.run_dir.string(), "--out", tmp.str()});
  REQUIRE_MESSAGE(rep.code == 0, rep.err);
  const std::string table = slurp(rep.run_dir / "report.md");
  CHECK(table.rfind("| Dataset | edosA eval |\n|---|---:|\n", 0) == 0);
  CHECK(table.find("| edosA +FT |") != std::string::npos);
  CHECK(invoke({"report", (tmp.path / "nowhere").string(), "--out", tmp.str()}).code == cli::kExitIo);
}

TEST_CASE("sweep enumerates combinations and marks +FT rows") {
  TempDir tmp;
  const auto r = invoke({"sweep", "--config", kConfig, "--out", tmp.str(), "--beam", "2", "--stages", "2", "--ft"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const auto s = load_json(r.run_dir / "sweep.json");
  CHECK(s["mtl_runs"] == 3);
  CHECK(s["ft_runs"] == 1);
  CHECK(s["rows"].size() == 4);
  for (std::size_t i = 1; i < s["rows"].size(); ++i) {
    CHECK(s["rows"][i - 1]["score"].get<double>() >= s["rows"][i]["score"].get<double>());
  }
  CHECK(slurp(r.run_dir / "sweep.md").find(" +FT |") != std::string::npos);
  CHECK(fs::exists(r.run_dir / "combinations" / "edosA_edosB_edosC" / "scores.json"));

  const auto no_ft = invoke({"sweep", "--config", kConfig, "--out", tmp.str(), "--stages", "1", "--no-ft"});
  REQUIRE(no_ft.code == 0);
  const auto s2 = load_json(no_ft.run_dir / "sweep.json");
  CHECK(s2["mtl_runs"] == 2);
  CHECK(s2["ft_runs"] == 0);
}
