#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

namespace fs = std::filesystem;

namespace {

std::string cli_path() {
  const char* env = std::getenv("SUPICI_CLI");
  return env ? env : "";
}

struct RunResult {
  int exit_code;
  std::string output;
};

RunResult run(const std::string& args) {
  const fs::path log = fs::temp_directory_path() / "supici_cli_out.txt";
  const std::string cmd = cli_path() + " " + args + " > " + log.string() + " 2>&1";
  const int rc = std::system(cmd.c_str());
  std::ifstream in(log);
  std::string output((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return {WEXITSTATUS(rc), output};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

fs::path setup_workspace() {
  const fs::path dir = fs::temp_directory_path() / "supici_cli_ws";
  fs::remove_all(dir);
  fs::create_directories(dir);
  std::ofstream cfg(dir / "tiny.json");
  cfg << R"({
  "seed": 5,
  "out_dir": ")" << (dir / "run").string() << R"(",
  "workers": 2,
  "data": {
    "scans_per_domain": 4,
    "volume_side": 16,
    "source": {"radius_min": 2.0, "radius_max": 3.0, "nodules_min": 1, "nodules_max": 2},
    "target": {"radius_min": 2.0, "radius_max": 3.0, "nodules_min": 1, "nodules_max": 2,
               "base_intensity": 90.0, "contrast": 0.8}
  },
  "detector": {"source_epochs": 2, "batch_size": 4, "patch_side": 16},
  "adapt": {"epochs_per_step": 1, "top_n": 16}
})";
  return dir;
}

}  // namespace

TEST_CASE("cli end-to-end workflow on a tiny profile") {
  REQUIRE(!cli_path().empty());
  const fs::path ws = setup_workspace();
  const std::string cfg = " --config " + (ws / "tiny.json").string();

  // help mentions subcommands and config keys with reference values
  const auto help = run("--help");
  CHECK(help.exit_code == 0);
  CHECK(help.output.find("gen-data") != std::string::npos);
  CHECK(help.output.find("adapt.delta") != std::string::npos);
  CHECK(help.output.find("reference value 0.7") != std::string::npos);

  // gen-data twice: identical bytes
  CHECK(run("gen-data" + cfg).exit_code == 0);
  const std::string manifest1 = slurp(ws / "run" / "data" / "dataset.json");
  const std::string ann1 = slurp(ws / "run" / "data" / "annotations.csv");
  CHECK(run("gen-data" + cfg).exit_code == 0);
  CHECK(slurp(ws / "run" / "data" / "dataset.json") == manifest1);
  CHECK(slurp(ws / "run" / "data" / "annotations.csv") == ann1);
  CHECK(manifest1.find("\"split\"") != std::string::npos);

  // train + adapt + infer + froc
  CHECK(run("train-source" + cfg).exit_code == 0);
  CHECK(fs::exists(ws / "run" / "source_model" / "checkpoint_final.ckpt"));
  CHECK(fs::exists(ws / "run" / "source_model" / "train_report.json"));

  CHECK(run("adapt --step all" + cfg).exit_code == 0);
  CHECK(fs::exists(ws / "run" / "adapted_model" / "final.ckpt"));
  CHECK(fs::exists(ws / "run" / "adapted_model" / "adapt_report.json"));

  CHECK(run("adapt --step 1" + cfg).exit_code == 0);
  CHECK(fs::exists(ws / "run" / "adapted_model" / "step1.ckpt"));

  CHECK(run("infer --domain target --split test" + cfg).exit_code == 0);
  const std::string preds = slurp(ws / "run" / "predictions.csv");
  CHECK(preds.rfind("scan_id,z,y,x,dz,dy,dx,score\n", 0) == 0);

  // 4 scans split 3/0/1: the val split is empty -> header-only CSV
  CHECK(run("infer --domain target --split val --pred " + (ws / "empty.csv").string() + cfg)
            .exit_code == 0);
  CHECK(slurp(ws / "empty.csv") == "scan_id,z,y,x,dz,dy,dx,score\n");

  const auto froc = run("froc --pred " + (ws / "run" / "predictions.csv").string() + " --ann " +
                        (ws / "run" / "data" / "annotations.csv").string() + " --report " +
                        (ws / "froc.json").string());
  CHECK(froc.exit_code == 0);
  CHECK(froc.output.find("0.125") != std::string::npos);
  CHECK(froc.output.find("Avg") != std::string::npos);
  CHECK(fs::exists(ws / "froc.json"));

  fs::remove_all(ws);
}

TEST_CASE("cli exit codes: invalid config is 2, missing inputs are 4") {
  REQUIRE(!cli_path().empty());
  const fs::path dir = fs::temp_directory_path() / "supici_cli_err";
  fs::create_directories(dir);

  std::ofstream(dir / "bad.json") << R"({"adapt": {"nonsense_key": 1}})";
  CHECK(run("gen-data --config " + (dir / "bad.json").string()).exit_code == 2);

  std::ofstream(dir / "badval.json") << R"({"adapt": {"tau1": 0.9, "tau2": 0.1}})";
  CHECK(run("gen-data --config " + (dir / "badval.json").string()).exit_code == 2);

  CHECK(run("froc --pred /nonexistent/p.csv --ann /nonexistent/a.csv").exit_code == 4);
  CHECK(run("train-source --out " + (dir / "empty_run").string()).exit_code == 4);

  fs::remove_all(dir);
}

TEST_CASE("cli selftest passes and writes a deterministic report") {
  REQUIRE(!cli_path().empty());
  const fs::path dir = fs::temp_directory_path() / "supici_cli_self";
  fs::create_directories(dir);

  const auto first = run("selftest --seed 11 --report " + (dir / "r1.json").string());
  CHECK(first.exit_code == 0);
  const auto second = run("selftest --seed 11 --report " + (dir / "r2.json").string());
  CHECK(second.exit_code == 0);
  CHECK(slurp(dir / "r1.json") == slurp(dir / "r2.json"));
  CHECK(!slurp(dir / "r1.json").empty());

  fs::remove_all(dir);
}
