#include <doctest.h>

#include <stdexcept>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "supici/config.hpp"

using namespace supici;
namespace fs = std::filesystem;

namespace {

fs::path source_dir() {
  if (const char* env = std::getenv("SUPICI_SOURCE_DIR")) return env;
  // fall back to walking up from the working directory
  fs::path p = fs::current_path();
  for (int i = 0; i < 6; ++i) {
    if (fs::exists(p / "configs" / "reference.json")) return p;
    p = p.parent_path();
  }
  return fs::current_path();
}

fs::path write_temp_config(const std::string& body, const std::string& tag) {
  const fs::path p = fs::temp_directory_path() / ("supici_cfg_" + tag + ".json");
  std::ofstream(p) << body;
  return p;
}

}  // namespace

TEST_CASE("default config validates") {
  CHECK_NOTHROW(config::default_config().validate());
}

TEST_CASE("reference config pins the method hyperparameters") {
  const fs::path path = source_dir() / "configs" / "reference.json";
  REQUIRE(fs::exists(path));
  const config::RunConfig cfg = config::load_config(path);

  CHECK(cfg.seed == 17);
  CHECK(cfg.adapt.delta == 0.7);
  CHECK(cfg.adapt.beta == 0.9996);
  CHECK(cfg.adapt.we.gamma == 4.0);
  CHECK(cfg.adapt.we.alpha == 0.1);
  CHECK(cfg.adapt.eta == 1.0);
  CHECK(cfg.adapt.lr == 0.0005);
  CHECK(cfg.adapt.momentum == 0.9);
  CHECK(cfg.adapt.weight_decay == 0.0001);
  CHECK(cfg.adapt.batch_size == 8);
  CHECK(cfg.adapt.epochs_per_step == 100);
  CHECK(cfg.adapt.we.tau1 == 0.25);
  CHECK(cfg.adapt.we.tau2 == 0.75);
  CHECK(cfg.adapt.contrastive.omega == 0.25);
  CHECK(cfg.adapt.t_fg == 0.9);
  CHECK(cfg.adapt.t_bg == 0.1);
}

TEST_CASE("unknown keys are rejected everywhere") {
  const fs::path bad1 = write_temp_config(R"({"seeed": 17})", "bad1");
  CHECK_THROWS_AS(config::load_config(bad1), config::ConfigError);

  const fs::path bad2 = write_temp_config(R"({"adapt": {"deltaa": 0.7}})", "bad2");
  CHECK_THROWS_AS(config::load_config(bad2), config::ConfigError);

  const fs::path bad3 =
      write_temp_config(R"({"data": {"source": {"radius": 3}}})", "bad3");
  CHECK_THROWS_AS(config::load_config(bad3), config::ConfigError);

  fs::remove(bad1);
  fs::remove(bad2);
  fs::remove(bad3);
}

TEST_CASE("invalid values are rejected") {
  const fs::path bad = write_temp_config(R"({"adapt": {"tau1": 0.9, "tau2": 0.2}})", "vals");
  CHECK_THROWS_AS(config::load_config(bad), config::ConfigError);
  fs::remove(bad);

  const fs::path bad2 = write_temp_config(R"({"workers": 0})", "vals2");
  CHECK_THROWS_AS(config::load_config(bad2), config::ConfigError);
  fs::remove(bad2);

  const fs::path bad3 = write_temp_config("{not json", "vals3");
  CHECK_THROWS_AS(config::load_config(bad3), config::ConfigError);
  fs::remove(bad3);
}

TEST_CASE("snapshot round-trips deterministically") {
  const config::RunConfig cfg = config::load_config(source_dir() / "configs" / "reference.json");
  const std::string snap1 = config::config_snapshot(cfg);
  const std::string snap2 = config::config_snapshot(cfg);
  CHECK(snap1 == snap2);

  const fs::path rt = write_temp_config(snap1, "rt");
  const config::RunConfig back = config::load_config(rt);
  CHECK(config::config_snapshot(back) == snap1);
  fs::remove(rt);
}

TEST_CASE("key docs cover the pinned hyperparameters with their reference values") {
  const std::string docs = config::render_key_docs();
  CHECK(docs.find("adapt.delta") != std::string::npos);
  CHECK(docs.find("reference value 0.7") != std::string::npos);
  CHECK(docs.find("adapt.beta") != std::string::npos);
  CHECK(docs.find("reference value 0.9996") != std::string::npos);
  CHECK(docs.find("adapt.gamma") != std::string::npos);
  CHECK(docs.find("reference value 4") != std::string::npos);
  CHECK(docs.find("adapt.alpha") != std::string::npos);
  CHECK(docs.find("reference value 0.1") != std::string::npos);
  CHECK(docs.find("adapt.eta") != std::string::npos);
  CHECK(docs.find("detector.lr") != std::string::npos);
  CHECK(docs.find("reference value 0.0005") != std::string::npos);
  CHECK(docs.find("detector.momentum") != std::string::npos);
  CHECK(docs.find("detector.weight_decay") != std::string::npos);
  CHECK(docs.find("detector.batch_size") != std::string::npos);
  CHECK(docs.find("reference value 8") != std::string::npos);
  CHECK(docs.find("adapt.epochs_per_step") != std::string::npos);
  CHECK(docs.find("reference value 100") != std::string::npos);
}

TEST_CASE("derived train and infer configs inherit the shared settings") {
  const config::RunConfig cfg = config::load_config(source_dir() / "configs" / "reference.json");
  const detector::TrainConfig t = cfg.train_config();
  CHECK(t.lr == cfg.adapt.lr);
  CHECK(t.batch_size == 8);
  CHECK(t.patch_side == 32);
  CHECK(t.epochs == 40);
  const detector::InferConfig inf = cfg.infer_config();
  CHECK(inf.top_n == 64);
  CHECK(inf.nms_iou == 0.1);
}
