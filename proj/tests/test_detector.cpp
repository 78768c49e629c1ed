#include <doctest.h>

#include <stdexcept>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "supici/checks.hpp"
#include "supici/data.hpp"
#include "supici/detector.hpp"
#include "supici/rng.hpp"

using namespace supici;
namespace fs = std::filesystem;

namespace {

VolumeU8 blob_patch(int side, std::uint64_t seed) {
  data::SynthDomainSpec spec;
  spec.volume_side = side;
  spec.radius_min = 2.0;
  spec.radius_max = side / 4.0 - 0.5;
  spec.nodules_min = 1;
  spec.nodules_max = 2;
  spec.seed = seed;
  return data::gen_synth_scan(spec, 0, "t").voxels;
}

std::vector<geom::Box3> blob_boxes(int side, std::uint64_t seed) {
  data::SynthDomainSpec spec;
  spec.volume_side = side;
  spec.radius_min = 2.0;
  spec.radius_max = side / 4.0 - 0.5;
  spec.nodules_min = 1;
  spec.nodules_max = 2;
  spec.seed = seed;
  std::vector<geom::Box3> out;
  for (const auto& a : data::gen_synth_scan(spec, 0, "t").annotations)
    out.push_back(geom::annotation_box(a));
  return out;
}

}  // namespace

TEST_CASE("parameter manifest is consistent") {
  std::size_t total = 0;
  for (const detector::LayerInfo& l : detector::shape_manifest()) {
    CHECK(l.offset == total);
    std::size_t prod = 1;
    for (const int d : l.shape) prod *= std::size_t(d);
    CHECK(prod == l.size);
    total += l.size;
  }
  CHECK(total == detector::param_count());
  CHECK(detector::DetectorParams().values().size() == total);
}

TEST_CASE("forward: zero patch and zero params give probability exactly 0.5") {
  const VolumeU8 patch({32, 32, 32}, 0);
  const detector::DetectorParams zeros;
  const auto fwd = detector::forward(zeros, patch);
  CHECK(fwd.feature_map.sp == Dims3{8, 8, 8});
  CHECK(fwd.feature_map.channels == 16);
  CHECK(fwd.rpn.count() == 8 * 8 * 8 * 3);
  for (const double p : fwd.rpn.probs) CHECK(p == 0.5);
  for (const auto& o : fwd.rpn.offsets)
    for (const double v : o) CHECK(v == 0.0);
}

TEST_CASE("forward is deterministic and rejects bad dims") {
  const VolumeU8 patch = blob_patch(16, 50);
  const auto params = detector::DetectorParams::random_init(9, 1.0);
  const auto a = detector::forward(params, patch);
  const auto b = detector::forward(params, patch);
  CHECK(a.feature_map.v == b.feature_map.v);
  CHECK(a.rpn.probs == b.rpn.probs);

  CHECK_THROWS_AS(detector::forward(params, VolumeU8({30, 32, 32}, 0)), std::invalid_argument);
  CHECK_THROWS_AS(detector::forward(params, VolumeU8({}, 0)), std::invalid_argument);
}

TEST_CASE("forward translation consistency at stride granularity") {
  const int side = 24;
  const VolumeU8 base = blob_patch(side, 51);
  VolumeU8 shifted({side, side, side}, data::kPadValue);
  for (int z = 0; z + 4 < side; ++z)
    for (int y = 0; y < side; ++y)
      for (int x = 0; x < side; ++x) shifted.at(z + 4, y, x) = base.at(z, y, x);

  const auto params = detector::DetectorParams::random_init(10, 1.0);
  const auto f0 = detector::forward(params, base);
  const auto f1 = detector::forward(params, shifted);
  const Dims3 fd = f0.feature_map.sp;
  for (int c = 0; c < 16; ++c)
    for (int z = 2; z + 3 < fd.nz; ++z)  // interior, receptive-field margin
      for (int y = 2; y + 2 < fd.ny; ++y)
        for (int x = 2; x + 2 < fd.nx; ++x)
          CHECK(std::abs(f1.feature_map.at(c, z + 1, y, x) - f0.feature_map.at(c, z, y, x)) <=
                1e-9);
}

TEST_CASE("propose: uniform scores keep top_n deterministically, dominant anchor first") {
  const VolumeU8 patch({16, 16, 16}, 0);
  const detector::DetectorParams zeros;
  const auto fwd = detector::forward(zeros, patch);

  const auto uniform = detector::propose(fwd.rpn, patch, 8, 0.1);
  CHECK(uniform.size() == 8);
  const auto uniform2 = detector::propose(fwd.rpn, patch, 8, 0.1);
  for (std::size_t i = 0; i < uniform.size(); ++i)
    CHECK(uniform[i].anchor_index == uniform2[i].anchor_index);

  detector::RpnOutput rpn = fwd.rpn;
  rpn.probs[37] = 0.99;
  const auto dominant = detector::propose(rpn, patch, 8, 0.1);
  REQUIRE(!dominant.empty());
  CHECK(dominant[0].anchor_index == 37);
  CHECK(dominant[0].score == 0.99);

  rng::Engine eng(52);
  for (int trial = 0; trial < 20; ++trial) {
    detector::RpnOutput noisy = fwd.rpn;
    for (double& p : noisy.probs) p = eng.uniform();
    const int top_n = eng.uniform_int(1, 32);
    CHECK(detector::propose(noisy, patch, top_n, 0.1).size() <= std::size_t(top_n));
  }
}

TEST_CASE("roi_features averages member voxels") {
  detector::Tensor4 fmap(16, {4, 4, 4});
  for (double& v : fmap.v) v = 3.25;
  // box covering the whole patch in patch coordinates (dims*stride = 16)
  const auto pooled = detector::roi_features(fmap, geom::Box3{{8, 8, 8}, {16, 16, 16}});
  for (const double v : pooled) CHECK(v == doctest::Approx(3.25).epsilon(1e-12));

  // box covering exactly one feature voxel: center (2,2,2) in feature coords
  detector::Tensor4 single(16, {4, 4, 4});
  single.at(0, 2, 2, 2) = 7.0;
  const auto one =
      detector::roi_features(single, geom::Box3{{10, 10, 10}, {3.9, 3.9, 3.9}});
  CHECK(one[0] == 7.0);

  // two voxels with channel values 1 and 3 average to 2
  detector::Tensor4 two(16, {4, 4, 4});
  two.at(0, 2, 2, 1) = 1.0;
  two.at(0, 2, 2, 2) = 3.0;
  const auto mean =
      detector::roi_features(two, geom::Box3{{10, 10, 8}, {3.9, 3.9, 7.9}});
  CHECK(mean[0] == 2.0);

  // degenerate box far smaller than a voxel falls back to the nearest voxel
  const auto tiny = detector::roi_features(single, geom::Box3{{10, 10, 10}, {0.5, 0.5, 0.5}});
  CHECK(tiny[0] == 7.0);
}

TEST_CASE("forward_roi: zero params give p=0.5 and zero offsets; p stays in [0,1]") {
  const detector::DetectorParams zeros;
  std::vector<double> pooled(16, 0.7);
  const auto out = detector::forward_roi(zeros, pooled);
  CHECK(out.prob == 0.5);
  for (const double o : out.offsets) CHECK(o == 0.0);

  rng::Engine eng(53);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto params = detector::DetectorParams::random_init(eng.next_u64(), 2.0);
    std::vector<double> g(16);
    for (double& v : g) v = eng.normal();
    const auto r = detector::forward_roi(params, g);
    CHECK(r.prob >= 0.0);
    CHECK(r.prob <= 1.0);
    const auto again = detector::forward_roi(params, g);
    CHECK(again.prob == r.prob);
  }
}

TEST_CASE("assign_box_targets matches a brute-force max-IoU oracle") {
  rng::Engine eng(54);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<geom::Box3> gt, cands;
    const int n_gt = eng.uniform_int(0, 3);
    for (int i = 0; i < n_gt; ++i)
      gt.push_back({{eng.uniform(4, 28), eng.uniform(4, 28), eng.uniform(4, 28)},
                    {eng.uniform(3, 9), eng.uniform(3, 9), eng.uniform(3, 9)}});
    const int n_c = eng.uniform_int(1, 20);
    for (int i = 0; i < n_c; ++i)
      cands.push_back({{eng.uniform(0, 32), eng.uniform(0, 32), eng.uniform(0, 32)},
                       {eng.uniform(3, 10), eng.uniform(3, 10), eng.uniform(3, 10)}});

    const auto targets = detector::assign_box_targets(gt, cands, {0.3, 0.1});

    // oracle: exhaustive max-IoU per candidate plus per-gt argmax forcing
    for (std::size_t c = 0; c < cands.size(); ++c) {
      double best = 0.0;
      for (const auto& g : gt) best = std::max(best, geom::iou3d(g, cands[c]));
      bool forced = false;
      for (const auto& g : gt) {
        double gbest = 0.0;
        std::size_t arg = 0;
        for (std::size_t cc = 0; cc < cands.size(); ++cc)
          if (geom::iou3d(g, cands[cc]) > gbest) {
            gbest = geom::iou3d(g, cands[cc]);
            arg = cc;
          }
        if (gbest > 0.0 && arg == c) forced = true;
      }
      if (forced || best >= 0.3)
        CHECK(targets[c].label == losses::TargetLabel::Positive);
      else if (best < 0.1)
        CHECK(targets[c].label == losses::TargetLabel::Negative);
      else
        CHECK(targets[c].label == losses::TargetLabel::Ignore);
    }
  }

  // gt-free input: everything negative
  const auto none = detector::assign_box_targets({}, {geom::Box3{{1, 1, 1}, {2, 2, 2}}}, {});
  CHECK(none[0].label == losses::TargetLabel::Negative);

  // candidate identical to a gt box: positive with zero offsets
  const geom::Box3 b{{5, 5, 5}, {4, 4, 4}};
  const auto same = detector::assign_box_targets({b}, {b}, {});
  CHECK(same[0].label == losses::TargetLabel::Positive);
  for (const double o : same[0].offsets) CHECK(o == 0.0);
}

TEST_CASE("sgd_step recurrence") {
  const std::size_t n = detector::param_count();

  detector::DetectorParams p;
  detector::OptimState opt{0.1, 0.0, 0.0, {}};
  detector::sgd_step(p, std::vector<double>(n, 0.0), opt);
  for (const double v : p.values()) CHECK(v == 0.0);  // zero grad, no change

  // one step from rest: params decrease by lr * grad
  detector::DetectorParams q;
  q.values()[0] = 1.0;
  detector::OptimState opt2{0.5, 0.9, 0.0, {}};
  std::vector<double> g(n, 0.0);
  g[0] = 2.0;
  detector::sgd_step(q, g, opt2);
  CHECK(q.values()[0] == doctest::Approx(1.0 - 0.5 * 2.0).epsilon(1e-12));

  // second step with the same grad: total change lr * (2 + momentum) * grad
  detector::sgd_step(q, g, opt2);
  CHECK(q.values()[0] == doctest::Approx(1.0 - 0.5 * (2.0 + 0.9) * 2.0).epsilon(1e-12));

  // masked entries stay fixed
  detector::DetectorParams r;
  for (double& v : r.values()) v = 1.0;
  const auto mask = detector::layer_mask({"conv1", "conv2", "rpn"});
  detector::OptimState opt3{0.1, 0.0, 0.1, {}};
  detector::sgd_step(r, std::vector<double>(n, 0.0), opt3, &mask);
  const auto roi_seg = r.layer("roi_fc1.weight");
  for (const double v : roi_seg) CHECK(v == 1.0);
  const auto conv_seg = r.layer("conv1.weight");
  for (const double v : conv_seg) CHECK(v == doctest::Approx(1.0 - 0.1 * 0.1).epsilon(1e-12));
}

TEST_CASE("checkpoint round-trip and corruption errors") {
  const fs::path dir = fs::temp_directory_path() / "supici_test_ckpt";
  fs::create_directories(dir);

  const auto params = detector::DetectorParams::random_init(77, 1.0);
  detector::save_checkpoint(dir / "a.ckpt", params);
  const auto back = detector::load_checkpoint(dir / "a.ckpt");
  CHECK(back.values() == params.values());

  {
    std::ifstream in(dir / "a.ckpt", std::ios::binary);
    std::string magic;
    std::getline(in, magic);
    CHECK(magic == "SUPICI-CKPT-1");
  }

  std::ofstream(dir / "bad.ckpt") << "WRONG-MAGIC\n{}\n";
  CHECK_THROWS_AS(detector::load_checkpoint(dir / "bad.ckpt"), std::runtime_error);

  fs::copy_file(dir / "a.ckpt", dir / "trunc.ckpt", fs::copy_options::overwrite_existing);
  fs::resize_file(dir / "trunc.ckpt", fs::file_size(dir / "trunc.ckpt") - 64);
  CHECK_THROWS_AS(detector::load_checkpoint(dir / "trunc.ckpt"), std::runtime_error);

  fs::remove_all(dir);
}

TEST_CASE("loss_gradient: stationary point, eta linearity, finite differences") {
  const VolumeU8 patch = blob_patch(16, 60);
  const auto gt = blob_boxes(16, 60);
  const detector::DetectorParams zeros;  // all probabilities exactly 0.5

  // WE dead zone everywhere and eta = 0: gradient is exactly zero
  {
    detector::PlanOptions opts;
    opts.proposal = {8, 0.1};
    opts.we_instances = true;  // taus 0.25/0.75, p = 0.5 in the dead zone
    detector::LossPlan plan;
    plan.spec = detector::LossSpec::StudentTotal;
    plan.eta = 0.0;
    plan.patches.push_back(detector::build_patch_plan(zeros, patch, {}, opts));
    const auto lg = detector::loss_gradient(zeros, plan);
    CHECK_FALSE(lg.active);
    double norm = 0.0;
    for (const double v : lg.grad) norm += v * v;
    CHECK(std::sqrt(norm) <= 1e-9);
  }

  // gradient of eta * L_sup scales linearly in eta (no WE instances)
  {
    const auto params = detector::DetectorParams::random_init(61, 1.0);
    detector::PlanOptions opts;
    opts.proposal = {8, 0.1};
    opts.supervise_empty = true;
    detector::LossPlan p1;
    p1.spec = detector::LossSpec::StudentTotal;
    p1.eta = 1.0;
    p1.patches.push_back(detector::build_patch_plan(params, patch, gt, opts));
    detector::LossPlan p3 = p1;
    p3.eta = 3.0;
    const auto g1 = detector::loss_gradient(params, p1);
    const auto g3 = detector::loss_gradient(params, p3);
    for (std::size_t i = 0; i < g1.grad.size(); i += 97)
      CHECK(g3.grad[i] == doctest::Approx(3.0 * g1.grad[i]).epsilon(1e-9));
  }

  // quick finite-difference agreement (full sweep runs in the acceptance suite)
  for (const auto& r : checks::detector_gradient_suite(123, 4)) {
    INFO(r.name, " worst_rel_err=", r.worst_rel_err, " ", r.detail);
    CHECK(r.passed);
  }
}

TEST_CASE("train_source determinism and empty-dataset error") {
  data::SynthDomainSpec spec;
  spec.volume_side = 16;
  spec.radius_min = 2.0;
  spec.radius_max = 3.0;
  spec.seed = 70;
  std::vector<data::ScanRecord> scans;
  for (int i = 0; i < 2; ++i) scans.push_back(data::gen_synth_scan(spec, i, "s" + std::to_string(i)));

  detector::TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 4;
  cfg.patch_side = 16;
  cfg.proposal = {8, 0.1};

  detector::TrainReport rep1, rep2;
  const auto p1 = detector::train_source(scans, cfg, 5, nullptr, &rep1);
  const auto p2 = detector::train_source(scans, cfg, 5, nullptr, &rep2);
  CHECK(p1.values() == p2.values());
  CHECK(rep1.epoch_losses == rep2.epoch_losses);
  CHECK(rep1.epoch_losses.size() == 2);

  const auto p3 = detector::train_source(scans, cfg, 6);
  CHECK(p3.values() != p1.values());

  CHECK_THROWS_AS(detector::train_source({}, cfg, 5), std::invalid_argument);
}

TEST_CASE("infer_scan pads odd sizes and respects caps") {
  const auto params = detector::DetectorParams::random_init(80, 1.0);
  data::SynthDomainSpec spec;
  spec.volume_side = 20;  // not divisible by 4, forces padding
  spec.radius_min = 2.0;
  spec.radius_max = 4.0;
  spec.seed = 81;
  const auto scan = data::gen_synth_scan(spec, 0, "i");

  detector::InferConfig cfg;
  cfg.top_n = 16;
  cfg.max_detections = 5;
  const auto dets = detector::infer_scan(params, scan.voxels, cfg);
  CHECK(dets.size() <= 5);
  for (const auto& d : dets) {
    CHECK(d.score >= 0.0);
    CHECK(d.score <= 1.0);
  }

  const auto again = detector::infer_scan(params, scan.voxels, cfg);
  CHECK(again.size() == dets.size());
}
