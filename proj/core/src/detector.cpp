#include "supici/detector.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <thread>

#include <nlohmann/json.hpp>

#include "supici/data.hpp"
#include "supici/rng.hpp"

namespace supici::detector {

namespace {

// backbone channel widths
constexpr int kC1 = 8;
constexpr int kC2 = kFeatureChannels;       // 16
constexpr int kRpnOut = kAnchorsPerVoxel * 7;  // 21
constexpr int kRoiHidden = 32;
constexpr int kRoiOut = 7;

struct Layout {
  std::size_t conv1_w, conv1_b;
  std::size_t conv2_w, conv2_b;
  std::size_t rpn_w, rpn_b;
  std::size_t fc1_w, fc1_b;
  std::size_t fc2_w, fc2_b;
  std::size_t total;
};

constexpr Layout make_layout() {
  Layout l{};
  std::size_t off = 0;
  l.conv1_w = off, off += std::size_t(kC1) * 1 * 27;
  l.conv1_b = off, off += kC1;
  l.conv2_w = off, off += std::size_t(kC2) * kC1 * 27;
  l.conv2_b = off, off += kC2;
  l.rpn_w = off, off += std::size_t(kRpnOut) * kC2;
  l.rpn_b = off, off += kRpnOut;
  l.fc1_w = off, off += std::size_t(kRoiHidden) * kC2;
  l.fc1_b = off, off += kRoiHidden;
  l.fc2_w = off, off += std::size_t(kRoiOut) * kRoiHidden;
  l.fc2_b = off, off += kRoiOut;
  l.total = off;
  return l;
}

constexpr Layout kLayout = make_layout();

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Copy a tensor into a zero-padded buffer (1 voxel border) so the stride-2
/// 3^3 convolutions never branch on bounds.
Tensor4 pad1(const Tensor4& in) {
  Tensor4 out(in.channels, {in.sp.nz + 2, in.sp.ny + 2, in.sp.nx + 2});
  for (int c = 0; c < in.channels; ++c)
    for (int z = 0; z < in.sp.nz; ++z)
      for (int y = 0; y < in.sp.ny; ++y)
        std::memcpy(&out.v[out.index(c, z + 1, y + 1, 1)], &in.v[in.index(c, z, y, 0)],
                    sizeof(double) * in.sp.nx);
  return out;
}

Tensor4 strip1(const Tensor4& in) {
  Tensor4 out(in.channels, {in.sp.nz - 2, in.sp.ny - 2, in.sp.nx - 2});
  for (int c = 0; c < in.channels; ++c)
    for (int z = 0; z < out.sp.nz; ++z)
      for (int y = 0; y < out.sp.ny; ++y)
        std::memcpy(&out.v[out.index(c, z, y, 0)], &in.v[in.index(c, z + 1, y + 1, 1)],
                    sizeof(double) * out.sp.nx);
  return out;
}

/// 3^3 convolution, stride 2, padding 1. `in_pad` is the pad1() buffer.
void conv3s2_forward(const Tensor4& in_pad, int in_c, std::span<const double> w,
                     std::span<const double> b, int out_c, Tensor4& out) {
  const Dims3 od = out.sp;
  const std::size_t syz = std::size_t(in_pad.sp.ny) * in_pad.sp.nx;
  const std::size_t sx = in_pad.sp.nx;
  for (int oc = 0; oc < out_c; ++oc) {
    for (int z = 0; z < od.nz; ++z)
      for (int y = 0; y < od.ny; ++y)
        for (int x = 0; x < od.nx; ++x) {
          double acc = b[oc];
          const double* wp = &w[std::size_t(oc) * in_c * 27];
          for (int ic = 0; ic < in_c; ++ic) {
            const double* base = &in_pad.v[in_pad.index(ic, 2 * z, 2 * y, 2 * x)];
            for (int kz = 0; kz < 3; ++kz)
              for (int ky = 0; ky < 3; ++ky) {
                const double* row = base + kz * syz + ky * sx;
                acc += wp[0] * row[0] + wp[1] * row[1] + wp[2] * row[2];
                wp += 3;
              }
          }
          out.at(oc, z, y, x) = acc;
        }
  }
}

/// Backward pass of conv3s2_forward: accumulates weight/bias gradients and,
/// when din_pad is non-null, the gradient w.r.t. the padded input.
void conv3s2_backward(const Tensor4& in_pad, int in_c, std::span<const double> w, int out_c,
                      const Tensor4& dout, std::span<double> dw, std::span<double> db,
                      Tensor4* din_pad) {
  const Dims3 od = dout.sp;
  const std::size_t syz = std::size_t(in_pad.sp.ny) * in_pad.sp.nx;
  const std::size_t sx = in_pad.sp.nx;
  for (int oc = 0; oc < out_c; ++oc) {
    for (int z = 0; z < od.nz; ++z)
      for (int y = 0; y < od.ny; ++y)
        for (int x = 0; x < od.nx; ++x) {
          const double g = dout.at(oc, z, y, x);
          if (g == 0.0) continue;
          db[oc] += g;
          double* dwp = &dw[std::size_t(oc) * in_c * 27];
          const double* wp = &w[std::size_t(oc) * in_c * 27];
          for (int ic = 0; ic < in_c; ++ic) {
            const std::size_t base = in_pad.index(ic, 2 * z, 2 * y, 2 * x);
            for (int kz = 0; kz < 3; ++kz)
              for (int ky = 0; ky < 3; ++ky) {
                const std::size_t row = base + kz * syz + ky * sx;
                dwp[0] += g * in_pad.v[row];
                dwp[1] += g * in_pad.v[row + 1];
                dwp[2] += g * in_pad.v[row + 2];
                if (din_pad) {
                  din_pad->v[row] += g * wp[0];
                  din_pad->v[row + 1] += g * wp[1];
                  din_pad->v[row + 2] += g * wp[2];
                }
                dwp += 3;
                wp += 3;
              }
          }
        }
  }
}

struct Trace {
  Tensor4 x_pad;    // scaled input, padded
  Tensor4 pre1;     // conv1 pre-activation
  Tensor4 h1_pad;   // relu(pre1), padded
  Tensor4 pre2;     // conv2 pre-activation
  Tensor4 fmap;     // relu(pre2)
  Tensor4 logits;   // rpn head output, 21 channels
  RpnOutput rpn;
};

Dims3 feature_dims_for(Dims3 patch) {
  return {patch.nz / kStride, patch.ny / kStride, patch.nx / kStride};
}

Trace forward_trace(const DetectorParams& p, const VolumeU8& patch) {
  const Dims3 pd = patch.dims();
  if (pd.nz % kStride || pd.ny % kStride || pd.nx % kStride || pd.total() == 0)
    throw std::invalid_argument("forward: patch dimensions must be positive multiples of 4");

  Trace t;
  Tensor4 x(1, pd);
  for (std::size_t i = 0; i < patch.data().size(); ++i) x.v[i] = patch.data()[i] / 255.0;
  t.x_pad = pad1(x);

  const auto& v = p.values();
  const Dims3 d1{pd.nz / 2, pd.ny / 2, pd.nx / 2};
  t.pre1 = Tensor4(kC1, d1);
  conv3s2_forward(t.x_pad, 1, {&v[kLayout.conv1_w], std::size_t(kC1) * 27},
                  {&v[kLayout.conv1_b], kC1}, kC1, t.pre1);
  Tensor4 h1 = t.pre1;
  for (double& e : h1.v) e = std::max(0.0, e);
  t.h1_pad = pad1(h1);

  const Dims3 d2 = feature_dims_for(pd);
  t.pre2 = Tensor4(kC2, d2);
  conv3s2_forward(t.h1_pad, kC1, {&v[kLayout.conv2_w], std::size_t(kC2) * kC1 * 27},
                  {&v[kLayout.conv2_b], kC2}, kC2, t.pre2);
  t.fmap = t.pre2;
  for (double& e : t.fmap.v) e = std::max(0.0, e);

  // rpn head: per-voxel linear 16 -> 21
  t.logits = Tensor4(kRpnOut, d2);
  const std::size_t nvox = d2.total();
  for (int o = 0; o < kRpnOut; ++o) {
    const double* wrow = &v[kLayout.rpn_w + std::size_t(o) * kC2];
    const double bias = v[kLayout.rpn_b + o];
    double* out = &t.logits.v[std::size_t(o) * nvox];
    for (std::size_t i = 0; i < nvox; ++i) out[i] = bias;
    for (int c = 0; c < kC2; ++c) {
      const double wv = wrow[c];
      const double* f = &t.fmap.v[std::size_t(c) * nvox];
      for (std::size_t i = 0; i < nvox; ++i) out[i] += wv * f[i];
    }
  }

  t.rpn.feature_dims = d2;
  t.rpn.probs.resize(nvox * kAnchorsPerVoxel);
  t.rpn.offsets.resize(nvox * kAnchorsPerVoxel);
  for (std::size_t i = 0; i < nvox; ++i)
    for (int a = 0; a < kAnchorsPerVoxel; ++a) {
      const std::size_t idx = i * kAnchorsPerVoxel + a;
      t.rpn.probs[idx] = sigmoid(t.logits.v[std::size_t(a * 7) * nvox + i]);
      for (int d = 0; d < 6; ++d)
        t.rpn.offsets[idx][d] = t.logits.v[std::size_t(a * 7 + 1 + d) * nvox + i];
    }
  return t;
}

geom::Box3 clip_box(const geom::Box3& b, Dims3 bounds) {
  constexpr double kMinSide = 1e-3;
  const auto clip_axis = [](double lo, double hi, double center, double bound, double& out_c,
                            double& out_s) {
    const double lo2 = std::clamp(lo, 0.0, bound);
    const double hi2 = std::clamp(hi, 0.0, bound);
    if (hi2 - lo2 < kMinSide) {
      out_c = std::clamp(center, 0.0, bound);
      out_s = kMinSide;
    } else {
      out_c = 0.5 * (lo2 + hi2);
      out_s = hi2 - lo2;
    }
  };
  geom::Vec3 c, s;
  clip_axis(b.lo().z, b.hi().z, b.center.z, bounds.nz, c.z, s.z);
  clip_axis(b.lo().y, b.hi().y, b.center.y, bounds.ny, c.y, s.y);
  clip_axis(b.lo().x, b.hi().x, b.center.x, bounds.nx, c.x, s.x);
  return geom::Box3{c, s};
}

}  // namespace

const std::vector<LayerInfo>& shape_manifest() {
  static const std::vector<LayerInfo> manifest = {
      {"conv1.weight", {kC1, 1, 3, 3, 3}, kLayout.conv1_w, std::size_t(kC1) * 27},
      {"conv1.bias", {kC1}, kLayout.conv1_b, kC1},
      {"conv2.weight", {kC2, kC1, 3, 3, 3}, kLayout.conv2_w, std::size_t(kC2) * kC1 * 27},
      {"conv2.bias", {kC2}, kLayout.conv2_b, kC2},
      {"rpn.weight", {kRpnOut, kC2}, kLayout.rpn_w, std::size_t(kRpnOut) * kC2},
      {"rpn.bias", {kRpnOut}, kLayout.rpn_b, kRpnOut},
      {"roi_fc1.weight", {kRoiHidden, kC2}, kLayout.fc1_w, std::size_t(kRoiHidden) * kC2},
      {"roi_fc1.bias", {kRoiHidden}, kLayout.fc1_b, kRoiHidden},
      {"roi_fc2.weight", {kRoiOut, kRoiHidden}, kLayout.fc2_w, std::size_t(kRoiOut) * kRoiHidden},
      {"roi_fc2.bias", {kRoiOut}, kLayout.fc2_b, kRoiOut},
  };
  return manifest;
}

std::size_t param_count() { return kLayout.total; }

DetectorParams::DetectorParams() : v_(kLayout.total, 0.0) {}

DetectorParams DetectorParams::random_init(std::uint64_t seed, double scale) {
  DetectorParams p;
  rng::Engine eng(seed);
  const auto init_layer = [&](std::string_view name, int fan_in) {
    auto seg = p.layer(name);
    const double std_dev = scale * std::sqrt(2.0 / fan_in);
    for (double& w : seg) w = eng.normal() * std_dev;
  };
  init_layer("conv1.weight", 27);
  init_layer("conv2.weight", kC1 * 27);
  init_layer("rpn.weight", kC2);
  init_layer("roi_fc1.weight", kC2);
  init_layer("roi_fc2.weight", kRoiHidden);
  return p;  // biases stay zero
}

std::span<double> DetectorParams::layer(std::string_view name) {
  for (const LayerInfo& l : shape_manifest())
    if (l.name == name) return {&v_[l.offset], l.size};
  throw std::invalid_argument("unknown layer: " + std::string(name));
}

std::span<const double> DetectorParams::layer(std::string_view name) const {
  for (const LayerInfo& l : shape_manifest())
    if (l.name == name) return {&v_[l.offset], l.size};
  throw std::invalid_argument("unknown layer: " + std::string(name));
}

void save_checkpoint(const std::filesystem::path& path, const DetectorParams& params) {
  nlohmann::json manifest;
  manifest["total"] = param_count();
  manifest["layers"] = nlohmann::json::array();
  for (const LayerInfo& l : shape_manifest())
    manifest["layers"].push_back({{"name", l.name}, {"shape", l.shape}});

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out << kCheckpointMagic << "\n" << manifest.dump() << "\n";
  out.write(reinterpret_cast<const char*>(params.values().data()),
            static_cast<std::streamsize>(params.values().size() * sizeof(double)));
}

DetectorParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::string magic, manifest_line;
  if (!std::getline(in, magic) || magic != kCheckpointMagic)
    throw std::runtime_error("bad checkpoint magic in " + path.string());
  if (!std::getline(in, manifest_line))
    throw std::runtime_error("missing manifest in " + path.string());

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(manifest_line);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("malformed checkpoint manifest: " + std::string(e.what()));
  }
  if (manifest.at("total").get<std::size_t>() != param_count())
    throw std::runtime_error("checkpoint parameter count mismatch in " + path.string());
  const auto& layers = manifest.at("layers");
  const auto& expect = shape_manifest();
  if (layers.size() != expect.size())
    throw std::runtime_error("checkpoint layer count mismatch in " + path.string());
  for (std::size_t i = 0; i < expect.size(); ++i) {
    if (layers[i].at("name").get<std::string>() != expect[i].name ||
        layers[i].at("shape").get<std::vector<int>>() != expect[i].shape)
      throw std::runtime_error("checkpoint shape manifest mismatch at layer " + expect[i].name);
  }

  DetectorParams p;
  in.read(reinterpret_cast<char*>(p.values().data()),
          static_cast<std::streamsize>(p.values().size() * sizeof(double)));
  if (in.gcount() != static_cast<std::streamsize>(p.values().size() * sizeof(double)))
    throw std::runtime_error("truncated checkpoint " + path.string());
  for (const double v : p.values())
    if (!std::isfinite(v)) throw std::runtime_error("non-finite value in checkpoint");
  return p;
}

std::vector<std::uint8_t> layer_mask(const std::vector<std::string>& prefixes) {
  std::vector<std::uint8_t> mask(param_count(), 0);
  for (const LayerInfo& l : shape_manifest())
    for (const std::string& prefix : prefixes)
      if (l.name.rfind(prefix, 0) == 0)
        std::fill(mask.begin() + l.offset, mask.begin() + l.offset + l.size, std::uint8_t{1});
  return mask;
}

geom::Box3 AnchorGrid::anchor_box(int z, int y, int x, int a) const {
  const double side = kAnchorSides[a];
  return geom::Box3{{(z + 0.5) * kStride, (y + 0.5) * kStride, (x + 0.5) * kStride},
                    {side, side, side}};
}

geom::Box3 AnchorGrid::anchor_box(int flat) const {
  const int a = flat % kAnchorsPerVoxel;
  const int vox = flat / kAnchorsPerVoxel;
  const int x = vox % feature_dims.nx;
  const int y = (vox / feature_dims.nx) % feature_dims.ny;
  const int z = vox / (feature_dims.nx * feature_dims.ny);
  return anchor_box(z, y, x, a);
}

ForwardResult forward(const DetectorParams& params, const VolumeU8& patch) {
  Trace t = forward_trace(params, patch);
  return {std::move(t.fmap), std::move(t.rpn)};
}

std::vector<Proposal> propose(const RpnOutput& rpn, const VolumeU8& patch, int top_n,
                              double nms_iou) {
  if (top_n < 1) throw std::invalid_argument("propose: top_n must be >= 1");
  const AnchorGrid grid{rpn.feature_dims};
  std::vector<geom::Detection> dets(rpn.count());
  std::vector<char> degenerate(rpn.count(), 0);
  for (int i = 0; i < rpn.count(); ++i) {
    dets[i] = {clip_box(geom::decode_offsets(rpn.offsets[i], grid.anchor_box(i)), patch.dims()),
               rpn.probs[i]};
    // boxes clipped to slivers carry no usable region
    const geom::Vec3 s = dets[i].box.size;
    degenerate[i] = s.z < 1.0 || s.y < 1.0 || s.x < 1.0;
  }

  std::vector<Proposal> out;
  // greedy NMS keeping anchor indices, ties broken by anchor order
  std::vector<int> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return dets[a].score > dets[b].score; });
  for (const int i : order) {
    if (degenerate[i]) continue;
    if (static_cast<int>(out.size()) >= top_n) break;
    bool suppressed = false;
    for (const Proposal& kept : out)
      if (geom::iou3d(dets[i].box, kept.box) >= nms_iou) {
        suppressed = true;
        break;
      }
    if (!suppressed) out.push_back({dets[i].box, dets[i].score, i});
  }
  return out;
}

std::vector<int> roi_member_voxels(Dims3 fd, const geom::Box3& box) {
  const geom::Vec3 c{box.center.z / kStride, box.center.y / kStride, box.center.x / kStride};
  const geom::Vec3 half{box.size.z / (2.0 * kStride), box.size.y / (2.0 * kStride),
                        box.size.x / (2.0 * kStride)};
  std::vector<int> members;
  const auto range = [](double center, double h, int n, int& lo, int& hi) {
    lo = std::max(0, static_cast<int>(std::ceil(center - h - 0.5)));
    hi = std::min(n - 1, static_cast<int>(std::floor(center + h - 0.5)));
  };
  int z0, z1, y0, y1, x0, x1;
  range(c.z, half.z, fd.nz, z0, z1);
  range(c.y, half.y, fd.ny, y0, y1);
  range(c.x, half.x, fd.nx, x0, x1);
  for (int z = z0; z <= z1; ++z)
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) members.push_back((z * fd.ny + y) * fd.nx + x);

  if (members.empty()) {
    const auto nearest = [](double center, int n) {
      return std::clamp(static_cast<int>(data::round_half_away(center - 0.5)), 0, n - 1);
    };
    members.push_back((nearest(c.z, fd.nz) * fd.ny + nearest(c.y, fd.ny)) * fd.nx +
                      nearest(c.x, fd.nx));
  }
  return members;
}

std::vector<double> roi_features(const Tensor4& fmap, const geom::Box3& box) {
  const std::vector<int> members = roi_member_voxels(fmap.sp, box);
  std::vector<double> pooled(fmap.channels, 0.0);
  const std::size_t nvox = fmap.sp.total();
  for (int c = 0; c < fmap.channels; ++c) {
    double acc = 0.0;
    for (const int m : members) acc += fmap.v[std::size_t(c) * nvox + m];
    pooled[c] = acc / static_cast<double>(members.size());
  }
  return pooled;
}

RoiOutput forward_roi(const DetectorParams& params, std::span<const double> pooled) {
  if (pooled.size() != kC2) throw std::invalid_argument("forward_roi: pooled size must be 16");
  const auto& v = params.values();
  std::array<double, kRoiHidden> hidden;
  for (int h = 0; h < kRoiHidden; ++h) {
    double acc = v[kLayout.fc1_b + h];
    const double* w = &v[kLayout.fc1_w + std::size_t(h) * kC2];
    for (int c = 0; c < kC2; ++c) acc += w[c] * pooled[c];
    hidden[h] = std::max(0.0, acc);
  }
  std::array<double, kRoiOut> out{};
  for (int o = 0; o < kRoiOut; ++o) {
    double acc = v[kLayout.fc2_b + o];
    const double* w = &v[kLayout.fc2_w + std::size_t(o) * kRoiHidden];
    for (int h = 0; h < kRoiHidden; ++h) acc += w[h] * hidden[h];
    out[o] = acc;
  }
  RoiOutput r;
  r.prob = sigmoid(out[0]);
  for (int d = 0; d < 6; ++d) r.offsets[d] = out[1 + d];
  return r;
}

std::vector<losses::InstanceTarget> assign_box_targets(const std::vector<geom::Box3>& gt,
                                                       const std::vector<geom::Box3>& candidates,
                                                       const AssignConfig& cfg) {
  std::vector<losses::InstanceTarget> targets(candidates.size());
  std::vector<double> best_iou(candidates.size(), 0.0);
  std::vector<int> best_gt(candidates.size(), -1);

  for (std::size_t c = 0; c < candidates.size(); ++c) {
    for (std::size_t g = 0; g < gt.size(); ++g) {
      const double iou = geom::iou3d(gt[g], candidates[c]);
      if (iou > best_iou[c]) {
        best_iou[c] = iou;
        best_gt[c] = static_cast<int>(g);
      }
    }
    if (best_gt[c] >= 0 && best_iou[c] >= cfg.pos_iou)
      targets[c] = {losses::TargetLabel::Positive,
                    geom::encode_offsets(gt[best_gt[c]], candidates[c])};
    else if (best_iou[c] < cfg.neg_iou)
      targets[c] = {losses::TargetLabel::Negative, {}};
    // else: Ignore
  }

  // every gt's argmax candidate is positive regardless of the threshold
  for (std::size_t g = 0; g < gt.size(); ++g) {
    double best = 0.0;
    int arg = -1;
    for (std::size_t c = 0; c < candidates.size(); ++c) {
      const double iou = geom::iou3d(gt[g], candidates[c]);
      if (iou > best) {
        best = iou;
        arg = static_cast<int>(c);
      }
    }
    if (arg >= 0)
      targets[arg] = {losses::TargetLabel::Positive, geom::encode_offsets(gt[g], candidates[arg])};
  }
  return targets;
}

PatchPlan build_patch_plan(const DetectorParams& params, const VolumeU8& patch,
                           const std::vector<geom::Box3>& gt_boxes, const PlanOptions& opts) {
  const Trace t = forward_trace(params, patch);
  const AnchorGrid grid{t.rpn.feature_dims};

  PatchPlan plan;
  plan.patch = patch;

  const bool supervise = !gt_boxes.empty() || opts.supervise_empty;
  if (supervise) {
    std::vector<geom::Box3> anchor_boxes;
    anchor_boxes.reserve(grid.count());
    for (int i = 0; i < grid.count(); ++i) anchor_boxes.push_back(grid.anchor_box(i));
    plan.rpn_targets = assign_box_targets(gt_boxes, anchor_boxes, opts.assign);

    if (opts.neg_base > 0) {
      std::vector<std::size_t> negatives;
      int positives = 0;
      for (std::size_t i = 0; i < plan.rpn_targets.size(); ++i) {
        if (plan.rpn_targets[i].label == losses::TargetLabel::Negative) negatives.push_back(i);
        if (plan.rpn_targets[i].label == losses::TargetLabel::Positive) ++positives;
      }
      const std::size_t keep =
          std::size_t(std::max(opts.neg_base, opts.neg_pos_ratio * positives));
      if (negatives.size() > keep) {
        rng::Engine sampler(opts.sample_seed);
        sampler.shuffle(negatives);
        for (std::size_t i = keep; i < negatives.size(); ++i)
          plan.rpn_targets[negatives[i]].label = losses::TargetLabel::Ignore;
      }
    }
  }

  std::vector<geom::Box3> roi_boxes;
  for (const Proposal& p : propose(t.rpn, patch, opts.proposal.top_n, opts.proposal.nms_iou))
    roi_boxes.push_back(p.box);
  if (opts.add_gt_to_roi)
    for (const geom::Box3& g : gt_boxes) roi_boxes.push_back(clip_box(g, patch.dims()));

  std::vector<losses::InstanceTarget> roi_targets =
      supervise ? assign_box_targets(gt_boxes, roi_boxes, opts.assign)
                : std::vector<losses::InstanceTarget>(roi_boxes.size());

  for (std::size_t i = 0; i < roi_boxes.size(); ++i) {
    RoiPlanInstance inst;
    inst.box = roi_boxes[i];
    inst.members = roi_member_voxels(t.rpn.feature_dims, inst.box);
    inst.target = roi_targets[i];
    if (opts.we_instances) {
      inst.in_we = true;
      const RoiOutput out = forward_roi(params, roi_features(t.fmap, inst.box));
      const double p = std::clamp(out.prob, losses::kClampEps, 1.0 - losses::kClampEps);
      inst.we_branch = p < opts.we.tau1 ? -1 : (p > opts.we.tau2 ? 1 : 0);
    }
    plan.roi.push_back(std::move(inst));
  }
  return plan;
}

PatchPlan build_contrastive_patch_plan(const VolumeU8& patch,
                                       const std::vector<ContrastiveSelection>& selections,
                                       Dims3 feature_dims) {
  PatchPlan plan;
  plan.patch = patch;
  for (const ContrastiveSelection& sel : selections)
    plan.instances.push_back({roi_member_voxels(feature_dims, sel.box), sel.foreground});
  return plan;
}

namespace {

/// Branch-frozen weighted entropy term shared with losses::we_loss semantics.
struct WETerm {
  double value = 0.0;
  double dvalue_dp = 0.0;
};

WETerm we_branch_term(double p_raw, int branch, const losses::WEConfig& cfg) {
  WETerm t;
  if (branch == 0) return t;
  const double eps = losses::kClampEps;
  const double p = std::clamp(p_raw, eps, 1.0 - eps);
  const bool clamped = !(p_raw > eps && p_raw < 1.0 - eps);
  const double lp = std::log(p);
  if (branch < 0) {
    const double factor = (1.0 - cfg.alpha) * std::pow(p, cfg.gamma);
    t.value = -factor * p * lp;
    if (!clamped)
      t.dvalue_dp = cfg.detach_modulating_factor
                        ? -factor * (lp + 1.0)
                        : -(1.0 - cfg.alpha) * std::pow(p, cfg.gamma) *
                              ((cfg.gamma + 1.0) * lp + 1.0);
  } else {
    const double factor = cfg.alpha * std::pow(1.0 - p, cfg.gamma);
    t.value = -factor * p * lp;
    if (!clamped) {
      if (cfg.detach_modulating_factor) {
        t.dvalue_dp = -factor * (lp + 1.0);
      } else {
        const double dfactor =
            cfg.gamma > 0.0 ? -cfg.alpha * cfg.gamma * std::pow(1.0 - p, cfg.gamma - 1.0) : 0.0;
        t.dvalue_dp = -(dfactor * p * lp + factor * (lp + 1.0));
      }
    }
  }
  return t;
}

struct PatchEval {
  double value = 0.0;
  bool active = false;
  std::vector<double> grad;  // empty when gradients not requested
};

struct InstanceGrad {
  const std::vector<double>* fg = nullptr;  // per foreground instance, patch order
  const std::vector<double>* bg = nullptr;
  std::size_t fg_offset = 0;  // first index of this patch's instances
  std::size_t bg_offset = 0;
};

void pool_patch_instances(const Tensor4& fmap, const PatchPlan& plan,
                          std::vector<std::vector<double>>& fg,
                          std::vector<std::vector<double>>& bg) {
  const std::size_t nvox = fmap.sp.total();
  for (const ContrastivePlanInstance& inst : plan.instances) {
    std::vector<double> pooled(kC2, 0.0);
    for (int c = 0; c < kC2; ++c) {
      double acc = 0.0;
      for (const int m : inst.members) acc += fmap.v[std::size_t(c) * nvox + m];
      pooled[c] = acc / static_cast<double>(inst.members.size());
    }
    (inst.foreground ? fg : bg).push_back(std::move(pooled));
  }
}

PatchEval evaluate_patch(const DetectorParams& params, const PatchPlan& plan,
                         const LossPlan& spec, bool with_grad,
                         const losses::FeatureGradients* contrastive_grad = nullptr,
                         std::size_t fg_offset = 0, std::size_t bg_offset = 0) {
  const Trace t = forward_trace(params, plan.patch);
  const Dims3 fd = t.rpn.feature_dims;
  const std::size_t nvox = fd.total();
  const auto& v = params.values();

  PatchEval result;
  if (with_grad) result.grad.assign(param_count(), 0.0);

  Tensor4 dlogits(kRpnOut, fd);
  Tensor4 dfmap(kC2, fd);

  const double sup_scale = spec.spec == LossSpec::StudentTotal ? spec.eta : 1.0;

  // ---- RPN supervision ----
  if (spec.spec != LossSpec::Contrastive && !plan.rpn_targets.empty()) {
    if (plan.rpn_targets.size() != nvox * kAnchorsPerVoxel)
      throw std::invalid_argument("plan rpn_targets size mismatch");
    for (std::size_t i = 0; i < plan.rpn_targets.size(); ++i) {
      const losses::InstanceTarget& target = plan.rpn_targets[i];
      if (target.label == losses::TargetLabel::Ignore) continue;
      result.active = true;
      const double p = t.rpn.probs[i];
      const int cls_target = target.label == losses::TargetLabel::Positive ? 1 : 0;
      result.value += sup_scale * losses::bce_loss(p, cls_target).value;
      const std::size_t vox = i / kAnchorsPerVoxel;
      const int a = static_cast<int>(i % kAnchorsPerVoxel);
      // logits-form BCE gradient: stays nonzero in sigmoid saturation
      if (with_grad)
        dlogits.v[std::size_t(a * 7) * nvox + vox] += sup_scale * (p - cls_target);
      if (target.label == losses::TargetLabel::Positive) {
        const losses::LossOutput reg = losses::smooth_l1(t.rpn.offsets[i], target.offsets);
        result.value += sup_scale * reg.value;
        if (with_grad)
          for (int d = 0; d < 6; ++d)
            dlogits.v[std::size_t(a * 7 + 1 + d) * nvox + vox] += sup_scale * reg.grad[d];
      }
    }
  }

  // ---- RoI instances (supervision + weighted entropy) ----
  for (const RoiPlanInstance& inst : plan.roi) {
    if (spec.spec == LossSpec::Contrastive) break;
    // pooled forward
    std::vector<double> pooled(kC2, 0.0);
    for (int c = 0; c < kC2; ++c) {
      double acc = 0.0;
      for (const int m : inst.members) acc += t.fmap.v[std::size_t(c) * nvox + m];
      pooled[c] = acc / static_cast<double>(inst.members.size());
    }
    std::array<double, kRoiHidden> hidden_pre, hidden;
    for (int h = 0; h < kRoiHidden; ++h) {
      double acc = v[kLayout.fc1_b + h];
      const double* w = &v[kLayout.fc1_w + std::size_t(h) * kC2];
      for (int c = 0; c < kC2; ++c) acc += w[c] * pooled[c];
      hidden_pre[h] = acc;
      hidden[h] = std::max(0.0, acc);
    }
    std::array<double, kRoiOut> out{};
    for (int o = 0; o < kRoiOut; ++o) {
      double acc = v[kLayout.fc2_b + o];
      const double* w = &v[kLayout.fc2_w + std::size_t(o) * kRoiHidden];
      for (int h = 0; h < kRoiHidden; ++h) acc += w[h] * hidden[h];
      out[o] = acc;
    }
    const double prob = sigmoid(out[0]);

    double dlogit = 0.0;
    std::array<double, 6> doffsets{};

    if (inst.target.label != losses::TargetLabel::Ignore) {
      result.active = true;
      const int cls_target = inst.target.label == losses::TargetLabel::Positive ? 1 : 0;
      result.value += sup_scale * losses::bce_loss(prob, cls_target).value;
      dlogit += sup_scale * (prob - cls_target);  // logits-form BCE gradient
      if (inst.target.label == losses::TargetLabel::Positive) {
        geom::Offsets pred;
        for (int d = 0; d < 6; ++d) pred[d] = out[1 + d];
        const losses::LossOutput reg = losses::smooth_l1(pred, inst.target.offsets);
        result.value += sup_scale * reg.value;
        for (int d = 0; d < 6; ++d) doffsets[d] += sup_scale * reg.grad[d];
      }
    }

    if (spec.spec == LossSpec::StudentTotal && inst.in_we) {
      const WETerm term = we_branch_term(prob, inst.we_branch, spec.we);
      result.value += term.value;
      dlogit += term.dvalue_dp * prob * (1.0 - prob);
      if (inst.we_branch != 0) result.active = true;
    }

    if (!with_grad || (dlogit == 0.0 && doffsets == std::array<double, 6>{})) continue;

    // backward through the roi head into dfmap and the head parameters
    std::array<double, kRoiOut> dout{};
    dout[0] = dlogit;
    for (int d = 0; d < 6; ++d) dout[1 + d] = doffsets[d];

    std::array<double, kRoiHidden> dhidden{};
    for (int o = 0; o < kRoiOut; ++o) {
      if (dout[o] == 0.0) continue;
      result.grad[kLayout.fc2_b + o] += dout[o];
      double* dw = &result.grad[kLayout.fc2_w + std::size_t(o) * kRoiHidden];
      const double* w = &v[kLayout.fc2_w + std::size_t(o) * kRoiHidden];
      for (int h = 0; h < kRoiHidden; ++h) {
        dw[h] += dout[o] * hidden[h];
        dhidden[h] += dout[o] * w[h];
      }
    }
    std::vector<double> dpooled(kC2, 0.0);
    for (int h = 0; h < kRoiHidden; ++h) {
      if (hidden_pre[h] <= 0.0 || dhidden[h] == 0.0) continue;
      result.grad[kLayout.fc1_b + h] += dhidden[h];
      double* dw = &result.grad[kLayout.fc1_w + std::size_t(h) * kC2];
      const double* w = &v[kLayout.fc1_w + std::size_t(h) * kC2];
      for (int c = 0; c < kC2; ++c) {
        dw[c] += dhidden[h] * pooled[c];
        dpooled[c] += dhidden[h] * w[c];
      }
    }
    const double inv_members = 1.0 / static_cast<double>(inst.members.size());
    for (int c = 0; c < kC2; ++c) {
      if (dpooled[c] == 0.0) continue;
      const double g = dpooled[c] * inv_members;
      for (const int m : inst.members) dfmap.v[std::size_t(c) * nvox + m] += g;
    }
  }

  if (spec.spec == LossSpec::Contrastive && with_grad && contrastive_grad) {
    std::size_t fgi = fg_offset, bgi = bg_offset;
    for (const ContrastivePlanInstance& inst : plan.instances) {
      const std::vector<double>& dvec = inst.foreground
                                            ? contrastive_grad->foreground[fgi++]
                                            : contrastive_grad->background[bgi++];
      const double inv = 1.0 / static_cast<double>(inst.members.size());
      for (int c = 0; c < kC2; ++c) {
        if (dvec[c] == 0.0) continue;
        const double g = dvec[c] * inv;
        for (const int m : inst.members) dfmap.v[std::size_t(c) * nvox + m] += g;
      }
    }
  }

  if (!with_grad) return result;

  // ---- backbone backward ----
  // rpn head backward: dfmap += W^T dlogits, accumulate rpn weight grads
  for (int o = 0; o < kRpnOut; ++o) {
    const double* dl = &dlogits.v[std::size_t(o) * nvox];
    bool any = false;
    for (std::size_t i = 0; i < nvox; ++i)
      if (dl[i] != 0.0) {
        any = true;
        break;
      }
    if (!any) continue;
    const double* w = &v[kLayout.rpn_w + std::size_t(o) * kC2];
    double* dw = &result.grad[kLayout.rpn_w + std::size_t(o) * kC2];
    double db = 0.0;
    for (std::size_t i = 0; i < nvox; ++i) db += dl[i];
    result.grad[kLayout.rpn_b + o] += db;
    for (int c = 0; c < kC2; ++c) {
      const double* f = &t.fmap.v[std::size_t(c) * nvox];
      double* dfm = &dfmap.v[std::size_t(c) * nvox];
      double acc = 0.0;
      const double wv = w[c];
      for (std::size_t i = 0; i < nvox; ++i) {
        acc += dl[i] * f[i];
        dfm[i] += wv * dl[i];
      }
      dw[c] += acc;
    }
  }

  // relu at conv2
  Tensor4 dpre2 = dfmap;
  for (std::size_t i = 0; i < dpre2.v.size(); ++i)
    if (t.pre2.v[i] <= 0.0) dpre2.v[i] = 0.0;

  Tensor4 dh1_pad(kC1, t.h1_pad.sp);
  conv3s2_backward(t.h1_pad, kC1, {&v[kLayout.conv2_w], std::size_t(kC2) * kC1 * 27}, kC2, dpre2,
                   {&result.grad[kLayout.conv2_w], std::size_t(kC2) * kC1 * 27},
                   {&result.grad[kLayout.conv2_b], kC2}, &dh1_pad);

  Tensor4 dh1 = strip1(dh1_pad);
  for (std::size_t i = 0; i < dh1.v.size(); ++i)
    if (t.pre1.v[i] <= 0.0) dh1.v[i] = 0.0;

  conv3s2_backward(t.x_pad, 1, {&v[kLayout.conv1_w], std::size_t(kC1) * 27}, kC1, dh1,
                   {&result.grad[kLayout.conv1_w], std::size_t(kC1) * 27},
                   {&result.grad[kLayout.conv1_b], kC1}, nullptr);

  return result;
}

const char* spec_name(LossSpec s) {
  switch (s) {
    case LossSpec::Contrastive: return "contrastive";
    case LossSpec::Supervised: return "supervised";
    case LossSpec::StudentTotal: return "student_total";
  }
  return "?";
}

LossGradient evaluate_plan(const DetectorParams& params, const LossPlan& plan, bool with_grad) {
  LossGradient out;
  out.active = false;
  if (with_grad) out.grad.assign(param_count(), 0.0);
  if (plan.patches.empty()) return out;

  // The contrastive loss runs over the instance sets of the whole batch, so
  // nodules from different patches form positive pairs. Kernel value and
  // per-instance gradients are computed once, then scattered per patch.
  losses::ContrastiveLossOutput ctr;
  std::vector<std::size_t> fg_offsets(plan.patches.size(), 0),
      bg_offsets(plan.patches.size(), 0);
  if (plan.spec == LossSpec::Contrastive) {
    std::vector<std::vector<double>> fg, bg;
    for (std::size_t i = 0; i < plan.patches.size(); ++i) {
      fg_offsets[i] = fg.size();
      bg_offsets[i] = bg.size();
      const Trace t = forward_trace(params, plan.patches[i].patch);
      pool_patch_instances(t.fmap, plan.patches[i], fg, bg);
    }
    ctr = losses::contrastive_loss(losses::InstanceFeatures(std::move(fg), std::move(bg)),
                                   plan.contrastive);
  }

  std::vector<PatchEval> evals(plan.patches.size());
  parallel_for_ordered(plan.patches.size(), plan.workers, [&](std::size_t i) {
    evals[i] = evaluate_patch(params, plan.patches[i], plan, with_grad,
                              plan.spec == LossSpec::Contrastive ? &ctr.grad : nullptr,
                              fg_offsets[i], bg_offsets[i]);
  });

  // supervised objectives are means over patches; the contrastive objective
  // is the batch-level Eq-style term, already normalized by pair counts
  const double inv = plan.spec == LossSpec::Contrastive
                         ? 1.0
                         : 1.0 / static_cast<double>(plan.patches.size());
  for (std::size_t i = 0; i < plan.patches.size(); ++i) {
    if (!std::isfinite(evals[i].value))
      throw std::runtime_error(std::string("non-finite ") + spec_name(plan.spec) +
                               " loss in patch " + std::to_string(i));
    out.value += evals[i].value * inv;
    out.active = out.active || evals[i].active;
    if (with_grad)
      for (std::size_t j = 0; j < out.grad.size(); ++j) out.grad[j] += evals[i].grad[j] * inv;
  }
  if (plan.spec == LossSpec::Contrastive) {
    if (!std::isfinite(ctr.value))
      throw std::runtime_error("non-finite contrastive loss value");
    out.value += ctr.value;
    out.active = out.active || ctr.active;
  }
  return out;
}

}  // namespace

double eval_loss(const DetectorParams& params, const LossPlan& plan) {
  return evaluate_plan(params, plan, false).value;
}

LossGradient loss_gradient(const DetectorParams& params, const LossPlan& plan) {
  return evaluate_plan(params, plan, true);
}

double clip_gradient(std::vector<double>& grad, double max_norm) {
  double norm_sq = 0.0;
  for (const double g : grad) norm_sq += g * g;
  const double norm = std::sqrt(norm_sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (double& g : grad) g *= scale;
  }
  return norm;
}

void sgd_step(DetectorParams& params, const std::vector<double>& grad, OptimState& opt,
              const std::vector<std::uint8_t>* update_mask) {
  auto& p = params.values();
  if (grad.size() != p.size()) throw std::invalid_argument("sgd_step: gradient size mismatch");
  if (opt.velocity.empty()) opt.velocity.assign(p.size(), 0.0);
  if (opt.velocity.size() != p.size())
    throw std::invalid_argument("sgd_step: velocity size mismatch");
  if (update_mask && update_mask->size() != p.size())
    throw std::invalid_argument("sgd_step: mask size mismatch");

  for (std::size_t i = 0; i < p.size(); ++i) {
    if (update_mask && !(*update_mask)[i]) continue;
    opt.velocity[i] = opt.momentum * opt.velocity[i] + grad[i] + opt.weight_decay * p[i];
    p[i] -= opt.lr * opt.velocity[i];
  }
}

void parallel_for_ordered(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
  workers = std::max(1, std::min<int>(workers, static_cast<int>(n)));
  if (workers == 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= n) return;
        fn(i);
      }
    });
  for (std::thread& th : pool) th.join();
}

DetectorParams train_source(const std::vector<data::ScanRecord>& scans, const TrainConfig& cfg,
                            std::uint64_t seed, const std::filesystem::path* checkpoint_dir,
                            TrainReport* report) {
  if (scans.empty()) throw std::invalid_argument("train_source: empty dataset");

  struct TrainPatch {
    VolumeU8 voxels;
    std::vector<geom::Box3> gt;
  };
  std::vector<TrainPatch> patches;
  for (const data::ScanRecord& scan : scans) {
    for (data::Patch& p : data::crop_patches(scan.voxels, cfg.patch_side, cfg.patch_overlap)) {
      TrainPatch tp;
      tp.voxels = std::move(p.voxels);
      for (const geom::Annotation& ann : scan.annotations) {
        const geom::Vec3 local{ann.center.z - p.offset[0], ann.center.y - p.offset[1],
                               ann.center.x - p.offset[2]};
        if (local.z >= 0 && local.z < cfg.patch_side && local.y >= 0 &&
            local.y < cfg.patch_side && local.x >= 0 && local.x < cfg.patch_side)
          tp.gt.push_back(geom::annotation_box({local, ann.radius}));
      }
      patches.push_back(std::move(tp));
    }
  }

  DetectorParams params = DetectorParams::random_init(rng::derive_seed(seed, 7), cfg.init_scale);
  OptimState opt{cfg.lr, cfg.momentum, cfg.weight_decay, {}};

  PlanOptions opts;
  opts.proposal = cfg.proposal;
  opts.assign = cfg.assign;
  opts.add_gt_to_roi = true;
  opts.supervise_empty = true;  // true annotations: absence means background
  opts.neg_base = cfg.rpn_neg_base;
  opts.neg_pos_ratio = cfg.rpn_neg_pos_ratio;

  std::vector<std::size_t> order(patches.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng::Engine shuffler(rng::derive_seed(seed, 100 + epoch));
    shuffler.shuffle(order);

    double loss_sum = 0.0;
    std::size_t patch_count = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      LossPlan plan;
      plan.spec = LossSpec::Supervised;
      plan.workers = cfg.workers;
      plan.patches.resize(end - start);
      parallel_for_ordered(end - start, cfg.workers, [&](std::size_t i) {
        const TrainPatch& tp = patches[order[start + i]];
        PlanOptions po = opts;
        po.sample_seed = rng::derive_seed(
            seed, 0xD0000000ull + std::uint64_t(epoch) * 1000003ull + (start + i));
        plan.patches[i] = build_patch_plan(params, tp.voxels, tp.gt, po);
      });
      const LossGradient lg = loss_gradient(params, plan);
      sgd_step(params, lg.grad, opt);
      loss_sum += lg.value * static_cast<double>(end - start);
      patch_count += end - start;
    }
    if (report) report->epoch_losses.push_back(loss_sum / static_cast<double>(patch_count));
    if (checkpoint_dir) {
      char name[48];
      std::snprintf(name, sizeof(name), "checkpoint_epoch_%04d.ckpt", epoch);
      save_checkpoint(*checkpoint_dir / name, params);
    }
  }
  return params;
}

std::vector<geom::Detection> infer_scan(const DetectorParams& params, const VolumeU8& scan,
                                        const InferConfig& cfg) {
  const Dims3 d = scan.dims();
  const auto pad_up = [](int n) { return (n + kStride - 1) / kStride * kStride; };
  const Dims3 pd{pad_up(d.nz), pad_up(d.ny), pad_up(d.nx)};

  const VolumeU8* input = &scan;
  VolumeU8 padded;
  if (!(pd == d)) {
    padded = VolumeU8(pd, data::kPadValue);
    for (int z = 0; z < d.nz; ++z)
      for (int y = 0; y < d.ny; ++y)
        for (int x = 0; x < d.nx; ++x) padded.at(z, y, x) = scan.at(z, y, x);
    input = &padded;
  }

  const ForwardResult fwd = forward(params, *input);
  const std::vector<Proposal> proposals = propose(fwd.rpn, *input, cfg.top_n, cfg.nms_iou);

  std::vector<geom::Detection> dets;
  dets.reserve(proposals.size());
  for (const Proposal& prop : proposals) {
    const RoiOutput out = forward_roi(params, roi_features(fwd.feature_map, prop.box));
    dets.push_back({geom::decode_offsets(out.offsets, prop.box), out.prob});
  }

  std::vector<geom::Detection> kept = geom::nms(dets, cfg.nms_iou);
  std::vector<geom::Detection> final;
  for (const geom::Detection& det : kept) {
    if (det.score < cfg.min_score) continue;
    final.push_back(det);
    if (static_cast<int>(final.size()) >= cfg.max_detections) break;
  }
  return final;
}

}  // namespace supici::detector
