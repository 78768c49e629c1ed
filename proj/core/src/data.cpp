#include "supici/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "supici/rng.hpp"

namespace supici::data {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string format_double(double v) {
  std::array<char, 32> buf;
  const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), res.ptr);
}

double parse_double(const std::string& s, const std::string& context) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
    throw std::runtime_error("failed to parse number '" + s + "' in " + context);
  return v;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::stringstream ss(line);
  while (std::getline(ss, field, ',')) fields.push_back(field);
  return fields;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& path,
                                               const std::string& expected_header) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("empty CSV " + path.string());
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != expected_header)
    throw std::runtime_error("bad CSV header in " + path.string() + ": expected '" +
                             expected_header + "', got '" + line + "'");
  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    rows.push_back(split_csv_line(line));
  }
  return rows;
}

/// 3^3 box smoothing with edge-clipped windows.
VolumeF box_smooth3(const VolumeF& in) {
  const Dims3 d = in.dims();
  VolumeF out(d);
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x) {
        double sum = 0.0;
        int n = 0;
        for (int dz = -1; dz <= 1; ++dz)
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
              const int zz = z + dz, yy = y + dy, xx = x + dx;
              if (in.contains(zz, yy, xx)) {
                sum += in.at(zz, yy, xx);
                ++n;
              }
            }
        out.at(z, y, x) = sum / n;
      }
  return out;
}

double trilinear_sample(const VolumeF& v, double z, double y, double x) {
  const Dims3 d = v.dims();
  const auto clampi = [](int i, int n) { return std::clamp(i, 0, n - 1); };
  const int z0 = clampi(static_cast<int>(std::floor(z)), d.nz);
  const int y0 = clampi(static_cast<int>(std::floor(y)), d.ny);
  const int x0 = clampi(static_cast<int>(std::floor(x)), d.nx);
  const int z1 = clampi(z0 + 1, d.nz), y1 = clampi(y0 + 1, d.ny), x1 = clampi(x0 + 1, d.nx);
  const double fz = std::clamp(z - z0, 0.0, 1.0);
  const double fy = std::clamp(y - y0, 0.0, 1.0);
  const double fx = std::clamp(x - x0, 0.0, 1.0);

  const auto lerp = [](double a, double b, double t) { return a + (b - a) * t; };
  const double c00 = lerp(v.at(z0, y0, x0), v.at(z0, y0, x1), fx);
  const double c01 = lerp(v.at(z0, y1, x0), v.at(z0, y1, x1), fx);
  const double c10 = lerp(v.at(z1, y0, x0), v.at(z1, y0, x1), fx);
  const double c11 = lerp(v.at(z1, y1, x0), v.at(z1, y1, x1), fx);
  return lerp(lerp(c00, c01, fy), lerp(c10, c11, fy), fz);
}

}  // namespace

std::uint8_t pad_value() { return kPadValue; }

double round_half_away(double v) { return std::round(v); }

VolumeU8 hu_clip_rescale(const VolumeF& hu) {
  VolumeU8 out(hu.dims());
  for (std::size_t i = 0; i < hu.data().size(); ++i) {
    const double clipped = std::clamp(hu.data()[i], -1200.0, 600.0);
    const double scaled = (clipped + 1200.0) / 1800.0 * 255.0;
    out.data()[i] = static_cast<std::uint8_t>(std::clamp(round_half_away(scaled), 0.0, 255.0));
  }
  return out;
}

VolumeF resample_isotropic(const VolumeF& vol, std::array<double, 3> spacing) {
  for (const double s : spacing)
    if (!(s > 0.0) || !std::isfinite(s))
      throw std::invalid_argument("resample_isotropic: spacing must be positive");
  const Dims3 in = vol.dims();
  const Dims3 out_dims{
      std::max(1, static_cast<int>(round_half_away(in.nz * spacing[0]))),
      std::max(1, static_cast<int>(round_half_away(in.ny * spacing[1]))),
      std::max(1, static_cast<int>(round_half_away(in.nx * spacing[2])))};
  VolumeF out(out_dims);
  for (int z = 0; z < out_dims.nz; ++z)
    for (int y = 0; y < out_dims.ny; ++y)
      for (int x = 0; x < out_dims.nx; ++x) {
        // align voxel centers: output center (i + 0.5) mm maps into input index space
        const double zi = (z + 0.5) / spacing[0] - 0.5;
        const double yi = (y + 0.5) / spacing[1] - 0.5;
        const double xi = (x + 0.5) / spacing[2] - 0.5;
        out.at(z, y, x) = trilinear_sample(vol, zi, yi, xi);
      }
  return out;
}

VolumeU8 resample_isotropic_u8(const VolumeU8& vol, std::array<double, 3> spacing) {
  VolumeF tmp(vol.dims());
  for (std::size_t i = 0; i < vol.data().size(); ++i) tmp.data()[i] = vol.data()[i];
  const VolumeF res = resample_isotropic(tmp, spacing);
  VolumeU8 out(res.dims());
  for (std::size_t i = 0; i < res.data().size(); ++i)
    out.data()[i] = static_cast<std::uint8_t>(std::clamp(round_half_away(res.data()[i]), 0.0, 255.0));
  return out;
}

std::vector<Patch> crop_patches(const VolumeU8& scan, int patch_side, int overlap) {
  if (patch_side <= 0) throw std::invalid_argument("crop_patches: patch_side must be > 0");
  if (overlap < 0 || overlap >= patch_side)
    throw std::invalid_argument("crop_patches: overlap must be in [0, patch_side)");
  const int stride = patch_side - overlap;
  const Dims3 d = scan.dims();

  const auto starts = [&](int extent) {
    std::vector<int> s;
    for (int pos = 0;; pos += stride) {
      s.push_back(pos);
      if (pos + patch_side >= extent) break;
    }
    return s;
  };

  std::vector<Patch> patches;
  for (const int z0 : starts(d.nz))
    for (const int y0 : starts(d.ny))
      for (const int x0 : starts(d.nx)) {
        Patch p;
        p.offset = {z0, y0, x0};
        p.voxels = VolumeU8({patch_side, patch_side, patch_side}, kPadValue);
        for (int z = 0; z < patch_side; ++z)
          for (int y = 0; y < patch_side; ++y)
            for (int x = 0; x < patch_side; ++x)
              if (scan.contains(z0 + z, y0 + y, x0 + x))
                p.voxels.at(z, y, x) = scan.at(z0 + z, y0 + y, x0 + x);
        patches.push_back(std::move(p));
      }
  return patches;
}

void SynthDomainSpec::validate() const {
  if (volume_side < 8) throw std::invalid_argument("SynthDomainSpec: volume_side too small");
  if (!(radius_min > 0.0) || radius_max < radius_min || radius_max >= volume_side / 4.0)
    throw std::invalid_argument("SynthDomainSpec: radius range must lie in (0, side/4)");
  if (nodules_min < 0 || nodules_max < nodules_min)
    throw std::invalid_argument("SynthDomainSpec: bad nodule count range");
  if (base_intensity < 0.0 || base_intensity > 255.0)
    throw std::invalid_argument("SynthDomainSpec: base_intensity outside [0,255]");
  if (noise_sigma < 0.0 || blob_peak < 0.0 || contrast < 0.0 || edge_sharpness <= 0.0)
    throw std::invalid_argument("SynthDomainSpec: negative intensity parameter");
}

ScanRecord gen_synth_scan(const SynthDomainSpec& spec, int index, const std::string& id) {
  spec.validate();
  rng::Engine eng(rng::derive_seed(spec.seed, static_cast<std::uint64_t>(index)));
  const int n = spec.volume_side;

  VolumeF noise({n, n, n});
  for (auto& v : noise.data()) v = eng.normal() * spec.noise_sigma;
  noise = box_smooth3(noise);

  // place nodules with pairwise center distance > sum of radii
  struct Blob {
    geom::Vec3 c;
    double r;
  };
  std::vector<Blob> blobs;
  const int count = eng.uniform_int(spec.nodules_min, spec.nodules_max);
  for (int i = 0; i < count; ++i) {
    const double r = eng.uniform(spec.radius_min, spec.radius_max);
    const double margin = r + 2.0;
    bool placed = false;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      geom::Vec3 c{eng.uniform(margin, n - margin), eng.uniform(margin, n - margin),
                   eng.uniform(margin, n - margin)};
      placed = true;
      for (const Blob& b : blobs)
        if (geom::distance(c, b.c) <= r + b.r + 1.0) {
          placed = false;
          break;
        }
      if (placed) blobs.push_back({c, r});
    }
  }

  ScanRecord scan;
  scan.id = id;
  scan.spacing = {1.0, 1.0, 1.0};
  scan.voxels = VolumeU8({n, n, n});
  for (int z = 0; z < n; ++z)
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        double v = spec.base_intensity + noise.at(z, y, x);
        for (const Blob& b : blobs) {
          const double dist = geom::distance({double(z), double(y), double(x)}, b.c);
          if (dist < 2.5 * b.r) {
            // sigmoid falloff, half amplitude at the annotated radius
            const double t = spec.edge_sharpness * (1.0 - dist / b.r);
            v += spec.contrast * spec.blob_peak / (1.0 + std::exp(-t));
          }
        }
        scan.voxels.at(z, y, x) =
            static_cast<std::uint8_t>(std::clamp(round_half_away(v), 0.0, 255.0));
      }
  for (const Blob& b : blobs) scan.annotations.push_back({b.c, b.r});
  return scan;
}

// ---- on-disk formats ----

fs::path scan_dir(const fs::path& parent, const std::string& id) {
  return parent / ("scan_" + id);
}

void write_scan(const fs::path& parent, const ScanRecord& scan) {
  const fs::path dir = scan_dir(parent, scan.id);
  fs::create_directories(dir);

  json header;
  header["dims"] = {scan.voxels.dims().nz, scan.voxels.dims().ny, scan.voxels.dims().nx};
  header["dtype"] = "u8";
  header["format_version"] = 1;
  header["spacing"] = {scan.spacing[0], scan.spacing[1], scan.spacing[2]};
  std::ofstream hout(dir / "header.json", std::ios::binary);
  if (!hout) throw std::runtime_error("cannot write " + (dir / "header.json").string());
  hout << header.dump(2) << "\n";

  std::ofstream vout(dir / "voxels.raw", std::ios::binary);
  if (!vout) throw std::runtime_error("cannot write " + (dir / "voxels.raw").string());
  vout.write(reinterpret_cast<const char*>(scan.voxels.data().data()),
             static_cast<std::streamsize>(scan.voxels.data().size()));
}

ScanRecord read_scan(const fs::path& parent, const std::string& id) {
  const fs::path dir = scan_dir(parent, id);
  std::ifstream hin(dir / "header.json");
  if (!hin) throw std::runtime_error("cannot open " + (dir / "header.json").string());
  json header;
  try {
    hin >> header;
  } catch (const json::exception& e) {
    throw std::runtime_error("malformed header in " + dir.string() + ": " + e.what());
  }
  if (!header.contains("dims") || !header.contains("dtype") || !header.contains("spacing"))
    throw std::runtime_error("malformed header in " + dir.string() + ": missing fields");
  if (header["dtype"] != "u8")
    throw std::runtime_error("unsupported dtype in " + dir.string());

  ScanRecord scan;
  scan.id = id;
  const auto dims = header["dims"];
  if (!dims.is_array() || dims.size() != 3)
    throw std::runtime_error("malformed dims in " + dir.string());
  const Dims3 d{dims[0].get<int>(), dims[1].get<int>(), dims[2].get<int>()};
  scan.spacing = {header["spacing"][0].get<double>(), header["spacing"][1].get<double>(),
                  header["spacing"][2].get<double>()};

  std::ifstream vin(dir / "voxels.raw", std::ios::binary | std::ios::ate);
  if (!vin) throw std::runtime_error("cannot open " + (dir / "voxels.raw").string());
  const std::size_t bytes = static_cast<std::size_t>(vin.tellg());
  if (bytes != d.total())
    throw std::runtime_error("voxel data size mismatch in " + dir.string() + ": header implies " +
                             std::to_string(d.total()) + " bytes, file has " +
                             std::to_string(bytes));
  scan.voxels = VolumeU8(d);
  vin.seekg(0);
  vin.read(reinterpret_cast<char*>(scan.voxels.data().data()),
           static_cast<std::streamsize>(bytes));
  return scan;
}

void write_annotations_csv(const fs::path& path, const std::vector<ScanRecord>& scans) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "scan_id,z,y,x,r\n";
  for (const ScanRecord& s : scans)
    for (const geom::Annotation& a : s.annotations)
      out << s.id << ',' << format_double(a.center.z) << ',' << format_double(a.center.y) << ','
          << format_double(a.center.x) << ',' << format_double(a.radius) << "\n";
}

std::vector<std::pair<std::string, geom::Annotation>> read_annotations_csv(const fs::path& path) {
  std::vector<std::pair<std::string, geom::Annotation>> rows;
  for (const auto& fields : read_csv(path, "scan_id,z,y,x,r")) {
    if (fields.size() != 5)
      throw std::runtime_error("bad annotation row in " + path.string());
    geom::Annotation a{{parse_double(fields[1], path.string()),
                        parse_double(fields[2], path.string()),
                        parse_double(fields[3], path.string())},
                       parse_double(fields[4], path.string())};
    rows.emplace_back(fields[0], a);
  }
  return rows;
}

void write_predictions_csv(const fs::path& path,
                           const std::vector<std::pair<std::string, geom::Detection>>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "scan_id,z,y,x,dz,dy,dx,score\n";
  for (const auto& [id, det] : rows)
    out << id << ',' << format_double(det.box.center.z) << ',' << format_double(det.box.center.y)
        << ',' << format_double(det.box.center.x) << ',' << format_double(det.box.size.z) << ','
        << format_double(det.box.size.y) << ',' << format_double(det.box.size.x) << ','
        << format_double(det.score) << "\n";
}

std::vector<std::pair<std::string, geom::Detection>> read_predictions_csv(const fs::path& path) {
  std::vector<std::pair<std::string, geom::Detection>> rows;
  for (const auto& fields : read_csv(path, "scan_id,z,y,x,dz,dy,dx,score")) {
    if (fields.size() != 8)
      throw std::runtime_error("bad prediction row in " + path.string());
    const auto f = [&](int i) { return parse_double(fields[i], path.string()); };
    geom::Detection det{geom::Box3{{f(1), f(2), f(3)}, {f(4), f(5), f(6)}}, f(7)};
    rows.emplace_back(fields[0], det);
  }
  return rows;
}

std::vector<std::string> DatasetManifest::ids(const std::string& domain,
                                              const std::string& split) const {
  std::vector<std::string> out;
  for (const DatasetEntry& e : scans)
    if ((domain.empty() || e.domain == domain) && (split.empty() || e.split == split))
      out.push_back(e.id);
  return out;
}

std::vector<std::string> assign_splits(int count, std::uint64_t seed) {
  const int n_train = static_cast<int>(round_half_away(0.7 * count));
  const int n_val = static_cast<int>(round_half_away(0.1 * count));
  std::vector<std::string> splits(count, "test");
  std::vector<int> order(count);
  for (int i = 0; i < count; ++i) order[i] = i;
  rng::Engine eng(rng::derive_seed(seed, 0x5411));
  eng.shuffle(order);
  for (int i = 0; i < count; ++i) {
    if (i < n_train)
      splits[order[i]] = "train";
    else if (i < n_train + n_val)
      splits[order[i]] = "val";
  }
  return splits;
}

void write_manifest(const fs::path& path, const DatasetManifest& manifest) {
  json j;
  j["format_version"] = 1;
  j["scans"] = json::array();
  for (const DatasetEntry& e : manifest.scans)
    j["scans"].push_back({{"domain", e.domain}, {"id", e.id}, {"split", e.split}});
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

DatasetManifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw std::runtime_error("malformed manifest " + path.string() + ": " + e.what());
  }
  DatasetManifest m;
  for (const auto& e : j.at("scans"))
    m.scans.push_back({e.at("id").get<std::string>(), e.at("domain").get<std::string>(),
                       e.at("split").get<std::string>()});
  return m;
}

DatasetManifest generate_dataset(const fs::path& out, const DatasetSpec& spec) {
  fs::create_directories(out);
  DatasetManifest manifest;
  std::vector<ScanRecord> all;

  const auto gen_domain = [&](const std::string& domain, const SynthDomainSpec& dspec,
                              std::uint64_t stream) {
    SynthDomainSpec local = dspec;
    local.seed = rng::derive_seed(spec.seed, stream);
    const std::vector<std::string> splits = assign_splits(spec.scans_per_domain, local.seed);
    for (int i = 0; i < spec.scans_per_domain; ++i) {
      char id[32];
      std::snprintf(id, sizeof(id), "%.3s%04d", domain.c_str(), i);
      ScanRecord scan = gen_synth_scan(local, i, id);
      write_scan(out, scan);
      manifest.scans.push_back({scan.id, domain, splits[i]});
      all.push_back(std::move(scan));
    }
  };
  gen_domain("source", spec.source, 1);
  gen_domain("target", spec.target, 2);

  write_annotations_csv(out / "annotations.csv", all);
  write_manifest(out / "dataset.json", manifest);
  return manifest;
}

std::vector<ScanRecord> load_scans(const fs::path& dataset_dir, const DatasetManifest& manifest,
                                   const std::string& domain, const std::string& split,
                                   bool with_annotations) {
  std::vector<ScanRecord> scans;
  for (const std::string& id : manifest.ids(domain, split))
    scans.push_back(read_scan(dataset_dir, id));
  if (with_annotations) {
    const auto rows = read_annotations_csv(dataset_dir / "annotations.csv");
    for (ScanRecord& s : scans)
      for (const auto& [id, ann] : rows)
        if (id == s.id) s.annotations.push_back(ann);
  }
  return scans;
}

}  // namespace supici::data
