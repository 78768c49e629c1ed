#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "supici/geom.hpp"
#include "supici/volume.hpp"

namespace supici::data {

/// Fill value for voxels outside the scan (and outside lung regions on real
/// CT); every padding path uses it.
inline constexpr std::uint8_t kPadValue = 170;
std::uint8_t pad_value();

/// Rounding convention used everywhere: half away from zero.
double round_half_away(double v);

/// Clamp HU values to [-1200, 600] and map linearly onto [0, 255].
VolumeU8 hu_clip_rescale(const VolumeF& hu);

/// Trilinear resampling onto 1x1x1 mm spacing. spacing is (z, y, x) in mm.
VolumeF resample_isotropic(const VolumeF& vol, std::array<double, 3> spacing);
VolumeU8 resample_isotropic_u8(const VolumeU8& vol, std::array<double, 3> spacing);

struct ScanRecord {
  std::string id;
  VolumeU8 voxels;                              // values in [0, 255]
  std::array<double, 3> spacing{1.0, 1.0, 1.0};  // (z, y, x) mm
  std::vector<geom::Annotation> annotations;     // may be withheld for target training
};

struct Patch {
  VolumeU8 voxels;
  std::array<int, 3> offset;  // (z, y, x): patch coordinate + offset = scan coordinate
};

/// Tile the scan with patches of the given side; voxels outside the scan are
/// filled with kPadValue. Every scan voxel is covered by at least one patch.
std::vector<Patch> crop_patches(const VolumeU8& scan, int patch_side, int overlap);

/// Generator parameters for one synthetic domain.
struct SynthDomainSpec {
  int volume_side = 64;
  int nodules_min = 1;
  int nodules_max = 3;
  double radius_min = 3.0;
  double radius_max = 6.0;
  double base_intensity = 60.0;   // background level before noise
  double blob_peak = 120.0;       // nodule amplitude above background
  double noise_sigma = 6.0;       // Gaussian noise std before 3^3 smoothing
  double contrast = 1.0;          // scales blob amplitude
  double edge_sharpness = 6.0;    // blob falloff steepness
  std::uint64_t seed = 0;

  void validate() const;
};

/// Deterministic synthetic scan for (spec.seed, index). Nodules are spherical
/// blobs with smooth falloff; pairwise center distances exceed the sum of the
/// radii involved; annotations carry the exact centers and radii.
ScanRecord gen_synth_scan(const SynthDomainSpec& spec, int index, const std::string& id);

// ---- on-disk formats ----

/// scan_<id>/header.json + voxels.raw (z-major little-endian bytes).
/// Annotations live in the shared CSV, not in the scan directory.
std::filesystem::path scan_dir(const std::filesystem::path& parent, const std::string& id);
void write_scan(const std::filesystem::path& parent, const ScanRecord& scan);
ScanRecord read_scan(const std::filesystem::path& parent, const std::string& id);

/// `scan_id,z,y,x,r` with a required header row.
void write_annotations_csv(const std::filesystem::path& path,
                           const std::vector<ScanRecord>& scans);
std::vector<std::pair<std::string, geom::Annotation>> read_annotations_csv(
    const std::filesystem::path& path);

/// `scan_id,z,y,x,dz,dy,dx,score` with a required header row.
void write_predictions_csv(const std::filesystem::path& path,
                           const std::vector<std::pair<std::string, geom::Detection>>& rows);
std::vector<std::pair<std::string, geom::Detection>> read_predictions_csv(
    const std::filesystem::path& path);

struct DatasetEntry {
  std::string id;
  std::string domain;  // "source" | "target"
  std::string split;   // "train" | "val" | "test"
};

struct DatasetManifest {
  std::vector<DatasetEntry> scans;

  std::vector<std::string> ids(const std::string& domain, const std::string& split) const;
};

/// Deterministic 7:1:2 train/val/test assignment (counts rounded half away
/// from zero, test takes the remainder).
std::vector<std::string> assign_splits(int count, std::uint64_t seed);

void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);
DatasetManifest read_manifest(const std::filesystem::path& path);

/// Generate the two-domain corpus: scans on disk, shared annotations CSV,
/// and dataset.json manifest under `out`.
struct DatasetSpec {
  int scans_per_domain = 20;
  SynthDomainSpec source;
  SynthDomainSpec target;
  std::uint64_t seed = 0;
};
DatasetManifest generate_dataset(const std::filesystem::path& out, const DatasetSpec& spec);

/// Load scans listed in the manifest for one domain/split; annotations are
/// attached from the shared CSV only when with_annotations is true.
std::vector<ScanRecord> load_scans(const std::filesystem::path& dataset_dir,
                                   const DatasetManifest& manifest, const std::string& domain,
                                   const std::string& split, bool with_annotations);

}  // namespace supici::data
