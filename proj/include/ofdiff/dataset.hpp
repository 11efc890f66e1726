#pragma once

#include "ofdiff/scene.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ofdiff {

/// I/O failures and integrity violations of persisted artifacts.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// --- binary PNM -------------------------------------------------------------

/// P6, maxval 255. `image` is (3, H, W) in [0, 1]; values are rounded to k/255.
std::vector<std::uint8_t> encode_ppm(const Tensor<double>& image);
/// P5 with values {0, 255}.
std::vector<std::uint8_t> encode_pgm(const Raster& mask);

void write_ppm(const std::filesystem::path& path, const Tensor<double>& image);
void write_pgm(const std::filesystem::path& path, const Raster& mask);
/// (3, H, W) with values k/255.
Tensor<double> read_ppm(const std::filesystem::path& path);
/// Mask read back as {0, 1} (nonzero bytes map to 1).
Raster read_pgm(const std::filesystem::path& path);
/// P5 or P6 as a (C, H, W) image in [0, 1].
Tensor<double> read_pnm_image(const std::filesystem::path& path);

// --- digests ----------------------------------------------------------------

std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(const std::string& text);
std::string sha256_file(const std::filesystem::path& path);
/// SHA-256 over the concatenated hex digests of `relative_paths` (sorted) under `root`.
std::string tree_digest(const std::filesystem::path& root, std::vector<std::string> relative_paths);

void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text(const std::filesystem::path& path, const std::string& text);
std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);
std::string read_text(const std::filesystem::path& path);

// --- layouts ----------------------------------------------------------------

/// One JSON object per line: scene_id, boxes [[cx, cy, w, h, angle]], category_ids.
std::string layout_record(const Layout& layout);
Layout parse_layout_record(const std::string& line);
void write_layouts(const std::filesystem::path& path, std::span<const Layout> layouts);
std::vector<Layout> read_layouts(const std::filesystem::path& path);

// --- datasets ---------------------------------------------------------------

struct DatasetManifest {
  std::filesystem::path directory;
  std::size_t count = 0;
  std::uint64_t seed = 0;
  std::string digest;
  SceneSpec spec;
  std::vector<std::string> scene_ids;
  /// Files covered by the digest, relative to directory.
  std::vector<std::string> files;
};

/// Persists samples under `directory` (which must be absent or empty):
/// images/<id>.ppm, masks/<id>_composite.pgm, masks/<id>_inst<k>.pgm,
/// layouts.jsonl and manifest.json.
DatasetManifest write_dataset(std::span<const SceneSample> samples, const SceneSpec& spec, std::uint64_t seed,
                              const std::filesystem::path& directory);

DatasetManifest load_manifest(const std::filesystem::path& directory);

/// Recomputes the digest; throws DataError("corrupt dataset ...") on mismatch.
void verify_dataset(const DatasetManifest& manifest);

/// Verifies and loads every sample.
std::vector<SceneSample> read_dataset(const DatasetManifest& manifest);

std::string spec_to_json(const SceneSpec& spec);
SceneSpec spec_from_json(const std::string& text);

}  // namespace ofdiff
