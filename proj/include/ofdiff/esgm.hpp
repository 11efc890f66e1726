#pragma once

#include "ofdiff/dataset.hpp"
#include "ofdiff/scene.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace ofdiff {

/// Instance mask cropped to the integer hull of its box.
struct InstancePatchMask {
  Raster pixels;
  OrientedBox source_box;
  int category_id = 0;
  /// Canvas position of pixels(0, 0).
  int origin_x = 0;
  int origin_y = 0;

  Index count() const { return pixels.template cast<Index>().sum(); }
};

class DegenerateInstance : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class PoolMiss : public std::runtime_error {
 public:
  PoolMiss(int category_id)
      : std::runtime_error("pool miss: no entries for category id " + std::to_string(category_id)),
        category_id(category_id) {}
  int category_id;
};

struct MaskPool {
  std::map<int, std::vector<InstancePatchMask>> entries;
  /// Digest of the dataset the patches came from.
  std::string provenance;

  std::size_t size() const;
};

/// How the sampling path picks a rotation for each pasted patch.
enum class RotationPolicy {
  /// Uniform in [0, 2 pi).
  uniform,
  /// Rotate so the patch's source box orientation matches the target box.
  box_aligned,
};

std::string to_string(RotationPolicy policy);
RotationPolicy rotation_policy_from_string(const std::string& name);

/// Crops instance `index` of `sample` to floor/ceil of its box's axis-aligned
/// bounds (clamped to the canvas).
InstancePatchMask extract_instance_mask(const SceneSample& sample, std::size_t index);

/// Rotates the patch by `angle` about its centroid (nearest neighbour),
/// rescales it isotropically so its rotated source box fits `target_box`,
/// and pastes it at the target center on a zeroed canvas. Output pixels are
/// kept within the target box dilated by 1 px.
///
/// With scale 1 the paste offset is snapped to the pixel lattice, so
/// rotations by multiples of pi/2 permute pixels exactly.
ShapeMask augment_shape(const InstancePatchMask& patch, double angle, const OrientedBox& target_box, int canvas_size);

/// Harvests every instance of a verified dataset. Throws DataError on a
/// digest mismatch and std::runtime_error("empty category ...") when a
/// category of the dataset spec has no instance.
MaskPool build_mask_pool(const DatasetManifest& dataset);

/// One pool entry per box, rotated per `policy`, ORed onto one canvas.
ShapeMask sample_shape_condition(const Layout& layout, const MaskPool& pool, std::uint64_t seed, int canvas_size,
                                 RotationPolicy policy = RotationPolicy::uniform);

/// Training-phase condition: every instance re-pasted with identity transform.
ShapeMask training_shape_condition(const SceneSample& sample);

/// Filled oriented boxes; the layout-only ablation condition.
ShapeMask layout_box_condition(const Layout& layout, int canvas_size);

/// patches/cat<id>_<k>.pgm plus index.json.
void save_mask_pool(const MaskPool& pool, const std::filesystem::path& directory);
/// Verifies each patch digest recorded in the index.
MaskPool load_mask_pool(const std::filesystem::path& directory);

}  // namespace ofdiff
