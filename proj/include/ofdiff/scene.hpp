#pragma once

#include "ofdiff/tensor.hpp"

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ofdiff {

/// Binary or 8-bit raster, row-major (y, x).
using Raster = Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Canvas-sized binary mask with values in {0, 1}.
struct ShapeMask {
  Raster pixels;

  Index count() const { return pixels.template cast<Index>().sum(); }
  bool operator==(const ShapeMask& other) const {
    return pixels.rows() == other.pixels.rows() && pixels.cols() == other.pixels.cols() &&
           (pixels == other.pixels).all();
  }
};

enum class Glyph { rectangle, circle, airplane };
enum class Background { flat, gradient, speckle };

std::string to_string(Glyph glyph);
std::string to_string(Background background);
Glyph glyph_from_string(const std::string& name);
Background background_from_string(const std::string& name);

struct Category {
  int id = 0;
  Glyph glyph = Glyph::rectangle;
  double min_size = 6.0;
  double max_size = 12.0;
};

struct IntRange {
  int lo = 1;
  int hi = 3;
};

/// Parameters of the procedural scene family.
struct SceneSpec {
  int canvas_size = 32;
  IntRange num_objects{1, 3};
  std::vector<Category> categories = default_categories();
  Background background = Background::gradient;

  /// Rectangles, disks and airplane silhouettes, ids 0..2.
  static std::vector<Category> default_categories();

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
  const Category& category(int id) const;
};

struct OrientedBox {
  double cx = 0.0;
  double cy = 0.0;
  double width = 1.0;
  double height = 1.0;
  /// Radians in [-pi/2, pi/2).
  double angle = 0.0;

  std::array<Eigen::Vector2d, 4> corners() const;
  /// Half extents of the axis-aligned hull.
  Eigen::Vector2d half_extents() const;
  /// Every corner inside [0, canvas]^2.
  bool inside(int canvas) const;
  bool operator==(const OrientedBox&) const = default;
};

struct Layout {
  std::string scene_id;
  std::vector<OrientedBox> boxes;
  std::vector<int> category_ids;

  std::size_t size() const { return boxes.size(); }
  bool operator==(const Layout&) const = default;
};

struct SceneSample {
  /// (3, S, S), values k/255.
  Tensor<double> image;
  Layout layout;
  std::vector<ShapeMask> instance_masks;
  ShapeMask composite_mask;
};

class LayoutSaturation : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string scene_id_for(std::uint64_t index);

/// Rejection-samples a layout; the stream is keyed by (seed, index) and the
/// scene id is derived from index.
Layout generate_layout(const SceneSpec& spec, std::uint64_t seed, std::uint64_t index = 0);

/// Rasterizes the layout: glyph pixels are those whose centers the glyph covers.
SceneSample render_scene(const Layout& layout, const SceneSpec& spec, std::uint64_t seed);

/// Airplane outline in box-normalized coordinates ([-1, 1]^2, nose at v = -1).
std::span<const Eigen::Vector2d> airplane_outline();

/// Whether the glyph drawn in `box` covers the point (x, y) in canvas coordinates.
bool glyph_covers(Glyph glyph, const OrientedBox& box, double x, double y);

/// Mask of one glyph on a canvas.
ShapeMask rasterize_glyph(Glyph glyph, const OrientedBox& box, int canvas);

/// Filled oriented box on a canvas.
ShapeMask rasterize_box(const OrientedBox& box, int canvas);

}  // namespace ofdiff
