#pragma once

#include "ofdiff/scene.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ofdiff {

struct HorizontalBox {
  double x_min = 0.0;
  double y_min = 0.0;
  double x_max = 0.0;
  double y_max = 0.0;
};

/// Axis-aligned hull of the four rotated corners.
HorizontalBox rbox_to_hbox(const OrientedBox& box);

/// Integer crop window [x0, x1) x [y0, y1) after padding each side by
/// `padding_frac` of its extent, rounding outward and clamping to the image.
struct CropWindow {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
};
CropWindow padded_window(const HorizontalBox& box, double padding_frac, int width, int height);

/// Crop of a (C, H, W) image resized to (C, out, out) with bilinear
/// interpolation (pixel-center aligned). Throws std::invalid_argument("box
/// outside image") when the padded box misses the image.
Tensor<double> crop_and_resize(const Tensor<double>& image, const HorizontalBox& box, double padding_frac = 0.2,
                               int out_size = 64);

/// Binary edge raster, values {0, 1}.
using EdgeMap = Raster;

struct CannyOptions {
  double low = 100.0;
  double high = 200.0;
};

/// Luminance (0.299, 0.587, 0.114) on the 8-bit scale, 5x5 Gaussian blur
/// (sigma 1.4), Sobel gradients, 4-direction non-maximum suppression and
/// hysteresis with 8-connectivity. Single-channel patches are used as is.
EdgeMap canny_edges(const Tensor<double>& patch, const CannyOptions& options = {});

struct Overlap {
  double iou = 0.0;
  double dice = 0.0;
};

/// Both are 1 when both maps are empty.
Overlap edge_overlap(const EdgeMap& a, const EdgeMap& b);

/// Symmetric mean of nearest-point distances.
double chamfer(const EdgeMap& a, const EdgeMap& b);
/// Symmetric max of nearest-point distances.
double hausdorff(const EdgeMap& a, const EdgeMap& b);

/// Euclidean distance of every pixel to the nearest set pixel of `mask`
/// (exact, separable squared-distance transform). Infinite when empty.
Eigen::ArrayXXd distance_transform(const EdgeMap& mask);

/// Single-scale SSIM of two equally sized images in [0, 1]: 11x11 Gaussian
/// window (sigma 1.5), C1 = 0.01^2, C2 = 0.03^2, mean over valid positions.
double ssim(const Eigen::ArrayXXd& a, const Eigen::ArrayXXd& b);
double ssim(const EdgeMap& a, const EdgeMap& b);

struct MmdResult {
  double mmd2 = 0.0;
  double bandwidth = 0.0;
};

/// Unbiased squared MMD with kernel exp(-|x - y|^2 / (2 h^2)); h defaults to
/// the median pairwise distance of the pooled sets.
MmdResult mmd_rbf(const std::vector<Eigen::VectorXd>& a, const std::vector<Eigen::VectorXd>& b,
                  std::optional<double> bandwidth = std::nullopt);

struct PermutationTest {
  double mmd2 = 0.0;
  double bandwidth = 0.0;
  /// Standard deviation of the statistic under random relabelings.
  double standard_error = 0.0;
  double p_value = 1.0;
};

PermutationTest mmd_permutation_test(const std::vector<Eigen::VectorXd>& a, const std::vector<Eigen::VectorXd>& b,
                                     int permutations, std::uint64_t seed,
                                     std::optional<double> bandwidth = std::nullopt);

struct InstanceMetrics {
  std::string scene_id;
  std::size_t index = 0;
  int category_id = 0;
  double iou = 0.0;
  double dice = 0.0;
  double ssim = 0.0;
  /// Absent when either edge map is empty.
  std::optional<double> cd;
  std::optional<double> hd;
};

struct MetricSummary {
  std::size_t count = 0;
  double iou = 0.0;
  double dice = 0.0;
  double ssim = 0.0;
  /// Over instances with both edge maps nonempty.
  std::size_t distance_count = 0;
  std::optional<double> cd;
  std::optional<double> hd;
};

MetricSummary summarize(std::span<const InstanceMetrics> rows);

struct ShapeFidelityReport {
  std::vector<InstanceMetrics> rows;
  std::optional<MetricSummary> overall;
  std::map<int, MetricSummary> per_category;
  /// Scene ids missing on either side.
  std::vector<std::string> skipped;
  std::size_t empty_edge_count = 0;

  std::size_t instance_count() const { return rows.size(); }
  std::string to_json() const;
  /// Aligned columns in the order IoU, DICE, CD, HD, SSIM.
  std::string to_table() const;
};

enum class ImageSource {
  /// <dir>/<id>.ppm, else <dir>/images/<id>.ppm
  image,
  /// <dir>/masks/<id>_composite.pgm
  mask,
};

struct EvalOptions {
  double padding_frac = 0.2;
  int out_size = 64;
  CannyOptions canny;
  ImageSource generated = ImageSource::image;
  ImageSource reference = ImageSource::image;
};

std::optional<std::filesystem::path> find_scene_image(const std::filesystem::path& dir, const std::string& scene_id,
                                                      ImageSource source);

/// Per-instance comparison of one pair of images.
InstanceMetrics compare_instance(const Tensor<double>& generated, const Tensor<double>& reference,
                                 const OrientedBox& box, const EvalOptions& options);

/// Pairs are taken in layout order (instances in box order) and aggregated
/// overall and per category.
ShapeFidelityReport evaluate_pairs(const std::filesystem::path& generated_dir, const std::filesystem::path& reference_dir,
                                   std::span<const Layout> layouts, const EvalOptions& options = {});

}  // namespace ofdiff
