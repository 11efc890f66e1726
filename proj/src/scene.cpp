#include "ofdiff/scene.hpp"

#include "ofdiff/random.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <set>
#include <sstream>

namespace ofdiff {

namespace {

constexpr std::uint64_t kLayoutStream = 0x4c41594f;  // "LAYO"
constexpr std::uint64_t kRenderStream = 0x52454e44;  // "REND"
constexpr int kMaxPlacementAttempts = 1000;

// Right half of the silhouette; the left half mirrors it.
const std::vector<Eigen::Vector2d>& outline_storage() {
  static const std::vector<Eigen::Vector2d> pts = [] {
    const std::vector<Eigen::Vector2d> right = {
        {0.0, -1.0},  {0.22, -0.75}, {0.22, -0.3}, {1.0, 0.1},  {1.0, 0.42},
        {0.22, 0.28}, {0.22, 0.62},  {0.6, 0.82},  {0.6, 1.0},  {0.0, 0.95},
    };
    std::vector<Eigen::Vector2d> all = right;
    for (auto it = right.rbegin() + 1; it != right.rend() - 1; ++it) all.emplace_back(-it->x(), it->y());
    return all;
  }();
  return pts;
}

// Crossing-number test in normalized box coordinates.
bool inside_outline(double u, double v) {
  const auto& pts = outline_storage();
  bool in = false;
  for (std::size_t i = 0, j = pts.size() - 1; i < pts.size(); j = i++) {
    const Eigen::Vector2d& a = pts[i];
    const Eigen::Vector2d& b = pts[j];
    if ((a.y() > v) != (b.y() > v)) {
      const double x = (b.x() - a.x()) * (v - a.y()) / (b.y() - a.y()) + a.x();
      if (u < x) in = !in;
    }
  }
  return in;
}

std::array<double, 3> base_color(Glyph glyph) {
  switch (glyph) {
    case Glyph::rectangle: return {0.95, 0.75, 0.30};
    case Glyph::circle: return {0.35, 0.90, 0.95};
    case Glyph::airplane: return {0.97, 0.97, 0.97};
  }
  return {1.0, 1.0, 1.0};
}

double quantize(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

}  // namespace

std::string to_string(Glyph glyph) {
  switch (glyph) {
    case Glyph::rectangle: return "rectangle";
    case Glyph::circle: return "circle";
    case Glyph::airplane: return "airplane";
  }
  return "?";
}

std::string to_string(Background background) {
  switch (background) {
    case Background::flat: return "flat";
    case Background::gradient: return "gradient";
    case Background::speckle: return "speckle";
  }
  return "?";
}

Glyph glyph_from_string(const std::string& name) {
  if (name == "rectangle") return Glyph::rectangle;
  if (name == "circle") return Glyph::circle;
  if (name == "airplane") return Glyph::airplane;
  throw std::invalid_argument("unknown glyph '" + name + "'");
}

Background background_from_string(const std::string& name) {
  if (name == "flat") return Background::flat;
  if (name == "gradient") return Background::gradient;
  if (name == "speckle") return Background::speckle;
  throw std::invalid_argument("unknown background '" + name + "'");
}

std::vector<Category> SceneSpec::default_categories() {
  return {{0, Glyph::rectangle, 6.0, 12.0}, {1, Glyph::circle, 6.0, 12.0}, {2, Glyph::airplane, 10.0, 16.0}};
}

void SceneSpec::validate() const {
  if (canvas_size < 16 || canvas_size % 4 != 0) {
    throw std::invalid_argument("canvas_size must be >= 16 and a multiple of 4, got " +
                                std::to_string(canvas_size));
  }
  if (num_objects.lo < 1 || num_objects.hi > 32 || num_objects.lo > num_objects.hi) {
    throw std::invalid_argument("num_objects_range must satisfy 1 <= lo <= hi <= 32, got [" +
                                std::to_string(num_objects.lo) + ", " + std::to_string(num_objects.hi) + "]");
  }
  if (categories.empty()) throw std::invalid_argument("categories must be non-empty");
  std::set<int> ids;
  for (const Category& c : categories) {
    if (!ids.insert(c.id).second) throw std::invalid_argument("duplicate category id " + std::to_string(c.id));
    if (!(c.min_size >= 4.0) || c.max_size < c.min_size || c.max_size > canvas_size) {
      throw std::invalid_argument("size_range of category " + std::to_string(c.id) + " must lie in [4, " +
                                  std::to_string(canvas_size) + "]");
    }
  }
}

const Category& SceneSpec::category(int id) const {
  for (const Category& c : categories) {
    if (c.id == id) return c;
  }
  throw std::invalid_argument("unknown category id " + std::to_string(id));
}

std::array<Eigen::Vector2d, 4> OrientedBox::corners() const {
  const double c = std::cos(angle), s = std::sin(angle);
  const Eigen::Vector2d u(c * width / 2, s * width / 2);
  const Eigen::Vector2d v(-s * height / 2, c * height / 2);
  const Eigen::Vector2d center(cx, cy);
  return {center - u - v, center + u - v, center + u + v, center - u + v};
}

Eigen::Vector2d OrientedBox::half_extents() const {
  const double c = std::abs(std::cos(angle)), s = std::abs(std::sin(angle));
  return {(c * width + s * height) / 2, (s * width + c * height) / 2};
}

bool OrientedBox::inside(int canvas) const {
  for (const auto& p : corners()) {
    if (p.x() < 0.0 || p.y() < 0.0 || p.x() > canvas || p.y() > canvas) return false;
  }
  return true;
}

std::string scene_id_for(std::uint64_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "scene_%06llu", static_cast<unsigned long long>(index));
  return buf;
}

std::span<const Eigen::Vector2d> airplane_outline() { return outline_storage(); }

bool glyph_covers(Glyph glyph, const OrientedBox& box, double x, double y) {
  const double c = std::cos(box.angle), s = std::sin(box.angle);
  const double dx = x - box.cx, dy = y - box.cy;
  const double u = c * dx + s * dy;
  const double v = -s * dx + c * dy;
  const double hw = box.width / 2, hh = box.height / 2;
  switch (glyph) {
    case Glyph::rectangle: return std::abs(u) <= hw && std::abs(v) <= hh;
    case Glyph::circle: {
      const double nu = u / hw, nv = v / hh;
      return nu * nu + nv * nv <= 1.0;
    }
    case Glyph::airplane: return inside_outline(u / hw, v / hh);
  }
  return false;
}

ShapeMask rasterize_glyph(Glyph glyph, const OrientedBox& box, int canvas) {
  ShapeMask m{Raster::Zero(canvas, canvas)};
  for (int y = 0; y < canvas; ++y) {
    for (int x = 0; x < canvas; ++x) {
      if (glyph_covers(glyph, box, x + 0.5, y + 0.5)) m.pixels(y, x) = 1;
    }
  }
  return m;
}

ShapeMask rasterize_box(const OrientedBox& box, int canvas) { return rasterize_glyph(Glyph::rectangle, box, canvas); }

Layout generate_layout(const SceneSpec& spec, std::uint64_t seed, std::uint64_t index) {
  spec.validate();
  Rng rng(seed, {kLayoutStream, index});
  Layout layout;
  layout.scene_id = scene_id_for(index);
  const int count = static_cast<int>(rng.uniform_int(spec.num_objects.lo, spec.num_objects.hi));
  const double canvas = spec.canvas_size;
  for (int k = 0; k < count; ++k) {
    bool placed = false;
    for (int attempt = 0; attempt < kMaxPlacementAttempts && !placed; ++attempt) {
      const Category& cat = spec.categories[rng.uniform_int(spec.categories.size())];
      OrientedBox box;
      box.width = rng.uniform(cat.min_size, cat.max_size);
      box.height = cat.glyph == Glyph::rectangle ? rng.uniform(cat.min_size, cat.max_size) : box.width;
      box.angle = rng.uniform(-std::numbers::pi / 2, std::numbers::pi / 2);
      const Eigen::Vector2d half = box.half_extents();
      // Keep corners strictly below the far edge.
      const double margin = 1e-6;
      if (2 * half.x() + margin >= canvas || 2 * half.y() + margin >= canvas) continue;
      box.cx = rng.uniform(half.x(), canvas - half.x() - margin);
      box.cy = rng.uniform(half.y(), canvas - half.y() - margin);
      bool clear = true;
      for (const OrientedBox& other : layout.boxes) {
        const double need = 0.5 * std::max(std::max(box.width, box.height), std::max(other.width, other.height));
        if (std::hypot(box.cx - other.cx, box.cy - other.cy) < need) {
          clear = false;
          break;
        }
      }
      if (!clear || !box.inside(spec.canvas_size)) continue;
      layout.boxes.push_back(box);
      layout.category_ids.push_back(cat.id);
      placed = true;
    }
    if (!placed) {
      std::ostringstream os;
      os << "layout saturation: could not place object " << k + 1 << " of " << count << " after "
         << kMaxPlacementAttempts << " attempts (canvas_size=" << spec.canvas_size << ", num_objects_range=["
         << spec.num_objects.lo << ", " << spec.num_objects.hi << "], categories=" << spec.categories.size() << ")";
      throw LayoutSaturation(os.str());
    }
  }
  return layout;
}

SceneSample render_scene(const Layout& layout, const SceneSpec& spec, std::uint64_t seed) {
  spec.validate();
  if (layout.boxes.size() != layout.category_ids.size()) {
    throw std::invalid_argument("layout " + layout.scene_id + ": boxes and category_ids differ in length");
  }
  const int n = spec.canvas_size;
  for (const OrientedBox& b : layout.boxes) {
    if (!b.inside(n) || !(b.width > 0) || !(b.height > 0)) {
      throw std::invalid_argument("layout " + layout.scene_id + " has a box outside the canvas");
    }
  }
  Rng rng(seed, {kRenderStream, stream_id(layout.scene_id)});

  SceneSample sample;
  sample.layout = layout;
  sample.image = Tensor<double>({3, n, n});
  std::array<double, 3> bg{};
  for (double& c : bg) c = 0.10 + 0.08 * rng.uniform();
  const double ramp_angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double ramp_gain = 0.12;
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      double shade = 0.0;
      if (spec.background == Background::gradient) {
        const double t = ((x + 0.5) * std::cos(ramp_angle) + (y + 0.5) * std::sin(ramp_angle)) / n;
        shade = ramp_gain * t;
      }
      for (int c = 0; c < 3; ++c) {
        double v = bg[static_cast<std::size_t>(c)] + shade;
        if (spec.background == Background::speckle) v += 0.03 * rng.normal();
        sample.image.at(c, y, x) = v;
      }
    }
  }

  sample.composite_mask.pixels = Raster::Zero(n, n);
  for (std::size_t i = 0; i < layout.boxes.size(); ++i) {
    const Category& cat = spec.category(layout.category_ids[i]);
    ShapeMask mask = rasterize_glyph(cat.glyph, layout.boxes[i], n);
    std::array<double, 3> color = base_color(cat.glyph);
    for (double& c : color) c += 0.04 * (2.0 * rng.uniform() - 1.0);
    for (int y = 0; y < n; ++y) {
      for (int x = 0; x < n; ++x) {
        if (!mask.pixels(y, x)) continue;
        for (int c = 0; c < 3; ++c) sample.image.at(c, y, x) = color[static_cast<std::size_t>(c)] + 0.02 * rng.normal();
      }
    }
    sample.composite_mask.pixels = sample.composite_mask.pixels.max(mask.pixels);
    sample.instance_masks.push_back(std::move(mask));
  }
  for (double& v : sample.image.values()) v = quantize(v);
  return sample;
}

}  // namespace ofdiff
