#include "ofdiff/esgm.hpp"

#include "ofdiff/random.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <sstream>

namespace ofdiff {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kConditionStream = 0x4553474d;  // "ESGM"

struct Rotation {
  double c;
  double s;
};

// cos/sin with exact values at multiples of pi/2, so quarter turns map the
// pixel lattice onto itself.
Rotation rotation(double angle) {
  const double quarter = std::numbers::pi / 2;
  const double k = std::round(angle / quarter);
  if (std::abs(angle - k * quarter) < 1e-12) {
    const long long m = ((static_cast<long long>(k) % 4) + 4) % 4;
    static constexpr Rotation table[4] = {{1, 0}, {0, 1}, {-1, 0}, {0, -1}};
    return table[m];
  }
  return {std::cos(angle), std::sin(angle)};
}

Eigen::Vector2d rotate(const Rotation& r, const Eigen::Vector2d& v) {
  return {r.c * v.x() - r.s * v.y(), r.s * v.x() + r.c * v.y()};
}

Eigen::Vector2d rotate_inverse(const Rotation& r, const Eigen::Vector2d& v) {
  return {r.c * v.x() + r.s * v.y(), -r.s * v.x() + r.c * v.y()};
}

std::string patch_file(int category, std::size_t k) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "patches/cat%d_%04zu.pgm", category, k);
  return buf;
}

}  // namespace

std::size_t MaskPool::size() const {
  std::size_t n = 0;
  for (const auto& [id, list] : entries) n += list.size();
  return n;
}

std::string to_string(RotationPolicy policy) {
  return policy == RotationPolicy::uniform ? "uniform" : "box_aligned";
}

RotationPolicy rotation_policy_from_string(const std::string& name) {
  if (name == "uniform") return RotationPolicy::uniform;
  if (name == "box_aligned") return RotationPolicy::box_aligned;
  throw std::invalid_argument("unknown rotation policy '" + name + "'");
}

InstancePatchMask extract_instance_mask(const SceneSample& sample, std::size_t index) {
  if (index >= sample.layout.size() || index >= sample.instance_masks.size()) {
    throw ContractError("instance index " + std::to_string(index) + " out of range for " + sample.layout.scene_id +
                        " with " + std::to_string(sample.layout.size()) + " boxes");
  }
  const OrientedBox& box = sample.layout.boxes[index];
  const Raster& full = sample.instance_masks[index].pixels;
  const Eigen::Vector2d half = box.half_extents();
  const int x0 = std::max(0, static_cast<int>(std::floor(box.cx - half.x())));
  const int y0 = std::max(0, static_cast<int>(std::floor(box.cy - half.y())));
  const int x1 = std::min(static_cast<int>(full.cols()), static_cast<int>(std::ceil(box.cx + half.x())));
  const int y1 = std::min(static_cast<int>(full.rows()), static_cast<int>(std::ceil(box.cy + half.y())));

  InstancePatchMask patch;
  patch.source_box = box;
  patch.category_id = sample.layout.category_ids[index];
  patch.origin_x = x0;
  patch.origin_y = y0;
  if (x1 > x0 && y1 > y0) patch.pixels = full.block(y0, x0, y1 - y0, x1 - x0);
  if (patch.pixels.size() == 0 || patch.count() == 0) {
    throw DegenerateInstance("degenerate instance: scene " + sample.layout.scene_id + " index " +
                             std::to_string(index) + " has an empty mask");
  }
  return patch;
}

ShapeMask augment_shape(const InstancePatchMask& patch, double angle, const OrientedBox& target_box, int canvas_size) {
  if (!target_box.inside(canvas_size)) throw ContractError("target box lies outside the canvas");
  if (patch.count() == 0) throw ContractError("empty patch");

  // Centroid of the set pixel centers, snapped to the pixel center holding it.
  Eigen::Vector2d mean = Eigen::Vector2d::Zero();
  for (Index y = 0; y < patch.pixels.rows(); ++y) {
    for (Index x = 0; x < patch.pixels.cols(); ++x) {
      if (patch.pixels(y, x)) mean += Eigen::Vector2d(patch.origin_x + x + 0.5, patch.origin_y + y + 0.5);
    }
  }
  mean /= static_cast<double>(patch.count());
  const Eigen::Vector2d centroid(std::floor(mean.x()) + 0.5, std::floor(mean.y()) + 0.5);

  const OrientedBox& src = patch.source_box;
  const Rotation rot = rotation(angle);
  const Rotation rel = rotation(src.angle + angle - target_box.angle);
  const double ew = std::abs(rel.c) * src.width + std::abs(rel.s) * src.height;
  const double eh = std::abs(rel.s) * src.width + std::abs(rel.c) * src.height;
  double s = std::min(target_box.width / ew, target_box.height / eh);
  if (std::abs(s - 1.0) < 1e-9) s = 1.0;

  // Forward map p -> T + s R (p - centroid) sends the rotated source box
  // center onto the target center.
  const Eigen::Vector2d target_center(target_box.cx, target_box.cy);
  const Eigen::Vector2d arm = rotate(rot, Eigen::Vector2d(src.cx, src.cy) - centroid);
  Eigen::Vector2d offset = target_center - s * arm;
  if (s == 1.0) offset = (offset.array().floor() + 0.5).matrix();

  const Rotation box_rot = rotation(target_box.angle);
  const double hw = target_box.width / 2 + 1.0, hh = target_box.height / 2 + 1.0;
  const Eigen::Vector2d half = target_box.half_extents();
  const int x_lo = std::max(0, static_cast<int>(std::floor(target_box.cx - half.x() - 2)));
  const int y_lo = std::max(0, static_cast<int>(std::floor(target_box.cy - half.y() - 2)));
  const int x_hi = std::min(canvas_size, static_cast<int>(std::ceil(target_box.cx + half.x() + 2)));
  const int y_hi = std::min(canvas_size, static_cast<int>(std::ceil(target_box.cy + half.y() + 2)));

  ShapeMask out{Raster::Zero(canvas_size, canvas_size)};
  for (int y = y_lo; y < y_hi; ++y) {
    for (int x = x_lo; x < x_hi; ++x) {
      const Eigen::Vector2d q(x + 0.5, y + 0.5);
      const Eigen::Vector2d local = rotate_inverse(box_rot, q - target_center);
      if (std::abs(local.x()) > hw + 1e-9 || std::abs(local.y()) > hh + 1e-9) continue;
      const Eigen::Vector2d p = centroid + rotate_inverse(rot, q - offset) / s;
      const long long j = static_cast<long long>(std::floor(p.x() - patch.origin_x));
      const long long i = static_cast<long long>(std::floor(p.y() - patch.origin_y));
      if (i < 0 || j < 0 || i >= patch.pixels.rows() || j >= patch.pixels.cols()) continue;
      if (patch.pixels(i, j)) out.pixels(y, x) = 1;
    }
  }
  if (out.count() == 0) throw std::logic_error("augment_shape produced an empty mask");
  return out;
}

MaskPool build_mask_pool(const DatasetManifest& dataset) {
  const std::vector<SceneSample> samples = read_dataset(dataset);
  MaskPool pool;
  pool.provenance = dataset.digest;
  for (const Category& c : dataset.spec.categories) pool.entries[c.id];
  for (const SceneSample& s : samples) {
    for (std::size_t k = 0; k < s.layout.size(); ++k) {
      InstancePatchMask patch = extract_instance_mask(s, k);
      pool.entries[patch.category_id].push_back(std::move(patch));
    }
  }
  std::vector<int> empty;
  for (const auto& [id, list] : pool.entries) {
    if (list.empty()) empty.push_back(id);
  }
  if (!empty.empty()) {
    std::ostringstream os;
    os << "empty category: no instances for category id";
    for (int id : empty) os << " " << id;
    throw std::runtime_error(os.str());
  }
  return pool;
}

ShapeMask sample_shape_condition(const Layout& layout, const MaskPool& pool, std::uint64_t seed, int canvas_size,
                                 RotationPolicy policy) {
  Rng rng(seed, {kConditionStream, stream_id(layout.scene_id)});
  ShapeMask out{Raster::Zero(canvas_size, canvas_size)};
  for (std::size_t k = 0; k < layout.size(); ++k) {
    auto it = pool.entries.find(layout.category_ids[k]);
    if (it == pool.entries.end() || it->second.empty()) throw PoolMiss(layout.category_ids[k]);
    const InstancePatchMask& patch = it->second[rng.uniform_int(it->second.size())];
    const double drawn = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double angle = policy == RotationPolicy::uniform ? drawn : layout.boxes[k].angle - patch.source_box.angle;
    out.pixels = out.pixels.max(augment_shape(patch, angle, layout.boxes[k], canvas_size).pixels);
  }
  return out;
}

ShapeMask training_shape_condition(const SceneSample& sample) {
  const int n = static_cast<int>(sample.composite_mask.pixels.rows());
  ShapeMask out{Raster::Zero(n, n)};
  for (std::size_t k = 0; k < sample.layout.size(); ++k) {
    const InstancePatchMask patch = extract_instance_mask(sample, k);
    out.pixels = out.pixels.max(augment_shape(patch, 0.0, patch.source_box, n).pixels);
  }
  return out;
}

ShapeMask layout_box_condition(const Layout& layout, int canvas_size) {
  ShapeMask out{Raster::Zero(canvas_size, canvas_size)};
  for (const OrientedBox& b : layout.boxes) out.pixels = out.pixels.max(rasterize_box(b, canvas_size).pixels);
  return out;
}

void save_mask_pool(const MaskPool& pool, const fs::path& directory) {
  std::error_code ec;
  fs::create_directories(directory / "patches", ec);
  if (ec) throw DataError("cannot create " + (directory / "patches").string() + ": " + ec.message());
  json cats = json::object();
  for (const auto& [id, list] : pool.entries) {
    json rows = json::array();
    for (std::size_t k = 0; k < list.size(); ++k) {
      const InstancePatchMask& p = list[k];
      const std::string file = patch_file(id, k);
      write_pgm(directory / file, p.pixels);
      const OrientedBox& b = p.source_box;
      rows.push_back({{"file", file},
                      {"sha256", sha256_file(directory / file)},
                      {"source_box", {b.cx, b.cy, b.width, b.height, b.angle}},
                      {"origin", {p.origin_x, p.origin_y}}});
    }
    cats[std::to_string(id)] = rows;
  }
  json index = {{"provenance", pool.provenance}, {"categories", cats}};
  write_text(directory / "index.json", index.dump(2) + "\n");
}

MaskPool load_mask_pool(const fs::path& directory) {
  const fs::path index_path = directory / "index.json";
  MaskPool pool;
  try {
    const json index = json::parse(read_text(index_path));
    pool.provenance = index.at("provenance").get<std::string>();
    for (const auto& [key, rows] : index.at("categories").items()) {
      const int id = std::stoi(key);
      auto& list = pool.entries[id];
      for (const json& row : rows) {
        const std::string file = row.at("file").get<std::string>();
        if (sha256_file(directory / file) != row.at("sha256").get<std::string>()) {
          throw DataError("mask pool " + directory.string() + ": digest mismatch for " + file);
        }
        InstancePatchMask p;
        p.pixels = read_pgm(directory / file);
        const json& b = row.at("source_box");
        p.source_box = {b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>(),
                        b[4].get<double>()};
        p.category_id = id;
        p.origin_x = row.at("origin")[0].get<int>();
        p.origin_y = row.at("origin")[1].get<int>();
        list.push_back(std::move(p));
      }
    }
  } catch (const json::exception& e) {
    throw DataError(index_path.string() + ": " + e.what());
  }
  return pool;
}

}  // namespace ofdiff
