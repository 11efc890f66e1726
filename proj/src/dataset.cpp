#include "ofdiff/dataset.hpp"

#include "json.hpp"
#include <openssl/evp.h>

#include <algorithm>
#include <cstdio>
#include <memory>
#include <sstream>

namespace ofdiff {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr int kManifestVersion = 1;

std::string instance_file(const std::string& id, std::size_t k) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "_inst%02zu.pgm", k);
  return "masks/" + id + buf;
}

std::string composite_file(const std::string& id) { return "masks/" + id + "_composite.pgm"; }
std::string image_file(const std::string& id) { return "images/" + id + ".ppm"; }

json spec_json(const SceneSpec& spec) {
  json cats = json::array();
  for (const Category& c : spec.categories) {
    cats.push_back({{"id", c.id}, {"glyph", to_string(c.glyph)}, {"size_range", {c.min_size, c.max_size}}});
  }
  return {{"canvas_size", spec.canvas_size},
          {"num_objects_range", {spec.num_objects.lo, spec.num_objects.hi}},
          {"background", to_string(spec.background)},
          {"categories", cats}};
}

SceneSpec spec_from(const json& j) {
  SceneSpec spec;
  spec.canvas_size = j.at("canvas_size").get<int>();
  spec.num_objects = {j.at("num_objects_range").at(0).get<int>(), j.at("num_objects_range").at(1).get<int>()};
  spec.background = background_from_string(j.at("background").get<std::string>());
  spec.categories.clear();
  for (const json& c : j.at("categories")) {
    spec.categories.push_back({c.at("id").get<int>(), glyph_from_string(c.at("glyph").get<std::string>()),
                               c.at("size_range").at(0).get<double>(), c.at("size_range").at(1).get<double>()});
  }
  spec.validate();
  return spec;
}

}  // namespace

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) != 1 ||
      EVP_DigestFinal_ex(ctx.get(), md, &len) != 1) {
    throw std::runtime_error("SHA-256 computation failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[md[i] >> 4]);
    out.push_back(hex[md[i] & 15]);
  }
  return out;
}

std::string sha256_hex(const std::string& text) {
  return sha256_hex(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string sha256_file(const fs::path& path) { return sha256_hex(read_bytes(path)); }

std::string tree_digest(const fs::path& root, std::vector<std::string> relative_paths) {
  std::sort(relative_paths.begin(), relative_paths.end());
  std::string concat;
  for (const std::string& rel : relative_paths) concat += sha256_file(root / rel);
  return sha256_hex(concat);
}

std::string layout_record(const Layout& layout) {
  json boxes = json::array();
  for (const OrientedBox& b : layout.boxes) boxes.push_back({b.cx, b.cy, b.width, b.height, b.angle});
  json j = {{"scene_id", layout.scene_id}, {"boxes", boxes}, {"category_ids", layout.category_ids}};
  return j.dump();
}

Layout parse_layout_record(const std::string& line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed layout record: ") + e.what());
  }
  Layout layout;
  try {
    layout.scene_id = j.at("scene_id").get<std::string>();
    for (const json& b : j.at("boxes")) {
      if (b.size() != 5) throw DataError("layout " + layout.scene_id + ": box needs 5 numbers");
      layout.boxes.push_back({b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>(),
                              b[4].get<double>()});
    }
    layout.category_ids = j.at("category_ids").get<std::vector<int>>();
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed layout record: ") + e.what());
  }
  if (layout.boxes.size() != layout.category_ids.size()) {
    throw DataError("layout " + layout.scene_id + ": boxes and category_ids differ in length");
  }
  return layout;
}

void write_layouts(const fs::path& path, std::span<const Layout> layouts) {
  std::string text;
  for (const Layout& l : layouts) text += layout_record(l) + "\n";
  write_text(path, text);
}

std::vector<Layout> read_layouts(const fs::path& path) {
  std::istringstream in(read_text(path));
  std::vector<Layout> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(parse_layout_record(line));
    } catch (const DataError& e) {
      throw DataError(path.string() + ": " + e.what());
    }
  }
  return out;
}

std::string spec_to_json(const SceneSpec& spec) { return spec_json(spec).dump(); }

SceneSpec spec_from_json(const std::string& text) { return spec_from(json::parse(text)); }

DatasetManifest write_dataset(std::span<const SceneSample> samples, const SceneSpec& spec, std::uint64_t seed,
                              const fs::path& directory) {
  std::error_code ec;
  if (fs::exists(directory) && !fs::is_empty(directory)) {
    throw DataError("dataset directory " + directory.string() + " is not empty");
  }
  for (const char* sub : {"images", "masks"}) {
    fs::create_directories(directory / sub, ec);
    if (ec) throw DataError("cannot create " + (directory / sub).string() + ": " + ec.message());
  }

  DatasetManifest m;
  m.directory = directory;
  m.count = samples.size();
  m.seed = seed;
  m.spec = spec;
  std::vector<Layout> layouts;
  for (const SceneSample& s : samples) {
    const std::string& id = s.layout.scene_id;
    if (s.instance_masks.size() != s.layout.size()) {
      throw std::invalid_argument("sample " + id + ": instance mask count differs from box count");
    }
    write_ppm(directory / image_file(id), s.image);
    m.files.push_back(image_file(id));
    write_pgm(directory / composite_file(id), s.composite_mask.pixels);
    m.files.push_back(composite_file(id));
    for (std::size_t k = 0; k < s.instance_masks.size(); ++k) {
      write_pgm(directory / instance_file(id, k), s.instance_masks[k].pixels);
      m.files.push_back(instance_file(id, k));
    }
    m.scene_ids.push_back(id);
    layouts.push_back(s.layout);
  }
  write_layouts(directory / "layouts.jsonl", layouts);
  m.files.push_back("layouts.jsonl");
  std::sort(m.files.begin(), m.files.end());
  m.digest = tree_digest(directory, m.files);

  json j = {{"version", kManifestVersion}, {"count", m.count},  {"seed", m.seed},
            {"digest", m.digest},          {"spec", spec_json(spec)}, {"scene_ids", m.scene_ids},
            {"files", m.files}};
  write_text(directory / "manifest.json", j.dump(2) + "\n");
  return m;
}

DatasetManifest load_manifest(const fs::path& directory) {
  const fs::path path = directory / "manifest.json";
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  DatasetManifest m;
  m.directory = directory;
  try {
    if (j.at("version").get<int>() != kManifestVersion) throw DataError(path.string() + ": unsupported version");
    m.count = j.at("count").get<std::size_t>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.digest = j.at("digest").get<std::string>();
    m.spec = spec_from(j.at("spec"));
    m.scene_ids = j.at("scene_ids").get<std::vector<std::string>>();
    m.files = j.at("files").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  if (m.scene_ids.size() != m.count) throw DataError(path.string() + ": count does not match scene_ids");
  return m;
}

void verify_dataset(const DatasetManifest& manifest) {
  std::string actual;
  try {
    actual = tree_digest(manifest.directory, manifest.files);
  } catch (const DataError& e) {
    throw DataError("corrupt dataset " + manifest.directory.string() + ": " + e.what());
  }
  if (actual != manifest.digest) {
    throw DataError("corrupt dataset " + manifest.directory.string() + ": digest " + actual + " does not match manifest " +
                    manifest.digest);
  }
}

std::vector<SceneSample> read_dataset(const DatasetManifest& manifest) {
  verify_dataset(manifest);
  const fs::path& dir = manifest.directory;
  const std::vector<Layout> layouts = read_layouts(dir / "layouts.jsonl");
  if (layouts.size() != manifest.count) throw DataError("corrupt dataset " + dir.string() + ": layout count mismatch");
  std::vector<SceneSample> out;
  out.reserve(layouts.size());
  for (const Layout& layout : layouts) {
    SceneSample s;
    s.layout = layout;
    s.image = read_ppm(dir / image_file(layout.scene_id));
    s.composite_mask.pixels = read_pgm(dir / composite_file(layout.scene_id));
    for (std::size_t k = 0; k < layout.size(); ++k) {
      s.instance_masks.push_back({read_pgm(dir / instance_file(layout.scene_id, k))});
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace ofdiff
