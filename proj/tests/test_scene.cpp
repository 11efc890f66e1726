#include "ofdiff/dataset.hpp"
#include "ofdiff/esgm.hpp"
#include "ofdiff/random.hpp"
#include "ofdiff/scene.hpp"

#include "oracles.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

using namespace ofdiff;
using namespace ofdiff::testing;

namespace {

SceneSpec small_spec() {
  SceneSpec s;
  s.canvas_size = 32;
  return s;
}

}  // namespace

TEST(Scene, SpecValidation) {
  SceneSpec s;
  s.canvas_size = 18;
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s = SceneSpec{};
  s.num_objects = {0, 2};
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s = SceneSpec{};
  s.categories.push_back(s.categories.front());
  EXPECT_THROW(s.validate(), std::invalid_argument);
}

TEST(Scene, FixedCountAndDeterminism) {
  SceneSpec s = small_spec();
  s.num_objects = {1, 1};
  for (std::uint64_t i = 0; i < 20; ++i) EXPECT_EQ(generate_layout(s, 3, i).size(), 1u);
  s.num_objects = {1, 3};
  EXPECT_EQ(generate_layout(s, 9, 4), generate_layout(s, 9, 4));
  EXPECT_NE(generate_layout(s, 9, 4), generate_layout(s, 10, 4));
}

TEST(Scene, CornersInsideCanvas) {
  SceneSpec s;
  s.canvas_size = 64;
  s.num_objects = {1, 4};
  std::size_t boxes = 0;
  for (std::uint64_t i = 0; boxes < 10000; ++i) {
    const Layout l = generate_layout(s, 1, i);
    for (const OrientedBox& b : l.boxes) {
      ++boxes;
      for (const auto& p : b.corners()) {
        ASSERT_GE(p.x(), 0.0);
        ASSERT_LT(p.x(), 64.0);
        ASSERT_GE(p.y(), 0.0);
        ASSERT_LT(p.y(), 64.0);
      }
      EXPECT_GE(b.angle, -std::numbers::pi / 2);
      EXPECT_LT(b.angle, std::numbers::pi / 2);
    }
  }
}

TEST(Scene, SeparationRule) {
  const SceneSpec s = small_spec();
  for (std::uint64_t i = 0; i < 300; ++i) {
    const Layout l = generate_layout(s, 2, i);
    for (std::size_t a = 0; a < l.size(); ++a) {
      for (std::size_t b = a + 1; b < l.size(); ++b) {
        const auto& p = l.boxes[a];
        const auto& q = l.boxes[b];
        const double need = 0.5 * std::max({p.width, p.height, q.width, q.height});
        EXPECT_GE(std::hypot(p.cx - q.cx, p.cy - q.cy), need);
      }
    }
  }
}

TEST(Scene, SaturationError) {
  SceneSpec s;
  s.canvas_size = 16;
  s.num_objects = {32, 32};
  try {
    generate_layout(s, 0);
    FAIL();
  } catch (const LayoutSaturation& e) {
    EXPECT_NE(std::string(e.what()).find("layout saturation"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("16"), std::string::npos);
  }
}

TEST(Scene, DiskArea) {
  // Lattice error of a single disk exceeds 3% below r = 10; averaged over
  // sub-pixel centers the count is unbiased.
  Rng rng(13);
  for (double r : {10.0, 11.5, 13.3, 16.0, 20.0}) {
    for (int k = 0; k < 50; ++k) {
      const OrientedBox b{32.0 + rng.uniform(), 32.0 + rng.uniform(), 2 * r, 2 * r, rng.uniform(-1.5, 1.5)};
      const double area = static_cast<double>(rasterize_glyph(Glyph::circle, b, 64).count());
      EXPECT_NEAR(area / (std::numbers::pi * r * r), 1.0, 0.03) << r;
    }
  }
  for (double r : {3.0, 4.0, 5.5, 8.0}) {
    double mean = 0;
    for (int k = 0; k < 400; ++k) {
      const OrientedBox b{32.0 + rng.uniform(), 32.0 + rng.uniform(), 2 * r, 2 * r, 0.0};
      mean += static_cast<double>(rasterize_glyph(Glyph::circle, b, 64).count()) / 400;
    }
    EXPECT_NEAR(mean / (std::numbers::pi * r * r), 1.0, 0.01) << r;
  }
}

TEST(Scene, FlatEmptySceneIsConstant) {
  SceneSpec s = small_spec();
  s.background = Background::flat;
  const Layout empty{"scene_x", {}, {}};
  const SceneSample smp = render_scene(empty, s, 5);
  EXPECT_TRUE(smp.instance_masks.empty());
  EXPECT_EQ(smp.composite_mask.count(), 0);
  for (Index c = 0; c < 3; ++c) {
    for (Index i = 0; i < 32 * 32; ++i) EXPECT_EQ(smp.image[c * 1024 + i], smp.image[c * 1024]);
  }
}

TEST(Scene, MasksMatchIndependentOracle) {
  const SceneSpec s = small_spec();
  for (std::uint64_t i = 0; i < 60; ++i) {
    const Layout l = generate_layout(s, 8, i);
    const SceneSample smp = render_scene(l, s, 8);
    ASSERT_EQ(smp.instance_masks.size(), l.size());
    ASSERT_EQ(smp.image.shape(), (Shape{3, 32, 32}));
    Raster any = Raster::Zero(32, 32);
    for (std::size_t k = 0; k < l.size(); ++k) {
      const Glyph glyph = s.category(l.category_ids[k]).glyph;
      const Raster box = rasterize_box(l.boxes[k], 32).pixels;
      EXPECT_TRUE(subset(smp.instance_masks[k].pixels, dilate(box)));
      for (int y = 0; y < 32; ++y) {
        for (int x = 0; x < 32; ++x) {
          const bool cov = oracle_covers(glyph, l.boxes[k], x + 0.5, y + 0.5);
          EXPECT_EQ(smp.instance_masks[k].pixels(y, x), cov ? 1 : 0);
          if (cov) any(y, x) = 1;
        }
      }
    }
    EXPECT_TRUE((smp.composite_mask.pixels == any).all());
    EXPECT_GE(smp.image.array().minCoeff(), 0.0);
    EXPECT_LE(smp.image.array().maxCoeff(), 1.0);
  }
}

TEST(Scene, GlyphsAreConnected) {
  for (Glyph g : {Glyph::rectangle, Glyph::circle, Glyph::airplane}) {
    for (double size = 6; size <= 20; size += 1.5) {
      const OrientedBox b{16.0, 16.0, size, size, 0.4};
      EXPECT_EQ(components8(rasterize_glyph(g, b, 32).pixels), 1) << to_string(g) << " " << size;
    }
  }
}

TEST(Dataset, PnmRoundTrip) {
  TempDir dir("pnm");
  Rng rng(3);
  Tensor<double> img({3, 5, 7});
  for (Index i = 0; i < img.size(); ++i) img[i] = static_cast<double>(rng.uniform_int(256)) / 255.0;
  write_ppm(dir.path() / "a.ppm", img);
  const Tensor<double> back = read_ppm(dir.path() / "a.ppm");
  ASSERT_EQ(back.shape(), img.shape());
  for (Index i = 0; i < img.size(); ++i) EXPECT_EQ(back[i], img[i]);
  Raster m = Raster::Zero(4, 6);
  m(1, 2) = m(3, 5) = 1;
  write_pgm(dir.path() / "m.pgm", m);
  EXPECT_TRUE((read_pgm(dir.path() / "m.pgm") == m).all());
  const auto bytes = read_bytes(dir.path() / "m.pgm");
  for (std::size_t i = bytes.size() - 24; i < bytes.size(); ++i) EXPECT_TRUE(bytes[i] == 0 || bytes[i] == 255);
}

TEST(Dataset, LayoutRecordRoundTrip) {
  const Layout l = generate_layout(small_spec(), 4, 2);
  EXPECT_EQ(parse_layout_record(layout_record(l)), l);
}

TEST(Dataset, WriteReadAndDigest) {
  const SceneSpec s = small_spec();
  std::vector<SceneSample> samples;
  for (std::uint64_t i = 0; i < 10; ++i) samples.push_back(render_scene(generate_layout(s, 6, i), s, 6));
  TempDir a("ds_a"), b("ds_b");
  const DatasetManifest ma = write_dataset(samples, s, 6, a.path() / "d");
  const DatasetManifest mb = write_dataset(samples, s, 6, b.path() / "d");
  EXPECT_EQ(ma.count, 10u);
  EXPECT_EQ(ma.digest, mb.digest);

  std::vector<std::string> files = ma.files;
  std::sort(files.begin(), files.end());
  std::string cat;
  for (const auto& f : files) cat += sha256_file(ma.directory / f);
  EXPECT_EQ(ma.digest, sha256_hex(cat));

  const std::vector<SceneSample> back = read_dataset(load_manifest(a.path() / "d"));
  ASSERT_EQ(back.size(), 10u);
  for (std::size_t i = 0; i < 10; ++i) {
    EXPECT_EQ(back[i].layout, samples[i].layout);
    EXPECT_TRUE((back[i].image.array() == samples[i].image.array()).all());
    EXPECT_EQ(back[i].composite_mask, samples[i].composite_mask);
    ASSERT_EQ(back[i].instance_masks.size(), samples[i].instance_masks.size());
    for (std::size_t k = 0; k < back[i].instance_masks.size(); ++k)
      EXPECT_EQ(back[i].instance_masks[k], samples[i].instance_masks[k]);
  }
}

TEST(Dataset, EmptyDataset) {
  TempDir dir("ds_empty");
  const DatasetManifest m = write_dataset({}, small_spec(), 1, dir.path() / "d");
  EXPECT_EQ(m.count, 0u);
  EXPECT_FALSE(std::filesystem::exists(dir.path() / "d" / "images") &&
               !std::filesystem::is_empty(dir.path() / "d" / "images"));
  EXPECT_TRUE(read_dataset(load_manifest(dir.path() / "d")).empty());
}

TEST(Dataset, CorruptionDetected) {
  const SceneSpec s = small_spec();
  std::vector<SceneSample> samples{render_scene(generate_layout(s, 1, 0), s, 1)};
  TempDir dir("ds_corrupt");
  const DatasetManifest m = write_dataset(samples, s, 1, dir.path() / "d");
  const auto img = dir.path() / "d" / "images" / (samples[0].layout.scene_id + ".ppm");
  auto bytes = read_bytes(img);
  bytes.back() ^= 1;
  write_bytes(img, bytes);
  try {
    read_dataset(load_manifest(dir.path() / "d"));
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("corrupt dataset"), std::string::npos);
  }
}

TEST(Esgm, FullCanvasCropIsIdentity) {
  SceneSpec s = small_spec();
  const Layout l{"scene_full", {{16.0, 16.0, 32.0, 32.0, 0.0}}, {0}};
  const SceneSample smp = render_scene(l, s, 1);
  const InstancePatchMask p = extract_instance_mask(smp, 0);
  EXPECT_TRUE((p.pixels == smp.instance_masks[0].pixels).all());
  EXPECT_THROW(extract_instance_mask(smp, 1), ContractError);
}

TEST(Esgm, DiskPatchCount) {
  const Layout l{"scene_disk", {{16.0, 16.0, 10.0, 10.0, 0.0}}, {1}};
  const SceneSample smp = render_scene(l, small_spec(), 1);
  EXPECT_EQ(extract_instance_mask(smp, 0).count(), rasterize_glyph(Glyph::circle, l.boxes[0], 32).count());
}

TEST(Esgm, DegenerateInstance) {
  SceneSample smp = render_scene(Layout{"scene_deg", {{16.0, 16.0, 8.0, 8.0, 0.0}}, {0}}, small_spec(), 1);
  smp.instance_masks[0].pixels.setZero();
  try {
    extract_instance_mask(smp, 0);
    FAIL();
  } catch (const DegenerateInstance& e) {
    EXPECT_NE(std::string(e.what()).find("scene_deg"), std::string::npos);
  }
}

TEST(Esgm, IdentityRepasteAndParity) {
  const SceneSpec s = small_spec();
  for (std::uint64_t i = 0; i < 30; ++i) {
    const SceneSample smp = render_scene(generate_layout(s, 12, i), s, 12);
    for (std::size_t k = 0; k < smp.layout.size(); ++k) {
      const InstancePatchMask p = extract_instance_mask(smp, k);
      EXPECT_EQ(augment_shape(p, 0.0, smp.layout.boxes[k], 32), smp.instance_masks[k]);
    }
    EXPECT_EQ(training_shape_condition(smp), smp.composite_mask);
  }
}

TEST(Esgm, QuarterTurnAreaAndGeneralAngles) {
  Rng rng(21);
  for (int trial = 0; trial < 220; ++trial) {
    const InstancePatchMask p = random_patch(rng);
    const OrientedBox& src = p.source_box;

    OrientedBox same = src;
    same.cx = 32.0 + (src.cx - std::floor(src.cx));
    same.cy = 32.0 + (src.cy - std::floor(src.cy));
    const ShapeMask quarter = augment_shape(p, std::numbers::pi / 2, OrientedBox{same.cx, same.cy, src.height, src.width, src.angle}, 64);
    EXPECT_EQ(quarter.count(), p.count()) << trial;

    const double angle = rng.uniform(0.0, 2 * std::numbers::pi);
    const double tw = rng.uniform(16.0, 40.0), th = rng.uniform(16.0, 40.0);
    const OrientedBox tb{32.0, 32.0, tw, th, rng.uniform(-1.5, 1.5)};
    const ShapeMask out = augment_shape(p, angle, tb, 64);
    EXPECT_TRUE(((out.pixels == 0) || (out.pixels == 1)).all());
    EXPECT_TRUE(subset(out.pixels, dilate(rasterize_box(tb, 64).pixels)));
    const double rel = src.angle + angle - tb.angle;
    const double c = std::abs(std::cos(rel)), sn = std::abs(std::sin(rel));
    const double scale = std::min(tw / (c * src.width + sn * src.height), th / (sn * src.width + c * src.height));
    EXPECT_NEAR(out.count() / (p.count() * scale * scale), 1.0, 0.10) << trial << " n=" << p.count() << " s=" << scale << " out=" << out.count();
  }
}

TEST(Esgm, PoolBuildSaveLoad) {
  SceneSpec s = small_spec();
  std::vector<SceneSample> samples;
  for (std::uint64_t i = 0; i < 30; ++i) samples.push_back(render_scene(generate_layout(s, 2, i), s, 2));
  TempDir dir("pool");
  const DatasetManifest m = write_dataset(samples, s, 2, dir.path() / "d");
  const MaskPool pool = build_mask_pool(m);
  EXPECT_EQ(pool.entries.size(), 3u);
  for (const auto& [id, list] : pool.entries) EXPECT_FALSE(list.empty()) << id;
  EXPECT_EQ(pool.provenance, m.digest);
  EXPECT_EQ(build_mask_pool(m).size(), pool.size());

  save_mask_pool(pool, dir.path() / "pool");
  const MaskPool back = load_mask_pool(dir.path() / "pool");
  EXPECT_EQ(back.provenance, pool.provenance);
  ASSERT_EQ(back.size(), pool.size());
  for (const auto& [id, list] : pool.entries) {
    for (std::size_t k = 0; k < list.size(); ++k) EXPECT_TRUE((back.entries.at(id)[k].pixels == list[k].pixels).all());
  }

  const auto mask = dir.path() / "d" / "masks" / (samples[0].layout.scene_id + "_composite.pgm");
  auto bytes = read_bytes(mask);
  bytes.back() ^= 0xff;
  write_bytes(mask, bytes);
  EXPECT_THROW(build_mask_pool(m), DataError);
}

TEST(Esgm, EmptyCategoryRejected) {
  SceneSpec s = small_spec();
  const Layout l{"scene_one", {{16.0, 16.0, 8.0, 8.0, 0.0}}, {0}};
  std::vector<SceneSample> samples{render_scene(l, s, 1)};
  TempDir dir("pool_empty");
  const DatasetManifest m = write_dataset(samples, s, 1, dir.path() / "d");
  try {
    build_mask_pool(m);
    FAIL();
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("empty category"), std::string::npos);
  }
}

TEST(Esgm, ShapeConditionComponentsAndMiss) {
  SceneSpec s = small_spec();
  s.canvas_size = 64;
  std::vector<SceneSample> samples;
  for (std::uint64_t i = 0; i < 30; ++i) samples.push_back(render_scene(generate_layout(s, 3, i), s, 3));
  MaskPool pool;
  for (const SceneSample& smp : samples) {
    for (std::size_t k = 0; k < smp.layout.size(); ++k) {
      InstancePatchMask p = extract_instance_mask(smp, k);
      pool.entries[p.category_id].push_back(p);
    }
  }
  // Well separated, non-overlapping boxes.
  const Layout l{"scene_c", {{14.0, 14.0, 12.0, 12.0, 0.0}, {48.0, 16.0, 12.0, 12.0, 0.5}, {30.0, 48.0, 14.0, 14.0, -0.3}},
                 {0, 1, 2}};
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const ShapeMask c = sample_shape_condition(l, pool, seed, 64);
    EXPECT_EQ(c, sample_shape_condition(l, pool, seed, 64));
    int total = 0;
    for (const OrientedBox& b : l.boxes) {
      const Raster region = dilate(rasterize_box(b, 64).pixels);
      total += components8((c.pixels * region).eval());
    }
    EXPECT_EQ(total, 3);
  }
  EXPECT_EQ(sample_shape_condition(Layout{"e", {}, {}}, pool, 1, 64).count(), 0);
  pool.entries.erase(2);
  try {
    sample_shape_condition(l, pool, 0, 64);
    FAIL();
  } catch (const PoolMiss& e) {
    EXPECT_EQ(e.category_id, 2);
  }
}
