#include "ofdiff/metrics.hpp"

#include "ofdiff/dataset.hpp"
#include "ofdiff/random.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>

namespace ofdiff {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

int reflect101(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) i = i < 0 ? -i : 2 * n - 2 - i;
  return i;
}

Eigen::ArrayXXd gray255(const Tensor<double>& patch) {
  if (patch.rank() != 3 || (patch.dim(0) != 1 && patch.dim(0) != 3)) {
    throw ShapeError("expected a (1 or 3, H, W) patch, got " + shape_string(patch.shape()));
  }
  const Index h = patch.dim(1), w = patch.dim(2);
  Eigen::ArrayXXd g(h, w);
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x) {
      const double v = patch.dim(0) == 1
                           ? patch.at(0, y, x)
                           : 0.299 * patch.at(0, y, x) + 0.587 * patch.at(1, y, x) + 0.114 * patch.at(2, y, x);
      g(y, x) = 255.0 * v;
    }
  }
  return g;
}

// Separable correlation with a symmetric odd kernel, reflect-101 borders.
Eigen::ArrayXXd filter_sep(const Eigen::ArrayXXd& src, const std::vector<double>& ky, const std::vector<double>& kx) {
  const int h = static_cast<int>(src.rows()), w = static_cast<int>(src.cols());
  const int ry = static_cast<int>(ky.size()) / 2, rx = static_cast<int>(kx.size()) / 2;
  Eigen::ArrayXXd tmp(h, w), out(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int k = -rx; k <= rx; ++k) acc += kx[static_cast<std::size_t>(k + rx)] * src(y, reflect101(x + k, w));
      tmp(y, x) = acc;
    }
  }
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int k = -ry; k <= ry; ++k) acc += ky[static_cast<std::size_t>(k + ry)] * tmp(reflect101(y + k, h), x);
      out(y, x) = acc;
    }
  }
  return out;
}

std::vector<double> gaussian_kernel(int size, double sigma) {
  std::vector<double> k(static_cast<std::size_t>(size));
  const int r = size / 2;
  double s = 0.0;
  for (int i = -r; i <= r; ++i) {
    k[static_cast<std::size_t>(i + r)] = std::exp(-(i * i) / (2.0 * sigma * sigma));
    s += k[static_cast<std::size_t>(i + r)];
  }
  for (double& v : k) v /= s;
  return k;
}

// 1-D squared distance transform of a sampled function (lower envelope of parabolas).
void dt1d(const std::vector<double>& f, std::vector<double>& d) {
  const int n = static_cast<int>(f.size());
  std::vector<int> v(static_cast<std::size_t>(n));
  std::vector<double> z(static_cast<std::size_t>(n) + 1);
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (f[static_cast<std::size_t>(q)] == kInf) continue;
    while (k >= 0) {
      const int p = v[static_cast<std::size_t>(k)];
      const double s = ((f[static_cast<std::size_t>(q)] + q * q) - (f[static_cast<std::size_t>(p)] + p * p)) /
                       (2.0 * (q - p));
      if (s <= z[static_cast<std::size_t>(k)]) {
        --k;
      } else {
        break;
      }
    }
    ++k;
    v[static_cast<std::size_t>(k)] = q;
    z[static_cast<std::size_t>(k)] = k == 0 ? -kInf
                                            : ((f[static_cast<std::size_t>(q)] + q * q) -
                                               (f[static_cast<std::size_t>(v[static_cast<std::size_t>(k) - 1])] +
                                                v[static_cast<std::size_t>(k) - 1] * v[static_cast<std::size_t>(k) - 1])) /
                                                  (2.0 * (q - v[static_cast<std::size_t>(k) - 1]));
    z[static_cast<std::size_t>(k) + 1] = kInf;
  }
  d.assign(static_cast<std::size_t>(n), kInf);
  if (k < 0) return;
  int j = 0;
  for (int q = 0; q < n; ++q) {
    while (z[static_cast<std::size_t>(j) + 1] < q) ++j;
    const int p = v[static_cast<std::size_t>(j)];
    d[static_cast<std::size_t>(q)] = (q - p) * (q - p) + f[static_cast<std::size_t>(p)];
  }
}

void require_same(const EdgeMap& a, const EdgeMap& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("edge maps differ in size");
}

// Distances from the set pixels of `from` to the nearest set pixel of `to`.
std::vector<double> nearest_distances(const EdgeMap& from, const EdgeMap& to) {
  const Eigen::ArrayXXd dt = distance_transform(to);
  std::vector<double> out;
  for (Index y = 0; y < from.rows(); ++y) {
    for (Index x = 0; x < from.cols(); ++x) {
      if (from(y, x)) out.push_back(dt(y, x));
    }
  }
  return out;
}

void require_points(const EdgeMap& a, const EdgeMap& b) {
  if ((a != 0).count() == 0 || (b != 0).count() == 0) {
    throw std::invalid_argument("undefined distance for empty edge set");
  }
}

double median_distance(const std::vector<Eigen::VectorXd>& pooled) {
  std::vector<double> d;
  for (std::size_t i = 0; i < pooled.size(); ++i) {
    for (std::size_t j = i + 1; j < pooled.size(); ++j) d.push_back((pooled[i] - pooled[j]).norm());
  }
  if (d.empty()) return 1.0;
  const std::size_t mid = d.size() / 2;
  std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(mid), d.end());
  double m = d[mid];
  if (d.size() % 2 == 0) {
    m = 0.5 * (m + *std::max_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(mid)));
  }
  return m > 0.0 ? m : 1.0;
}

// Unbiased MMD^2 from a pooled Gram matrix and a labeling (first m are "a").
double mmd_from_gram(const Eigen::MatrixXd& k, const std::vector<std::size_t>& order, std::size_t m) {
  const std::size_t n = order.size() - m;
  double aa = 0.0, bb = 0.0, ab = 0.0;
  for (std::size_t i = 0; i < order.size(); ++i) {
    for (std::size_t j = 0; j < order.size(); ++j) {
      if (i == j) continue;
      const double v = k(static_cast<Index>(order[i]), static_cast<Index>(order[j]));
      if (i < m && j < m) {
        aa += v;
      } else if (i >= m && j >= m) {
        bb += v;
      } else if (i < m) {
        ab += v;
      }
    }
  }
  return aa / static_cast<double>(m * (m - 1)) + bb / static_cast<double>(n * (n - 1)) -
         2.0 * ab / static_cast<double>(m * n);
}

Eigen::MatrixXd gram(const std::vector<Eigen::VectorXd>& pooled, double h) {
  const Index n = static_cast<Index>(pooled.size());
  Eigen::MatrixXd k(n, n);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) {
      k(i, j) = std::exp(-(pooled[static_cast<std::size_t>(i)] - pooled[static_cast<std::size_t>(j)]).squaredNorm() /
                         (2.0 * h * h));
    }
  }
  return k;
}

json summary_json(const MetricSummary& s) {
  json j = {{"count", s.count}, {"iou", s.iou}, {"dice", s.dice}, {"ssim", s.ssim}, {"distance_count", s.distance_count}};
  j["cd"] = s.cd ? json(*s.cd) : json(nullptr);
  j["hd"] = s.hd ? json(*s.hd) : json(nullptr);
  return j;
}

std::string cell(const std::optional<double>& v) {
  if (!v) return "-";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", *v);
  return buf;
}

}  // namespace

HorizontalBox rbox_to_hbox(const OrientedBox& box) {
  HorizontalBox h{kInf, kInf, -kInf, -kInf};
  for (const auto& p : box.corners()) {
    h.x_min = std::min(h.x_min, p.x());
    h.y_min = std::min(h.y_min, p.y());
    h.x_max = std::max(h.x_max, p.x());
    h.y_max = std::max(h.y_max, p.y());
  }
  return h;
}

CropWindow padded_window(const HorizontalBox& box, double padding_frac, int width, int height) {
  const double pw = padding_frac * (box.x_max - box.x_min), ph = padding_frac * (box.y_max - box.y_min);
  CropWindow w;
  w.x0 = std::max(0, static_cast<int>(std::floor(box.x_min - pw)));
  w.y0 = std::max(0, static_cast<int>(std::floor(box.y_min - ph)));
  w.x1 = std::min(width, static_cast<int>(std::ceil(box.x_max + pw)));
  w.y1 = std::min(height, static_cast<int>(std::ceil(box.y_max + ph)));
  if (w.x1 <= w.x0 || w.y1 <= w.y0) throw std::invalid_argument("box outside image");
  return w;
}

Tensor<double> crop_and_resize(const Tensor<double>& image, const HorizontalBox& box, double padding_frac,
                               int out_size) {
  if (image.rank() != 3) throw ShapeError("crop_and_resize expects (C, H, W), got " + shape_string(image.shape()));
  if (out_size < 1) throw std::invalid_argument("out_size must be positive");
  const CropWindow win = padded_window(box, padding_frac, static_cast<int>(image.dim(2)), static_cast<int>(image.dim(1)));
  const int cw = win.x1 - win.x0, ch = win.y1 - win.y0;
  const Index channels = image.dim(0);
  Tensor<double> out({channels, out_size, out_size});
  const double sx = static_cast<double>(cw) / out_size, sy = static_cast<double>(ch) / out_size;
  for (int oy = 0; oy < out_size; ++oy) {
    const double fy = std::clamp((oy + 0.5) * sy - 0.5, 0.0, static_cast<double>(ch - 1));
    const int y0 = static_cast<int>(std::floor(fy));
    const int y1 = std::min(y0 + 1, ch - 1);
    const double ty = fy - y0;
    for (int ox = 0; ox < out_size; ++ox) {
      const double fx = std::clamp((ox + 0.5) * sx - 0.5, 0.0, static_cast<double>(cw - 1));
      const int x0 = static_cast<int>(std::floor(fx));
      const int x1 = std::min(x0 + 1, cw - 1);
      const double tx = fx - x0;
      for (Index c = 0; c < channels; ++c) {
        auto px = [&](int y, int x) { return image.at(c, win.y0 + y, win.x0 + x); };
        const double top = px(y0, x0) + tx * (px(y0, x1) - px(y0, x0));
        const double bot = px(y1, x0) + tx * (px(y1, x1) - px(y1, x0));
        out.at(c, oy, ox) = top + ty * (bot - top);
      }
    }
  }
  return out;
}

EdgeMap canny_edges(const Tensor<double>& patch, const CannyOptions& options) {
  if (!(options.low >= 0.0 && options.low < options.high && options.high <= 255.0 * 8)) {
    throw std::invalid_argument("Canny thresholds need 0 <= low < high");
  }
  const Eigen::ArrayXXd blurred = filter_sep(gray255(patch), gaussian_kernel(5, 1.4), gaussian_kernel(5, 1.4));
  const Eigen::ArrayXXd gx = filter_sep(blurred, {1, 2, 1}, {-1, 0, 1});
  const Eigen::ArrayXXd gy = filter_sep(blurred, {-1, 0, 1}, {1, 2, 1});
  const Eigen::ArrayXXd mag = (gx.square() + gy.square()).sqrt();
  const int h = static_cast<int>(mag.rows()), w = static_cast<int>(mag.cols());
  auto m = [&](int y, int x) { return (y < 0 || x < 0 || y >= h || x >= w) ? 0.0 : mag(y, x); };

  // 0: weak-suppressed, 1: weak candidate, 2: strong.
  Eigen::ArrayXXi state = Eigen::ArrayXXi::Zero(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double v = mag(y, x);
      if (!(v > options.low)) continue;
      double deg = std::atan2(gy(y, x), gx(y, x)) * 180.0 / std::numbers::pi;
      if (deg < 0) deg += 180.0;
      int dx, dy;
      if (deg < 22.5 || deg >= 157.5) {
        dx = 1, dy = 0;
      } else if (deg < 67.5) {
        dx = 1, dy = 1;
      } else if (deg < 112.5) {
        dx = 0, dy = 1;
      } else {
        dx = -1, dy = 1;
      }
      if (v > m(y - dy, x - dx) && v >= m(y + dy, x + dx)) state(y, x) = v > options.high ? 2 : 1;
    }
  }
  EdgeMap out = EdgeMap::Zero(h, w);
  std::vector<std::pair<int, int>> stack;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (state(y, x) == 2) {
        out(y, x) = 1;
        stack.emplace_back(y, x);
      }
    }
  }
  while (!stack.empty()) {
    const auto [y, x] = stack.back();
    stack.pop_back();
    for (int dy = -1; dy <= 1; ++dy) {
      for (int dx = -1; dx <= 1; ++dx) {
        const int ny = y + dy, nx = x + dx;
        if (ny < 0 || nx < 0 || ny >= h || nx >= w || out(ny, nx) || state(ny, nx) != 1) continue;
        out(ny, nx) = 1;
        stack.emplace_back(ny, nx);
      }
    }
  }
  return out;
}

Overlap edge_overlap(const EdgeMap& a, const EdgeMap& b) {
  require_same(a, b);
  const auto inter = static_cast<double>(((a != 0) && (b != 0)).count());
  const auto uni = static_cast<double>(((a != 0) || (b != 0)).count());
  const auto na = static_cast<double>((a != 0).count()), nb = static_cast<double>((b != 0).count());
  if (uni == 0) return {1.0, 1.0};
  return {inter / uni, 2.0 * inter / (na + nb)};
}

Eigen::ArrayXXd distance_transform(const EdgeMap& mask) {
  const Index h = mask.rows(), w = mask.cols();
  Eigen::ArrayXXd d(h, w);
  std::vector<double> f, out;
  for (Index x = 0; x < w; ++x) {
    f.assign(static_cast<std::size_t>(h), kInf);
    for (Index y = 0; y < h; ++y) {
      if (mask(y, x)) f[static_cast<std::size_t>(y)] = 0.0;
    }
    dt1d(f, out);
    for (Index y = 0; y < h; ++y) d(y, x) = out[static_cast<std::size_t>(y)];
  }
  for (Index y = 0; y < h; ++y) {
    f.assign(static_cast<std::size_t>(w), kInf);
    for (Index x = 0; x < w; ++x) f[static_cast<std::size_t>(x)] = d(y, x);
    dt1d(f, out);
    for (Index x = 0; x < w; ++x) d(y, x) = std::sqrt(out[static_cast<std::size_t>(x)]);
  }
  return d;
}

double chamfer(const EdgeMap& a, const EdgeMap& b) {
  require_same(a, b);
  require_points(a, b);
  auto avg = [](const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); };
  return 0.5 * (avg(nearest_distances(a, b)) + avg(nearest_distances(b, a)));
}

double hausdorff(const EdgeMap& a, const EdgeMap& b) {
  require_same(a, b);
  require_points(a, b);
  const std::vector<double> ab = nearest_distances(a, b), ba = nearest_distances(b, a);
  return std::max(*std::max_element(ab.begin(), ab.end()), *std::max_element(ba.begin(), ba.end()));
}

double ssim(const Eigen::ArrayXXd& a, const Eigen::ArrayXXd& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("SSIM inputs differ in size");
  constexpr int kWin = 11;
  if (a.rows() < kWin || a.cols() < kWin) throw ShapeError("SSIM needs images of at least 11x11");
  const std::vector<double> g = gaussian_kernel(kWin, 1.5);
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  const Index oh = a.rows() - kWin + 1, ow = a.cols() - kWin + 1;
  double total = 0.0;
  for (Index y = 0; y < oh; ++y) {
    for (Index x = 0; x < ow; ++x) {
      double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
      for (int i = 0; i < kWin; ++i) {
        for (int j = 0; j < kWin; ++j) {
          const double wgt = g[static_cast<std::size_t>(i)] * g[static_cast<std::size_t>(j)];
          const double va = a(y + i, x + j), vb = b(y + i, x + j);
          ma += wgt * va;
          mb += wgt * vb;
          saa += wgt * va * va;
          sbb += wgt * vb * vb;
          sab += wgt * va * vb;
        }
      }
      const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
      total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
  }
  return total / static_cast<double>(oh * ow);
}

double ssim(const EdgeMap& a, const EdgeMap& b) {
  return ssim(Eigen::ArrayXXd((a != 0).cast<double>()), Eigen::ArrayXXd((b != 0).cast<double>()));
}

MmdResult mmd_rbf(const std::vector<Eigen::VectorXd>& a, const std::vector<Eigen::VectorXd>& b,
                  std::optional<double> bandwidth) {
  if (a.size() < 2 || b.size() < 2) throw std::invalid_argument("MMD needs at least 2 samples per set");
  std::vector<Eigen::VectorXd> pooled(a);
  pooled.insert(pooled.end(), b.begin(), b.end());
  MmdResult r;
  r.bandwidth = bandwidth.value_or(median_distance(pooled));
  if (!(r.bandwidth > 0.0)) throw std::invalid_argument("MMD bandwidth must be positive");
  std::vector<std::size_t> order(pooled.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  r.mmd2 = mmd_from_gram(gram(pooled, r.bandwidth), order, a.size());
  return r;
}

PermutationTest mmd_permutation_test(const std::vector<Eigen::VectorXd>& a, const std::vector<Eigen::VectorXd>& b,
                                     int permutations, std::uint64_t seed, std::optional<double> bandwidth) {
  if (permutations < 2) throw std::invalid_argument("permutation test needs at least 2 permutations");
  const MmdResult base = mmd_rbf(a, b, bandwidth);
  std::vector<Eigen::VectorXd> pooled(a);
  pooled.insert(pooled.end(), b.begin(), b.end());
  const Eigen::MatrixXd k = gram(pooled, base.bandwidth);
  std::vector<std::size_t> order(pooled.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed, {stream_id("mmd-permutation")});
  std::vector<double> null;
  int exceed = 0;
  for (int p = 0; p < permutations; ++p) {
    for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[rng.uniform_int(i + 1)]);
    null.push_back(mmd_from_gram(k, order, a.size()));
    if (null.back() >= base.mmd2) ++exceed;
  }
  const double mean = std::accumulate(null.begin(), null.end(), 0.0) / static_cast<double>(null.size());
  double var = 0.0;
  for (double v : null) var += (v - mean) * (v - mean);
  PermutationTest out;
  out.mmd2 = base.mmd2;
  out.bandwidth = base.bandwidth;
  out.standard_error = std::sqrt(var / static_cast<double>(null.size() - 1));
  out.p_value = (1.0 + exceed) / (1.0 + permutations);
  return out;
}

MetricSummary summarize(std::span<const InstanceMetrics> rows) {
  MetricSummary s;
  s.count = rows.size();
  double cd = 0.0, hd = 0.0;
  for (const InstanceMetrics& r : rows) {
    s.iou += r.iou;
    s.dice += r.dice;
    s.ssim += r.ssim;
    if (r.cd && r.hd) {
      cd += *r.cd;
      hd += *r.hd;
      ++s.distance_count;
    }
  }
  if (s.count) {
    s.iou /= static_cast<double>(s.count);
    s.dice /= static_cast<double>(s.count);
    s.ssim /= static_cast<double>(s.count);
  }
  if (s.distance_count) {
    s.cd = cd / static_cast<double>(s.distance_count);
    s.hd = hd / static_cast<double>(s.distance_count);
  }
  return s;
}

std::string ShapeFidelityReport::to_json() const {
  json rows_json = json::array();
  for (const InstanceMetrics& r : rows) {
    json j = {{"scene_id", r.scene_id}, {"index", r.index}, {"category_id", r.category_id},
              {"iou", r.iou},           {"dice", r.dice},   {"ssim", r.ssim}};
    j["cd"] = r.cd ? json(*r.cd) : json(nullptr);
    j["hd"] = r.hd ? json(*r.hd) : json(nullptr);
    rows_json.push_back(j);
  }
  json per_cat = json::object();
  for (const auto& [id, s] : per_category) per_cat[std::to_string(id)] = summary_json(s);
  json out = {{"instance_count", instance_count()},
              {"empty_edge_count", empty_edge_count},
              {"skipped", skipped},
              {"rows", rows_json},
              {"per_category", per_cat}};
  out["overall"] = overall ? summary_json(*overall) : json(nullptr);
  return out.dump(2) + "\n";
}

std::string ShapeFidelityReport::to_table() const {
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof(line), "%-10s %8s %8s %8s %8s %8s %8s\n", "group", "count", "IoU", "DICE", "CD", "HD",
                "SSIM");
  os << line;
  auto row = [&](const std::string& name, const MetricSummary& s) {
    std::snprintf(line, sizeof(line), "%-10s %8zu %8s %8s %8s %8s %8s\n", name.c_str(), s.count,
                  cell(s.iou).c_str(), cell(s.dice).c_str(), cell(s.cd).c_str(), cell(s.hd).c_str(),
                  cell(s.ssim).c_str());
    os << line;
  };
  if (overall) row("all", *overall);
  for (const auto& [id, s] : per_category) row("cat" + std::to_string(id), s);
  return os.str();
}

std::optional<fs::path> find_scene_image(const fs::path& dir, const std::string& scene_id, ImageSource source) {
  const std::vector<fs::path> candidates =
      source == ImageSource::image
          ? std::vector<fs::path>{dir / (scene_id + ".ppm"), dir / "images" / (scene_id + ".ppm")}
          : std::vector<fs::path>{dir / "masks" / (scene_id + "_composite.pgm")};
  for (const fs::path& p : candidates) {
    if (fs::is_regular_file(p)) return p;
  }
  return std::nullopt;
}

InstanceMetrics compare_instance(const Tensor<double>& generated, const Tensor<double>& reference,
                                 const OrientedBox& box, const EvalOptions& options) {
  const HorizontalBox hb = rbox_to_hbox(box);
  const EdgeMap eg = canny_edges(crop_and_resize(generated, hb, options.padding_frac, options.out_size), options.canny);
  const EdgeMap er = canny_edges(crop_and_resize(reference, hb, options.padding_frac, options.out_size), options.canny);
  InstanceMetrics m;
  const Overlap o = edge_overlap(eg, er);
  m.iou = o.iou;
  m.dice = o.dice;
  m.ssim = ssim(eg, er);
  if ((eg != 0).count() > 0 && (er != 0).count() > 0) {
    m.cd = chamfer(eg, er);
    m.hd = hausdorff(eg, er);
  }
  return m;
}

ShapeFidelityReport evaluate_pairs(const fs::path& generated_dir, const fs::path& reference_dir,
                                   std::span<const Layout> layouts, const EvalOptions& options) {
  ShapeFidelityReport report;
  std::map<int, std::vector<InstanceMetrics>> by_cat;
  for (const Layout& layout : layouts) {
    const auto gen = find_scene_image(generated_dir, layout.scene_id, options.generated);
    const auto ref = find_scene_image(reference_dir, layout.scene_id, options.reference);
    if (!gen || !ref) {
      report.skipped.push_back(layout.scene_id);
      continue;
    }
    const Tensor<double> gi = read_pnm_image(*gen), ri = read_pnm_image(*ref);
    for (std::size_t k = 0; k < layout.size(); ++k) {
      InstanceMetrics m = compare_instance(gi, ri, layout.boxes[k], options);
      m.scene_id = layout.scene_id;
      m.index = k;
      m.category_id = layout.category_ids[k];
      if (!m.cd) ++report.empty_edge_count;
      by_cat[m.category_id].push_back(m);
      report.rows.push_back(std::move(m));
    }
  }
  if (!report.rows.empty()) report.overall = summarize(report.rows);
  for (const auto& [id, rows] : by_cat) report.per_category[id] = summarize(rows);
  return report;
}

}  // namespace ofdiff
