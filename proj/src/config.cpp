#include "ofdiff/config.hpp"

#include "ofdiff/dataset.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

namespace ofdiff {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

template <typename Int>
Int parse_int(const std::string& v) {
  Int out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) throw std::invalid_argument("expected an integer");
  return out;
}

double parse_double(const std::string& v) {
  std::size_t pos = 0;
  const double out = std::stod(v, &pos);
  if (pos != v.size()) throw std::invalid_argument("expected a number");
  return out;
}

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument("expected true or false");
}

std::string to_string(ImageSource s) { return s == ImageSource::image ? "image" : "mask"; }
ImageSource image_source_from_string(const std::string& v) {
  if (v == "image") return ImageSource::image;
  if (v == "mask") return ImageSource::mask;
  throw std::invalid_argument("expected image or mask");
}

struct Field {
  std::string path;
  std::function<std::string()> get;
  std::function<void(const std::string&)> set;
};

template <typename T>
Field int_field(std::string path, T& ref) {
  return {std::move(path), [&ref] { return std::to_string(ref); }, [&ref](const std::string& v) { ref = parse_int<T>(v); }};
}
Field double_field(std::string path, double& ref) {
  return {std::move(path), [&ref] { return fmt_double(ref); }, [&ref](const std::string& v) { ref = parse_double(v); }};
}
Field bool_field(std::string path, bool& ref) {
  return {std::move(path), [&ref] { return std::string(ref ? "true" : "false"); },
          [&ref](const std::string& v) { ref = parse_bool(v); }};
}
template <typename E, typename Parse>
Field enum_field(std::string path, E& ref, Parse parse) {
  return {std::move(path), [&ref] { return to_string(ref); }, [&ref, parse](const std::string& v) { ref = parse(v); }};
}

std::vector<Field> fields(RunConfig& c) {
  return {
      int_field("seed", c.seed),
      int_field("dataset.canvas_size", c.dataset.canvas_size),
      int_field("dataset.train_count", c.dataset.train_count),
      int_field("dataset.val_count", c.dataset.val_count),
      int_field("dataset.min_objects", c.dataset.min_objects),
      int_field("dataset.max_objects", c.dataset.max_objects),
      enum_field("dataset.background", c.dataset.background, background_from_string),
      double_field("dataset.size_scale", c.dataset.size_scale),
      int_field("model.base_width", c.model.base_width),
      int_field("model.embed_dim", c.model.embed_dim),
      int_field("model.groups", c.model.groups),
      int_field("train.batch_size", c.train.batch_size),
      int_field("train.iterations", c.train.iterations),
      double_field("train.learning_rate", c.train.learning_rate),
      double_field("train.weight_decay", c.train.weight_decay),
      int_field("train.timesteps", c.train.timesteps),
      bool_field("train.use_esgm", c.train.use_esgm),
      bool_field("train.use_dcloss", c.train.use_dcloss),
      enum_field("train.consistency", c.train.consistency, consistency_form_from_string),
      int_field("train.checkpoint_every", c.train.checkpoint_every),
      int_field("sample.steps", c.sample.steps),
      enum_field("sample.sampler", c.sample.sampler, sampler_from_string),
      enum_field("sample.rotation", c.sample.rotation, rotation_policy_from_string),
      int_field("sample.batch_size", c.sample.batch_size),
      bool_field("ddpo.enabled", c.ddpo.enabled),
      int_field("ddpo.updates", c.ddpo.updates),
      int_field("ddpo.batch_size", c.ddpo.batch_size),
      int_field("ddpo.sampling_steps", c.ddpo.sampling_steps),
      double_field("ddpo.learning_rate", c.ddpo.learning_rate),
      int_field("ddpo.k", c.ddpo.k),
      double_field("ddpo.omega", c.ddpo.omega),
      double_field("ddpo.clip_eps", c.ddpo.clip_eps),
      bool_field("ddpo.normalize_advantages", c.ddpo.normalize_advantages),
      bool_field("ddpo.toy_reward", c.ddpo.toy_reward),
      int_field("ddpo.reference_count", c.ddpo.reference_count),
      double_field("eval.canny_low", c.eval.canny_low),
      double_field("eval.canny_high", c.eval.canny_high),
      double_field("eval.padding", c.eval.padding),
      int_field("eval.out_size", c.eval.out_size),
      enum_field("eval.reference", c.eval.reference, image_source_from_string),
      int_field("eval.mmd_permutations", c.eval.mmd_permutations),
  };
}

void require(bool ok, const std::string& key, const std::string& what) {
  if (!ok) throw ConfigError("invalid config value for " + key + ": " + what);
}

}  // namespace

void RunConfig::validate() const {
  const DatasetSection& d = dataset;
  require(d.canvas_size >= 16 && d.canvas_size % 4 == 0, "dataset.canvas_size", "must be >= 16 and a multiple of 4");
  require(d.train_count >= 0, "dataset.train_count", "must be >= 0");
  require(d.val_count >= 0, "dataset.val_count", "must be >= 0");
  require(d.min_objects >= 1 && d.min_objects <= 32, "dataset.min_objects", "must lie in [1, 32]");
  require(d.max_objects >= d.min_objects && d.max_objects <= 32, "dataset.max_objects",
          "must lie in [dataset.min_objects, 32]");
  require(d.size_scale > 0.0, "dataset.size_scale", "must be positive");
  for (const Category& c : SceneSpec::default_categories()) {
    require(c.min_size * d.size_scale >= 4.0 && c.max_size * d.size_scale <= d.canvas_size, "dataset.size_scale",
            "scaled sizes of category " + std::to_string(c.id) + " must lie in [4, canvas_size]");
  }
  require(model.base_width > 0 && model.groups > 0 && model.base_width % model.groups == 0, "model.base_width",
          "must be a positive multiple of model.groups");
  require(model.embed_dim > 0 && model.embed_dim % 2 == 0, "model.embed_dim", "must be positive and even");
  require(train.batch_size >= 1, "train.batch_size", "must be >= 1");
  require(train.iterations >= 0, "train.iterations", "must be >= 0");
  require(train.learning_rate > 0.0, "train.learning_rate", "must be positive");
  require(train.weight_decay >= 0.0, "train.weight_decay", "must be >= 0");
  require(train.timesteps >= 2, "train.timesteps", "must be >= 2");
  require(train.checkpoint_every >= 0, "train.checkpoint_every", "must be >= 0");
  require(sample.steps >= 1 && sample.steps <= train.timesteps, "sample.steps", "must lie in [1, train.timesteps]");
  require(sample.batch_size >= 1, "sample.batch_size", "must be >= 1");
  require(ddpo.updates >= 0, "ddpo.updates", "must be >= 0");
  require(ddpo.batch_size >= 2, "ddpo.batch_size", "must be >= 2");
  require(ddpo.sampling_steps >= 1 && ddpo.sampling_steps <= train.timesteps, "ddpo.sampling_steps",
          "must lie in [1, train.timesteps]");
  require(ddpo.learning_rate > 0.0, "ddpo.learning_rate", "must be positive");
  require(ddpo.k >= 1 && ddpo.k < ddpo.batch_size, "ddpo.k", "must lie in [1, ddpo.batch_size)");
  require(ddpo.omega >= 0.0, "ddpo.omega", "must be >= 0");
  require(ddpo.clip_eps > 0.0 && ddpo.clip_eps < 1.0, "ddpo.clip_eps", "must lie in (0, 1)");
  require(ddpo.reference_count >= 2, "ddpo.reference_count", "must be >= 2");
  require(eval.canny_low >= 0.0 && eval.canny_low < eval.canny_high, "eval.canny_low", "must satisfy 0 <= low < high");
  require(eval.canny_high <= 255.0, "eval.canny_high", "must be <= 255");
  require(eval.padding >= 0.0, "eval.padding", "must be >= 0");
  require(eval.out_size >= 11, "eval.out_size", "must be >= 11");
  require(eval.mmd_permutations >= 2, "eval.mmd_permutations", "must be >= 2");
}

SceneSpec RunConfig::scene_spec() const {
  SceneSpec s;
  s.canvas_size = dataset.canvas_size;
  s.num_objects = {dataset.min_objects, dataset.max_objects};
  s.background = dataset.background;
  for (Category& c : s.categories) {
    c.min_size *= dataset.size_scale;
    c.max_size *= dataset.size_scale;
  }
  return s;
}

DenoiserConfig RunConfig::denoiser_config() const {
  DenoiserConfig c;
  c.canvas_size = dataset.canvas_size;
  c.base_width = model.base_width;
  c.embed_dim = model.embed_dim;
  c.groups = model.groups;
  c.num_categories = static_cast<int>(SceneSpec::default_categories().size());
  return c;
}

TrainOptions RunConfig::train_options() const {
  TrainOptions o;
  o.batch_size = train.batch_size;
  o.iterations = train.iterations;
  o.use_esgm = train.use_esgm;
  o.use_dcloss = train.use_dcloss;
  o.consistency = train.consistency;
  o.seed = seed;
  return o;
}

AdamWConfig RunConfig::train_optimizer() const {
  AdamWConfig a;
  a.learning_rate = train.learning_rate;
  a.weight_decay = train.weight_decay;
  return a;
}

AdamWConfig RunConfig::ddpo_optimizer() const {
  AdamWConfig a;
  a.learning_rate = ddpo.learning_rate;
  a.weight_decay = train.weight_decay;
  return a;
}

SampleOptions RunConfig::sample_options() const {
  SampleOptions o;
  o.steps = sample.steps;
  o.sampler = sample.sampler;
  return o;
}

DdpoOptions RunConfig::ddpo_options() const {
  DdpoOptions o;
  o.batch_size = ddpo.batch_size;
  o.sampling_steps = ddpo.sampling_steps;
  o.gradient.clip_eps = ddpo.clip_eps;
  o.gradient.normalize_advantages = ddpo.normalize_advantages;
  o.reward.k = ddpo.k;
  o.reward.omega = ddpo.omega;
  o.toy_reward = ddpo.toy_reward;
  return o;
}

EvalOptions RunConfig::eval_options() const {
  EvalOptions o;
  o.padding_frac = eval.padding;
  o.out_size = eval.out_size;
  o.canny.low = eval.canny_low;
  o.canny.high = eval.canny_high;
  o.reference = eval.reference;
  return o;
}

std::string RunConfig::to_text() const {
  RunConfig copy = *this;
  std::ostringstream os;
  std::string section;
  for (const Field& f : fields(copy)) {
    const auto dot = f.path.find('.');
    const std::string sec = dot == std::string::npos ? "" : f.path.substr(0, dot);
    const std::string key = dot == std::string::npos ? f.path : f.path.substr(dot + 1);
    if (sec != section) {
      os << "\n[" << sec << "]\n";
      section = sec;
    }
    os << key << " = " << f.get() << "\n";
  }
  return os.str();
}

std::string RunConfig::hash() const { return sha256_hex(to_text()); }

RunConfig parse_config(const std::string& text, const std::string& origin) {
  RunConfig config;
  std::vector<Field> table = fields(config);
  std::istringstream is(text);
  std::string raw, section;
  std::set<std::string> seen;
  int line_no = 0;
  while (std::getline(is, raw)) {
    ++line_no;
    const std::string where = origin + ":" + std::to_string(line_no);
    std::string line = raw;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + ": malformed section header '" + line + "'");
      section = trim(line.substr(1, line.size() - 2));
      const bool known = std::any_of(table.begin(), table.end(),
                                     [&](const Field& f) { return f.path.rfind(section + ".", 0) == 0; });
      if (!known) throw ConfigError(where + ": unknown config section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value, got '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const std::string path = section.empty() ? key : section + "." + key;
    auto it = std::find_if(table.begin(), table.end(), [&](const Field& f) { return f.path == path; });
    if (it == table.end()) throw ConfigError(where + ": unknown config key " + path);
    if (!seen.insert(path).second) throw ConfigError(where + ": duplicate config key " + path);
    try {
      it->set(value);
    } catch (const std::exception& e) {
      throw ConfigError(where + ": invalid config value for " + path + ": '" + value + "' (" + e.what() + ")");
    }
  }
  config.validate();
  return config;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return parse_config(os.str(), path.string());
}

std::vector<std::string> config_keys() {
  RunConfig c;
  std::vector<std::string> out;
  for (const Field& f : fields(c)) out.push_back(f.path);
  return out;
}

}  // namespace ofdiff
