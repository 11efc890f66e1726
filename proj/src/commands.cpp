#include "ofdiff/commands.hpp"

#include "ofdiff/esgm.hpp"
#include "ofdiff/random.hpp"

#include <Eigen/Core>

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>
#include <sstream>

namespace ofdiff {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr const char* kCheckpointFile = "checkpoint.ckpt";

std::string timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

json losses_json(std::int64_t step, std::int64_t epoch, const LossBreakdown& l) {
  json j = {{"step", step}, {"epoch", epoch}, {"l_s", l.l_s}, {"l_m", l.l_m}};
  if (l.l_c) j["l_c"] = *l.l_c;
  j["total"] = l.total;
  return j;
}

void append_line(const fs::path& path, const std::string& line) {
  std::ofstream out(path, std::ios::app | std::ios::binary);
  if (!out) throw CommandError("cannot append to " + path.string());
  out << line << "\n";
}

// Keeps the first `lines` lines of a log (drops records past a resumed checkpoint).
void truncate_lines(const fs::path& path, std::int64_t lines) {
  if (!fs::exists(path)) return;
  std::istringstream in(read_text(path));
  std::string out, line;
  for (std::int64_t i = 0; i < lines && std::getline(in, line); ++i) out += line + "\n";
  write_text(path, out);
}

ShapeMask condition_for(const SceneSample& s, bool use_esgm) {
  return use_esgm ? training_shape_condition(s) : layout_box_condition(s.layout, static_cast<int>(s.image.dim(1)));
}

}  // namespace

LogLevel log_level_from_env() {
  const char* v = std::getenv("OFDIFF_LOG");
  if (!v) return LogLevel::info;
  const std::string s(v);
  if (s == "error") return LogLevel::error;
  if (s == "debug") return LogLevel::debug;
  return LogLevel::info;
}

void log_event(LogLevel level, const std::string& event, const json& fields) {
  static const LogLevel threshold = log_level_from_env();
  if (static_cast<int>(level) > static_cast<int>(threshold)) return;
  static const char* names[] = {"error", "info", "debug"};
  json j = {{"level", names[static_cast<int>(level)]}, {"event", event}};
  for (auto it = fields.begin(); it != fields.end(); ++it) j[it.key()] = it.value();
  std::cerr << j.dump() << std::endl;
}

void prepare_output_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir)) throw CommandError("output path " + dir.string() + " is not a directory");
    if (!fs::is_empty(dir)) {
      if (!force) throw CommandError("output directory " + dir.string() + " is not empty (use --force to overwrite)");
      fs::remove_all(dir);
    }
  }
  fs::create_directories(dir);
}

void append_run_manifest(const fs::path& dir, const json& record) {
  append_line(dir / "run_manifest.jsonl", record.dump());
}

DatasetManifest locate_dataset(const fs::path& dir, const std::string& split) {
  if (fs::exists(dir / "manifest.json")) return load_manifest(dir);
  if (fs::exists(dir / split / "manifest.json")) return load_manifest(dir / split);
  throw CommandError("no dataset manifest under " + dir.string());
}

GenDataResult cmd_gen_data(const RunConfig& config, const fs::path& out_dir, bool force) {
  config.validate();
  const std::string started = timestamp();
  prepare_output_dir(out_dir, force);
  const SceneSpec spec = config.scene_spec();
  auto build = [&](std::uint64_t first, int count, const fs::path& dir) {
    std::vector<SceneSample> samples;
    samples.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
      const Layout layout = generate_layout(spec, config.seed, first + static_cast<std::uint64_t>(i));
      samples.push_back(render_scene(layout, spec, config.seed));
    }
    return write_dataset(samples, spec, config.seed, dir);
  };
  GenDataResult r;
  r.train = build(0, config.dataset.train_count, out_dir / "train");
  r.val = build(static_cast<std::uint64_t>(config.dataset.train_count), config.dataset.val_count, out_dir / "val");
  log_event(LogLevel::info, "gen_data",
            {{"train_count", r.train.count}, {"val_count", r.val.count}, {"train_digest", r.train.digest},
             {"val_digest", r.val.digest}});
  append_run_manifest(out_dir, {{"command", "gen-data"},
                                {"config_hash", config.hash()},
                                {"seed", config.seed},
                                {"started", started},
                                {"finished", timestamp()},
                                {"outputs", {{"train", r.train.digest}, {"val", r.val.digest}}}});
  return r;
}

TrainResult cmd_train(const RunConfig& config, const fs::path& data_dir, const fs::path& out_dir,
                      const TrainCommandOptions& options) {
  config.validate();
  const std::string started = timestamp();
  const fs::path ckpt_path = out_dir / kCheckpointFile;
  const fs::path log_path = out_dir / "train_log.jsonl";
  const bool resume = !options.force && fs::exists(ckpt_path);
  std::optional<Checkpoint> previous;
  if (resume) {
    previous = load_checkpoint(ckpt_path);
    const std::string recorded = previous->meta.count("config_hash") ? previous->meta.at("config_hash") : "";
    if (recorded != config.hash()) {
      throw CommandError("refusing to resume " + ckpt_path.string() + ": config hash " + config.hash() +
                         " does not match checkpoint " + recorded);
    }
  } else {
    prepare_output_dir(out_dir, options.force);
  }

  const DatasetManifest manifest = locate_dataset(data_dir, "train");
  const std::vector<SceneSample> samples = read_dataset(manifest);
  if (samples.empty() && config.train.iterations > 0) throw CommandError("training dataset is empty");
  if (!resume && !samples.empty()) save_mask_pool(build_mask_pool(manifest), out_dir / "pool");

  Denoiser<float> model(config.denoiser_config(), config.seed);
  AdamW<float> optimizer(model.parameters(), config.train_optimizer());
  TrainState state{0, config.train.iterations, 0};
  if (previous) {
    restore_parameters(*previous, model);
    restore_optimizer(*previous, model, optimizer);
    state = checkpoint_train_state(*previous);
    truncate_lines(log_path, state.n);
    log_event(LogLevel::info, "train_resume", {{"step", state.n}});
  }
  const NoiseSchedule schedule = make_schedule(config.train.timesteps);
  const TrainOptions topts = config.train_options();
  auto save = [&] { save_checkpoint(ckpt_path, make_checkpoint(model, &optimizer, state, config)); };

  TrainResult result;
  const std::int64_t stop = options.stop_after ? std::min(*options.stop_after, state.N) : state.N;
  while (state.n < stop) {
    const std::vector<std::size_t> idx =
        batch_indices(samples.size(), config.train.batch_size, state.n, config.seed, &state.epoch);
    const TrainBatch<float> batch = make_train_batch<float>(samples, idx, topts.use_esgm);
    const std::int64_t step = state.n;
    const StepResult<float> r = training_step(model, optimizer, batch, state, schedule, topts);
    append_line(log_path, losses_json(step, state.epoch, r.losses).dump());
    log_event(LogLevel::debug, "train_step", losses_json(step, state.epoch, r.losses));
    ++result.steps_run;
    if (config.train.checkpoint_every > 0 && state.n % config.train.checkpoint_every == 0 && state.n < stop) save();
  }
  if (result.steps_run == 0 && state.n == 0 && !fs::exists(log_path)) write_text(log_path, "");
  save();
  result.checkpoint_path = ckpt_path;
  result.state = state;
  log_event(LogLevel::info, "train_done", {{"step", state.n}, {"of", state.N}});
  append_run_manifest(out_dir, {{"command", "train"},
                                {"config_hash", config.hash()},
                                {"seed", config.seed},
                                {"started", started},
                                {"finished", timestamp()},
                                {"inputs", {{"dataset", manifest.digest}}},
                                {"outputs", {{"checkpoint", sha256_file(ckpt_path)}}},
                                {"metrics", {{"step", state.n}, {"resumed", resume}}}});
  return result;
}

SampleCommandResult cmd_sample(const RunConfig& config, const fs::path& checkpoint, const fs::path& out_dir,
                               const SampleCommandOptions& options) {
  config.validate();
  if (options.layouts_file.has_value() == options.random_layouts.has_value()) {
    throw CommandError("sample needs exactly one of a layouts file or --random-layouts");
  }
  const std::string started = timestamp();
  const Checkpoint ck = load_checkpoint(checkpoint);
  const RunConfig trained = checkpoint_config(ck);
  const fs::path pool_dir = options.pool_dir.value_or(checkpoint.parent_path() / "pool");
  const MaskPool pool = load_mask_pool(pool_dir);
  const int canvas = trained.dataset.canvas_size;

  std::vector<Layout> layouts;
  if (options.layouts_file) {
    layouts = read_layouts(*options.layouts_file);
  } else {
    if (*options.random_layouts < 0) throw CommandError("--random-layouts must be >= 0");
    const SceneSpec spec = trained.scene_spec();
    for (int i = 0; i < *options.random_layouts; ++i) {
      layouts.push_back(generate_layout(spec, config.seed, static_cast<std::uint64_t>(i)));
    }
  }
  prepare_output_dir(out_dir, options.force);
  fs::create_directories(out_dir / "conditions");

  Denoiser<float> model(trained.denoiser_config(), trained.seed);
  restore_parameters(ck, model);
  const NoiseSchedule schedule = make_schedule(trained.train.timesteps);
  const SampleOptions sopts = config.sample_options();

  SampleCommandResult result;
  std::vector<Layout> kept;
  std::vector<ShapeMask> conditions;
  for (const Layout& layout : layouts) {
    try {
      ShapeMask m = trained.train.use_esgm ? sample_shape_condition(layout, pool, config.seed, canvas, config.sample.rotation)
                                           : layout_box_condition(layout, canvas);
      kept.push_back(layout);
      conditions.push_back(std::move(m));
    } catch (const PoolMiss& e) {
      result.skipped.push_back({layout.scene_id, e.what()});
      log_event(LogLevel::info, "sample_skip", {{"scene_id", layout.scene_id}, {"reason", e.what()}});
    }
  }
  std::vector<std::string> files;
  const std::size_t chunk = static_cast<std::size_t>(config.sample.batch_size);
  for (std::size_t begin = 0, c = 0; begin < kept.size(); begin += chunk, ++c) {
    const std::size_t end = std::min(kept.size(), begin + chunk);
    std::vector<std::vector<int>> cats;
    for (std::size_t i = begin; i < end; ++i) cats.push_back(kept[i].category_ids);
    const std::uint64_t seed = Rng(config.seed, {stream_id("sample-chunk"), c}).next_u64();
    const SampleResult<float> r =
        sample(SamplingView<float>(model), std::span<const ShapeMask>(conditions).subspan(begin, end - begin), cats,
               schedule, sopts, seed);
    const Index s = r.images.dim(2);
    for (std::size_t i = begin; i < end; ++i) {
      Tensor<double> img({3, s, s});
      for (Index ch = 0; ch < 3; ++ch) {
        for (Index y = 0; y < s; ++y) {
          for (Index x = 0; x < s; ++x) img.at(ch, y, x) = r.images.at(static_cast<Index>(i - begin), ch, y, x);
        }
      }
      const std::string& id = kept[i].scene_id;
      write_ppm(out_dir / (id + ".ppm"), img);
      write_pgm(out_dir / "conditions" / (id + ".pgm"), conditions[i].pixels);
      files.push_back(id + ".ppm");
      files.push_back("conditions/" + id + ".pgm");
      result.generated.push_back(id);
    }
    log_event(LogLevel::debug, "sample_chunk", {{"chunk", c}, {"count", end - begin}});
  }
  write_layouts(out_dir / "layouts.jsonl", kept);
  files.push_back("layouts.jsonl");
  result.digest = tree_digest(out_dir, files);
  json skipped = json::array();
  for (const SkippedLayout& s : result.skipped) skipped.push_back({{"scene_id", s.scene_id}, {"reason", s.reason}});
  std::sort(files.begin(), files.end());
  write_text(out_dir / "manifest.json", json{{"count", result.generated.size()},
                                             {"seed", config.seed},
                                             {"sampler", to_string(sopts.sampler)},
                                             {"steps", sopts.steps},
                                             {"digest", result.digest},
                                             {"skipped", skipped},
                                             {"files", files}}
                                                .dump(2) +
                                            "\n");
  log_event(LogLevel::info, "sample_done", {{"count", result.generated.size()}, {"skipped", result.skipped.size()}});
  append_run_manifest(out_dir, {{"command", "sample"},
                                {"config_hash", config.hash()},
                                {"seed", config.seed},
                                {"started", started},
                                {"finished", timestamp()},
                                {"inputs", {{"checkpoint", sha256_file(checkpoint)}}},
                                {"outputs", {{"samples", result.digest}}}});
  return result;
}

DdpoCommandResult cmd_ddpo(const RunConfig& config, const fs::path& checkpoint, const fs::path& data_dir,
                           const fs::path& out_dir, bool force) {
  config.validate();
  const std::string started = timestamp();
  const Checkpoint ck = load_checkpoint(checkpoint);
  const RunConfig trained = checkpoint_config(ck);
  const DatasetManifest train_manifest = locate_dataset(data_dir, "train");
  const std::vector<SceneSample> train = read_dataset(train_manifest);
  if (train.empty()) throw CommandError("ddpo needs a non-empty training dataset");
  prepare_output_dir(out_dir, force);

  DdpoCommandResult result;
  result.checkpoint_path = out_dir / kCheckpointFile;
  const fs::path log_path = out_dir / "ddpo_log.jsonl";
  write_text(log_path, "");
  const DdpoOptions dopts = config.ddpo_options();

  std::optional<RealReference> reference;
  if (!dopts.toy_reward) {
    DatasetManifest ref_manifest = train_manifest;
    if (fs::exists(data_dir / "val" / "manifest.json")) ref_manifest = load_manifest(data_dir / "val");
    std::vector<SceneSample> ref_samples = read_dataset(ref_manifest);
    if (ref_samples.size() < 2) ref_samples = train;
    std::vector<Tensor<double>> images;
    for (std::size_t i = 0; i < ref_samples.size() && static_cast<int>(i) < config.ddpo.reference_count; ++i) {
      images.push_back(ref_samples[i].image);
    }
    reference = make_reference(images);
  }

  Denoiser<float> model(trained.denoiser_config(), trained.seed);
  restore_parameters(ck, model);
  const NoiseSchedule schedule = make_schedule(trained.train.timesteps);
  AdamW<float> optimizer(SamplingView<float>(model).parameters(), config.ddpo_optimizer());

  for (int u = 0; u < config.ddpo.updates; ++u) {
    Rng pick(config.seed, {stream_id("ddpo-batch"), static_cast<std::uint64_t>(u)});
    std::vector<ShapeMask> conditions;
    std::vector<std::vector<int>> cats;
    for (int b = 0; b < dopts.batch_size; ++b) {
      const SceneSample& s = train[pick.uniform_int(train.size())];
      conditions.push_back(condition_for(s, trained.train.use_esgm));
      cats.push_back(s.layout.category_ids);
    }
    const DdpoUpdateStats st = ddpo_update(model, optimizer, conditions, cats, schedule,
                                           reference ? &*reference : nullptr, dopts, config.seed, u);
    const json line = {{"update", st.update},
                       {"mean_reward", st.mean_reward},
                       {"mean_ratio", st.mean_ratio},
                       {"clipped_fraction", st.clipped_fraction},
                       {"kl", st.kl}};
    append_line(log_path, line.dump());
    log_event(LogLevel::info, "ddpo_update", line);
    result.updates.push_back(st);
  }

  if (config.ddpo.updates == 0) {
    fs::copy_file(checkpoint, result.checkpoint_path, fs::copy_options::overwrite_existing);
  } else {
    Checkpoint out = make_checkpoint<float>(model, nullptr, checkpoint_train_state(ck), trained);
    out.meta["ddpo_updates"] = std::to_string(config.ddpo.updates);
    out.meta["ddpo_config_hash"] = config.hash();
    save_checkpoint(result.checkpoint_path, out);
  }
  if (fs::exists(checkpoint.parent_path() / "pool") && !fs::exists(out_dir / "pool")) {
    fs::copy(checkpoint.parent_path() / "pool", out_dir / "pool", fs::copy_options::recursive);
  }
  json metrics = json::object();
  if (!result.updates.empty()) {
    metrics = {{"first_mean_reward", result.updates.front().mean_reward},
               {"last_mean_reward", result.updates.back().mean_reward}};
  }
  append_run_manifest(out_dir, {{"command", "ddpo"},
                                {"config_hash", config.hash()},
                                {"seed", config.seed},
                                {"started", started},
                                {"finished", timestamp()},
                                {"inputs", {{"checkpoint", sha256_file(checkpoint)}, {"dataset", train_manifest.digest}}},
                                {"outputs", {{"checkpoint", sha256_file(result.checkpoint_path)}}},
                                {"metrics", metrics}});
  return result;
}

EvalCommandResult cmd_eval(const RunConfig& config, const fs::path& generated_dir, const fs::path& reference_dir,
                           const fs::path& layouts_file, const fs::path& out_dir, bool force) {
  config.validate();
  const std::string started = timestamp();
  const std::vector<Layout> layouts = read_layouts(layouts_file);
  prepare_output_dir(out_dir, force);
  const EvalOptions eopts = config.eval_options();

  EvalCommandResult result;
  result.report = evaluate_pairs(generated_dir, reference_dir, layouts, eopts);

  std::vector<Eigen::VectorXd> gen_features, ref_features;
  for (const Layout& layout : layouts) {
    const auto g = find_scene_image(generated_dir, layout.scene_id, ImageSource::image);
    const auto r = find_scene_image(reference_dir, layout.scene_id, ImageSource::image);
    if (!g || !r) continue;
    gen_features.push_back(reward_features(read_pnm_image(*g)));
    ref_features.push_back(reward_features(read_pnm_image(*r)));
  }
  if (gen_features.size() >= 2) {
    result.mmd = mmd_permutation_test(gen_features, ref_features, config.eval.mmd_permutations, config.seed);
  }

  json report = json::parse(result.report.to_json());
  report["mmd"] = result.mmd ? json{{"mmd2", result.mmd->mmd2},
                                    {"bandwidth", result.mmd->bandwidth},
                                    {"standard_error", result.mmd->standard_error},
                                    {"p_value", result.mmd->p_value},
                                    {"pairs", gen_features.size()}}
                             : json(nullptr);
  write_text(out_dir / "report.json", report.dump(2) + "\n");
  std::string table = result.report.to_table();
  if (result.mmd) {
    char line[128];
    std::snprintf(line, sizeof(line), "MMD2 %.6f (se %.6f, p %.4f, n %zu)\n", result.mmd->mmd2,
                  result.mmd->standard_error, result.mmd->p_value, gen_features.size());
    table += line;
  }
  write_text(out_dir / "report.txt", table);

  json summary = json::object();
  if (result.report.overall) summary = report["overall"];
  log_event(LogLevel::info, "eval_done",
            {{"instances", result.report.instance_count()}, {"skipped", result.report.skipped.size()}});
  append_run_manifest(out_dir, {{"command", "eval"},
                                {"config_hash", config.hash()},
                                {"seed", config.seed},
                                {"started", started},
                                {"finished", timestamp()},
                                {"outputs", {{"report", sha256_file(out_dir / "report.json")}}},
                                {"metrics", summary}});
  return result;
}

}  // namespace ofdiff
