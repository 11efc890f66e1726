#include "ofdiff/commands.hpp"

#include "CLI11.hpp"

#include <Eigen/Core>

#include <iostream>

namespace fs = std::filesystem;
using namespace ofdiff;

namespace {

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool force = false;
  bool deterministic = false;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config_path, "Config file (sectioned key = value)");
  app->add_option("--seed", c.seed, "Override the config seed");
  app->add_option("--out", c.out, "Output directory")->required();
  app->add_flag("--force", c.force, "Overwrite a non-empty output directory");
  app->add_flag("--deterministic", c.deterministic, "Single-threaded, bit-reproducible execution");
}

RunConfig resolve(const Common& c) {
  RunConfig config = c.config_path.empty() ? RunConfig{} : load_config(c.config_path);
  if (c.seed) config.seed = *c.seed;
  if (c.deterministic) Eigen::setNbThreads(1);
  return config;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Layout-to-image diffusion with shape conditions"};
  app.require_subcommand(1);

  Common gen_c, train_c, sample_c, ddpo_c, eval_c;
  std::string data_dir, checkpoint, layouts, pool, generated, reference;
  std::optional<int> random_layouts;
  bool toy_reward = false;

  CLI::App* gen = app.add_subcommand("gen-data", "Generate train/val toy datasets");
  add_common(gen, gen_c);

  CLI::App* train = app.add_subcommand("train", "Train the denoiser (resumes an existing checkpoint in --out)");
  add_common(train, train_c);
  train->add_option("data", data_dir, "Dataset directory")->required();

  CLI::App* samp = app.add_subcommand("sample", "Render images for layouts");
  add_common(samp, sample_c);
  samp->add_option("checkpoint", checkpoint, "Checkpoint file")->required();
  samp->add_option("layouts", layouts, "Layouts JSONL");
  samp->add_option("--random-layouts", random_layouts, "Sample N random layouts instead");
  samp->add_option("--pool", pool, "Mask pool directory (default: next to the checkpoint)");

  CLI::App* ddpo = app.add_subcommand("ddpo", "Policy-gradient fine-tuning of the shape branch");
  add_common(ddpo, ddpo_c);
  ddpo->add_option("checkpoint", checkpoint, "Checkpoint file")->required();
  ddpo->add_option("data", data_dir, "Dataset directory")->required();
  ddpo->add_flag("--toy-reward", toy_reward, "Use the brightness reward");

  CLI::App* eval = app.add_subcommand("eval", "Shape fidelity and MMD report");
  add_common(eval, eval_c);
  eval->add_option("generated", generated, "Generated images directory")->required();
  eval->add_option("reference", reference, "Reference directory")->required();
  eval->add_option("layouts", layouts, "Layouts JSONL")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      cmd_gen_data(resolve(gen_c), gen_c.out, gen_c.force);
    } else if (train->parsed()) {
      cmd_train(resolve(train_c), data_dir, train_c.out, {train_c.force, std::nullopt});
    } else if (samp->parsed()) {
      SampleCommandOptions o;
      if (!layouts.empty()) o.layouts_file = layouts;
      o.random_layouts = random_layouts;
      if (!pool.empty()) o.pool_dir = pool;
      o.force = sample_c.force;
      cmd_sample(resolve(sample_c), checkpoint, sample_c.out, o);
    } else if (ddpo->parsed()) {
      RunConfig config = resolve(ddpo_c);
      if (toy_reward) config.ddpo.toy_reward = true;
      cmd_ddpo(config, checkpoint, data_dir, ddpo_c.out, ddpo_c.force);
    } else if (eval->parsed()) {
      const EvalCommandResult r = cmd_eval(resolve(eval_c), generated, reference, layouts, eval_c.out, eval_c.force);
      std::cout << read_text(fs::path(eval_c.out) / "report.txt");
    }
  } catch (const std::exception& e) {
    log_event(LogLevel::error, "failed", {{"message", e.what()}});
    return 1;
  }
  return 0;
}
