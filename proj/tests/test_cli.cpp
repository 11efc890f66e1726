#include "ofdiff/checkpoint.hpp"
#include "ofdiff/commands.hpp"
#include "ofdiff/config.hpp"

#include "test_support.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>
#include <set>

using namespace ofdiff;
using namespace ofdiff::testing;
namespace fs = std::filesystem;

namespace {

const char* kTinyConfig = R"(seed = 5
[dataset]
canvas_size = 16
train_count = 12
val_count = 6
max_objects = 2
[model]
base_width = 8
embed_dim = 8
groups = 4
[train]
batch_size = 4
iterations = 4
timesteps = 40
checkpoint_every = 2
[sample]
steps = 3
batch_size = 4
[ddpo]
updates = 2
batch_size = 4
sampling_steps = 3
k = 2
reference_count = 4
[eval]
mmd_permutations = 20
)";

RunConfig tiny() { return parse_config(kTinyConfig, "tiny"); }

std::vector<nlohmann::json> read_jsonl(const fs::path& p) {
  std::vector<nlohmann::json> out;
  std::ifstream in(p);
  for (std::string line; std::getline(in, line);) {
    if (!line.empty()) out.push_back(nlohmann::json::parse(line));
  }
  return out;
}

std::string config_error(const std::string& text) {
  try {
    parse_config(text, "t.cfg");
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Config, DefaultsRoundTripAndHash) {
  const RunConfig d;
  EXPECT_NO_THROW(d.validate());
  EXPECT_EQ(d.train.timesteps, 200);
  EXPECT_EQ(d.sample.steps, 50);
  EXPECT_EQ(parse_config(d.to_text()).to_text(), d.to_text());
  const RunConfig t = tiny();
  EXPECT_EQ(parse_config(t.to_text()).hash(), t.hash());
  EXPECT_NE(t.hash(), d.hash());
  EXPECT_EQ(t.hash().size(), 64u);
  EXPECT_EQ(t.dataset.canvas_size, 16);
  EXPECT_EQ(t.ddpo.k, 2);
  for (const std::string& key : config_keys()) EXPECT_NE(d.to_text().find(key.substr(key.find('.') + 1) + " = "), std::string::npos) << key;
}

TEST(Config, UnknownKeysNameTheirPath) {
  EXPECT_NE(config_error("[train]\nbatchsize = 3\n").find("train.batchsize"), std::string::npos);
  EXPECT_NE(config_error("[train]\nbatchsize = 3\n").find("t.cfg:2"), std::string::npos);
  EXPECT_NE(config_error("bogus = 1\n").find("bogus"), std::string::npos);
  EXPECT_NE(config_error("[nosuch]\n").find("nosuch"), std::string::npos);
  EXPECT_NE(config_error("[model]\ngroups = 4\ngroups = 4\n").find("model.groups"), std::string::npos);
  EXPECT_NE(config_error("[model]\ngroups = four\n").find("model.groups"), std::string::npos);
  EXPECT_NE(config_error("[dataset]\ncanvas_size = 18\n").find("dataset.canvas_size"), std::string::npos);
  EXPECT_NE(config_error("[train]\nuse_esgm = maybe\n").find("train.use_esgm"), std::string::npos);
  EXPECT_EQ(config_error("# comment only\n\n[train]  # trailing\nbatch_size = 2 # two\n"), "");
}

TEST(Checkpoint, ByteIdenticalRoundTrip) {
  const RunConfig c = tiny();
  Denoiser<float> model(c.denoiser_config(), 3);
  AdamW<float> opt(model.parameters(), c.train_optimizer());
  std::vector<Tensor<float>> grads;
  for (auto* p : model.parameters()) grads.push_back(Tensor<float>(p->value.shape(), 0.01f));
  opt.step(grads);
  const TrainState state{1, 4, 0};
  TempDir dir("ckpt");
  save_checkpoint(dir / "a.ckpt", make_checkpoint(model, &opt, state, c));
  const Checkpoint loaded = load_checkpoint(dir / "a.ckpt");
  save_checkpoint(dir / "b.ckpt", loaded);
  EXPECT_EQ(read_bytes(dir / "a.ckpt"), read_bytes(dir / "b.ckpt"));

  EXPECT_EQ(checkpoint_config(loaded).hash(), c.hash());
  EXPECT_EQ(checkpoint_train_state(loaded).n, 1);
  EXPECT_EQ(checkpoint_train_state(loaded).N, 4);
  Denoiser<float> other(c.denoiser_config(), 99);
  AdamW<float> other_opt(other.parameters(), c.train_optimizer());
  restore_parameters(loaded, other);
  restore_optimizer(loaded, other, other_opt);
  save_checkpoint(dir / "c.ckpt", make_checkpoint(other, &other_opt, state, c));
  EXPECT_EQ(read_bytes(dir / "a.ckpt"), read_bytes(dir / "c.ckpt"));

  auto bytes = read_bytes(dir / "a.ckpt");
  bytes.resize(bytes.size() - 3);
  EXPECT_THROW(decode_checkpoint(bytes), CheckpointError);
}

TEST(Checkpoint, ConfigHashIsVerified) {
  const RunConfig c = tiny();
  Denoiser<float> model(c.denoiser_config(), 3);
  Checkpoint ck = make_checkpoint<float>(model, nullptr, TrainState{}, c);
  ck.meta["config_hash"] = std::string(64, '0');
  EXPECT_THROW(checkpoint_config(ck), CheckpointError);
}

TEST(Commands, GenDataDeterministicAndRefusesOverwrite) {
  TempDir a("gen_a"), b("gen_b");
  const RunConfig c = tiny();
  const GenDataResult ra = cmd_gen_data(c, a / "d");
  const GenDataResult rb = cmd_gen_data(c, b / "d");
  EXPECT_EQ(ra.train.digest, rb.train.digest);
  EXPECT_EQ(ra.val.digest, rb.val.digest);
  EXPECT_EQ(ra.train.count, 12u);
  EXPECT_EQ(ra.val.count, 6u);
  for (const auto& id : ra.val.scene_ids) {
    EXPECT_EQ(std::find(ra.train.scene_ids.begin(), ra.train.scene_ids.end(), id), ra.train.scene_ids.end());
  }
  EXPECT_THROW(cmd_gen_data(c, a / "d"), CommandError);
  EXPECT_NO_THROW(cmd_gen_data(c, a / "d", true));
  EXPECT_TRUE(fs::exists(a / "d" / "run_manifest.jsonl"));

  RunConfig empty = c;
  empty.dataset.train_count = 0;
  empty.dataset.val_count = 0;
  const GenDataResult re = cmd_gen_data(empty, a / "e");
  EXPECT_EQ(re.train.count, 0u);
  EXPECT_TRUE(read_dataset(re.train).empty());
}

TEST(Commands, TrainLogsToggleKeysAndZeroIterations) {
  TempDir dir("train_toggle");
  RunConfig c = tiny();
  cmd_gen_data(c, dir / "data");

  RunConfig off = c;
  off.train.use_esgm = false;
  off.train.use_dcloss = false;
  off.train.iterations = 1;
  cmd_train(off, dir / "data", dir / "off");
  const auto log = read_jsonl(dir / "off" / "train_log.jsonl");
  ASSERT_EQ(log.size(), 1u);
  std::set<std::string> keys;
  for (auto it = log[0].begin(); it != log[0].end(); ++it) keys.insert(it.key());
  EXPECT_EQ(keys, (std::set<std::string>{"step", "epoch", "l_s", "l_m", "total"}));
  EXPECT_DOUBLE_EQ(log[0]["total"].get<double>(), log[0]["l_s"].get<double>() + log[0]["l_m"].get<double>());

  cmd_train(c, dir / "data", dir / "on", {false, 1});
  const auto on = read_jsonl(dir / "on" / "train_log.jsonl");
  ASSERT_EQ(on.size(), 1u);
  EXPECT_TRUE(on[0].contains("l_c"));

  RunConfig zero = c;
  zero.train.iterations = 0;
  const TrainResult r = cmd_train(zero, dir / "data", dir / "zero");
  EXPECT_EQ(r.state.n, 0);
  Denoiser<float> init(zero.denoiser_config(), zero.seed);
  Denoiser<float> loaded(zero.denoiser_config(), 1234);
  restore_parameters(load_checkpoint(r.checkpoint_path), loaded);
  const auto pi = init.parameters(), pl = loaded.parameters();
  for (std::size_t i = 0; i < pi.size(); ++i) EXPECT_TRUE((pi[i]->value.array() == pl[i]->value.array()).all());
}

TEST(Commands, ResumeMatchesUninterruptedRun) {
  TempDir dir("resume");
  const RunConfig c = tiny();
  cmd_gen_data(c, dir / "data");
  const TrainResult full = cmd_train(c, dir / "data", dir / "full");
  EXPECT_EQ(full.state.n, 4);
  const TrainResult part = cmd_train(c, dir / "data", dir / "part", {false, 1});
  EXPECT_EQ(part.state.n, 1);
  const TrainResult rest = cmd_train(c, dir / "data", dir / "part");
  EXPECT_EQ(rest.steps_run, 3);
  EXPECT_EQ(read_bytes(full.checkpoint_path), read_bytes(rest.checkpoint_path));
  EXPECT_EQ(read_text(dir / "full" / "train_log.jsonl"), read_text(dir / "part" / "train_log.jsonl"));

  RunConfig changed = c;
  changed.train.learning_rate = 5e-4;
  try {
    cmd_train(changed, dir / "data", dir / "part");
    FAIL();
  } catch (const std::exception& e) {
    EXPECT_NE(std::string(e.what()).find("refusing to resume"), std::string::npos);
  }
}

TEST(Commands, SampleDdpoAndEval) {
  TempDir dir("pipeline");
  RunConfig c = tiny();
  cmd_gen_data(c, dir / "data");
  const TrainResult tr = cmd_train(c, dir / "data", dir / "train");

  SampleCommandOptions so;
  so.random_layouts = 5;
  c.sample.sampler = Sampler::deterministic;
  const SampleCommandResult s1 = cmd_sample(c, tr.checkpoint_path, dir / "s1", so);
  const SampleCommandResult s2 = cmd_sample(c, tr.checkpoint_path, dir / "s2", so);
  EXPECT_EQ(s1.generated.size() + s1.skipped.size(), 5u);
  EXPECT_EQ(s1.digest, s2.digest);
  for (const auto& id : s1.generated) {
    EXPECT_TRUE(fs::exists(dir / "s1" / (id + ".ppm")));
    EXPECT_TRUE(fs::exists(dir / "s1" / "conditions" / (id + ".pgm")));
  }
  EXPECT_THROW(cmd_sample(c, tr.checkpoint_path, dir / "s1", so), CommandError);

  SampleCommandOptions from_val;
  from_val.layouts_file = dir / "data" / "val" / "layouts.jsonl";
  const SampleCommandResult sv = cmd_sample(c, tr.checkpoint_path, dir / "sv", from_val);
  EXPECT_EQ(sv.generated.size() + sv.skipped.size(), 6u);

  RunConfig none = c;
  none.ddpo.updates = 0;
  const DdpoCommandResult d0 = cmd_ddpo(none, tr.checkpoint_path, dir / "data", dir / "d0");
  EXPECT_EQ(read_bytes(d0.checkpoint_path), read_bytes(tr.checkpoint_path));
  EXPECT_TRUE(read_jsonl(dir / "d0" / "ddpo_log.jsonl").empty());

  RunConfig toy = c;
  toy.ddpo.toy_reward = true;
  const DdpoCommandResult d2 = cmd_ddpo(toy, tr.checkpoint_path, dir / "data", dir / "d2");
  const auto log = read_jsonl(dir / "d2" / "ddpo_log.jsonl");
  ASSERT_EQ(log.size(), 2u);
  for (const char* k : {"update", "mean_reward", "mean_ratio", "clipped_fraction", "kl"}) EXPECT_TRUE(log[0].contains(k)) << k;
  EXPECT_NO_THROW(cmd_sample(c, d2.checkpoint_path, dir / "sd", so));
  const DdpoCommandResult dk = cmd_ddpo(c, tr.checkpoint_path, dir / "data", dir / "dk");
  EXPECT_EQ(dk.updates.size(), 2u);

  const EvalCommandResult self = cmd_eval(c, dir / "data" / "val", dir / "data" / "val",
                                          dir / "data" / "val" / "layouts.jsonl", dir / "eval_self");
  ASSERT_TRUE(self.report.overall.has_value());
  const MetricSummary& o = *self.report.overall;
  EXPECT_GT(o.count, 0u);
  EXPECT_EQ(o.iou, 1.0);
  EXPECT_EQ(o.dice, 1.0);
  EXPECT_NEAR(o.ssim, 1.0, 1e-12);
  if (o.cd) {
    EXPECT_EQ(*o.cd, 0.0);
  }
  if (o.hd) {
    EXPECT_EQ(*o.hd, 0.0);
  }
  const auto report = nlohmann::json::parse(read_text(dir / "eval_self" / "report.json"));
  for (const char* k : {"rows", "overall", "per_category", "skipped", "empty_edge_count", "mmd"})
    EXPECT_TRUE(report.contains(k)) << k;
  const std::string table = read_text(dir / "eval_self" / "report.txt");
  const auto iou = table.find("IoU"), dice = table.find("DICE"), cd = table.find("CD"), hd = table.find("HD"),
             ssim = table.find("SSIM");
  EXPECT_TRUE(iou < dice && dice < cd && cd < hd && hd < ssim);

  const EvalCommandResult gen = cmd_eval(c, dir / "sv", dir / "data" / "val", dir / "sv" / "layouts.jsonl", dir / "eval_gen");
  EXPECT_EQ(gen.report.rows.empty(), sv.generated.empty());
}
