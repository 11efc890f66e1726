#pragma once

#include "ofdiff/ddpo.hpp"
#include "ofdiff/denoiser.hpp"
#include "ofdiff/diffusion.hpp"
#include "ofdiff/esgm.hpp"
#include "ofdiff/metrics.hpp"
#include "ofdiff/scene.hpp"

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace ofdiff {

/// Bad config text or value; the message names the offending key path.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DatasetSection {
  int canvas_size = 32;
  int train_count = 500;
  int val_count = 100;
  int min_objects = 1;
  int max_objects = 3;
  Background background = Background::gradient;
  /// Multiplies the default per-category size ranges.
  double size_scale = 1.0;
};

struct ModelSection {
  int base_width = 32;
  int embed_dim = 64;
  int groups = 8;
};

struct TrainSection {
  int batch_size = 16;
  std::int64_t iterations = 2000;
  double learning_rate = 1e-3;
  double weight_decay = 0.01;
  int timesteps = 200;
  bool use_esgm = true;
  bool use_dcloss = true;
  ConsistencyForm consistency = ConsistencyForm::shape_to_mix;
  /// 0 writes only the final checkpoint.
  std::int64_t checkpoint_every = 0;
};

struct SampleSection {
  int steps = 50;
  Sampler sampler = Sampler::ancestral;
  RotationPolicy rotation = RotationPolicy::uniform;
  int batch_size = 16;
};

struct DdpoSection {
  bool enabled = false;
  int updates = 50;
  int batch_size = 8;
  int sampling_steps = 10;
  double learning_rate = 1e-4;
  int k = 3;
  double omega = 1.0;
  double clip_eps = 0.2;
  bool normalize_advantages = true;
  bool toy_reward = false;
  /// Real images used for the reward reference.
  int reference_count = 256;
};

struct EvalSection {
  double canny_low = 100.0;
  double canny_high = 200.0;
  double padding = 0.2;
  int out_size = 64;
  ImageSource reference = ImageSource::image;
  int mmd_permutations = 200;
};

/// Whole-pipeline configuration. Text form:
///
///   seed = 7
///   [train]
///   batch_size = 16
///
/// '#' starts a comment. Every key has a default; unknown sections or keys
/// are rejected.
struct RunConfig {
  std::uint64_t seed = 0;
  DatasetSection dataset;
  ModelSection model;
  TrainSection train;
  SampleSection sample;
  DdpoSection ddpo;
  EvalSection eval;

  /// Throws ConfigError naming the key.
  void validate() const;

  SceneSpec scene_spec() const;
  DenoiserConfig denoiser_config() const;
  TrainOptions train_options() const;
  AdamWConfig train_optimizer() const;
  AdamWConfig ddpo_optimizer() const;
  SampleOptions sample_options() const;
  DdpoOptions ddpo_options() const;
  EvalOptions eval_options() const;

  /// Canonical text: every key, fixed order, round-trip exact.
  std::string to_text() const;
  /// SHA-256 of to_text().
  std::string hash() const;
};

RunConfig parse_config(const std::string& text, const std::string& origin = "<config>");
RunConfig load_config(const std::filesystem::path& path);

/// Documented keys as "section.key" (globals have no section).
std::vector<std::string> config_keys();

}  // namespace ofdiff
