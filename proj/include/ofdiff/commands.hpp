#pragma once

#include "ofdiff/checkpoint.hpp"
#include "ofdiff/config.hpp"
#include "ofdiff/dataset.hpp"
#include "ofdiff/ddpo.hpp"
#include "ofdiff/metrics.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace ofdiff {

class CommandError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class LogLevel { error = 0, info = 1, debug = 2 };

/// From OFDIFF_LOG (error, info or debug); info when unset.
LogLevel log_level_from_env();

/// One JSON object per line on stderr: {"level", "event", ...fields}.
void log_event(LogLevel level, const std::string& event, const nlohmann::json& fields = nlohmann::json::object());

/// Creates `dir`; a non-empty existing directory is wiped with `force` and
/// refused otherwise.
void prepare_output_dir(const std::filesystem::path& dir, bool force);

/// Appends one record to <dir>/run_manifest.jsonl.
void append_run_manifest(const std::filesystem::path& dir, const nlohmann::json& record);

/// Dataset at `dir`, or at `dir`/<split> when `dir` holds splits.
DatasetManifest locate_dataset(const std::filesystem::path& dir, const std::string& split = "train");

struct GenDataResult {
  DatasetManifest train;
  DatasetManifest val;
};

/// <out>/train and <out>/val. Val scenes continue the index sequence so ids
/// never collide with train.
GenDataResult cmd_gen_data(const RunConfig& config, const std::filesystem::path& out_dir, bool force = false);

struct TrainCommandOptions {
  bool force = false;
  /// Stop (and checkpoint) once this many iterations are done.
  std::optional<std::int64_t> stop_after;
};

struct TrainResult {
  std::filesystem::path checkpoint_path;
  TrainState state;
  std::int64_t steps_run = 0;
};

/// Writes <out>/checkpoint.ckpt, <out>/train_log.jsonl and <out>/pool. An
/// existing checkpoint in <out> is resumed when its config hash matches.
TrainResult cmd_train(const RunConfig& config, const std::filesystem::path& data_dir,
                      const std::filesystem::path& out_dir, const TrainCommandOptions& options = {});

struct SampleCommandOptions {
  std::optional<std::filesystem::path> layouts_file;
  std::optional<int> random_layouts;
  /// Defaults to <checkpoint dir>/pool.
  std::optional<std::filesystem::path> pool_dir;
  bool force = false;
};

struct SkippedLayout {
  std::string scene_id;
  std::string reason;
};

struct SampleCommandResult {
  std::vector<std::string> generated;
  std::vector<SkippedLayout> skipped;
  std::string digest;
};

/// <out>/<id>.ppm, <out>/conditions/<id>.pgm, <out>/layouts.jsonl and
/// <out>/manifest.json. Model and schedule come from the checkpoint; the
/// sampling section and seed from `config`.
SampleCommandResult cmd_sample(const RunConfig& config, const std::filesystem::path& checkpoint,
                               const std::filesystem::path& out_dir, const SampleCommandOptions& options);

struct DdpoCommandResult {
  std::filesystem::path checkpoint_path;
  std::vector<DdpoUpdateStats> updates;
};

/// Fine-tunes the shape branch of a trained checkpoint; writes
/// <out>/checkpoint.ckpt and <out>/ddpo_log.jsonl (one line per update).
DdpoCommandResult cmd_ddpo(const RunConfig& config, const std::filesystem::path& checkpoint,
                           const std::filesystem::path& data_dir, const std::filesystem::path& out_dir,
                           bool force = false);

struct EvalCommandResult {
  ShapeFidelityReport report;
  /// Over scenes present on both sides; absent with fewer than 2.
  std::optional<PermutationTest> mmd;
};

/// Writes <out>/report.json and <out>/report.txt.
EvalCommandResult cmd_eval(const RunConfig& config, const std::filesystem::path& generated_dir,
                           const std::filesystem::path& reference_dir, const std::filesystem::path& layouts_file,
                           const std::filesystem::path& out_dir, bool force = false);

}  // namespace ofdiff
