#pragma once

#include "ofdiff/config.hpp"
#include "ofdiff/denoiser.hpp"
#include "ofdiff/diffusion.hpp"
#include "ofdiff/optim.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace ofdiff {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NamedArray {
  std::string name;
  /// "f32", "f64" or "u8".
  std::string dtype;
  Shape shape;
  /// Little-endian element bytes.
  std::vector<std::uint8_t> bytes;
};

/// File layout:
///
///   ofdiff-checkpoint <version>
///   meta <key> <value>          (sorted by key)
///   array <name> <dtype> <d0,d1,...> <offset> <nbytes>
///   end
///   <raw bytes>
///
/// Offsets count from the first byte after the "end" line.
struct Checkpoint {
  int version = 1;
  std::map<std::string, std::string> meta;
  std::vector<NamedArray> arrays;

  const NamedArray& array(const std::string& name) const;
  bool has_array(const std::string& name) const;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& checkpoint);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

template <typename Scalar>
NamedArray to_named_array(const std::string& name, const Tensor<Scalar>& tensor);
template <typename Scalar>
Tensor<Scalar> from_named_array(const NamedArray& array);

/// Model parameters ("param/<name>"), optimizer moments ("adam_m/<name>",
/// "adam_v/<name>"), optimizer step, train state and the config snapshot.
template <typename Scalar>
Checkpoint make_checkpoint(Denoiser<Scalar>& model, const AdamW<Scalar>* optimizer, const TrainState& state,
                           const RunConfig& config);

/// Config snapshot stored in a checkpoint.
RunConfig checkpoint_config(const Checkpoint& checkpoint);
TrainState checkpoint_train_state(const Checkpoint& checkpoint);

/// Copies stored parameters into `model`; names and shapes must match.
template <typename Scalar>
void restore_parameters(const Checkpoint& checkpoint, Denoiser<Scalar>& model);

/// Restores moments and step count of an optimizer over `model.parameters()`.
template <typename Scalar>
void restore_optimizer(const Checkpoint& checkpoint, Denoiser<Scalar>& model, AdamW<Scalar>& optimizer);

}  // namespace ofdiff
