#pragma once

#include "ofdiff/autodiff.hpp"
#include "ofdiff/scene.hpp"

#include <array>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace ofdiff {

struct DenoiserConfig {
  int canvas_size = 32;
  /// Level widths are (w, 2w, 2w).
  int base_width = 32;
  int embed_dim = 64;
  int groups = 8;
  int num_categories = 3;

  void validate() const;
};

enum class ParamGroup { shared_encoder, shape_decoder, mix_decoder, image_encoder, mask_encoder, embeddings };
inline constexpr std::array<ParamGroup, 6> kAllParamGroups = {
    ParamGroup::shared_encoder, ParamGroup::shape_decoder, ParamGroup::mix_decoder,
    ParamGroup::image_encoder,  ParamGroup::mask_encoder,  ParamGroup::embeddings};
std::string to_string(ParamGroup group);

/// Per-level features at resolutions S, S/2, S/4.
template <typename Scalar>
using Pyramid = std::vector<Var<Scalar>>;

template <typename Scalar>
struct ConditionBundle {
  /// Image features; empty when no image was given.
  Pyramid<Scalar> c_i;
  /// Mask features.
  Pyramid<Scalar> c_l;
  /// Shape-branch condition; the mask features.
  Pyramid<Scalar> c_s;
  /// Mixed condition; empty until mix_conditions fills it.
  Pyramid<Scalar> c_m;
  /// Mean category embedding per sample, (N, E).
  Var<Scalar> c_t;
};

enum class Branches { shape, mix, both };

template <typename Scalar>
struct NoisePrediction {
  Var<Scalar> eps_s;
  Var<Scalar> eps_m;
};

/// c_m = (n / N) c_i + sg[c_l], level by level.
template <typename Scalar>
Pyramid<Scalar> mix_conditions(const Pyramid<Scalar>& c_i, const Pyramid<Scalar>& c_l, std::int64_t n,
                               std::int64_t total);

/// Masks as an (N, 1, S, S) batch of {0, 1}.
template <typename Scalar>
Tensor<Scalar> mask_batch(std::span<const ShapeMask> masks);

/// Images (3, S, S) in [0, 1] stacked to (N, 3, S, S) and mapped to [-1, 1].
template <typename Scalar>
Tensor<Scalar> image_batch(std::span<const Tensor<double>> images);

/// Noise predictor with a shared encoder, twin shape/mix decoders and
/// convolutional condition encoders whose output projections start at zero.
template <typename Scalar>
class Denoiser {
 public:
  explicit Denoiser(const DenoiserConfig& config, std::uint64_t seed = 0);
  ~Denoiser();
  Denoiser(const Denoiser&) = delete;
  Denoiser& operator=(const Denoiser&) = delete;

  const DenoiserConfig& config() const { return config_; }

  /// image: (N, 3, S, S) in [-1, 1] or null; mask: (N, 1, S, S).
  ConditionBundle<Scalar> encode_conditions(Graph<Scalar>& g, const Tensor<Scalar>* image, const Tensor<Scalar>& mask,
                                            const std::vector<std::vector<int>>& category_ids);

  /// z_t: (N, 3, S, S); one timestep per sample.
  NoisePrediction<Scalar> predict_noise(Graph<Scalar>& g, const Var<Scalar>& z_t, std::span<const double> t,
                                        const ConditionBundle<Scalar>& bundle, Branches branches);

  ParameterList<Scalar> parameters();
  ParameterList<Scalar> parameters(ParamGroup group);
  /// Parameters in a fixed order with unique names.
  std::vector<std::pair<ParamGroup, Parameter<Scalar>*>> grouped_parameters();
  Index parameter_count();

  /// Copies parameter values from `other` (same config).
  void copy_from(Denoiser& other);

  struct Impl;

 private:
  DenoiserConfig config_;
  std::unique_ptr<Impl> impl_;
};

/// Shape-branch-only access to a denoiser: the mix decoder and the image
/// encoder are unreachable through it.
template <typename Scalar>
class SamplingView {
 public:
  explicit SamplingView(Denoiser<Scalar>& model) : model_(&model) {}

  const DenoiserConfig& config() const { return model_->config(); }

  /// mask: (N, 1, S, S). Returns eps_s.
  Var<Scalar> predict(Graph<Scalar>& g, const Var<Scalar>& z_t, std::span<const double> t, const Tensor<Scalar>& mask,
                      const std::vector<std::vector<int>>& category_ids);

  /// Parameters the shape branch reads.
  ParameterList<Scalar> parameters();

 private:
  Denoiser<Scalar>* model_;
};

}  // namespace ofdiff
