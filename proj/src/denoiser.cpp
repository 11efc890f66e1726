#include "ofdiff/denoiser.hpp"

#include "ofdiff/random.hpp"

#include <cmath>
#include <optional>

namespace ofdiff {

namespace {

template <typename Scalar>
struct Builder {
  std::uint64_t seed;
  std::vector<std::pair<ParamGroup, Parameter<Scalar>*>>* registry;
  ParamGroup group;
  std::string prefix;

  // Uniform(-b, b) with b = 1/sqrt(fan_in); each tensor has its own stream.
  void init(Parameter<Scalar>& p, const std::string& name, Shape shape, double bound) {
    p.name = prefix + name;
    p.value = Tensor<Scalar>(std::move(shape));
    if (bound > 0) {
      Rng rng(seed, {stream_id(p.name)});
      for (Scalar& v : p.value.values()) v = static_cast<Scalar>(rng.uniform(-bound, bound));
    }
    registry->emplace_back(group, &p);
  }
  void ones(Parameter<Scalar>& p, const std::string& name, Shape shape) {
    p.name = prefix + name;
    p.value = Tensor<Scalar>(std::move(shape), Scalar(1));
    registry->emplace_back(group, &p);
  }
  Builder sub(const std::string& name) const { return {seed, registry, group, prefix + name + "."}; }
};

template <typename Scalar>
struct Conv {
  Parameter<Scalar> weight, bias;
  int stride = 1, padding = 1;

  void build(Builder<Scalar> b, int cin, int cout, int k, int stride_, bool zero = false) {
    stride = stride_;
    padding = k / 2;
    const double bound = zero ? 0.0 : 1.0 / std::sqrt(static_cast<double>(cin * k * k));
    b.init(weight, "weight", {cout, cin, k, k}, bound);
    b.init(bias, "bias", {cout}, bound);
  }
  Var<Scalar> operator()(Graph<Scalar>& g, const Var<Scalar>& x) {
    return conv2d(x, g.param(weight), std::optional<Var<Scalar>>(g.param(bias)), stride, padding);
  }
};

template <typename Scalar>
struct Linear {
  Parameter<Scalar> weight, bias;

  void build(Builder<Scalar> b, int in, int out) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    b.init(weight, "weight", {in, out}, bound);
    b.init(bias, "bias", {out}, bound);
  }
  Var<Scalar> operator()(Graph<Scalar>& g, const Var<Scalar>& x) { return matmul(x, g.param(weight)) + g.param(bias); }
};

template <typename Scalar>
struct Norm {
  Parameter<Scalar> gamma, beta;
  int groups = 8;

  void build(Builder<Scalar> b, int channels, int groups_) {
    groups = groups_;
    b.ones(gamma, "gamma", {channels});
    b.init(beta, "beta", {channels}, 0.0);
  }
  Var<Scalar> operator()(Graph<Scalar>& g, const Var<Scalar>& x) {
    return group_norm(x, g.param(gamma), g.param(beta), groups);
  }
};

template <typename Scalar>
struct ResBlock {
  Norm<Scalar> norm1, norm2;
  Conv<Scalar> conv1, conv2;
  Linear<Scalar> emb;
  std::optional<Conv<Scalar>> skip;

  void build(Builder<Scalar> b, int cin, int cout, int embed, int groups) {
    norm1.build(b.sub("norm1"), cin, groups);
    conv1.build(b.sub("conv1"), cin, cout, 3, 1);
    emb.build(b.sub("emb"), embed, cout);
    norm2.build(b.sub("norm2"), cout, groups);
    conv2.build(b.sub("conv2"), cout, cout, 3, 1);
    if (cin != cout) {
      skip.emplace();
      skip->build(b.sub("skip"), cin, cout, 1, 1);
    }
  }
  Var<Scalar> operator()(Graph<Scalar>& g, const Var<Scalar>& x, const Var<Scalar>& emb_act) {
    Var<Scalar> h = conv1(g, silu(norm1(g, x)));
    h = add_channel(h, emb(g, emb_act));
    h = conv2(g, silu(norm2(g, h)));
    return (skip ? (*skip)(g, x) : x) + h;
  }
};

template <typename Scalar>
struct Decoder {
  ResBlock<Scalar> mid, up1_block, up0_block;
  Conv<Scalar> up1_conv, up0_conv, out;
  Norm<Scalar> out_norm;

  void build(Builder<Scalar> b, int w, int embed, int groups) {
    mid.build(b.sub("mid"), 2 * w, 2 * w, embed, groups);
    up1_conv.build(b.sub("up1.conv"), 4 * w, 2 * w, 3, 1);
    up1_block.build(b.sub("up1.block"), 2 * w, 2 * w, embed, groups);
    up0_conv.build(b.sub("up0.conv"), 3 * w, w, 3, 1);
    up0_block.build(b.sub("up0.block"), w, w, embed, groups);
    out_norm.build(b.sub("out_norm"), w, groups);
    out.build(b.sub("out"), w, 3, 3, 1, true);
  }
  Var<Scalar> operator()(Graph<Scalar>& g, const Pyramid<Scalar>& skips, const Pyramid<Scalar>& cond,
                         const Var<Scalar>& emb_act) {
    Var<Scalar> h = mid(g, skips[2] + cond[2], emb_act);
    h = concat_channels(upsample2x(h), skips[1] + cond[1]);
    h = up1_block(g, up1_conv(g, h), emb_act);
    h = concat_channels(upsample2x(h), skips[0] + cond[0]);
    h = up0_block(g, up0_conv(g, h), emb_act);
    return out(g, silu(out_norm(g, h)));
  }
};

template <typename Scalar>
struct ConditionEncoder {
  Conv<Scalar> conv0, conv1, conv2, proj0, proj1, proj2;

  void build(Builder<Scalar> b, int cin, int w) {
    conv0.build(b.sub("conv0"), cin, w, 3, 1);
    conv1.build(b.sub("conv1"), w, 2 * w, 3, 2);
    conv2.build(b.sub("conv2"), 2 * w, 2 * w, 3, 2);
    proj0.build(b.sub("proj0"), w, w, 1, 1, true);
    proj1.build(b.sub("proj1"), 2 * w, 2 * w, 1, 1, true);
    proj2.build(b.sub("proj2"), 2 * w, 2 * w, 1, 1, true);
  }
  Pyramid<Scalar> operator()(Graph<Scalar>& g, const Var<Scalar>& x) {
    const Var<Scalar> e0 = silu(conv0(g, x));
    const Var<Scalar> e1 = silu(conv1(g, e0));
    const Var<Scalar> e2 = silu(conv2(g, e1));
    return {proj0(g, e0), proj1(g, e1), proj2(g, e2)};
  }
};

}  // namespace

std::string to_string(ParamGroup group) {
  switch (group) {
    case ParamGroup::shared_encoder: return "shared_encoder";
    case ParamGroup::shape_decoder: return "shape_decoder";
    case ParamGroup::mix_decoder: return "mix_decoder";
    case ParamGroup::image_encoder: return "image_encoder";
    case ParamGroup::mask_encoder: return "mask_encoder";
    case ParamGroup::embeddings: return "embeddings";
  }
  return "?";
}

void DenoiserConfig::validate() const {
  if (canvas_size < 16 || canvas_size % 4) throw std::invalid_argument("model canvas_size must be >= 16 and a multiple of 4");
  if (base_width < 1 || groups < 1 || base_width % groups) {
    throw std::invalid_argument("model base_width must be a positive multiple of groups");
  }
  if (embed_dim < 2 || embed_dim % 2) throw std::invalid_argument("model embed_dim must be positive and even");
  if (num_categories < 1) throw std::invalid_argument("model num_categories must be >= 1");
}

template <typename Scalar>
struct Denoiser<Scalar>::Impl {
  std::vector<std::pair<ParamGroup, Parameter<Scalar>*>> registry;

  // Shared encoder.
  Linear<Scalar> time1, time2;
  Conv<Scalar> conv_in, down0, down1;
  ResBlock<Scalar> level0, level1, level2;
  // Decoders.
  Decoder<Scalar> shape, mix;
  // Condition encoders.
  ConditionEncoder<Scalar> image_enc, mask_enc;
  // Category embeddings, (K, E).
  Parameter<Scalar> categories;

  int embed_dim = 0;
  int num_categories = 0;
};

template <typename Scalar>
Denoiser<Scalar>::Denoiser(const DenoiserConfig& config, std::uint64_t seed) : config_(config), impl_(new Impl) {
  config_.validate();
  Impl& m = *impl_;
  const int w = config.base_width, e = config.embed_dim, gr = config.groups;
  m.embed_dim = e;
  m.num_categories = config.num_categories;
  auto group = [&](ParamGroup g, const std::string& prefix) { return Builder<Scalar>{seed, &m.registry, g, prefix + "."}; };

  Builder<Scalar> enc = group(ParamGroup::shared_encoder, "encoder");
  m.time1.build(enc.sub("time1"), e, e);
  m.time2.build(enc.sub("time2"), e, e);
  m.conv_in.build(enc.sub("conv_in"), 3, w, 3, 1);
  m.level0.build(enc.sub("level0"), w, w, e, gr);
  m.down0.build(enc.sub("down0"), w, 2 * w, 3, 1);
  m.level1.build(enc.sub("level1"), 2 * w, 2 * w, e, gr);
  m.down1.build(enc.sub("down1"), 2 * w, 2 * w, 3, 1);
  m.level2.build(enc.sub("level2"), 2 * w, 2 * w, e, gr);

  m.shape.build(group(ParamGroup::shape_decoder, "shape_decoder"), w, e, gr);
  m.mix.build(group(ParamGroup::mix_decoder, "mix_decoder"), w, e, gr);
  m.image_enc.build(group(ParamGroup::image_encoder, "image_encoder"), 3, w);
  m.mask_enc.build(group(ParamGroup::mask_encoder, "mask_encoder"), 1, w);
  group(ParamGroup::embeddings, "embeddings").init(m.categories, "categories", {config.num_categories, e}, 1.0);
}

template <typename Scalar>
Denoiser<Scalar>::~Denoiser() = default;

template <typename Scalar>
ConditionBundle<Scalar> Denoiser<Scalar>::encode_conditions(Graph<Scalar>& g, const Tensor<Scalar>* image,
                                                            const Tensor<Scalar>& mask,
                                                            const std::vector<std::vector<int>>& category_ids) {
  Impl& m = *impl_;
  const Index s = config_.canvas_size;
  if (mask.shape() != Shape{mask.dim(0), 1, s, s}) {
    throw ShapeError("mask batch must be (N, 1, " + std::to_string(s) + ", " + std::to_string(s) + "), got " +
                     shape_string(mask.shape()));
  }
  const Index n = mask.dim(0);
  if (static_cast<Index>(category_ids.size()) != n) throw ShapeError("one category list per sample required");

  ConditionBundle<Scalar> out;
  out.c_l = m.mask_enc(g, g.constant(mask));
  out.c_s = out.c_l;
  if (image) {
    if (image->shape() != Shape{n, 3, s, s}) {
      throw ShapeError("image batch " + shape_string(image->shape()) + " does not match mask batch " +
                       shape_string(mask.shape()));
    }
    out.c_i = m.image_enc(g, g.constant(*image));
  }

  // Row-stochastic averaging matrix over the categories present in each layout.
  Tensor<Scalar> avg({n, static_cast<Index>(m.num_categories)});
  for (Index i = 0; i < n; ++i) {
    const auto& ids = category_ids[static_cast<std::size_t>(i)];
    for (int id : ids) {
      if (id < 0 || id >= m.num_categories) throw std::invalid_argument("category id " + std::to_string(id) + " out of range");
      avg[i * m.num_categories + id] += Scalar(1) / static_cast<Scalar>(ids.size());
    }
  }
  out.c_t = matmul(g.constant(std::move(avg)), g.param(m.categories));
  return out;
}

template <typename Scalar>
NoisePrediction<Scalar> Denoiser<Scalar>::predict_noise(Graph<Scalar>& g, const Var<Scalar>& z_t,
                                                        std::span<const double> t,
                                                        const ConditionBundle<Scalar>& bundle, Branches branches) {
  Impl& m = *impl_;
  const Index s = config_.canvas_size;
  if (z_t.shape().size() != 4 || z_t.shape()[1] != 3 || z_t.shape()[2] != s || z_t.shape()[3] != s) {
    throw ShapeError("z_t must be (N, 3, " + std::to_string(s) + ", " + std::to_string(s) + "), got " +
                     shape_string(z_t.shape()));
  }
  const Index n = z_t.shape()[0];
  if (static_cast<Index>(t.size()) != n) throw ShapeError("one timestep per sample required");
  const bool want_shape = branches != Branches::mix, want_mix = branches != Branches::shape;
  if (want_mix && bundle.c_m.size() != 3) throw ContractError("mix branch requested without c_m");
  if (want_shape && bundle.c_s.size() != 3) throw ContractError("shape branch requested without c_s");
  if (!bundle.c_t.valid() || bundle.c_t.shape() != Shape{n, m.embed_dim}) {
    throw ShapeError("c_t must be (N, E) for the batch");
  }

  const Var<Scalar> temb = m.time2(g, silu(m.time1(g, g.constant(sinusoidal_embedding<Scalar>(t, m.embed_dim)))));
  const Var<Scalar> emb_act = silu(temb + bundle.c_t);

  Pyramid<Scalar> skips(3);
  skips[0] = m.level0(g, m.conv_in(g, z_t), emb_act);
  skips[1] = m.level1(g, m.down0(g, avgpool2x(skips[0])), emb_act);
  skips[2] = m.level2(g, m.down1(g, avgpool2x(skips[1])), emb_act);

  NoisePrediction<Scalar> out;
  if (want_shape) out.eps_s = m.shape(g, skips, bundle.c_s, emb_act);
  if (want_mix) out.eps_m = m.mix(g, skips, bundle.c_m, emb_act);
  return out;
}

template <typename Scalar>
std::vector<std::pair<ParamGroup, Parameter<Scalar>*>> Denoiser<Scalar>::grouped_parameters() {
  return impl_->registry;
}

template <typename Scalar>
ParameterList<Scalar> Denoiser<Scalar>::parameters() {
  ParameterList<Scalar> out;
  for (auto& [g, p] : impl_->registry) out.push_back(p);
  return out;
}

template <typename Scalar>
ParameterList<Scalar> Denoiser<Scalar>::parameters(ParamGroup group) {
  ParameterList<Scalar> out;
  for (auto& [g, p] : impl_->registry) {
    if (g == group) out.push_back(p);
  }
  return out;
}

template <typename Scalar>
Index Denoiser<Scalar>::parameter_count() {
  Index n = 0;
  for (auto& [g, p] : impl_->registry) n += p->value.size();
  return n;
}

template <typename Scalar>
void Denoiser<Scalar>::copy_from(Denoiser& other) {
  auto& a = impl_->registry;
  auto& b = other.impl_->registry;
  if (a.size() != b.size()) throw ContractError("copy_from: parameter lists differ");
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].second->value.shape() != b[i].second->value.shape()) throw ContractError("copy_from: shape mismatch");
    a[i].second->value = b[i].second->value;
  }
}

template <typename Scalar>
Pyramid<Scalar> mix_conditions(const Pyramid<Scalar>& c_i, const Pyramid<Scalar>& c_l, std::int64_t n,
                               std::int64_t total) {
  if (total < 1 || n < 0 || n > total) {
    throw ContractError("mix_conditions needs 0 <= n <= N and N >= 1, got n=" + std::to_string(n) +
                        " N=" + std::to_string(total));
  }
  if (c_i.empty()) throw ContractError("mix_conditions needs image features c_i");
  if (c_i.size() != c_l.size()) throw ShapeError("c_i and c_l pyramids differ in depth");
  Pyramid<Scalar> out;
  const double coeff = static_cast<double>(n) / static_cast<double>(total);
  for (std::size_t k = 0; k < c_i.size(); ++k) {
    if (c_i[k].shape() != c_l[k].shape()) {
      throw ShapeError("c_i level " + std::to_string(k) + " " + shape_string(c_i[k].shape()) + " vs c_l " +
                       shape_string(c_l[k].shape()));
    }
    out.push_back(scale(c_i[k], coeff) + stop_gradient(c_l[k]));
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> mask_batch(std::span<const ShapeMask> masks) {
  if (masks.empty()) return Tensor<Scalar>({0, 1, 0, 0});
  const Index h = masks[0].pixels.rows(), w = masks[0].pixels.cols();
  Tensor<Scalar> out({static_cast<Index>(masks.size()), 1, h, w});
  for (std::size_t i = 0; i < masks.size(); ++i) {
    if (masks[i].pixels.rows() != h || masks[i].pixels.cols() != w) throw ShapeError("mask sizes differ in batch");
    for (Index y = 0; y < h; ++y) {
      for (Index x = 0; x < w; ++x) out.at(static_cast<Index>(i), 0, y, x) = masks[i].pixels(y, x) ? 1 : 0;
    }
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> image_batch(std::span<const Tensor<double>> images) {
  if (images.empty()) return Tensor<Scalar>({0, 3, 0, 0});
  const Shape one = images[0].shape();
  Shape shape{static_cast<Index>(images.size())};
  shape.insert(shape.end(), one.begin(), one.end());
  Tensor<Scalar> out(shape);
  const Index stride = shape_size(one);
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].shape() != one) throw ShapeError("image sizes differ in batch");
    out.array().segment(static_cast<Index>(i) * stride, stride) =
        (images[i].array() * 2.0 - 1.0).template cast<Scalar>();
  }
  return out;
}

template <typename Scalar>
Var<Scalar> SamplingView<Scalar>::predict(Graph<Scalar>& g, const Var<Scalar>& z_t, std::span<const double> t,
                                          const Tensor<Scalar>& mask,
                                          const std::vector<std::vector<int>>& category_ids) {
  const ConditionBundle<Scalar> bundle = model_->encode_conditions(g, nullptr, mask, category_ids);
  return model_->predict_noise(g, z_t, t, bundle, Branches::shape).eps_s;
}

template <typename Scalar>
ParameterList<Scalar> SamplingView<Scalar>::parameters() {
  ParameterList<Scalar> out;
  for (ParamGroup group : {ParamGroup::shared_encoder, ParamGroup::shape_decoder, ParamGroup::mask_encoder,
                           ParamGroup::embeddings}) {
    for (Parameter<Scalar>* p : model_->parameters(group)) out.push_back(p);
  }
  return out;
}

#define OFDIFF_INSTANTIATE(S)                                                                                  \
  template class Denoiser<S>;                                                                                  \
  template class SamplingView<S>;                                                                              \
  template Pyramid<S> mix_conditions<S>(const Pyramid<S>&, const Pyramid<S>&, std::int64_t, std::int64_t);     \
  template Tensor<S> mask_batch<S>(std::span<const ShapeMask>);                                                \
  template Tensor<S> image_batch<S>(std::span<const Tensor<double>>);

OFDIFF_INSTANTIATE(float)
OFDIFF_INSTANTIATE(double)

}  // namespace ofdiff
