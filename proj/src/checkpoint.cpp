#include "ofdiff/checkpoint.hpp"

#include "ofdiff/dataset.hpp"

#include <bit>
#include <cstring>
#include <sstream>

namespace ofdiff {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr const char* kMagic = "ofdiff-checkpoint";
constexpr const char* kConfigArray = "config";

template <typename Scalar>
const char* dtype_of() {
  return std::is_same_v<Scalar, float> ? "f32" : "f64";
}

std::size_t dtype_size(const std::string& dtype) {
  if (dtype == "f32") return 4;
  if (dtype == "f64") return 8;
  if (dtype == "u8") return 1;
  throw CheckpointError("unknown dtype " + dtype);
}

std::string shape_field(const Shape& shape) {
  if (shape.empty()) return "scalar";
  std::string s;
  for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? "," : "") + std::to_string(shape[i]);
  return s;
}

Shape parse_shape(const std::string& s) {
  Shape out;
  if (s == "scalar") return out;
  std::istringstream is(s);
  std::string part;
  while (std::getline(is, part, ',')) out.push_back(std::stoll(part));
  return out;
}

bool valid_token(const std::string& s) {
  return !s.empty() && s.find_first_of(" \t\r\n") == std::string::npos;
}

}  // namespace

const NamedArray& Checkpoint::array(const std::string& name) const {
  for (const NamedArray& a : arrays) {
    if (a.name == name) return a;
  }
  throw CheckpointError("checkpoint has no array " + name);
}

bool Checkpoint::has_array(const std::string& name) const {
  return std::any_of(arrays.begin(), arrays.end(), [&](const NamedArray& a) { return a.name == name; });
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& checkpoint) {
  std::ostringstream head;
  head << kMagic << " " << checkpoint.version << "\n";
  for (const auto& [k, v] : checkpoint.meta) {
    if (!valid_token(k) || !valid_token(v)) throw CheckpointError("meta entries must be single tokens: " + k);
    head << "meta " << k << " " << v << "\n";
  }
  std::size_t offset = 0;
  for (const NamedArray& a : checkpoint.arrays) {
    if (!valid_token(a.name)) throw CheckpointError("bad array name '" + a.name + "'");
    const auto expected = static_cast<std::size_t>(shape_size(a.shape)) * dtype_size(a.dtype);
    if (a.bytes.size() != expected) throw CheckpointError("array " + a.name + " byte count does not match its shape");
    head << "array " << a.name << " " << a.dtype << " " << shape_field(a.shape) << " " << offset << " "
         << a.bytes.size() << "\n";
    offset += a.bytes.size();
  }
  head << "end\n";
  const std::string h = head.str();
  std::vector<std::uint8_t> out(h.begin(), h.end());
  out.reserve(out.size() + offset);
  for (const NamedArray& a : checkpoint.arrays) out.insert(out.end(), a.bytes.begin(), a.bytes.end());
  return out;
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  Checkpoint ck;
  std::size_t pos = 0;
  auto next_line = [&]() {
    const auto* begin = bytes.data() + pos;
    const auto* nl = static_cast<const std::uint8_t*>(std::memchr(begin, '\n', bytes.size() - pos));
    if (!nl) throw CheckpointError("truncated checkpoint header");
    std::string line(reinterpret_cast<const char*>(begin), static_cast<std::size_t>(nl - begin));
    pos += line.size() + 1;
    return line;
  };
  {
    std::istringstream is(next_line());
    std::string magic;
    is >> magic >> ck.version;
    if (magic != kMagic) throw CheckpointError("not a checkpoint file");
    if (ck.version != 1) throw CheckpointError("unsupported checkpoint version " + std::to_string(ck.version));
  }
  struct Entry {
    NamedArray array;
    std::size_t offset, nbytes;
  };
  std::vector<Entry> entries;
  for (;;) {
    const std::string line = next_line();
    if (line == "end") break;
    std::istringstream is(line);
    std::string kind;
    is >> kind;
    if (kind == "meta") {
      std::string k, v;
      is >> k >> v;
      ck.meta[k] = v;
    } else if (kind == "array") {
      Entry e;
      std::string shape;
      is >> e.array.name >> e.array.dtype >> shape >> e.offset >> e.nbytes;
      if (!is) throw CheckpointError("malformed checkpoint line '" + line + "'");
      e.array.shape = parse_shape(shape);
      if (static_cast<std::size_t>(shape_size(e.array.shape)) * dtype_size(e.array.dtype) != e.nbytes) {
        throw CheckpointError("array " + e.array.name + " byte count does not match its shape");
      }
      entries.push_back(std::move(e));
    } else {
      throw CheckpointError("malformed checkpoint line '" + line + "'");
    }
  }
  const std::size_t base = pos;
  for (Entry& e : entries) {
    if (base + e.offset + e.nbytes > bytes.size()) throw CheckpointError("truncated checkpoint data for " + e.array.name);
    const auto* p = bytes.data() + base + e.offset;
    e.array.bytes.assign(p, p + e.nbytes);
    ck.arrays.push_back(std::move(e.array));
  }
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  write_bytes(path, encode_checkpoint(checkpoint));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const std::vector<std::uint8_t> bytes = read_bytes(path);
  try {
    return decode_checkpoint(bytes);
  } catch (const CheckpointError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
}

template <typename Scalar>
NamedArray to_named_array(const std::string& name, const Tensor<Scalar>& tensor) {
  NamedArray a{name, dtype_of<Scalar>(), tensor.shape(), {}};
  a.bytes.resize(static_cast<std::size_t>(tensor.size()) * sizeof(Scalar));
  if (!a.bytes.empty()) std::memcpy(a.bytes.data(), tensor.data(), a.bytes.size());
  return a;
}

template <typename Scalar>
Tensor<Scalar> from_named_array(const NamedArray& array) {
  if (array.dtype != dtype_of<Scalar>()) {
    throw CheckpointError("array " + array.name + " has dtype " + array.dtype + ", expected " + dtype_of<Scalar>());
  }
  Tensor<Scalar> t(array.shape);
  if (!array.bytes.empty()) std::memcpy(t.data(), array.bytes.data(), array.bytes.size());
  return t;
}

template <typename Scalar>
Checkpoint make_checkpoint(Denoiser<Scalar>& model, const AdamW<Scalar>* optimizer, const TrainState& state,
                           const RunConfig& config) {
  Checkpoint ck;
  ck.meta["config_hash"] = config.hash();
  ck.meta["dtype"] = dtype_of<Scalar>();
  ck.meta["train_n"] = std::to_string(state.n);
  ck.meta["train_N"] = std::to_string(state.N);
  ck.meta["train_epoch"] = std::to_string(state.epoch);
  const std::string text = config.to_text();
  ck.arrays.push_back({kConfigArray, "u8", {static_cast<Index>(text.size())}, {text.begin(), text.end()}});
  const ParameterList<Scalar> params = model.parameters();
  for (const auto* p : params) ck.arrays.push_back(to_named_array("param/" + p->name, p->value));
  if (optimizer) {
    const auto& st = optimizer->state();
    ck.meta["optimizer_step"] = std::to_string(st.step);
    if (!st.first_moment.empty()) {
      for (std::size_t i = 0; i < params.size(); ++i) {
        ck.arrays.push_back(to_named_array("adam_m/" + params[i]->name, st.first_moment[i]));
      }
      for (std::size_t i = 0; i < params.size(); ++i) {
        ck.arrays.push_back(to_named_array("adam_v/" + params[i]->name, st.second_moment[i]));
      }
    }
  }
  return ck;
}

RunConfig checkpoint_config(const Checkpoint& checkpoint) {
  const NamedArray& a = checkpoint.array(kConfigArray);
  const std::string text(a.bytes.begin(), a.bytes.end());
  RunConfig config = parse_config(text, "checkpoint config");
  const auto it = checkpoint.meta.find("config_hash");
  if (it == checkpoint.meta.end() || it->second != config.hash()) {
    throw CheckpointError("checkpoint config snapshot does not match its recorded hash");
  }
  return config;
}

TrainState checkpoint_train_state(const Checkpoint& checkpoint) {
  auto get = [&](const std::string& k) {
    const auto it = checkpoint.meta.find(k);
    if (it == checkpoint.meta.end()) throw CheckpointError("checkpoint has no meta " + k);
    return std::stoll(it->second);
  };
  return {get("train_n"), get("train_N"), get("train_epoch")};
}

template <typename Scalar>
void restore_parameters(const Checkpoint& checkpoint, Denoiser<Scalar>& model) {
  for (auto* p : model.parameters()) {
    Tensor<Scalar> v = from_named_array<Scalar>(checkpoint.array("param/" + p->name));
    if (v.shape() != p->value.shape()) {
      throw CheckpointError("parameter " + p->name + " has shape " + shape_string(v.shape()) + ", model expects " +
                            shape_string(p->value.shape()));
    }
    p->value = std::move(v);
  }
}

template <typename Scalar>
void restore_optimizer(const Checkpoint& checkpoint, Denoiser<Scalar>& model, AdamW<Scalar>& optimizer) {
  auto& st = optimizer.state();
  const auto it = checkpoint.meta.find("optimizer_step");
  st.step = it == checkpoint.meta.end() ? 0 : std::stoll(it->second);
  const ParameterList<Scalar> params = model.parameters();
  if (params.empty() || !checkpoint.has_array("adam_m/" + params.front()->name)) return;
  st.first_moment.clear();
  st.second_moment.clear();
  for (const auto* p : params) st.first_moment.push_back(from_named_array<Scalar>(checkpoint.array("adam_m/" + p->name)));
  for (const auto* p : params) {
    st.second_moment.push_back(from_named_array<Scalar>(checkpoint.array("adam_v/" + p->name)));
  }
}

#define OFDIFF_INSTANTIATE(S)                                                                              \
  template NamedArray to_named_array<S>(const std::string&, const Tensor<S>&);                             \
  template Tensor<S> from_named_array<S>(const NamedArray&);                                               \
  template Checkpoint make_checkpoint<S>(Denoiser<S>&, const AdamW<S>*, const TrainState&, const RunConfig&); \
  template void restore_parameters<S>(const Checkpoint&, Denoiser<S>&);                                    \
  template void restore_optimizer<S>(const Checkpoint&, Denoiser<S>&, AdamW<S>&);
OFDIFF_INSTANTIATE(float)
OFDIFF_INSTANTIATE(double)
#undef OFDIFF_INSTANTIATE

}  // namespace ofdiff
