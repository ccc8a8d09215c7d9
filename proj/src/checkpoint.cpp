#include "transam/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace transam {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'T', 'A', 'M', '1'};

void put_u8(std::string& out, std::uint8_t v) { out.push_back(static_cast<char>(v)); }

void put_u16(std::string& out, std::uint16_t v) {
  for (int i = 0; i < 2; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(std::string bytes) : bytes_(std::move(bytes)) {}

  std::uint32_t u(int width) {
    need(static_cast<std::size_t>(width));
    std::uint32_t v = 0;
    for (int i = 0; i < width; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_++])) << (8 * i);
    return v;
  }

  std::string take(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw CheckpointError(CheckpointError::Kind::Truncated, "truncated checkpoint");
  }

  std::string bytes_;
  std::size_t pos_ = 0;
};

void atomic_write(const std::filesystem::path& path, const std::string& bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError(CheckpointError::Kind::Io, "cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError(CheckpointError::Kind::Io, "short write to " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw CheckpointError(CheckpointError::Kind::Io, "cannot rename " + tmp.string() + ": " + ec.message());
}

std::string read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointError::Kind::Io, "cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

std::filesystem::path sidecar_path(const std::filesystem::path& path) {
  std::filesystem::path p = path;
  p += ".json";
  return p;
}

}  // namespace

const CheckpointTensor* LoadedCheckpoint::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

json model_config_to_json(const ModelConfig& c) {
  return json{{"d_e", c.d_e},
              {"heads", c.heads},
              {"layers", c.layers},
              {"K", c.K},
              {"theta_base", c.theta_base},
              {"mask_mode", to_string(c.mask_mode)},
              {"ffn_hidden", c.ffn_hidden},
              {"dropout", c.dropout}};
}

ModelConfig model_config_from_json(const json& j) {
  try {
    ModelConfig c;
    c.d_e = j.at("d_e").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.layers = j.at("layers").get<std::size_t>();
    c.K = j.at("K").get<std::size_t>();
    c.theta_base = j.at("theta_base").get<double>();
    c.mask_mode = parse_mask_mode(j.at("mask_mode").get<std::string>());
    c.ffn_hidden = j.at("ffn_hidden").get<std::size_t>();
    c.dropout = j.at("dropout").get<double>();
    c.validate();
    return c;
  } catch (const std::exception& e) {
    throw CheckpointError(CheckpointError::Kind::BadSidecar, std::string("bad model config: ") + e.what());
  }
}

void write_tensor_file(const std::filesystem::path& path, std::span<const NamedTensor> tensors) {
  static_assert(sizeof(float) == 4);
  std::string out(kMagic, 4);
  put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, tensor] : tensors) {
    if (name.size() > 0xFFFF) throw CheckpointError(CheckpointError::Kind::Io, "tensor name too long: " + name);
    put_u16(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    put_u8(out, static_cast<std::uint8_t>(tensor.rank()));
    for (std::size_t extent : tensor.shape()) put_u32(out, static_cast<std::uint32_t>(extent));
    for (double v : tensor.data()) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  atomic_write(path, out);
}

std::vector<CheckpointTensor> read_tensor_file(const std::filesystem::path& path) {
  Reader in(read_all(path));
  std::string magic;
  try {
    magic = in.take(4);
  } catch (const CheckpointError&) {
    throw CheckpointError(CheckpointError::Kind::BadMagic, "bad magic in " + path.string());
  }
  if (magic != std::string(kMagic, 4)) throw CheckpointError(CheckpointError::Kind::BadMagic, "bad magic in " + path.string());
  const std::uint32_t count = in.u(4);
  std::vector<CheckpointTensor> tensors;
  for (std::uint32_t k = 0; k < count; ++k) {
    CheckpointTensor t;
    t.name = in.take(in.u(2));
    const std::uint32_t rank = in.u(1);
    std::size_t numel = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      t.shape.push_back(in.u(4));
      numel *= t.shape.back();
    }
    t.values.resize(numel);
    for (float& v : t.values) v = std::bit_cast<float>(in.u(4));
    tensors.push_back(std::move(t));
  }
  if (!in.done()) throw CheckpointError(CheckpointError::Kind::Truncated, "trailing bytes in " + path.string());
  return tensors;
}

void save_checkpoint(const std::filesystem::path& path, std::span<const NamedTensor> params,
                     const CheckpointMeta& meta, const AdamState* adam) {
  std::vector<NamedTensor> all(params.begin(), params.end());
  if (adam && adam->first_moment.size() == params.size()) {
    for (std::size_t k = 0; k < params.size(); ++k) {
      all.push_back({"optim.m." + params[k].name, Tensor::from(params[k].tensor.shape(), adam->first_moment[k])});
      all.push_back({"optim.v." + params[k].name, Tensor::from(params[k].tensor.shape(), adam->second_moment[k])});
    }
  }
  json sidecar{{"format", "TAM1"},
               {"model", model_config_to_json(meta.config)},
               {"entity_count", meta.entity_count},
               {"relation_count", meta.relation_count},
               {"step", meta.step},
               {"extra", meta.extra}};
  if (adam) {
    sidecar["adam"] = {{"step", adam->step}, {"beta1", adam->beta1}, {"beta2", adam->beta2}, {"epsilon", adam->epsilon}};
  }
  write_tensor_file(path, all);
  atomic_write(sidecar_path(path), sidecar.dump(2) + "\n");
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  LoadedCheckpoint loaded;
  loaded.tensors = read_tensor_file(path);
  json sidecar;
  try {
    sidecar = json::parse(read_all(sidecar_path(path)));
    loaded.meta.config = model_config_from_json(sidecar.at("model"));
    loaded.meta.entity_count = sidecar.at("entity_count").get<std::size_t>();
    loaded.meta.relation_count = sidecar.at("relation_count").get<std::size_t>();
    loaded.meta.step = sidecar.at("step").get<std::int64_t>();
    loaded.meta.extra = sidecar.value("extra", json::object());
    if (sidecar.contains("adam")) loaded.meta.extra["adam"] = sidecar["adam"];
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    throw CheckpointError(CheckpointError::Kind::BadSidecar, "bad checkpoint sidecar: " + std::string(e.what()));
  }
  return loaded;
}

void assign_parameters(const LoadedCheckpoint& checkpoint, std::span<NamedTensor> params) {
  for (auto& [name, tensor] : params) {
    const CheckpointTensor* stored = checkpoint.find(name);
    if (!stored) throw CheckpointError(CheckpointError::Kind::MissingTensor, "checkpoint lacks tensor " + name);
    if (stored->shape != tensor.shape()) {
      throw CheckpointError(CheckpointError::Kind::ShapeMismatch, "shape mismatch for " + name + ": stored " +
                                                                      shape_to_string(stored->shape) + ", expected " +
                                                                      shape_to_string(tensor.shape()));
    }
    auto data = tensor.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<double>(stored->values[i]);
  }
}

bool restore_adam(const LoadedCheckpoint& checkpoint, std::span<const NamedTensor> params, AdamState& adam) {
  const auto& extra = checkpoint.meta.extra;
  if (!extra.contains("adam")) return false;
  AdamState state;
  state.step = extra["adam"].at("step").get<std::int64_t>();
  state.beta1 = extra["adam"].at("beta1").get<double>();
  state.beta2 = extra["adam"].at("beta2").get<double>();
  state.epsilon = extra["adam"].at("epsilon").get<double>();
  for (const auto& [name, tensor] : params) {
    const CheckpointTensor* m = checkpoint.find("optim.m." + name);
    const CheckpointTensor* v = checkpoint.find("optim.v." + name);
    if (!m || !v) return false;
    if (m->values.size() != tensor.numel() || v->values.size() != tensor.numel()) {
      throw CheckpointError(CheckpointError::Kind::ShapeMismatch, "optimizer state shape mismatch for " + name);
    }
    state.first_moment.emplace_back(m->values.begin(), m->values.end());
    state.second_moment.emplace_back(v->values.begin(), v->values.end());
  }
  adam = std::move(state);
  return true;
}

}  // namespace transam
