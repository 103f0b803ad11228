#include <cstring>
#include <fstream>

#include "coswin/train.hpp"

namespace coswin::train {
namespace {

// Format, bit-exact: magic "CSWN", version u32 LE, config blob length u32 +
// UTF-8 JSON, record count u32, then per record: name length u32, name,
// ndim u32, dims u32 each, raw little-endian f32 data row-major. No
// compression, no checksum; integrity is delegated to the filesystem.

void put_u32(std::ofstream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::ifstream& in, const char* what) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw CheckpointError(std::string("truncated checkpoint while reading ") + what);
  return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
         (std::uint32_t(b[3]) << 24);
}

void put_f32_le(std::ofstream& out, std::span<const float> data) {
  // x86/LE host assumption; bytes written through a u32 view for portability
  for (const float f : data) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    unsigned char b[4] = {static_cast<unsigned char>(bits & 0xff),
                          static_cast<unsigned char>((bits >> 8) & 0xff),
                          static_cast<unsigned char>((bits >> 16) & 0xff),
                          static_cast<unsigned char>((bits >> 24) & 0xff)};
    out.write(reinterpret_cast<const char*>(b), 4);
  }
}

void write_record(std::ofstream& out, const std::string& name, const Tensor<float>& t) {
  put_u32(out, static_cast<std::uint32_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  put_u32(out, static_cast<std::uint32_t>(t.ndim()));
  for (int i = 0; i < t.ndim(); ++i) put_u32(out, static_cast<std::uint32_t>(t.dim(i)));
  put_f32_le(out, t.data());
}

}  // namespace

void save_checkpoint(const std::string& path, CoSwinModel<float>& model,
                     const std::string& config_json, const OptimizerState<float>* opt) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write checkpoint " + path);
  out.write("CSWN", 4);
  put_u32(out, 1);  // version
  put_u32(out, static_cast<std::uint32_t>(config_json.size()));
  out.write(config_json.data(), static_cast<std::streamsize>(config_json.size()));

  auto params = model.parameters();
  std::uint32_t count = static_cast<std::uint32_t>(params.size());
  if (opt && !opt->slots.empty()) {
    count += static_cast<std::uint32_t>(2 * params.size() + 1);
  }
  put_u32(out, count);
  for (auto& [name, t] : params) write_record(out, name, *t);
  if (opt && !opt->slots.empty()) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& [name, t] = params[i];
      write_record(out, "opt.m." + name,
                   Tensor<float>::from_vector(t->shape(), opt->slots[i].m));
      write_record(out, "opt.v." + name,
                   Tensor<float>::from_vector(t->shape(), opt->slots[i].v));
    }
    write_record(out, "opt.t",
                 Tensor<float>::scalar(static_cast<float>(opt->t)));
  }
  out.flush();
  if (!out) throw DataError("write failure on checkpoint " + path);
}

CheckpointData read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "CSWN", 4) != 0) {
    throw CheckpointError("bad checkpoint magic in " + path);
  }
  CheckpointData ckpt;
  ckpt.version = get_u32(in, "version");
  if (ckpt.version != 1) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(ckpt.version));
  }
  const std::uint32_t cfg_len = get_u32(in, "config length");
  ckpt.config_json.resize(cfg_len);
  in.read(ckpt.config_json.data(), cfg_len);
  if (!in) throw CheckpointError("truncated checkpoint while reading config blob");
  const std::uint32_t count = get_u32(in, "record count");
  ckpt.records.reserve(count);
  for (std::uint32_t r = 0; r < count; ++r) {
    const std::uint32_t name_len = get_u32(in, "record name length");
    if (name_len > (1u << 20)) throw CheckpointError("implausible record name length");
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (!in) throw CheckpointError("truncated checkpoint while reading record name");
    const std::uint32_t ndim = get_u32(in, "record rank");
    if (ndim > 8) {
      throw CheckpointError("record " + name + " has implausible rank " +
                            std::to_string(ndim));
    }
    Shape shape(ndim);
    std::size_t numel = 1;
    for (std::uint32_t i = 0; i < ndim; ++i) {
      shape[i] = get_u32(in, "record dim");
      numel *= shape[i];
    }
    if (numel > (std::size_t{1} << 31)) {
      throw CheckpointError("record " + name + " has implausible size");
    }
    std::vector<float> data(numel);
    std::vector<unsigned char> raw(numel * 4);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!in) throw CheckpointError("truncated checkpoint while reading record " + name);
    for (std::size_t i = 0; i < numel; ++i) {
      const std::uint32_t bits = std::uint32_t(raw[i * 4]) |
                                 (std::uint32_t(raw[i * 4 + 1]) << 8) |
                                 (std::uint32_t(raw[i * 4 + 2]) << 16) |
                                 (std::uint32_t(raw[i * 4 + 3]) << 24);
      std::memcpy(&data[i], &bits, 4);
    }
    ckpt.records.emplace_back(std::move(name), Tensor<float>::from_vector(shape, std::move(data)));
  }
  return ckpt;
}

void load_checkpoint_into(CoSwinModel<float>& model, const CheckpointData& ckpt,
                          OptimizerState<float>* opt) {
  auto params = model.parameters();
  std::vector<bool> seen(params.size(), false);
  auto find_param = [&](const std::string& name) -> std::ptrdiff_t {
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (params[i].first == name) return static_cast<std::ptrdiff_t>(i);
    }
    return -1;
  };
  if (opt) {
    opt->slots.assign(params.size(), {});
    opt->t = 0;
  }
  bool has_opt = false;
  for (const auto& [name, tensor] : ckpt.records) {
    if (name == "opt.t") {
      if (opt) opt->t = static_cast<std::size_t>(tensor.item());
      has_opt = true;
      continue;
    }
    const bool is_m = name.rfind("opt.m.", 0) == 0;
    const bool is_v = name.rfind("opt.v.", 0) == 0;
    if (is_m || is_v) {
      has_opt = true;
      if (!opt) continue;
      const auto pi = find_param(name.substr(6));
      if (pi < 0) throw CheckpointError("optimizer record for unknown parameter " + name);
      if (tensor.shape() != params[static_cast<std::size_t>(pi)].second->shape()) {
        throw CheckpointError("optimizer record " + name + " has shape " +
                              shape_str(tensor.shape()) + ", expected " +
                              shape_str(params[static_cast<std::size_t>(pi)].second->shape()));
      }
      auto& slot = opt->slots[static_cast<std::size_t>(pi)];
      auto src = tensor.data();
      auto& dst = is_m ? slot.m : slot.v;
      dst.assign(src.begin(), src.end());
      continue;
    }
    const auto pi = find_param(name);
    if (pi < 0) throw CheckpointError("checkpoint record " + name +
                                      " does not match any model parameter");
    Tensor<float>* p = params[static_cast<std::size_t>(pi)].second;
    if (tensor.shape() != p->shape()) {
      throw CheckpointError("record " + name + " has shape " + shape_str(tensor.shape()) +
                            ", expected " + shape_str(p->shape()));
    }
    auto src = tensor.data();
    auto dst = p->mutable_data();
    std::copy(src.begin(), src.end(), dst.begin());
    seen[static_cast<std::size_t>(pi)] = true;
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!seen[i]) {
      throw CheckpointError("checkpoint is missing parameter " + params[i].first);
    }
  }
  if (opt && has_opt) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (opt->slots[i].m.empty() || opt->slots[i].v.empty()) {
        throw CheckpointError("checkpoint optimizer state is incomplete for " +
                              params[i].first);
      }
    }
  }
}

}  // namespace coswin::train
