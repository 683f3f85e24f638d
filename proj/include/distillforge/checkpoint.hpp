#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "distillforge/common.hpp"
#include "distillforge/encoder.hpp"

namespace distillforge {

// The on-disk payload is little-endian float32; raw writes assume a
// little-endian host.
static_assert(std::endian::native == std::endian::little);

constexpr char kCheckpointMagic[4] = {'D', 'F', 'C', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void write_bytes(std::ofstream& out, const void* data, std::size_t n) {
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
}

template <typename T>
void write_pod(std::ofstream& out, T value) {
  write_bytes(out, &value, sizeof(T));
}

inline void read_bytes(std::ifstream& in, void* data, std::size_t n, const char* what) {
  in.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) {
    fail(ErrorKind::io, std::string("checkpoint truncated while reading ") + what);
  }
}

template <typename T>
T read_pod(std::ifstream& in, const char* what) {
  T value;
  read_bytes(in, &value, sizeof(T), what);
  return value;
}

}  // namespace detail

/// Layout: magic, u32 version, u64 config-JSON length + bytes, u32 tensor
/// count, then per tensor (u32 name length, name, u32 rank, u64 dims...),
/// then the concatenated float32 payload in directory order.
inline void save_checkpoint(const EncoderModel& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::io, "cannot open " + path + " for writing");

  detail::write_bytes(out, kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::write_pod<std::uint32_t>(out, kCheckpointVersion);

  const std::string config_json = encoder_config_to_json(model.config).dump();
  detail::write_pod<std::uint64_t>(out, config_json.size());
  detail::write_bytes(out, config_json.data(), config_json.size());

  auto params = const_cast<EncoderModel&>(model).named_parameters();
  detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, tensor] : params) {
    detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    detail::write_bytes(out, name.data(), name.size());
    detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(tensor->rank()));
    for (const std::size_t dim : tensor->shape()) {
      detail::write_pod<std::uint64_t>(out, dim);
    }
  }
  for (const auto& [name, tensor] : params) {
    (void)name;
    detail::write_bytes(out, tensor->values().data(), tensor->numel() * sizeof(float));
  }
  if (!out) fail(ErrorKind::io, "write failed for " + path);
}

inline EncoderModel load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open " + path);

  char magic[4];
  detail::read_bytes(in, magic, sizeof(magic), "magic");
  if (std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    fail(ErrorKind::parse, path + " is not a checkpoint (bad magic)");
  }
  const auto version = detail::read_pod<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion) {
    fail(ErrorKind::version, path + ": checkpoint version " + std::to_string(version) +
                                 ", expected " + std::to_string(kCheckpointVersion));
  }

  const auto config_len = detail::read_pod<std::uint64_t>(in, "config length");
  if (config_len > (1u << 20)) {
    fail(ErrorKind::parse, path + ": implausible config block of " +
                               std::to_string(config_len) + " bytes");
  }
  std::string config_json(config_len, '\0');
  detail::read_bytes(in, config_json.data(), config_len, "config");
  nlohmann::json parsed;
  try {
    parsed = nlohmann::json::parse(config_json);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::parse, path + ": config block is not valid JSON: " + e.what());
  }
  const EncoderConfig config = encoder_config_from_json(parsed);

  EncoderModel model = zeros_model<float>(config);
  auto params = model.named_parameters();
  const auto tensor_count = detail::read_pod<std::uint32_t>(in, "tensor count");
  if (tensor_count != params.size()) {
    fail(ErrorKind::shape_mismatch, path + ": directory lists " +
                                        std::to_string(tensor_count) + " tensors, config needs " +
                                        std::to_string(params.size()));
  }
  for (auto& [expected_name, tensor] : params) {
    const auto name_len = detail::read_pod<std::uint32_t>(in, "tensor name length");
    if (name_len > 4096) {
      fail(ErrorKind::parse, path + ": implausible tensor name of " +
                                 std::to_string(name_len) + " bytes");
    }
    std::string name(name_len, '\0');
    detail::read_bytes(in, name.data(), name_len, "tensor name");
    if (name != expected_name) {
      fail(ErrorKind::parse, path + ": tensor \"" + name + "\" where \"" + expected_name +
                                 "\" was expected");
    }
    const auto rank = detail::read_pod<std::uint32_t>(in, "tensor rank");
    if (rank > 8) {
      fail(ErrorKind::parse, path + ": implausible rank " + std::to_string(rank));
    }
    std::vector<std::size_t> shape(rank);
    for (auto& dim : shape) {
      dim = static_cast<std::size_t>(detail::read_pod<std::uint64_t>(in, "tensor dim"));
    }
    if (shape != tensor->shape()) {
      fail(ErrorKind::shape_mismatch, path + ": tensor \"" + name + "\" has shape " +
                                          shape_to_string(shape) + ", config requires " +
                                          shape_to_string(tensor->shape()));
    }
  }
  for (auto& [name, tensor] : params) {
    (void)name;
    detail::read_bytes(in, tensor->values().data(), tensor->numel() * sizeof(float),
                       "tensor payload");
  }
  return model;
}

}  // namespace distillforge
