#pragma once

// Checkpoint container: magic "UKF1", a little-endian uint64 header length,
// a JSON header (config echo plus a named tensor table with shape, dtype and
// byte offset), then the raw parameter buffers. Round-trips are bit-exact.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "ukf/common.hpp"
#include "ukf/model.hpp"

namespace ukf {

template <typename T>
constexpr const char* dtype_name() {
  if constexpr (sizeof(T) == 4) {
    return "f32";
  } else {
    return "f64";
  }
}

template <typename T>
void save_checkpoint(const std::string& path, const std::string& config_echo,
                     const ParamRegistry<T>& reg) {
  nlohmann::json header;
  header["config"] = nlohmann::json::parse(config_echo.empty() ? "{}" : config_echo);
  nlohmann::json table = nlohmann::json::array();
  uint64_t offset = 0;
  auto add_entry = [&](const std::string& name, const std::vector<int64_t>& shape,
                       size_t count, bool trainable) {
    nlohmann::json e;
    e["name"] = name;
    e["shape"] = shape;
    e["dtype"] = dtype_name<T>();
    e["offset"] = offset;
    e["trainable"] = trainable;
    table.push_back(e);
    offset += count * sizeof(T);
  };
  for (const auto& [name, t] : reg.trainable) add_entry(name, t->shape, t->data.size(), true);
  for (const auto& [name, buf] : reg.buffers) {
    add_entry(name, {static_cast<int64_t>(buf->size())}, buf->size(), false);
  }
  header["tensors"] = table;
  const std::string header_text = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("save_checkpoint: cannot open " + path);
  out.write("UKF1", 4);
  const uint64_t hlen = header_text.size();
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
  for (const auto& [name, t] : reg.trainable) {
    out.write(reinterpret_cast<const char*>(t->data.data()),
              static_cast<std::streamsize>(t->data.size() * sizeof(T)));
  }
  for (const auto& [name, buf] : reg.buffers) {
    out.write(reinterpret_cast<const char*>(buf->data()),
              static_cast<std::streamsize>(buf->size() * sizeof(T)));
  }
  if (!out) throw IoError("save_checkpoint: short write to " + path);
}

struct CheckpointFile {
  nlohmann::json header;
  std::vector<char> blob;  // raw data section

  const nlohmann::json& config() const { return header.at("config"); }
};

inline CheckpointFile read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("read_checkpoint: cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (in.gcount() != 4 || std::memcmp(magic, "UKF1", 4) != 0) {
    throw IoError(path + ": not a UKF1 checkpoint");
  }
  uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  std::string header_text(hlen, '\0');
  in.read(header_text.data(), static_cast<std::streamsize>(hlen));
  if (in.gcount() != static_cast<std::streamsize>(hlen)) {
    throw IoError(path + ": truncated checkpoint header");
  }
  CheckpointFile f;
  f.header = nlohmann::json::parse(header_text);
  f.blob.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  return f;
}

// Copies every tensor in the file into the registry. Names, shapes and dtype
// must match the model exactly.
template <typename T>
void apply_checkpoint(const CheckpointFile& f, ParamRegistry<T>& reg) {
  std::map<std::string, const nlohmann::json*> index;
  for (const auto& e : f.header.at("tensors")) index[e.at("name").get<std::string>()] = &e;

  auto load_into = [&](const std::string& name, T* dst, size_t count,
                       const std::vector<int64_t>* shape) {
    auto it = index.find(name);
    if (it == index.end()) throw IoError("checkpoint: missing tensor '" + name + "'");
    const auto& e = *it->second;
    if (e.at("dtype").get<std::string>() != dtype_name<T>()) {
      throw IoError("checkpoint: dtype mismatch for '" + name + "'");
    }
    if (shape) {
      const auto got = e.at("shape").get<std::vector<int64_t>>();
      if (got != *shape) {
        throw IoError("checkpoint: shape mismatch for '" + name + "': file " + shape_str(got) +
                      " vs model " + shape_str(*shape));
      }
    }
    const uint64_t off = e.at("offset").get<uint64_t>();
    if (off + count * sizeof(T) > f.blob.size()) {
      throw IoError("checkpoint: tensor '" + name + "' overruns the data section");
    }
    std::memcpy(dst, f.blob.data() + off, count * sizeof(T));
    index.erase(it);
  };

  for (auto& [name, t] : reg.trainable) load_into(name, t->data.data(), t->data.size(), &t->shape);
  for (auto& [name, buf] : reg.buffers) load_into(name, buf->data(), buf->size(), nullptr);
  if (!index.empty()) {
    throw IoError("checkpoint: file contains unknown tensor '" + index.begin()->first + "'");
  }
}

}  // namespace ukf
