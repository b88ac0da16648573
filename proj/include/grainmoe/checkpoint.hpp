// Copyright (c) 2026 The grainmoe Authors.
// SPDX-License-Identifier: Apache-2.0

// Checkpoint layout:
//   u64 little-endian  header length H
//   H bytes            JSON {"format", "version", "dtype", "tensors": [{name, shape, offset}]}
//   payload            float32 little-endian values; offset counts bytes into the payload

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "grainmoe/model.hpp"

namespace grainmoe {

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::uint64_t offset = 0;
  std::vector<float> values;
};

namespace detail {

inline void put_u32le(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint32_t get_u32le(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace detail

template <typename T>
void save_checkpoint(const std::string& path, const std::vector<NamedParam<T>>& params) {
  nlohmann::json header;
  header["format"] = "grainmoe-checkpoint";
  header["version"] = 1;
  header["dtype"] = "f32le";
  header["tensors"] = nlohmann::json::array();
  std::string payload;
  for (const auto& p : params) {
    header["tensors"].push_back(
        {{"name", p.name}, {"shape", p.var.shape()}, {"offset", payload.size()}});
    for (T v : p.var.value().data()) {
      detail::put_u32le(payload, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    }
  }
  const std::string text = header.dump();
  std::string prefix;
  const std::uint64_t len = text.size();
  for (int i = 0; i < 8; ++i) prefix.push_back(static_cast<char>((len >> (8 * i)) & 0xFF));

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  out << prefix << text << payload;
  if (!out) throw std::runtime_error("failed writing checkpoint: " + path);
}

inline std::vector<CheckpointEntry> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 8) throw std::runtime_error("truncated checkpoint: " + path);
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i)
    len |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[i])) << (8 * i);
  if (8 + len > bytes.size()) throw std::runtime_error("truncated checkpoint header: " + path);
  const auto header = nlohmann::json::parse(bytes.substr(8, len));
  if (header.value("format", "") != "grainmoe-checkpoint") {
    throw std::runtime_error("not a grainmoe checkpoint: " + path);
  }
  const auto* payload = reinterpret_cast<const unsigned char*>(bytes.data()) + 8 + len;
  const std::uint64_t payload_size = bytes.size() - 8 - len;
  std::vector<CheckpointEntry> out;
  for (const auto& t : header.at("tensors")) {
    CheckpointEntry e;
    e.name = t.at("name").get<std::string>();
    e.shape = t.at("shape").get<Shape>();
    e.offset = t.at("offset").get<std::uint64_t>();
    const std::size_t n = shape_numel(e.shape);
    if (e.offset + 4 * n > payload_size) throw std::runtime_error("checkpoint tensor out of bounds");
    e.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      e.values[i] = std::bit_cast<float>(detail::get_u32le(payload + e.offset + 4 * i));
    }
    out.push_back(std::move(e));
  }
  return out;
}

/// Copies checkpoint values into matching parameters (by name and shape).
template <typename T>
void restore_checkpoint(const std::string& path, std::vector<NamedParam<T>>& params) {
  auto entries = load_checkpoint(path);
  if (entries.size() != params.size()) throw std::runtime_error("checkpoint parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (entries[i].name != params[i].name || entries[i].shape != params[i].var.shape()) {
      throw std::runtime_error("checkpoint mismatch at " + params[i].name);
    }
    auto& dst = params[i].var.mutable_value();
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = static_cast<T>(entries[i].values[j]);
  }
}

}  // namespace grainmoe
