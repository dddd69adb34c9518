#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mvsdf/params.hpp"

namespace mvsdf {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace detail {
template <typename T>
constexpr const char* dtype_token() {
  if constexpr (sizeof(T) == 4) return "f32";
  else return "f64";
}
}  // namespace detail

// Text header followed by raw little-endian values:
//   MVSDF-CKPT 1
//   tensor <name> <rows> <cols> <f32|f64> <byte offset> <trainable 0|1>
//   ...
//   payload <total bytes>
//   <raw data>
template <typename T>
void save_store(const std::string& path, const ParameterStore<T>& store) {
  std::ostringstream header;
  header << "MVSDF-CKPT 1\n";
  uint64_t offset = 0;
  for (const auto& [name, e] : store) {
    header << "tensor " << name << " " << e.value.rows << " " << e.value.cols << " "
           << detail::dtype_token<T>() << " " << offset << " " << (e.trainable ? 1 : 0)
           << "\n";
    offset += static_cast<uint64_t>(e.value.size()) * sizeof(T);
  }
  header << "payload " << offset << "\n";

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
  const std::string h = header.str();
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  for (const auto& [name, e] : store)
    out.write(reinterpret_cast<const char*>(e.value.v.data()),
              static_cast<std::streamsize>(e.value.size() * sizeof(T)));
  if (!out) throw std::runtime_error("checkpoint: write failed for '" + path + "'");
}

template <typename T>
ParameterStore<T> load_store(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open '" + path + "'");

  std::string line;
  if (!std::getline(in, line) || line != "MVSDF-CKPT 1")
    throw std::runtime_error("checkpoint: bad magic/version in '" + path + "'");

  struct Entry {
    std::string name;
    long rows, cols;
    uint64_t offset;
    bool trainable;
  };
  std::vector<Entry> entries;
  uint64_t payload_bytes = 0;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "payload") {
      if (!(ls >> payload_bytes))
        throw std::runtime_error("checkpoint: malformed payload line in '" + path + "'");
      break;
    }
    if (tag != "tensor")
      throw std::runtime_error("checkpoint: unexpected header line '" + line + "'");
    Entry e;
    std::string dtype;
    int trainable;
    if (!(ls >> e.name >> e.rows >> e.cols >> dtype >> e.offset >> trainable))
      throw std::runtime_error("checkpoint: malformed tensor line '" + line + "'");
    if (dtype != detail::dtype_token<T>())
      throw std::runtime_error("checkpoint: dtype " + dtype + " does not match loader (" +
                               detail::dtype_token<T>() + ") for entry '" + e.name + "'");
    if (e.rows <= 0 || e.cols <= 0)
      throw std::runtime_error("checkpoint: bad shape for entry '" + e.name + "'");
    e.trainable = trainable != 0;
    entries.push_back(std::move(e));
  }

  uint64_t expect = 0;
  for (const auto& e : entries) {
    if (e.offset != expect)
      throw std::runtime_error("checkpoint: offset mismatch at entry '" + e.name + "'");
    expect += static_cast<uint64_t>(e.rows) * e.cols * sizeof(T);
  }
  if (expect != payload_bytes)
    throw std::runtime_error("checkpoint: payload size disagrees with entry table");

  std::vector<char> payload(payload_bytes);
  in.read(payload.data(), static_cast<std::streamsize>(payload_bytes));
  if (static_cast<uint64_t>(in.gcount()) != payload_bytes) {
    uint64_t got = static_cast<uint64_t>(in.gcount());
    for (const auto& e : entries) {
      uint64_t end = e.offset + static_cast<uint64_t>(e.rows) * e.cols * sizeof(T);
      if (end > got)
        throw std::runtime_error("checkpoint: truncated payload (entry '" + e.name + "')");
    }
    throw std::runtime_error("checkpoint: truncated payload");
  }

  ParameterStore<T> store;
  for (const auto& e : entries) {
    Tensor<T>& t = store.create(e.name, e.rows, e.cols, e.trainable);
    std::memcpy(t.v.data(), payload.data() + e.offset, t.size() * sizeof(T));
  }
  return store;
}

}  // namespace mvsdf
