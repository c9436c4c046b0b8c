#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "impinj/layers.h"

namespace impinj::nn {

// Flat parameter container:
//   magic "IMPJPAR1" | u32 len + module name | u32 tensor count |
//   per tensor: u32 len + name, u64 rows, u64 cols |
//   little-endian f64 payload of every tensor in header order (row-major).
// A JSON sidecar `<path>.json` lists module, tensor names and shapes.
void save_tensors(const std::filesystem::path& path, const std::string& module,
                  const std::vector<TensorRef>& tensors);

// Loads into the given slots (resized to the stored shapes); module name,
// tensor names and order must match.
void load_tensors(const std::filesystem::path& path, const std::string& module,
                  const std::vector<TensorRef>& tensors);

struct TensorHeader {
  std::string name;
  std::uint64_t rows = 0;
  std::uint64_t cols = 0;
};

struct ContainerHeader {
  std::string module;
  std::vector<TensorHeader> tensors;
};

ContainerHeader read_container_header(const std::filesystem::path& path);

// Raw matrix cache helpers used for teacher-probability caches.
void save_matrix(const std::filesystem::path& path, const std::string& module, const Matrix& m);
Matrix load_matrix(const std::filesystem::path& path, const std::string& module);

}  // namespace impinj::nn
