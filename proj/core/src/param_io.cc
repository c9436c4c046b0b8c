#include "impinj/param_io.h"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

#include "json.hpp"

namespace impinj::nn {

namespace {

constexpr char kMagic[8] = {'I', 'M', 'P', 'J', 'P', 'A', 'R', '1'};

template <typename T>
void write_le(std::ostream& os, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  os.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
  unsigned char bytes[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(bytes), sizeof(T))) throw DataError("parameter container truncated");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

void write_string(std::ostream& os, const std::string& s) {
  write_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& is) {
  const auto len = read_le<std::uint32_t>(is);
  if (len > (1u << 20)) throw DataError("parameter container: implausible string length");
  std::string s(len, '\0');
  if (!is.read(s.data(), len)) throw DataError("parameter container truncated");
  return s;
}

ContainerHeader read_header(std::istream& is, const std::filesystem::path& path) {
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) {
    throw DataError("not a parameter container: " + path.string());
  }
  ContainerHeader h;
  h.module = read_string(is);
  const auto count = read_le<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < count; ++i) {
    TensorHeader t;
    t.name = read_string(is);
    t.rows = read_le<std::uint64_t>(is);
    t.cols = read_le<std::uint64_t>(is);
    h.tensors.push_back(std::move(t));
  }
  return h;
}

}  // namespace

void save_tensors(const std::filesystem::path& path, const std::string& module,
                  const std::vector<TensorRef>& tensors) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path.string());
  os.write(kMagic, 8);
  write_string(os, module);
  write_le<std::uint32_t>(os, static_cast<std::uint32_t>(tensors.size()));
  nlohmann::json side;
  side["module"] = module;
  side["format"] = "IMPJPAR1";
  side["tensors"] = nlohmann::json::array();
  for (const TensorRef& t : tensors) {
    write_string(os, t.name);
    write_le<std::uint64_t>(os, static_cast<std::uint64_t>(t.tensor->rows()));
    write_le<std::uint64_t>(os, static_cast<std::uint64_t>(t.tensor->cols()));
    side["tensors"].push_back({{"name", t.name}, {"rows", t.tensor->rows()}, {"cols", t.tensor->cols()}});
  }
  for (const TensorRef& t : tensors) {
    const Matrix& m = *t.tensor;
    if constexpr (std::endian::native == std::endian::little) {
      os.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    } else {
      for (Eigen::Index i = 0; i < m.size(); ++i) write_le<double>(os, m.data()[i]);
    }
  }
  if (!os) throw Error("failed writing " + path.string());
  std::ofstream js(path.string() + ".json");
  js << side.dump(2) << "\n";
}

ContainerHeader read_container_header(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string());
  return read_header(is, path);
}

void load_tensors(const std::filesystem::path& path, const std::string& module,
                  const std::vector<TensorRef>& tensors) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string());
  const ContainerHeader h = read_header(is, path);
  if (h.module != module) throw DataError("container holds module '" + h.module + "', expected '" + module + "'");
  if (h.tensors.size() != tensors.size()) throw DataError("container tensor count mismatch in " + path.string());
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const TensorHeader& th = h.tensors[i];
    if (th.name != tensors[i].name) throw DataError("container tensor name mismatch: " + th.name + " vs " + tensors[i].name);
    tensors[i].tensor->resize(static_cast<Eigen::Index>(th.rows), static_cast<Eigen::Index>(th.cols));
  }
  for (const TensorRef& t : tensors) {
    Matrix& m = *t.tensor;
    if constexpr (std::endian::native == std::endian::little) {
      if (!is.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)))) {
        throw DataError("parameter container truncated: " + path.string());
      }
    } else {
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = read_le<double>(is);
    }
  }
}

void save_matrix(const std::filesystem::path& path, const std::string& module, const Matrix& m) {
  Matrix copy = m;
  save_tensors(path, module, {{"matrix", &copy}});
}

Matrix load_matrix(const std::filesystem::path& path, const std::string& module) {
  Matrix m;
  load_tensors(path, module, {{"matrix", &m}});
  return m;
}

}  // namespace impinj::nn
