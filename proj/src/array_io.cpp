#include "neuroalign/array_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <fmt/format.h>

#include "neuroalign/errors.hpp"

static_assert(std::endian::native == std::endian::little, "array container assumes a little-endian host");

namespace neuroalign {
namespace {

constexpr char kMagic[4] = {'N', 'A', 'L', 'A'};

template <typename T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const std::filesystem::path& path) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw FormatError(fmt::format("{}: truncated array file", path.string()));
  return v;
}

}  // namespace

std::uint64_t NamedArray::element_count() const {
  std::uint64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

void ArrayFile::put(const std::string& name, std::vector<std::uint64_t> shape,
                    std::span<const double> values, DType dtype) {
  NamedArray a;
  a.shape = std::move(shape);
  a.dtype = dtype;
  if (a.element_count() != values.size()) {
    throw FormatError(fmt::format("array '{}': shape does not match {} values", name, values.size()));
  }
  a.data.assign(values.begin(), values.end());
  if (dtype == DType::kFloat32) {
    for (double& v : a.data) v = static_cast<double>(static_cast<float>(v));
  }
  arrays_[name] = std::move(a);
}

void ArrayFile::put(const std::string& name, const Mat& m, DType dtype) {
  put(name, {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())},
      std::span<const double>(m.data(), static_cast<std::size_t>(m.size())), dtype);
}

const NamedArray& ArrayFile::get(const std::string& name) const {
  auto it = arrays_.find(name);
  if (it == arrays_.end()) throw IntegrityError(fmt::format("array '{}' not found", name));
  return it->second;
}

Mat ArrayFile::matrix(const std::string& name) const {
  const NamedArray& a = get(name);
  Eigen::Index r = 1;
  Eigen::Index c = 1;
  if (a.shape.size() == 1) {
    c = static_cast<Eigen::Index>(a.shape[0]);
  } else if (a.shape.size() == 2) {
    r = static_cast<Eigen::Index>(a.shape[0]);
    c = static_cast<Eigen::Index>(a.shape[1]);
  } else {
    throw FormatError(fmt::format("array '{}' is {}-D; expected 1-D or 2-D", name, a.shape.size()));
  }
  return Eigen::Map<const Mat>(a.data.data(), r, c);
}

std::vector<std::string> ArrayFile::names() const {
  std::vector<std::string> out;
  out.reserve(arrays_.size());
  for (const auto& [k, _] : arrays_) out.push_back(k);
  return out;
}

void ArrayFile::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError(fmt::format("cannot open {} for writing", path.string()));
  os.write(kMagic, 4);
  write_pod(os, kVersion);
  write_pod(os, static_cast<std::uint32_t>(arrays_.size()));
  for (const auto& [name, a] : arrays_) {
    write_pod(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_pod(os, static_cast<std::uint8_t>(a.dtype));
    write_pod(os, static_cast<std::uint32_t>(a.shape.size()));
    for (auto d : a.shape) write_pod(os, d);
    if (a.dtype == DType::kFloat32) {
      std::vector<float> buf(a.data.begin(), a.data.end());
      os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
    } else {
      os.write(reinterpret_cast<const char*>(a.data.data()),
               static_cast<std::streamsize>(a.data.size() * sizeof(double)));
    }
  }
  if (!os) throw FormatError(fmt::format("write failed for {}", path.string()));
}

ArrayFile ArrayFile::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError(fmt::format("cannot open array file {}", path.string()));
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) {
    throw FormatError(fmt::format("{}: not a named-array file", path.string()));
  }
  const auto version = read_pod<std::uint32_t>(is, path);
  if (version != kVersion) throw FormatError(fmt::format("{}: unsupported version {}", path.string(), version));
  const auto count = read_pod<std::uint32_t>(is, path);
  ArrayFile file;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = read_pod<std::uint32_t>(is, path);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    NamedArray a;
    const auto dtype = read_pod<std::uint8_t>(is, path);
    if (dtype != 1 && dtype != 2) throw FormatError(fmt::format("{}: bad dtype for '{}'", path.string(), name));
    a.dtype = static_cast<DType>(dtype);
    const auto ndim = read_pod<std::uint32_t>(is, path);
    for (std::uint32_t d = 0; d < ndim; ++d) a.shape.push_back(read_pod<std::uint64_t>(is, path));
    const auto n = a.element_count();
    a.data.resize(n);
    if (a.dtype == DType::kFloat32) {
      std::vector<float> buf(n);
      is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * sizeof(float)));
      std::copy(buf.begin(), buf.end(), a.data.begin());
    } else {
      is.read(reinterpret_cast<char*>(a.data.data()), static_cast<std::streamsize>(n * sizeof(double)));
    }
    if (!is) throw FormatError(fmt::format("{}: truncated payload for '{}'", path.string(), name));
    file.arrays_[name] = std::move(a);
  }
  return file;
}

}  // namespace neuroalign
