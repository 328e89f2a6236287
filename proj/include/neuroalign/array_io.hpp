#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "neuroalign/autodiff.hpp"

namespace neuroalign {

enum class DType : std::uint8_t { kFloat32 = 1, kFloat64 = 2 };

struct NamedArray {
  std::vector<std::uint64_t> shape;
  DType dtype = DType::kFloat32;
  // Values widened to double in memory; float32 arrays round-trip exactly.
  std::vector<double> data;

  std::uint64_t element_count() const;
};

// Binary container of named little-endian arrays.
//
// Layout: "NALA" | u32 version | u32 count | count x entry, where an entry is
// u32 name_len | name | u8 dtype | u32 ndim | u64 dims[ndim] | payload.
// Entries are written in name order so equal contents give equal bytes.
class ArrayFile {
 public:
  static constexpr std::uint32_t kVersion = 1;

  void put(const std::string& name, std::vector<std::uint64_t> shape, std::span<const double> values,
           DType dtype);
  void put(const std::string& name, const Mat& m, DType dtype = DType::kFloat64);

  bool contains(const std::string& name) const { return arrays_.count(name) != 0; }
  const NamedArray& get(const std::string& name) const;
  // 2-D view of an array; 1-D arrays become a single row.
  Mat matrix(const std::string& name) const;
  std::vector<std::string> names() const;
  std::size_t size() const { return arrays_.size(); }

  void save(const std::filesystem::path& path) const;
  static ArrayFile load(const std::filesystem::path& path);

 private:
  std::map<std::string, NamedArray> arrays_;
};

}  // namespace neuroalign
