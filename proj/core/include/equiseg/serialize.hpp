#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <vector>

#include "equiseg/labels.hpp"
#include "equiseg/tensor.hpp"

// Binary tensor container:
//   "EQTS" | version u16 | dtype u8 | rank u8 | extents u64[rank] | values
// All integers and values are little-endian.
namespace equiseg {

inline constexpr std::uint16_t kContainerVersion = 1;

enum class DType : std::uint8_t { f32 = 0, f64 = 1, u8 = 2 };

struct RawArray {
  DType dtype = DType::f32;
  Shape shape;
  std::vector<std::uint8_t> bytes;  // little-endian element payload
};

void write_array(std::ostream& os, const RawArray& array);
RawArray read_array(std::istream& is);

template <typename T> RawArray to_raw(const Tensor<T>& t);
// Converts floating payloads to T; rejects integer payloads.
template <typename T> Tensor<T> from_raw(const RawArray& raw);

RawArray to_raw(const LabelMap& labels);
LabelMap labels_from_raw(const RawArray& raw);

template <typename T> void write_tensor(std::ostream& os, const Tensor<T>& t) { write_array(os, to_raw(t)); }
template <typename T> Tensor<T> read_tensor(std::istream& is) { return from_raw<T>(read_array(is)); }

void save_array(const std::filesystem::path& path, const RawArray& array);
RawArray load_array(const std::filesystem::path& path);

}  // namespace equiseg
