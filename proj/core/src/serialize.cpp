#include "equiseg/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace equiseg {

namespace {

constexpr char kMagic[4] = {'E', 'Q', 'T', 'S'};

std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::f32: return 4;
    case DType::f64: return 8;
    case DType::u8: return 1;
  }
  throw IoError("unknown dtype code " + std::to_string(static_cast<int>(d)));
}

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
}

template <typename U>
U get_le(const std::uint8_t* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
  return v;
}

void read_exact(std::istream& is, void* dst, std::size_t n) {
  is.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) throw IoError("truncated tensor container");
}

}  // namespace

void write_array(std::ostream& os, const RawArray& array) {
  if (array.shape.size() > 255) throw IoError("rank too large for container");
  if (array.bytes.size() != shape_numel(array.shape) * dtype_size(array.dtype))
    throw IoError("payload size does not match shape");
  std::vector<std::uint8_t> header(kMagic, kMagic + 4);
  put_le<std::uint16_t>(header, kContainerVersion);
  header.push_back(static_cast<std::uint8_t>(array.dtype));
  header.push_back(static_cast<std::uint8_t>(array.shape.size()));
  for (auto e : array.shape) put_le<std::uint64_t>(header, e);
  os.write(reinterpret_cast<const char*>(header.data()), static_cast<std::streamsize>(header.size()));
  os.write(reinterpret_cast<const char*>(array.bytes.data()), static_cast<std::streamsize>(array.bytes.size()));
  if (!os) throw IoError("failed to write tensor container");
}

RawArray read_array(std::istream& is) {
  std::uint8_t head[8];
  read_exact(is, head, sizeof head);
  if (std::memcmp(head, kMagic, 4) != 0) throw IoError("bad magic: not a tensor container");
  const auto version = get_le<std::uint16_t>(head + 4);
  if (version != kContainerVersion)
    throw IoError("unsupported container version " + std::to_string(version));
  RawArray out;
  if (head[6] > static_cast<std::uint8_t>(DType::u8)) throw IoError("unknown dtype code");
  out.dtype = static_cast<DType>(head[6]);
  const std::size_t rank = head[7];
  std::vector<std::uint8_t> extents(rank * 8);
  if (rank) read_exact(is, extents.data(), extents.size());
  for (std::size_t i = 0; i < rank; ++i) {
    const auto e = get_le<std::uint64_t>(extents.data() + 8 * i);
    if (e == 0 || e > (std::uint64_t{1} << 40)) throw IoError("corrupt extent in container");
    out.shape.push_back(static_cast<std::size_t>(e));
  }
  out.bytes.resize(shape_numel(out.shape) * dtype_size(out.dtype));
  if (!out.bytes.empty()) read_exact(is, out.bytes.data(), out.bytes.size());
  return out;
}

template <typename T>
RawArray to_raw(const Tensor<T>& t) {
  RawArray raw;
  raw.dtype = std::is_same_v<T, float> ? DType::f32 : DType::f64;
  raw.shape = t.shape();
  raw.bytes.reserve(t.numel() * sizeof(T));
  for (T v : t.data()) {
    if constexpr (std::is_same_v<T, float>) put_le(raw.bytes, std::bit_cast<std::uint32_t>(v));
    else put_le(raw.bytes, std::bit_cast<std::uint64_t>(v));
  }
  return raw;
}

template <typename T>
Tensor<T> from_raw(const RawArray& raw) {
  std::vector<T> values(shape_numel(raw.shape));
  const std::uint8_t* p = raw.bytes.data();
  switch (raw.dtype) {
    case DType::f32:
      for (std::size_t i = 0; i < values.size(); ++i)
        values[i] = static_cast<T>(std::bit_cast<float>(get_le<std::uint32_t>(p + 4 * i)));
      break;
    case DType::f64:
      for (std::size_t i = 0; i < values.size(); ++i)
        values[i] = static_cast<T>(std::bit_cast<double>(get_le<std::uint64_t>(p + 8 * i)));
      break;
    case DType::u8:
      throw IoError("container holds integer labels, expected a real tensor");
  }
  return Tensor<T>(raw.shape, std::move(values));
}

RawArray to_raw(const LabelMap& labels) {
  RawArray raw;
  raw.dtype = DType::u8;
  raw.shape = {labels.height, labels.width};
  raw.bytes.assign(labels.values.begin(), labels.values.end());
  return raw;
}

LabelMap labels_from_raw(const RawArray& raw) {
  if (raw.dtype != DType::u8 || raw.shape.size() != 2) throw IoError("container is not a label map");
  LabelMap out;
  out.height = raw.shape[0];
  out.width = raw.shape[1];
  out.values.assign(raw.bytes.begin(), raw.bytes.end());
  return out;
}

void save_array(const std::filesystem::path& path, const RawArray& array) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_array(os, array);
}

RawArray load_array(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  return read_array(is);
}

template RawArray to_raw<float>(const Tensor<float>&);
template RawArray to_raw<double>(const Tensor<double>&);
template Tensor<float> from_raw<float>(const RawArray&);
template Tensor<double> from_raw<double>(const RawArray&);

}  // namespace equiseg
