#include "gaugekit/safetensors.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "gaugekit/error.hpp"
#include "json.hpp"

static_assert(std::endian::native == std::endian::little, "safetensors payloads are little-endian");

namespace gauge::safetensors {

using json = nlohmann::json;

namespace {

struct DtypeInfo {
  Dtype dtype;
  std::string_view name;
  std::size_t size;
};

constexpr std::array<DtypeInfo, 13> kDtypes{{
    {Dtype::kBool, "BOOL", 1},
    {Dtype::kU8, "U8", 1},
    {Dtype::kI8, "I8", 1},
    {Dtype::kU16, "U16", 2},
    {Dtype::kI16, "I16", 2},
    {Dtype::kF16, "F16", 2},
    {Dtype::kBF16, "BF16", 2},
    {Dtype::kU32, "U32", 4},
    {Dtype::kI32, "I32", 4},
    {Dtype::kF32, "F32", 4},
    {Dtype::kU64, "U64", 8},
    {Dtype::kI64, "I64", 8},
    {Dtype::kF64, "F64", 8},
}};

const DtypeInfo& info(Dtype d) {
  for (const auto& i : kDtypes)
    if (i.dtype == d) return i;
  throw UnsupportedDtypeError("unknown dtype enumerator");
}

// Largest header we are willing to parse; the reference implementation uses
// the same 100 MB cap.
constexpr std::uint64_t kMaxHeaderBytes = 100'000'000;

// Round to a binary format with `precision` significand bits (implicit bit
// included) and minimum normal exponent `emin`, ties to even.
double round_binary(double x, int precision, int emin, double max_finite, std::string_view name) {
  if (!std::isfinite(x)) throw FormatError("cannot narrow non-finite value to " + std::string(name));
  if (x == 0.0) return x;
  const int e = std::max(std::ilogb(x), emin);
  const int quantum = e - (precision - 1);
  const double y = std::ldexp(std::nearbyint(std::ldexp(x, -quantum)), quantum);
  if (std::abs(y) > max_finite) {
    throw FormatError("value " + std::to_string(x) + " overflows " + std::string(name));
  }
  return y;
}

constexpr double kBf16Max = 0x1.fep127;
constexpr double kF16Max = 65504.0;

template <typename T>
void store_le(std::byte* dst, T value) {
  std::memcpy(dst, &value, sizeof(T));
}

template <typename T>
T load_le(const std::byte* src) {
  T value;
  std::memcpy(&value, src, sizeof(T));
  return value;
}

}  // namespace

std::string_view dtype_name(Dtype d) { return info(d).name; }

Dtype parse_dtype(std::string_view name) {
  for (const auto& i : kDtypes)
    if (i.name == name) return i.dtype;
  throw UnsupportedDtypeError("unsupported dtype '" + std::string(name) + "'");
}

std::size_t dtype_size(Dtype d) { return info(d).size; }

bool is_float(Dtype d) { return d == Dtype::kF16 || d == Dtype::kBF16 || d == Dtype::kF32 || d == Dtype::kF64; }

std::uint64_t Tensor::element_count() const {
  std::uint64_t n = 1;
  for (auto s : shape) n *= s;
  return n;
}

double round_to(double value, Dtype dtype) {
  switch (dtype) {
    case Dtype::kF64:
      if (!std::isfinite(value)) throw FormatError("cannot store non-finite value");
      return value;
    case Dtype::kF32: {
      const float f = static_cast<float>(value);
      if (!std::isfinite(f)) throw FormatError("value " + std::to_string(value) + " overflows F32");
      return f;
    }
    case Dtype::kBF16:
      return round_binary(value, 8, -126, kBf16Max, "BF16");
    case Dtype::kF16:
      return round_binary(value, 11, -14, kF16Max, "F16");
    default:
      throw UnsupportedDtypeError("dtype " + std::string(dtype_name(dtype)) + " is not a floating type");
  }
}

std::uint16_t double_to_bf16_bits(double value) {
  // The rounded value is exactly representable as a float whose low 16 bits
  // are zero.
  const auto f = static_cast<float>(round_to(value, Dtype::kBF16));
  return static_cast<std::uint16_t>(std::bit_cast<std::uint32_t>(f) >> 16);
}

double bf16_bits_to_double(std::uint16_t bits) {
  return std::bit_cast<float>(static_cast<std::uint32_t>(bits) << 16);
}

std::uint16_t double_to_f16_bits(double value) {
  const double y = round_to(value, Dtype::kF16);
  const std::uint16_t sign = std::signbit(y) ? 0x8000 : 0;
  const double a = std::abs(y);
  if (a == 0.0) return sign;
  if (a < 0x1.0p-14) return static_cast<std::uint16_t>(sign | static_cast<std::uint16_t>(std::ldexp(a, 24)));
  const int e = std::ilogb(a);
  const auto mant = static_cast<std::uint16_t>(std::ldexp(a, 10 - e) - 1024.0);
  return static_cast<std::uint16_t>(sign | ((e + 15) << 10) | mant);
}

double f16_bits_to_double(std::uint16_t bits) {
  const double sign = (bits & 0x8000) ? -1.0 : 1.0;
  const int exp = (bits >> 10) & 0x1f;
  const int mant = bits & 0x3ff;
  if (exp == 0) return sign * std::ldexp(mant, -24);
  if (exp == 31) return mant == 0 ? sign * std::numeric_limits<double>::infinity() : std::numeric_limits<double>::quiet_NaN();
  return sign * std::ldexp(1024 + mant, exp - 25);
}

std::vector<double> decode(const Tensor& tensor) {
  const std::uint64_t n = tensor.element_count();
  if (tensor.bytes.size() != n * dtype_size(tensor.dtype)) {
    throw FormatError("tensor byte length does not match its shape");
  }
  std::vector<double> out(n);
  const std::byte* p = tensor.bytes.data();
  switch (tensor.dtype) {
    case Dtype::kF64:
      for (std::uint64_t i = 0; i < n; ++i) out[i] = load_le<double>(p + 8 * i);
      break;
    case Dtype::kF32:
      for (std::uint64_t i = 0; i < n; ++i) out[i] = load_le<float>(p + 4 * i);
      break;
    case Dtype::kBF16:
      for (std::uint64_t i = 0; i < n; ++i) out[i] = bf16_bits_to_double(load_le<std::uint16_t>(p + 2 * i));
      break;
    case Dtype::kF16:
      for (std::uint64_t i = 0; i < n; ++i) out[i] = f16_bits_to_double(load_le<std::uint16_t>(p + 2 * i));
      break;
    default:
      throw UnsupportedDtypeError("cannot widen " + std::string(dtype_name(tensor.dtype)) + " tensor to F64");
  }
  return out;
}

Tensor encode(std::span<const double> values, std::vector<std::uint64_t> shape, Dtype dtype) {
  Tensor t;
  t.dtype = dtype;
  t.shape = std::move(shape);
  if (t.element_count() != values.size()) throw FormatError("encode: value count does not match shape");
  const std::size_t width = dtype_size(dtype);
  t.bytes.resize(values.size() * width);
  std::byte* p = t.bytes.data();
  switch (dtype) {
    case Dtype::kF64:
      for (std::size_t i = 0; i < values.size(); ++i) store_le<double>(p + 8 * i, round_to(values[i], dtype));
      break;
    case Dtype::kF32:
      for (std::size_t i = 0; i < values.size(); ++i)
        store_le<float>(p + 4 * i, static_cast<float>(round_to(values[i], dtype)));
      break;
    case Dtype::kBF16:
      for (std::size_t i = 0; i < values.size(); ++i) store_le<std::uint16_t>(p + 2 * i, double_to_bf16_bits(values[i]));
      break;
    case Dtype::kF16:
      for (std::size_t i = 0; i < values.size(); ++i) store_le<std::uint16_t>(p + 2 * i, double_to_f16_bits(values[i]));
      break;
    default:
      throw UnsupportedDtypeError("cannot narrow to " + std::string(dtype_name(dtype)));
  }
  return t;
}

Container parse(std::span<const std::byte> file_bytes) {
  if (file_bytes.size() < 8) throw FormatError("malformed header: file shorter than the 8-byte length prefix");
  const auto header_len = load_le<std::uint64_t>(file_bytes.data());
  if (header_len > kMaxHeaderBytes || header_len > file_bytes.size() - 8) {
    throw FormatError("malformed header: declared header length " + std::to_string(header_len) +
                      " exceeds file size " + std::to_string(file_bytes.size()));
  }
  const auto* header_begin = reinterpret_cast<const char*>(file_bytes.data() + 8);
  json header;
  try {
    header = json::parse(header_begin, header_begin + header_len);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("malformed header: ") + e.what());
  }
  if (!header.is_object()) throw FormatError("malformed header: top level is not an object");

  const std::span<const std::byte> payload = file_bytes.subspan(8 + header_len);
  Container out;
  std::vector<std::pair<std::uint64_t, std::uint64_t>> ranges;

  for (const auto& [name, entry] : header.items()) {
    if (name == "__metadata__") {
      if (!entry.is_object()) throw FormatError("malformed header: __metadata__ is not an object");
      for (const auto& [k, v] : entry.items()) {
        if (!v.is_string()) throw FormatError("malformed header: metadata value for '" + k + "' is not a string");
        out.metadata.emplace(k, v.get<std::string>());
      }
      continue;
    }
    try {
      Tensor t;
      t.dtype = parse_dtype(entry.at("dtype").get<std::string>());
      t.shape = entry.at("shape").get<std::vector<std::uint64_t>>();
      const auto offsets = entry.at("data_offsets").get<std::vector<std::uint64_t>>();
      if (offsets.size() != 2 || offsets[0] > offsets[1] || offsets[1] > payload.size()) {
        throw FormatError("malformed header: bad data_offsets for tensor '" + name + "'");
      }
      if (offsets[1] - offsets[0] != t.element_count() * dtype_size(t.dtype)) {
        throw FormatError("malformed header: tensor '" + name + "' byte range does not match its shape");
      }
      t.bytes.assign(payload.begin() + static_cast<std::ptrdiff_t>(offsets[0]),
                     payload.begin() + static_cast<std::ptrdiff_t>(offsets[1]));
      ranges.emplace_back(offsets[0], offsets[1]);
      out.tensors.emplace(name, std::move(t));
    } catch (const json::exception& e) {
      throw FormatError("malformed header: entry '" + name + "': " + e.what());
    }
  }

  std::sort(ranges.begin(), ranges.end());
  std::uint64_t cursor = 0;
  for (const auto& [begin, end] : ranges) {
    if (begin != cursor) throw FormatError("malformed header: tensor data ranges overlap or leave gaps");
    cursor = end;
  }
  if (cursor != payload.size()) throw FormatError("malformed header: trailing bytes after tensor data");
  return out;
}

std::vector<std::byte> serialize(const Container& container) {
  json header = json::object();
  if (!container.metadata.empty()) {
    json meta = json::object();
    for (const auto& [k, v] : container.metadata) meta[k] = v;
    header["__metadata__"] = std::move(meta);
  }
  std::uint64_t offset = 0;
  for (const auto& [name, t] : container.tensors) {
    if (t.bytes.size() != t.element_count() * dtype_size(t.dtype)) {
      throw FormatError("tensor '" + name + "' byte length does not match its shape");
    }
    header[name] = {{"dtype", dtype_name(t.dtype)},
                    {"shape", t.shape},
                    {"data_offsets", {offset, offset + t.bytes.size()}}};
    offset += t.bytes.size();
  }
  std::string text = header.dump();
  // Pad with spaces so the payload starts 8-byte aligned.
  text.append((8 - text.size() % 8) % 8, ' ');

  std::vector<std::byte> out(8 + text.size() + offset);
  store_le<std::uint64_t>(out.data(), text.size());
  std::memcpy(out.data() + 8, text.data(), text.size());
  std::byte* p = out.data() + 8 + text.size();
  for (const auto& [name, t] : container.tensors) {
    std::memcpy(p, t.bytes.data(), t.bytes.size());
    p += t.bytes.size();
  }
  return out;
}

Container read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0, std::ios::beg);
  std::vector<std::byte> bytes(size);
  if (size > 0 && !in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size))) {
    throw IoError("failed reading '" + path.string() + "'");
  }
  return parse(bytes);
}

void write_file(const Container& container, const std::filesystem::path& path) {
  const auto bytes = serialize(container);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

}  // namespace gauge::safetensors
