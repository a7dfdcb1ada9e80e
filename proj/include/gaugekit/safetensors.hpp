#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace gauge::safetensors {

// Element types understood by the container. Only the floating types can be
// widened to double for math; the rest are carried through as raw bytes.
enum class Dtype { kBool, kU8, kI8, kU16, kI16, kF16, kBF16, kU32, kI32, kF32, kU64, kI64, kF64 };

std::string_view dtype_name(Dtype d);
// Throws UnsupportedDtypeError for names outside the table.
Dtype parse_dtype(std::string_view name);
std::size_t dtype_size(Dtype d);
bool is_float(Dtype d);

struct Tensor {
  Dtype dtype = Dtype::kF32;
  std::vector<std::uint64_t> shape;
  std::vector<std::byte> bytes;

  std::uint64_t element_count() const;
  friend bool operator==(const Tensor&, const Tensor&) = default;
};

// A whole safetensors file: 8-byte little-endian header length, JSON header,
// then the tensor payload. Tensor names iterate in sorted order, which is
// also the order their bytes are laid out on write.
struct Container {
  std::map<std::string, Tensor> tensors;
  std::map<std::string, std::string> metadata;

  friend bool operator==(const Container&, const Container&) = default;
};

// Throws FormatError on truncated input, bad JSON, out-of-range or
// overlapping offsets, and UnsupportedDtypeError on unknown dtype names.
Container parse(std::span<const std::byte> file_bytes);
std::vector<std::byte> serialize(const Container& container);

Container read_file(const std::filesystem::path& path);
void write_file(const Container& container, const std::filesystem::path& path);

// Widen a floating tensor to doubles (row-major, as stored).
std::vector<double> decode(const Tensor& tensor);

// Narrow doubles to dtype with round-to-nearest-even. Throws FormatError if a
// value is not finite or overflows the target format.
Tensor encode(std::span<const double> values, std::vector<std::uint64_t> shape, Dtype dtype);

// Value after a round trip through dtype (narrow then widen).
double round_to(double value, Dtype dtype);

std::uint16_t double_to_bf16_bits(double value);
std::uint16_t double_to_f16_bits(double value);
double bf16_bits_to_double(std::uint16_t bits);
double f16_bits_to_double(std::uint16_t bits);

}  // namespace gauge::safetensors
