#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <string_view>

namespace cgt::io {

/// Little-endian binary writer over an ofstream. Throws ValidationError on I/O failure.
class BinaryWriter {
 public:
  explicit BinaryWriter(const std::filesystem::path& path);

  void magic(std::string_view four_cc);
  void u8(std::uint8_t v);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void i64(std::int64_t v);
  void f32(float v);
  void f64(double v);
  void f32s(std::span<const float> values);
  void close();

 private:
  void raw(const void* data, std::size_t size);

  std::filesystem::path path_;
  std::ofstream out_;
};

class BinaryReader {
 public:
  explicit BinaryReader(const std::filesystem::path& path);

  /// Throws ValidationError if the next four bytes differ from `four_cc`.
  void expect_magic(std::string_view four_cc);
  std::uint8_t u8();
  std::uint32_t u32();
  std::uint64_t u64();
  std::int64_t i64();
  float f32();
  double f64();
  void f32s(std::span<float> out);
  bool at_end();

 private:
  void raw(void* data, std::size_t size);

  std::filesystem::path path_;
  std::ifstream in_;
};

/// Hex SHA-256 of a file's bytes.
std::string sha256_file(const std::filesystem::path& path);

/// Shortest decimal that round-trips to the same float / double.
std::string format_shortest(float v);
std::string format_shortest(double v);

}  // namespace cgt::io
