#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "probebench/errors.hpp"

namespace probebench::binary {

static_assert(std::endian::native == std::endian::little,
              "binary containers assume a little-endian host");

// Append-only little-endian byte buffer.
class Writer {
 public:
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const char*>(data);
    buffer_.insert(buffer_.end(), p, p + n);
  }

  template <typename T>
  void scalar(T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    bytes(&value, sizeof(T));
  }

  void u8(std::uint8_t v) { scalar(v); }
  void u16(std::uint16_t v) { scalar(v); }
  void u32(std::uint32_t v) { scalar(v); }

  // u16 length prefix + raw UTF-8 bytes.
  void short_string(std::string_view s) {
    if (s.size() > 0xFFFF) throw ValidationError("string too long for u16 length prefix");
    u16(static_cast<std::uint16_t>(s.size()));
    bytes(s.data(), s.size());
  }

  void floats(std::span<const float> values) { bytes(values.data(), values.size_bytes()); }

  const std::vector<char>& buffer() const noexcept { return buffer_; }
  std::size_t size() const noexcept { return buffer_.size(); }

  void save(const std::filesystem::path& path) const {
    if (path.has_parent_path()) {
      std::error_code ec;
      std::filesystem::create_directories(path.parent_path(), ec);
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out.write(buffer_.data(), static_cast<std::streamsize>(buffer_.size()));
    if (!out) throw IoError("write failed: " + path.string());
  }

 private:
  std::vector<char> buffer_;
};

// Thrown by Reader when a read runs past the end of the buffer.
struct Truncated {};

class Reader {
 public:
  explicit Reader(std::vector<char> data) : data_(std::move(data)) {}

  static Reader from_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open for reading: " + path.string());
    std::vector<char> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return Reader(std::move(data));
  }

  void bytes(void* out, std::size_t n) {
    if (remaining() < n) throw Truncated{};
    std::memcpy(out, data_.data() + pos_, n);
    pos_ += n;
  }

  template <typename T>
  T scalar() {
    T value;
    bytes(&value, sizeof(T));
    return value;
  }

  std::uint8_t u8() { return scalar<std::uint8_t>(); }
  std::uint16_t u16() { return scalar<std::uint16_t>(); }
  std::uint32_t u32() { return scalar<std::uint32_t>(); }

  std::string short_string() {
    const std::size_t n = u16();
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }

  void floats(std::span<float> out) { bytes(out.data(), out.size_bytes()); }

  std::size_t remaining() const noexcept { return data_.size() - pos_; }
  std::size_t position() const noexcept { return pos_; }

 private:
  std::vector<char> data_;
  std::size_t pos_ = 0;
};

}  // namespace probebench::binary
