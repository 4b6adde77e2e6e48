#pragma once

// Little-endian byte buffers shared by the CBK1, EMB1 and KLX1 formats. Every
// format ends with a CRC32 (zlib polynomial) of all bytes preceding it.

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "kelixpq/error.hpp"

namespace kelixpq::io {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

inline std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  std::size_t off = 0;
  while (off < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - off, 1u << 30));
    crc = ::crc32(crc, bytes.data() + off, chunk);
    off += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

class Writer {
 public:
  template <class V>
    requires std::is_arithmetic_v<V>
  void put(V v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes_.insert(bytes_.end(), p, p + sizeof(V));
  }
  template <class V>
    requires std::is_arithmetic_v<V>
  void put_array(std::span<const V> vs) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(vs.data());
    bytes_.insert(bytes_.end(), p, p + vs.size_bytes());
  }
  void put_bytes(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
  void put_bytes(std::span<const std::uint8_t> s) {
    bytes_.insert(bytes_.end(), s.begin(), s.end());
  }
  void put_string(std::string_view s) {
    put(static_cast<std::uint32_t>(s.size()));
    put_bytes(s);
  }
  /// Appends CRC32 of everything written so far.
  void seal() { put(crc32(bytes_)); }

  const std::vector<std::uint8_t>& bytes() const { return bytes_; }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  std::vector<std::uint8_t> bytes_;
};

class Reader {
 public:
  Reader(std::span<const std::uint8_t> bytes, std::string what)
      : bytes_(bytes), what_(std::move(what)) {}

  template <class V>
    requires std::is_arithmetic_v<V>
  V get() {
    need(sizeof(V));
    V v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(V));
    pos_ += sizeof(V);
    return v;
  }
  template <class V>
    requires std::is_arithmetic_v<V>
  std::vector<V> get_array(std::size_t count) {
    if (count > remaining() / sizeof(V)) truncated();
    std::vector<V> out(count);
    std::memcpy(out.data(), bytes_.data() + pos_, count * sizeof(V));
    pos_ += count * sizeof(V);
    return out;
  }
  std::string get_bytes(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::string get_string() { return get_bytes(get<std::uint32_t>()); }

  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  /// Checks that exactly the trailing CRC32 remains and that it matches.
  void verify_crc() {
    if (remaining() != 4) {
      if (remaining() < 4) truncated();
      throw FormatError(what_ + ": unexpected trailing bytes");
    }
    const auto expect = crc32(bytes_.first(pos_));
    if (get<std::uint32_t>() != expect) throw FormatError(what_ + ": CRC32 mismatch");
  }

  [[noreturn]] void truncated() const { throw FormatError(what_ + ": truncated file"); }

 private:
  void need(std::size_t n) const {
    if (n > remaining()) truncated();
  }

  std::span<const std::uint8_t> bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed: " + path.string());
}

}  // namespace kelixpq::io
