#pragma once

// Little-endian byte helpers shared by the binary formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>
#include <vector>

namespace vlmkd::binio {

template <class T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    T out;
    auto* src = reinterpret_cast<const unsigned char*>(&v);
    auto* dst = reinterpret_cast<unsigned char*>(&out);
    for (std::size_t i = 0; i < sizeof(T); ++i) dst[i] = src[sizeof(T) - 1 - i];
    return out;
  }
}

class Writer {
 public:
  template <class T>
  void put(T v) {
    v = to_little(v);
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(T));
  }
  void put_f32(float v) { put(std::bit_cast<std::uint32_t>(v)); }
  void put_f64(double v) { put(std::bit_cast<std::uint64_t>(v)); }
  void put_bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  const std::vector<char>& bytes() const { return buf_; }

 private:
  std::vector<char> buf_;
};

/// Bounds-checked cursor. `ok()` turns false on the first short read and the
/// offending offset is kept for error messages.
class Reader {
 public:
  explicit Reader(std::string_view data) : data_(data) {}

  template <class T>
  bool get(T& out) {
    if (!ensure(sizeof(T))) return false;
    T v;
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    out = to_little(v);
    pos_ += sizeof(T);
    return true;
  }
  bool get_f32(float& out) {
    std::uint32_t bits;
    if (!get(bits)) return false;
    out = std::bit_cast<float>(bits);
    return true;
  }
  bool get_f64(double& out) {
    std::uint64_t bits;
    if (!get(bits)) return false;
    out = std::bit_cast<double>(bits);
    return true;
  }
  bool get_bytes(std::size_t n, std::string& out) {
    if (!ensure(n)) return false;
    out.assign(data_.data() + pos_, n);
    pos_ += n;
    return true;
  }

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }
  bool ok() const { return ok_; }

 private:
  bool ensure(std::size_t n) {
    if (!ok_ || data_.size() - pos_ < n) {
      ok_ = false;
      return false;
    }
    return true;
  }

  std::string_view data_;
  std::size_t pos_ = 0;
  bool ok_ = true;
};

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::vector<char>& bytes);
void write_text(const std::string& path, const std::string& text);

}  // namespace vlmkd::binio
