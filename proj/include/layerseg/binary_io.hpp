#pragma once

// Little-endian primitives shared by the model and scan containers.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include "layerseg/error.hpp"

namespace layerseg::io {

template <class T>
T byteswap_if_big(T value) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(value);
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
    return std::bit_cast<T>(bytes);
  } else {
    return value;
  }
}

class Writer {
 public:
  void bytes(std::string_view s) { buffer_.insert(buffer_.end(), s.begin(), s.end()); }

  template <class T>
  void put(T value) {
    value = byteswap_if_big(value);
    const auto raw = std::bit_cast<std::array<char, sizeof(T)>>(value);
    buffer_.insert(buffer_.end(), raw.begin(), raw.end());
  }

  void u32(std::uint32_t v) { put(v); }
  void f64(double v) { put(v); }
  void f32(float v) { put(v); }

  const std::vector<char>& buffer() const { return buffer_; }

  void save(const std::string& path) const;

 private:
  std::vector<char> buffer_;
};

inline void write_file(const std::string& path, const std::vector<char>& data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!out) throw Error("failed writing '" + path + "'");
}

inline void Writer::save(const std::string& path) const { write_file(path, buffer_); }

class Reader {
 public:
  explicit Reader(std::vector<char> data, std::string origin = "<memory>")
      : data_(std::move(data)), origin_(std::move(origin)) {}

  static Reader from_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open '" + path + "'");
    std::vector<char> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return Reader(std::move(data), path);
  }

  std::string bytes(std::size_t n) {
    need(n);
    std::string out(data_.data() + pos_, n);
    pos_ += n;
    return out;
  }

  template <class T>
  T get() {
    need(sizeof(T));
    std::array<char, sizeof(T)> raw{};
    std::memcpy(raw.data(), data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return byteswap_if_big(std::bit_cast<T>(raw));
  }

  std::uint32_t u32() { return get<std::uint32_t>(); }
  double f64() { return get<double>(); }
  float f32() { return get<float>(); }

  bool at_end() const { return pos_ == data_.size(); }
  const std::string& origin() const { return origin_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) {
      throw FormatError("truncated file '" + origin_ + "': needed " + std::to_string(n) +
                        " bytes at offset " + std::to_string(pos_) + ", " +
                        std::to_string(data_.size() - pos_) + " available");
    }
  }

  std::vector<char> data_;
  std::size_t pos_ = 0;
  std::string origin_;
};

}  // namespace layerseg::io
