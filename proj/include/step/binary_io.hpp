#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <utility>
#include <vector>

#include "step/error.hpp"

namespace step {

static_assert(std::endian::native == std::endian::little,
              "binary artifact formats are little-endian; big-endian hosts are unsupported");

// Little-endian fixed-width writer over an ostream.
class BinaryWriter {
 public:
  explicit BinaryWriter(std::ostream& out) : out_(out) {}

  template <class T>
  void put(T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    out_.write(reinterpret_cast<const char*>(&value), sizeof(T));
    written_ += sizeof(T);
  }
  template <class T>
  void put_array(std::span<const T> values) {
    out_.write(reinterpret_cast<const char*>(values.data()),
               static_cast<std::streamsize>(values.size_bytes()));
    written_ += values.size_bytes();
  }
  void put_bytes(std::string_view bytes) {
    out_.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    written_ += bytes.size();
  }
  void put_string(std::string_view s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    put_bytes(s);
  }
  std::uint64_t offset() const { return written_; }
  void check(const std::string& what) const {
    if (!out_) throw Error("write failed: " + what);
  }

 private:
  std::ostream& out_;
  std::uint64_t written_ = 0;
};

class BinaryReader {
 public:
  BinaryReader(std::istream& in, std::string what) : in_(in), what_(std::move(what)) {}

  template <class T>
  T get() {
    T value{};
    read(reinterpret_cast<char*>(&value), sizeof(T));
    return value;
  }
  template <class T>
  void get_array(std::span<T> values) {
    read(reinterpret_cast<char*>(values.data()), values.size_bytes());
  }
  std::string get_bytes(std::size_t n) {
    std::string s(n, '\0');
    read(s.data(), n);
    return s;
  }
  std::string get_string(std::size_t max_len = 1u << 20) {
    const auto n = get<std::uint32_t>();
    if (n > max_len) throw Error(what_ + ": corrupt string length");
    return get_bytes(n);
  }

 private:
  void read(char* dst, std::size_t n) {
    in_.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) throw Error(what_ + ": truncated file");
  }
  std::istream& in_;
  std::string what_;
};

}  // namespace step
