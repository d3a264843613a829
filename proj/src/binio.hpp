// Little-endian binary stream helpers for the checkpoint and vector files.
#pragma once

#include <algorithm>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <type_traits>

#include "fvlab/error.hpp"

namespace fvlab::detail {

class Writer {
 public:
  explicit Writer(const std::filesystem::path& path) : out_(path, std::ios::binary | std::ios::trunc), path_(path) {
    if (!out_) throw IoError("cannot write '" + path.string() + "'");
  }
  template <typename U>
  void put(U v) {
    static_assert(std::is_trivially_copyable_v<U>);
    unsigned char buf[sizeof(U)];
    std::memcpy(buf, &v, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(U));
    out_.write(reinterpret_cast<const char*>(buf), sizeof(U));
  }
  void bytes(const char* p, std::size_t n) { out_.write(p, static_cast<std::streamsize>(n)); }
  void finish() {
    out_.flush();
    if (!out_) throw IoError("write failed for '" + path_.string() + "'");
  }

 private:
  std::ofstream out_;
  std::filesystem::path path_;
};

class Reader {
 public:
  Reader(const std::filesystem::path& path, std::string what) : in_(path, std::ios::binary), what_(std::move(what)) {
    if (!in_) throw IoError("cannot open '" + path.string() + "'");
  }
  template <typename U>
  U get() {
    unsigned char buf[sizeof(U)];
    in_.read(reinterpret_cast<char*>(buf), sizeof(U));
    if (!in_) throw ParseError(what_ + " truncated");
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(U));
    U v;
    std::memcpy(&v, buf, sizeof(U));
    return v;
  }
  void bytes(char* p, std::size_t n) {
    in_.read(p, static_cast<std::streamsize>(n));
    if (!in_) throw ParseError(what_ + " truncated");
  }

 private:
  std::ifstream in_;
  std::string what_;
};

}  // namespace fvlab::detail
