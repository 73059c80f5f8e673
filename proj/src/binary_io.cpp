#include <cstdio>
#include <fstream>
#include <iterator>

#include "step/binary_io.hpp"
#include "step/hash.hpp"

namespace step {

std::uint64_t hash_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  Fnv1a h;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof(buf));
    h.update(std::string_view(buf, static_cast<std::size_t>(in.gcount())));
  }
  return h.digest();
}

std::string hex64(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(value));
  return buf;
}

std::uint64_t parse_hex64(std::string_view text) {
  if (text.empty() || text.size() > 16) throw Error("bad hex hash '" + std::string(text) + "'");
  std::uint64_t v = 0;
  for (char c : text) {
    v <<= 4;
    if (c >= '0' && c <= '9') v |= static_cast<std::uint64_t>(c - '0');
    else if (c >= 'a' && c <= 'f') v |= static_cast<std::uint64_t>(c - 'a' + 10);
    else if (c >= 'A' && c <= 'F') v |= static_cast<std::uint64_t>(c - 'A' + 10);
    else throw Error("bad hex hash '" + std::string(text) + "'");
  }
  return v;
}

}  // namespace step
