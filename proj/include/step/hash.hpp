#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace step {

// 64-bit FNV-1a. Content hashes for artifacts (vocabularies, packed data,
// checkpoints) so stale inputs are refused rather than silently consumed.
class Fnv1a {
 public:
  void update(std::string_view bytes) {
    for (unsigned char c : bytes) {
      state_ ^= c;
      state_ *= 0x100000001b3ULL;
    }
  }
  std::uint64_t digest() const { return state_; }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

inline std::uint64_t fnv1a(std::string_view bytes) {
  Fnv1a h;
  h.update(bytes);
  return h.digest();
}

std::uint64_t hash_file(const std::filesystem::path& path);
std::string hex64(std::uint64_t value);
std::uint64_t parse_hex64(std::string_view text);

}  // namespace step
