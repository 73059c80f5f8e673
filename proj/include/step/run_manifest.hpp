#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>

namespace step {

// Per-run bookkeeping: content hashes of every artifact a stage produced and
// a key per stage summarizing its parameters and input hashes.
class RunManifest {
 public:
  static constexpr const char* kFileName = "manifest.txt";

  // Loads <dir>/manifest.txt, or starts empty if it does not exist.
  static RunManifest load(const std::filesystem::path& dir);
  void save() const;

  const std::filesystem::path& dir() const { return dir_; }
  std::filesystem::path path(const std::string& artifact_file) const { return dir_ / artifact_file; }

  // Stores the current hash of <dir>/<file> under `file`.
  std::uint64_t record(const std::string& file);
  std::optional<std::uint64_t> recorded(const std::string& file) const;
  // Throws "missing <what>" if the file is absent, or a hash-mismatch error if
  // it differs from the recorded hash. Returns the hash.
  std::uint64_t verify(const std::string& file, const std::string& what) const;

  void set_stage(const std::string& stage, const std::string& key);
  // True when the stage ran with this key and every output still matches its recorded hash.
  bool up_to_date(const std::string& stage, const std::string& key, std::span<const std::string> outputs) const;

 private:
  std::filesystem::path dir_;
  std::map<std::string, std::uint64_t> artifacts_;
  std::map<std::string, std::string> stages_;
};

}  // namespace step
