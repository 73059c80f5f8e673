#include <fstream>
#include <sstream>

#include "step/error.hpp"
#include "step/hash.hpp"
#include "step/run_manifest.hpp"

namespace step {

RunManifest RunManifest::load(const std::filesystem::path& dir) {
  RunManifest m;
  m.dir_ = dir;
  std::ifstream in(dir / kFileName);
  if (!in) return m;
  std::string line;
  if (!std::getline(in, line) || line != "steprun v1") throw Error("run manifest: bad header in " + (dir / kFileName).string());
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream s(line);
    std::string kind, name, value;
    if (!std::getline(s, kind, '\t') || !std::getline(s, name, '\t') || !std::getline(s, value)) {
      throw Error("run manifest: malformed line '" + line + "'");
    }
    if (kind == "artifact") m.artifacts_[name] = parse_hex64(value);
    else if (kind == "stage") m.stages_[name] = value;
    else throw Error("run manifest: unknown entry '" + kind + "'");
  }
  return m;
}

void RunManifest::save() const {
  std::filesystem::create_directories(dir_);
  const auto target = dir_ / kFileName;
  const auto tmp = target.string() + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw Error("cannot write " + target.string());
    out << "steprun v1\n";
    for (const auto& [name, hash] : artifacts_) out << "artifact\t" << name << '\t' << hex64(hash) << '\n';
    for (const auto& [name, key] : stages_) out << "stage\t" << name << '\t' << key << '\n';
  }
  std::filesystem::rename(tmp, target);
}

std::uint64_t RunManifest::record(const std::string& file) {
  const std::uint64_t h = hash_file(path(file));
  artifacts_[file] = h;
  return h;
}

std::optional<std::uint64_t> RunManifest::recorded(const std::string& file) const {
  const auto it = artifacts_.find(file);
  if (it == artifacts_.end()) return std::nullopt;
  return it->second;
}

std::uint64_t RunManifest::verify(const std::string& file, const std::string& what) const {
  const auto p = path(file);
  if (!std::filesystem::exists(p)) throw Error("missing " + what);
  const std::uint64_t h = hash_file(p);
  if (const auto r = recorded(file); r && *r != h) {
    throw Error("hash mismatch for " + file + ": recorded " + hex64(*r) + ", found " + hex64(h));
  }
  return h;
}

void RunManifest::set_stage(const std::string& stage, const std::string& key) { stages_[stage] = key; }

bool RunManifest::up_to_date(const std::string& stage, const std::string& key,
                             std::span<const std::string> outputs) const {
  const auto it = stages_.find(stage);
  if (it == stages_.end() || it->second != key) return false;
  for (const std::string& f : outputs) {
    const auto r = recorded(f);
    if (!r || !std::filesystem::exists(path(f)) || hash_file(path(f)) != *r) return false;
  }
  return true;
}

}  // namespace step
