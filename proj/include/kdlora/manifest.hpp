#pragma once

#include <cstdint>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "kdlora/common.hpp"

namespace kdlora {

/// FNV-1a (64-bit) over a file's bytes, as a hex string. Used to fingerprint
/// command inputs in manifests.
inline std::string file_fingerprint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("fingerprint: cannot open " + path);
  std::uint64_t hash = 0xcbf29ce484222325ULL;
  char buffer[4096];
  while (in.read(buffer, sizeof(buffer)) || in.gcount() > 0) {
    const std::streamsize got = in.gcount();
    for (std::streamsize i = 0; i < got; ++i) {
      hash ^= static_cast<unsigned char>(buffer[i]);
      hash *= 0x100000001b3ULL;
    }
    if (got < static_cast<std::streamsize>(sizeof(buffer))) break;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << hash;
  return os.str();
}

/// Record of one CLI invocation: the command, every resolved config value,
/// input fingerprints and output paths. Re-running with the same manifest
/// inputs reproduces the outputs byte-for-byte (timing fields aside).
struct RunManifest {
  std::string command;
  nlohmann::json resolved_config = nlohmann::json::object();
  std::uint64_t seed = 0;
  nlohmann::json input_hashes = nlohmann::json::object();
  std::vector<std::string> output_paths;

  void add_input(const std::string& path) {
    input_hashes[path] = file_fingerprint(path);
  }

  nlohmann::json to_json() const {
    return nlohmann::json{{"command", command},
                          {"tool_version", kVersion},
                          {"seed", seed},
                          {"resolved_config", resolved_config},
                          {"input_hashes", input_hashes},
                          {"output_paths", output_paths}};
  }

  void write(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("manifest: cannot write " + path);
    out << to_json().dump(2) << '\n';
  }
};

}  // namespace kdlora
