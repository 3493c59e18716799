#pragma once

#include <fstream>
#include <map>
#include <string>

#include "tomen/common.hpp"

namespace tomen::test {

// Parse a tests/golden/*.golden file of key=value lines.
inline std::map<std::string, std::string> load_golden(const std::string& name) {
  std::string path = std::string(TOMEN_GOLDEN_DIR) + "/" + name;
  std::ifstream in(path);
  if (!in) throw std::runtime_error("missing golden file: " + path);
  std::map<std::string, std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    out[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return out;
}

inline Bytes golden_bytes(const std::map<std::string, std::string>& g, const std::string& key) {
  auto it = g.find(key);
  if (it == g.end()) throw std::runtime_error("golden key missing: " + key);
  return hex_decode(it->second);
}

}  // namespace tomen::test
