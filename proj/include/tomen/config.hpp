#pragma once

// Plain-text key=value configuration. Nested keys are dot-separated
// ("relay.address"). '#' starts a comment; blank lines are skipped. Commands
// validate against their known-key set and reject unknown keys with the
// offending line number.

#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "tomen/common.hpp"

namespace tomen {

class ConfigFile {
 public:
  static ConfigFile parse_text(const std::string& text) {
    ConfigFile cfg;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      auto hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      std::string trimmed = trim(line);
      if (trimmed.empty()) continue;
      auto eq = trimmed.find('=');
      if (eq == std::string::npos) {
        throw Error(Errc::config, "line " + std::to_string(line_no) + ": expected key=value");
      }
      std::string key = trim(trimmed.substr(0, eq));
      std::string value = trim(trimmed.substr(eq + 1));
      if (key.empty()) {
        throw Error(Errc::config, "line " + std::to_string(line_no) + ": empty key");
      }
      cfg.values_[key] = value;
      cfg.lines_[key] = line_no;
    }
    return cfg;
  }

  static ConfigFile load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(Errc::config, "cannot open config file " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_text(buf.str());
  }

  void require_known(const std::set<std::string>& known_keys) const {
    for (const auto& [key, value] : values_) {
      if (!known_keys.count(key)) {
        throw Error(Errc::config,
                    "line " + std::to_string(lines_.at(key)) + ": unknown key '" + key + "'");
      }
    }
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string get(const std::string& key, const std::string& fallback = "") const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  uint64_t get_u64(const std::string& key, uint64_t fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
      return std::stoull(it->second);
    } catch (const std::exception&) {
      throw Error(Errc::config, "line " + std::to_string(lines_.at(key)) + ": '" + key +
                                    "' must be an integer");
    }
  }

  bool get_bool(const std::string& key, bool fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    if (it->second == "true" || it->second == "1") return true;
    if (it->second == "false" || it->second == "0") return false;
    throw Error(Errc::config,
                "line " + std::to_string(lines_.at(key)) + ": '" + key + "' must be a boolean");
  }

  std::vector<std::string> get_list(const std::string& key) const {
    std::vector<std::string> out;
    auto it = values_.find(key);
    if (it == values_.end()) return out;
    std::istringstream in(it->second);
    std::string item;
    while (std::getline(in, item, ',')) {
      item = trim(item);
      if (!item.empty()) out.push_back(item);
    }
    return out;
  }

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  static std::string trim(const std::string& s) {
    auto begin = s.find_first_not_of(" \t\r");
    auto end = s.find_last_not_of(" \t\r");
    return begin == std::string::npos ? "" : s.substr(begin, end - begin + 1);
  }

  std::map<std::string, std::string> values_;
  std::map<std::string, int> lines_;
};

}  // namespace tomen
