#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace pskd {

// key=value configuration file: one pair per line, '#' starts a comment,
// whitespace around keys and values is ignored. Typed getters track which
// keys were consumed so unknown (usually misspelled) keys can be reported.
class Config {
 public:
  Config() = default;
  static Config from_file(const std::string& path);
  static Config from_string(const std::string& text, const std::string& what = "config");

  /// Applies a "key=value" override string (CLI --set).
  void set_pair(const std::string& pair);
  void set(const std::string& key, const std::string& value);

  bool has(const std::string& key) const;
  std::string get_string(const std::string& key, const std::string& def) const;
  double get_double(const std::string& key, double def) const;
  int get_int(const std::string& key, int def) const;
  uint64_t get_u64(const std::string& key, uint64_t def) const;
  bool get_bool(const std::string& key, bool def) const;

  /// Keys present in the file but never read by any getter.
  std::vector<std::string> unused_keys() const;
  void fail_on_unused() const;

 private:
  std::string raw(const std::string& key) const;

  std::map<std::string, std::string> values_;
  mutable std::set<std::string> used_;
  std::string what_ = "config";
};

}  // namespace pskd
