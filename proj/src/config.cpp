#include "pskd/config.hpp"

#include <fstream>
#include <sstream>

#include "pskd/common.hpp"

namespace pskd {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace

Config Config::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("cannot open config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_string(ss.str(), path);
}

Config Config::from_string(const std::string& text, const std::string& what) {
  Config cfg;
  cfg.what_ = what;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      fail(what + ":" + std::to_string(line_no) + ": expected key=value, got '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) fail(what + ":" + std::to_string(line_no) + ": empty key");
    cfg.values_[key] = value;
  }
  return cfg;
}

void Config::set_pair(const std::string& pair) {
  const auto eq = pair.find('=');
  if (eq == std::string::npos) fail("override must be key=value, got '" + pair + "'");
  set(trim(pair.substr(0, eq)), trim(pair.substr(eq + 1)));
}

void Config::set(const std::string& key, const std::string& value) { values_[key] = value; }

bool Config::has(const std::string& key) const {
  used_.insert(key);
  return values_.count(key) > 0;
}

std::string Config::raw(const std::string& key) const {
  used_.insert(key);
  auto it = values_.find(key);
  if (it == values_.end()) fail(what_ + ": missing key '" + key + "'");
  return it->second;
}

std::string Config::get_string(const std::string& key, const std::string& def) const {
  used_.insert(key);
  auto it = values_.find(key);
  return it == values_.end() ? def : it->second;
}

double Config::get_double(const std::string& key, double def) const {
  used_.insert(key);
  auto it = values_.find(key);
  if (it == values_.end()) return def;
  try {
    size_t pos = 0;
    const double v = std::stod(it->second, &pos);
    if (pos != it->second.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    fail(what_ + ": key '" + key + "' is not a number: '" + it->second + "'");
  }
}

int Config::get_int(const std::string& key, int def) const {
  const double v = get_double(key, static_cast<double>(def));
  const int i = static_cast<int>(v);
  if (static_cast<double>(i) != v)
    fail(what_ + ": key '" + key + "' must be an integer");
  return i;
}

uint64_t Config::get_u64(const std::string& key, uint64_t def) const {
  used_.insert(key);
  auto it = values_.find(key);
  if (it == values_.end()) return def;
  try {
    size_t pos = 0;
    const unsigned long long v = std::stoull(it->second, &pos);
    if (pos != it->second.size()) throw std::invalid_argument("trailing");
    return static_cast<uint64_t>(v);
  } catch (const std::exception&) {
    fail(what_ + ": key '" + key + "' is not an unsigned integer: '" + it->second + "'");
  }
}

bool Config::get_bool(const std::string& key, bool def) const {
  used_.insert(key);
  auto it = values_.find(key);
  if (it == values_.end()) return def;
  const std::string& v = it->second;
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  fail(what_ + ": key '" + key + "' is not a boolean: '" + v + "'");
}

std::vector<std::string> Config::unused_keys() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : values_)
    if (!used_.count(k)) out.push_back(k);
  return out;
}

void Config::fail_on_unused() const {
  const auto unused = unused_keys();
  if (unused.empty()) return;
  std::string msg = what_ + ": unknown key(s):";
  for (const auto& k : unused) msg += " '" + k + "'";
  fail(msg);
}

}  // namespace pskd
