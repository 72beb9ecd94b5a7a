#pragma once

#include "sdlab/types.hpp"

#include <json.hpp>

#include <cmath>
#include <initializer_list>
#include <string>

namespace sdlab::jsonu {

using nlohmann::json;

[[noreturn]] inline void fail(const std::string& what, const std::string& path, const std::string& msg) {
  throw Error(what + " " + (path.empty() ? std::string("/") : path) + ": " + msg);
}

/// Path-tracking reader over one JSON object.
class Reader {
 public:
  Reader(const json& j, std::string path, std::string what) : j_(j), path_(std::move(path)), what_(std::move(what)) {
    if (!j_.is_object()) fail(what_, path_, "expected an object");
  }

  const json& raw() const { return j_; }
  const std::string& path() const { return path_; }
  std::string at(const std::string& key) const { return path_ + "/" + key; }
  bool has(const std::string& key) const { return j_.contains(key); }
  [[noreturn]] void error(const std::string& key, const std::string& msg) const { fail(what_, at(key), msg); }

  const json& need(const std::string& key) const {
    auto it = j_.find(key);
    if (it == j_.end()) error(key, "missing required key");
    return *it;
  }

  Reader object(const std::string& key) const { return Reader(need(key), at(key), what_); }

  double number(const std::string& key, double def) const { return has(key) ? number(key) : def; }
  double number(const std::string& key) const {
    const json& v = need(key);
    if (!v.is_number()) error(key, "expected a number");
    const double d = v.get<double>();
    if (!std::isfinite(d)) error(key, "must be finite");
    return d;
  }

  long integer(const std::string& key, long def) const { return has(key) ? integer(key) : def; }
  long integer(const std::string& key) const {
    const json& v = need(key);
    if (!v.is_number_integer()) error(key, "expected an integer");
    return v.get<long>();
  }

  bool boolean(const std::string& key, bool def) const {
    if (!has(key)) return def;
    if (!j_[key].is_boolean()) error(key, "expected true or false");
    return j_[key].get<bool>();
  }

  std::string string(const std::string& key, const std::string& def) const { return has(key) ? string(key) : def; }
  std::string string(const std::string& key) const {
    const json& v = need(key);
    if (!v.is_string()) error(key, "expected a string");
    return v.get<std::string>();
  }

  /// Rejects keys outside `allowed` so typos do not pass silently.
  void only(std::initializer_list<const char*> allowed) const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      bool ok = false;
      for (const char* a : allowed) ok = ok || it.key() == a;
      if (!ok) error(it.key(), "unknown key");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::string what_;
};

}  // namespace sdlab::jsonu
