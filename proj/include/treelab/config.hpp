#pragma once

// Strict JSON object reading: every key must be consumed, so a misspelled
// option is reported instead of silently falling back to its default.

#include <set>
#include <string>

#include <json.hpp>

#include "treelab/error.hpp"

namespace treelab {

class ObjectReader {
public:
  ObjectReader(const nlohmann::json& j, std::string context) : j_(j), context_(std::move(context)) {
    if (!j_.is_object()) throw UsageError(context_ + ": expected a JSON object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  template <typename T>
  void optional(const std::string& key, T& out) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw UsageError(context_ + ": bad value for '" + key + "': " + j_.at(key).dump());
    }
  }

  template <typename T>
  void required(const std::string& key, T& out) {
    if (!j_.contains(key)) throw UsageError(context_ + ": missing key '" + key + "'");
    optional(key, out);
  }

  /// Returns the nested value (or nullptr) and marks it consumed.
  const nlohmann::json* child(const std::string& key) {
    if (!j_.contains(key)) return nullptr;
    seen_.insert(key);
    return &j_.at(key);
  }

  const std::string& context() const { return context_; }

  /// Throws on any key that was never read.
  void finish() const {
    for (const auto& item : j_.items())
      if (!seen_.count(item.key())) throw UsageError(context_ + ": unknown key '" + item.key() + "'");
  }

private:
  const nlohmann::json& j_;
  std::string context_;
  std::set<std::string> seen_;
};

}  // namespace treelab
