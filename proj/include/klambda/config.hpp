#pragma once

#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace klambda {

/// Flat key/value configuration in a small TOML subset:
///
///   # comment
///   seed = 42
///   [optimizer]
///   tol = 0.01
///   crf_list = [22, 27, 32, 37, 42]
///   cmd = "x265 --input {input} ..."
///
/// Keys under a `[section]` header are stored as `section.key`. Values are
/// kept as text and converted on lookup; lookups of a present key with the
/// wrong type throw FormatError.
class Config {
 public:
  static Config parse(std::istream& in);
  static Config load(const std::string& path);

  bool contains(const std::string& key) const { return values_.count(key) != 0; }

  std::optional<std::string> string(const std::string& key) const;
  std::optional<double> number(const std::string& key) const;
  std::optional<long long> integer(const std::string& key) const;
  std::optional<bool> boolean(const std::string& key) const;
  std::optional<std::vector<int>> int_list(const std::string& key) const;

  void set(const std::string& key, std::string value) { values_[key] = Entry{{std::move(value)}, false}; }

  /// Keys in sorted order with their raw text; arrays as `[a, b]`.
  std::map<std::string, std::string> snapshot() const;

 private:
  struct Entry {
    std::vector<std::string> items;
    bool array = false;
  };
  const Entry* scalar(const std::string& key) const;

  std::map<std::string, Entry> values_;
};

}  // namespace klambda
