#include "klambda/config.hpp"

#include <fstream>
#include <istream>

#include "csv_util.hpp"
#include "klambda/error.hpp"

namespace klambda {

namespace {

[[noreturn]] void fail(std::size_t line, const std::string& what) {
  throw Error(Errc::FormatError, "config line " + std::to_string(line) + ": " + what);
}

// Drops a trailing `# comment` that is not inside a quoted string.
std::string strip_comment(const std::string& line) {
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"') quoted = !quoted;
    if (line[i] == '#' && !quoted) return line.substr(0, i);
  }
  return line;
}

std::string unquote(std::string_view text, std::size_t line) {
  if (text.size() >= 2 && text.front() == '"' && text.back() == '"') {
    return std::string(text.substr(1, text.size() - 2));
  }
  if (text.find('"') != std::string_view::npos) fail(line, "unbalanced quotes");
  if (text.empty()) fail(line, "empty value");
  return std::string(text);
}

}  // namespace

Config Config::parse(std::istream& in) {
  Config cfg;
  std::string section;
  std::string raw;
  std::size_t row = 0;
  while (std::getline(in, raw)) {
    ++row;
    const std::string stripped = strip_comment(raw);
    const std::string_view line = detail::trim(stripped);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') fail(row, "unterminated section header");
      section = std::string(detail::trim(line.substr(1, line.size() - 2)));
      if (section.empty()) fail(row, "empty section name");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) fail(row, "expected key = value");
    const std::string_view key = detail::trim(line.substr(0, eq));
    const std::string_view value = detail::trim(line.substr(eq + 1));
    if (key.empty()) fail(row, "missing key");

    Entry entry;
    if (!value.empty() && value.front() == '[') {
      if (value.back() != ']') fail(row, "unterminated array");
      entry.array = true;
      const std::string_view body = detail::trim(value.substr(1, value.size() - 2));
      if (!body.empty()) {
        for (const auto& item : detail::split_csv(body)) {
          entry.items.push_back(unquote(detail::trim(item), row));
        }
      }
    } else {
      entry.items.push_back(unquote(value, row));
    }
    const std::string full = section.empty() ? std::string(key) : section + "." + std::string(key);
    if (!cfg.values_.emplace(full, std::move(entry)).second) fail(row, "duplicate key " + full);
  }
  return cfg;
}

Config Config::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::IoError, "cannot open config " + path);
  return parse(in);
}

const Config::Entry* Config::scalar(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) return nullptr;
  if (it->second.array) throw Error(Errc::FormatError, "config key " + key + " is an array");
  return &it->second;
}

std::optional<std::string> Config::string(const std::string& key) const {
  const Entry* e = scalar(key);
  if (!e) return std::nullopt;
  return e->items.front();
}

std::optional<double> Config::number(const std::string& key) const {
  const Entry* e = scalar(key);
  if (!e) return std::nullopt;
  const auto v = detail::parse_double(e->items.front());
  if (!v) throw Error(Errc::FormatError, "config key " + key + " is not a number");
  return v;
}

std::optional<long long> Config::integer(const std::string& key) const {
  const auto v = number(key);
  if (!v) return std::nullopt;
  const auto i = static_cast<long long>(*v);
  if (static_cast<double>(i) != *v) throw Error(Errc::FormatError, "config key " + key + " is not an integer");
  return i;
}

std::optional<bool> Config::boolean(const std::string& key) const {
  const Entry* e = scalar(key);
  if (!e) return std::nullopt;
  if (e->items.front() == "true") return true;
  if (e->items.front() == "false") return false;
  throw Error(Errc::FormatError, "config key " + key + " is not true or false");
}

std::optional<std::vector<int>> Config::int_list(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) return std::nullopt;
  std::vector<int> out;
  for (const auto& item : it->second.items) {
    const auto v = detail::parse_double(item);
    if (!v || static_cast<double>(static_cast<int>(*v)) != *v) {
      throw Error(Errc::FormatError, "config key " + key + " is not a list of integers");
    }
    out.push_back(static_cast<int>(*v));
  }
  return out;
}

std::map<std::string, std::string> Config::snapshot() const {
  std::map<std::string, std::string> out;
  for (const auto& [key, entry] : values_) {
    if (!entry.array) {
      out[key] = entry.items.front();
      continue;
    }
    std::string text = "[";
    for (std::size_t i = 0; i < entry.items.size(); ++i) text += (i ? ", " : "") + entry.items[i];
    out[key] = text + "]";
  }
  return out;
}

}  // namespace klambda
