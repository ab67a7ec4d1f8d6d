#pragma once

#include <cctype>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace adaptrial {

/**
 * Minimal TOML-subset reader covering what study configs use: top-level keys,
 * [tables], [[arrays of tables]], strings, numbers, booleans, and (nested)
 * arrays that may span lines. Dotted keys, inline tables, and dates are out.
 */
struct TomlValue;
using TomlArray = std::vector<TomlValue>;

struct TomlValue {
  std::variant<std::string, double, std::int64_t, bool, TomlArray> v;

  bool is_string() const { return std::holds_alternative<std::string>(v); }
  bool is_number() const {
    return std::holds_alternative<double>(v) || std::holds_alternative<std::int64_t>(v);
  }
  bool is_int() const { return std::holds_alternative<std::int64_t>(v); }
  bool is_bool() const { return std::holds_alternative<bool>(v); }
  bool is_array() const { return std::holds_alternative<TomlArray>(v); }

  double as_number() const {
    if (std::holds_alternative<double>(v)) return std::get<double>(v);
    if (std::holds_alternative<std::int64_t>(v))
      return static_cast<double>(std::get<std::int64_t>(v));
    throw std::runtime_error("value is not a number");
  }
  std::int64_t as_int() const { return std::get<std::int64_t>(v); }
  const std::string& as_string() const { return std::get<std::string>(v); }
  bool as_bool() const { return std::get<bool>(v); }
  const TomlArray& as_array() const { return std::get<TomlArray>(v); }
};

using TomlTable = std::map<std::string, TomlValue>;

struct TomlDoc {
  TomlTable root;
  std::map<std::string, TomlTable> tables;
  std::map<std::string, std::vector<TomlTable>> table_arrays;
};

class TomlError : public std::runtime_error {
 public:
  TomlError(const std::string& msg, int line)
      : std::runtime_error("line " + std::to_string(line) + ": " + msg) {}
};

namespace toml_detail {

struct Cursor {
  const std::string& text;
  std::size_t pos = 0;
  int line = 1;

  bool done() const { return pos >= text.size(); }
  char peek() const { return text[pos]; }
  char take() {
    char c = text[pos++];
    if (c == '\n') line += 1;
    return c;
  }
  void skip_ws_inline() {
    while (!done() && (peek() == ' ' || peek() == '\t' || peek() == '\r')) take();
  }
  /** Whitespace, newlines, and comments; used inside arrays and between statements. */
  void skip_ws_all() {
    while (!done()) {
      char c = peek();
      if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
        take();
      } else if (c == '#') {
        while (!done() && peek() != '\n') take();
      } else {
        break;
      }
    }
  }
};

inline std::string parse_basic_string(Cursor& c) {
  int line = c.line;
  c.take();  // opening quote
  std::string out;
  while (true) {
    if (c.done()) throw TomlError("unterminated string", line);
    char ch = c.take();
    if (ch == '"') return out;
    if (ch == '\n') throw TomlError("newline in string", line);
    if (ch == '\\') {
      if (c.done()) throw TomlError("dangling escape", line);
      char e = c.take();
      switch (e) {
        case 'n': out.push_back('\n'); break;
        case 't': out.push_back('\t'); break;
        case 'r': out.push_back('\r'); break;
        case '"': out.push_back('"'); break;
        case '\\': out.push_back('\\'); break;
        default: throw TomlError(std::string("unsupported escape \\") + e, line);
      }
    } else {
      out.push_back(ch);
    }
  }
}

inline TomlValue parse_value(Cursor& c);

inline TomlValue parse_array(Cursor& c) {
  int line = c.line;
  c.take();  // '['
  TomlArray arr;
  while (true) {
    c.skip_ws_all();
    if (c.done()) throw TomlError("unterminated array", line);
    if (c.peek() == ']') {
      c.take();
      return TomlValue{arr};
    }
    arr.push_back(parse_value(c));
    c.skip_ws_all();
    if (c.done()) throw TomlError("unterminated array", line);
    if (c.peek() == ',') {
      c.take();
    } else if (c.peek() != ']') {
      throw TomlError("expected ',' or ']' in array", c.line);
    }
  }
}

inline TomlValue parse_value(Cursor& c) {
  c.skip_ws_inline();
  if (c.done()) throw TomlError("missing value", c.line);
  char ch = c.peek();
  if (ch == '"') return TomlValue{parse_basic_string(c)};
  if (ch == '[') return parse_array(c);
  std::string tok;
  while (!c.done()) {
    char t = c.peek();
    if (t == ',' || t == ']' || t == '#' || t == '\n' || t == ' ' || t == '\t' || t == '\r') break;
    tok.push_back(c.take());
  }
  if (tok == "true") return TomlValue{true};
  if (tok == "false") return TomlValue{false};
  if (tok.empty()) throw TomlError("missing value", c.line);
  bool looks_float = tok.find_first_of(".eE") != std::string::npos;
  try {
    std::size_t used = 0;
    if (looks_float) {
      double d = std::stod(tok, &used);
      if (used != tok.size()) throw std::invalid_argument(tok);
      return TomlValue{d};
    }
    long long i = std::stoll(tok, &used);
    if (used != tok.size()) throw std::invalid_argument(tok);
    return TomlValue{static_cast<std::int64_t>(i)};
  } catch (const std::exception&) {
    throw TomlError("cannot parse value '" + tok + "'", c.line);
  }
}

inline std::string parse_key(Cursor& c) {
  c.skip_ws_inline();
  if (!c.done() && c.peek() == '"') return parse_basic_string(c);
  std::string key;
  while (!c.done()) {
    char ch = c.peek();
    if (std::isalnum(static_cast<unsigned char>(ch)) || ch == '_' || ch == '-') {
      key.push_back(c.take());
    } else {
      break;
    }
  }
  if (key.empty()) throw TomlError("expected a key", c.line);
  return key;
}

}  // namespace toml_detail

inline TomlDoc toml_parse(const std::string& text) {
  using namespace toml_detail;
  TomlDoc doc;
  TomlTable* current = &doc.root;
  Cursor c{text};
  while (true) {
    c.skip_ws_all();
    if (c.done()) break;
    if (c.peek() == '[') {
      int line = c.line;
      c.take();
      bool is_array = !c.done() && c.peek() == '[';
      if (is_array) c.take();
      std::string name = parse_key(c);
      c.skip_ws_inline();
      if (c.done() || c.take() != ']') throw TomlError("unterminated table header", line);
      if (is_array) {
        if (c.done() || c.take() != ']') throw TomlError("expected ']]'", line);
        doc.table_arrays[name].emplace_back();
        current = &doc.table_arrays[name].back();
      } else {
        if (doc.tables.count(name)) throw TomlError("duplicate table [" + name + "]", line);
        current = &doc.tables[name];
      }
      c.skip_ws_inline();
      if (!c.done() && c.peek() != '\n' && c.peek() != '#')
        throw TomlError("trailing content after table header", c.line);
      continue;
    }
    int line = c.line;
    std::string key = parse_key(c);
    c.skip_ws_inline();
    if (c.done() || c.take() != '=') throw TomlError("expected '=' after key '" + key + "'", line);
    TomlValue val = parse_value(c);
    if (current->count(key)) throw TomlError("duplicate key '" + key + "'", line);
    (*current)[key] = std::move(val);
    c.skip_ws_inline();
    if (!c.done() && c.peek() != '\n' && c.peek() != '#')
      throw TomlError("trailing content after value for '" + key + "'", c.line);
  }
  return doc;
}

}  // namespace adaptrial
