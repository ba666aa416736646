// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <istream>
#include <iterator>
#include <string>
#include <unistd.h>

#include "json.hpp"

#include "e5kit/errors.hpp"

namespace e5kit {

using Json = nlohmann::ordered_json;

// Writes through a temporary sibling file and renames it into place, so an
// existing artifact is either left untouched or fully replaced.
inline void atomic_write(const std::filesystem::path& path, const std::function<void(std::ostream&)>& body,
                         bool binary = false) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, binary ? std::ios::binary | std::ios::trunc : std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    try {
      body(out);
    } catch (...) {
      out.close();
      std::filesystem::remove(tmp);
      throw;
    }
    out.flush();
    if (!out) {
      std::filesystem::remove(tmp);
      throw IoError("failed writing " + path.string());
    }
  }
  std::filesystem::rename(tmp, path);
}

inline void atomic_write_text(const std::filesystem::path& path, const std::string& text) {
  atomic_write(path, [&](std::ostream& os) { os << text; });
}

inline std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return in;
}

inline std::string read_file(const std::filesystem::path& path) {
  auto in = open_input(path);
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

// Calls fn(line_number, line) for every non-blank line; line numbers are
// 1-based and count blank lines too.
template <class F>
void for_each_line(std::istream& in, F&& fn) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    fn(lineno, line);
  }
}

inline Json parse_json_line(const std::string& line, std::size_t lineno) {
  try {
    return Json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(lineno, std::string("invalid JSON: ") + e.what());
  }
}

inline std::string require_string(const Json& obj, const char* field, std::size_t lineno) {
  if (!obj.is_object()) throw ParseError(lineno, "expected a JSON object");
  auto it = obj.find(field);
  if (it == obj.end()) throw ParseError(lineno, std::string("missing field \"") + field + "\"");
  if (!it->is_string()) throw ParseError(lineno, std::string("field \"") + field + "\" must be a string");
  return it->get<std::string>();
}

}  // namespace e5kit
