#include "acmil/text_io.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "acmil/errors.hpp"

namespace acmil {

std::string format_double(double x) {
  if (!std::isfinite(x)) throw NumericalError("refusing to serialize a non-finite value");
  char buf[40];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), x, std::chars_format::general, 17);
  if (ec != std::errc()) throw NumericalError("float formatting failed");
  std::string s(buf, end);
  // Keep the value a float on re-parse ("-0" would otherwise lose its sign).
  if (s.find_first_of(".e") == std::string::npos) s += ".0";
  return s;
}

namespace {

bool is_scalar(const Json& j) { return !j.is_object() && !j.is_array(); }

void write_scalar(std::string& out, const Json& j) {
  if (j.is_number_float()) {
    out += format_double(j.get<double>());
  } else {
    out += j.dump();
  }
}

void write_value(std::string& out, const Json& j, int depth) {
  const std::string pad(static_cast<size_t>(2 * (depth + 1)), ' ');
  const std::string close_pad(static_cast<size_t>(2 * depth), ' ');
  if (j.is_object()) {
    if (j.empty()) {
      out += "{}";
      return;
    }
    out += "{\n";
    bool first = true;
    for (auto it = j.begin(); it != j.end(); ++it) {
      if (!first) out += ",\n";
      first = false;
      out += pad;
      out += Json(it.key()).dump();
      out += ": ";
      write_value(out, it.value(), depth + 1);
    }
    out += "\n" + close_pad + "}";
  } else if (j.is_array()) {
    if (j.empty()) {
      out += "[]";
      return;
    }
    bool flat = true;
    for (const auto& e : j) flat = flat && is_scalar(e);
    if (flat) {
      out += "[";
      for (size_t i = 0; i < j.size(); ++i) {
        if (i) out += ", ";
        write_scalar(out, j[i]);
      }
      out += "]";
      return;
    }
    out += "[\n";
    for (size_t i = 0; i < j.size(); ++i) {
      if (i) out += ",\n";
      out += pad;
      write_value(out, j[i], depth + 1);
    }
    out += "\n" + close_pad + "]";
  } else {
    write_scalar(out, j);
  }
}

}  // namespace

std::string dump_document(const Json& doc) {
  std::string out;
  write_value(out, doc, 0);
  out += "\n";
  return out;
}

Json parse_document(std::string_view text, const std::string& source) {
  try {
    return Json::parse(text.begin(), text.end());
  } catch (const Json::parse_error& e) {
    const size_t offset = std::min(e.byte, text.size());
    size_t line = 1;
    for (size_t i = 0; i + 1 < offset; ++i)
      if (text[i] == '\n') ++line;
    std::ostringstream msg;
    msg << source << ": line " << line << ", offset " << e.byte << ": malformed document";
    throw ParseError(msg.str());
  }
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::filesystem::path& path, std::string_view text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

Json load_document(const std::filesystem::path& path) {
  return parse_document(read_text_file(path), path.string());
}

void save_document(const std::filesystem::path& path, const Json& doc) {
  write_text_file(path, dump_document(doc));
}

}  // namespace acmil
