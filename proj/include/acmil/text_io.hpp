#pragma once

// Structured-text documents (JSON) with exact float round-trips: every double
// is written with 17 significant digits, which strtod maps back to the same
// bits.

#include <filesystem>
#include <string>
#include <string_view>

#include <json.hpp>

namespace acmil {

using Json = nlohmann::ordered_json;

std::string format_double(double x);

/// Deterministic pretty-printer. Object keys keep insertion order; arrays of
/// scalars stay on one line.
std::string dump_document(const Json& doc);

/// Parses a document; failures become ParseError naming the source, line and
/// byte offset.
Json parse_document(std::string_view text, const std::string& source);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, std::string_view text);

Json load_document(const std::filesystem::path& path);
void save_document(const std::filesystem::path& path, const Json& doc);

}  // namespace acmil
