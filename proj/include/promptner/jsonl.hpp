#pragma once

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace promptner::jsonl {

using json = nlohmann::ordered_json;

/// Calls `fn(line_number, record)` for every non-blank line. Parse failures
/// and exceptions thrown by `fn` surface as DataError "<file>:<line>: ...".
void for_each(const std::filesystem::path& path,
              const std::function<void(std::size_t, const json&)>& fn);

/// Writes one compact record per line; creates parent directories.
void write(const std::filesystem::path& path, const std::vector<json>& records);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& content);

/// Fetches a required string field, throwing with the field name otherwise.
std::string string_field(const json& record, const char* name);

}  // namespace promptner::jsonl
