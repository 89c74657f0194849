#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace promptner::text {

// ASCII whitespace only; clinical notes are UTF-8 but never use exotic
// separators between sentences.
bool is_space(char c) noexcept;

std::string_view trim(std::string_view s) noexcept;

// Lowercases ASCII and collapses every whitespace run to a single space,
// trimming both ends.
std::string normalize(std::string_view s);

std::string to_lower(std::string_view s);

bool contains_ci(std::string_view haystack, std::string_view needle);

std::vector<std::string> split_lines(std::string_view s);

std::string join(const std::vector<std::string>& parts, std::string_view sep);

// Decodes UTF-8 into code points. Invalid bytes decode as U+FFFD so that
// similarity scores stay defined on arbitrary input.
std::u32string utf8_decode(std::string_view s);

// Filename-safe slug, e.g. "HbA1c Levels" -> "hba1c_levels".
std::string slugify(std::string_view s);

}  // namespace promptner::text
