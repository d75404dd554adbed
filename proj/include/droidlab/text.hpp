#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace droidlab::text {

std::string_view trim(std::string_view s);
std::string to_lower(std::string_view s);

/// Splits on '\n' and strips a trailing '\r' from every line. A final empty
/// line after a trailing newline is not emitted.
std::vector<std::string_view> split_lines(std::string_view s);

std::string join(const std::vector<std::string>& parts, std::string_view sep);

/// 64-bit FNV-1a, rendered as 16 lowercase hex digits by digest().
std::uint64_t fnv1a64(std::string_view data);
std::string digest(std::string_view data);

std::string read_file(const std::filesystem::path& path);
/// Writes via a sibling temporary file and a rename.
void write_file_atomic(const std::filesystem::path& path, std::string_view content);

}  // namespace droidlab::text
