#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace radepth {

// Flat "key = value" text. '#' starts a comment; blank lines are skipped.
// Throws std::invalid_argument on unreadable files or malformed lines.
std::vector<std::pair<std::string, std::string>> read_key_values(
    const std::filesystem::path& path);

// Splits "key=value" (as given on a command line).
std::pair<std::string, std::string> split_assignment(const std::string& text);

}  // namespace radepth
