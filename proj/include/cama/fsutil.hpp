#pragma once

#include <filesystem>
#include <string>

namespace cama {

/// Writes `bytes` to `path` through a sibling temp file and a rename, so readers
/// never observe a partial file. Throws std::runtime_error on I/O failure.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);

/// Appends `line` (plus newline) by rewriting the whole file atomically.
void append_line_atomic(const std::filesystem::path& path, const std::string& line);

std::string read_file(const std::filesystem::path& path);

}  // namespace cama
