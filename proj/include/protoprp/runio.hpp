#pragma once

#include <nlohmann/json.hpp>

#include <string>
#include <vector>

namespace protoprp {

std::string sha256_hex(const void* data, std::size_t len);
std::string sha256_file(const std::string& path);

// Content hash of a directory tree: SHA-256 over the sorted list of
// "<relative path>\n<file hash>\n" entries. Ignores nothing; every regular
// file counts.
std::string hash_directory(const std::string& dir);

// <output_dir>/run.json: the command, the effective config, and a content
// hash per produced file (paths relative to output_dir where possible).
// Deliberately timestamp-free so identical runs produce identical records.
void write_run_record(const std::string& output_dir, const std::string& command,
                      const nlohmann::json& effective_config,
                      const std::vector<std::string>& output_files);

} // namespace protoprp
