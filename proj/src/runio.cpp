#include "protoprp/runio.hpp"

#include "protoprp/errors.hpp"
#include "protoprp/ptns.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <filesystem>

namespace protoprp {

using nlohmann::json;
namespace fs = std::filesystem;

std::string sha256_hex(const void* data, std::size_t len) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int digest_len = 0;
    if (EVP_Digest(data, len, digest, &digest_len, EVP_sha256(), nullptr) != 1)
        throw IoError("sha256 digest failed");
    static const char* hex = "0123456789abcdef";
    std::string out;
    out.reserve(digest_len * 2);
    for (unsigned int i = 0; i < digest_len; ++i) {
        out.push_back(hex[digest[i] >> 4]);
        out.push_back(hex[digest[i] & 0xf]);
    }
    return out;
}

std::string sha256_file(const std::string& path) {
    const std::vector<std::uint8_t> bytes = read_file_bytes(path);
    return sha256_hex(bytes.data(), bytes.size());
}

std::string hash_directory(const std::string& dir) {
    std::error_code ec;
    if (!fs::is_directory(dir, ec)) throw IoError("not a directory: " + dir);
    std::vector<std::string> files;
    for (const auto& entry : fs::recursive_directory_iterator(dir)) {
        if (entry.is_regular_file())
            files.push_back(fs::relative(entry.path(), dir).generic_string());
    }
    std::sort(files.begin(), files.end());
    std::string manifest;
    for (const std::string& rel : files) {
        manifest += rel;
        manifest += '\n';
        manifest += sha256_file((fs::path(dir) / rel).string());
        manifest += '\n';
    }
    return sha256_hex(manifest.data(), manifest.size());
}

void write_run_record(const std::string& output_dir, const std::string& command,
                      const json& effective_config,
                      const std::vector<std::string>& output_files) {
    json rec;
    rec["command"] = command;
    rec["config"] = effective_config;
    json outputs = json::object();
    std::vector<std::string> sorted = output_files;
    std::sort(sorted.begin(), sorted.end());
    for (const std::string& file : sorted) {
        std::error_code ec;
        const fs::path rel = fs::relative(file, output_dir, ec);
        std::string key = (!ec && !rel.empty() && rel.generic_string().rfind("..", 0) != 0)
                              ? rel.generic_string()
                              : fs::path(file).generic_string();
        outputs[key] = "sha256:" + sha256_file(file);
    }
    rec["outputs"] = outputs;
    write_file_text((fs::path(output_dir) / "run.json").string(), rec.dump(2) + "\n");
}

} // namespace protoprp
