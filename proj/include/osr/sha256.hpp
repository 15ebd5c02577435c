#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

namespace osr {

/// SHA-256 digest as a lowercase hex string.
std::string sha256_hex(const std::string& bytes);
std::string sha256_file_hex(const std::filesystem::path& path);

}  // namespace osr
