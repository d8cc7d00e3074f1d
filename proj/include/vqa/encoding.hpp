#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace vqa::encoding {

std::string base64_encode(std::span<const std::byte> bytes);

/// Throws std::invalid_argument on malformed input.
std::vector<std::byte> base64_decode(std::string_view text);

/// Little-endian float32 packing, independent of host byte order.
std::vector<std::byte> pack_floats(std::span<const float> values);
std::vector<float> unpack_floats(std::span<const std::byte> bytes);

/// Lower-case hex SHA-256 digest.
std::string sha256_hex(std::span<const std::byte> bytes);
std::string sha256_file(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view contents);

}  // namespace vqa::encoding
