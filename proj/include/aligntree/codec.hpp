#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace aligntree {

// 128-bit BLAKE2b digest as lowercase hex.
std::string fingerprint_hex(std::span<const std::uint8_t> bytes);
std::string fingerprint_hex(std::string_view text);

std::string base64_encode(std::span<const std::uint8_t> bytes);
// Throws FormatError on malformed input.
std::vector<std::uint8_t> base64_decode(std::string_view text);

// Little-endian f32 packing used by the dataset container and the service.
std::vector<std::uint8_t> pack_f32_le(std::span<const float> values);
std::vector<float> unpack_f32_le(std::span<const std::uint8_t> bytes);

}  // namespace aligntree
