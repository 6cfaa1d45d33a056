#pragma once

#include <cstddef>
#include <cstdint>

namespace sepdrop {

/// CRC-32 (zlib polynomial) of a byte range.
std::uint32_t crc32_of(const void* data, std::size_t bytes);

}  // namespace sepdrop
