#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>

namespace sinsemi {

constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ull;
constexpr std::uint64_t kFnvPrime = 0x100000001b3ull;

inline std::uint64_t fnv1a(const void* bytes, std::size_t n, std::uint64_t h = kFnvOffset) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= kFnvPrime;
    }
    return h;
}

inline std::uint64_t fnv1a_str(std::string_view s, std::uint64_t h = kFnvOffset) {
    return fnv1a(s.data(), s.size(), h);
}

std::string hex64(std::uint64_t v);

/// FNV-1a digest of a file's bytes, as 16 hex digits. Throws IoError.
std::string file_digest(const std::string& path);

}  // namespace sinsemi
