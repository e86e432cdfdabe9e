#include "sinsemi/digest.hpp"

#include <cstdio>
#include <fstream>
#include <iterator>
#include <vector>

#include "sinsemi/errors.hpp"

namespace sinsemi {

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::string file_digest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return hex64(fnv1a(bytes.data(), bytes.size()));
}

}  // namespace sinsemi
