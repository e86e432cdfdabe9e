#include "sinsemi/archive.hpp"

#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "sinsemi/digest.hpp"
#include "sinsemi/errors.hpp"

namespace sinsemi {

std::size_t NamedArray::count() const {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

void Archive::set(const std::string& key, const std::string& value) {
    if (key.find_first_of("=\n") != std::string::npos || value.find('\n') != std::string::npos) {
        throw ConfigError("manifest entries must be single-line and keys must not contain '='");
    }
    for (auto& [k, v] : manifest_) {
        if (k == key) {
            v = value;
            return;
        }
    }
    manifest_.emplace_back(key, value);
}

bool Archive::has(const std::string& key) const {
    for (const auto& kv : manifest_)
        if (kv.first == key) return true;
    return false;
}

const std::string& Archive::get(const std::string& key) const {
    for (const auto& kv : manifest_)
        if (kv.first == key) return kv.second;
    throw IoError("checkpoint manifest missing key '" + key + "'");
}

namespace {

template <class V>
NamedArray make_array(const std::string& name, std::vector<std::uint32_t> shape, DType dtype,
                      std::span<const V> data) {
    NamedArray a;
    a.name = name;
    a.dtype = dtype;
    a.shape = std::move(shape);
    if (a.count() != data.size()) {
        throw ConfigError("array '" + name + "': shape does not match element count");
    }
    if constexpr (std::is_same_v<V, float>) a.f32.assign(data.begin(), data.end());
    else a.f64.assign(data.begin(), data.end());
    return a;
}

class Writer {
public:
    void bytes(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        out_.insert(out_.end(), b, b + n);
    }
    template <class U>
    void le(U v) {
        for (std::size_t i = 0; i < sizeof(U); ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f32(float v) {
        std::uint32_t u;
        std::memcpy(&u, &v, 4);
        le(u);
    }
    void f64(double v) {
        std::uint64_t u;
        std::memcpy(&u, &v, 8);
        le(u);
    }
    std::vector<std::uint8_t>& data() { return out_; }

private:
    std::vector<std::uint8_t> out_;
};

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}
    void need(std::size_t n) const {
        if (pos_ + n > in_.size()) throw IoError("corrupt checkpoint: truncated");
    }
    template <class U>
    U le() {
        need(sizeof(U));
        U v = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(in_[pos_ + i]) << (8 * i);
        pos_ += sizeof(U);
        return v;
    }
    float f32() {
        const auto u = le<std::uint32_t>();
        float v;
        std::memcpy(&v, &u, 4);
        return v;
    }
    double f64() {
        const auto u = le<std::uint64_t>();
        double v;
        std::memcpy(&v, &u, 8);
        return v;
    }
    std::string str(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    std::size_t pos() const { return pos_; }

private:
    std::span<const std::uint8_t> in_;
    std::size_t pos_ = 0;
};

}  // namespace

void Archive::put(const std::string& name, std::vector<std::uint32_t> shape,
                  std::span<const float> data) {
    if (contains(name)) throw ConfigError("duplicate array '" + name + "'");
    index_[name] = arrays_.size();
    arrays_.push_back(make_array(name, std::move(shape), DType::f32, data));
}

void Archive::put(const std::string& name, std::vector<std::uint32_t> shape,
                  std::span<const double> data) {
    if (contains(name)) throw ConfigError("duplicate array '" + name + "'");
    index_[name] = arrays_.size();
    arrays_.push_back(make_array(name, std::move(shape), DType::f64, data));
}

const NamedArray& Archive::array(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw IoError("checkpoint missing array '" + name + "'");
    return arrays_[it->second];
}

std::vector<std::uint8_t> Archive::serialize() const {
    Writer w;
    w.bytes(kMagic, 8);
    w.le(kVersion);
    std::string text;
    for (const auto& [k, v] : manifest_) text += k + " = " + v + "\n";
    w.le(static_cast<std::uint32_t>(text.size()));
    w.bytes(text.data(), text.size());
    w.le(static_cast<std::uint32_t>(arrays_.size()));
    for (const auto& a : arrays_) {
        w.le(static_cast<std::uint16_t>(a.name.size()));
        w.bytes(a.name.data(), a.name.size());
        w.le(static_cast<std::uint8_t>(a.dtype));
        w.le(static_cast<std::uint8_t>(a.shape.size()));
        for (auto d : a.shape) w.le(d);
        if (a.dtype == DType::f32)
            for (float v : a.f32) w.f32(v);
        else
            for (double v : a.f64) w.f64(v);
    }
    const std::uint64_t digest = fnv1a(w.data().data(), w.data().size());
    w.le(digest);
    return std::move(w.data());
}

Archive Archive::deserialize(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 8) != 0) {
        throw IoError("corrupt checkpoint: bad magic bytes");
    }
    if (bytes.size() < 8 + 4 + 8) throw IoError("corrupt checkpoint: truncated");
    Reader r(bytes.first(bytes.size() - 8));
    r.str(8);
    const auto version = r.le<std::uint32_t>();
    if (version != kVersion) {
        throw IoError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                      std::to_string(kVersion) + ")");
    }
    Reader tail(bytes.last(8));
    const auto stored = tail.le<std::uint64_t>();
    if (stored != fnv1a(bytes.data(), bytes.size() - 8)) {
        throw IoError("corrupt checkpoint: checksum mismatch");
    }

    Archive a;
    std::istringstream text(r.str(r.le<std::uint32_t>()));
    std::string line;
    while (std::getline(text, line)) {
        const auto eq = line.find(" = ");
        if (eq == std::string::npos) throw IoError("corrupt checkpoint: bad manifest line");
        a.manifest_.emplace_back(line.substr(0, eq), line.substr(eq + 3));
    }
    const auto n = r.le<std::uint32_t>();
    for (std::uint32_t i = 0; i < n; ++i) {
        NamedArray arr;
        arr.name = r.str(r.le<std::uint16_t>());
        const auto dt = r.le<std::uint8_t>();
        if (dt != 1 && dt != 2) throw IoError("corrupt checkpoint: unknown dtype");
        arr.dtype = static_cast<DType>(dt);
        const auto ndim = r.le<std::uint8_t>();
        for (int d = 0; d < ndim; ++d) arr.shape.push_back(r.le<std::uint32_t>());
        const std::size_t count = arr.count();
        r.need(count * (arr.dtype == DType::f32 ? 4 : 8));
        if (arr.dtype == DType::f32) {
            arr.f32.resize(count);
            for (auto& v : arr.f32) v = r.f32();
        } else {
            arr.f64.resize(count);
            for (auto& v : arr.f64) v = r.f64();
        }
        if (a.contains(arr.name)) throw IoError("corrupt checkpoint: duplicate array");
        a.index_[arr.name] = a.arrays_.size();
        a.arrays_.push_back(std::move(arr));
    }
    if (r.pos() != bytes.size() - 8) throw IoError("corrupt checkpoint: trailing bytes");
    return a;
}

void Archive::save(const std::string& path) const {
    const auto bytes = serialize();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing " + path);
}

Archive Archive::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize(bytes);
}

}  // namespace sinsemi
