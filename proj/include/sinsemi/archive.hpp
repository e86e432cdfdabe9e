#pragma once

// Named-array container shared by model checkpoints, segmenter weights and
// calibrated feature-extractor weights. Byte layout: docs/archive_format.md.

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace sinsemi {

enum class DType : std::uint8_t { f32 = 1, f64 = 2 };

struct NamedArray {
    std::string name;
    DType dtype = DType::f32;
    std::vector<std::uint32_t> shape;
    std::vector<float> f32;
    std::vector<double> f64;

    std::size_t count() const;
};

class Archive {
public:
    static constexpr char kMagic[9] = "SNSMARCH";
    static constexpr std::uint32_t kVersion = 1;

    /// Manifest entries keep insertion order.
    void set(const std::string& key, const std::string& value);
    bool has(const std::string& key) const;
    /// Throws IoError naming the missing key.
    const std::string& get(const std::string& key) const;
    const std::vector<std::pair<std::string, std::string>>& manifest() const { return manifest_; }

    void put(const std::string& name, std::vector<std::uint32_t> shape, std::span<const float> data);
    void put(const std::string& name, std::vector<std::uint32_t> shape, std::span<const double> data);
    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    /// Throws IoError("checkpoint missing array ...") when absent.
    const NamedArray& array(const std::string& name) const;
    const std::vector<NamedArray>& arrays() const { return arrays_; }

    std::vector<std::uint8_t> serialize() const;
    static Archive deserialize(std::span<const std::uint8_t> bytes);

    void save(const std::string& path) const;
    static Archive load(const std::string& path);

private:
    std::vector<std::pair<std::string, std::string>> manifest_;
    std::vector<NamedArray> arrays_;
    std::map<std::string, std::size_t> index_;
};

}  // namespace sinsemi
