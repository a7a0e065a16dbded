#include "defectforge/archive.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "defectforge/errors.hpp"

namespace df {

namespace {

static_assert(std::endian::native == std::endian::little,
              "archive code assumes a little-endian host");

constexpr char kMagic[5] = {'D', 'S', 'T', 'W', '1'};

template <class V>
void write_raw(std::ofstream& out, const V& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

template <class V>
V read_raw(std::ifstream& in, const std::string& path) {
    V v{};
    if (!in.read(reinterpret_cast<char*>(&v), sizeof(v)))
        throw IoError("truncated archive: " + path);
    return v;
}

}  // namespace

void write_archive(const std::string& path, const std::vector<ArchiveEntry>& entries) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out.write(kMagic, sizeof(kMagic));
    write_raw(out, static_cast<std::uint32_t>(entries.size()));
    for (const auto& e : entries) {
        write_raw(out, static_cast<std::uint16_t>(e.name.size()));
        out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        write_raw(out, static_cast<std::uint8_t>(e.shape.size()));
        for (int d : e.shape) write_raw(out, static_cast<std::uint32_t>(d));
        out.write(reinterpret_cast<const char*>(e.data.data()),
                  static_cast<std::streamsize>(e.data.size() * sizeof(float)));
    }
    if (!out) throw IoError("write failed: " + path);
}

std::vector<ArchiveEntry> read_archive(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    char magic[5];
    if (!in.read(magic, 5) || std::memcmp(magic, kMagic, 5) != 0)
        throw IoError("not a tensor archive: " + path);
    const auto count = read_raw<std::uint32_t>(in, path);
    std::vector<ArchiveEntry> entries(count);
    for (auto& e : entries) {
        const auto name_len = read_raw<std::uint16_t>(in, path);
        e.name.resize(name_len);
        if (!in.read(e.name.data(), name_len)) throw IoError("truncated archive: " + path);
        const auto rank = read_raw<std::uint8_t>(in, path);
        std::size_t numel = 1;
        e.shape.resize(rank);
        for (auto& d : e.shape) {
            d = static_cast<int>(read_raw<std::uint32_t>(in, path));
            numel *= static_cast<std::size_t>(d);
        }
        e.data.resize(numel);
        if (!in.read(reinterpret_cast<char*>(e.data.data()),
                     static_cast<std::streamsize>(numel * sizeof(float))))
            throw IoError("truncated archive: " + path);
    }
    return entries;
}

}  // namespace df
