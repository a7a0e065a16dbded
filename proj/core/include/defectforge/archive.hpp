#pragma once

#include <string>
#include <vector>

#include "defectforge/tensor.hpp"

namespace df {

// Named f32 tensor as stored in the "DSTW1" archive.
struct ArchiveEntry {
    std::string name;
    std::vector<int> shape;
    std::vector<float> data;
};

// Binary layout: magic "DSTW1", u32le tensor count, then per tensor:
// u16le name length + UTF-8 name, u8 rank, rank × u32le dims,
// f32le data. Round-trips are bit-exact.
void write_archive(const std::string& path, const std::vector<ArchiveEntry>& entries);
std::vector<ArchiveEntry> read_archive(const std::string& path);

template <class T>
ArchiveEntry to_entry(const std::string& name, const TensorPtr<T>& t) {
    ArchiveEntry e;
    e.name = name;
    e.shape = t->shape;
    e.data.assign(t->values.begin(), t->values.end());
    return e;
}

template <class T>
TensorPtr<T> from_entry(const ArchiveEntry& e, bool requires_grad = false) {
    std::vector<T> vals(e.data.begin(), e.data.end());
    return make_tensor<T>(e.shape, std::move(vals), requires_grad);
}

}  // namespace df
