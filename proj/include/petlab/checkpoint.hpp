#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "petlab/errors.hpp"
#include "petlab/params.hpp"

namespace petlab {

// Checkpoint file layout (all integers little-endian):
//   magic "PMVT1"
//   u32 record count
//   per record: u32 name length, name bytes, u8 dtype (0=f32, 1=f64),
//               u8 rank, u64 dims[rank], raw values
//   u64 FNV-1a checksum over everything before it
enum class Dtype : std::uint8_t { f32 = 0, f64 = 1 };

struct CheckpointRecord {
    std::string name;
    Dtype dtype = Dtype::f32;
    std::vector<std::uint64_t> dims;
    std::vector<unsigned char> data;

    std::size_t element_count() const {
        std::size_t n = 1;
        for (auto d : dims) n *= static_cast<std::size_t>(d);
        return n;
    }
};

void write_checkpoint_records(const std::string& path,
                              const std::vector<CheckpointRecord>& records);
std::vector<CheckpointRecord> read_checkpoint_records(const std::string& path);

namespace detail {
template <typename T>
constexpr Dtype dtype_of() {
    return sizeof(T) == 4 ? Dtype::f32 : Dtype::f64;
}
}  // namespace detail

template <typename T>
void save_checkpoint(const std::string& path, const ParameterStore<T>& store) {
    std::vector<CheckpointRecord> records;
    records.reserve(store.count());
    for (const auto& p : store.all()) {
        CheckpointRecord r;
        r.name = p.name;
        r.dtype = detail::dtype_of<T>();
        for (std::size_t d : p.value.shape()) r.dims.push_back(d);
        r.data.resize(p.value.size() * sizeof(T));
        std::memcpy(r.data.data(), p.value.values().data(), r.data.size());
        records.push_back(std::move(r));
    }
    write_checkpoint_records(path, records);
}

// Loads into precision T. Widening f32 -> f64 is exact and allowed;
// narrowing f64 -> f32 would silently lose bits and is rejected.
template <typename T>
ParameterStore<T> load_checkpoint(const std::string& path) {
    ParameterStore<T> store;
    for (const auto& r : read_checkpoint_records(path)) {
        Shape shape;
        for (auto d : r.dims) shape.push_back(static_cast<std::size_t>(d));
        std::vector<T> values(r.element_count());
        if (r.dtype == detail::dtype_of<T>()) {
            std::memcpy(values.data(), r.data.data(), r.data.size());
        } else if (r.dtype == Dtype::f32) {
            const float* src = reinterpret_cast<const float*>(r.data.data());
            for (std::size_t i = 0; i < values.size(); ++i) values[i] = static_cast<T>(src[i]);
        } else {
            throw IoError("checkpoint parameter " + r.name +
                          " is f64; loading into an f32 run would lose precision");
        }
        store.add(r.name, Tensor<T>(std::move(shape), std::move(values)));
    }
    return store;
}

}  // namespace petlab
