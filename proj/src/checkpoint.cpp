#include "petlab/checkpoint.hpp"

#include <fstream>

#include "petlab/binio.hpp"

namespace petlab {

namespace {
constexpr char kMagic[5] = {'P', 'M', 'V', 'T', '1'};
}

std::vector<unsigned char> read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open file: " + path);
    in.seekg(0, std::ios::end);
    const auto size = static_cast<std::size_t>(in.tellg());
    in.seekg(0, std::ios::beg);
    std::vector<unsigned char> bytes(size);
    if (size) in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size));
    if (!in) throw IoError("failed reading file: " + path);
    return bytes;
}

void write_file_bytes(const std::string& path, const std::vector<unsigned char>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open file for writing: " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing file: " + path);
}

void write_checkpoint_records(const std::string& path,
                              const std::vector<CheckpointRecord>& records) {
    ByteWriter w;
    w.raw(kMagic, sizeof(kMagic));
    w.u32(static_cast<std::uint32_t>(records.size()));
    for (const auto& r : records) {
        w.u32(static_cast<std::uint32_t>(r.name.size()));
        w.str(r.name);
        w.u8(static_cast<std::uint8_t>(r.dtype));
        w.u8(static_cast<std::uint8_t>(r.dims.size()));
        for (auto d : r.dims) w.u64(d);
        w.raw(r.data.data(), r.data.size());
    }
    const std::uint64_t checksum = w.checksum();
    w.u64(checksum);
    write_file_bytes(path, w.bytes());
}

std::vector<CheckpointRecord> read_checkpoint_records(const std::string& path) {
    const auto bytes = read_file_bytes(path);
    if (bytes.size() < sizeof(kMagic) + 4 + 8) {
        throw IoError("checkpoint truncated: " + path + " (" + std::to_string(bytes.size()) +
                      " bytes)");
    }
    if (std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
        throw IoError("not a checkpoint file (bad magic): " + path);
    }
    Fnv1a64 h;
    h.update(bytes.data(), bytes.size() - 8);
    std::uint64_t stored;
    std::memcpy(&stored, bytes.data() + bytes.size() - 8, 8);
    if (stored != h.digest()) {
        throw IoError("checkpoint checksum mismatch: " + path);
    }

    ByteReader r(bytes.data(), bytes.size() - 8);
    char magic[5];
    r.raw(magic, 5);
    const std::uint32_t count = r.u32();
    std::vector<CheckpointRecord> records;
    records.reserve(count);
    auto truncated = [&]() {
        throw IoError("checkpoint record truncated at byte offset " +
                      std::to_string(r.offset()) + ": " + path);
    };
    for (std::uint32_t i = 0; i < count; ++i) {
        CheckpointRecord rec;
        if (!r.need(4)) truncated();
        const std::uint32_t name_len = r.u32();
        if (!r.need(name_len + 2u)) truncated();
        rec.name.resize(name_len);
        r.raw(rec.name.data(), name_len);
        const std::uint8_t dtype = r.u8();
        if (dtype > 1) throw IoError("checkpoint has unknown dtype tag: " + path);
        rec.dtype = static_cast<Dtype>(dtype);
        const std::uint8_t rank = r.u8();
        if (!r.need(static_cast<std::size_t>(rank) * 8)) truncated();
        rec.dims.resize(rank);
        for (std::uint8_t d = 0; d < rank; ++d) rec.dims[d] = r.u64();
        const std::size_t data_bytes =
            rec.element_count() * (rec.dtype == Dtype::f32 ? 4 : 8);
        if (!r.need(data_bytes)) truncated();
        rec.data.resize(data_bytes);
        r.raw(rec.data.data(), data_bytes);
        records.push_back(std::move(rec));
    }
    if (r.remaining() != 0) {
        throw IoError("checkpoint has trailing bytes at offset " + std::to_string(r.offset()) +
                      ": " + path);
    }
    return records;
}

}  // namespace petlab
