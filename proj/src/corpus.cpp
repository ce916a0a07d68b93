#include "petlab/corpus.hpp"

#include <cstring>

#include "petlab/binio.hpp"

namespace petlab {

namespace {
constexpr char kMagic[5] = {'P', 'I', 'M', 'G', '1'};
}

void save_corpus(const std::string& path, const Dataset& dataset) {
    ByteWriter w;
    w.raw(kMagic, sizeof(kMagic));
    w.u32(static_cast<std::uint32_t>(dataset.items.size()));
    w.u16(static_cast<std::uint16_t>(dataset.height));
    w.u16(static_cast<std::uint16_t>(dataset.width));
    w.u8(static_cast<std::uint8_t>(dataset.channels));
    for (const auto& item : dataset.items) {
        if (item.label < 0 || item.label > 0xFFFF) {
            throw ContractError("corpus label out of u16 range: " + std::to_string(item.label));
        }
        if (item.pixels.size() != dataset.pixel_count()) {
            throw ContractError("corpus image has wrong pixel count");
        }
        w.u16(static_cast<std::uint16_t>(item.label));
        w.raw(item.pixels.data(), item.pixels.size() * sizeof(float));
    }
    const std::uint64_t checksum = w.checksum();
    w.u64(checksum);
    write_file_bytes(path, w.bytes());
}

Dataset load_corpus(const std::string& path) {
    const auto bytes = read_file_bytes(path);
    const std::size_t header = sizeof(kMagic) + 4 + 2 + 2 + 1;
    if (bytes.size() < header + 8) {
        throw IoError("corpus truncated: " + path + " (" + std::to_string(bytes.size()) +
                      " bytes)");
    }
    if (std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
        throw IoError("not a corpus file (bad magic): " + path);
    }
    Fnv1a64 h;
    h.update(bytes.data(), bytes.size() - 8);
    std::uint64_t stored;
    std::memcpy(&stored, bytes.data() + bytes.size() - 8, 8);
    if (stored != h.digest()) {
        throw IoError("corpus checksum mismatch: " + path);
    }

    ByteReader r(bytes.data(), bytes.size() - 8);
    char magic[5];
    r.raw(magic, 5);
    const std::uint32_t count = r.u32();
    Dataset ds;
    ds.height = r.u16();
    ds.width = r.u16();
    ds.channels = r.u8();
    const std::size_t record_bytes = 2 + ds.pixel_count() * sizeof(float);
    ds.items.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        if (!r.need(record_bytes)) {
            throw IoError("corpus record " + std::to_string(i) +
                          " truncated at byte offset " + std::to_string(r.offset()) + ": " +
                          path);
        }
        LabeledImage img;
        img.label = r.u16();
        img.pixels.resize(ds.pixel_count());
        r.raw(img.pixels.data(), img.pixels.size() * sizeof(float));
        ds.items.push_back(std::move(img));
    }
    if (r.remaining() != 0) {
        throw IoError("corpus has trailing bytes at offset " + std::to_string(r.offset()) +
                      ": " + path);
    }
    return ds;
}

}  // namespace petlab
