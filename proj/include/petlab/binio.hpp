#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

namespace petlab {

// FNV-1a 64-bit, the content checksum used by both binary file formats.
class Fnv1a64 {
public:
    void update(const void* data, std::size_t bytes) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < bytes; ++i) {
            hash_ ^= p[i];
            hash_ *= 0x100000001b3ull;
        }
    }
    std::uint64_t digest() const { return hash_; }

private:
    std::uint64_t hash_ = 0xcbf29ce484222325ull;
};

// Byte buffer with little-endian primitive append, hashed on the way out.
class ByteWriter {
public:
    void raw(const void* data, std::size_t bytes) {
        const auto* p = static_cast<const unsigned char*>(data);
        buf_.insert(buf_.end(), p, p + bytes);
    }
    void u8(std::uint8_t v) { raw(&v, 1); }
    void u16(std::uint16_t v) { raw(&v, 2); }
    void u32(std::uint32_t v) { raw(&v, 4); }
    void u64(std::uint64_t v) { raw(&v, 8); }
    void str(const std::string& s) { raw(s.data(), s.size()); }

    const std::vector<unsigned char>& bytes() const { return buf_; }

    std::uint64_t checksum() const {
        Fnv1a64 h;
        h.update(buf_.data(), buf_.size());
        return h.digest();
    }

private:
    std::vector<unsigned char> buf_;
};

// Cursor over a loaded byte buffer; read failures report the offset.
class ByteReader {
public:
    ByteReader(const unsigned char* data, std::size_t size) : data_(data), size_(size) {}

    std::size_t offset() const { return pos_; }
    std::size_t remaining() const { return size_ - pos_; }
    bool need(std::size_t bytes) const { return pos_ + bytes <= size_; }

    void raw(void* out, std::size_t bytes) {
        std::memcpy(out, data_ + pos_, bytes);
        pos_ += bytes;
    }
    std::uint8_t u8() {
        std::uint8_t v;
        raw(&v, 1);
        return v;
    }
    std::uint16_t u16() {
        std::uint16_t v;
        raw(&v, 2);
        return v;
    }
    std::uint32_t u32() {
        std::uint32_t v;
        raw(&v, 4);
        return v;
    }
    std::uint64_t u64() {
        std::uint64_t v;
        raw(&v, 8);
        return v;
    }

private:
    const unsigned char* data_;
    std::size_t size_;
    std::size_t pos_ = 0;
};

std::vector<unsigned char> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, const std::vector<unsigned char>& bytes);

}  // namespace petlab
