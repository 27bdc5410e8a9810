#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "bmt/errors.hpp"

namespace bmt {

// Little-endian binary writer into an in-memory buffer.
class ByteWriter {
public:
    void u8(uint8_t v) { buf_.push_back(v); }
    void u16(uint16_t v) { append_le(v); }
    void u32(uint32_t v) { append_le(v); }
    void u64(uint64_t v) { append_le(v); }
    void f32(float v) {
        uint32_t bits;
        std::memcpy(&bits, &v, 4);
        append_le(bits);
    }
    void f64(double v) {
        uint64_t bits;
        std::memcpy(&bits, &v, 8);
        append_le(bits);
    }
    void bytes(const void* p, size_t n) {
        const auto* c = static_cast<const uint8_t*>(p);
        buf_.insert(buf_.end(), c, c + n);
    }
    void str(const std::string& s) { bytes(s.data(), s.size()); }

    const std::vector<uint8_t>& data() const { return buf_; }

private:
    template <class T>
    void append_le(T v) {
        for (size_t i = 0; i < sizeof(T); ++i) buf_.push_back(static_cast<uint8_t>(v >> (8 * i)));
    }

    std::vector<uint8_t> buf_;
};

// Little-endian reader over a byte buffer; throws FormatError with the byte
// offset when the payload runs short.
class ByteReader {
public:
    ByteReader(const uint8_t* data, size_t size, std::string source)
        : data_(data), size_(size), source_(std::move(source)) {}

    size_t offset() const { return pos_; }
    size_t remaining() const { return size_ - pos_; }

    uint8_t u8() { return take<uint8_t>(); }
    uint16_t u16() { return take<uint16_t>(); }
    uint32_t u32() { return take<uint32_t>(); }
    uint64_t u64() { return take<uint64_t>(); }
    float f32() {
        const uint32_t bits = take<uint32_t>();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    double f64() {
        const uint64_t bits = take<uint64_t>();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    std::string str(size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
        pos_ += n;
        return s;
    }

    void need(size_t n) const {
        if (pos_ + n > size_)
            throw FormatError(source_ + ": truncated at byte offset " + std::to_string(pos_) +
                              " (need " + std::to_string(n) + " more, have " +
                              std::to_string(size_ - pos_) + ")");
    }

    [[noreturn]] void fail(const std::string& what) const {
        throw FormatError(source_ + ": " + what + " at byte offset " + std::to_string(pos_));
    }

private:
    template <class T>
    T take() {
        need(sizeof(T));
        T v = 0;
        for (size_t i = 0; i < sizeof(T); ++i)
            v |= static_cast<T>(static_cast<T>(data_[pos_ + i]) << (8 * i));
        pos_ += sizeof(T);
        return v;
    }

    const uint8_t* data_;
    size_t size_;
    size_t pos_ = 0;
    std::string source_;
};

inline std::vector<uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open file: " + path.string());
    in.seekg(0, std::ios::end);
    const auto n = static_cast<size_t>(in.tellg());
    in.seekg(0, std::ios::beg);
    std::vector<uint8_t> buf(n);
    if (n > 0) in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n));
    if (!in) throw DataError("cannot read file: " + path.string());
    return buf;
}

// Writes via a temp file + rename so readers never observe a partial artifact.
inline void write_file_atomic(const std::filesystem::path& path, const void* data, size_t size) {
    namespace fs = std::filesystem;
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot open file for writing: " + tmp.string());
        out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
        if (!out) throw DataError("cannot write file: " + tmp.string());
    }
    fs::rename(tmp, path);
}

inline void write_file_atomic(const std::filesystem::path& path, const std::vector<uint8_t>& bytes) {
    write_file_atomic(path, bytes.data(), bytes.size());
}

inline void write_file_atomic(const std::filesystem::path& path, const std::string& text) {
    write_file_atomic(path, text.data(), text.size());
}

} // namespace bmt
