#pragma once

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <unistd.h>
#include <vector>

#include "valm/common.hpp"

namespace valm {

// All artifact files are little-endian; encode explicitly so the formats are
// byte-stable regardless of host.

inline u32 crc32(const void* data, std::size_t n, u32 crc = 0) {
    static const std::array<u32, 256> table = [] {
        std::array<u32, 256> t{};
        for (u32 i = 0; i < 256; ++i) {
            u32 c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    const auto* p = static_cast<const unsigned char*>(data);
    crc = ~crc;
    for (std::size_t i = 0; i < n; ++i) crc = table[(crc ^ p[i]) & 0xffu] ^ (crc >> 8);
    return ~crc;
}

inline u32 crc32(std::string_view s) { return crc32(s.data(), s.size()); }

class ByteWriter {
public:
    void put_u8(u8 v) { buf_.push_back(static_cast<char>(v)); }
    void put_u32(u32 v) {
        for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
    }
    void put_u64(u64 v) {
        for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
    }
    void put_f32(float v) {
        u32 bits;
        std::memcpy(&bits, &v, 4);
        put_u32(bits);
    }
    void put_f64(double v) {
        u64 bits;
        std::memcpy(&bits, &v, 8);
        put_u64(bits);
    }
    void put_bytes(const void* data, std::size_t n) {
        buf_.append(static_cast<const char*>(data), n);
    }
    void put_magic(std::string_view magic) { buf_.append(magic); }
    void put_string(std::string_view s) {
        put_u32(static_cast<u32>(s.size()));
        buf_.append(s);
    }
    void put_f32_span(std::span<const float> v) {
        for (float x : v) put_f32(x);
    }

    const std::string& bytes() const { return buf_; }
    std::string take() { return std::move(buf_); }
    std::size_t size() const { return buf_.size(); }

private:
    std::string buf_;
};

class ByteReader {
public:
    ByteReader(std::string_view data, ErrorCode on_underflow)
        : data_(data), err_(on_underflow) {}

    u8 get_u8() {
        need(1);
        return static_cast<u8>(data_[pos_++]);
    }
    u32 get_u32() {
        need(4);
        u32 v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<u32>(static_cast<u8>(data_[pos_ + i])) << (8 * i);
        pos_ += 4;
        return v;
    }
    u64 get_u64() {
        need(8);
        u64 v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<u64>(static_cast<u8>(data_[pos_ + i])) << (8 * i);
        pos_ += 8;
        return v;
    }
    float get_f32() {
        const u32 bits = get_u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    double get_f64() {
        const u64 bits = get_u64();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    void get_bytes(void* out, std::size_t n) {
        need(n);
        std::memcpy(out, data_.data() + pos_, n);
        pos_ += n;
    }
    std::string get_string() {
        const u32 n = get_u32();
        need(n);
        std::string s(data_.substr(pos_, n));
        pos_ += n;
        return s;
    }
    void expect_magic(std::string_view magic) {
        need(magic.size());
        if (data_.substr(pos_, magic.size()) != magic)
            raise(err_, "bad magic, expected " + std::string(magic));
        pos_ += magic.size();
    }
    void get_f32_span(std::span<float> out) {
        for (float& x : out) x = get_f32();
    }

    std::size_t pos() const { return pos_; }
    std::size_t remaining() const { return data_.size() - pos_; }
    std::string_view rest() const { return data_.substr(pos_); }

private:
    void need(std::size_t n) {
        if (data_.size() - pos_ < n) raise(err_, "truncated input");
    }

    std::string_view data_;
    std::size_t pos_ = 0;
    ErrorCode err_;
};

inline std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) raise(ErrorCode::IoFailure, "cannot open " + path);
    std::string data((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (f.bad()) raise(ErrorCode::IoFailure, "read failed for " + path);
    return data;
}

// temp file + rename; no partial outputs on failure
inline void write_file_atomic(const std::string& path, std::string_view data) {
    namespace fs = std::filesystem;
    const fs::path target(path);
    if (target.has_parent_path() && !target.parent_path().empty()) {
        std::error_code ec;
        fs::create_directories(target.parent_path(), ec);
    }
    const std::string tmp = path + ".tmp." + std::to_string(static_cast<unsigned>(::getpid()));
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) raise(ErrorCode::IoFailure, "cannot open " + tmp + " for writing");
        f.write(data.data(), static_cast<std::streamsize>(data.size()));
        f.flush();
        if (!f) {
            std::error_code ec;
            fs::remove(tmp, ec);
            raise(ErrorCode::IoFailure, "write failed for " + tmp);
        }
    }
    std::error_code ec;
    fs::rename(tmp, target, ec);
    if (ec) {
        fs::remove(tmp, ec);
        raise(ErrorCode::IoFailure, "rename to " + path + " failed");
    }
}

inline std::vector<std::string> split_lines(std::string_view text) {
    std::vector<std::string> lines;
    std::size_t start = 0;
    while (start <= text.size()) {
        const auto nl = text.find('\n', start);
        if (nl == std::string_view::npos) {
            if (start < text.size()) lines.emplace_back(text.substr(start));
            break;
        }
        lines.emplace_back(text.substr(start, nl - start));
        start = nl + 1;
    }
    return lines;
}

} // namespace valm
