#pragma once

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace phasealign::io {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

using json = nlohmann::json;

class FormatError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

/// Framed file: one line of compact JSON, a newline, then raw little-endian payload.
class FramedWriter {
   public:
    FramedWriter(const std::filesystem::path& path, const json& header) : out_(path, std::ios::binary | std::ios::trunc) {
        if (!out_) throw FormatError("cannot open " + path.string() + " for writing");
        const std::string line = header.dump();
        out_.write(line.data(), static_cast<std::streamsize>(line.size()));
        out_.put('\n');
    }

    template <typename U>
    void write(const std::vector<U>& values) {
        out_.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(U)));
    }

    void close() {
        out_.flush();
        if (!out_) throw FormatError("write failed");
        out_.close();
    }

   private:
    std::ofstream out_;
};

class FramedReader {
   public:
    explicit FramedReader(const std::filesystem::path& path) : path_(path), in_(path, std::ios::binary) {
        if (!in_) throw FormatError("cannot open " + path.string());
        std::string line;
        if (!std::getline(in_, line)) throw FormatError(path.string() + ": missing header line");
        try {
            header_ = json::parse(line);
        } catch (const json::exception& e) {
            throw FormatError(path.string() + ": malformed header: " + e.what());
        }
        payload_offset_ = static_cast<std::uint64_t>(in_.tellg());
        file_size_ = std::filesystem::file_size(path);
    }

    const json& header() const { return header_; }
    std::uint64_t payload_bytes() const { return file_size_ - payload_offset_; }

    template <typename U>
    std::vector<U> read_at(std::uint64_t payload_pos, std::size_t count) {
        const std::uint64_t bytes = count * sizeof(U);
        if (payload_pos + bytes > payload_bytes())
            throw FormatError(path_.string() + ": truncated payload (need " + std::to_string(payload_pos + bytes) +
                              " bytes, have " + std::to_string(payload_bytes()) + ")");
        std::vector<U> values(count);
        in_.seekg(static_cast<std::streamoff>(payload_offset_ + payload_pos));
        in_.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(bytes));
        if (!in_) throw FormatError(path_.string() + ": read failed");
        return values;
    }

   private:
    std::filesystem::path path_;
    std::ifstream in_;
    json header_;
    std::uint64_t payload_offset_ = 0;
    std::uint64_t file_size_ = 0;
};

/// FNV-1a over the file bytes, hex encoded. Used for dataset digests in run manifests.
inline std::string file_digest(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    std::uint64_t h = 1469598103934665603ull;
    char buf[1 << 16];
    while (in) {
        in.read(buf, sizeof buf);
        for (std::streamsize i = 0; i < in.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 1099511628211ull;
        }
    }
    char hex[17];
    std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(h));
    return hex;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open " + path.string() + " for writing");
    out << text;
}

}  // namespace phasealign::io
