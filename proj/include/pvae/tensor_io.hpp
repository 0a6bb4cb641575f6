#pragma once

// PVT1 tensor container and small file helpers shared by every module.
//
// Layout of one record:
//   "PVT1" | u32 LE header length | JSON header | raw LE payload
// with header {"dtype":"f32","shape":[...],"order":"row-major"} and an
// optional "name" key. Files holding several records (checkpoints) simply
// concatenate them.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include "json.hpp"

#include "pvae/errors.hpp"

namespace pvae {

static_assert(std::endian::native == std::endian::little, "PVT1 payloads are little-endian");

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

struct StoredTensor {
    std::string name;
    std::vector<std::int64_t> shape;
    std::vector<float> data;

    std::int64_t numel() const {
        return std::accumulate(shape.begin(), shape.end(), std::int64_t{1}, std::multiplies<>());
    }
};

inline constexpr std::array<char, 4> kTensorMagic{'P', 'V', 'T', '1'};

inline void write_tensor(std::ostream& os, const StoredTensor& t) {
    if (static_cast<std::size_t>(t.numel()) != t.data.size()) {
        throw ShapeError("write_tensor", "shape does not match payload size for '" + t.name + "'");
    }
    Json header;
    header["dtype"] = "f32";
    header["shape"] = t.shape;
    header["order"] = "row-major";
    if (!t.name.empty()) header["name"] = t.name;
    const std::string text = header.dump();
    const auto len = static_cast<std::uint32_t>(text.size());

    os.write(kTensorMagic.data(), 4);
    os.write(reinterpret_cast<const char*>(&len), sizeof(len));
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    os.write(reinterpret_cast<const char*>(t.data.data()),
             static_cast<std::streamsize>(t.data.size() * sizeof(float)));
}

/// Reads one record; returns false at a clean end of stream.
inline bool read_tensor(std::istream& is, StoredTensor& out) {
    std::array<char, 4> magic{};
    is.read(magic.data(), 4);
    if (is.gcount() == 0 && is.eof()) return false;
    if (is.gcount() != 4 || magic != kTensorMagic) throw DataError("tensor container: bad magic");

    std::uint32_t len = 0;
    is.read(reinterpret_cast<char*>(&len), sizeof(len));
    std::string text(len, '\0');
    is.read(text.data(), len);
    if (!is) throw DataError("tensor container: truncated header");

    const Json header = Json::parse(text, nullptr, false);
    if (header.is_discarded() || header.value("dtype", "") != "f32" ||
        header.value("order", "") != "row-major" || !header.contains("shape")) {
        throw DataError("tensor container: unsupported header " + text);
    }
    out.name = header.value("name", "");
    out.shape = header["shape"].get<std::vector<std::int64_t>>();
    out.data.resize(static_cast<std::size_t>(out.numel()));
    is.read(reinterpret_cast<char*>(out.data.data()),
            static_cast<std::streamsize>(out.data.size() * sizeof(float)));
    if (!is) throw DataError("tensor container: truncated payload");
    return true;
}

/// Writes to `path.tmp` and renames, so readers never observe a partial file.
template <typename Writer>
void write_file_atomic(const fs::path& path, Writer&& writer) {
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw DataError("cannot open " + tmp.string() + " for writing");
        writer(os);
        os.flush();
        if (!os) throw DataError("write failed: " + tmp.string());
    }
    fs::rename(tmp, path);
}

inline void save_tensors(const fs::path& path, std::span<const StoredTensor> tensors) {
    write_file_atomic(path, [&](std::ostream& os) {
        for (const auto& t : tensors) write_tensor(os, t);
    });
}

inline void save_tensor(const fs::path& path, const StoredTensor& t) {
    save_tensors(path, std::span<const StoredTensor>(&t, 1));
}

inline std::vector<StoredTensor> load_tensors(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("missing tensor file " + path.string());
    std::vector<StoredTensor> out;
    StoredTensor t;
    while (read_tensor(is, t)) out.push_back(std::move(t));
    return out;
}

inline StoredTensor load_tensor(const fs::path& path) {
    auto all = load_tensors(path);
    if (all.size() != 1) throw DataError("expected exactly one tensor in " + path.string());
    return std::move(all.front());
}

inline void save_json(const fs::path& path, const Json& j) {
    write_file_atomic(path, [&](std::ostream& os) { os << j.dump(2) << '\n'; });
}

inline Json load_json(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw DataError("missing json file " + path.string());
    Json j = Json::parse(is, nullptr, false);
    if (j.is_discarded()) throw DataError("malformed json in " + path.string());
    return j;
}

inline void save_text(const fs::path& path, const std::string& text) {
    write_file_atomic(path, [&](std::ostream& os) { os << text; });
}

inline std::string sha256_hex(std::string_view bytes) {
    std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
    unsigned int len = 0;
    EVP_Digest(bytes.data(), bytes.size(), digest.data(), &len, EVP_sha256(), nullptr);
    std::ostringstream os;
    for (unsigned int i = 0; i < len; ++i) {
        os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
    }
    return os.str();
}

inline std::string sha256_file(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot hash missing file " + path.string());
    std::ostringstream buf;
    buf << is.rdbuf();
    return sha256_hex(buf.str());
}

} // namespace pvae
