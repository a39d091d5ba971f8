// SPDX-License-Identifier: Apache-2.0
#include "mpreid/archive.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "mpreid/errors.hpp"

namespace mpreid {

namespace {

constexpr char kMagic[8] = {'M', 'P', 'R', 'T', 'N', 'S', 'R', '1'};

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
    }
}

std::uint64_t get_u64(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) {
        v = (v << 8) | p[i];
    }
    return v;
}

void put_f64(std::string& out, double d) { put_u64(out, std::bit_cast<std::uint64_t>(d)); }

}  // namespace

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) {
            throw InputError("cannot open " + tmp.string() + " for writing");
        }
        os.write(contents.data(), static_cast<std::streamsize>(contents.size()));
        if (!os) {
            throw InputError("failed writing " + tmp.string());
        }
    }
    std::filesystem::rename(tmp, path);
}

void save_archive(const std::filesystem::path& path, const TensorMap& tensors) {
    nlohmann::json manifest;
    manifest["tensors"] = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        manifest["tensors"].push_back({{"name", name}, {"shape", t.shape()}, {"dtype", "f64"}, {"offset", offset}});
        offset += 8u * t.size();
    }
    const std::string header = manifest.dump();
    std::string out(kMagic, sizeof(kMagic));
    put_u64(out, header.size());
    out += header;
    out.reserve(out.size() + offset);
    for (const auto& [name, t] : tensors) {
        for (double v : t.data()) {
            put_f64(out, v);
        }
    }
    write_file_atomic(path, out);
}

TensorMap load_archive(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw InputError("cannot open archive " + path.string());
    }
    std::ostringstream ss;
    ss << is.rdbuf();
    const std::string bytes = ss.str();
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
        throw InputError(path.string() + " is not a tensor archive");
    }
    const auto header_len = get_u64(p + 8);
    if (16 + header_len > bytes.size()) {
        throw InputError(path.string() + ": truncated manifest");
    }
    const auto manifest = nlohmann::json::parse(bytes.substr(16, header_len));
    const std::size_t base = 16 + header_len;
    TensorMap out;
    for (const auto& entry : manifest.at("tensors")) {
        if (entry.at("dtype").get<std::string>() != "f64") {
            throw InputError(path.string() + ": unsupported dtype " + entry.at("dtype").get<std::string>());
        }
        auto shape = entry.at("shape").get<Shape>();
        const auto offset = entry.at("offset").get<std::uint64_t>();
        const auto n = shape_numel(shape);
        if (base + offset + 8 * n > bytes.size()) {
            throw InputError(path.string() + ": buffer of " + entry.at("name").get<std::string>() + " out of range");
        }
        std::vector<double> data(n);
        for (std::size_t i = 0; i < n; ++i) {
            data[i] = std::bit_cast<double>(get_u64(p + base + offset + 8 * i));
        }
        out.emplace(entry.at("name").get<std::string>(), Tensor(std::move(shape), std::move(data)));
    }
    return out;
}

}  // namespace mpreid
