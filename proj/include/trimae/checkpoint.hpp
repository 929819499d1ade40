#pragma once

#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "trimae/tensor.hpp"

namespace trimae {

// Single-file tensor container: 8-byte magic, length-prefixed manifest
// (key=value lines), then tensor records (u32 name length, name, 1-byte dtype,
// 1-byte rank, 8-byte LE dims, raw little-endian payload). dtype 0 = float64.
struct Checkpoint {
    static constexpr char kMagic[8] = {'T', 'M', 'A', 'E', 'C', 'K', '0', '1'};

    std::map<std::string, std::string> manifest;
    std::vector<std::pair<std::string, Tensor>> tensors;  // insertion order preserved

    const Tensor* find(const std::string& name) const {
        for (const auto& [n, t] : tensors)
            if (n == name) return &t;
        return nullptr;
    }

    void save(const std::string& path) const {
        std::ofstream f(path, std::ios::binary);
        if (!f) throw DataError("checkpoint", "cannot open for writing: " + path);
        f.write(kMagic, 8);
        std::string man;
        for (const auto& [k, v] : manifest) man += k + "=" + v + "\n";
        write_u64(f, man.size());
        f.write(man.data(), static_cast<std::streamsize>(man.size()));
        for (const auto& [name, t] : tensors) {
            write_u32(f, static_cast<std::uint32_t>(name.size()));
            f.write(name.data(), static_cast<std::streamsize>(name.size()));
            const char dtype = 0, rank = static_cast<char>(t.rank());
            f.write(&dtype, 1);
            f.write(&rank, 1);
            for (std::size_t dim : t.shape()) write_u64(f, dim);
            f.write(reinterpret_cast<const char*>(t.data()),
                    static_cast<std::streamsize>(t.size() * sizeof(double)));
        }
        if (!f) throw DataError("checkpoint", "write failed: " + path);
    }

    static Checkpoint load(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw DataError("checkpoint", "cannot open: " + path);
        char magic[8];
        f.read(magic, 8);
        if (!f || std::memcmp(magic, kMagic, 8) != 0)
            throw DataError("checkpoint", "bad magic in " + path);
        Checkpoint ck;
        const std::uint64_t man_len = read_u64(f);
        std::string man(man_len, '\0');
        f.read(man.data(), static_cast<std::streamsize>(man_len));
        std::size_t pos = 0;
        while (pos < man.size()) {
            const std::size_t nl = man.find('\n', pos);
            const std::string line = man.substr(pos, nl - pos);
            pos = nl == std::string::npos ? man.size() : nl + 1;
            const std::size_t eq = line.find('=');
            if (eq != std::string::npos) ck.manifest[line.substr(0, eq)] = line.substr(eq + 1);
        }
        while (f.peek() != EOF) {
            const std::uint32_t name_len = read_u32(f);
            if (!f) break;
            std::string name(name_len, '\0');
            f.read(name.data(), name_len);
            char dtype, rank;
            f.read(&dtype, 1);
            f.read(&rank, 1);
            if (dtype != 0) throw DataError("checkpoint", "unsupported dtype in " + path);
            std::vector<std::size_t> shape;
            for (int i = 0; i < rank; ++i) shape.push_back(read_u64(f));
            Tensor t(shape);
            f.read(reinterpret_cast<char*>(t.data()),
                   static_cast<std::streamsize>(t.size() * sizeof(double)));
            if (!f) throw DataError("checkpoint", "truncated tensor record in " + path);
            ck.tensors.emplace_back(std::move(name), std::move(t));
        }
        return ck;
    }

private:
    static void write_u32(std::ofstream& f, std::uint32_t x) {
        char b[4];
        for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((x >> (8 * i)) & 0xff);
        f.write(b, 4);
    }
    static void write_u64(std::ofstream& f, std::uint64_t x) {
        char b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((x >> (8 * i)) & 0xff);
        f.write(b, 8);
    }
    static std::uint32_t read_u32(std::ifstream& f) {
        unsigned char b[4];
        f.read(reinterpret_cast<char*>(b), 4);
        std::uint32_t x = 0;
        for (int i = 0; i < 4; ++i) x |= static_cast<std::uint32_t>(b[i]) << (8 * i);
        return x;
    }
    static std::uint64_t read_u64(std::ifstream& f) {
        unsigned char b[8];
        f.read(reinterpret_cast<char*>(b), 8);
        std::uint64_t x = 0;
        for (int i = 0; i < 8; ++i) x |= static_cast<std::uint64_t>(b[i]) << (8 * i);
        return x;
    }
};

}  // namespace trimae
