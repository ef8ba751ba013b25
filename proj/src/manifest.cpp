#include "diffabm/manifest.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace diffabm {

namespace {

inline std::uint32_t rotl32(std::uint32_t x, int s) { return (x << s) | (x >> (32 - s)); }

}  // namespace

std::string sha1_hex(std::string_view data) {
    std::array<std::uint32_t, 5> h{0x67452301u, 0xEFCDAB89u, 0x98BADCFEu, 0x10325476u,
                                   0xC3D2E1F0u};
    // Pad to the standard 512-bit block layout.
    std::vector<std::uint8_t> msg(data.begin(), data.end());
    const std::uint64_t bit_len = static_cast<std::uint64_t>(msg.size()) * 8;
    msg.push_back(0x80);
    while (msg.size() % 64 != 56) msg.push_back(0x00);
    for (int i = 7; i >= 0; --i) msg.push_back(static_cast<std::uint8_t>(bit_len >> (8 * i)));

    std::array<std::uint32_t, 80> w{};
    for (std::size_t block = 0; block < msg.size(); block += 64) {
        for (int t = 0; t < 16; ++t) {
            w[t] = (std::uint32_t(msg[block + 4 * t]) << 24) |
                   (std::uint32_t(msg[block + 4 * t + 1]) << 16) |
                   (std::uint32_t(msg[block + 4 * t + 2]) << 8) |
                   std::uint32_t(msg[block + 4 * t + 3]);
        }
        for (int t = 16; t < 80; ++t) {
            w[t] = rotl32(w[t - 3] ^ w[t - 8] ^ w[t - 14] ^ w[t - 16], 1);
        }
        std::uint32_t a = h[0], b = h[1], c = h[2], d = h[3], e = h[4];
        for (int t = 0; t < 80; ++t) {
            std::uint32_t f, k;
            if (t < 20) {
                f = (b & c) | (~b & d);
                k = 0x5A827999u;
            } else if (t < 40) {
                f = b ^ c ^ d;
                k = 0x6ED9EBA1u;
            } else if (t < 60) {
                f = (b & c) | (b & d) | (c & d);
                k = 0x8F1BBCDCu;
            } else {
                f = b ^ c ^ d;
                k = 0xCA62C1D6u;
            }
            const std::uint32_t temp = rotl32(a, 5) + f + e + k + w[t];
            e = d;
            d = c;
            c = rotl32(b, 30);
            b = a;
            a = temp;
        }
        h[0] += a;
        h[1] += b;
        h[2] += c;
        h[3] += d;
        h[4] += e;
    }
    char out[41];
    std::snprintf(out, sizeof(out), "%08x%08x%08x%08x%08x", h[0], h[1], h[2], h[3], h[4]);
    return std::string(out);
}

std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
}

void write_text_file(const std::filesystem::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
    out << content;
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

void write_csv(const std::filesystem::path& path, const CsvTable& table) {
    std::string content;
    for (std::size_t i = 0; i < table.header.size(); ++i) {
        if (i) content += ',';
        content += table.header[i];
    }
    content += '\n';
    for (const auto& row : table.rows) {
        if (row.size() != table.header.size()) {
            throw std::logic_error("write_csv: row width mismatch in " + path.string());
        }
        for (std::size_t i = 0; i < row.size(); ++i) {
            if (i) content += ',';
            content += row[i];
        }
        content += '\n';
    }
    write_text_file(path, content);
}

void write_manifest(const std::filesystem::path& out_dir, const nlohmann::json& resolved_config,
                    std::uint64_t seed, const std::vector<std::string>& outputs) {
    const std::string canonical = resolved_config.dump(2);
    nlohmann::json manifest{{"config", resolved_config},
                            {"content_hash", sha1_hex(canonical)},
                            {"seed", seed},
                            {"outputs", outputs}};
    write_text_file(out_dir / "manifest.json", manifest.dump(2) + "\n");
}

}  // namespace diffabm
