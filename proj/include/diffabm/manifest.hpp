#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace diffabm {

/// SHA-1 digest as lowercase hex (content hash for manifests).
std::string sha1_hex(std::string_view data);

/// Shortest-exact decimal form of a double ("%.17g"), locale-independent.
std::string format_double(double v);

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
};

/// Writes a CSV with a fixed column order; throws std::runtime_error on I/O
/// failure.
void write_csv(const std::filesystem::path& path, const CsvTable& table);

void write_text_file(const std::filesystem::path& path, const std::string& content);

/// Writes `manifest.json` next to the outputs: the fully resolved config, a
/// content hash over its canonical serialisation, the seed, and the list of
/// artifact files. Re-running with the same manifest reproduces every
/// artifact byte-identically (timing.csv excepted, as documented).
void write_manifest(const std::filesystem::path& out_dir, const nlohmann::json& resolved_config,
                    std::uint64_t seed, const std::vector<std::string>& outputs);

}  // namespace diffabm
