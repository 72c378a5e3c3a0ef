#pragma once

// Run outputs: manifests, output-directory locks, PGM/PPM images and CSV.

#include "flexdit/config.hpp"
#include "flexdit/tokenizer.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

namespace flexdit {

// FNV-1a of a file's bytes.
std::uint64_t file_hash(const std::string& path);

// Everything needed to rerun a command. Artifact paths are relative to the
// output directory; inputs are absolute or as given on the command line.
struct RunManifest {
    static constexpr int kVersion = 1;

    std::string command;             // "sample", "analyze divergence", ...
    nlohmann::json config;           // Config::to_json
    std::uint64_t config_hash = 0;
    std::uint64_t seed = 0;
    std::string plan;                // canonical plan text, empty when unused
    std::vector<int> patch_sizes;    // conditional-branch size per step, t = T..1
    nlohmann::json flops = nlohmann::json::object();
    nlohmann::json metrics = nlohmann::json::object();
    std::map<std::string, std::uint64_t> inputs;     // path -> file hash
    std::map<std::string, std::uint64_t> artifacts;  // relative path -> file hash

    nlohmann::json to_json() const;
    static RunManifest from_json(const nlohmann::json& j);
    void save(const std::string& path) const;
    static RunManifest load(const std::string& path);
};

// Exclusive lock on an output directory, held for the lifetime of the object.
class OutputLock {
  public:
    explicit OutputLock(const std::filesystem::path& dir);
    ~OutputLock();
    OutputLock(const OutputLock&) = delete;
    OutputLock& operator=(const OutputLock&) = delete;
    const std::filesystem::path& path() const { return path_; }

  private:
    std::filesystem::path path_;
    int fd_ = -1;
};

// P5 for one channel, P6 for three; pixels quantized with quantize_pixel.
void write_image(const std::string& path, const RowVec& image, const ImageShape& shape);
// Reads back what write_image wrote, normalized to [-1, 1].
RowVec read_image(const std::string& path, ImageShape* shape = nullptr);
// Brightness |a - b| / 2 of the full range, so identical pixels are black.
void write_difference_image(const std::string& path, const RowVec& a, const RowVec& b, const ImageShape& shape);

class CsvWriter {
  public:
    CsvWriter(const std::string& path, const std::vector<std::string>& header);
    void row(const std::vector<std::string>& cells);
    void row(const std::vector<double>& cells);
    void close();

  private:
    std::ofstream out_;
    std::size_t width_;
    std::string path_;
};

std::string csv_cell(double v);

}  // namespace flexdit
