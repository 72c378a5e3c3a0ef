#include "flexdit/io.hpp"

#include "flexdit/dataset.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cmath>
#include <sstream>

namespace flexdit {

std::uint64_t file_hash(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open '" + path + "' for hashing");
    std::uint64_t h = fnv1a(nullptr, 0);
    char buf[1 << 16];
    while (f) {
        f.read(buf, sizeof buf);
        h = fnv1a(buf, static_cast<std::size_t>(f.gcount()), h);
    }
    return h;
}

namespace {

std::uint64_t parse_hex(const std::string& s) {
    std::uint64_t v = 0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v, 16);
    if (s.size() != 16 || res.ec != std::errc() || res.ptr != s.data() + s.size()) {
        throw DataError("manifest: malformed hash '" + s + "'");
    }
    return v;
}

nlohmann::json hash_map(const std::map<std::string, std::uint64_t>& m) {
    auto j = nlohmann::json::object();
    for (const auto& [k, v] : m) j[k] = hex64(v);
    return j;
}

std::map<std::string, std::uint64_t> hash_map(const nlohmann::json& j) {
    std::map<std::string, std::uint64_t> m;
    for (auto it = j.begin(); it != j.end(); ++it) m[it.key()] = parse_hex(it.value().get<std::string>());
    return m;
}

}  // namespace

nlohmann::json RunManifest::to_json() const {
    return {{"format", "flexdit-manifest"},
            {"version", kVersion},
            {"command", command},
            {"config", config},
            {"config_hash", hex64(config_hash)},
            {"seed", std::to_string(seed)},
            {"plan", plan},
            {"patch_sizes", patch_sizes},
            {"flops", flops},
            {"metrics", metrics},
            {"inputs", hash_map(inputs)},
            {"artifacts", hash_map(artifacts)}};
}

RunManifest RunManifest::from_json(const nlohmann::json& j) {
    try {
        if (j.at("format") != "flexdit-manifest") throw DataError("not a flexdit manifest");
        if (j.at("version").get<int>() != kVersion) {
            throw DataError("manifest version " + std::to_string(j.at("version").get<int>()) + " is not supported");
        }
        RunManifest m;
        m.command = j.at("command").get<std::string>();
        m.config = j.at("config");
        m.config_hash = parse_hex(j.at("config_hash").get<std::string>());
        m.seed = std::stoull(j.at("seed").get<std::string>());
        m.plan = j.at("plan").get<std::string>();
        m.patch_sizes = j.at("patch_sizes").get<std::vector<int>>();
        m.flops = j.at("flops");
        m.metrics = j.at("metrics");
        m.inputs = hash_map(j.at("inputs"));
        m.artifacts = hash_map(j.at("artifacts"));
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed manifest: ") + e.what());
    } catch (const std::logic_error& e) {
        throw DataError(std::string("malformed manifest: ") + e.what());
    }
}

void RunManifest::save(const std::string& path) const {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw ConfigError("cannot write manifest " + path);
    f << to_json().dump(2) << "\n";
}

RunManifest RunManifest::load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open manifest " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("manifest " + path + " is not valid JSON: " + e.what());
    }
    return from_json(j);
}

OutputLock::OutputLock(const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw ConfigError("cannot create output directory " + dir.string() + ": " + ec.message());
    path_ = dir / ".flexdit.lock";
    fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd_ < 0) {
        throw ConfigError("output directory " + dir.string() + " is locked by another run (" + path_.string() +
                          "); remove the file if that run is gone");
    }
    const auto pid = std::to_string(::getpid()) + "\n";
    if (::write(fd_, pid.data(), pid.size()) < 0) {
        // the lock itself is the file's existence; a missing pid is cosmetic
    }
}

OutputLock::~OutputLock() {
    if (fd_ >= 0) {
        ::close(fd_);
        std::error_code ec;
        std::filesystem::remove(path_, ec);
    }
}

void write_image(const std::string& path, const RowVec& image, const ImageShape& shape) {
    if (image.size() != shape.size()) throw ShapeError("image does not match its shape");
    if (shape.c != 1 && shape.c != 3) throw ConfigError("PGM/PPM output needs 1 or 3 channels, got " + std::to_string(shape.c));
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw ConfigError("cannot write image " + path);
    f << (shape.c == 1 ? "P5" : "P6") << "\n" << shape.w << " " << shape.h << "\n255\n";
    const Index plane = Index{shape.h} * shape.w;
    std::string bytes(static_cast<std::size_t>(image.size()), '\0');
    for (Index px = 0; px < plane; ++px)
        for (Index c = 0; c < shape.c; ++c) {
            bytes[static_cast<std::size_t>(px * shape.c + c)] = static_cast<char>(quantize_pixel(image(c * plane + px)));
        }
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

RowVec read_image(const std::string& path, ImageShape* shape_out) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open image " + path);
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    f >> magic >> w >> h >> maxval;
    f.get();
    if ((magic != "P5" && magic != "P6") || w < 1 || h < 1 || maxval != 255 || !f) {
        throw DataError(path + " is not an 8-bit binary PGM/PPM");
    }
    const ImageShape shape{magic == "P5" ? 1 : 3, h, w};
    std::string bytes(static_cast<std::size_t>(shape.size()), '\0');
    f.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (f.gcount() != static_cast<std::streamsize>(bytes.size())) throw DataError(path + ": truncated pixel data");
    const Index plane = Index{h} * w;
    RowVec out(shape.size());
    for (Index px = 0; px < plane; ++px)
        for (Index c = 0; c < shape.c; ++c) {
            out(c * plane + px) = normalize_pixel(static_cast<std::uint8_t>(bytes[static_cast<std::size_t>(px * shape.c + c)]));
        }
    if (shape_out) *shape_out = shape;
    return out;
}

void write_difference_image(const std::string& path, const RowVec& a, const RowVec& b, const ImageShape& shape) {
    if (a.size() != b.size()) throw ShapeError("difference image: sizes differ");
    const RowVec d = (a - b).cwiseAbs().array() - 1.0;
    write_image(path, d, shape);
}

void CsvWriter::close() {
    out_.close();
    if (!out_) throw Error("failed writing " + path_);
}

std::string csv_cell(double v) { return format_double(v); }

CsvWriter::CsvWriter(const std::string& path, const std::vector<std::string>& header)
    : out_(path, std::ios::trunc), width_(header.size()), path_(path) {
    if (!out_) throw ConfigError("cannot write " + path);
    row(header);
}

void CsvWriter::row(const std::vector<std::string>& cells) {
    if (cells.size() != width_) throw Error(path_ + ": row has " + std::to_string(cells.size()) + " cells, header has " + std::to_string(width_));
    for (std::size_t i = 0; i < cells.size(); ++i) {
        if (cells[i].find_first_of(",\"\n") != std::string::npos) throw Error(path_ + ": cell needs quoting: " + cells[i]);
        out_ << (i ? "," : "") << cells[i];
    }
    out_ << "\n";
}

void CsvWriter::row(const std::vector<double>& cells) {
    std::vector<std::string> s;
    for (double v : cells) s.push_back(csv_cell(v));
    row(s);
}

}  // namespace flexdit
