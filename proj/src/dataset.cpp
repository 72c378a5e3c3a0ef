#include "flexdit/dataset.hpp"

#include "flexdit/random.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <numbers>

namespace flexdit {

const char* to_string(Family f) {
    switch (f) {
        case Family::blobs: return "blobs";
        case Family::stripes: return "stripes";
        case Family::checker: return "checker";
    }
    return "?";
}

Family family_from_string(const std::string& s) {
    if (s == "blobs" || s == "gaussian-blobs") return Family::blobs;
    if (s == "stripes") return Family::stripes;
    if (s == "checker") return Family::checker;
    throw ConfigError("unknown dataset family '" + s + "'");
}

void SyntheticSpec::validate() const {
    if (num_classes < 1) throw ConfigError("num_classes must be >= 1");
    if (shape.c < 1 || shape.h < 2 || shape.w < 2) throw ConfigError("synthetic images must be at least 2x2");
    if (count < 0) throw ConfigError("count must be >= 0");
    if (count > 0xffffffffLL) throw ConfigError("count exceeds the FXDT limit");
    if (!(blob_sigma > 0)) throw ConfigError("blob_sigma must be positive");
}

std::pair<double, double> SyntheticSpec::blob_center(int label) const {
    const double angle = 2.0 * std::numbers::pi * label / num_classes;
    const double cy = (shape.h - 1) / 2.0 - blob_radius * shape.h * std::cos(angle);
    const double cx = (shape.w - 1) / 2.0 + blob_radius * shape.w * std::sin(angle);
    return {cy, cx};
}

std::uint8_t quantize_pixel(double x) {
    const double v = std::round((x + 1.0) * 127.5);
    return static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
}

Mat Dataset::images() const {
    const Index n = count(), d = shape.size();
    Mat out(n, d);
    for (Index i = 0; i < n * d; ++i) out.data()[i] = normalize_pixel(pixels[static_cast<std::size_t>(i)]);
    return out;
}

std::vector<int> Dataset::int_labels() const { return {labels.begin(), labels.end()}; }

namespace {

// Period-2 texture whose orientation identifies the class.
double texture_at(int label, int y, int x, int phase) {
    switch (label % 3) {
        case 0: return ((y + phase) % 2) ? 1.0 : -1.0;
        case 1: return ((x + phase) % 2) ? 1.0 : -1.0;
        default: return ((x + y + phase) % 2) ? 1.0 : -1.0;
    }
}

}  // namespace

Dataset generate(const SyntheticSpec& spec) {
    spec.validate();
    Dataset data;
    data.shape = spec.shape;
    const Index d = spec.shape.size();
    data.pixels.resize(static_cast<std::size_t>(spec.count * d));
    data.labels.resize(static_cast<std::size_t>(spec.count));
    const int h = spec.shape.h, w = spec.shape.w;
    for (Index n = 0; n < spec.count; ++n) {
        Rng rng(derive_seed(spec.seed, {static_cast<std::uint64_t>(Stream::dataset), static_cast<std::uint64_t>(n)}));
        const int label = static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.num_classes)));
        data.labels[static_cast<std::size_t>(n)] = static_cast<std::uint32_t>(label);
        const int phase = static_cast<int>(rng.below(2));
        const double jy = (2.0 * rng.uniform() - 1.0) * spec.jitter * h;
        const double jx = (2.0 * rng.uniform() - 1.0) * spec.jitter * w;
        const double stripe_phase = (2.0 * rng.uniform() - 1.0) * 0.6;
        auto [cy, cx] = spec.blob_center(label);
        cy += jy;
        cx += jx;
        const double sigma = spec.blob_sigma * std::min(h, w);
        const double theta = std::numbers::pi * label / spec.num_classes;
        const int cell = 2 + label;
        for (int c = 0; c < spec.shape.c; ++c) {
            // Channels share the structure with a per-channel contrast, so
            // colour images are still class-identifiable per channel.
            const double gain = 1.0 - 0.2 * c / std::max(1, spec.shape.c);
            for (int y = 0; y < h; ++y) {
                for (int x = 0; x < w; ++x) {
                    double v = spec.background;
                    switch (spec.family) {
                        case Family::blobs: {
                            const double r2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
                            v += spec.amplitude * gain * std::exp(-r2 / (2 * sigma * sigma));
                            break;
                        }
                        case Family::stripes: {
                            const double u = (y * std::cos(theta) + x * std::sin(theta)) * 2 * std::numbers::pi / 6.0;
                            v += spec.amplitude * gain * 0.5 * (1.0 + std::sin(u + stripe_phase));
                            break;
                        }
                        case Family::checker: {
                            const int oy = static_cast<int>(std::floor(jy)), ox = static_cast<int>(std::floor(jx));
                            const bool on = (((y + oy + 64 * cell) / cell) + ((x + ox + 64 * cell) / cell)) % 2 == 0;
                            v += on ? spec.amplitude * gain : 0.0;
                            break;
                        }
                    }
                    v += spec.texture * texture_at(label, y, x, phase);
                    data.pixels[static_cast<std::size_t>(n * d + (Index{c} * h + y) * w + x)] = quantize_pixel(v);
                }
            }
        }
    }
    if (spec.count >= 10 * spec.num_classes && spec.num_classes > 1) {
        const double acc = linear_probe_accuracy(data.images(), data.int_labels(), spec.num_classes);
        if (acc <= 0.95) {
            throw DataError("synthetic data failed the class-identifiability check (probe accuracy " +
                            std::to_string(acc) + ")");
        }
    }
    return data;
}

double linear_probe_accuracy(const Mat& images, const std::vector<int>& labels, int num_classes) {
    if (images.rows() == 0) return 1.0;
    Mat means = Mat::Zero(num_classes, images.cols());
    std::vector<Index> counts(static_cast<std::size_t>(num_classes), 0);
    for (Index i = 0; i < images.rows(); ++i) {
        const int l = labels[static_cast<std::size_t>(i)];
        means.row(l) += images.row(i);
        ++counts[static_cast<std::size_t>(l)];
    }
    for (int k = 0; k < num_classes; ++k) {
        if (counts[static_cast<std::size_t>(k)] > 0) means.row(k) /= static_cast<double>(counts[static_cast<std::size_t>(k)]);
    }
    Index correct = 0;
    for (Index i = 0; i < images.rows(); ++i) {
        Index best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (int k = 0; k < num_classes; ++k) {
            if (counts[static_cast<std::size_t>(k)] == 0) continue;
            const double dist = (images.row(i) - means.row(k)).squaredNorm();
            if (dist < best_d) {
                best_d = dist;
                best = k;
            }
        }
        if (best == labels[static_cast<std::size_t>(i)]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(images.rows());
}

// --- FXDT -------------------------------------------------------------------

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
    const std::array<char, 4> b{static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                                static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
    os.write(b.data(), 4);
}

std::uint32_t get_u32(const unsigned char* p) {
    return std::uint32_t{p[0]} | (std::uint32_t{p[1]} << 8) | (std::uint32_t{p[2]} << 16) | (std::uint32_t{p[3]} << 24);
}

}  // namespace

void write_fxdt(const std::string& path, const Dataset& data) {
    const Index n = data.count();
    if (n > 0xffffffffLL) throw DataError("too many images for FXDT");
    if (!data.labels.empty() && static_cast<Index>(data.labels.size()) != n) {
        throw DataError("label count does not match the image count");
    }
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open '" + path + "' for writing");
    os.write("FXDT", 4);
    put_u32(os, FxdtHeader::kVersion);
    put_u32(os, static_cast<std::uint32_t>(n));
    put_u32(os, static_cast<std::uint32_t>(data.shape.h));
    put_u32(os, static_cast<std::uint32_t>(data.shape.w));
    put_u32(os, static_cast<std::uint32_t>(data.shape.c));
    put_u32(os, data.labels.empty() ? 0u : 1u);
    os.write(reinterpret_cast<const char*>(data.pixels.data()), static_cast<std::streamsize>(data.pixels.size()));
    for (std::uint32_t l : data.labels) put_u32(os, l);
    if (!os) throw DataError("write to '" + path + "' failed");
}

FxdtReader::FxdtReader(const std::string& path) : path_(path) {
    pixels_.open(path, std::ios::binary);
    if (!pixels_) throw DataError("cannot open '" + path + "'");
    std::array<unsigned char, FxdtHeader::kBytes> raw{};
    pixels_.read(reinterpret_cast<char*>(raw.data()), raw.size());
    const auto got = static_cast<std::size_t>(pixels_.gcount());
    if (got < 4 || std::memcmp(raw.data(), "FXDT", 4) != 0) {
        throw DataError("'" + path + "' is not an FXDT file (bad magic)");
    }
    if (got < raw.size()) {
        throw DataError("'" + path + "' truncated at byte offset " + std::to_string(got) + " inside the 28-byte header");
    }
    header_.version = get_u32(raw.data() + 4);
    header_.count = get_u32(raw.data() + 8);
    header_.h = get_u32(raw.data() + 12);
    header_.w = get_u32(raw.data() + 16);
    header_.c = get_u32(raw.data() + 20);
    const std::uint32_t flag = get_u32(raw.data() + 24);
    if (header_.version != FxdtHeader::kVersion) {
        throw DataError("unsupported FXDT version " + std::to_string(header_.version) + " (expected 1)");
    }
    if (flag > 1) throw DataError("corrupt FXDT header: label flag " + std::to_string(flag));
    header_.labeled = flag == 1;
    if (header_.h == 0 || header_.w == 0 || header_.c == 0) throw DataError("corrupt FXDT header: zero image dimension");
    if (header_.h > 65536 || header_.w > 65536 || header_.c > 4096 || header_.image_bytes() > (1ULL << 32)) {
        throw DataError("corrupt FXDT header: implausible image shape");
    }
    // The declared layout must fit the file before anything is allocated.
    const auto file_bytes = static_cast<std::uint64_t>(std::filesystem::file_size(path));
    const std::uint64_t expected =
        FxdtHeader::kBytes + header_.payload_bytes() + (header_.labeled ? 4ULL * header_.count : 0ULL);
    if (file_bytes < expected) {
        std::string where = "the label table";
        if (file_bytes < FxdtHeader::kBytes + header_.payload_bytes()) {
            where = "image " + std::to_string((file_bytes - FxdtHeader::kBytes) / header_.image_bytes());
        }
        throw DataError("'" + path + "' truncated at byte offset " + std::to_string(file_bytes) + " in " + where +
                        " (expected " + std::to_string(expected) + " bytes)");
    }
    buffer_.resize(static_cast<std::size_t>(header_.image_bytes()));
    if (header_.labeled) {
        labels_.open(path, std::ios::binary);
        labels_.seekg(static_cast<std::streamoff>(FxdtHeader::kBytes + header_.payload_bytes()));
    }
}

ImageShape FxdtReader::shape() const {
    return {static_cast<int>(header_.c), static_cast<int>(header_.h), static_cast<int>(header_.w)};
}

std::optional<std::pair<Mat, int>> FxdtReader::next() {
    if (index_ >= header_.count) return std::nullopt;
    const std::uint64_t offset = FxdtHeader::kBytes + std::uint64_t{index_} * header_.image_bytes();
    pixels_.read(reinterpret_cast<char*>(buffer_.data()), static_cast<std::streamsize>(buffer_.size()));
    const auto got = static_cast<std::uint64_t>(pixels_.gcount());
    if (got < buffer_.size()) {
        throw DataError("'" + path_ + "' truncated at byte offset " + std::to_string(offset + got) + " in image " +
                        std::to_string(index_) + " (payload needs " +
                        std::to_string(FxdtHeader::kBytes + header_.payload_bytes()) + " bytes)");
    }
    Mat row(1, static_cast<Index>(buffer_.size()));
    for (std::size_t i = 0; i < buffer_.size(); ++i) row(0, static_cast<Index>(i)) = normalize_pixel(buffer_[i]);
    int label = -1;
    if (header_.labeled) {
        std::array<unsigned char, 4> b{};
        labels_.read(reinterpret_cast<char*>(b.data()), 4);
        const auto lg = static_cast<std::uint64_t>(labels_.gcount());
        if (lg < 4) {
            const std::uint64_t at = FxdtHeader::kBytes + header_.payload_bytes() + 4ULL * index_ + lg;
            throw DataError("'" + path_ + "' truncated at byte offset " + std::to_string(at) + " in the label table");
        }
        const std::uint32_t l = get_u32(b.data());
        if (l > 0x7fffffffU) throw DataError("corrupt label value in '" + path_ + "'");
        label = static_cast<int>(l);
    }
    ++index_;
    return std::make_pair(std::move(row), label);
}

Dataset load_fxdt(const std::string& path) {
    FxdtReader reader(path);
    Dataset data;
    data.shape = reader.shape();
    const auto& hd = reader.header();
    data.pixels.reserve(static_cast<std::size_t>(std::min<std::uint64_t>(hd.payload_bytes(), std::filesystem::file_size(path))));
    while (auto item = reader.next()) {
        for (Index i = 0; i < item->first.cols(); ++i) data.pixels.push_back(quantize_pixel(item->first(0, i)));
        if (hd.labeled) data.labels.push_back(static_cast<std::uint32_t>(item->second));
    }
    return data;
}

}  // namespace flexdit
