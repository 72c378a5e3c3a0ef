#pragma once

// Synthetic class-conditioned images and the FXDT raw dataset format.
//
// FXDT (little-endian):
//   0  char[4] "FXDT"
//   4  u32 version (1)
//   8  u32 count
//   12 u32 h
//   16 u32 w
//   20 u32 c
//   24 u32 label flag (0 or 1)
//   28 u8 pixels, count * c * h * w, each image in c, h, w order
//   .. u32 labels, count entries when the flag is set

#include "flexdit/tokenizer.hpp"

#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

namespace flexdit {

enum class Family { blobs, stripes, checker };
const char* to_string(Family f);
Family family_from_string(const std::string& s);

struct SyntheticSpec {
    int num_classes = 3;
    ImageShape shape{1, 16, 16};
    Family family = Family::blobs;
    Index count = 1024;
    std::uint64_t seed = 0;
    double background = -0.8;
    double amplitude = 1.4;        // blob / stripe contrast
    double blob_sigma = 0.12;      // fraction of the image size
    double blob_radius = 0.25;     // class centres on a circle, fraction of the image size
    double jitter = 0.06;          // uniform centre jitter, fraction of the image size
    double texture = 0.15;         // amplitude of the period-2 class texture

    void validate() const;
    // Class centre (row, col) in pixels for the blob family.
    std::pair<double, double> blob_center(int label) const;
};

struct Dataset {
    ImageShape shape;
    std::vector<std::uint8_t> pixels;  // count * c*h*w
    std::vector<std::uint32_t> labels; // empty when unlabeled

    Index count() const { return shape.size() == 0 ? 0 : static_cast<Index>(pixels.size()) / shape.size(); }
    bool labeled() const { return !labels.empty() || count() == 0; }
    // Rows normalized to [-1, 1]: x / 127.5 - 1.
    Mat images() const;
    std::vector<int> int_labels() const;
};

inline double normalize_pixel(std::uint8_t v) { return v / 127.5 - 1.0; }
std::uint8_t quantize_pixel(double x);  // round((x + 1) * 127.5), clamped

Dataset generate(const SyntheticSpec& spec);

// Nearest-class-mean accuracy on the dataset itself.
double linear_probe_accuracy(const Mat& images, const std::vector<int>& labels, int num_classes);

void write_fxdt(const std::string& path, const Dataset& data);

struct FxdtHeader {
    std::uint32_t version = 1;
    std::uint32_t count = 0;
    std::uint32_t h = 0, w = 0, c = 0;
    bool labeled = false;
    static constexpr std::uint32_t kVersion = 1;
    static constexpr std::size_t kBytes = 28;
    std::uint64_t image_bytes() const { return std::uint64_t{h} * w * c; }
    std::uint64_t payload_bytes() const { return image_bytes() * count; }
};

// Streaming reader: one image in memory at a time.
class FxdtReader {
  public:
    explicit FxdtReader(const std::string& path);
    const FxdtHeader& header() const { return header_; }
    ImageShape shape() const;
    // Next normalized image row and its label (-1 when unlabeled); nullopt at the end.
    std::optional<std::pair<Mat, int>> next();

  private:
    std::string path_;
    FxdtHeader header_;
    std::ifstream pixels_;
    std::ifstream labels_;
    std::uint32_t index_ = 0;
    std::vector<std::uint8_t> buffer_;
};

Dataset load_fxdt(const std::string& path);

}  // namespace flexdit
