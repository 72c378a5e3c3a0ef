#pragma once

// Desk-scale diagnostics: single-step spectral filtering, weak-vs-powerful
// prediction divergence, per-layer activation drift and image metrics.

#include "flexdit/guidance.hpp"

#include <map>
#include <string>
#include <vector>

namespace flexdit {

enum class BandKind { low, high, all };
const char* to_string(BandKind k);
BandKind band_kind_from_string(const std::string& s);

// Radial mask on DFT coefficients: low keeps |f| <= cutoff (as a fraction of
// Nyquist, per axis), high keeps the rest and is computed as x - low(x).
struct BandFilter {
    BandKind kind = BandKind::all;
    double cutoff = 0.5;

    void validate() const;
    // Filters each channel plane of a flattened [c*h*w] row batch.
    Mat apply(const Mat& rows, const ImageShape& shape) const;
};

// Per-coefficient radial frequency |f| / Nyquist for an h x w grid.
Mat radial_frequency(Index h, Index w);

struct FilterComparison {
    Mat baseline;  // unfiltered final images
    Mat filtered;
    std::vector<double> l2;    // per image
    std::vector<double> ssim;  // per image
    double mean_l2 = 0;
    double mean_ssim = 0;
};

// Runs the plan twice with identical noise; the second run passes the eps
// prediction of step `step` through `filter` before the update is formed.
FilterComparison filtered_step_generate(const ModelParams& model, const NoiseSchedule& sched,
                                        const InferencePlan& plan, const std::vector<Condition>& cond,
                                        std::uint64_t seed, int step, const BandFilter& filter,
                                        const GuidedOptions& opts = {});

struct DivergenceCurve {
    std::vector<int> ts;
    std::vector<double> mean_l2;  // mean over probes of ||eps(p_weak) - eps(p_powerful)||_2
    Index samples = 0;
};

// Probes are noised with q_sample using noise keyed by (seed, probe index, t).
DivergenceCurve divergence_curve(const ModelParams& model, const NoiseSchedule& sched, const Mat& probes,
                                 const std::vector<int>& labels, const std::vector<int>& ts, int p_weak,
                                 int p_powerful, std::uint64_t seed);

// Spearman rank correlation with average ranks for ties.
double spearman(const std::vector<double>& a, const std::vector<double>& b);

// Activations per step (t = T..1), keyed by tap name ("embed", "block{i}", "final").
using ActivationDump = std::vector<std::map<std::string, Mat>>;

std::vector<std::string> model_taps(const ModelParams& model);

// Samples at a fixed patch size and records the requested taps at every step.
ActivationDump record_activations(const ModelParams& model, const NoiseSchedule& sched, int p,
                                  const std::vector<Condition>& cond, std::uint64_t seed,
                                  const std::vector<std::string>& taps);

// [taps x (steps - 1)]: entry (i, k) is the mean over images of the L2
// distance of tap i between step k and step k + 1 of the dump.
Mat activation_distance(const ActivationDump& dump, const std::vector<std::string>& taps, Index images);

// Single-scale SSIM over 8x8 uniform windows (stride 1), C1 = (0.01 L)^2,
// C2 = (0.03 L)^2 with dynamic range L = 2, population window statistics,
// averaged over windows and channels.
double ssim(const RowVec& a, const RowVec& b, const ImageShape& shape, int window = 8);

struct DiversityReport {
    double mean_l2 = 0;
    double mean_ssim = 0;
    Index pairs = 0;
};
DiversityReport diversity(const Mat& samples, const ImageShape& shape);

}  // namespace flexdit
