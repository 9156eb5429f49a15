#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "sundial/rng.hpp"

namespace sundial {

struct SeriesRecord {
    std::string id;
    std::vector<float> values;
    std::optional<std::string> freq;
};

std::vector<SeriesRecord> load_corpus(const std::string& path);
void save_corpus(const std::vector<SeriesRecord>& corpus, const std::string& path);

std::vector<SeriesRecord> s3_flatten(const std::vector<std::vector<float>>& multivariate,
                                     const std::string& base_id);

struct Kernel {
    enum class Kind { linear, rbf, periodic, white };
    Kind kind = Kind::rbf;
    double p1 = 1.0;  // rbf/periodic length-scale, linear offset, white stddev
    double p2 = 1.0;  // periodic period
};

// kernels combined left to right: (((k0 op0 k1) op1 k2) ...)
struct KernelComposite {
    std::vector<Kernel> kernels;
    std::vector<char> ops;  // '+' or '*', one per kernel after the first
    double eval(double x, double y, std::int64_t length) const;
};

// one GP path at unit-spaced inputs; throws DataError if the covariance
// stays non-positive-definite after jitter
std::vector<double> gp_sample(const KernelComposite& k, std::int64_t length, Rng& rng);

// shifts and scales to zero mean, unit population std
void standardize(std::vector<double>& values);

SeriesRecord kernel_synth(std::uint64_t seed, std::int64_t length, int max_kernels,
                          const std::string& id = "");

std::vector<SeriesRecord> make_synth_corpus(std::uint64_t seed, std::int64_t count,
                                            std::int64_t length, int max_kernels);

}  // namespace sundial
