#pragma once

#include <Eigen/Core>

#include <charconv>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace flexdit {

using Index = Eigen::Index;

// Row-major storage everywhere: token matrices are [rows, features] and the
// flattened image layout is channel-major then row-major.
template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Mat = MatrixX<double>;
using Vec = VectorX<double>;
using RowVec = Eigen::Matrix<double, 1, Eigen::Dynamic>;

// FNV-1a, 64-bit.
inline std::uint64_t fnv1a(const void* data, std::size_t bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < bytes; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Shortest round-trip decimal form, always with a '.' or an exponent.
inline std::string format_double(double v) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    std::string s(buf, res.ptr);
    if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
    return s;
}

class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
  public:
    using Error::Error;
};

class NumericError : public Error {
  public:
    using Error::Error;
};

// Bad configuration or arguments; the CLI maps this to exit code 2.
class ConfigError : public Error {
  public:
    using Error::Error;
};

// Malformed or truncated input files; the CLI maps this to exit code 3.
class DataError : public Error {
  public:
    using Error::Error;
};

}  // namespace flexdit
