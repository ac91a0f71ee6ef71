#pragma once

#include <cstdint>
#include <random>

#include <Eigen/Dense>

#include "dcc/normal.hpp"

namespace dcc {

/** Deterministic random source. All draws route through the mt19937_64 bit
 *  stream plus explicit conversions, so results are identical across
 *  platforms and standard-library implementations. */
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t bits() { return eng_(); }

    /** Uniform on the open interval (0,1). */
    double uniform() {
        return (static_cast<double>(eng_() >> 11) + 0.5) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /** Standard normal via inverse-CDF of a uniform draw. */
    double normal() { return norm_quantile(uniform()); }

    Eigen::VectorXd normal_vector(Eigen::Index n) {
        Eigen::VectorXd z(n);
        for (Eigen::Index i = 0; i < n; ++i) z(i) = normal();
        return z;
    }

    Eigen::VectorXd uniform_vector(Eigen::Index n) {
        Eigen::VectorXd u(n);
        for (Eigen::Index i = 0; i < n; ++i) u(i) = uniform();
        return u;
    }

  private:
    std::mt19937_64 eng_;
};

}  // namespace dcc
