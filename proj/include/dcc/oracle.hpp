#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>

#include <Eigen/Dense>

#include "dcc/normal.hpp"
#include "dcc/rng.hpp"
#include "dcc/solver.hpp"

namespace dcc {

/** Closed-form fixture: a two-stage toy program with decisions y1 and
 *  y2(xi1) = a xi1, noise uniform on the L-shaped support
 *  ([-1,1] x [0,1]) u ([0,1] x [-1,0]) (area 3), objective min y1, band
 *  0 <= y <= 1 almost surely, and joint level
 *  P(xi1 <= y1, xi2 <= y2(xi1)) >= 1/3. All five optimal values of the
 *  approximation family are known exactly, which makes the fixture an
 *  end-to-end oracle: the probability functions below are hand-integrated
 *  areas, so they are independent of every numeric kernel in the library. */

/** P(xi1 <= y1, xi2 <= a xi1, 0 <= a xi1 <= 1) for the L-shaped uniform law;
 *  the band on y2 sits inside the event. Piecewise areas in (y1, a), valid
 *  for y1 in [0,1], a >= -1. */
inline double psi(double y1, double a) {
    if (a < 0.0) return -a / 6.0;
    if (a <= 1.0 || y1 <= 1.0 / a) return (y1 + a * y1 * y1 / 2.0) / 3.0;
    return 1.0 / (2.0 * a);
}

/** Same event with y2 replaced by its clip onto [0,1]: the band holds by
 *  construction, only xi1 <= y1 and xi2 <= clip(a xi1) stay random. */
inline double psi_tilde(double y1, double a) {
    if (a < 0.0) return (y1 - a / 2.0) / 3.0;
    if (a <= 1.0 || y1 <= 1.0 / a) return (y1 + a * y1 * y1 / 2.0) / 3.0;
    return (2.0 * y1 - 1.0 / (2.0 * a)) / 3.0;
}

/** Uniform draw on the L-shaped support: area-weighted two-rectangle
 *  mixture, rejection-free. */
inline Eigen::Vector2d lshape_sample(Rng& rng) {
    if (rng.uniform() < 2.0 / 3.0) {
        const double u = rng.uniform(-1.0, 1.0);
        const double v = rng.uniform(0.0, 1.0);
        return Eigen::Vector2d(u, v);
    }
    const double u = rng.uniform(0.0, 1.0);
    const double v = rng.uniform(-1.0, 0.0);
    return Eigen::Vector2d(u, v);
}

struct SaaEstimate {
    double value = 0.0;
    double stddev = 0.0;  // binomial standard deviation of the mean
};

/** Mean of an indicator over n seeded draws, with its binomial standard
 *  deviation. The sampler maps an Rng to one draw. */
template <class Event, class Sampler>
inline SaaEstimate saa_probability(Event&& event, Sampler&& sampler, int n, std::uint64_t seed) {
    if (n < 1) throw std::invalid_argument("saa: need at least one sample");
    Rng rng(seed);
    long hits = 0;
    for (int i = 0; i < n; ++i)
        if (event(sampler(rng))) ++hits;
    SaaEstimate out;
    out.value = static_cast<double>(hits) / n;
    out.stddev = std::sqrt(out.value * (1.0 - out.value) / n);
    return out;
}

/** Smallest feasible y1 of the toy program when the gain is restricted to
 *  a = 0 (the only gain whose raw rule satisfies the band almost surely,
 *  because xi1 ranges over [-1,1]): bisects the monotone level map. */
inline double toy_static_minimum(double p = 1.0 / 3.0) {
    if (psi(1.0, 0.0) < p) return kInf;  // level unattainable by static rules
    double lo = 0.0, hi = 1.0;
    for (int it = 0; it < 60; ++it) {
        const double mid = 0.5 * (lo + hi);
        (psi(mid, 0.0) >= p ? hi : lo) = mid;
    }
    return hi;
}

/** Grid-minimizes y1 over (y1, a) in [0,1] x [-1, a_max] subject to
 *  level(y1, a) >= p, infeasibility encoded as +inf. */
inline GridResult toy_grid_minimum(const std::function<double(double, double)>& level, double p,
                                   double a_max = 3.0, int points = 101) {
    auto f = [&level, p](const VectorXd& z) { return level(z(0), z(1)) >= p ? z(0) : kInf; };
    Eigen::Vector2d lo(0.0, -1.0), hi(1.0, a_max);
    return grid_search(f, lo, hi, points, 2);
}

struct Example1Values {
    double phi = 0.0;   // original problem over arbitrary policies
    double phi1 = 0.0;  // rules intersected with the almost-sure band
    double phi2 = 0.0;  // band folded into the chance event, winner projected
    double phi3 = 0.0;  // band folded into the chance event, all projected
    double phi4 = 0.0;  // projected (clipped) rules against the band
};

/** Reference optimal values (0, 1, 2/3, 2/3, 1/2) of the toy program.
 *  phi is analytic: y1 = 0 with the constant policy y2 = 1 is feasible.
 *  phi1 comes from the forced static rule; phi3 and phi4 from grid
 *  minimization over psi and psi_tilde. phi2 equals phi3: the chance-folded
 *  problem has a unique minimizer whose first stage survives projection
 *  unchanged, so projecting the winner reproduces the projected optimum. */
inline Example1Values example1_values() {
    Example1Values v;
    v.phi = 0.0;
    v.phi1 = toy_static_minimum();
    v.phi3 = toy_grid_minimum(psi, 1.0 / 3.0).value;
    v.phi2 = v.phi3;
    v.phi4 = toy_grid_minimum(psi_tilde, 1.0 / 3.0).value;
    return v;
}

}  // namespace dcc
