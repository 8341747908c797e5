#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "wcmorph/errors.hpp"
#include "wcmorph/rng.hpp"

namespace wcm {

// Geometry of worst-case embeddings on the unit hypersphere. A morph
// embedding that sits on the geodesic midpoint of z1 and z2 minimizes the
// larger of the two angular dissimilarities; the closed form is the
// normalized sum. All dot products are clamped to [-1, 1] before arccos
// to absorb rounding.

class Embedding {
public:
    // Validates the unit-norm invariant (within 1e-9).
    static Embedding unit(std::vector<double> v) {
        const double n = norm_of(v);
        if (std::abs(n - 1.0) > 1e-9) {
            throw InvariantError("embedding is not unit-norm: ||v|| = " + std::to_string(n));
        }
        return Embedding(std::move(v));
    }

    // Projects an arbitrary vector onto the sphere.
    static Embedding normalized(std::vector<double> v) {
        const double n = norm_of(v);
        if (n <= 1e-12) {
            throw DegenerateInputError("cannot normalize a near-zero vector");
        }
        for (auto& x : v) x /= n;
        return Embedding(std::move(v));
    }

    std::size_t dim() const { return v_.size(); }
    const std::vector<double>& values() const { return v_; }
    double operator[](std::size_t i) const { return v_[i]; }

private:
    explicit Embedding(std::vector<double> v) : v_(std::move(v)) {}

    static double norm_of(const std::vector<double>& v) {
        double sq = 0.0;
        for (double x : v) sq += x * x;
        return std::sqrt(sq);
    }

    std::vector<double> v_;
};

enum class DissimilarityKind { angle, euclidean };

inline double dot(const Embedding& a, const Embedding& b) {
    if (a.dim() != b.dim()) throw DimensionError("embedding dimensions differ");
    double s = 0.0;
    for (std::size_t i = 0; i < a.dim(); ++i) s += a[i] * b[i];
    return s;
}

inline double clamped_acos(double c) { return std::acos(std::clamp(c, -1.0, 1.0)); }

// Angle between two unit embeddings, in [0, pi].
inline double angle(const Embedding& a, const Embedding& b) {
    return clamped_acos(dot(a, b));
}

inline double euclidean_distance(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw DimensionError("vector dimensions differ");
    double sq = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        sq += d * d;
    }
    return std::sqrt(sq);
}

// max[d(z, z1), d(z, z2)] — the quantity the worst-case embedding minimizes.
inline double eq1_objective(const Embedding& z, const Embedding& z1, const Embedding& z2,
                            DissimilarityKind kind) {
    if (kind == DissimilarityKind::angle) {
        return std::max(angle(z, z1), angle(z, z2));
    }
    return std::max(euclidean_distance(z.values(), z1.values()),
                    euclidean_distance(z.values(), z2.values()));
}

// Same objective on raw (not normalized) vectors; used by the euclidean
// flat-space oracle, where the minimizer is the plain midpoint.
inline double eq1_objective_raw(const std::vector<double>& z, const std::vector<double>& z1,
                                const std::vector<double>& z2, DissimilarityKind kind) {
    if (kind != DissimilarityKind::euclidean) {
        throw ArgumentError("eq1_objective_raw: only the euclidean kind applies to raw vectors");
    }
    return std::max(euclidean_distance(z, z1), euclidean_distance(z, z2));
}

// Closed form: z* = (z1 + z2) / ||z1 + z2||, the point on the sphere
// exactly between the two embeddings. Antipodal pairs have no unique
// midpoint and are rejected.
inline Embedding worst_case_embedding(const Embedding& z1, const Embedding& z2) {
    if (z1.dim() != z2.dim()) throw DimensionError("embedding dimensions differ");
    std::vector<double> sum(z1.dim());
    double sq = 0.0;
    for (std::size_t i = 0; i < sum.size(); ++i) {
        sum[i] = z1[i] + z2[i];
        sq += sum[i] * sum[i];
    }
    if (std::sqrt(sq) <= 1e-9) {
        throw DegenerateInputError(
            "worst_case_embedding: antipodal pair, midpoint is not unique");
    }
    return Embedding::normalized(std::move(sum));
}

// The objective value attained at z*: half the angle between z1 and z2.
inline double worst_case_score(const Embedding& z1, const Embedding& z2) {
    // Raises the same degenerate-pair error as worst_case_embedding.
    Embedding z_star = worst_case_embedding(z1, z2);
    (void)z_star;
    return 0.5 * angle(z1, z2);
}

struct BruteForceResult {
    Embedding z;
    double objective;
};

// Independent direct-search oracle for Eq. 1: sweeps the great-circle arc
// between z1 and z2 and adds uniform random sphere samples, returning the
// sampled minimizer of the objective.
inline BruteForceResult brute_force_worst_case(const Embedding& z1, const Embedding& z2,
                                               std::size_t n_samples, std::uint64_t seed) {
    if (n_samples < 1000) {
        throw ArgumentError("brute_force_worst_case: need at least 1000 samples");
    }
    const std::size_t dim = z1.dim();
    const double theta = angle(z1, z2);

    std::vector<double> best_v = z1.values();
    double best_obj = eq1_objective(z1, z1, z2, DissimilarityKind::angle);
    auto consider = [&](const std::vector<double>& v) {
        Embedding e = Embedding::normalized(v);
        const double obj = eq1_objective(e, z1, z2, DissimilarityKind::angle);
        if (obj < best_obj) {
            best_obj = obj;
            best_v = e.values();
        }
    };

    // Arc sweep (parameterized midpoint sweep along the geodesic).
    const std::size_t n_arc = std::max<std::size_t>(1000, n_samples / 25);
    const double sin_theta = std::sin(theta);
    for (std::size_t k = 0; k < n_arc; ++k) {
        const double t = static_cast<double>(k) / static_cast<double>(n_arc - 1);
        std::vector<double> v(dim);
        if (sin_theta < 1e-12) {
            v = z1.values();
        } else {
            const double a = std::sin((1.0 - t) * theta) / sin_theta;
            const double b = std::sin(t * theta) / sin_theta;
            for (std::size_t i = 0; i < dim; ++i) v[i] = a * z1[i] + b * z2[i];
        }
        consider(v);
    }

    // Uniform sphere samples for the remaining budget.
    Rng rng = make_rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const std::size_t n_random = n_samples > n_arc ? n_samples - n_arc : 0;
    for (std::size_t k = 0; k < n_random; ++k) {
        std::vector<double> v(dim);
        double sq = 0.0;
        do {
            sq = 0.0;
            for (auto& x : v) {
                x = gauss(rng);
                sq += x * x;
            }
        } while (sq < 1e-24);
        consider(v);
    }

    return BruteForceResult{Embedding::normalized(std::move(best_v)), best_obj};
}

} // namespace wcm
