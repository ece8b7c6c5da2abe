// Minimal deterministic dense linear algebra, seeded random generation, and
// stable scalar kernels. Everything here is double precision with a fixed
// accumulation order (row-major, left-to-right): identical inputs and seeds
// produce bit-identical results across runs, which the exact-unlearning
// equality checks rely on.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

namespace apa {

using Vector = std::vector<double>;

/// Thrown when internal state is provably inconsistent (for example serving
/// from a stale cache row). Distinct from bad input so callers can map it to
/// a different exit code.
struct invariant_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Dense row-major matrix of doubles.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0)
        : rows(r), cols(c), data(r * c, fill) {}

    double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

    bool same_shape(const Matrix& other) const {
        return rows == other.rows && cols == other.cols;
    }
};

inline std::string shape_str(const Matrix& m) {
    return std::to_string(m.rows) + "x" + std::to_string(m.cols);
}

/// Bitwise comparison (exact-unlearning checks compare parameters this way,
/// not with a tolerance).
inline bool bitwise_equal(const Vector& a, const Vector& b) {
    if (a.size() != b.size()) return false;
    return std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

inline bool bitwise_equal(const Matrix& a, const Matrix& b) {
    return a.rows == b.rows && a.cols == b.cols && bitwise_equal(a.data, b.data);
}

// ---------------------------------------------------------------------------
// Seeded random generation.
//
// The generator is pinned so seeds are portable across builds and platforms:
//   state seeding   : splitmix64 applied four times to the user seed
//   stream          : xoshiro256** (Blackman/Vigna)
//   uniform [0,1)   : top 53 bits / 2^53
//   normal          : Box-Muller, two fresh uniforms per draw, cosine branch
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

/// Fixed mixing function for deriving independent child seeds (per-shard
/// training streams, init vs. shuffle streams, ...).
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
    std::uint64_t s = base + 0x9E3779B97F4A7C15ULL * (stream + 1);
    return splitmix64(s);
}

/// Deterministic PRNG; single-owner by contract, never shared across
/// concurrent tasks. Parallel work derives child seeds via derive_seed.
class SeededRng {
public:
    explicit SeededRng(std::uint64_t seed) {
        std::uint64_t sm = seed;
        for (auto& word : state_) word = splitmix64(sm);
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    /// Uniform in [0,1).
    double uniform01() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    /// Uniform integer in [0, bound).
    std::uint64_t next_below(std::uint64_t bound) {
        return next_u64() % bound;
    }

    /// N(0, stddev^2) via Box-Muller; consumes exactly two uniforms.
    double normal(double stddev) {
        // (u1 in (0,1]) keeps the log argument positive.
        const double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
        const double u2 = uniform01();
        const double radius = std::sqrt(-2.0 * std::log(u1));
        return stddev * radius * std::cos(2.0 * 3.141592653589793238462643383279502884 * u2);
    }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) {
        return (x << k) | (x >> (64 - k));
    }
    std::uint64_t state_[4];
};

// ---------------------------------------------------------------------------
// Kernels.
// ---------------------------------------------------------------------------

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows) {
        throw std::invalid_argument("matmul: dimension mismatch " + shape_str(a) +
                                    " * " + shape_str(b));
    }
    Matrix out(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        for (std::size_t k = 0; k < a.cols; ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            const double* brow = &b.data[k * b.cols];
            double* orow = &out.data[i * out.cols];
            for (std::size_t j = 0; j < b.cols; ++j) orow[j] += aik * brow[j];
        }
    }
    return out;
}

inline void matvec_into(const Matrix& m, const Vector& x, Vector& out) {
    if (m.cols != x.size()) {
        throw std::invalid_argument("matvec: dimension mismatch " + shape_str(m) +
                                    " * " + std::to_string(x.size()));
    }
    out.assign(m.rows, 0.0);
    for (std::size_t i = 0; i < m.rows; ++i) {
        const double* row = &m.data[i * m.cols];
        double acc = 0.0;
        for (std::size_t j = 0; j < m.cols; ++j) acc += row[j] * x[j];
        out[i] = acc;
    }
}

inline Vector matvec(const Matrix& m, const Vector& x) {
    Vector out;
    matvec_into(m, x, out);
    return out;
}

inline double dot(const Vector& u, const Vector& v) {
    if (u.size() != v.size()) {
        throw std::invalid_argument("dot: length mismatch " + std::to_string(u.size()) +
                                    " vs " + std::to_string(v.size()));
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) acc += u[i] * v[i];
    return acc;
}

inline double norm2(const Vector& v) { return std::sqrt(dot(v, v)); }

/// Cosine similarity in [-1, 1]; the partition distance is its negation.
inline double cosine_similarity(const Vector& u, const Vector& v) {
    if (u.size() != v.size()) {
        throw std::invalid_argument("cosine_similarity: length mismatch " +
                                    std::to_string(u.size()) + " vs " +
                                    std::to_string(v.size()));
    }
    const double nu = norm2(u);
    const double nv = norm2(v);
    if (nu == 0.0 || nv == 0.0) {
        throw std::invalid_argument("cosine_similarity: zero-norm vector has no direction");
    }
    return std::clamp(dot(u, v) / (nu * nv), -1.0, 1.0);
}

/// softmax(temperature * scores) with max-subtraction. temperature == 0
/// yields the exact uniform distribution.
inline Vector softmax_stable(const Vector& scores, double temperature) {
    if (scores.empty()) throw std::invalid_argument("softmax_stable: empty scores");
    if (!(temperature >= 0.0)) {
        throw std::invalid_argument("softmax_stable: temperature must be >= 0");
    }
    for (double s : scores) {
        if (!std::isfinite(s)) throw std::invalid_argument("softmax_stable: non-finite score");
    }
    Vector out(scores.size());
    double max_scaled = temperature * scores[0];
    for (double s : scores) max_scaled = std::max(max_scaled, temperature * s);
    double sum = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        out[i] = std::exp(temperature * scores[i] - max_scaled);
        sum += out[i];
    }
    for (double& w : out) w /= sum;
    return out;
}

inline std::size_t argmax(const Vector& v) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i) {
        if (v[i] > v[best]) best = i;
    }
    return best;
}

inline std::size_t argmin(const Vector& v) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i) {
        if (v[i] < v[best]) best = i;
    }
    return best;
}

/// i.i.d. N(0, stddev^2) entries, row-major fill order.
inline Matrix gaussian_matrix(std::size_t rows, std::size_t cols, double stddev,
                              SeededRng& rng) {
    if (!(stddev > 0.0)) throw std::invalid_argument("gaussian_matrix: stddev must be > 0");
    Matrix m(rows, cols);
    for (double& v : m.data) v = rng.normal(stddev);
    return m;
}

inline Vector gaussian_vector(std::size_t len, double stddev, SeededRng& rng) {
    if (!(stddev > 0.0)) throw std::invalid_argument("gaussian_vector: stddev must be > 0");
    Vector v(len);
    for (double& x : v) x = rng.normal(stddev);
    return v;
}

} // namespace apa
