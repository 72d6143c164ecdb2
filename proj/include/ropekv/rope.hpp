#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ropekv/error.hpp"

namespace ropekv {

struct RopeParams {
    std::size_t head_dim = 0;
    double base = 10000.0;

    std::size_t chunk_count() const noexcept { return head_dim / 2; }

    void validate() const {
        if (head_dim < 2 || head_dim % 2 != 0)
            throw ShapeError("rope head_dim must be even and >= 2, got " + std::to_string(head_dim));
        if (!(base > 1.0) || !std::isfinite(base)) throw InputError("rope base must be > 1");
    }
};

// Strictly increasing set of 2D chunk indices; chunk i covers dims [2i, 2i+1].
class ChunkSet {
public:
    ChunkSet() = default;

    explicit ChunkSet(std::vector<std::size_t> indices) : indices_(std::move(indices)) {
        for (std::size_t k = 1; k < indices_.size(); ++k) {
            if (indices_[k] <= indices_[k - 1]) throw SelectionError("chunk indices must be strictly increasing");
        }
    }

    static ChunkSet all(std::size_t chunk_count) {
        std::vector<std::size_t> v(chunk_count);
        for (std::size_t i = 0; i < chunk_count; ++i) v[i] = i;
        return ChunkSet(std::move(v));
    }

    std::span<const std::size_t> indices() const noexcept { return indices_; }
    std::size_t size() const noexcept { return indices_.size(); }
    bool empty() const noexcept { return indices_.empty(); }

    bool contains(std::size_t i) const {
        for (std::size_t x : indices_) {
            if (x == i) return true;
            if (x > i) return false;
        }
        return false;
    }

    bool fits(std::size_t chunk_count) const { return indices_.empty() || indices_.back() < chunk_count; }

    ChunkSet with(std::size_t i) const {
        std::vector<std::size_t> v;
        v.reserve(indices_.size() + 1);
        bool placed = false;
        for (std::size_t x : indices_) {
            if (!placed && i < x) { v.push_back(i); placed = true; }
            v.push_back(x);
        }
        if (!placed) v.push_back(i);
        return ChunkSet(std::move(v));
    }

    // Indices in [0, chunk_count) not in the set, ascending.
    std::vector<std::size_t> complement(std::size_t chunk_count) const {
        std::vector<std::size_t> out;
        std::size_t k = 0;
        for (std::size_t i = 0; i < chunk_count; ++i) {
            if (k < indices_.size() && indices_[k] == i) { ++k; continue; }
            out.push_back(i);
        }
        return out;
    }

    std::vector<bool> mask(std::size_t chunk_count) const {
        std::vector<bool> m(chunk_count, false);
        for (std::size_t x : indices_) m.at(x) = true;
        return m;
    }

    friend bool operator==(const ChunkSet&, const ChunkSet&) = default;
    friend auto operator<=>(const ChunkSet&, const ChunkSet&) = default;

private:
    std::vector<std::size_t> indices_;
};

// θ_i = base^(-2i/d_h).
inline std::vector<double> frequencies(const RopeParams& p) {
    p.validate();
    std::vector<double> theta(p.chunk_count());
    for (std::size_t i = 0; i < theta.size(); ++i)
        theta[i] = std::pow(p.base, -2.0 * static_cast<double>(i) / static_cast<double>(p.head_dim));
    return theta;
}

namespace detail {

inline void check_chunks(const ChunkSet& chunks, const RopeParams& p) {
    if (!chunks.fits(p.chunk_count()))
        throw SelectionError("chunk index out of range for head_dim " + std::to_string(p.head_dim));
}

// Rotates chunk pairs of vec in place given precomputed frequencies.
inline void rotate_inplace(std::span<double> vec, std::int64_t position, const ChunkSet& chunks,
                           std::span<const double> theta) {
    for (std::size_t i : chunks.indices()) {
        const double angle = static_cast<double>(position) * theta[i];
        const double c = std::cos(angle);
        const double s = std::sin(angle);
        const double x = vec[2 * i];
        const double y = vec[2 * i + 1];
        vec[2 * i] = x * c - y * s;
        vec[2 * i + 1] = x * s + y * c;
    }
}

} // namespace detail

inline std::vector<double> rotate(std::span<const double> vec, std::int64_t position, const ChunkSet& chunks,
                                  const RopeParams& p) {
    p.validate();
    if (vec.size() != p.head_dim)
        throw ShapeError("rotate: vector length " + std::to_string(vec.size()) + " != head_dim " +
                         std::to_string(p.head_dim));
    detail::check_chunks(chunks, p);
    std::vector<double> out(vec.begin(), vec.end());
    const auto theta = frequencies(p);
    detail::rotate_inplace(out, position, chunks, theta);
    return out;
}

// Relative-position score: rotated chunks use R((m-n)θ_i), the rest contribute a plain dot product.
inline double relative_score(std::span<const double> q, std::span<const double> k, std::int64_t m,
                             std::int64_t n, const ChunkSet& chunks, const RopeParams& p) {
    p.validate();
    if (q.size() != p.head_dim || k.size() != p.head_dim)
        throw ShapeError("relative_score: vectors must have length head_dim");
    detail::check_chunks(chunks, p);
    const auto theta = frequencies(p);
    const auto rotated = chunks.mask(p.chunk_count());
    double s = 0.0;
    for (std::size_t i = 0; i < p.chunk_count(); ++i) {
        const double q0 = q[2 * i], q1 = q[2 * i + 1];
        const double k0 = k[2 * i], k1 = k[2 * i + 1];
        if (rotated[i]) {
            // q R(φ) kᵀ with R(φ) = [[cos, sin], [-sin, cos]] acting on row vectors.
            const double phi = static_cast<double>(m - n) * theta[i];
            const double c = std::cos(phi), sn = std::sin(phi);
            s += (q0 * c - q1 * sn) * k0 + (q0 * sn + q1 * c) * k1;
        } else {
            s += q0 * k0 + q1 * k1;
        }
    }
    return s;
}

} // namespace ropekv
