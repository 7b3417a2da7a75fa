#pragma once

// Trilinear stencils with analytic weight derivatives. Every resampling and
// field lookup in the library goes through these so that forward values,
// adjoint scatters, and spatial derivatives agree exactly.

#include <algorithm>
#include <cmath>

#include "atlasreg/grid.hpp"

namespace atlasreg {

struct TrilinearStencil {
    std::int64_t idx[8];
    double w[8];
    double dw[8][3]; // d w / d(continuous index)
};

namespace detail {

// Integers within this distance snap exactly, so identity resampling through
// a world round trip reproduces stored values bitwise.
inline constexpr double kSnap = 1e-9;

inline double snap(double c)
{
    const double r = std::round(c);
    return std::abs(c - r) < kSnap ? r : c;
}

struct Axis {
    std::int64_t lo, hi;
    double frac;
    bool moving; // false when clamped: no positional derivative
};

inline Axis clamp_axis(double c, std::int64_t n)
{
    c = snap(c);
    if (n == 1)
        return {0, 0, 0.0, false};
    if (c <= 0.0)
        return {0, 1, 0.0, c == 0.0};
    if (c >= double(n - 1))
        return {n - 2, n - 1, 1.0, c == double(n - 1)};
    const auto lo = std::int64_t(std::floor(c));
    if (lo >= n - 1)
        return {n - 2, n - 1, 1.0, true};
    return {lo, lo + 1, c - double(lo), true};
}

} // namespace detail

/// Clamp-to-edge trilinear stencil at continuous voxel coordinate `c`.
inline TrilinearStencil trilinear_stencil(const Shape3& shape, const Vec3& c)
{
    const detail::Axis ax[3] = {detail::clamp_axis(c.x(), shape.nx), detail::clamp_axis(c.y(), shape.ny),
                                detail::clamp_axis(c.z(), shape.nz)};
    TrilinearStencil s{};
    int n = 0;
    for (int dz = 0; dz < 2; ++dz) {
        for (int dy = 0; dy < 2; ++dy) {
            for (int dx = 0; dx < 2; ++dx, ++n) {
                const int d[3] = {dx, dy, dz};
                double f[3], df[3];
                std::int64_t id[3];
                for (int a = 0; a < 3; ++a) {
                    id[a] = d[a] ? ax[a].hi : ax[a].lo;
                    f[a] = d[a] ? ax[a].frac : 1.0 - ax[a].frac;
                    df[a] = ax[a].moving ? (d[a] ? 1.0 : -1.0) : 0.0;
                }
                s.idx[n] = shape.index(id[0], id[1], id[2]);
                s.w[n] = f[0] * f[1] * f[2];
                s.dw[n][0] = df[0] * f[1] * f[2];
                s.dw[n][1] = f[0] * df[1] * f[2];
                s.dw[n][2] = f[0] * f[1] * df[2];
            }
        }
    }
    return s;
}

/// True when `c` lies within half a voxel of the grid's sample centres.
inline bool inside_field(const Shape3& shape, const Vec3& c)
{
    for (int a = 0; a < 3; ++a) {
        const double v = detail::snap(c[a]);
        if (v < -0.5 || v > double(shape[a]) - 0.5)
            return false;
    }
    return true;
}

template <class T>
double trilinear(const Array3<T>& a, const Vec3& c)
{
    const auto s = trilinear_stencil(a.shape(), c);
    double v = 0.0;
    for (int n = 0; n < 8; ++n)
        if (s.w[n] != 0.0)
            v += s.w[n] * double(a[s.idx[n]]);
    return v;
}

/// Value and gradient with respect to the continuous voxel coordinate.
template <class T>
double trilinear_with_gradient(const Array3<T>& a, const Vec3& c, Vec3& grad)
{
    const auto s = trilinear_stencil(a.shape(), c);
    double v = 0.0;
    grad.setZero();
    for (int n = 0; n < 8; ++n) {
        const double x = double(a[s.idx[n]]);
        v += s.w[n] * x;
        grad += x * Vec3(s.dw[n][0], s.dw[n][1], s.dw[n][2]);
    }
    return v;
}

/// Nearest voxel; returns false when `c` falls outside the grid.
inline bool nearest_index(const Shape3& shape, const Vec3& c, std::int64_t& idx)
{
    std::int64_t id[3];
    for (int a = 0; a < 3; ++a) {
        const double r = std::round(detail::snap(c[a]));
        if (r < 0.0 || r > double(shape[a] - 1))
            return false;
        id[a] = std::int64_t(r);
    }
    idx = shape.index(id[0], id[1], id[2]);
    return true;
}

} // namespace atlasreg
