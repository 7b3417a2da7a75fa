#pragma once

// Exact anisotropic Euclidean distance transform (Felzenszwalb & Huttenlocher
// lower-envelope algorithm, one separable pass per axis).

#include <cmath>
#include <limits>
#include <vector>

#include "atlasreg/grid.hpp"

namespace atlasreg {

namespace detail {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

// In-place 1-D squared distance transform of f (length n, sample spacing h).
inline void edt_1d(double* f, std::int64_t n, std::int64_t stride, double h, std::vector<double>& work,
                   std::vector<std::int64_t>& v, std::vector<double>& z)
{
    work.resize(std::size_t(n));
    v.resize(std::size_t(n));
    z.resize(std::size_t(n) + 1);
    for (std::int64_t i = 0; i < n; ++i)
        work[std::size_t(i)] = f[i * stride];

    const double h2 = h * h;
    std::int64_t k = -1;
    for (std::int64_t q = 0; q < n; ++q) {
        const double fq = work[std::size_t(q)];
        if (fq == kInf)
            continue;
        if (k < 0) {
            k = 0;
            v[0] = q;
            z[0] = -kInf;
            z[1] = kInf;
            continue;
        }
        double s;
        for (;;) {
            const std::int64_t p = v[std::size_t(k)];
            s = ((fq + h2 * double(q) * double(q)) - (work[std::size_t(p)] + h2 * double(p) * double(p))) /
                (2.0 * h2 * double(q - p));
            if (s <= z[std::size_t(k)] && k > 0)
                --k;
            else
                break;
        }
        if (s <= z[std::size_t(k)]) {
            // k == 0 and the new parabola dominates everywhere.
            v[0] = q;
            z[0] = -kInf;
            z[1] = kInf;
            continue;
        }
        ++k;
        v[std::size_t(k)] = q;
        z[std::size_t(k)] = s;
        z[std::size_t(k) + 1] = kInf;
    }
    if (k < 0)
        return; // no finite samples on this line
    std::int64_t j = 0;
    for (std::int64_t q = 0; q < n; ++q) {
        while (z[std::size_t(j) + 1] < double(q))
            ++j;
        const std::int64_t p = v[std::size_t(j)];
        const double d = double(q - p);
        f[q * stride] = h2 * d * d + work[std::size_t(p)];
    }
}

} // namespace detail

/// Squared distance (mm²) from every voxel centre to the nearest voxel with
/// features[i] != 0. Infinity everywhere when there are no features.
inline Array3<double> squared_edt(const Mask& features, const Vec3& spacing)
{
    const Shape3& s = features.shape();
    Array3<double> d(s);
    for (std::int64_t i = 0; i < d.size(); ++i)
        d[i] = features[i] ? 0.0 : detail::kInf;

    std::vector<double> work, z;
    std::vector<std::int64_t> v;
    for (std::int64_t k = 0; k < s.nz; ++k)
        for (std::int64_t j = 0; j < s.ny; ++j)
            detail::edt_1d(d.data() + s.index(0, j, k), s.nx, 1, spacing.x(), work, v, z);
    for (std::int64_t k = 0; k < s.nz; ++k)
        for (std::int64_t i = 0; i < s.nx; ++i)
            detail::edt_1d(d.data() + s.index(i, 0, k), s.ny, s.nx, spacing.y(), work, v, z);
    for (std::int64_t j = 0; j < s.ny; ++j)
        for (std::int64_t i = 0; i < s.nx; ++i)
            detail::edt_1d(d.data() + s.index(i, j, 0), s.nz, s.nx * s.ny, spacing.z(), work, v, z);
    return d;
}

inline Array3<double> edt(const Mask& features, const Vec3& spacing)
{
    auto d = squared_edt(features, spacing);
    for (auto& x : d)
        x = std::sqrt(x);
    return d;
}

} // namespace atlasreg
