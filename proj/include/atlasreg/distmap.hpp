#pragma once

// Multi-label distance representation used by every similarity term, plus
// interface (junction) extraction between label groups.

#include <algorithm>
#include <climits>
#include <cmath>
#include <map>
#include <set>
#include <stdexcept>
#include <vector>

#include "atlasreg/edt.hpp"
#include "atlasreg/volume.hpp"

namespace atlasreg {

/// Per voxel: inside distance to the boundary of its own label (mm) plus
/// gamma * label id.
struct DistanceMap {
    Array3<double> data;
    SamplingGrid grid;
    double gamma = 1.0;
    std::vector<std::int32_t> labels;
};

/// Inside distance to the nearest voxel of a different label, measured from
/// voxel centre to voxel centre, minus half a voxel (half the smallest
/// spacing). Space beyond the grid faces counts as outside every label.
inline Array3<double> inside_distance(const LabelMap& labels)
{
    const auto& d = labels.data();
    const Shape3& s = d.shape();
    const Vec3 sp = labels.grid().spacing();
    const double half = 0.5 * sp.minCoeff();
    Array3<double> out(s, 0.0);

    struct Box {
        std::int64_t lo[3] = {INT64_MAX, INT64_MAX, INT64_MAX};
        std::int64_t hi[3] = {-1, -1, -1};
    };
    std::map<std::int32_t, Box> boxes;
    for (std::int64_t k = 0; k < s.nz; ++k)
        for (std::int64_t j = 0; j < s.ny; ++j)
            for (std::int64_t i = 0; i < s.nx; ++i) {
                auto& b = boxes[d(i, j, k)];
                const std::int64_t c[3] = {i, j, k};
                for (int a = 0; a < 3; ++a) {
                    b.lo[a] = std::min(b.lo[a], c[a]);
                    b.hi[a] = std::max(b.hi[a], c[a]);
                }
            }

    for (const auto& [label, b] : boxes) {
        // One voxel of margin on every side; margin voxels are never the label,
        // which also realises the outside-the-grid convention.
        const Shape3 bs{b.hi[0] - b.lo[0] + 3, b.hi[1] - b.lo[1] + 3, b.hi[2] - b.lo[2] + 3};
        Mask outside(bs, 1);
        for (std::int64_t k = 1; k < bs.nz - 1; ++k)
            for (std::int64_t j = 1; j < bs.ny - 1; ++j)
                for (std::int64_t i = 1; i < bs.nx - 1; ++i)
                    outside(i, j, k) = d(b.lo[0] + i - 1, b.lo[1] + j - 1, b.lo[2] + k - 1) != label;
        const auto sq = squared_edt(outside, sp);
        for (std::int64_t k = 1; k < bs.nz - 1; ++k)
            for (std::int64_t j = 1; j < bs.ny - 1; ++j)
                for (std::int64_t i = 1; i < bs.nx - 1; ++i)
                    if (!outside(i, j, k))
                        out(b.lo[0] + i - 1, b.lo[1] + j - 1, b.lo[2] + k - 1) = std::sqrt(sq(i, j, k)) - half;
    }
    return out;
}

inline DistanceMap distance_map(const LabelMap& labels, double gamma)
{
    if (!(gamma > 0.0) || !std::isfinite(gamma))
        throw std::invalid_argument("distance_map: gamma must be positive");
    DistanceMap dm{inside_distance(labels), labels.grid(), gamma, labels.present_labels()};
    const auto& l = labels.data();
    for (std::int64_t i = 0; i < dm.data.size(); ++i)
        dm.data[i] += gamma * double(l[i]);
    return dm;
}

/// Voxels of `group_a` with a 6-connected neighbour in `group_b`.
inline Mask junction_surface(const LabelMap& labels, const std::set<std::int32_t>& group_a,
                             const std::set<std::int32_t>& group_b)
{
    if (group_a.empty() || group_b.empty())
        throw std::invalid_argument("junction_surface: label groups must be nonempty");
    for (auto id : group_a)
        if (group_b.count(id))
            throw std::invalid_argument("junction_surface: label groups overlap at " + std::to_string(id));
    const auto& d = labels.data();
    const Shape3& s = d.shape();
    Mask out(s, 0);
    static constexpr int off[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
    for (std::int64_t k = 0; k < s.nz; ++k)
        for (std::int64_t j = 0; j < s.ny; ++j)
            for (std::int64_t i = 0; i < s.nx; ++i) {
                if (!group_a.count(d(i, j, k)))
                    continue;
                for (const auto& o : off) {
                    const std::int64_t a = i + o[0], b = j + o[1], c = k + o[2];
                    if (s.contains(a, b, c) && group_b.count(d(a, b, c))) {
                        out(i, j, k) = 1;
                        break;
                    }
                }
            }
    return out;
}

} // namespace atlasreg
