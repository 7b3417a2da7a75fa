#pragma once

// Overlap, surface-distance, folding, and tumour-plausibility metrics.
//
// Surfaces are the 6-connected boundary voxels of a mask (a voxel on the grid
// face counts as boundary); distances run between voxel centres.

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "atlasreg/edt.hpp"
#include "atlasreg/field.hpp"
#include "atlasreg/volume.hpp"

namespace atlasreg {

struct DiceResult {
    double value = 0.0;
    bool both_empty = false;
};

namespace detail {

inline void require_same_shape(const Mask& a, const Mask& b, const char* what)
{
    if (!(a.shape() == b.shape()))
        throw GeometryError(std::string(what) + ": mask grids differ (" + to_string(a.shape()) + " vs " +
                            to_string(b.shape()) + ")");
}

} // namespace detail

inline DiceResult dsc(const Mask& a, const Mask& b)
{
    detail::require_same_shape(a, b, "dsc");
    std::int64_t na = 0, nb = 0, both = 0;
    for (std::int64_t i = 0; i < a.size(); ++i) {
        na += a[i] != 0;
        nb += b[i] != 0;
        both += a[i] && b[i];
    }
    if (na + nb == 0)
        return {1.0, true};
    return {2.0 * double(both) / double(na + nb), false};
}

inline Mask boundary(const Mask& m)
{
    const Shape3& s = m.shape();
    Mask out(s, 0);
    static constexpr int off[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
    for (std::int64_t k = 0; k < s.nz; ++k)
        for (std::int64_t j = 0; j < s.ny; ++j)
            for (std::int64_t i = 0; i < s.nx; ++i) {
                if (!m(i, j, k))
                    continue;
                for (const auto& o : off) {
                    const std::int64_t x = i + o[0], y = j + o[1], z = k + o[2];
                    if (!s.contains(x, y, z) || !m(x, y, z)) {
                        out(i, j, k) = 1;
                        break;
                    }
                }
            }
    return out;
}

struct SurfaceDistances {
    double hd = 0.0;
    double assd = 0.0;
};

/// Hausdorff and average symmetric surface distance (mm).
inline SurfaceDistances surface_distances(const Mask& a, const Mask& b, const Vec3& spacing)
{
    detail::require_same_shape(a, b, "surface_distances");
    const Mask ba = boundary(a), bb = boundary(b);
    const std::int64_t na = count(ba), nb = count(bb);
    if (na == 0 || nb == 0)
        throw std::invalid_argument("surface distances need two nonempty masks");
    const auto da = edt(ba, spacing), db = edt(bb, spacing);
    double sum = 0.0, hd = 0.0;
    for (std::int64_t i = 0; i < a.size(); ++i) {
        if (ba[i]) {
            sum += db[i];
            hd = std::max(hd, db[i]);
        }
        if (bb[i]) {
            sum += da[i];
            hd = std::max(hd, da[i]);
        }
    }
    return {hd, sum / double(na + nb)};
}

inline double hd(const Mask& a, const Mask& b, const Vec3& spacing) { return surface_distances(a, b, spacing).hd; }
inline double assd(const Mask& a, const Mask& b, const Vec3& spacing) { return surface_distances(a, b, spacing).assd; }

/// Volume of the tumour after warping onto `atlas_grid` through
/// `atlas_to_subject` (nearest neighbour), over its original volume.
inline double tumour_volume_factor(const LabelMap& tumour, const SamplingGrid& atlas_grid,
                                   const TransformChain& atlas_to_subject)
{
    const std::int64_t before = count(tumour.foreground());
    if (before == 0)
        throw std::invalid_argument("tumour_volume_factor: empty tumour mask");
    const auto warped = sample(tumour, atlas_grid, atlas_to_subject);
    std::int64_t after = 0;
    for (auto v : warped)
        after += v != 0;
    return double(after) * atlas_grid.voxel_volume() / (double(before) * tumour.grid().voxel_volume());
}

/// Ring of voxels within `ring_mm` of the tumour (exclusive of it), inside `brain`.
inline Mask peritumoral_ring(const Mask& tumour, const Mask& brain, const Vec3& spacing, double ring_mm)
{
    detail::require_same_shape(tumour, brain, "peritumoral_ring");
    const auto d = edt(tumour, spacing);
    Mask ring(tumour.shape(), 0);
    for (std::int64_t i = 0; i < ring.size(); ++i)
        ring[i] = !tumour[i] && brain[i] && d[i] <= ring_mm;
    return ring;
}

/// Mean Jacobian determinant of `u` inside the tumour over its mean in the
/// peritumoral ring. All inputs share u's grid.
inline double jacobian_ratio(const Mask& tumour, const Mask& brain, const DisplacementField& u, double ring_mm = 10.0)
{
    if (!(tumour.shape() == u.shape()))
        throw GeometryError("jacobian_ratio: tumour mask and field grids differ");
    if (count(tumour) == 0)
        throw std::invalid_argument("jacobian_ratio: empty tumour mask");
    const Mask ring = peritumoral_ring(tumour, brain, u.grid().spacing(), ring_mm);
    if (count(ring) == 0)
        throw std::invalid_argument("jacobian_ratio: empty peritumoral ring");
    const auto det = jacobian_determinant(u);
    double in = 0, out = 0;
    std::int64_t nin = 0, nout = 0;
    for (std::int64_t i = 0; i < det.size(); ++i) {
        if (tumour[i]) {
            in += std::abs(det[i]);
            ++nin;
        } else if (ring[i]) {
            out += std::abs(det[i]);
            ++nout;
        }
    }
    return (in / double(nin)) / (out / double(nout));
}

struct CaseMetrics {
    std::map<std::int32_t, double> dsc_per_label;
    std::map<std::int32_t, double> hd_per_label;
    std::map<std::int32_t, double> assd_per_label;
    std::vector<std::int32_t> degenerate_labels; // empty in both volumes
    double fof = 0.0;
    std::optional<double> tumour_volume_factor;
    std::optional<double> jacobian_ratio;

    double mean_dsc() const
    {
        if (dsc_per_label.empty())
            return 0.0;
        double s = 0;
        for (const auto& [l, v] : dsc_per_label)
            s += v;
        return s / double(dsc_per_label.size());
    }
};

/// Label-wise overlap and surface distances between a warped subject
/// segmentation and the atlas on the atlas grid (background excluded).
inline CaseMetrics label_metrics(const LabelMap& atlas, const Array3<std::int32_t>& warped)
{
    if (!(atlas.data().shape() == warped.shape()))
        throw GeometryError("label_metrics: warped labels are not on the atlas grid");
    CaseMetrics m;
    for (auto l : atlas.present_labels()) {
        if (l == 0)
            continue;
        Mask a(warped.shape()), b = atlas.mask_of(l);
        for (std::int64_t i = 0; i < a.size(); ++i)
            a[i] = warped[i] == l;
        const auto d = dsc(a, b);
        m.dsc_per_label[l] = d.value;
        if (d.both_empty) {
            m.degenerate_labels.push_back(l);
            continue;
        }
        if (count(a) > 0) {
            const auto s = surface_distances(a, b, atlas.grid().spacing());
            m.hd_per_label[l] = s.hd;
            m.assd_per_label[l] = s.assd;
        }
    }
    return m;
}

inline nlohmann::json to_json(const CaseMetrics& m)
{
    auto per = [](const std::map<std::int32_t, double>& x) {
        nlohmann::json j = nlohmann::json::object();
        for (const auto& [l, v] : x)
            j[std::to_string(l)] = v;
        return j;
    };
    auto mean = [](const std::map<std::int32_t, double>& x) {
        double s = 0;
        for (const auto& [l, v] : x)
            s += v;
        return x.empty() ? 0.0 : s / double(x.size());
    };
    nlohmann::json j = {{"dsc_per_label", per(m.dsc_per_label)},
                        {"hd_per_label", per(m.hd_per_label)},
                        {"assd_per_label", per(m.assd_per_label)},
                        {"mean_dsc", m.mean_dsc()},
                        {"mean_hd", mean(m.hd_per_label)},
                        {"mean_assd", mean(m.assd_per_label)},
                        {"degenerate_labels", m.degenerate_labels},
                        {"fof", m.fof}};
    j["tumour_volume_factor"] = m.tumour_volume_factor ? nlohmann::json(*m.tumour_volume_factor) : nlohmann::json();
    j["jacobian_ratio"] = m.jacobian_ratio ? nlohmann::json(*m.jacobian_ratio) : nlohmann::json();
    return j;
}

} // namespace atlasreg
