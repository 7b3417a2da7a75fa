#pragma once

// Images, label maps, affine transforms, and the lazy sampling wrapper.
//
// Stored voxel data is never resampled in place. Every spatial transform is
// expressed as a chain of point maps from target-grid world points into the
// source's world space, and the source is interpolated exactly once.

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Eigenvalues>

#include "atlasreg/field.hpp"
#include "atlasreg/grid.hpp"
#include "atlasreg/interp.hpp"

namespace atlasreg {

class ImageVolume {
public:
    ImageVolume() = default;
    ImageVolume(Array3<float> data, SamplingGrid grid, std::string id = {})
        : data_(std::make_shared<const Array3<float>>(std::move(data))), grid_(std::move(grid)), id_(std::move(id))
    {
        if (!(data_->shape() == grid_.shape()))
            throw GeometryError("image data shape " + to_string(data_->shape()) + " does not match grid " +
                                to_string(grid_.shape()));
    }

    const Array3<float>& data() const { return *data_; }
    const SamplingGrid& grid() const { return grid_; }
    const std::string& id() const { return id_; }

private:
    std::shared_ptr<const Array3<float>> data_ = std::make_shared<const Array3<float>>();
    SamplingGrid grid_;
    std::string id_;
};

using LabelNames = std::map<std::int32_t, std::string>;

class LabelMap {
public:
    LabelMap() = default;

    /// Missing names are filled in as "label_<id>"; 0 is "Background".
    LabelMap(Array3<std::int32_t> data, SamplingGrid grid, LabelNames names = {})
        : data_(std::make_shared<const Array3<std::int32_t>>(std::move(data))), grid_(std::move(grid)),
          names_(std::move(names))
    {
        if (!(data_->shape() == grid_.shape()))
            throw GeometryError("label data shape " + to_string(data_->shape()) + " does not match grid " +
                                to_string(grid_.shape()));
        if (!names_.count(0))
            names_[0] = "Background";
        for (auto id : present_labels())
            if (!names_.count(id))
                names_[id] = "label_" + std::to_string(id);
    }

    const Array3<std::int32_t>& data() const { return *data_; }
    const SamplingGrid& grid() const { return grid_; }
    const LabelNames& names() const { return names_; }

    std::vector<std::int32_t> present_labels() const
    {
        std::set<std::int32_t> s(data_->begin(), data_->end());
        return {s.begin(), s.end()};
    }

    Mask mask_of(std::int32_t label) const
    {
        Mask m(data_->shape());
        for (std::int64_t i = 0; i < m.size(); ++i)
            m[i] = (*data_)[i] == label;
        return m;
    }

    Mask foreground() const
    {
        Mask m(data_->shape());
        for (std::int64_t i = 0; i < m.size(); ++i)
            m[i] = (*data_)[i] != 0;
        return m;
    }

private:
    std::shared_ptr<const Array3<std::int32_t>> data_ = std::make_shared<const Array3<std::int32_t>>();
    SamplingGrid grid_;
    LabelNames names_;
};

/// World-space (mm) affine map from subject space into atlas space.
class AffineTransform {
public:
    AffineTransform() : m_(Mat4::Identity()) {}
    explicit AffineTransform(const Mat4& m) : m_(m)
    {
        if (!m_.allFinite())
            throw GeometryError("affine matrix is not finite");
        if ((m_.row(3) - Eigen::RowVector4d(0, 0, 0, 1)).cwiseAbs().maxCoeff() > 1e-9)
            throw GeometryError("affine matrix bottom row must be [0 0 0 1]");
        const double det = m_.topLeftCorner<3, 3>().determinant();
        const double scale = std::max(1.0, m_.topLeftCorner<3, 3>().cwiseAbs().maxCoeff());
        if (std::abs(det) <= 1e-12 * scale * scale * scale)
            throw GeometryError("affine matrix is singular");
    }

    static AffineTransform translation(const Vec3& t)
    {
        Mat4 m = Mat4::Identity();
        m.topRightCorner<3, 1>() = t;
        return AffineTransform(m);
    }

    const Mat4& matrix() const { return m_; }
    Mat3 linear() const { return m_.topLeftCorner<3, 3>(); }
    Vec3 offset() const { return m_.topRightCorner<3, 1>(); }

    Vec3 apply(const Vec3& p) const { return linear() * p + offset(); }
    AffineTransform inverse() const { return AffineTransform(m_.inverse()); }

    /// (*this)(other(x)).
    AffineTransform after(const AffineTransform& other) const { return AffineTransform(m_ * other.m_); }

private:
    Mat4 m_;
};

/// Ordered point maps, applied last-to-first: chain([f, g])(x) = f(g(x)).
class TransformChain {
public:
    using Part = std::variant<AffineTransform, std::shared_ptr<const DisplacementField>>;

    TransformChain() = default;
    explicit TransformChain(std::vector<Part> parts) : parts_(std::move(parts)) {}

    const std::vector<Part>& parts() const { return parts_; }
    bool empty() const { return parts_.empty(); }

    Vec3 operator()(const Vec3& p) const
    {
        Vec3 x = p;
        for (auto it = parts_.rbegin(); it != parts_.rend(); ++it) {
            if (const auto* a = std::get_if<AffineTransform>(&*it))
                x = a->apply(x);
            else
                x = std::get<std::shared_ptr<const DisplacementField>>(*it)->map_point(x);
        }
        return x;
    }

    /// Collapses adjacent affine parts; the result maps points identically.
    TransformChain simplified() const
    {
        std::vector<Part> out;
        for (const auto& p : parts_) {
            if (!out.empty() && std::holds_alternative<AffineTransform>(p) &&
                std::holds_alternative<AffineTransform>(out.back())) {
                out.back() = std::get<AffineTransform>(out.back()).after(std::get<AffineTransform>(p));
            } else {
                out.push_back(p);
            }
        }
        return TransformChain(std::move(out));
    }

private:
    std::vector<Part> parts_;
};

inline TransformChain compose_chain(std::vector<TransformChain::Part> parts)
{
    if (parts.empty())
        throw std::invalid_argument("compose_chain: at least one transform is required");
    for (const auto& p : parts)
        if (const auto* f = std::get_if<std::shared_ptr<const DisplacementField>>(&p); f && !*f)
            throw std::invalid_argument("compose_chain: null displacement field");
    return TransformChain(std::move(parts));
}

inline TransformChain::Part as_part(DisplacementField u)
{
    return std::make_shared<const DisplacementField>(std::move(u));
}

/// Count of image interpolation passes performed by sample().
inline std::atomic<std::uint64_t>& interpolation_passes()
{
    static std::atomic<std::uint64_t> counter{0};
    return counter;
}

namespace detail {

inline void require_overlap(const SamplingGrid& src, const SamplingGrid& dst)
{
    // An empty chain is only meaningful when both grids cover common world space.
    Vec3 lo_s = Vec3::Constant(1e300), hi_s = Vec3::Constant(-1e300);
    Vec3 lo_d = lo_s, hi_d = hi_s;
    for (int c = 0; c < 8; ++c) {
        const Vec3 f((c & 1) ? 1.0 : 0.0, (c & 2) ? 1.0 : 0.0, (c & 4) ? 1.0 : 0.0);
        const Vec3 cs(f.x() * double(src.shape().nx - 1), f.y() * double(src.shape().ny - 1),
                      f.z() * double(src.shape().nz - 1));
        const Vec3 cd(f.x() * double(dst.shape().nx - 1), f.y() * double(dst.shape().ny - 1),
                      f.z() * double(dst.shape().nz - 1));
        const Vec3 ws = src.voxel_to_world(cs), wd = dst.voxel_to_world(cd);
        lo_s = lo_s.cwiseMin(ws);
        hi_s = hi_s.cwiseMax(ws);
        lo_d = lo_d.cwiseMin(wd);
        hi_d = hi_d.cwiseMax(wd);
    }
    const Vec3 pad = 0.5 * (src.spacing() + dst.spacing());
    if (((hi_s + pad).array() < lo_d.array()).any() || ((hi_d + pad).array() < lo_s.array()).any())
        throw GeometryError("sample: empty transform chain between grids with no common world extent");
}

} // namespace detail

/// Trilinear resampling of intensities; 0 outside the source field of view.
inline Array3<float> sample(const ImageVolume& source, const SamplingGrid& target, const TransformChain& chain)
{
    if (chain.empty())
        detail::require_overlap(source.grid(), target);
    interpolation_passes().fetch_add(1, std::memory_order_relaxed);
    const TransformChain flat = chain.simplified();
    const auto& src = source.data();
    Array3<float> out(target.shape(), 0.0f);
    for (std::int64_t i = 0; i < out.size(); ++i) {
        const Vec3 c = source.grid().world_to_voxel(flat(target.voxel_to_world(i)));
        if (inside_field(src.shape(), c))
            out[i] = float(trilinear(src, c));
    }
    return out;
}

/// Nearest-neighbour resampling of labels; background (0) outside the source.
inline Array3<std::int32_t> sample(const LabelMap& source, const SamplingGrid& target, const TransformChain& chain)
{
    if (chain.empty())
        detail::require_overlap(source.grid(), target);
    interpolation_passes().fetch_add(1, std::memory_order_relaxed);
    const TransformChain flat = chain.simplified();
    const auto& src = source.data();
    Array3<std::int32_t> out(target.shape(), 0);
    for (std::int64_t i = 0; i < out.size(); ++i) {
        std::int64_t idx;
        if (nearest_index(src.shape(), source.grid().world_to_voxel(flat(target.voxel_to_world(i))), idx))
            out[i] = src[idx];
    }
    return out;
}

inline LabelMap resample_labels(const LabelMap& source, const SamplingGrid& target, const TransformChain& chain)
{
    return LabelMap(sample(source, target, chain), target, source.names());
}

// ---------------------------------------------------------------------------
// Moment-based affine initialisation

namespace detail {

struct Moments {
    Vec3 centroid = Vec3::Zero();
    Mat3 covariance = Mat3::Zero();
};

inline Moments foreground_moments(const LabelMap& labels)
{
    const auto& d = labels.data();
    const auto& g = labels.grid();
    Moments m;
    std::int64_t n = 0;
    for (std::int64_t i = 0; i < d.size(); ++i)
        if (d[i] != 0) {
            m.centroid += g.voxel_to_world(i);
            ++n;
        }
    if (n == 0)
        throw std::invalid_argument("moment_affine_init: empty foreground");
    m.centroid /= double(n);
    for (std::int64_t i = 0; i < d.size(); ++i)
        if (d[i] != 0) {
            const Vec3 x = g.voxel_to_world(i) - m.centroid;
            m.covariance += x * x.transpose();
        }
    m.covariance /= double(n);
    return m;
}

inline Mat3 sym_power(const Mat3& c, double power)
{
    Eigen::SelfAdjointEigenSolver<Mat3> es(c);
    Vec3 ev = es.eigenvalues();
    for (int i = 0; i < 3; ++i)
        ev[i] = std::pow(std::max(ev[i], 1e-12), power);
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

} // namespace detail

/// Subject→atlas affine matching foreground centroids and second moments.
/// Principal axes are assumed roughly aligned already (no rotation search).
inline AffineTransform moment_affine_init(const LabelMap& subject, const LabelMap& atlas)
{
    const auto ms = detail::foreground_moments(subject);
    const auto ma = detail::foreground_moments(atlas);
    const Mat3 lin = detail::sym_power(ma.covariance, 0.5) * detail::sym_power(ms.covariance, -0.5);
    Mat4 m = Mat4::Identity();
    m.topLeftCorner<3, 3>() = lin;
    m.topRightCorner<3, 1>() = ma.centroid - lin * ms.centroid;
    return AffineTransform(m);
}

} // namespace atlasreg
