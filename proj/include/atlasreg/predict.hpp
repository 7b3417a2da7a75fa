#pragma once

// Glue between volumes and the velocity network: input preparation on the
// coarse prediction grid, symmetric padding to a multiple of 4, cropping, and
// trilinear upsampling of the predicted velocity to the atlas grid (with its
// adjoint for training).

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "atlasreg/field.hpp"
#include "atlasreg/nn.hpp"
#include "atlasreg/volume.hpp"

namespace atlasreg {

/// Atlas grid downsampled by `factor`; coarse voxel k covers fine voxels
/// factor*k .. factor*k + factor - 1.
inline SamplingGrid coarse_grid(const SamplingGrid& fine, int factor)
{
    if (factor < 1)
        throw std::invalid_argument("coarse_grid: factor must be >= 1");
    const Shape3& s = fine.shape();
    const Shape3 cs{(s.nx + factor - 1) / factor, (s.ny + factor - 1) / factor, (s.nz + factor - 1) / factor};
    const Vec3 shift = Vec3::Constant(0.5 * (factor - 1));
    return SamplingGrid(cs, fine.spacing() * factor, fine.direction(), fine.voxel_to_world(shift));
}

class VelocityPredictor {
public:
    VelocityPredictor(const SamplingGrid& atlas_grid, int factor)
        : fine_(atlas_grid), coarse_(coarse_grid(atlas_grid, factor))
    {
        const Shape3& c = coarse_.shape();
        for (int a = 0; a < 3; ++a) {
            const std::int64_t n = c[a];
            const std::int64_t p = (n + 3) / 4 * 4;
            pad_lo_[std::size_t(a)] = (p - n) / 2;
            padded_dims_[std::size_t(a)] = p;
        }
        padded_ = Shape3{padded_dims_[0], padded_dims_[1], padded_dims_[2]};

        stencils_.resize(std::size_t(fine_.size()));
        for (std::int64_t i = 0; i < fine_.size(); ++i) {
            const auto s = trilinear_stencil(c, coarse_.world_to_voxel(fine_.voxel_to_world(i)));
            for (int n = 0; n < 8; ++n) {
                stencils_[std::size_t(i)].idx[n] = std::int32_t(s.idx[n]);
                stencils_[std::size_t(i)].w[n] = s.w[n];
            }
        }
    }

    const SamplingGrid& atlas_grid() const { return fine_; }
    const SamplingGrid& prediction_grid() const { return coarse_; }
    const Shape3& padded_shape() const { return padded_; }

    /// Two standardised channels (subject through `subject_to_atlas`, atlas)
    /// on the padded prediction grid.
    nn::Tensor make_input(const ImageVolume& subject, const AffineTransform& subject_to_atlas,
                          const ImageVolume& atlas) const
    {
        const auto to_subject = compose_chain({subject_to_atlas.inverse()});
        std::int64_t overlap = 0;
        for (std::int64_t i = 0; i < coarse_.size(); ++i)
            overlap += inside_field(subject.grid().shape(),
                                    subject.grid().world_to_voxel(to_subject(coarse_.voxel_to_world(i))));
        if (overlap == 0)
            throw GeometryError("predict_velocity: subject does not overlap the prediction grid");
        const auto a = sample(subject, coarse_, to_subject);
        const auto b = sample(atlas, coarse_, compose_chain({AffineTransform()}));
        nn::Tensor t(2, padded_);
        fill_standardised(a, t.channel(0));
        fill_standardised(b, t.channel(1));
        return t;
    }

    /// Crops the 3-channel network output and upsamples it to the atlas grid.
    VelocityField to_velocity(const nn::Tensor& out) const
    {
        const Shape3& c = coarse_.shape();
        std::vector<Vec3> coarse(std::size_t(c.size()));
        for (std::int64_t k = 0; k < c.nz; ++k)
            for (std::int64_t j = 0; j < c.ny; ++j)
                for (std::int64_t i = 0; i < c.nx; ++i) {
                    const std::int64_t p = padded_.index(i + pad_lo_[0], j + pad_lo_[1], k + pad_lo_[2]);
                    coarse[std::size_t(c.index(i, j, k))] =
                        Vec3(out.channel(0)[p], out.channel(1)[p], out.channel(2)[p]);
                }
        VelocityField v(fine_);
        for (std::int64_t i = 0; i < fine_.size(); ++i) {
            const auto& s = stencils_[std::size_t(i)];
            Vec3 acc = Vec3::Zero();
            for (int n = 0; n < 8; ++n)
                acc += s.w[n] * coarse[std::size_t(s.idx[n])];
            v[i] = acc;
        }
        return v;
    }

    /// Adjoint of to_velocity: dL/d(network output) from dL/dv.
    nn::Tensor velocity_backward(const std::vector<Vec3>& grad_v) const
    {
        const Shape3& c = coarse_.shape();
        std::vector<Vec3> coarse(std::size_t(c.size()), Vec3::Zero());
        for (std::int64_t i = 0; i < fine_.size(); ++i) {
            const auto& s = stencils_[std::size_t(i)];
            for (int n = 0; n < 8; ++n)
                coarse[std::size_t(s.idx[n])] += s.w[n] * grad_v[std::size_t(i)];
        }
        nn::Tensor g(3, padded_);
        for (std::int64_t k = 0; k < c.nz; ++k)
            for (std::int64_t j = 0; j < c.ny; ++j)
                for (std::int64_t i = 0; i < c.nx; ++i) {
                    const std::int64_t p = padded_.index(i + pad_lo_[0], j + pad_lo_[1], k + pad_lo_[2]);
                    const Vec3& x = coarse[std::size_t(c.index(i, j, k))];
                    for (int a = 0; a < 3; ++a)
                        g.channel(a)[p] = float(x[a]);
                }
        return g;
    }

private:
    struct Stencil {
        std::int32_t idx[8];
        double w[8];
    };

    void fill_standardised(const Array3<float>& a, float* dst) const
    {
        double mean = 0.0, var = 0.0;
        for (float x : a)
            mean += x;
        mean /= double(a.size());
        for (float x : a)
            var += (x - mean) * (x - mean);
        var /= double(a.size());
        const double inv = var > 0.0 ? 1.0 / std::sqrt(var) : 0.0;
        const Shape3& c = coarse_.shape();
        for (std::int64_t k = 0; k < c.nz; ++k)
            for (std::int64_t j = 0; j < c.ny; ++j)
                for (std::int64_t i = 0; i < c.nx; ++i)
                    dst[padded_.index(i + pad_lo_[0], j + pad_lo_[1], k + pad_lo_[2])] =
                        float((a(i, j, k) - mean) * inv);
    }

    SamplingGrid fine_, coarse_;
    Shape3 padded_{};
    std::array<std::int64_t, 3> pad_lo_{}, padded_dims_{};
    std::vector<Stencil> stencils_;
};

/// Velocity on `grid` (the atlas grid) for one subject.
inline VelocityField predict_velocity(const nn::VelocityNet& net, const ImageVolume& subject,
                                      const AffineTransform& subject_to_atlas, const ImageVolume& atlas,
                                      const SamplingGrid& grid)
{
    if (!grid.same_as(atlas.grid()))
        throw GeometryError("predict_velocity: velocity grid must be the atlas grid");
    const VelocityPredictor p(grid, net.config().grid_factor);
    const auto v = p.to_velocity(net.forward(p.make_input(subject, subject_to_atlas, atlas)));
    if (!v.all_finite())
        throw FieldError("predict_velocity: network produced non-finite values");
    return v;
}

} // namespace atlasreg
