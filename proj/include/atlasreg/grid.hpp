#pragma once

// Physical sampling grids and dense 3-D arrays.
//
// Voxel storage order is x fastest, then y, then z (the NIfTI order). World
// coordinates are millimetres:
//
//     world = origin + direction * diag(spacing) * index

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace atlasreg {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

class GeometryError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Shape3 {
    std::int64_t nx = 0, ny = 0, nz = 0;

    std::int64_t size() const { return nx * ny * nz; }
    std::int64_t index(std::int64_t i, std::int64_t j, std::int64_t k) const { return i + nx * (j + ny * k); }
    bool contains(std::int64_t i, std::int64_t j, std::int64_t k) const
    {
        return i >= 0 && j >= 0 && k >= 0 && i < nx && j < ny && k < nz;
    }
    std::int64_t operator[](int axis) const { return axis == 0 ? nx : (axis == 1 ? ny : nz); }
    std::array<std::int64_t, 3> unravel(std::int64_t idx) const
    {
        const std::int64_t i = idx % nx;
        const std::int64_t j = (idx / nx) % ny;
        return {i, j, idx / (nx * ny)};
    }
    friend bool operator==(const Shape3&, const Shape3&) = default;
};

inline std::string to_string(const Shape3& s)
{
    return std::to_string(s.nx) + "x" + std::to_string(s.ny) + "x" + std::to_string(s.nz);
}

class SamplingGrid {
public:
    SamplingGrid() = default;

    SamplingGrid(Shape3 shape, Vec3 spacing, Mat3 direction = Mat3::Identity(), Vec3 origin = Vec3::Zero())
        : shape_(shape), spacing_(spacing), direction_(direction), origin_(origin)
    {
        validate();
    }

    /// Isotropic grid whose centre voxel sits at the world origin.
    static SamplingGrid centred(Shape3 shape, double spacing = 1.0)
    {
        const Vec3 sp = Vec3::Constant(spacing);
        const Vec3 origin(-0.5 * (shape.nx - 1) * spacing, -0.5 * (shape.ny - 1) * spacing,
                          -0.5 * (shape.nz - 1) * spacing);
        return SamplingGrid(shape, sp, Mat3::Identity(), origin);
    }

    const Shape3& shape() const { return shape_; }
    const Vec3& spacing() const { return spacing_; }
    const Mat3& direction() const { return direction_; }
    const Vec3& origin() const { return origin_; }
    std::int64_t size() const { return shape_.size(); }
    double voxel_volume() const { return spacing_.prod(); }
    double min_spacing() const { return spacing_.minCoeff(); }

    /// Linear part of the voxel→world map.
    Mat3 linear() const { return direction_ * spacing_.asDiagonal(); }

    Mat4 voxel_to_world_matrix() const
    {
        Mat4 m = Mat4::Identity();
        m.topLeftCorner<3, 3>() = linear();
        m.topRightCorner<3, 1>() = origin_;
        return m;
    }

    Vec3 voxel_to_world(const Vec3& idx) const { return origin_ + direction_ * spacing_.cwiseProduct(idx); }
    Vec3 voxel_to_world(std::int64_t i, std::int64_t j, std::int64_t k) const
    {
        return voxel_to_world(Vec3(double(i), double(j), double(k)));
    }
    Vec3 voxel_to_world(std::int64_t flat) const
    {
        const auto [i, j, k] = shape_.unravel(flat);
        return voxel_to_world(i, j, k);
    }

    Vec3 world_to_voxel(const Vec3& p) const
    {
        return (direction_.transpose() * (p - origin_)).cwiseQuotient(spacing_);
    }

    /// d(index)/d(world), constant for a grid.
    Mat3 world_to_voxel_jacobian() const { return spacing_.cwiseInverse().asDiagonal() * direction_.transpose(); }

    /// World-space extent of the grid measured face to face.
    Vec3 extent() const
    {
        return Vec3(double(shape_.nx), double(shape_.ny), double(shape_.nz)).cwiseProduct(spacing_);
    }

    bool same_as(const SamplingGrid& o, double tol = 1e-6) const
    {
        return shape_ == o.shape_ && (spacing_ - o.spacing_).cwiseAbs().maxCoeff() <= tol &&
               (direction_ - o.direction_).cwiseAbs().maxCoeff() <= tol &&
               (origin_ - o.origin_).cwiseAbs().maxCoeff() <= tol;
    }

    void validate() const
    {
        if (shape_.nx <= 0 || shape_.ny <= 0 || shape_.nz <= 0)
            throw GeometryError("grid shape must be positive, got " + to_string(shape_));
        if (!(spacing_.array() > 0.0).all() || !spacing_.allFinite())
            throw GeometryError("grid spacing must be positive and finite");
        if ((direction_.transpose() * direction_ - Mat3::Identity()).cwiseAbs().maxCoeff() > 1e-6)
            throw GeometryError("grid direction columns are not orthonormal");
        if (!origin_.allFinite())
            throw GeometryError("grid origin is not finite");
    }

private:
    Shape3 shape_{};
    Vec3 spacing_ = Vec3::Ones();
    Mat3 direction_ = Mat3::Identity();
    Vec3 origin_ = Vec3::Zero();
};

/// Dense 3-D array in x-fastest order.
template <class T>
class Array3 {
public:
    Array3() = default;
    explicit Array3(Shape3 shape, T fill = T{}) : shape_(shape), data_(std::size_t(shape.size()), fill) {}
    Array3(Shape3 shape, std::vector<T> data) : shape_(shape), data_(std::move(data))
    {
        if (std::int64_t(data_.size()) != shape_.size())
            throw std::invalid_argument("Array3: data size does not match shape " + to_string(shape_));
    }

    const Shape3& shape() const { return shape_; }
    std::int64_t size() const { return shape_.size(); }

    T& operator[](std::int64_t idx) { return data_[std::size_t(idx)]; }
    const T& operator[](std::int64_t idx) const { return data_[std::size_t(idx)]; }
    T& operator()(std::int64_t i, std::int64_t j, std::int64_t k) { return data_[std::size_t(shape_.index(i, j, k))]; }
    const T& operator()(std::int64_t i, std::int64_t j, std::int64_t k) const
    {
        return data_[std::size_t(shape_.index(i, j, k))];
    }

    std::vector<T>& values() { return data_; }
    const std::vector<T>& values() const { return data_; }
    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }

    auto begin() { return data_.begin(); }
    auto end() { return data_.end(); }
    auto begin() const { return data_.begin(); }
    auto end() const { return data_.end(); }

    friend bool operator==(const Array3&, const Array3&) = default;

private:
    Shape3 shape_{};
    std::vector<T> data_;
};

using Mask = Array3<std::uint8_t>;

inline std::int64_t count(const Mask& m)
{
    std::int64_t n = 0;
    for (auto v : m)
        n += v != 0;
    return n;
}

} // namespace atlasreg
