#pragma once

// Stationary velocity fields, displacement fields, scaling-and-squaring
// integration, composition, and Jacobian analysis.
//
// All vectors are in world millimetres. A displacement field u on grid G
// represents the point map x -> x + u(x) for world points x; values between
// voxel centres are trilinear, lookups beyond the grid clamp to the edge.

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "atlasreg/grid.hpp"
#include "atlasreg/interp.hpp"

namespace atlasreg {

struct VelocityTag {};
struct DisplacementTag {};

template <class Tag>
class VectorField {
public:
    VectorField() = default;
    explicit VectorField(SamplingGrid grid) : grid_(std::move(grid)), v_(std::size_t(grid_.size()), Vec3::Zero()) {}
    VectorField(SamplingGrid grid, std::vector<Vec3> v) : grid_(std::move(grid)), v_(std::move(v))
    {
        if (std::int64_t(v_.size()) != grid_.size())
            throw std::invalid_argument("vector field size does not match grid " + to_string(grid_.shape()));
    }

    const SamplingGrid& grid() const { return grid_; }
    const Shape3& shape() const { return grid_.shape(); }
    std::int64_t size() const { return grid_.size(); }

    Vec3& operator[](std::int64_t i) { return v_[std::size_t(i)]; }
    const Vec3& operator[](std::int64_t i) const { return v_[std::size_t(i)]; }
    std::vector<Vec3>& values() { return v_; }
    const std::vector<Vec3>& values() const { return v_; }

    bool all_finite() const
    {
        return std::all_of(v_.begin(), v_.end(), [](const Vec3& x) { return x.allFinite(); });
    }
    double max_norm() const
    {
        double m = 0.0;
        for (const auto& x : v_)
            m = std::max(m, x.norm());
        return m;
    }

    /// Trilinear (clamp-to-edge) value at a world point.
    Vec3 at_world(const Vec3& p) const { return at_voxel(grid_.world_to_voxel(p)); }

    Vec3 at_voxel(const Vec3& c) const
    {
        const auto s = trilinear_stencil(grid_.shape(), c);
        Vec3 out = Vec3::Zero();
        for (int n = 0; n < 8; ++n)
            if (s.w[n] != 0.0)
                out += s.w[n] * v_[std::size_t(s.idx[n])];
        return out;
    }

    /// Point map x -> x + u(x).
    Vec3 map_point(const Vec3& p) const { return p + at_world(p); }

    template <class Other>
    VectorField<Other> retag() const
    {
        return VectorField<Other>(grid_, v_);
    }

    VectorField operator-() const
    {
        VectorField r(*this);
        for (auto& x : r.v_)
            x = -x;
        return r;
    }

private:
    SamplingGrid grid_;
    std::vector<Vec3> v_;
};

using VelocityField = VectorField<VelocityTag>;
using DisplacementField = VectorField<DisplacementTag>;

class FieldError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {

inline void require_same_grid(const SamplingGrid& a, const SamplingGrid& b, const char* what)
{
    if (!a.same_as(b))
        throw FieldError(std::string(what) + ": grid mismatch");
}

/// Continuous voxel coordinate of x_i + u for grid voxel i.
inline Vec3 displaced_voxel(const Shape3& shape, const Mat3& w2v, std::int64_t i, const Vec3& u)
{
    const auto [x, y, z] = shape.unravel(i);
    return Vec3(double(x), double(y), double(z)) + w2v * u;
}

} // namespace detail

/// result(x) = inner(x) + outer(x + inner(x)).
inline DisplacementField compose(const DisplacementField& outer, const DisplacementField& inner)
{
    detail::require_same_grid(outer.grid(), inner.grid(), "compose");
    const Mat3 w2v = inner.grid().world_to_voxel_jacobian();
    DisplacementField out(inner.grid());
    for (std::int64_t i = 0; i < inner.size(); ++i)
        out[i] = inner[i] + outer.at_voxel(detail::displaced_voxel(inner.shape(), w2v, i, inner[i]));
    return out;
}

/// Adjoint of compose(u, u) with respect to u, accumulated into `grad_u`.
inline void compose_self_backward(const DisplacementField& u, const std::vector<Vec3>& grad_out,
                                  std::vector<Vec3>& grad_u)
{
    const Mat3 w2v = u.grid().world_to_voxel_jacobian();
    for (std::int64_t i = 0; i < u.size(); ++i) {
        const Vec3& g = grad_out[std::size_t(i)];
        grad_u[std::size_t(i)] += g;
        if (g.isZero(0.0))
            continue;
        const auto s = trilinear_stencil(u.shape(), detail::displaced_voxel(u.shape(), w2v, i, u[i]));
        Mat3 dvalue_dvoxel = Mat3::Zero();
        for (int n = 0; n < 8; ++n) {
            grad_u[std::size_t(s.idx[n])] += s.w[n] * g;
            dvalue_dvoxel += u[s.idx[n]] * Vec3(s.dw[n][0], s.dw[n][1], s.dw[n][2]).transpose();
        }
        grad_u[std::size_t(i)] += (dvalue_dvoxel * w2v).transpose() * g;
    }
}

/// Number of squarings: smallest K with max|v| / 2^K < 0.5 * min spacing, at most 8.
inline int auto_squaring_steps(const VelocityField& v)
{
    const double limit = 0.5 * v.grid().min_spacing();
    const double m = v.max_norm();
    int k = 0;
    while (k < 8 && m / std::ldexp(1.0, k) >= limit)
        ++k;
    return k;
}

/// Intermediate stages of one scaling-and-squaring run, kept for the adjoint.
struct SquaringTape {
    int steps = 0;
    std::vector<DisplacementField> stages; // u_0 = v / 2^K ... u_K

    const DisplacementField& result() const { return stages.back(); }
};

inline SquaringTape exponentiate(const VelocityField& v, int steps)
{
    if (!v.all_finite())
        throw FieldError("integrate_svf: velocity field is not finite");
    if (steps < 0)
        steps = auto_squaring_steps(v);
    SquaringTape tape;
    tape.steps = steps;
    const double scale = std::ldexp(1.0, -steps);
    std::vector<Vec3> u0(v.values());
    for (auto& x : u0)
        x *= scale;
    tape.stages.emplace_back(v.grid(), std::move(u0));
    for (int k = 0; k < steps; ++k)
        tape.stages.push_back(compose(tape.stages.back(), tape.stages.back()));
    return tape;
}

/// dL/dv given dL/d(exp(v)).
inline std::vector<Vec3> exponentiate_backward(const SquaringTape& tape, std::vector<Vec3> grad)
{
    for (int k = tape.steps; k > 0; --k) {
        std::vector<Vec3> prev(grad.size(), Vec3::Zero());
        compose_self_backward(tape.stages[std::size_t(k - 1)], grad, prev);
        grad = std::move(prev);
    }
    const double scale = std::ldexp(1.0, -tape.steps);
    for (auto& g : grad)
        g *= scale;
    return grad;
}

struct TransformPair {
    DisplacementField forward; // exp(v)
    DisplacementField inverse; // exp(-v)
};

/// Integration result with both tapes, for callers that need gradients.
struct SvfIntegration {
    SquaringTape forward;
    SquaringTape inverse;

    TransformPair transforms() const { return {forward.result(), inverse.result()}; }

    /// dL/dv from dL/dT and dL/dT_inv (either may be empty).
    std::vector<Vec3> backward(const std::vector<Vec3>& grad_forward, const std::vector<Vec3>& grad_inverse) const
    {
        const std::size_t n = forward.stages.front().values().size();
        std::vector<Vec3> g(n, Vec3::Zero());
        if (!grad_forward.empty())
            g = exponentiate_backward(forward, grad_forward);
        if (!grad_inverse.empty()) {
            const auto gi = exponentiate_backward(inverse, grad_inverse);
            for (std::size_t i = 0; i < n; ++i)
                g[i] -= gi[i];
        }
        return g;
    }
};

/// steps < 0 selects the automatic rule.
inline SvfIntegration integrate_svf_taped(const VelocityField& v, int steps = -1)
{
    if (steps < 0)
        steps = auto_squaring_steps(v);
    return {exponentiate(v, steps), exponentiate(-v, steps)};
}

inline TransformPair integrate_svf(const VelocityField& v, int steps = -1)
{
    return integrate_svf_taped(v, steps).transforms();
}

// ---------------------------------------------------------------------------
// Spatial derivatives

/// Index-space derivative of u along `axis` at voxel (i,j,k): central inside,
/// one-sided at borders, zero on singleton axes. Column `axis` of d u / d index.
inline Vec3 index_derivative(const std::vector<Vec3>& u, const Shape3& s, std::int64_t i, std::int64_t j,
                             std::int64_t k, int axis)
{
    const std::int64_t n = s[axis];
    if (n < 2)
        return Vec3::Zero();
    std::int64_t c[3] = {i, j, k};
    const std::int64_t p = c[axis];
    std::int64_t lo = p - 1, hi = p + 1;
    double h = 2.0;
    if (p == 0) {
        lo = 0;
        hi = 1;
        h = 1.0;
    } else if (p == n - 1) {
        lo = n - 2;
        hi = n - 1;
        h = 1.0;
    }
    c[axis] = hi;
    const Vec3& uh = u[std::size_t(s.index(c[0], c[1], c[2]))];
    c[axis] = lo;
    const Vec3& ul = u[std::size_t(s.index(c[0], c[1], c[2]))];
    return (uh - ul) / h;
}

/// Adjoint of index_derivative: distribute `g` (dL/d derivative) onto u.
inline void index_derivative_backward(std::vector<Vec3>& grad_u, const Shape3& s, std::int64_t i, std::int64_t j,
                                      std::int64_t k, int axis, const Vec3& g)
{
    const std::int64_t n = s[axis];
    if (n < 2)
        return;
    std::int64_t c[3] = {i, j, k};
    const std::int64_t p = c[axis];
    std::int64_t lo = p - 1, hi = p + 1;
    double h = 2.0;
    if (p == 0) {
        lo = 0;
        hi = 1;
        h = 1.0;
    } else if (p == n - 1) {
        lo = n - 2;
        hi = n - 1;
        h = 1.0;
    }
    c[axis] = hi;
    grad_u[std::size_t(s.index(c[0], c[1], c[2]))] += g / h;
    c[axis] = lo;
    grad_u[std::size_t(s.index(c[0], c[1], c[2]))] -= g / h;
}

/// d u / d world at a voxel.
inline Mat3 displacement_gradient(const DisplacementField& u, std::int64_t i, std::int64_t j, std::int64_t k,
                                  const Mat3& w2v)
{
    Mat3 g;
    for (int a = 0; a < 3; ++a)
        g.col(a) = index_derivative(u.values(), u.shape(), i, j, k, a);
    return g * w2v;
}

inline Mat3 cofactor(const Mat3& a)
{
    Mat3 c;
    c(0, 0) = a(1, 1) * a(2, 2) - a(1, 2) * a(2, 1);
    c(0, 1) = a(1, 2) * a(2, 0) - a(1, 0) * a(2, 2);
    c(0, 2) = a(1, 0) * a(2, 1) - a(1, 1) * a(2, 0);
    c(1, 0) = a(0, 2) * a(2, 1) - a(0, 1) * a(2, 2);
    c(1, 1) = a(0, 0) * a(2, 2) - a(0, 2) * a(2, 0);
    c(1, 2) = a(0, 1) * a(2, 0) - a(0, 0) * a(2, 1);
    c(2, 0) = a(0, 1) * a(1, 2) - a(0, 2) * a(1, 1);
    c(2, 1) = a(0, 2) * a(1, 0) - a(0, 0) * a(1, 2);
    c(2, 2) = a(0, 0) * a(1, 1) - a(0, 1) * a(1, 0);
    return c;
}

/// det(I + du/dx) per voxel.
inline Array3<double> jacobian_determinant(const DisplacementField& u)
{
    const Shape3& s = u.shape();
    const Mat3 w2v = u.grid().world_to_voxel_jacobian();
    Array3<double> det(s);
    for (std::int64_t k = 0; k < s.nz; ++k)
        for (std::int64_t j = 0; j < s.ny; ++j)
            for (std::int64_t i = 0; i < s.nx; ++i)
                det(i, j, k) = (Mat3::Identity() + displacement_gradient(u, i, j, k, w2v)).determinant();
    return det;
}

/// Adjoint of jacobian_determinant: dL/du given dL/dJ per voxel.
inline std::vector<Vec3> jacobian_determinant_backward(const DisplacementField& u, const Array3<double>& grad_det)
{
    const Shape3& s = u.shape();
    const Mat3 w2v = u.grid().world_to_voxel_jacobian();
    std::vector<Vec3> grad(std::size_t(u.size()), Vec3::Zero());
    for (std::int64_t k = 0; k < s.nz; ++k)
        for (std::int64_t j = 0; j < s.ny; ++j)
            for (std::int64_t i = 0; i < s.nx; ++i) {
                const double gj = grad_det(i, j, k);
                if (gj == 0.0)
                    continue;
                const Mat3 a = Mat3::Identity() + displacement_gradient(u, i, j, k, w2v);
                const Mat3 d_index = gj * cofactor(a) * w2v.transpose();
                for (int ax = 0; ax < 3; ++ax)
                    index_derivative_backward(grad, s, i, j, k, ax, d_index.col(ax));
            }
    return grad;
}

/// Fraction of voxels whose Jacobian determinant is <= 0.
inline double fraction_of_foldings(const Array3<double>& det)
{
    if (det.size() == 0)
        return 0.0;
    std::int64_t n = 0;
    for (double d : det)
        n += d <= 0.0;
    return double(n) / double(det.size());
}

inline double fraction_of_foldings(const DisplacementField& u) { return fraction_of_foldings(jacobian_determinant(u)); }

} // namespace atlasreg
