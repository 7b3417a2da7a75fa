#pragma once

// Synthetic test bed: a nested-shell atlas, smoothly deformed subjects with
// known ground-truth transforms, optional spherical tumours that exist only
// in the subject, and the two-field collapse toy.

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <vector>

#include "atlasreg/field.hpp"
#include "atlasreg/volume.hpp"

namespace atlasreg {

struct PhantomSpec {
    SamplingGrid grid = SamplingGrid::centred({48, 48, 48}, 1.0);
    int n_labels = 3;
    double deform_amplitude = 3.0;   // mm, maximum ground-truth displacement
    double deform_smoothness = 6.0;  // mm, Gaussian sigma of the velocity noise
    std::optional<double> tumour_radius;
    std::uint64_t seed = 0;
    double noise_sd = 0.03;          // intensity noise (smoothed), in intensity units
};

/// Gaussian smoothing along each axis (sigma in mm, clamped borders).
inline void gaussian_smooth(std::vector<double>& f, const Shape3& s, const Vec3& spacing, double sigma_mm)
{
    if (sigma_mm <= 0)
        return;
    std::vector<double> line;
    for (int axis = 0; axis < 3; ++axis) {
        const double sig = sigma_mm / spacing[axis];
        const int r = std::max(1, int(std::ceil(3.0 * sig)));
        std::vector<double> k(std::size_t(2 * r + 1));
        double ks = 0;
        for (int t = -r; t <= r; ++t)
            ks += k[std::size_t(t + r)] = std::exp(-0.5 * t * t / (sig * sig));
        for (auto& x : k)
            x /= ks;
        const std::int64_t n = s[axis];
        const std::int64_t stride = axis == 0 ? 1 : (axis == 1 ? s.nx : s.nx * s.ny);
        line.resize(std::size_t(n));
        for (std::int64_t base = 0; base < s.size(); ++base) {
            const auto c = s.unravel(base);
            if (c[std::size_t(axis)] != 0)
                continue;
            for (std::int64_t i = 0; i < n; ++i)
                line[std::size_t(i)] = f[std::size_t(base + i * stride)];
            for (std::int64_t i = 0; i < n; ++i) {
                double acc = 0;
                for (int t = -r; t <= r; ++t)
                    acc += k[std::size_t(t + r)] * line[std::size_t(std::clamp<std::int64_t>(i + t, 0, n - 1))];
                f[std::size_t(base + i * stride)] = acc;
            }
        }
    }
}

/// Band-limited random velocity: smoothed white noise with max norm `amplitude`.
/// The noise is drawn on a grid padded by three sigmas so the clamped smoothing
/// borders fall outside the returned field.
inline VelocityField smooth_random_velocity(const SamplingGrid& g, double amplitude, double smoothness_mm,
                                            std::uint64_t seed)
{
    const Shape3& s = g.shape();
    std::array<std::int64_t, 3> pad{};
    for (int a = 0; a < 3; ++a)
        pad[std::size_t(a)] = std::int64_t(std::ceil(3.0 * smoothness_mm / g.spacing()[a]));
    const Shape3 ps{s.nx + 2 * pad[0], s.ny + 2 * pad[1], s.nz + 2 * pad[2]};
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd;
    std::vector<double> comp[3];
    for (auto& c : comp) {
        c.resize(std::size_t(ps.size()));
        for (auto& x : c)
            x = nd(rng);
        gaussian_smooth(c, ps, g.spacing(), smoothness_mm);
    }
    VelocityField v(g);
    for (std::int64_t k = 0; k < s.nz; ++k)
        for (std::int64_t j = 0; j < s.ny; ++j)
            for (std::int64_t i = 0; i < s.nx; ++i) {
                const auto p = std::size_t(ps.index(i + pad[0], j + pad[1], k + pad[2]));
                v[s.index(i, j, k)] = Vec3(comp[0][p], comp[1][p], comp[2][p]);
            }
    const double m = v.max_norm();
    if (m > 0)
        for (auto& x : v.values())
            x *= amplitude / m;
    return v;
}

/// Analytic nested-shell atlas. Label k (1..n) occupies normalised radius
/// (s_{k+1}, s_k] with s_k = 1 - 0.8 (k-1) / n; the innermost label is a solid core.
class ShellPhantom {
public:
    explicit ShellPhantom(const PhantomSpec& spec) : spec_(spec)
    {
        if (spec.n_labels < 2)
            throw std::invalid_argument("phantom: n_labels must be >= 2");
        const Vec3 e = spec.grid.extent();
        axes_ = Vec3(0.42 * e.x(), 0.38 * e.y(), 0.40 * e.z());
        centre_ = spec.grid.voxel_to_world(0.5 * Vec3(double(spec.grid.shape().nx - 1),
                                                       double(spec.grid.shape().ny - 1),
                                                       double(spec.grid.shape().nz - 1)));
        const double thickness = 0.8 / spec.n_labels * axes_.minCoeff();
        if (thickness < 1.5 * spec.grid.spacing().maxCoeff())
            throw std::invalid_argument("phantom: grid too small for " + std::to_string(spec.n_labels) + " shells");
        std::mt19937_64 rng(spec.seed * 7919 + 17);
        std::uniform_real_distribution<double> ph(0, 6.283185307179586);
        for (auto& p : phase_)
            p = ph(rng);
        std::vector<double> noise(std::size_t(spec.grid.size()));
        std::normal_distribution<double> nd;
        for (auto& x : noise)
            x = nd(rng);
        gaussian_smooth(noise, spec.grid.shape(), spec.grid.spacing(), 1.5 * spec.grid.spacing().minCoeff());
        double sd = 0;
        for (double x : noise)
            sd += x * x;
        sd = std::sqrt(sd / double(noise.size()));
        noise_ = Array3<float>(spec.grid.shape());
        for (std::int64_t i = 0; i < noise_.size(); ++i)
            noise_[i] = float(sd > 0 ? spec.noise_sd * noise[std::size_t(i)] / sd : 0.0);
    }

    const PhantomSpec& spec() const { return spec_; }
    const Vec3& centre() const { return centre_; }
    const Vec3& semi_axes() const { return axes_; }

    double shell_scale(int k) const { return 1.0 - 0.8 * double(k - 1) / double(spec_.n_labels); }

    /// Normalised radius with a gentle angular modulation of the surfaces.
    double radius(const Vec3& p) const
    {
        const Vec3 q = (p - centre_).cwiseQuotient(axes_);
        const double r = q.norm();
        if (r == 0)
            return 0;
        const Vec3 d = q / r;
        const double bump = 0.04 * std::sin(3.0 * d.x() + phase_[0]) * std::cos(2.0 * d.y() + phase_[1]) +
                            0.03 * std::sin(2.0 * d.z() + phase_[2]);
        return r * (1.0 + bump);
    }

    std::int32_t label_at(const Vec3& p) const
    {
        const double r = radius(p);
        std::int32_t lab = 0;
        for (int k = 1; k <= spec_.n_labels; ++k)
            if (r <= shell_scale(k))
                lab = k;
        return lab;
    }

    static double label_intensity(std::int32_t l, int n)
    {
        if (l == 0)
            return 0.0;
        // Alternating contrast so neighbouring shells always differ.
        return (l % 2 ? 0.45 : 0.85) + 0.1 * double(l) / double(n);
    }

    double intensity_at(const Vec3& p) const
    {
        const Vec3 c = spec_.grid.world_to_voxel(p);
        return label_intensity(label_at(p), spec_.n_labels) + trilinear(noise_, c);
    }

    ImageVolume image() const
    {
        Array3<float> a(spec_.grid.shape());
        for (std::int64_t i = 0; i < a.size(); ++i)
            a[i] = float(intensity_at(spec_.grid.voxel_to_world(i)));
        return ImageVolume(std::move(a), spec_.grid, "atlas");
    }

    LabelMap labels() const
    {
        Array3<std::int32_t> a(spec_.grid.shape());
        for (std::int64_t i = 0; i < a.size(); ++i)
            a[i] = label_at(spec_.grid.voxel_to_world(i));
        return LabelMap(std::move(a), spec_.grid);
    }

private:
    PhantomSpec spec_;
    Vec3 axes_, centre_;
    double phase_[3] = {0, 0, 0};
    Array3<float> noise_;
};

struct PhantomAtlas {
    ImageVolume image;
    LabelMap labels;
};

inline PhantomAtlas make_atlas(const PhantomSpec& spec)
{
    ShellPhantom p(spec);
    return {p.image(), p.labels()};
}

inline constexpr float kTumourIntensity = 1.6f;

struct PhantomSubject {
    ImageVolume image;
    LabelMap labels;   // tumour voxels carry label 0
    Mask tumour;       // subject grid
    TransformPair ground_truth; // forward: atlas -> subject pull-back; inverse: subject -> atlas
    Vec3 tumour_centre = Vec3::Zero();
};

/// Subject = atlas pulled back through psi = exp(v): C_S(y) = C_A(psi(y)),
/// evaluated analytically at psi(y). The tumour is a sphere placed in the
/// subject at the image of a point in the atlas's innermost shell.
inline PhantomSubject make_subject(const PhantomSpec& spec, std::int64_t subject_index = 0)
{
    ShellPhantom atlas(spec);
    const auto& g = spec.grid;
    const std::uint64_t seed = spec.seed * 1000003ull + std::uint64_t(subject_index) * 7777ull + 1ull;

    TransformPair gt{DisplacementField(g), DisplacementField(g)};
    if (spec.deform_amplitude > 0) {
        auto v = smooth_random_velocity(g, spec.deform_amplitude, spec.deform_smoothness, seed);
        // The head deforms; the far background stays put.
        for (std::int64_t i = 0; i < g.size(); ++i) {
            const double t = std::clamp((atlas.radius(g.voxel_to_world(i)) - 1.0) / 0.35, 0.0, 1.0);
            v[i] *= 1.0 - t * t * (3.0 - 2.0 * t);
        }
        for (int it = 0; it < 3; ++it) {
            const double m = integrate_svf(v, 8).inverse.max_norm();
            if (m <= 0)
                break;
            for (auto& x : v.values())
                x *= spec.deform_amplitude / m;
        }
        const auto pair = integrate_svf(v, 8);
        gt = {pair.inverse, pair.forward};
    }
    const DisplacementField& psi = gt.inverse;

    Array3<float> img(g.shape());
    Array3<std::int32_t> lab(g.shape());
    for (std::int64_t i = 0; i < g.size(); ++i) {
        const Vec3 q = g.voxel_to_world(i) + psi[i];
        img[i] = float(atlas.intensity_at(q));
        lab[i] = atlas.label_at(q);
    }

    Mask tumour(g.shape(), 0);
    Vec3 centre = Vec3::Zero();
    if (spec.tumour_radius) {
        const double r = *spec.tumour_radius;
        const double core = atlas.shell_scale(spec.n_labels) * atlas.semi_axes().minCoeff() * 0.96;
        if (!(r > 0) || r >= core)
            throw std::invalid_argument("phantom: tumour larger than the innermost shell");
        std::mt19937_64 rng(seed ^ 0xabcdefull);
        std::uniform_real_distribution<double> u(-1, 1);
        const double room = core - r;
        Vec3 off(u(rng), u(rng), u(rng));
        off *= 0.5 * room / std::max(1.0, off.norm());
        const Vec3 atlas_point = atlas.centre() + off;
        centre = gt.forward.map_point(atlas_point);
        for (std::int64_t i = 0; i < g.size(); ++i)
            if ((g.voxel_to_world(i) - centre).norm() <= r) {
                tumour[i] = 1;
                img[i] = kTumourIntensity + float(0.5 * atlas.intensity_at(g.voxel_to_world(i) + psi[i]) -
                                                  0.5 * ShellPhantom::label_intensity(lab[i], spec.n_labels));
                lab[i] = 0;
            }
    }
    return {ImageVolume(std::move(img), g, "subject_" + std::to_string(subject_index)),
            LabelMap(std::move(lab), g), std::move(tumour), std::move(gt), centre};
}

// ---------------------------------------------------------------------------
// Collapse toy

struct CollapseToy {
    PhantomAtlas atlas;
    ImageVolume subject_image;
    LabelMap subject_labels;
    Mask tumour;
    Vec3 tumour_centre;
    double tumour_radius = 0;
    double collapsed_radius = 0;
    TransformPair preserving;
    TransformPair collapsing;
};

/// Two labels (a large ball with a small ball inside), a tumour hole in the
/// subject's large ball, the identity as the preserving transform, and a
/// radial field that squeezes the tumour into a ball of radius eps in atlas
/// space (the forward map stretches radius eps to the tumour radius).
inline CollapseToy make_collapse_toy()
{
    const auto g = SamplingGrid::centred({32, 32, 32}, 1.0);
    const double big = 13.0, small = 4.0, r = 4.0, eps = 2.0, blend = r + 4.0;
    const Vec3 small_c(-5.0, 0.0, 0.0), c(5.0, 0.0, 0.0);

    Array3<std::int32_t> al(g.shape(), 0);
    Array3<float> ai(g.shape(), 0.0f);
    for (std::int64_t i = 0; i < g.size(); ++i) {
        const Vec3 p = g.voxel_to_world(i);
        al[i] = (p - small_c).norm() <= small ? 2 : (p.norm() <= big ? 1 : 0);
        ai[i] = al[i] == 2 ? 0.9f : (al[i] == 1 ? 0.5f : 0.0f);
    }
    Array3<std::int32_t> sl = al;
    Array3<float> si = ai;
    Mask tumour(g.shape(), 0);
    for (std::int64_t i = 0; i < g.size(); ++i)
        if ((g.voxel_to_world(i) - c).norm() <= r) {
            tumour[i] = 1;
            sl[i] = 0;
            si[i] = kTumourIntensity;
        }

    // Radial profile of the forward (atlas -> subject) map around c and its inverse.
    auto fwd = [&](double s) {
        if (s <= eps)
            return s * r / eps;
        if (s <= blend)
            return r + (s - eps) * (blend - r) / (blend - eps);
        return s;
    };
    auto inv = [&](double t) {
        if (t <= r)
            return t * eps / r;
        if (t <= blend)
            return eps + (t - r) * (blend - eps) / (blend - r);
        return t;
    };
    DisplacementField uf(g), ui(g);
    for (std::int64_t i = 0; i < g.size(); ++i) {
        const Vec3 d = g.voxel_to_world(i) - c;
        const double s = d.norm();
        if (s > 0) {
            uf[i] = d * (fwd(s) / s - 1.0);
            ui[i] = d * (inv(s) / s - 1.0);
        }
    }
    CollapseToy toy;
    toy.atlas = {ImageVolume(ai, g, "toy_atlas"), LabelMap(al, g)};
    toy.subject_image = ImageVolume(si, g, "toy_subject");
    toy.subject_labels = LabelMap(sl, g);
    toy.tumour = std::move(tumour);
    toy.tumour_centre = c;
    toy.tumour_radius = r;
    toy.collapsed_radius = eps;
    toy.preserving = {DisplacementField(g), DisplacementField(g)};
    toy.collapsing = {std::move(uf), std::move(ui)};
    return toy;
}

} // namespace atlasreg
