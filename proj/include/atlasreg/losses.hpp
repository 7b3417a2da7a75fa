#pragma once

// Similarity, smoothness, and volume-preservation terms and the two composite
// objectives (general / forward-model and over-fitting / backward-model).
// Every term has an analytic gradient with respect to the displacement fields
// it reads; SvfIntegration::backward carries those on to the velocity field.

#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "atlasreg/distmap.hpp"
#include "atlasreg/field.hpp"
#include "atlasreg/volume.hpp"

namespace atlasreg {

struct LossWeights {
    double lambda1 = 0.098;
    double lambda2 = 2e-6;
    double lambda3 = 0.045;
    double lambda4 = 0.098;
    double gamma = 1.0;

    void validate() const
    {
        if (lambda1 < 0 || lambda2 < 0 || lambda3 < 0 || lambda4 < 0)
            throw std::invalid_argument("loss weights must be nonnegative");
        if (!(gamma > 0))
            throw std::invalid_argument("gamma must be positive");
    }
};

inline void to_json(nlohmann::json& j, const LossWeights& w)
{
    j = {{"lambda1", w.lambda1}, {"lambda2", w.lambda2}, {"lambda3", w.lambda3}, {"lambda4", w.lambda4},
         {"gamma", w.gamma}};
}
inline void from_json(const nlohmann::json& j, LossWeights& w)
{
    w.lambda1 = j.value("lambda1", w.lambda1);
    w.lambda2 = j.value("lambda2", w.lambda2);
    w.lambda3 = j.value("lambda3", w.lambda3);
    w.lambda4 = j.value("lambda4", w.lambda4);
    w.gamma = j.value("gamma", w.gamma);
}

enum class LossMode { general, overfit };

/// Unweighted components; `total` is their weighted sum.
struct LossReport {
    LossMode mode = LossMode::general;
    double total = 0.0;
    double sim = 0.0;
    double reg = 0.0;
    double pairwise_sim = 0.0;
    double vol = 0.0;
    bool degenerate = false;

    static double weighted_total(const LossReport& r, const LossWeights& w)
    {
        return w.lambda1 * r.sim + w.lambda2 * r.reg + w.lambda3 * r.pairwise_sim + w.lambda4 * r.vol;
    }
};

inline std::string to_string(LossMode m) { return m == LossMode::general ? "general" : "overfit"; }

inline nlohmann::json to_json(const LossReport& r, int epoch)
{
    return {{"epoch", epoch},          {"mode", to_string(r.mode)}, {"total", r.total},
            {"sim", r.sim},            {"reg", r.reg},              {"pairwise_sim", r.pairwise_sim},
            {"vol", r.vol},            {"degenerate", r.degenerate}};
}

// ---------------------------------------------------------------------------
// Similarity: negative global normalised cross-correlation

struct SimResult {
    double value = 0.0;
    bool degenerate = false; // zero variance in an operand
};

namespace detail {

struct NccState {
    double mean_a = 0, mean_b = 0, saa = 0, sbb = 0, sab = 0;
    bool degenerate = false;
};

inline NccState ncc_state(std::span<const double> a, std::span<const double> b)
{
    if (a.size() != b.size())
        throw std::invalid_argument("sim_loss: operand sizes differ");
    if (a.empty())
        throw std::invalid_argument("sim_loss: empty operands");
    NccState s;
    const double n = double(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        s.mean_a += a[i];
        s.mean_b += b[i];
    }
    s.mean_a /= n;
    s.mean_b /= n;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double x = a[i] - s.mean_a, y = b[i] - s.mean_b;
        s.saa += x * x;
        s.sbb += y * y;
        s.sab += x * y;
    }
    const double tiny_a = 1e-24 * n * (1.0 + s.mean_a * s.mean_a);
    const double tiny_b = 1e-24 * n * (1.0 + s.mean_b * s.mean_b);
    s.degenerate = s.saa <= tiny_a || s.sbb <= tiny_b;
    return s;
}

} // namespace detail

/// -NCC over the whole volume, in [-1, 1].
inline SimResult sim_loss(std::span<const double> a, std::span<const double> b)
{
    const auto s = detail::ncc_state(a, b);
    if (s.degenerate)
        return {0.0, true};
    return {-s.sab / std::sqrt(s.saa * s.sbb), false};
}

/// sim_loss plus d/da and d/db (either output may be null).
inline SimResult sim_loss_grad(std::span<const double> a, std::span<const double> b, std::vector<double>* grad_a,
                               std::vector<double>* grad_b)
{
    const auto s = detail::ncc_state(a, b);
    if (grad_a)
        grad_a->assign(a.size(), 0.0);
    if (grad_b)
        grad_b->assign(b.size(), 0.0);
    if (s.degenerate)
        return {0.0, true};
    const double norm = std::sqrt(s.saa * s.sbb);
    const double ncc = s.sab / norm;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double x = a[i] - s.mean_a, y = b[i] - s.mean_b;
        if (grad_a)
            (*grad_a)[i] = -(y / norm - ncc * x / s.saa);
        if (grad_b)
            (*grad_b)[i] = -(x / norm - ncc * y / s.sbb);
    }
    return {-ncc, false};
}

// ---------------------------------------------------------------------------
// Smoothness: sum over voxels of the squared forward-difference gradient

inline double reg_loss(const DisplacementField& u, std::vector<Vec3>* grad = nullptr)
{
    const Shape3& s = u.shape();
    const Vec3 sp = u.grid().spacing();
    if (grad)
        grad->assign(std::size_t(u.size()), Vec3::Zero());
    double total = 0.0;
    for (std::int64_t k = 0; k < s.nz; ++k)
        for (std::int64_t j = 0; j < s.ny; ++j)
            for (std::int64_t i = 0; i < s.nx; ++i) {
                const std::int64_t c[3] = {i, j, k};
                const std::int64_t here = s.index(i, j, k);
                for (int a = 0; a < 3; ++a) {
                    if (c[a] + 1 >= s[a])
                        continue;
                    const std::int64_t next = here + (a == 0 ? 1 : (a == 1 ? s.nx : s.nx * s.ny));
                    const Vec3 d = (u[next] - u[here]) / sp[a];
                    total += d.squaredNorm();
                    if (grad) {
                        const Vec3 g = 2.0 * d / sp[a];
                        (*grad)[std::size_t(next)] += g;
                        (*grad)[std::size_t(here)] -= g;
                    }
                }
            }
    return total;
}

// ---------------------------------------------------------------------------
// Volume preservation relative to the mean change of the containing label

inline constexpr double kJacobianFloor = 1e-6;

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Loss from precomputed determinants; optional dLoss/dJ.
inline double vol_loss_from_jacobian(const Array3<std::int32_t>& labels, const Array3<double>& det,
                                     Array3<double>* grad_det = nullptr)
{
    if (!(labels.shape() == det.shape()))
        throw std::invalid_argument("vol_loss: label map and field grids differ");
    const std::int64_t n = det.size();
    if (n == 0)
        throw std::invalid_argument("vol_loss: empty label map");

    std::map<std::int32_t, std::pair<double, std::int64_t>> acc;
    for (std::int64_t i = 0; i < n; ++i) {
        auto& a = acc[labels[i]];
        a.first += std::max(det[i], kJacobianFloor);
        a.second += 1;
    }
    std::map<std::int32_t, double> mean;
    for (const auto& [l, a] : acc)
        mean[l] = a.first / double(a.second);

    double loss = 0.0;
    std::vector<double> g_ratio(grad_det ? std::size_t(n) : 0);
    std::map<std::int32_t, double> g_mean;
    for (std::int64_t i = 0; i < n; ++i) {
        const double jc = std::max(det[i], kJacobianFloor);
        const double m = mean[labels[i]];
        const double r = jc / m;
        const double big = std::max(r, 1.0 / r);
        const double sg = sigmoid(5.0 * (big - 1.5));
        loss += sg;
        if (grad_det) {
            const double d_big = 5.0 * sg * (1.0 - sg) / double(n);
            const double d_r = r >= 1.0 ? d_big : -d_big / (r * r);
            g_ratio[std::size_t(i)] = d_r / m;
            g_mean[labels[i]] += d_r * (-jc / (m * m));
        }
    }
    if (grad_det) {
        *grad_det = Array3<double>(det.shape(), 0.0);
        for (std::int64_t i = 0; i < n; ++i) {
            if (det[i] <= kJacobianFloor)
                continue;
            const std::int32_t l = labels[i];
            (*grad_det)[i] = g_ratio[std::size_t(i)] + g_mean[l] / double(acc[l].second);
        }
    }
    return loss / double(n);
}

inline double vol_loss(const LabelMap& atlas_labels, const DisplacementField& u, std::vector<Vec3>* grad = nullptr)
{
    if (!atlas_labels.grid().same_as(u.grid()))
        throw std::invalid_argument("vol_loss: label map and field grids differ");
    const auto det = jacobian_determinant(u);
    if (!grad)
        return vol_loss_from_jacobian(atlas_labels.data(), det);
    Array3<double> g;
    const double v = vol_loss_from_jacobian(atlas_labels.data(), det, &g);
    *grad = jacobian_determinant_backward(u, g);
    return v;
}

// ---------------------------------------------------------------------------
// Warped distance maps

/// Distance map of a subject pulled into atlas space through x -> A^-1(x + u(x)).
/// `dvalue_du` receives the derivative of each value with respect to u at
/// that voxel.
inline std::vector<double> warp_to_atlas(const DistanceMap& subject, const AffineTransform& subject_to_atlas,
                                         const DisplacementField& u, std::vector<Vec3>* dvalue_du = nullptr)
{
    const auto& g = u.grid();
    const AffineTransform to_subject = subject_to_atlas.inverse();
    const Mat3 lin = to_subject.linear();
    const Mat3 w2v = subject.grid.world_to_voxel_jacobian();
    std::vector<double> out(std::size_t(g.size()));
    if (dvalue_du)
        dvalue_du->assign(std::size_t(g.size()), Vec3::Zero());
    for (std::int64_t i = 0; i < g.size(); ++i) {
        const Vec3 q = to_subject.apply(g.voxel_to_world(i) + u[i]);
        Vec3 dc;
        out[std::size_t(i)] = trilinear_with_gradient(subject.data, subject.grid.world_to_voxel(q), dc);
        if (dvalue_du)
            (*dvalue_du)[std::size_t(i)] = lin.transpose() * (w2v.transpose() * dc);
    }
    return out;
}

/// Atlas distance map pulled onto the subject grid through
/// y -> z + u_inv(z), z = A(y): the forward (image-space) model.
inline std::vector<double> warp_to_subject(const DistanceMap& atlas, const SamplingGrid& subject_grid,
                                           const AffineTransform& subject_to_atlas, const DisplacementField& u_inv)
{
    std::vector<double> out(std::size_t(subject_grid.size()));
    for (std::int64_t i = 0; i < subject_grid.size(); ++i) {
        const Vec3 z = subject_to_atlas.apply(subject_grid.voxel_to_world(i));
        const Vec3 q = z + u_inv.at_world(z);
        out[std::size_t(i)] = trilinear(atlas.data, atlas.grid.world_to_voxel(q));
    }
    return out;
}

inline void warp_to_subject_backward(const DistanceMap& atlas, const SamplingGrid& subject_grid,
                                     const AffineTransform& subject_to_atlas, const DisplacementField& u_inv,
                                     std::span<const double> grad_out, std::vector<Vec3>& grad_uinv)
{
    const Mat3 w2v_atlas = atlas.grid.world_to_voxel_jacobian();
    const auto& fg = u_inv.grid();
    for (std::int64_t i = 0; i < subject_grid.size(); ++i) {
        const double go = grad_out[std::size_t(i)];
        if (go == 0.0)
            continue;
        const Vec3 z = subject_to_atlas.apply(subject_grid.voxel_to_world(i));
        const auto s = trilinear_stencil(fg.shape(), fg.world_to_voxel(z));
        Vec3 disp = Vec3::Zero();
        for (int n = 0; n < 8; ++n)
            if (s.w[n] != 0.0)
                disp += s.w[n] * u_inv[s.idx[n]];
        Vec3 dc;
        trilinear_with_gradient(atlas.data, atlas.grid.world_to_voxel(z + disp), dc);
        const Vec3 dq = go * (w2v_atlas.transpose() * dc);
        for (int n = 0; n < 8; ++n)
            if (s.w[n] != 0.0)
                grad_uinv[std::size_t(s.idx[n])] += s.w[n] * dq;
    }
}

// ---------------------------------------------------------------------------
// Composite objectives

struct LossCase {
    const DistanceMap& subject;             // on the subject's native grid
    const AffineTransform& subject_to_atlas; // pre-alignment
    const DisplacementField& forward;       // T: atlas grid, atlas -> subject pull-back
    const DisplacementField& inverse;       // T^-1
};

struct AtlasRef {
    const LabelMap& labels;
    const DistanceMap& dist;
};

struct FieldGradients {
    std::vector<Vec3> forward;
    std::vector<Vec3> inverse;
};

/// Forward-model objective over a batch. Pairs j != i are ordered, so every
/// unordered pair contributes twice.
inline LossReport general_loss(std::span<const LossCase> cases, const AtlasRef& atlas, const LossWeights& w,
                               std::vector<FieldGradients>* grads = nullptr)
{
    if (cases.empty())
        throw std::invalid_argument("general_loss: empty batch");
    LossReport rep;
    rep.mode = LossMode::general;
    const std::size_t n = cases.size();
    if (grads) {
        grads->assign(n, {});
        for (std::size_t i = 0; i < n; ++i) {
            (*grads)[i].forward.assign(std::size_t(cases[i].forward.size()), Vec3::Zero());
            (*grads)[i].inverse.assign(std::size_t(cases[i].inverse.size()), Vec3::Zero());
        }
    }

    for (std::size_t i = 0; i < n; ++i) {
        const auto& c = cases[i];
        if (!c.forward.grid().same_as(atlas.dist.grid) || !c.inverse.grid().same_as(atlas.dist.grid))
            throw std::invalid_argument("general_loss: fields must live on the atlas grid");
        const auto warped_atlas = warp_to_subject(atlas.dist, c.subject.grid, c.subject_to_atlas, c.inverse);
        std::vector<double> g_warped;
        const auto s = sim_loss_grad(c.subject.data.values(), warped_atlas, nullptr, grads ? &g_warped : nullptr);
        rep.sim += s.value;
        rep.degenerate |= s.degenerate;
        if (grads && w.lambda1 != 0.0) {
            for (auto& g : g_warped)
                g *= w.lambda1;
            warp_to_subject_backward(atlas.dist, c.subject.grid, c.subject_to_atlas, c.inverse, g_warped,
                                     (*grads)[i].inverse);
        }
        std::vector<Vec3> g_reg;
        rep.reg += reg_loss(c.forward, grads ? &g_reg : nullptr);
        if (grads)
            for (std::size_t k = 0; k < g_reg.size(); ++k)
                (*grads)[i].forward[k] += w.lambda2 * g_reg[k];
    }

    if (n < 2) {
        // Empty pairwise sum.
        rep.pairwise_sim = 0.0;
    } else {
        std::vector<std::vector<double>> warped(n);
        std::vector<std::vector<Vec3>> dwarp(n);
        for (std::size_t i = 0; i < n; ++i)
            warped[i] = warp_to_atlas(cases[i].subject, cases[i].subject_to_atlas, cases[i].forward,
                                      grads ? &dwarp[i] : nullptr);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                if (i == j)
                    continue;
                std::vector<double> ga, gb;
                const auto s = sim_loss_grad(warped[i], warped[j], grads ? &ga : nullptr, grads ? &gb : nullptr);
                rep.pairwise_sim += s.value;
                rep.degenerate |= s.degenerate;
                if (grads && w.lambda3 != 0.0)
                    for (std::size_t k = 0; k < ga.size(); ++k) {
                        (*grads)[i].forward[k] += w.lambda3 * ga[k] * dwarp[i][k];
                        (*grads)[j].forward[k] += w.lambda3 * gb[k] * dwarp[j][k];
                    }
            }
    }
    rep.total = LossReport::weighted_total(rep, w);
    return rep;
}

/// Backward-model objective for one case. The volume term is skipped when
/// lambda4 is zero.
inline LossReport overfit_loss(const LossCase& c, const AtlasRef& atlas, const LossWeights& w,
                               FieldGradients* grads = nullptr)
{
    if (!c.forward.grid().same_as(atlas.dist.grid))
        throw std::invalid_argument("overfit_loss: fields must live on the atlas grid");
    LossReport rep;
    rep.mode = LossMode::overfit;
    if (grads) {
        grads->forward.assign(std::size_t(c.forward.size()), Vec3::Zero());
        grads->inverse.clear();
    }

    std::vector<Vec3> dwarp;
    const auto warped = warp_to_atlas(c.subject, c.subject_to_atlas, c.forward, grads ? &dwarp : nullptr);
    std::vector<double> gs;
    const auto s = sim_loss_grad(warped, atlas.dist.data.values(), grads ? &gs : nullptr, nullptr);
    rep.sim = s.value;
    rep.degenerate = s.degenerate;
    if (grads)
        for (std::size_t k = 0; k < gs.size(); ++k)
            grads->forward[k] += w.lambda1 * gs[k] * dwarp[k];

    std::vector<Vec3> g;
    rep.reg = reg_loss(c.forward, grads ? &g : nullptr);
    if (grads)
        for (std::size_t k = 0; k < g.size(); ++k)
            grads->forward[k] += w.lambda2 * g[k];

    if (w.lambda4 != 0.0) {
        rep.vol = vol_loss(atlas.labels, c.forward, grads ? &g : nullptr);
        if (grads)
            for (std::size_t k = 0; k < g.size(); ++k)
                grads->forward[k] += w.lambda4 * g[k];
    }
    rep.total = LossReport::weighted_total(rep, w);
    return rep;
}

} // namespace atlasreg
