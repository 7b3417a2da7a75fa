#include <gtest/gtest.h>

#include <random>

#include "atlasreg/volume.hpp"

using namespace atlasreg;

namespace {

Mat3 rotation(double ax, double ay, double az)
{
    return (Eigen::AngleAxisd(az, Vec3::UnitZ()) * Eigen::AngleAxisd(ay, Vec3::UnitY()) *
            Eigen::AngleAxisd(ax, Vec3::UnitX()))
        .toRotationMatrix();
}

} // namespace

TEST(Shape3, FlatIndexIsXFastest)
{
    Shape3 s{4, 3, 2};
    EXPECT_EQ(s.size(), 24);
    EXPECT_EQ(s.index(1, 0, 0), 1);
    EXPECT_EQ(s.index(0, 1, 0), 4);
    EXPECT_EQ(s.index(0, 0, 1), 12);
    for (std::int64_t f = 0; f < s.size(); ++f) {
        auto [i, j, k] = s.unravel(f);
        EXPECT_EQ(s.index(i, j, k), f);
    }
}

TEST(SamplingGrid, RejectsBadGeometry)
{
    EXPECT_THROW(SamplingGrid({0, 2, 2}, Vec3::Ones()), GeometryError);
    EXPECT_THROW(SamplingGrid({2, 2, 2}, Vec3(1, -1, 1)), GeometryError);
    Mat3 skew = Mat3::Identity();
    skew(0, 1) = 0.3;
    EXPECT_THROW(SamplingGrid({2, 2, 2}, Vec3::Ones(), skew), GeometryError);
}

TEST(SamplingGrid, WorldVoxelRoundTrip)
{
    SamplingGrid g({5, 6, 7}, Vec3(0.8, 1.2, 2.0), rotation(0.3, -0.2, 0.7), Vec3(10, -4, 3));
    std::mt19937 rng(3);
    std::uniform_real_distribution<double> u(-2, 8);
    for (int t = 0; t < 50; ++t) {
        Vec3 c(u(rng), u(rng), u(rng));
        EXPECT_LT((g.world_to_voxel(g.voxel_to_world(c)) - c).norm(), 1e-12);
    }
    const Mat4 m = g.voxel_to_world_matrix();
    const Vec3 c(1, 2, 3);
    EXPECT_LT(((m * c.homogeneous()).head<3>() - g.voxel_to_world(c)).norm(), 1e-12);
    EXPECT_LT((g.world_to_voxel_jacobian() * g.linear() - Mat3::Identity()).norm(), 1e-12);
}

TEST(SamplingGrid, CentredPlacesMiddleVoxelAtOrigin)
{
    auto g = SamplingGrid::centred({5, 5, 5}, 2.0);
    EXPECT_LT(g.voxel_to_world(2, 2, 2).norm(), 1e-12);
    EXPECT_DOUBLE_EQ(g.voxel_volume(), 8.0);
}

TEST(Trilinear, ExactAtNodesAndForAffineFunctions)
{
    Shape3 s{4, 5, 6};
    Array3<double> a(s);
    for (std::int64_t k = 0; k < s.nz; ++k)
        for (std::int64_t j = 0; j < s.ny; ++j)
            for (std::int64_t i = 0; i < s.nx; ++i)
                a(i, j, k) = 2.0 * i - 3.0 * j + 0.5 * k + 1.0;
    EXPECT_DOUBLE_EQ(trilinear(a, Vec3(2, 3, 4)), a(2, 3, 4));
    Vec3 grad;
    const double v = trilinear_with_gradient(a, Vec3(1.3, 2.6, 3.1), grad);
    EXPECT_NEAR(v, 2.0 * 1.3 - 3.0 * 2.6 + 0.5 * 3.1 + 1.0, 1e-12);
    EXPECT_NEAR(grad.x(), 2.0, 1e-12);
    EXPECT_NEAR(grad.y(), -3.0, 1e-12);
    EXPECT_NEAR(grad.z(), 0.5, 1e-12);
}

TEST(Trilinear, ClampsToEdgeWithZeroGradientOutside)
{
    Shape3 s{3, 3, 3};
    Array3<double> a(s);
    for (std::int64_t f = 0; f < a.size(); ++f)
        a[f] = double(f);
    Vec3 grad;
    const double v = trilinear_with_gradient(a, Vec3(-1.0, 1.0, 1.0), grad);
    EXPECT_DOUBLE_EQ(v, a(0, 1, 1));
    EXPECT_DOUBLE_EQ(grad.x(), 0.0);
    EXPECT_NEAR(grad.y(), 3.0, 1e-12);
    EXPECT_TRUE(inside_field(s, Vec3(-0.5, 2.5, 0)));
    EXPECT_FALSE(inside_field(s, Vec3(-0.51, 0, 0)));
}

TEST(Nearest, RoundsAndRejectsOutside)
{
    Shape3 s{3, 3, 3};
    std::int64_t idx = -1;
    ASSERT_TRUE(nearest_index(s, Vec3(1.4, 0.6, 2.0), idx));
    EXPECT_EQ(idx, s.index(1, 1, 2));
    EXPECT_FALSE(nearest_index(s, Vec3(2.6, 0, 0), idx));
}

TEST(Affine, ValidationInverseAndComposition)
{
    Mat4 bad = Mat4::Identity();
    bad(3, 0) = 1.0;
    EXPECT_THROW(AffineTransform{bad}, GeometryError);
    Mat4 sing = Mat4::Identity();
    sing(2, 2) = 0.0;
    EXPECT_THROW(AffineTransform{sing}, GeometryError);

    Mat4 m = Mat4::Identity();
    m.topLeftCorner<3, 3>() = 1.1 * rotation(0.1, 0.2, 0.3);
    m.topRightCorner<3, 1>() = Vec3(1, 2, 3);
    AffineTransform a(m);
    const Vec3 p(4, -5, 6);
    EXPECT_LT((a.inverse().apply(a.apply(p)) - p).norm(), 1e-12);
    auto t = AffineTransform::translation(Vec3(1, 0, 0));
    EXPECT_LT((t.after(a).apply(p) - (a.apply(p) + Vec3(1, 0, 0))).norm(), 1e-12);
}

TEST(TransformChain, AppliesLastPartFirst)
{
    auto scale = AffineTransform(Vec3(2, 2, 2).homogeneous().asDiagonal().toDenseMatrix());
    auto shift = AffineTransform::translation(Vec3(1, 0, 0));
    auto chain = compose_chain({scale, shift});
    // scale(shift(p))
    EXPECT_LT((chain(Vec3(1, 1, 1)) - Vec3(4, 2, 2)).norm(), 1e-12);
    EXPECT_LT((chain.simplified()(Vec3(1, 1, 1)) - Vec3(4, 2, 2)).norm(), 1e-12);
    EXPECT_EQ(chain.simplified().parts().size(), 1u);

    auto g = SamplingGrid::centred({5, 5, 5});
    DisplacementField u(g);
    for (auto& v : u.values())
        v = Vec3(0.5, 0, 0);
    auto c2 = compose_chain({shift, as_part(u)});
    EXPECT_LT((c2(Vec3(0, 0, 0)) - Vec3(1.5, 0, 0)).norm(), 1e-12);
    EXPECT_THROW(compose_chain({}), std::invalid_argument);
}

TEST(Sample, IdentityIsExactCopyAndCountsOnePass)
{
    auto g = SamplingGrid::centred({6, 5, 4}, 1.5);
    Array3<float> d(g.shape());
    for (std::int64_t i = 0; i < d.size(); ++i)
        d[i] = float(i % 7) - 2.0f;
    ImageVolume img(d, g);
    const auto before = interpolation_passes().load();
    DisplacementField zero(g);
    auto out = sample(img, g, compose_chain({AffineTransform(), as_part(zero), AffineTransform()}));
    EXPECT_EQ(interpolation_passes().load() - before, 1u);
    EXPECT_EQ(out, d);

    Array3<std::int32_t> l(g.shape());
    for (std::int64_t i = 0; i < l.size(); ++i)
        l[i] = std::int32_t(i % 3);
    LabelMap lm(l, g);
    EXPECT_EQ(sample(lm, g, TransformChain{}), l);
}

TEST(Sample, OutsideIsZeroAndDisjointEmptyChainThrows)
{
    auto g = SamplingGrid::centred({4, 4, 4});
    ImageVolume img(Array3<float>(g.shape(), 1.0f), g);
    auto out = sample(img, g, compose_chain({AffineTransform::translation(Vec3(3.0, 0, 0))}));
    EXPECT_EQ(out(0, 0, 0), 1.0f);
    EXPECT_EQ(out(3, 0, 0), 0.0f);

    SamplingGrid far({4, 4, 4}, Vec3::Ones(), Mat3::Identity(), Vec3(100, 0, 0));
    EXPECT_THROW(sample(img, far, TransformChain{}), GeometryError);
}

TEST(MomentInit, RecoversScalingAndTranslation)
{
    auto g = SamplingGrid::centred({40, 40, 40});
    // Atlas: axis-aligned ellipsoid; subject = atlas pulled back through a
    // known anisotropic scaling plus shift.
    const Vec3 radii(12, 9, 7);
    const Vec3 scale(1.1, 0.9, 1.05), shift(2, -1, 1.5);
    Array3<std::int32_t> a(g.shape(), 0), s(g.shape(), 0);
    for (std::int64_t i = 0; i < a.size(); ++i) {
        const Vec3 p = g.voxel_to_world(i);
        a[i] = p.cwiseQuotient(radii).squaredNorm() <= 1.0;
        const Vec3 q = scale.cwiseProduct(p) + shift; // subject point -> atlas point
        s[i] = q.cwiseQuotient(radii).squaredNorm() <= 1.0;
    }
    auto m = moment_affine_init(LabelMap(s, g), LabelMap(a, g));
    EXPECT_NEAR(m.linear()(0, 0), scale.x(), 0.03);
    EXPECT_NEAR(m.linear()(1, 1), scale.y(), 0.03);
    EXPECT_NEAR(m.linear()(2, 2), scale.z(), 0.03);
    EXPECT_LT((m.offset() - shift).norm(), 0.3);
    EXPECT_THROW(moment_affine_init(LabelMap(Array3<std::int32_t>(g.shape(), 0), g), LabelMap(a, g)),
                 std::invalid_argument);
}
