#include <gtest/gtest.h>

#include <cmath>

#include "atlasreg/losses.hpp"
#include "atlasreg/metrics.hpp"
#include "atlasreg/phantom.hpp"

using namespace atlasreg;

TEST(Phantom, AtlasLabelsNestAndRegenerateIdentically)
{
    PhantomSpec spec;
    spec.grid = SamplingGrid::centred({32, 32, 32});
    spec.n_labels = 2;
    auto a = make_atlas(spec);
    EXPECT_EQ(a.labels.present_labels(), (std::vector<std::int32_t>{0, 1, 2}));
    spec.n_labels = 4;
    auto b = make_atlas(spec);
    std::vector<std::int64_t> vol(5, 0);
    for (auto l : b.labels.data())
        ++vol[std::size_t(l)];
    for (int k = 1; k < 4; ++k)
        EXPECT_GT(vol[std::size_t(k)], vol[std::size_t(k + 1)]);
    auto c = make_atlas(spec);
    EXPECT_EQ(b.image.data(), c.image.data());
    EXPECT_EQ(b.labels.data(), c.labels.data());
    spec.n_labels = 12;
    EXPECT_THROW(make_atlas(spec), std::invalid_argument);
}

TEST(Phantom, ZeroAmplitudeSubjectEqualsAtlas)
{
    PhantomSpec spec;
    spec.grid = SamplingGrid::centred({24, 24, 24});
    spec.deform_amplitude = 0;
    auto a = make_atlas(spec);
    auto s = make_subject(spec);
    EXPECT_EQ(s.labels.data(), a.labels.data());
    EXPECT_EQ(s.image.data(), a.image.data());
    EXPECT_EQ(count(s.tumour), 0);
}

TEST(Phantom, GroundTruthIsDiffeomorphicAndInverseConsistent)
{
    PhantomSpec spec;
    spec.grid = SamplingGrid::centred({32, 32, 32});
    spec.deform_amplitude = 3.0;
    auto s = make_subject(spec, 3);
    EXPECT_EQ(fraction_of_foldings(s.ground_truth.forward), 0.0);
    EXPECT_EQ(fraction_of_foldings(s.ground_truth.inverse), 0.0);
    EXPECT_NEAR(s.ground_truth.forward.max_norm(), 3.0, 0.3);
    auto round = compose(s.ground_truth.inverse, s.ground_truth.forward);
    double acc = 0;
    for (const auto& x : round.values())
        acc += x.norm();
    EXPECT_LT(acc / double(round.size()), 0.1);
}

TEST(Phantom, TumourVolumeMatchesSphere)
{
    PhantomSpec spec;
    spec.grid = SamplingGrid::centred({40, 40, 40});
    spec.tumour_radius = 4.0;
    auto s = make_subject(spec, 1);
    const double expect = 4.0 / 3.0 * M_PI * 64.0;
    EXPECT_NEAR(double(count(s.tumour)), expect, 0.1 * expect);
    for (std::int64_t i = 0; i < s.tumour.size(); ++i)
        if (s.tumour[i]) {
            EXPECT_EQ(s.labels.data()[i], 0);
            EXPECT_GT(s.image.data()[i], 1.3f);
        }
    spec.tumour_radius = 15.0;
    EXPECT_THROW(make_subject(spec, 1), std::invalid_argument);
}

TEST(Phantom, GroundTruthRoundTripRecoversAtlasLabels)
{
    PhantomSpec spec;
    spec.grid = SamplingGrid::centred({48, 48, 48});
    spec.n_labels = 3;
    spec.deform_amplitude = 4.0;
    spec.deform_smoothness = 8.0;
    ShellPhantom shells(spec);
    auto a = make_atlas(spec);
    const auto& g = a.labels.grid();
    for (int idx = 0; idx < 3; ++idx) {
        auto s = make_subject(spec, idx);
        // Continuous round trip: atlas point -> subject point -> back through the
        // generating map, labelled analytically.
        Array3<std::int32_t> exact(g.shape());
        for (std::int64_t i = 0; i < g.size(); ++i) {
            const Vec3 y = s.ground_truth.forward.map_point(g.voxel_to_world(i));
            exact[i] = shells.label_at(s.ground_truth.inverse.map_point(y));
        }
        EXPECT_GT(label_metrics(a.labels, exact).mean_dsc(), 0.99) << "subject " << idx;
        // Nearest-neighbour resampling of the stored labels loses roughly a
        // quarter voxel per surface, which is about 5% Dice on 5 mm shells.
        auto warped = sample(s.labels, g, compose_chain({as_part(s.ground_truth.forward)}));
        auto affine = sample(s.labels, g, compose_chain({AffineTransform()}));
        const double d_gt = label_metrics(a.labels, warped).mean_dsc();
        EXPECT_GT(d_gt, 0.93) << "subject " << idx;
        EXPECT_GT(d_gt, label_metrics(a.labels, affine).mean_dsc() + 0.05) << "subject " << idx;
    }
}

TEST(CollapseToy, ConstructedVolumeFactors)
{
    auto toy = make_collapse_toy();
    LabelMap tumour(Array3<std::int32_t>(toy.tumour.shape(), std::vector<std::int32_t>(toy.tumour.begin(), toy.tumour.end())),
                    toy.subject_labels.grid());
    const auto& g = toy.atlas.labels.grid();
    const double keep = tumour_volume_factor(tumour, g, compose_chain({as_part(toy.preserving.forward)}));
    const double squash = tumour_volume_factor(tumour, g, compose_chain({as_part(toy.collapsing.forward)}));
    EXPECT_GE(keep, 0.9);
    EXPECT_LE(keep, 1.1);
    EXPECT_LT(squash, 0.2);
    EXPECT_EQ(fraction_of_foldings(toy.collapsing.forward), 0.0);
}

TEST(CollapseToy, AtlasSpaceFavoursCollapseImageSpaceDoesNot)
{
    auto toy = make_collapse_toy();
    LossWeights w; // default weights
    auto da = distance_map(toy.atlas.labels, w.gamma);
    auto ds = distance_map(toy.subject_labels, w.gamma);
    AffineTransform id;
    auto atlas_sim = [&](const TransformPair& t) {
        return overfit_loss({ds, id, t.forward, t.inverse}, {toy.atlas.labels, da}, w).sim;
    };
    auto image_total = [&](const TransformPair& t) {
        std::vector<LossCase> cs{{ds, id, t.forward, t.inverse}};
        return general_loss(cs, {toy.atlas.labels, da}, w).total;
    };
    EXPECT_LT(atlas_sim(toy.collapsing), atlas_sim(toy.preserving));
    EXPECT_GT(image_total(toy.collapsing), image_total(toy.preserving));
}
