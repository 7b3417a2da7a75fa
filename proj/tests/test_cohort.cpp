#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "atlasreg/cohort.hpp"
#include "atlasreg/phantom.hpp"

using namespace atlasreg;

namespace {

// Left half of the grid is label 1, right half label 2 (equal volumes).
LabelMap two_halves(std::int64_t n = 20)
{
    const auto g = SamplingGrid::centred({n, n, n});
    Array3<std::int32_t> a(g.shape());
    for (std::int64_t i = 0; i < g.size(); ++i)
        a[i] = g.voxel_to_world(i).x() < 0 ? 1 : 2;
    return LabelMap(a, g, {{1, "A"}, {2, "B"}});
}

MetastasisRecord record_at(const Vec3& p, const LabelMap& labels, int id = 1)
{
    MetastasisRecord r;
    r.case_id = "c";
    r.lesion_id = id;
    r.barycentre_atlas = p;
    r.volume_mm3 = 1;
    r.region_label = label_at_point(labels, p);
    return r;
}

RegionStats counts(const std::string& name, std::int64_t measured, double expected)
{
    RegionStats s;
    s.region = name;
    s.measured = measured;
    s.expected = expected;
    return s;
}

} // namespace

TEST(LabelTables, AnatomicalAndArterialStructure)
{
    const auto anat = seganat_table();
    EXPECT_EQ(anat.size(), 35u);
    EXPECT_EQ(anat.count(0), 0u);
    EXPECT_EQ(anat.at(3).region, "Cerebral Cortex");
    EXPECT_EQ(anat.at(42).hemisphere, 'R');
    EXPECT_EQ(anat.at(16).hemisphere, 0);

    const auto art = segart_table();
    EXPECT_EQ(art.size(), 32u);
    std::size_t ant = 0, post = 0;
    for (const auto& [id, info] : art) {
        EXPECT_GE(id, 1);
        EXPECT_LE(id, 32);
        // Every territory belongs to exactly one pooled group.
        EXPECT_TRUE((info.group == "anterior") != (info.group == "posterior")) << info.name;
        ant += info.group == "anterior";
        post += info.group == "posterior";
    }
    EXPECT_EQ(ant + post, 32u);
}

TEST(MapLesions, SphereBarycentreAndTwoComponents)
{
    const auto g = SamplingGrid::centred({24, 24, 24});
    const auto atlas = two_halves(24);
    Mask t(g.shape(), 0);
    const Vec3 c1(-5.5, 2.5, 0.5), c2(6.5, -4.5, 3.5);
    std::int64_t n1 = 0, n2 = 0;
    for (std::int64_t i = 0; i < g.size(); ++i) {
        const Vec3 p = g.voxel_to_world(i);
        if ((p - c1).norm() <= 3.0) {
            t[i] = 1;
            ++n1;
        } else if ((p - c2).norm() <= 2.0) {
            t[i] = 1;
            ++n2;
        }
    }
    // Perfusion is a linear ramp along x.
    Array3<float> ramp(g.shape());
    for (std::int64_t i = 0; i < g.size(); ++i)
        ramp[i] = float(0.1 * g.voxel_to_world(i).x() + 2.0);
    const ImageVolume perf(ramp, g);

    const auto recs = map_lesions("case", t, g, compose_chain({AffineTransform()}), atlas, nullptr, &perf);
    ASSERT_EQ(recs.size(), 2u);
    const auto& a = recs[0].barycentre_atlas.x() < 0 ? recs[0] : recs[1];
    const auto& b = recs[0].barycentre_atlas.x() < 0 ? recs[1] : recs[0];
    EXPECT_LT((a.barycentre_atlas - c1).norm(), 0.5);
    EXPECT_LT((b.barycentre_atlas - c2).norm(), 0.5);
    EXPECT_DOUBLE_EQ(a.volume_mm3, double(n1));
    EXPECT_DOUBLE_EQ(b.volume_mm3, double(n2));
    EXPECT_EQ(a.region_label, 1);
    EXPECT_EQ(b.region_label, 2);
    EXPECT_NEAR(*a.perfusion_median, 0.1 * c1.x() + 2.0, 0.1);
    EXPECT_LE(*a.perfusion_min, *a.perfusion_median);
    EXPECT_GE(*a.perfusion_max, *a.perfusion_median);
    EXPECT_FALSE(a.flagged);

    // Moving the lesions out of the atlas field of view flags them.
    const auto away = map_lesions("case", t, g, compose_chain({AffineTransform::translation(Vec3(100, 0, 0))}), atlas);
    ASSERT_EQ(away.size(), 2u);
    EXPECT_TRUE(away[0].flagged);
}

TEST(MapLesions, DiagonalNeighboursFormOneLesion)
{
    Mask m({5, 5, 5}, 0);
    m(1, 1, 1) = m(2, 2, 2) = m(3, 3, 3) = 1;
    m(0, 4, 0) = 1;
    int n = 0;
    const auto c = connected_components(m, &n);
    EXPECT_EQ(n, 2);
    EXPECT_EQ(c(1, 1, 1), c(3, 3, 3));
    EXPECT_NE(c(1, 1, 1), c(0, 4, 0));
}

TEST(RegionFrequencies, AllInOneOfTwoEqualRegions)
{
    const auto atlas = two_halves();
    std::vector<MetastasisRecord> recs;
    for (int i = 0; i < 10; ++i)
        recs.push_back(record_at(Vec3(-5, 0.5 * i - 2, 0), atlas, i));
    const auto table = table_from_labels(atlas);
    auto st = region_frequencies(recs, atlas, table);
    ASSERT_EQ(st.size(), 2u);
    EXPECT_EQ(st[0].region, "A");
    EXPECT_EQ(st[0].measured, 10);
    EXPECT_EQ(st[1].measured, 0);
    EXPECT_DOUBLE_EQ(st[0].expected, 5.0);
    EXPECT_DOUBLE_EQ(st[1].expected, 5.0);

    std::reverse(recs.begin(), recs.end());
    auto again = region_frequencies(recs, atlas, table);
    EXPECT_EQ(again[0].measured, st[0].measured);
    EXPECT_DOUBLE_EQ(again[0].expected, st[0].expected);
}

TEST(RegionFrequencies, UniformBarycentresStayNearExpectation)
{
    auto spec = PhantomSpec{};
    spec.grid = SamplingGrid::centred({32, 32, 32});
    const auto atlas = make_atlas(spec).labels;
    std::mt19937_64 rng(11);
    const auto pts = sample_uniform_points(atlas.foreground(), atlas.grid(), 1000, rng);
    std::vector<MetastasisRecord> recs;
    for (const auto& p : pts)
        recs.push_back(record_at(p, atlas));
    const auto st = region_frequencies(recs, atlas, table_from_labels(atlas));
    double sum_m = 0, sum_e = 0;
    for (const auto& s : st) {
        const double sd = std::sqrt(s.expected * (1 - s.expected / 1000.0));
        EXPECT_LE(std::abs(double(s.measured) - s.expected), 3 * sd) << s.region;
        sum_m += double(s.measured);
        sum_e += s.expected;
    }
    EXPECT_NEAR(sum_m, sum_e, 1e-9);
    for (const auto& s : chi_square_regions(st))
        EXPECT_FALSE(s.significant) << s.region;
}

TEST(ChiSquareRegions, EqualCountsAreNotSignificant)
{
    std::vector<RegionStats> st{counts("a", 50, 50), counts("b", 30, 30), counts("c", 20, 20)};
    for (const auto& s : chi_square_regions(st)) {
        EXPECT_TRUE(s.tested);
        EXPECT_FALSE(s.significant);
        EXPECT_DOUBLE_EQ(*s.p_value, 1.0);
    }
}

TEST(ChiSquareRegions, CombinedCohortCountsFlagCortexWhiteMatterPutamen)
{
    const std::vector<RegionStats> st{
        counts("Cerebral White Matter", 131, 194), counts("Cerebral Cortex", 309, 224),
        counts("Lateral Ventricle", 0, 7),         counts("Inferior Lateral Ventricle", 1, 0),
        counts("Cerebellum White Matter", 6, 11),  counts("Cerebellum Cortex", 36, 45),
        counts("Thalamus", 5, 6),                  counts("Caudate", 3, 3),
        counts("Putamen", 20, 5),                  counts("Pallidum", 1, 1),
        counts("3rd Ventricle", 0, 0),             counts("4th Ventricle", 1, 1),
        counts("Brain Stem", 2, 8),                counts("Hippocampus", 0, 4),
        counts("Amygdala", 0, 1),                  counts("Accumbens Area", 0, 1),
        counts("Ventral Diencephalon", 1, 3),      counts("Vessel", 0, 0),
        counts("Choroid Plexus", 1, 1)};
    const auto out = chi_square_regions(st, 0.01, 5.0);
    std::vector<std::string> flagged;
    int tested = 0;
    for (const auto& s : out) {
        tested += s.tested;
        if (s.significant)
            flagged.push_back(s.region);
    }
    EXPECT_EQ(tested, 8);
    EXPECT_EQ(flagged, (std::vector<std::string>{"Cerebral White Matter", "Cerebral Cortex", "Putamen"}));
}

TEST(JitterCi, ZeroShiftDeepPointAndBoundarySplit)
{
    const auto atlas = two_halves(24);
    const auto table = table_from_labels(atlas);
    std::vector<MetastasisRecord> recs{record_at(Vec3(-6, 0.3, 0.2), atlas), record_at(Vec3(6, 1, -2), atlas),
                                       record_at(Vec3(0.2, 0, 0), atlas)};
    auto base = region_frequencies(recs, atlas, table);
    auto z = jitter_ci(base, recs, atlas, table, 50, 0.0, 0.0, 1);
    for (const auto& s : z) {
        EXPECT_DOUBLE_EQ(*s.ci_low, double(s.measured));
        EXPECT_DOUBLE_EQ(*s.ci_high, double(s.measured));
    }
    // Far from the boundary a 1 +- 0.5 mm shift never changes the region.
    std::vector<MetastasisRecord> deep{record_at(Vec3(-6, 0, 0), atlas)};
    auto d = jitter_ci(region_frequencies(deep, atlas, table), deep, atlas, table, 100, 1.0, 0.5, 2);
    EXPECT_DOUBLE_EQ(*d[0].ci_low, 1.0);
    EXPECT_DOUBLE_EQ(*d[0].ci_high, 1.0);

    // 100 barycentres on the dividing plane: each replicate count of region A
    // is Binomial(100, 1/2), whose central 95% range is about [40, 60].
    std::vector<MetastasisRecord> edge;
    for (int i = 0; i < 100; ++i) {
        auto r = record_at(Vec3(0.0, -5 + 0.1 * i, 0.0), atlas, i);
        r.region_label = 1;
        edge.push_back(r);
    }
    auto e = jitter_ci(region_frequencies(edge, atlas, table), edge, atlas, table, 400, 1.0, 0.5, 3);
    EXPECT_NEAR(*e[0].ci_low, 40.0, 4.0);
    EXPECT_NEAR(*e[0].ci_high, 60.0, 4.0);
}

TEST(HemisphereSymmetry, BalancedAndExtremeSplits)
{
    const auto g = SamplingGrid::centred({20, 20, 20});
    Array3<std::int32_t> a(g.shape());
    for (std::int64_t i = 0; i < g.size(); ++i)
        a[i] = g.voxel_to_world(i).x() < 0 ? 2 : 41; // white matter left / right
    const LabelMap atlas(a, g);
    const auto table = seganat_table();
    std::vector<MetastasisRecord> recs;
    for (int i = 0; i < 5; ++i) {
        recs.push_back(record_at(Vec3(-4, i, 0), atlas));
        recs.push_back(record_at(Vec3(4, i, 0), atlas));
    }
    auto h = hemisphere_symmetry_test(recs, atlas, table);
    const auto wm = std::find_if(h.begin(), h.end(), [](auto& x) { return x.region == "Cerebral White Matter"; });
    ASSERT_NE(wm, h.end());
    EXPECT_DOUBLE_EQ(wm->p_value, 1.0);

    recs.clear();
    for (int i = 0; i < 10; ++i)
        recs.push_back(record_at(Vec3(-4, 0.5 * i, 0), atlas));
    h = hemisphere_symmetry_test(recs, atlas, table);
    const auto wm2 = std::find_if(h.begin(), h.end(), [](auto& x) { return x.region == "Cerebral White Matter"; });
    EXPECT_EQ(wm2->left, 10);
    EXPECT_NEAR(wm2->p_value, 2.0 * std::pow(0.5, 10), 1e-12);
}

TEST(ArterialFrequencies, PooledCountsSumMemberTerritories)
{
    const auto g = SamplingGrid::centred({16, 16, 32});
    Array3<std::int32_t> a(g.shape());
    for (std::int64_t i = 0; i < g.size(); ++i) {
        a[i] = std::int32_t(g.shape().unravel(i)[2] + 1); // 32 slabs, one per territory id
    }
    const LabelMap art(a, g);
    std::mt19937_64 rng(2);
    std::vector<MetastasisRecord> recs;
    for (const auto& p : sample_uniform_points(Mask(g.shape(), 1), g, 300, rng)) {
        MetastasisRecord r;
        r.barycentre_atlas = p;
        r.region_label = 1;
        r.arterial_label = label_at_point(art, p);
        recs.push_back(r);
    }
    const auto table = segart_table();
    const auto fine = region_frequencies(recs, art, table, RecordLabel::arterial);
    const auto pooled = region_frequencies(recs, art, table, RecordLabel::arterial, true);
    ASSERT_EQ(pooled.size(), 2u);
    std::map<std::string, std::int64_t> sum;
    for (const auto& s : fine)
        sum[table.at(s.labels.front()).group] += s.measured;
    for (const auto& s : pooled)
        EXPECT_EQ(s.measured, sum[s.region]) << s.region;

    // Family-wise false positive rate under uniform placement stays near alpha.
    int runs_flagged = 0;
    for (std::uint64_t seed = 10; seed < 50; ++seed) {
        std::mt19937_64 r2(seed);
        std::vector<MetastasisRecord> u;
        for (const auto& p : sample_uniform_points(Mask(g.shape(), 1), g, 300, r2)) {
            MetastasisRecord m;
            m.barycentre_atlas = p;
            m.arterial_label = label_at_point(art, p);
            u.push_back(m);
        }
        bool any = false;
        for (const auto& s : chi_square_regions(region_frequencies(u, art, table, RecordLabel::arterial)))
            any = any || s.significant;
        runs_flagged += any;
    }
    EXPECT_LE(runs_flagged, 4);
}

TEST(JunctionAnalysis, UniformLesionsNullAndJunctionLesionsExtreme)
{
    auto spec = PhantomSpec{};
    spec.grid = SamplingGrid::centred({32, 32, 32});
    const auto atlas = make_atlas(spec).labels;
    const auto& g = atlas.grid();
    const auto junction = junction_surface(atlas, {1}, {2});
    const auto brain = atlas.foreground();

    std::vector<double> ps;
    for (int run = 0; run < 20; ++run) {
        std::mt19937_64 rng(100 + std::uint64_t(run));
        const auto pts = sample_uniform_points(brain, g, 40, rng);
        ps.push_back(junction_analysis(pts, junction, brain, g, 200, std::uint64_t(run)).p_value);
    }
    EXPECT_GT(stats::median(ps), 0.05);

    std::vector<Vec3> on;
    for (std::int64_t i = 0; i < g.size() && on.size() < 40; i += 7)
        if (junction[i])
            on.push_back(g.voxel_to_world(i));
    const auto r = junction_analysis(on, junction, brain, g, 200, 9);
    EXPECT_LT(r.p_value, 0.01);
    EXPECT_LT(*std::max_element(r.tumour_distances.begin(), r.tumour_distances.end()), 1e-9);
    EXPECT_FALSE(r.unstable);
    EXPECT_TRUE(junction_analysis(on, junction, brain, g, 20, 9).unstable);
    double area = 0;
    for (std::size_t b = 0; b < r.density_random.size(); ++b)
        area += r.density_random[b] * (r.bin_edges[b + 1] - r.bin_edges[b]);
    EXPECT_NEAR(area, 1.0, 1e-9);
}
