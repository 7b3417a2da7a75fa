#pragma once

// Atlas-space lesion statistics: lesion mapping, region frequencies against a
// volume-corrected uniform expectation, chi-square with Bonferroni
// correction, barycentre jitter intervals, hemisphere symmetry, and the
// junction-distance earth mover's analysis.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "atlasreg/distmap.hpp"
#include "atlasreg/edt.hpp"
#include "atlasreg/stats.hpp"
#include "atlasreg/volume.hpp"

namespace atlasreg {

// ---------------------------------------------------------------------------
// Label tables

struct RegionInfo {
    std::string name;   // structure name including side
    std::string region; // name with the side removed; hemispheres pool here
    char hemisphere = 0; // 'L', 'R', or 0
    std::string group;  // coarse pooling (arterial: anterior / posterior)
};

using RegionTable = std::map<std::int32_t, RegionInfo>;

namespace detail {

inline void add_pair(RegionTable& t, std::int32_t left, std::int32_t right, const std::string& region,
                     const std::string& group = {})
{
    t[left] = {region + " Left", region, 'L', group};
    t[right] = {region + " Right", region, 'R', group};
}

} // namespace detail

/// Anatomical structures with FreeSurfer label ids.
inline RegionTable seganat_table()
{
    RegionTable t;
    using detail::add_pair;
    add_pair(t, 2, 41, "Cerebral White Matter");
    add_pair(t, 3, 42, "Cerebral Cortex");
    add_pair(t, 4, 43, "Lateral Ventricle");
    add_pair(t, 5, 44, "Inferior Lateral Ventricle");
    add_pair(t, 7, 46, "Cerebellum White Matter");
    add_pair(t, 8, 47, "Cerebellum Cortex");
    add_pair(t, 10, 49, "Thalamus");
    add_pair(t, 11, 50, "Caudate");
    add_pair(t, 12, 51, "Putamen");
    add_pair(t, 13, 52, "Pallidum");
    t[14] = {"3rd Ventricle", "3rd Ventricle", 0, {}};
    t[15] = {"4th Ventricle", "4th Ventricle", 0, {}};
    t[16] = {"Brain Stem", "Brain Stem", 0, {}};
    add_pair(t, 17, 53, "Hippocampus");
    add_pair(t, 18, 54, "Amygdala");
    add_pair(t, 26, 58, "Accumbens Area");
    add_pair(t, 28, 60, "Ventral Diencephalon");
    add_pair(t, 30, 62, "Vessel");
    add_pair(t, 31, 63, "Choroid Plexus");
    return t;
}

inline const std::set<std::int32_t>& seganat_cortex() { static const std::set<std::int32_t> s{3, 42}; return s; }
inline const std::set<std::int32_t>& seganat_white_matter() { static const std::set<std::int32_t> s{2, 41}; return s; }

/// Arterial territories: territory k (1..16) has left id 2k-1, right id 2k.
inline RegionTable segart_table()
{
    static const std::array<std::pair<const char*, const char*>, 16> territories{{
        {"Anterior Cerebral Artery", "anterior"},
        {"Medial Lenticulostriate", "anterior"},
        {"Lateral Lenticulostriate", "anterior"},
        {"Frontal Pars of Middle Cerebral Artery", "anterior"},
        {"Parietal Pars of Middle Cerebral Artery", "anterior"},
        {"Temporal Pars of Middle Cerebral Artery", "anterior"},
        {"Occipital Pars of Middle Cerebral Artery", "anterior"},
        {"Insular Pars of Middle Cerebral Artery", "anterior"},
        {"Temporal Pars of Posterior Cerebral Artery", "posterior"},
        {"Occipital Pars of Posterior Cerebral Artery", "posterior"},
        {"Posterior Choroidal and Thalamoperfurators", "posterior"},
        {"Anterior Choroidal and Thalamoperfurators", "anterior"},
        {"Basilar", "posterior"},
        {"Superior Cerebellar", "posterior"},
        {"Inferior Cerebellar", "posterior"},
        {"Lateral Ventricle", "anterior"},
    }};
    RegionTable t;
    for (std::int32_t k = 1; k <= 16; ++k)
        detail::add_pair(t, 2 * k - 1, 2 * k, territories[std::size_t(k - 1)].first,
                         territories[std::size_t(k - 1)].second);
    return t;
}

/// One region per nonzero label, named from the label map.
inline RegionTable table_from_labels(const LabelMap& labels)
{
    RegionTable t;
    for (auto id : labels.present_labels())
        if (id != 0) {
            const auto& n = labels.names().at(id);
            t[id] = {n, n, 0, {}};
        }
    return t;
}

// ---------------------------------------------------------------------------
// Lesion mapping

struct MetastasisRecord {
    std::string case_id;
    int lesion_id = 0;
    Vec3 barycentre_atlas = Vec3::Zero();
    double volume_mm3 = 0.0;
    std::int32_t region_label = 0;
    std::int32_t arterial_label = 0;
    std::optional<double> perfusion_median, perfusion_min, perfusion_max;
    bool flagged = false;
    std::string flag_reason;
};

inline void to_json(nlohmann::json& j, const MetastasisRecord& r)
{
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); };
    j = {{"case_id", r.case_id},
         {"lesion_id", r.lesion_id},
         {"barycentre_atlas", {r.barycentre_atlas.x(), r.barycentre_atlas.y(), r.barycentre_atlas.z()}},
         {"volume_mm3", r.volume_mm3},
         {"region_label", r.region_label},
         {"arterial_label", r.arterial_label},
         {"perfusion_median", opt(r.perfusion_median)},
         {"perfusion_min", opt(r.perfusion_min)},
         {"perfusion_max", opt(r.perfusion_max)},
         {"flagged", r.flagged},
         {"flag_reason", r.flag_reason}};
}

inline void from_json(const nlohmann::json& j, MetastasisRecord& r)
{
    auto opt = [&](const char* k) -> std::optional<double> {
        if (!j.contains(k) || j.at(k).is_null())
            return std::nullopt;
        return j.at(k).get<double>();
    };
    r.case_id = j.at("case_id").get<std::string>();
    r.lesion_id = j.at("lesion_id").get<int>();
    const auto b = j.at("barycentre_atlas");
    r.barycentre_atlas = Vec3(b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>());
    r.volume_mm3 = j.at("volume_mm3").get<double>();
    r.region_label = j.at("region_label").get<std::int32_t>();
    r.arterial_label = j.value("arterial_label", 0);
    r.perfusion_median = opt("perfusion_median");
    r.perfusion_min = opt("perfusion_min");
    r.perfusion_max = opt("perfusion_max");
    r.flagged = j.value("flagged", false);
    r.flag_reason = j.value("flag_reason", std::string());
}

/// 26-connected components of a mask, numbered 1.. in scan order.
inline Array3<std::int32_t> connected_components(const Mask& m, int* count_out = nullptr)
{
    const Shape3& s = m.shape();
    Array3<std::int32_t> lab(s, 0);
    std::int32_t next = 0;
    std::vector<std::int64_t> stack;
    for (std::int64_t seed = 0; seed < m.size(); ++seed) {
        if (!m[seed] || lab[seed])
            continue;
        lab[seed] = ++next;
        stack.assign(1, seed);
        while (!stack.empty()) {
            const auto cur = stack.back();
            stack.pop_back();
            const auto [i, j, k] = s.unravel(cur);
            for (int dz = -1; dz <= 1; ++dz)
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        const std::int64_t x = i + dx, y = j + dy, z = k + dz;
                        if (!s.contains(x, y, z))
                            continue;
                        const auto n = s.index(x, y, z);
                        if (m[n] && !lab[n]) {
                            lab[n] = next;
                            stack.push_back(n);
                        }
                    }
        }
    }
    if (count_out)
        *count_out = next;
    return lab;
}

/// Label of `labels` at the voxel nearest to world point `p` (0 outside).
inline std::int32_t label_at_point(const LabelMap& labels, const Vec3& p)
{
    std::int64_t idx;
    if (!nearest_index(labels.grid().shape(), labels.grid().world_to_voxel(p), idx))
        return 0;
    return labels.data()[idx];
}

/// Splits the subject tumour mask into lesions, warps each onto the atlas grid
/// through `atlas_to_subject` (nearest neighbour), and records barycentre,
/// volume, region, territory, and perfusion summaries.
inline std::vector<MetastasisRecord> map_lesions(const std::string& case_id, const Mask& tumour,
                                                 const SamplingGrid& subject_grid,
                                                 const TransformChain& atlas_to_subject, const LabelMap& atlas_labels,
                                                 const LabelMap* arterial = nullptr,
                                                 const ImageVolume* perfusion = nullptr)
{
    if (!(tumour.shape() == subject_grid.shape()))
        throw GeometryError("map_lesions: tumour mask does not match the subject grid");
    int n = 0;
    const auto comps = connected_components(tumour, &n);
    const LabelMap comp_map(comps, subject_grid);
    const auto& g = atlas_labels.grid();
    const auto warped = sample(comp_map, g, atlas_to_subject);

    std::vector<Vec3> sum(std::size_t(n) + 1, Vec3::Zero());
    std::vector<std::int64_t> cnt(std::size_t(n) + 1, 0);
    std::vector<std::vector<double>> perf(std::size_t(n) + 1);
    for (std::int64_t i = 0; i < g.size(); ++i) {
        const auto l = warped[i];
        if (l <= 0)
            continue;
        const Vec3 p = g.voxel_to_world(i);
        sum[std::size_t(l)] += p;
        ++cnt[std::size_t(l)];
        if (perfusion) {
            const Vec3 c = perfusion->grid().world_to_voxel(p);
            if (inside_field(perfusion->grid().shape(), c))
                perf[std::size_t(l)].push_back(trilinear(perfusion->data(), c));
        }
    }
    std::vector<MetastasisRecord> out;
    for (int l = 1; l <= n; ++l) {
        MetastasisRecord r;
        r.case_id = case_id;
        r.lesion_id = l;
        const auto c = cnt[std::size_t(l)];
        if (c == 0) {
            r.flagged = true;
            r.flag_reason = "lesion warped outside the atlas grid";
            out.push_back(r);
            continue;
        }
        r.barycentre_atlas = sum[std::size_t(l)] / double(c);
        r.volume_mm3 = double(c) * g.voxel_volume();
        r.region_label = label_at_point(atlas_labels, r.barycentre_atlas);
        if (arterial)
            r.arterial_label = label_at_point(*arterial, r.barycentre_atlas);
        if (r.region_label == 0) {
            r.flagged = true;
            r.flag_reason = "barycentre outside the atlas foreground";
        }
        auto& pv = perf[std::size_t(l)];
        if (!pv.empty()) {
            r.perfusion_median = stats::median(pv);
            r.perfusion_min = *std::min_element(pv.begin(), pv.end());
            r.perfusion_max = *std::max_element(pv.begin(), pv.end());
        }
        out.push_back(r);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Region frequencies and tests

struct RegionStats {
    std::string region;
    std::vector<std::int32_t> labels;
    double volume_mm3 = 0.0;
    std::int64_t measured = 0;
    double expected = 0.0;
    bool tested = false;
    std::optional<double> chi2, p_value;
    bool significant = false;
    std::optional<double> ci_low, ci_high;
};

inline void to_json(nlohmann::json& j, const RegionStats& s)
{
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); };
    j = {{"region", s.region},   {"labels", s.labels}, {"volume_mm3", s.volume_mm3},
         {"measured", s.measured}, {"expected", s.expected}, {"tested", s.tested},
         {"chi2", opt(s.chi2)},    {"p_value", opt(s.p_value)}, {"significant", s.significant},
         {"ci_low", opt(s.ci_low)}, {"ci_high", opt(s.ci_high)}};
}

enum class RecordLabel { region, arterial };

namespace detail {

inline std::int32_t record_label(const MetastasisRecord& r, RecordLabel which)
{
    return which == RecordLabel::region ? r.region_label : r.arterial_label;
}

/// Pooled region name per label id (labels absent from the table are skipped).
inline std::map<std::string, std::vector<std::int32_t>> pooled(const RegionTable& t, bool by_group)
{
    std::map<std::string, std::vector<std::int32_t>> out;
    for (const auto& [id, info] : t)
        out[by_group ? info.group : info.region].push_back(id);
    return out;
}

} // namespace detail

/// Counts of usable (unflagged, in-table) records per pooled region against
/// the volume-corrected uniform expectation. Regions are ordered by name.
inline std::vector<RegionStats> region_frequencies(const std::vector<MetastasisRecord>& records,
                                                   const LabelMap& labels, const RegionTable& table,
                                                   RecordLabel which = RecordLabel::region, bool by_group = false)
{
    std::map<std::int32_t, std::int64_t> voxels;
    for (auto v : labels.data())
        if (table.count(v))
            ++voxels[v];
    std::map<std::int32_t, std::string> region_of;
    std::vector<RegionStats> out;
    double total_volume = 0;
    for (const auto& [name, ids] : detail::pooled(table, by_group)) {
        RegionStats s;
        s.region = name;
        s.labels = ids;
        for (auto id : ids) {
            s.volume_mm3 += double(voxels[id]) * labels.grid().voxel_volume();
            region_of[id] = name;
        }
        total_volume += s.volume_mm3;
        out.push_back(s);
    }
    std::int64_t total = 0;
    for (const auto& r : records) {
        if (r.flagged)
            continue;
        const auto it = region_of.find(detail::record_label(r, which));
        if (it == region_of.end())
            continue;
        for (auto& s : out)
            if (s.region == it->second)
                ++s.measured;
        ++total;
    }
    if (total_volume > 0)
        for (auto& s : out)
            s.expected = double(total) * s.volume_mm3 / total_volume;
    return out;
}

/// Region-vs-rest 1-df chi-square per region with expected >= min_expected;
/// Bonferroni over the tested regions.
inline std::vector<RegionStats> chi_square_regions(std::vector<RegionStats> stats, double alpha = 0.01,
                                                   double min_expected = 5.0)
{
    double total = 0;
    for (const auto& s : stats)
        total += double(s.measured);
    int m = 0;
    for (auto& s : stats) {
        s.tested = s.expected >= min_expected && total > s.expected;
        s.significant = false;
        s.chi2.reset();
        s.p_value.reset();
        if (s.tested) {
            ++m;
            s.chi2 = stats::chi2_cell_vs_rest(double(s.measured), s.expected, total);
            s.p_value = stats::chi2_sf_1df(*s.chi2);
        }
    }
    for (auto& s : stats)
        if (s.tested)
            s.significant = *s.p_value < alpha / double(m);
    return stats;
}

/// Uniform direction on the unit sphere.
inline Vec3 random_direction(std::mt19937_64& rng)
{
    std::normal_distribution<double> nd;
    Vec3 d;
    do {
        d = Vec3(nd(rng), nd(rng), nd(rng));
    } while (d.norm() < 1e-12);
    return d.normalized();
}

/// Per-region 2.5 / 97.5 percentile counts over `n` replicates in which every
/// barycentre moves in a uniform random direction by max(0, N(mean, sd)) mm.
inline std::vector<RegionStats> jitter_ci(std::vector<RegionStats> stats, const std::vector<MetastasisRecord>& records,
                                          const LabelMap& labels, const RegionTable& table, int n = 100,
                                          double shift_mean = 1.0, double shift_sd = 0.5, std::uint64_t seed = 0,
                                          RecordLabel which = RecordLabel::region)
{
    if (n < 1)
        throw std::invalid_argument("jitter_ci: need at least one replicate");
    std::map<std::int32_t, std::size_t> slot;
    for (std::size_t k = 0; k < stats.size(); ++k)
        for (auto id : stats[k].labels)
            slot[id] = k;
    std::vector<std::vector<double>> counts(stats.size());
    for (int rep = 0; rep < n; ++rep) {
        std::mt19937_64 rng(seed * 0x100000001b3ull + std::uint64_t(rep) + 1);
        std::normal_distribution<double> mag(shift_mean, shift_sd);
        std::vector<double> c(stats.size(), 0.0);
        for (const auto& r : records) {
            if (r.flagged || !table.count(detail::record_label(r, which)))
                continue;
            const Vec3 d = random_direction(rng);
            const double s = std::max(0.0, mag(rng));
            const auto l = label_at_point(labels, r.barycentre_atlas + s * d);
            const auto it = slot.find(l);
            if (it != slot.end())
                c[it->second] += 1;
        }
        for (std::size_t k = 0; k < stats.size(); ++k)
            counts[k].push_back(c[k]);
    }
    for (std::size_t k = 0; k < stats.size(); ++k) {
        stats[k].ci_low = stats::percentile(counts[k], 2.5);
        stats[k].ci_high = stats::percentile(counts[k], 97.5);
    }
    return stats;
}

struct HemisphereStats {
    std::string region;
    std::int64_t left = 0, right = 0;
    double left_volume_mm3 = 0, right_volume_mm3 = 0;
    double p_value = 1.0;
};

inline void to_json(nlohmann::json& j, const HemisphereStats& s)
{
    j = {{"region", s.region},
         {"left", s.left},
         {"right", s.right},
         {"left_volume_mm3", s.left_volume_mm3},
         {"right_volume_mm3", s.right_volume_mm3},
         {"p_value", s.p_value}};
}

/// Two-sided binomial test of left vs right counts per paired structure,
/// against the volume-weighted left fraction.
inline std::vector<HemisphereStats> hemisphere_symmetry_test(const std::vector<MetastasisRecord>& records,
                                                             const LabelMap& labels, const RegionTable& table,
                                                             RecordLabel which = RecordLabel::region)
{
    std::map<std::int32_t, std::int64_t> voxels;
    for (auto v : labels.data())
        ++voxels[v];
    std::map<std::string, HemisphereStats> acc;
    for (const auto& [id, info] : table) {
        if (!info.hemisphere)
            continue;
        auto& h = acc[info.region];
        h.region = info.region;
        (info.hemisphere == 'L' ? h.left_volume_mm3 : h.right_volume_mm3) +=
            double(voxels[id]) * labels.grid().voxel_volume();
    }
    for (const auto& r : records) {
        if (r.flagged)
            continue;
        const auto it = table.find(detail::record_label(r, which));
        if (it == table.end() || !it->second.hemisphere)
            continue;
        auto& h = acc[it->second.region];
        ++(it->second.hemisphere == 'L' ? h.left : h.right);
    }
    std::vector<HemisphereStats> out;
    for (auto& [name, h] : acc) {
        const double vol = h.left_volume_mm3 + h.right_volume_mm3;
        const std::int64_t n = h.left + h.right;
        if (n > 0 && vol > 0)
            h.p_value = stats::binomial_two_sided(h.left, n, h.left_volume_mm3 / vol);
        out.push_back(h);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Junction-distance analysis

struct JunctionResult {
    std::vector<double> tumour_distances;
    std::vector<double> random_distances; // pooled over all random sets
    std::vector<double> emd_tumour;       // tumour set vs each random set
    std::vector<double> emd_rand;         // random set vs an independent random set
    double p_value = 1.0;
    bool unstable = false;                // fewer than 100 random sets
    std::vector<double> bin_edges;
    std::vector<double> density_tumour, density_random;
};

inline void to_json(nlohmann::json& j, const JunctionResult& r)
{
    const auto mean = [](const std::vector<double>& v) {
        double s = 0;
        for (double x : v)
            s += x;
        return v.empty() ? 0.0 : s / double(v.size());
    };
    j = {{"p_value", r.p_value},
         {"unstable", r.unstable},
         {"n_random_sets", r.emd_rand.size()},
         {"mean_emd_tumour", mean(r.emd_tumour)},
         {"mean_emd_rand", mean(r.emd_rand)},
         {"tumour_distances", r.tumour_distances},
         {"bin_edges", r.bin_edges},
         {"density_tumour", r.density_tumour},
         {"density_random", r.density_random}};
}

/// Uniform points over the voxels of `region` (uniform within each voxel).
inline std::vector<Vec3> sample_uniform_points(const Mask& region, const SamplingGrid& grid, std::size_t n,
                                               std::mt19937_64& rng)
{
    std::vector<std::int64_t> idx;
    for (std::int64_t i = 0; i < region.size(); ++i)
        if (region[i])
            idx.push_back(i);
    if (idx.empty())
        throw std::invalid_argument("sample_uniform_points: empty region");
    std::uniform_int_distribution<std::size_t> pick(0, idx.size() - 1);
    std::uniform_real_distribution<double> off(-0.5, 0.5);
    std::vector<Vec3> out(n);
    for (auto& p : out) {
        const auto [i, j, k] = grid.shape().unravel(idx[pick(rng)]);
        p = grid.voxel_to_world(Vec3(double(i) + off(rng), double(j) + off(rng), double(k) + off(rng)));
    }
    return out;
}

/// Distance (mm) from every voxel to the nearest voxel of `surface`.
inline Array3<double> surface_distance_map(const Mask& surface, const SamplingGrid& grid)
{
    if (count(surface) == 0)
        throw std::invalid_argument("junction surface is empty");
    return edt(surface, grid.spacing());
}

/// Compares the junction-distance distribution of lesion barycentres with
/// random uniform point sets of the same size drawn inside `brain`.
inline JunctionResult junction_analysis(const std::vector<Vec3>& points, const Mask& junction, const Mask& brain,
                                        const SamplingGrid& grid, int n_random_sets = 200, std::uint64_t seed = 0,
                                        int bins = 20)
{
    if (points.empty())
        throw std::invalid_argument("junction_analysis: no lesion points");
    if (n_random_sets < 1)
        throw std::invalid_argument("junction_analysis: need at least one random set");
    if (!(junction.shape() == grid.shape()) || !(brain.shape() == grid.shape()))
        throw GeometryError("junction_analysis: masks do not match the grid");
    const auto dist = surface_distance_map(junction, grid);
    auto d_at = [&](const Vec3& p) { return trilinear(dist, grid.world_to_voxel(p)); };

    JunctionResult r;
    r.unstable = n_random_sets < 100;
    for (const auto& p : points)
        r.tumour_distances.push_back(d_at(p));
    std::mt19937_64 rng(seed ^ 0x5bd1e995ull);
    std::vector<std::vector<double>> sets(std::size_t(2 * n_random_sets));
    for (auto& s : sets) {
        for (const auto& p : sample_uniform_points(brain, grid, points.size(), rng))
            s.push_back(d_at(p));
    }
    for (int i = 0; i < n_random_sets; ++i) {
        const auto& a = sets[std::size_t(i)];
        r.emd_tumour.push_back(stats::emd_1d(r.tumour_distances, a));
        r.emd_rand.push_back(stats::emd_1d(a, sets[std::size_t(n_random_sets + i)]));
        r.random_distances.insert(r.random_distances.end(), a.begin(), a.end());
    }
    double mean_t = 0;
    for (double e : r.emd_tumour)
        mean_t += e;
    mean_t /= double(r.emd_tumour.size());
    std::int64_t ge = 0;
    for (double e : r.emd_rand)
        ge += e >= mean_t;
    r.p_value = double(1 + ge) / double(1 + n_random_sets);

    double hi = 0;
    for (double d : r.tumour_distances)
        hi = std::max(hi, d);
    for (double d : r.random_distances)
        hi = std::max(hi, d);
    hi = hi > 0 ? hi : 1.0;
    const double w = hi / bins;
    for (int b = 0; b <= bins; ++b)
        r.bin_edges.push_back(w * b);
    auto density = [&](const std::vector<double>& v) {
        std::vector<double> h(std::size_t(bins), 0.0);
        for (double d : v)
            h[std::size_t(std::min(bins - 1, int(d / w)))] += 1;
        for (auto& x : h)
            x /= double(v.size()) * w;
        return h;
    };
    r.density_tumour = density(r.tumour_distances);
    r.density_random = density(r.random_distances);
    return r;
}

struct PerfusionSummary {
    std::size_t lesions = 0;
    double mean_median = 0, mean_min = 0, mean_max = 0;
};

inline PerfusionSummary perfusion_summary(const std::vector<MetastasisRecord>& records)
{
    PerfusionSummary s;
    for (const auto& r : records) {
        if (r.flagged || !r.perfusion_median)
            continue;
        ++s.lesions;
        s.mean_median += *r.perfusion_median;
        s.mean_min += *r.perfusion_min;
        s.mean_max += *r.perfusion_max;
    }
    if (s.lesions) {
        s.mean_median /= double(s.lesions);
        s.mean_min /= double(s.lesions);
        s.mean_max /= double(s.lesions);
    }
    return s;
}

} // namespace atlasreg
