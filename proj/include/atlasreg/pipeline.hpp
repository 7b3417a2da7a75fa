#pragma once

// Pipeline stages behind the command-line tool. Every stage reads and writes
// persisted artifacts under the output root, stamps them with the config hash
// and code version, and writes files atomically.
//
// Output layout (relative to paths.output):
//   phantom/            generated atlas, arterial map, perfusion map, cases, manifest.tsv
//   prealign/<id>.*     chosen subject->atlas affine and candidate scores
//   model/              general checkpoint, loss log, summary
//   registration/<id>/  general and overfit fields, loss log, warped volumes
//   metrics/            per-case and cohort metric JSON
//   cohort/             lesion records and statistics
//   report/             CSV tables and SVG figures

#include <atomic>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <mutex>
#include <sstream>
#include <thread>

#include "json.hpp"

#include "atlasreg/cohort.hpp"
#include "atlasreg/io.hpp"
#include "atlasreg/metrics.hpp"
#include "atlasreg/nifti.hpp"
#include "atlasreg/phantom.hpp"
#include "atlasreg/training.hpp"

namespace atlasreg::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

/// An input file a stage needs is absent; `path` is the exact expected location.
class MissingInput : public std::runtime_error {
public:
    explicit MissingInput(const fs::path& p, const std::string& what)
        : std::runtime_error("missing " + what + ": " + p.string()), path(p)
    {
    }
    fs::path path;
};

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Configuration

struct Paths {
    fs::path output;
    fs::path atlas_image, atlas_labels, arterial, perfusion, manifest; // empty: phantom defaults under output
};

struct PhantomSettings {
    std::array<std::int64_t, 3> shape{48, 48, 48};
    double spacing = 1.0;
    int n_labels = 3;
    double deform_amplitude = 4.0;
    double deform_smoothness = 8.0;
    std::optional<double> tumour_radius = 5.0;
    int cases = 6;
};

struct AnalysisSettings {
    std::string region_table = "seganat"; // "seganat" or "labels" (names from the atlas label map)
    double alpha = 0.01;
    double min_expected = 5.0;
    int jitter_replicates = 100;
    double jitter_mean_mm = 1.0;
    double jitter_sd_mm = 0.5;
    int emd_random_sets = 200;
    int histogram_bins = 20;
    std::vector<std::int32_t> junction_a{3, 42};
    std::vector<std::int32_t> junction_b{2, 41};
    double ring_mm = 10.0;
    std::string stage = "overfit"; // transforms used by warp and cohort-analyze
};

struct PipelineConfig {
    Paths paths;
    TrainConfig train;
    AnalysisSettings analysis;
    PhantomSettings phantom;
    std::uint64_t seed = 0;
};

inline void to_json(json& j, const PhantomSettings& p)
{
    j = {{"shape", p.shape},
         {"spacing", p.spacing},
         {"n_labels", p.n_labels},
         {"deform_amplitude", p.deform_amplitude},
         {"deform_smoothness", p.deform_smoothness},
         {"tumour_radius", p.tumour_radius ? json(*p.tumour_radius) : json()},
         {"cases", p.cases}};
}

inline void from_json(const json& j, PhantomSettings& p)
{
    if (j.contains("shape"))
        p.shape = j.at("shape").get<std::array<std::int64_t, 3>>();
    p.spacing = j.value("spacing", p.spacing);
    p.n_labels = j.value("n_labels", p.n_labels);
    p.deform_amplitude = j.value("deform_amplitude", p.deform_amplitude);
    p.deform_smoothness = j.value("deform_smoothness", p.deform_smoothness);
    if (j.contains("tumour_radius"))
        p.tumour_radius = j.at("tumour_radius").is_null() ? std::nullopt
                                                           : std::optional<double>(j.at("tumour_radius").get<double>());
    p.cases = j.value("cases", p.cases);
}

inline void to_json(json& j, const AnalysisSettings& a)
{
    j = {{"region_table", a.region_table},       {"alpha", a.alpha},
         {"min_expected", a.min_expected},       {"jitter_replicates", a.jitter_replicates},
         {"jitter_mean_mm", a.jitter_mean_mm},   {"jitter_sd_mm", a.jitter_sd_mm},
         {"emd_random_sets", a.emd_random_sets}, {"histogram_bins", a.histogram_bins},
         {"junction_a", a.junction_a},           {"junction_b", a.junction_b},
         {"ring_mm", a.ring_mm},                 {"stage", a.stage}};
}

inline void from_json(const json& j, AnalysisSettings& a)
{
    a.region_table = j.value("region_table", a.region_table);
    a.alpha = j.value("alpha", a.alpha);
    a.min_expected = j.value("min_expected", a.min_expected);
    a.jitter_replicates = j.value("jitter_replicates", a.jitter_replicates);
    a.jitter_mean_mm = j.value("jitter_mean_mm", a.jitter_mean_mm);
    a.jitter_sd_mm = j.value("jitter_sd_mm", a.jitter_sd_mm);
    a.emd_random_sets = j.value("emd_random_sets", a.emd_random_sets);
    a.histogram_bins = j.value("histogram_bins", a.histogram_bins);
    a.junction_a = j.value("junction_a", a.junction_a);
    a.junction_b = j.value("junction_b", a.junction_b);
    a.ring_mm = j.value("ring_mm", a.ring_mm);
    a.stage = j.value("stage", a.stage);
}

inline json config_to_json(const PipelineConfig& c)
{
    auto p = [](const fs::path& x) { return x.generic_string(); };
    return {{"paths",
             {{"output", p(c.paths.output)},
              {"atlas_image", p(c.paths.atlas_image)},
              {"atlas_labels", p(c.paths.atlas_labels)},
              {"arterial", p(c.paths.arterial)},
              {"perfusion", p(c.paths.perfusion)},
              {"manifest", p(c.paths.manifest)}}},
            {"train", c.train},
            {"analysis", c.analysis},
            {"phantom", c.phantom},
            {"seed", c.seed}};
}

inline void validate(const PipelineConfig& c)
{
    if (c.paths.output.empty())
        throw ConfigError("paths.output is required");
    c.train.validate(true);
    const auto& a = c.analysis;
    if (a.region_table != "seganat" && a.region_table != "labels")
        throw ConfigError("analysis.region_table must be \"seganat\" or \"labels\"");
    if (a.stage != "overfit" && a.stage != "general")
        throw ConfigError("analysis.stage must be \"overfit\" or \"general\"");
    if (!(a.alpha > 0 && a.alpha < 1))
        throw ConfigError("analysis.alpha must lie in (0, 1)");
    if (a.jitter_replicates < 1 || a.emd_random_sets < 1 || a.histogram_bins < 1)
        throw ConfigError("analysis replicate, random-set, and bin counts must be positive");
    if (a.jitter_sd_mm < 0 || a.jitter_mean_mm < 0 || a.ring_mm <= 0)
        throw ConfigError("analysis jitter and ring sizes must be nonnegative");
    const auto& p = c.phantom;
    if (p.cases < 2)
        throw ConfigError("phantom.cases must be at least 2");
    if (p.n_labels < 2)
        throw ConfigError("phantom.n_labels must be at least 2");
    if (!(p.spacing > 0) || p.shape[0] < 8 || p.shape[1] < 8 || p.shape[2] < 8)
        throw ConfigError("phantom grid must be at least 8 voxels per axis with positive spacing");
}

/// Parses a config document. Relative paths resolve against `base`; empty
/// input paths default to the phantom layout under the output root.
inline PipelineConfig parse_config(const json& j, const fs::path& base = {})
{
    static const std::set<std::string> known{"paths", "train", "analysis", "phantom", "seed"};
    if (!j.is_object())
        throw ConfigError("config must be a JSON object");
    for (const auto& [k, v] : j.items())
        if (!known.count(k))
            throw ConfigError("unknown config key: " + k);
    PipelineConfig c;
    try {
        const json paths = j.value("paths", json::object());
        auto get = [&](const char* k) -> fs::path {
            const std::string s = paths.value(k, std::string());
            if (s.empty())
                return {};
            const fs::path q(s);
            return q.is_absolute() || base.empty() ? q : base / q;
        };
        c.paths.output = get("output");
        c.paths.atlas_image = get("atlas_image");
        c.paths.atlas_labels = get("atlas_labels");
        c.paths.arterial = get("arterial");
        c.paths.perfusion = get("perfusion");
        c.paths.manifest = get("manifest");
        if (j.contains("train"))
            c.train = j.at("train").get<TrainConfig>();
        if (j.contains("analysis"))
            c.analysis = j.at("analysis").get<AnalysisSettings>();
        if (j.contains("phantom"))
            c.phantom = j.at("phantom").get<PhantomSettings>();
        c.seed = j.value("seed", std::uint64_t(0));
    } catch (const json::exception& e) {
        throw ConfigError(std::string("invalid config: ") + e.what());
    }
    const fs::path ph = c.paths.output / "phantom";
    if (c.paths.atlas_image.empty())
        c.paths.atlas_image = ph / "atlas_image.nii.gz";
    if (c.paths.atlas_labels.empty())
        c.paths.atlas_labels = ph / "atlas_labels.nii.gz";
    if (c.paths.manifest.empty())
        c.paths.manifest = ph / "manifest.tsv";
    c.train.seed = c.seed;
    validate(c);
    return c;
}

inline PipelineConfig load_config(const fs::path& path)
{
    if (!fs::exists(path))
        throw MissingInput(path, "config file");
    return parse_config(read_json(path), fs::absolute(path).parent_path());
}

// ---------------------------------------------------------------------------
// Context shared by the stages

struct Context {
    PipelineConfig cfg;
    std::string hash;
    int workers = 1;
    std::optional<std::string> case_id;
    std::function<void(const std::string&)> log = [](const std::string&) {};

    explicit Context(PipelineConfig c) : cfg(std::move(c)), hash(config_hash(config_to_json(cfg))) {}

    fs::path out(const fs::path& rel) const { return cfg.paths.output / rel; }
    fs::path case_dir(const std::string& id) const { return out("registration") / id; }
    std::string stamp() const { return std::string("atlasreg ") + kVersion + " cfg " + hash; }

    json provenance() const { return {{"config_hash", hash}, {"version", kVersion}}; }

    void write(const fs::path& path, json j) const
    {
        j["provenance"] = provenance();
        write_json(path, j);
    }

    void write_csv(const fs::path& path, const std::string& body) const
    {
        atomic_write(path, "# " + stamp() + "\n" + body);
    }
};

inline const fs::path& require(const fs::path& p, const std::string& what)
{
    if (!fs::exists(p))
        throw MissingInput(p, what);
    return p;
}

/// Runs `fn(i)` for i in [0, n) on up to `workers` threads; rethrows the first failure.
inline void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn)
{
    const auto w = std::size_t(std::max(1, std::min<int>(workers, int(n))));
    if (w <= 1) {
        for (std::size_t i = 0; i < n; ++i)
            fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr err;
    std::mutex mu;
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < w; ++t)
        pool.emplace_back([&] {
            for (std::size_t i; (i = next++) < n;) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(mu);
                    if (!err)
                        err = std::current_exception();
                }
            }
        });
    for (auto& t : pool)
        t.join();
    if (err)
        std::rethrow_exception(err);
}

inline AtlasData load_atlas(const Context& ctx)
{
    const auto& p = ctx.cfg.paths;
    return {load_image(require(p.atlas_image, "atlas image")), load_labels(require(p.atlas_labels, "atlas labels"))};
}

inline std::vector<ManifestEntry> load_cases(const Context& ctx)
{
    auto entries = load_manifest(require(ctx.cfg.paths.manifest, "case manifest"));
    if (ctx.case_id) {
        std::erase_if(entries, [&](const ManifestEntry& e) { return e.case_id != *ctx.case_id; });
        if (entries.empty())
            throw ConfigError("case id not in manifest: " + *ctx.case_id);
    }
    return entries;
}

inline Mask load_tumour(const ManifestEntry& e, const SamplingGrid& subject_grid)
{
    const auto t = load_labels(require(*e.tumour, "tumour mask for " + e.case_id));
    if (!t.grid().same_as(subject_grid))
        throw GeometryError(e.tumour->string() + ": tumour mask grid differs from the subject image");
    return t.foreground();
}

inline fs::path prealign_path(const Context& ctx, const std::string& id) { return ctx.out("prealign") / (id + ".affine.txt"); }

inline CaseData load_case(const Context& ctx, const ManifestEntry& e, bool need_prealign = true)
{
    CaseData c;
    c.id = e.case_id;
    c.image = load_image(require(e.image, "image for " + e.case_id));
    c.labels = load_labels(require(e.labels, "labels for " + e.case_id));
    if (!c.labels.grid().same_as(c.image.grid()))
        throw GeometryError(e.labels.string() + ": label grid differs from the subject image");
    if (e.tumour)
        c.tumour = load_tumour(e, c.image.grid());
    if (need_prealign)
        c.subject_to_atlas = load_affine(require(prealign_path(ctx, e.case_id), "pre-alignment (run prealign)"));
    return c;
}

inline std::string format_affine_stamped(const Context& ctx, const AffineTransform& a)
{
    return "# " + ctx.stamp() + "\n" + format_affine(a);
}

inline double mean_overlap(const LabelMap& atlas, const Array3<std::int32_t>& warped)
{
    double s = 0;
    int n = 0;
    for (auto l : atlas.present_labels()) {
        if (l == 0)
            continue;
        Mask a(warped.shape());
        for (std::int64_t i = 0; i < a.size(); ++i)
            a[i] = warped[i] == l;
        s += dsc(a, atlas.mask_of(l)).value;
        ++n;
    }
    return n ? s / n : 0.0;
}

inline TransformChain atlas_to_subject(const AffineTransform& subject_to_atlas, const DisplacementField* forward)
{
    if (forward)
        return compose_chain({subject_to_atlas.inverse(), as_part(*forward)});
    return compose_chain({subject_to_atlas.inverse()});
}

// ---------------------------------------------------------------------------
// phantom-gen

/// Arterial phantom: four territories by (anterior/posterior, superior/inferior)
/// quadrant, split by hemisphere (left id 2k-1, right id 2k).
inline LabelMap phantom_arterial(const LabelMap& atlas)
{
    const auto& g = atlas.grid();
    Array3<std::int32_t> a(g.shape(), 0);
    const Vec3 c = g.voxel_to_world(Vec3(0.5 * double(g.shape().nx - 1), 0.5 * double(g.shape().ny - 1),
                                         0.5 * double(g.shape().nz - 1)));
    for (std::int64_t i = 0; i < g.size(); ++i) {
        if (atlas.data()[i] == 0)
            continue;
        const Vec3 p = g.voxel_to_world(i) - c;
        const int k = p.y() > 0 ? (p.z() > 0 ? 1 : 4) : (p.z() > 0 ? 10 : 13);
        a[i] = p.x() < 0 ? 2 * k - 1 : 2 * k;
    }
    return LabelMap(std::move(a), g);
}

inline ImageVolume phantom_perfusion(const LabelMap& atlas)
{
    const auto& g = atlas.grid();
    Array3<float> a(g.shape(), 0.0f);
    const double h = 0.5 * double(g.shape().nz) * g.spacing().z();
    for (std::int64_t i = 0; i < g.size(); ++i)
        if (atlas.data()[i] != 0)
            a[i] = float(50.0 + 10.0 * g.voxel_to_world(i).z() / h + 5.0 * double(atlas.data()[i]));
    return ImageVolume(std::move(a), g, "perfusion");
}

inline void phantom_gen(const Context& ctx)
{
    const auto& ps = ctx.cfg.phantom;
    PhantomSpec spec;
    spec.grid = SamplingGrid::centred({ps.shape[0], ps.shape[1], ps.shape[2]}, ps.spacing);
    spec.n_labels = ps.n_labels;
    spec.deform_amplitude = ps.deform_amplitude;
    spec.deform_smoothness = ps.deform_smoothness;
    spec.tumour_radius = ps.tumour_radius;
    spec.seed = ctx.cfg.seed;
    const fs::path dir = ctx.out("phantom");
    const auto stamp = ctx.stamp();
    const auto atlas = make_atlas(spec);
    save_image(dir / "atlas_image.nii.gz", atlas.image, stamp);
    save_labels(dir / "atlas_labels.nii.gz", atlas.labels, stamp);
    save_labels(dir / "atlas_arterial.nii.gz", phantom_arterial(atlas.labels), stamp);
    save_image(dir / "atlas_perfusion.nii.gz", phantom_perfusion(atlas.labels), stamp);

    std::vector<ManifestEntry> entries(std::size_t(ps.cases));
    parallel_for(entries.size(), ctx.workers, [&](std::size_t i) {
        const auto s = make_subject(spec, std::int64_t(i));
        char name[32];
        std::snprintf(name, sizeof(name), "case%03zu", i);
        const fs::path cd = dir / "cases" / name;
        ManifestEntry e;
        e.case_id = name;
        e.image = cd / "image.nii.gz";
        e.labels = cd / "labels.nii.gz";
        save_image(e.image, s.image, stamp);
        save_labels(e.labels, s.labels, stamp);
        if (count(s.tumour) > 0) {
            e.tumour = cd / "tumour.nii.gz";
            save_mask(*e.tumour, s.tumour, s.image.grid(), stamp);
        }
        save_field(cd / "gt_forward.nii.gz", s.ground_truth.forward, stamp);
        save_field(cd / "gt_inverse.nii.gz", s.ground_truth.inverse, stamp);
        // Two candidate pre-alignments: the exact one and a deliberately shifted one.
        const fs::path a1 = cd / "affine_exact.txt", a2 = cd / "affine_shifted.txt";
        atomic_write(a1, format_affine_stamped(ctx, AffineTransform()));
        atomic_write(a2, format_affine_stamped(ctx, AffineTransform::translation(Vec3(3.0, -2.0, 1.0))));
        e.affines = {a2, a1};
        entries[i] = std::move(e);
    });
    atomic_write(dir / "manifest.tsv", "# " + stamp + "\n" + format_manifest(entries, dir));
    ctx.log("phantom: atlas and " + std::to_string(entries.size()) + " cases in " + dir.string());
}

// ---------------------------------------------------------------------------
// prealign

inline void prealign(const Context& ctx)
{
    const auto atlas = load_atlas(ctx);
    const auto entries = load_cases(ctx);
    parallel_for(entries.size(), ctx.workers, [&](std::size_t i) {
        const auto& e = entries[i];
        const auto c = load_case(ctx, e, false);
        json cands = json::array();
        std::optional<AffineTransform> best;
        double best_dsc = -1;
        std::string chosen;
        auto consider = [&](const AffineTransform& a, const std::string& source) {
            const double d = mean_overlap(atlas.labels, sample(c.labels, atlas.labels.grid(), atlas_to_subject(a, nullptr)));
            cands.push_back({{"source", source}, {"mean_dsc", d}});
            if (d > best_dsc) {
                best_dsc = d;
                best = a;
                chosen = source;
            }
        };
        for (const auto& p : e.affines)
            consider(load_affine(require(p, "affine for " + e.case_id)), p.generic_string());
        if (e.affines.empty())
            consider(moment_affine_init(c.labels, atlas.labels), "moment_init");
        atomic_write(prealign_path(ctx, e.case_id), format_affine_stamped(ctx, *best));
        ctx.write(ctx.out("prealign") / (e.case_id + ".json"),
                  {{"case_id", e.case_id}, {"chosen", chosen}, {"mean_dsc", best_dsc}, {"candidates", cands}});
    });
    ctx.log("prealign: " + std::to_string(entries.size()) + " cases");
}

// ---------------------------------------------------------------------------
// train-general / overfit

inline std::string loss_lines(const std::vector<LossReport>& h)
{
    std::string s;
    for (std::size_t e = 0; e < h.size(); ++e)
        s += to_json(h[e], int(e)).dump() + "\n";
    return s;
}

inline fs::path checkpoint_path(const Context& ctx) { return ctx.out("model") / "general.ckpt"; }

inline void train_general_stage(const Context& ctx)
{
    const auto atlas = load_atlas(ctx);
    const auto entries = load_cases(ctx);
    std::vector<CaseData> cases(entries.size());
    parallel_for(entries.size(), ctx.workers, [&](std::size_t i) { cases[i] = load_case(ctx, entries[i]); });
    const auto res = train_general(cases, atlas, ctx.cfg.train, [&](int e, const LossReport& r) {
        if (e % 10 == 0)
            ctx.log("epoch " + std::to_string(e) + " loss " + std::to_string(r.total));
    });
    atomic_write(ctx.out("model") / "general_loss.jsonl", loss_lines(res.history));
    json meta = ctx.provenance();
    meta["cases"] = json::array();
    for (const auto& c : cases)
        meta["cases"].push_back(c.id);
    atomic_write(checkpoint_path(ctx), nn::serialize(res.net, meta));
    ctx.write(ctx.out("model") / "general.json", {{"epochs", res.history.size()},
                                                  {"aborted", res.aborted},
                                                  {"abort_reason", res.abort_reason},
                                                  {"final_loss", res.history.empty() ? json() : to_json(res.history.back(), int(res.history.size()) - 1)}});
    if (res.aborted)
        ctx.log("training stopped early: " + res.abort_reason);
}

inline nn::VelocityNet load_general(const Context& ctx)
{
    const auto p = require(checkpoint_path(ctx), "general checkpoint (run train-general)");
    return nn::deserialize(read_text(p)).net;
}

inline void save_transforms(const Context& ctx, const fs::path& dir, const std::string& stage, const VelocityField& v,
                            const TransformPair& t)
{
    const auto s = ctx.stamp();
    save_field(dir / (stage + "_velocity.nii.gz"), v, s);
    save_field(dir / (stage + "_forward.nii.gz"), t.forward, s);
    save_field(dir / (stage + "_inverse.nii.gz"), t.inverse, s);
}

inline void overfit_stage(const Context& ctx)
{
    const auto atlas = load_atlas(ctx);
    const auto entries = load_cases(ctx);
    const auto net = load_general(ctx);
    const auto& tc = ctx.cfg.train;
    parallel_for(entries.size(), ctx.workers, [&](std::size_t i) {
        const auto c = load_case(ctx, entries[i]);
        const fs::path dir = ctx.case_dir(c.id);
        const auto v = predict_velocity(net, c.image, c.subject_to_atlas, atlas.image, atlas.labels.grid());
        save_transforms(ctx, dir, "general", v, integrate_svf(v, tc.steps));
        const auto o = overfit_case(net, c, atlas, tc);
        save_transforms(ctx, dir, "overfit", o.velocity, o.transforms);
        atomic_write(dir / "overfit_loss.jsonl", loss_lines(o.history));
        ctx.write(dir / "overfit.json", {{"case_id", c.id},
                                         {"best_step", o.best_step},
                                         {"best_loss", o.best_loss},
                                         {"diverged", o.diverged},
                                         {"steps_run", o.history.size()}});
        if (o.diverged)
            ctx.log(c.id + ": overfitting diverged; kept the best-loss state");
    });
    ctx.log("overfit: " + std::to_string(entries.size()) + " cases");
}

inline DisplacementField load_stage_field(const Context& ctx, const std::string& id, const std::string& stage,
                                          const std::string& which)
{
    const auto p = ctx.case_dir(id) / (stage + "_" + which + ".nii.gz");
    return load_field<DisplacementTag>(require(p, stage + " " + which + " field (run overfit)"));
}

// ---------------------------------------------------------------------------
// warp

inline void warp_stage(const Context& ctx)
{
    const auto atlas = load_atlas(ctx);
    const auto entries = load_cases(ctx);
    const auto& stage = ctx.cfg.analysis.stage;
    const auto& g = atlas.labels.grid();
    parallel_for(entries.size(), ctx.workers, [&](std::size_t i) {
        const auto c = load_case(ctx, entries[i]);
        const auto fwd = load_stage_field(ctx, c.id, stage, "forward");
        const auto chain = atlas_to_subject(c.subject_to_atlas, &fwd);
        const fs::path dir = ctx.case_dir(c.id);
        const auto s = ctx.stamp();
        save_image(dir / "warped_image.nii.gz", sample(c.image, g, chain), g, s);
        save_labels(dir / "warped_labels.nii.gz", sample(c.labels, g, chain), g, s);
        if (c.tumour) {
            const LabelMap t(Array3<std::int32_t>(c.tumour->shape(),
                                                  std::vector<std::int32_t>(c.tumour->begin(), c.tumour->end())),
                             c.image.grid());
            save_labels(dir / "warped_tumour.nii.gz", sample(t, g, chain), g, s);
        }
    });
    ctx.log("warp: " + std::to_string(entries.size()) + " cases (" + stage + ")");
}

// ---------------------------------------------------------------------------
// metrics

inline LabelMap mask_labels(const Mask& m, const SamplingGrid& g)
{
    return LabelMap(Array3<std::int32_t>(m.shape(), std::vector<std::int32_t>(m.begin(), m.end())), g);
}

/// Metrics of one case under one stage; `forward`/`inverse` absent for the affine stage.
inline CaseMetrics stage_metrics(const AtlasData& atlas, const CaseData& c, const DisplacementField* forward,
                                 const DisplacementField* inverse, double ring_mm)
{
    const auto& g = atlas.labels.grid();
    auto m = label_metrics(atlas.labels, sample(c.labels, g, atlas_to_subject(c.subject_to_atlas, forward)));
    if (forward)
        m.fof = fraction_of_foldings(*forward);
    if (c.tumour && count(*c.tumour) > 0) {
        const auto t = mask_labels(*c.tumour, c.image.grid());
        m.tumour_volume_factor = tumour_volume_factor(t, g, atlas_to_subject(c.subject_to_atlas, forward));
        if (inverse) {
            // Tumour and brain in the pre-aligned frame, where the inverse field lives.
            const auto aff = compose_chain({c.subject_to_atlas.inverse()});
            const auto ta = sample(t, g, aff);
            auto brain = c.labels.foreground();
            for (std::int64_t i = 0; i < brain.size(); ++i)
                brain[i] = brain[i] || (*c.tumour)[i];
            const auto ba = sample(mask_labels(brain, c.image.grid()), g, aff);
            Mask tm(g.shape()), bm(g.shape());
            for (std::int64_t i = 0; i < g.size(); ++i) {
                tm[i] = ta[i] != 0;
                bm[i] = ba[i] != 0;
            }
            if (count(tm) > 0)
                m.jacobian_ratio = jacobian_ratio(tm, bm, *inverse, ring_mm);
        }
    }
    return m;
}

inline void metrics_stage(const Context& ctx)
{
    const auto atlas = load_atlas(ctx);
    const auto entries = load_cases(ctx);
    std::vector<json> per(entries.size());
    parallel_for(entries.size(), ctx.workers, [&](std::size_t i) {
        const auto c = load_case(ctx, entries[i]);
        json j = {{"case_id", c.id}};
        j["affine"] = to_json(stage_metrics(atlas, c, nullptr, nullptr, ctx.cfg.analysis.ring_mm));
        for (const char* stage : {"general", "overfit"}) {
            const auto f = load_stage_field(ctx, c.id, stage, "forward");
            const auto b = load_stage_field(ctx, c.id, stage, "inverse");
            j[stage] = to_json(stage_metrics(atlas, c, &f, &b, ctx.cfg.analysis.ring_mm));
        }
        ctx.write(ctx.out("metrics") / (c.id + ".json"), j);
        per[i] = j;
    });
    json summary = {{"cases", json::array()}};
    for (const char* stage : {"affine", "general", "overfit"}) {
        std::vector<double> d, hd, assd, fof;
        for (const auto& j : per) {
            d.push_back(j[stage]["mean_dsc"].get<double>());
            hd.push_back(j[stage]["mean_hd"].get<double>());
            assd.push_back(j[stage]["mean_assd"].get<double>());
            fof.push_back(j[stage]["fof"].get<double>());
        }
        auto ms = [](const std::vector<double>& v) {
            double m = 0, s = 0;
            for (double x : v)
                m += x;
            m /= double(v.size());
            for (double x : v)
                s += (x - m) * (x - m);
            return json{{"mean", m}, {"sd", v.size() > 1 ? std::sqrt(s / double(v.size() - 1)) : 0.0}};
        };
        summary[stage] = {{"dsc", ms(d)}, {"hd", ms(hd)}, {"assd", ms(assd)}, {"fof", ms(fof)}};
    }
    for (const auto& j : per)
        summary["cases"].push_back(j["case_id"]);
    ctx.write(ctx.out("metrics") / "summary.json", summary);
    ctx.log("metrics: " + std::to_string(entries.size()) + " cases");
}

// ---------------------------------------------------------------------------
// cohort-analyze

inline RegionTable region_table(const Context& ctx, const LabelMap& labels)
{
    return ctx.cfg.analysis.region_table == "seganat" ? seganat_table() : table_from_labels(labels);
}

inline std::string records_tsv(const std::vector<MetastasisRecord>& recs)
{
    std::ostringstream o;
    o << std::setprecision(10);
    o << "case_id\tlesion_id\tx\ty\tz\tvolume_mm3\tregion_label\tarterial_label\tperfusion_median\tperfusion_min\t"
         "perfusion_max\tflagged\tflag_reason\n";
    auto opt = [](const std::optional<double>& v) {
        std::ostringstream s;
        s << std::setprecision(10);
        if (v)
            s << *v;
        return s.str();
    };
    for (const auto& r : recs)
        o << r.case_id << '\t' << r.lesion_id << '\t' << r.barycentre_atlas.x() << '\t' << r.barycentre_atlas.y()
          << '\t' << r.barycentre_atlas.z() << '\t' << r.volume_mm3 << '\t' << r.region_label << '\t'
          << r.arterial_label << '\t' << opt(r.perfusion_median) << '\t' << opt(r.perfusion_min) << '\t'
          << opt(r.perfusion_max) << '\t' << (r.flagged ? 1 : 0) << '\t' << r.flag_reason << '\n';
    return o.str();
}

inline void cohort_stage(const Context& ctx)
{
    const auto& an = ctx.cfg.analysis;
    const auto& paths = ctx.cfg.paths;
    const auto atlas = load_atlas(ctx);
    const auto entries = load_cases(ctx);
    const auto ph = ctx.out("phantom");
    auto optional_input = [&](const fs::path& configured, const char* phantom_name) -> fs::path {
        if (!configured.empty())
            return require(configured, phantom_name);
        return fs::exists(ph / phantom_name) ? ph / phantom_name : fs::path();
    };
    const auto art_path = optional_input(paths.arterial, "atlas_arterial.nii.gz");
    const auto perf_path = optional_input(paths.perfusion, "atlas_perfusion.nii.gz");
    std::optional<LabelMap> arterial;
    std::optional<ImageVolume> perfusion;
    if (!art_path.empty())
        arterial = load_labels(art_path);
    if (!perf_path.empty())
        perfusion = load_image(perf_path);

    std::vector<std::vector<MetastasisRecord>> per(entries.size());
    parallel_for(entries.size(), ctx.workers, [&](std::size_t i) {
        const auto c = load_case(ctx, entries[i]);
        if (!c.tumour)
            return;
        const auto fwd = load_stage_field(ctx, c.id, an.stage, "forward");
        per[i] = map_lesions(c.id, *c.tumour, c.image.grid(), atlas_to_subject(c.subject_to_atlas, &fwd), atlas.labels,
                             arterial ? &*arterial : nullptr, perfusion ? &*perfusion : nullptr);
    });
    std::vector<MetastasisRecord> recs;
    for (auto& v : per)
        recs.insert(recs.end(), v.begin(), v.end());
    if (recs.empty())
        throw ConfigError("cohort-analyze: no lesions found (manifest lists no tumour masks)");

    const fs::path dir = ctx.out("cohort");
    ctx.write_csv(dir / "records.tsv", records_tsv(recs));
    ctx.write(dir / "records.json", {{"records", recs}});

    const auto table = region_table(ctx, atlas.labels);
    auto regions = chi_square_regions(region_frequencies(recs, atlas.labels, table), an.alpha, an.min_expected);
    regions = jitter_ci(regions, recs, atlas.labels, table, an.jitter_replicates, an.jitter_mean_mm, an.jitter_sd_mm,
                        ctx.cfg.seed);
    json out = {{"n_records", recs.size()},
                {"n_usable", std::count_if(recs.begin(), recs.end(), [](auto& r) { return !r.flagged; })},
                {"regions", regions},
                {"hemispheres", hemisphere_symmetry_test(recs, atlas.labels, table)}};
    if (arterial) {
        const auto at = segart_table();
        auto fine = region_frequencies(recs, *arterial, at, RecordLabel::arterial);
        auto pooled = region_frequencies(recs, *arterial, at, RecordLabel::arterial, true);
        out["arterial"] = chi_square_regions(fine, an.alpha, an.min_expected);
        out["arterial_pooled"] = chi_square_regions(pooled, an.alpha, an.min_expected);
    }
    const std::set<std::int32_t> ja(an.junction_a.begin(), an.junction_a.end()),
        jb(an.junction_b.begin(), an.junction_b.end());
    const auto junction = junction_surface(atlas.labels, ja, jb);
    if (count(junction) > 0) {
        std::vector<Vec3> pts;
        for (const auto& r : recs)
            if (!r.flagged)
                pts.push_back(r.barycentre_atlas);
        if (!pts.empty())
            out["junction"] = junction_analysis(pts, junction, atlas.labels.foreground(), atlas.labels.grid(),
                                                an.emd_random_sets, ctx.cfg.seed, an.histogram_bins);
    } else {
        out["junction"] = nullptr;
        ctx.log("cohort: junction label sets share no interface in the atlas; junction analysis skipped");
    }
    const auto ps = perfusion_summary(recs);
    out["perfusion"] = {{"lesions", ps.lesions},
                        {"mean_median", ps.mean_median},
                        {"mean_min", ps.mean_min},
                        {"mean_max", ps.mean_max}};
    ctx.write(dir / "analysis.json", out);
    ctx.log("cohort: " + std::to_string(recs.size()) + " lesions");
}

// ---------------------------------------------------------------------------
// report

namespace detail {

inline std::string num(double v)
{
    std::ostringstream o;
    o << std::setprecision(6) << v;
    return o.str();
}

inline std::string num(const json& v) { return v.is_null() ? std::string() : num(v.get<double>()); }

inline std::string xml_escape(const std::string& s)
{
    std::string o;
    for (char c : s) {
        switch (c) {
        case '&': o += "&amp;"; break;
        case '<': o += "&lt;"; break;
        case '>': o += "&gt;"; break;
        case '"': o += "&quot;"; break;
        default: o += c;
        }
    }
    return o;
}

struct Series {
    std::string name;
    std::string colour;
    std::vector<double> values;
};

/// Grouped vertical bar chart as SVG.
inline std::string bar_chart(const std::string& title, const std::vector<std::string>& categories,
                             const std::vector<Series>& series, const std::string& stamp,
                             std::optional<double> guide = std::nullopt)
{
    const double w = 60.0 + 40.0 * double(categories.size()) * double(series.size() + 1), h = 360, top = 40,
                 bottom = 260, left = 50;
    double vmax = guide.value_or(0.0);
    for (const auto& s : series)
        for (double v : s.values)
            vmax = std::max(vmax, v);
    vmax = vmax > 0 ? vmax * 1.1 : 1.0;
    auto y = [&](double v) { return bottom - (bottom - top) * v / vmax; };
    std::ostringstream o;
    o << std::fixed << std::setprecision(1);
    o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
    o << "<!-- " << stamp << " -->\n";
    o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    o << "<text x=\"" << left << "\" y=\"20\" font-size=\"14\">" << xml_escape(title) << "</text>\n";
    o << "<line x1=\"" << left << "\" y1=\"" << bottom << "\" x2=\"" << w - 10 << "\" y2=\"" << bottom
      << "\" stroke=\"black\"/>\n";
    o << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << bottom
      << "\" stroke=\"black\"/>\n";
    o << "<text x=\"5\" y=\"" << top + 4 << "\" font-size=\"10\">" << num(vmax) << "</text>\n";
    const double group = 40.0 * double(series.size() + 1);
    for (std::size_t c = 0; c < categories.size(); ++c) {
        const double x0 = left + 10 + group * double(c);
        for (std::size_t s = 0; s < series.size(); ++s) {
            const double v = c < series[s].values.size() ? series[s].values[c] : 0.0;
            o << "<rect x=\"" << x0 + 40.0 * double(s) << "\" y=\"" << y(v) << "\" width=\"36\" height=\""
              << bottom - y(v) << "\" fill=\"" << series[s].colour << "\"/>\n";
        }
        o << "<text x=\"" << x0 << "\" y=\"" << bottom + 12 << "\" font-size=\"9\" transform=\"rotate(35 " << x0
          << ' ' << bottom + 12 << ")\">" << xml_escape(categories[c]) << "</text>\n";
    }
    if (guide)
        o << "<line x1=\"" << left << "\" y1=\"" << y(*guide) << "\" x2=\"" << w - 10 << "\" y2=\"" << y(*guide)
          << "\" stroke=\"grey\" stroke-dasharray=\"4 3\"/>\n";
    for (std::size_t s = 0; s < series.size(); ++s)
        o << "<rect x=\"" << left + 120.0 * double(s) << "\" y=\"" << h - 20 << "\" width=\"10\" height=\"10\" fill=\""
          << series[s].colour << "\"/><text x=\"" << left + 14 + 120.0 * double(s) << "\" y=\"" << h - 11
          << "\" font-size=\"10\">" << xml_escape(series[s].name) << "</text>\n";
    o << "</svg>\n";
    return o.str();
}

} // namespace detail

inline void report_stage(const Context& ctx)
{
    const fs::path dir = ctx.out("report");
    const auto stamp = ctx.stamp();
    bool any = false;

    const auto msum = ctx.out("metrics") / "summary.json";
    if (fs::exists(msum)) {
        any = true;
        const auto s = read_json(msum);
        std::ostringstream t;
        t << "stage,dsc_mean,dsc_sd,hd_mean,hd_sd,assd_mean,assd_sd,fof_mean,fof_sd\n";
        std::vector<std::string> cats;
        std::vector<double> dm;
        for (const char* stage : {"affine", "general", "overfit"}) {
            const auto& j = s.at(stage);
            t << stage;
            for (const char* k : {"dsc", "hd", "assd", "fof"})
                t << ',' << detail::num(j[k]["mean"]) << ',' << detail::num(j[k]["sd"]);
            t << '\n';
            cats.push_back(stage);
            dm.push_back(j["dsc"]["mean"].get<double>());
        }
        ctx.write_csv(dir / "metrics_table.csv", t.str());

        std::ostringstream pc;
        pc << "case_id,stage,mean_dsc,mean_hd,mean_assd,fof,tumour_volume_factor,jacobian_ratio\n";
        for (const auto& id : s.at("cases")) {
            const auto m = read_json(require(ctx.out("metrics") / (id.get<std::string>() + ".json"), "case metrics"));
            for (const char* stage : {"affine", "general", "overfit"}) {
                const auto& j = m.at(stage);
                pc << id.get<std::string>() << ',' << stage << ',' << detail::num(j["mean_dsc"]) << ','
                   << detail::num(j["mean_hd"]) << ',' << detail::num(j["mean_assd"]) << ',' << detail::num(j["fof"])
                   << ',' << detail::num(j["tumour_volume_factor"]) << ',' << detail::num(j["jacobian_ratio"]) << '\n';
            }
        }
        ctx.write_csv(dir / "metrics_cases.csv", pc.str());
        atomic_write(dir / "metrics_dsc.svg", detail::bar_chart("Mean DSC by stage", cats, {{"DSC", "#4a7ab5", dm}}, stamp));
    }

    const auto apath = ctx.out("cohort") / "analysis.json";
    if (fs::exists(apath)) {
        any = true;
        const auto a = read_json(apath);
        auto freq_table = [&](const json& regions, const fs::path& csv, const fs::path& svg, const std::string& title) {
            std::ostringstream t;
            t << "region,volume_mm3,measured,expected,ci_low,ci_high,tested,chi2,p_value,significant\n";
            std::vector<std::string> cats;
            std::vector<double> meas, exp;
            for (const auto& r : regions) {
                t << '"' << r["region"].get<std::string>() << "\"," << detail::num(r["volume_mm3"]) << ','
                  << r["measured"].get<std::int64_t>() << ',' << detail::num(r["expected"]) << ','
                  << detail::num(r["ci_low"]) << ',' << detail::num(r["ci_high"]) << ',' << (r["tested"].get<bool>() ? 1 : 0)
                  << ',' << detail::num(r["chi2"]) << ',' << detail::num(r["p_value"]) << ','
                  << (r["significant"].get<bool>() ? 1 : 0) << '\n';
                if (r["measured"].get<std::int64_t>() == 0 && r["expected"].get<double>() == 0)
                    continue;
                cats.push_back(r["region"].get<std::string>() + (r["significant"].get<bool>() ? " *" : ""));
                meas.push_back(double(r["measured"].get<std::int64_t>()));
                exp.push_back(r["expected"].get<double>());
            }
            ctx.write_csv(csv, t.str());
            atomic_write(svg, detail::bar_chart(title, cats, {{"measured", "#c0504d", meas}, {"expected", "#8c8c8c", exp}},
                                                stamp, ctx.cfg.analysis.min_expected));
        };
        freq_table(a.at("regions"), dir / "frequency_table.csv", dir / "frequency_bars.svg",
                   "Lesions per region: measured vs volume-corrected expectation");
        if (a.contains("arterial")) {
            freq_table(a.at("arterial"), dir / "arterial_table.csv", dir / "arterial_bars.svg",
                       "Lesions per arterial territory");
            freq_table(a.at("arterial_pooled"), dir / "arterial_pooled_table.csv", dir / "arterial_pooled_bars.svg",
                       "Lesions per pooled arterial group");
        }
        std::ostringstream hs;
        hs << "region,left,right,left_volume_mm3,right_volume_mm3,p_value\n";
        for (const auto& h : a.at("hemispheres"))
            hs << '"' << h["region"].get<std::string>() << "\"," << h["left"].get<std::int64_t>() << ','
               << h["right"].get<std::int64_t>() << ',' << detail::num(h["left_volume_mm3"]) << ','
               << detail::num(h["right_volume_mm3"]) << ',' << detail::num(h["p_value"]) << '\n';
        ctx.write_csv(dir / "hemisphere_table.csv", hs.str());

        if (a.contains("junction") && !a.at("junction").is_null()) {
            const auto& j = a.at("junction");
            std::ostringstream hc;
            hc << "bin_low,bin_high,density_lesions,density_random\n";
            const auto edges = j["bin_edges"].get<std::vector<double>>();
            const auto dt = j["density_tumour"].get<std::vector<double>>();
            const auto dr = j["density_random"].get<std::vector<double>>();
            std::vector<std::string> cats;
            for (std::size_t b = 0; b < dt.size(); ++b) {
                hc << detail::num(edges[b]) << ',' << detail::num(edges[b + 1]) << ',' << detail::num(dt[b]) << ','
                   << detail::num(dr[b]) << '\n';
                cats.push_back(detail::num(edges[b]));
            }
            ctx.write_csv(dir / "junction_histogram.csv", hc.str());
            atomic_write(dir / "junction_histogram.svg",
                         detail::bar_chart("Distance to junction (mm), p = " + detail::num(j["p_value"]), cats,
                                           {{"lesions", "#c0504d", dt}, {"random", "#8c8c8c", dr}}, stamp));
        }
    }
    if (!any)
        throw MissingInput(ctx.out("metrics") / "summary.json", "metrics or cohort results (run metrics or cohort-analyze)");
    ctx.log("report: " + dir.string());
}

} // namespace atlasreg::pipeline
