#pragma once

// Cohort-level training of the velocity network (forward model) and
// per-case over-fitting (backward model).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "atlasreg/distmap.hpp"
#include "atlasreg/losses.hpp"
#include "atlasreg/nn.hpp"
#include "atlasreg/predict.hpp"

namespace atlasreg {

struct TrainConfig {
    int epochs_general = 350;
    int epochs_overfit = 1500;
    int batch_size = 4;
    double lr_general = 1e-3;
    double lr_overfit = 1e-4;
    LossWeights weights;
    std::uint64_t seed = 0;
    int steps = -1; // scaling-and-squaring steps; -1 selects automatically
    nn::NetConfig net;

    void validate(bool general = true) const
    {
        weights.validate();
        net.validate();
        if (general && epochs_general <= 0)
            throw std::invalid_argument("epochs_general must be positive");
        if (epochs_overfit < 0)
            throw std::invalid_argument("epochs_overfit must be nonnegative");
        if (batch_size < (general ? 2 : 1))
            throw std::invalid_argument("batch_size must be >= 2 for general training");
        if (!(lr_general > 0) || !(lr_overfit > 0))
            throw std::invalid_argument("learning rates must be positive");
        if (steps > 16)
            throw std::invalid_argument("steps must be <= 16");
    }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c)
{
    j = {{"epochs_general", c.epochs_general}, {"epochs_overfit", c.epochs_overfit}, {"batch_size", c.batch_size},
         {"lr_general", c.lr_general},         {"lr_overfit", c.lr_overfit},         {"weights", c.weights},
         {"seed", c.seed},                     {"steps", c.steps},                   {"network", c.net}};
}
inline void from_json(const nlohmann::json& j, TrainConfig& c)
{
    c.epochs_general = j.value("epochs_general", c.epochs_general);
    c.epochs_overfit = j.value("epochs_overfit", c.epochs_overfit);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr_general = j.value("lr_general", c.lr_general);
    c.lr_overfit = j.value("lr_overfit", c.lr_overfit);
    if (j.contains("weights"))
        c.weights = j.at("weights").get<LossWeights>();
    c.seed = j.value("seed", c.seed);
    c.steps = j.value("steps", c.steps);
    if (j.contains("network"))
        c.net = j.at("network").get<nn::NetConfig>();
}

/// One subject with its pre-alignment (subject -> atlas world affine).
struct CaseData {
    std::string id;
    ImageVolume image;
    LabelMap labels;
    AffineTransform subject_to_atlas;
    std::optional<Mask> tumour; // on the subject grid
};

struct AtlasData {
    ImageVolume image;
    LabelMap labels;
};

using EpochCallback = std::function<void(int epoch, const LossReport&)>;

namespace detail {

inline bool finite_gradients(const std::vector<std::vector<float>>& g)
{
    for (const auto& v : g)
        for (float x : v)
            if (!std::isfinite(x))
                return false;
    return true;
}

/// Everything the trainer needs per case, computed once.
struct PreparedCase {
    const CaseData* data = nullptr;
    DistanceMap dist;
    nn::Tensor input;
};

struct Evaluation {
    nn::VelocityNet::Cache cache;
    VelocityField velocity;
    SvfIntegration tape;
    TransformPair transforms;
};

inline Evaluation evaluate(const nn::VelocityNet& net, const VelocityPredictor& pred, const nn::Tensor& input,
                           int steps, bool keep_cache)
{
    Evaluation e;
    const auto out = net.forward(input, keep_cache ? &e.cache : nullptr);
    e.velocity = pred.to_velocity(out);
    e.tape = integrate_svf_taped(e.velocity, steps);
    e.transforms = e.tape.transforms();
    return e;
}

} // namespace detail

struct GeneralResult {
    nn::VelocityNet net;
    std::vector<LossReport> history;
    bool aborted = false;
    std::string abort_reason;
};

/// Forward-model training. Mini-batches are drawn from a seeded shuffle each
/// epoch; the pairwise term couples cases within a batch only. A non-finite
/// loss or gradient rolls the parameters back to the end of the last
/// finite epoch and stops.
inline GeneralResult train_general(const std::vector<CaseData>& cases, const AtlasData& atlas, const TrainConfig& cfg,
                                   const EpochCallback& on_epoch = {},
                                   std::optional<nn::VelocityNet> initial = std::nullopt)
{
    cfg.validate(true);
    if (cases.size() < 2)
        throw std::invalid_argument("train_general: at least 2 training cases are required");
    const auto atlas_dist = distance_map(atlas.labels, cfg.weights.gamma);
    const VelocityPredictor pred(atlas.labels.grid(), cfg.net.grid_factor);
    std::vector<detail::PreparedCase> prepared(cases.size());
    for (std::size_t i = 0; i < cases.size(); ++i) {
        prepared[i].data = &cases[i];
        prepared[i].dist = distance_map(cases[i].labels, cfg.weights.gamma);
        prepared[i].input = pred.make_input(cases[i].image, cases[i].subject_to_atlas, atlas.image);
    }

    GeneralResult res{initial ? *initial : nn::VelocityNet(cfg.net, cfg.seed), {}, false, {}};
    nn::VelocityNet last_good = res.net;
    nn::Adam opt;
    opt.lr = cfg.lr_general;
    std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
    std::vector<std::size_t> order(cases.size());
    std::iota(order.begin(), order.end(), 0);
    const std::size_t bs = std::size_t(cfg.batch_size);

    for (int epoch = 0; epoch < cfg.epochs_general && !res.aborted; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        LossReport sum;
        sum.mode = LossMode::general;
        int batches = 0;
        for (std::size_t start = 0, end = 0; start < order.size(); start = end) {
            end = std::min(order.size(), start + bs);
            // A trailing singleton batch joins the previous one so every batch
            // carries the pairwise term.
            if (order.size() - end == 1)
                end = order.size();
            std::vector<detail::Evaluation> evals;
            std::vector<LossCase> batch;
            evals.reserve(end - start);
            try {
                for (std::size_t b = start; b < end; ++b)
                    evals.push_back(detail::evaluate(res.net, pred, prepared[order[b]].input, cfg.steps, true));
            } catch (const FieldError& e) {
                res.aborted = true;
                res.abort_reason = e.what();
                break;
            }
            for (std::size_t b = start; b < end; ++b) {
                const auto& pc = prepared[order[b]];
                const auto& ev = evals[b - start];
                batch.push_back({pc.dist, pc.data->subject_to_atlas, ev.transforms.forward, ev.transforms.inverse});
            }
            std::vector<FieldGradients> fgrads;
            const auto rep = general_loss(batch, {atlas.labels, atlas_dist}, cfg.weights, &fgrads);
            if (!std::isfinite(rep.total)) {
                res.aborted = true;
                res.abort_reason = "non-finite loss";
                break;
            }
            auto grads = res.net.zero_gradients();
            for (std::size_t b = 0; b < evals.size(); ++b) {
                const auto gv = evals[b].tape.backward(fgrads[b].forward, fgrads[b].inverse);
                res.net.backward(evals[b].cache, pred.velocity_backward(gv), grads);
            }
            if (!detail::finite_gradients(grads)) {
                res.aborted = true;
                res.abort_reason = "non-finite gradient";
                break;
            }
            opt.step(res.net, grads);
            sum.total += rep.total;
            sum.sim += rep.sim;
            sum.reg += rep.reg;
            sum.pairwise_sim += rep.pairwise_sim;
            sum.vol += rep.vol;
            sum.degenerate |= rep.degenerate;
            ++batches;
        }
        if (res.aborted) {
            res.net = last_good;
            break;
        }
        for (double* x : {&sum.total, &sum.sim, &sum.reg, &sum.pairwise_sim, &sum.vol})
            *x /= double(batches);
        res.history.push_back(sum);
        last_good = res.net;
        if (on_epoch)
            on_epoch(epoch, sum);
    }
    return res;
}

struct OverfitResult {
    nn::VelocityNet net;
    VelocityField velocity;
    TransformPair transforms;
    std::vector<LossReport> history;
    int best_step = 0; // optimiser steps applied to the chosen state; 0 is the base model
    double best_loss = 0.0;
    bool diverged = false;
};

/// Backward-model over-fitting of a copy of `base` to one case. The result
/// is the lowest-loss state seen (the base model's transform for zero epochs).
inline OverfitResult overfit_case(const nn::VelocityNet& base, const CaseData& c, const AtlasData& atlas,
                                  const TrainConfig& cfg, const EpochCallback& on_epoch = {})
{
    cfg.validate(false);
    const auto atlas_dist = distance_map(atlas.labels, cfg.weights.gamma);
    const auto dist = distance_map(c.labels, cfg.weights.gamma);
    const VelocityPredictor pred(atlas.labels.grid(), base.config().grid_factor);
    const auto input = pred.make_input(c.image, c.subject_to_atlas, atlas.image);

    OverfitResult res;
    res.net = base;
    nn::Adam opt;
    opt.lr = cfg.lr_overfit;
    nn::VelocityNet best_net = base;
    double best = std::numeric_limits<double>::infinity();

    for (int epoch = 0; epoch <= cfg.epochs_overfit; ++epoch) {
        const bool last = epoch == cfg.epochs_overfit;
        detail::Evaluation ev;
        try {
            ev = detail::evaluate(res.net, pred, input, cfg.steps, !last);
        } catch (const FieldError&) {
            res.diverged = true;
            break;
        }
        FieldGradients fg;
        const auto rep = overfit_loss({dist, c.subject_to_atlas, ev.transforms.forward, ev.transforms.inverse},
                                      {atlas.labels, atlas_dist}, cfg.weights, last ? nullptr : &fg);
        if (!std::isfinite(rep.total)) {
            res.diverged = true;
            break;
        }
        if (rep.total < best) {
            best = rep.total;
            best_net = res.net;
            res.best_step = epoch;
        }
        if (last)
            break;
        res.history.push_back(rep);
        if (on_epoch)
            on_epoch(epoch, rep);
        auto grads = res.net.zero_gradients();
        res.net.backward(ev.cache, pred.velocity_backward(ev.tape.backward(fg.forward, fg.inverse)), grads);
        if (!detail::finite_gradients(grads)) {
            res.diverged = true;
            break;
        }
        opt.step(res.net, grads);
    }
    res.net = std::move(best_net);
    res.best_loss = best;
    res.velocity = pred.to_velocity(res.net.forward(input));
    res.transforms = integrate_svf(res.velocity, cfg.steps);
    return res;
}

/// Transform pair the given network predicts for one case.
inline TransformPair register_case(const nn::VelocityNet& net, const CaseData& c, const AtlasData& atlas, int steps = -1)
{
    return integrate_svf(predict_velocity(net, c.image, c.subject_to_atlas, atlas.image, atlas.labels.grid()), steps);
}

} // namespace atlasreg
