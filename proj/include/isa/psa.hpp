#pragma once

#include <chrono>
#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "isa/episode.hpp"
#include "isa/error.hpp"
#include "isa/fisher.hpp"
#include "isa/model.hpp"
#include "isa/tensor.hpp"

namespace isa {

struct AdaptationConfig {
    double lr = 1e-3;
    std::size_t iterations = 1;              // SGD iterations per stage
    std::vector<std::size_t> schedule;       // empty -> 1..K-1 at run time
    std::size_t k = 1;                       // selected layer count
    Reduction reduction = Reduction::top1();
    std::optional<std::size_t> combination_cap = 20;
    double temperature = kDefaultTemperature;
    std::uint64_t seed = 0;
    bool recompute_fisher_per_stage = false;  // not claimed by the method; off by default
    std::vector<std::string> manual_layers;   // bypass ISI when non-empty

    // Supplement preset: fixed mid+last layers, 2->3->4 schedule, one sampled
    // combination per pseudo-query.
    static AdaptationConfig fast_profile() {
        AdaptationConfig c;
        c.manual_layers = {"stage2.block1.conv", "stage3.block2.conv"};
        c.schedule = {2, 3, 4};
        c.combination_cap = 1;
        return c;
    }

    void validate(std::size_t k_shots) const {
        // lr == 0 is allowed as the "no update" reference run.
        if (lr < 0.0) throw ContractError("AdaptationConfig: learning rate must be >= 0");
        if (iterations < 1) throw ContractError("AdaptationConfig: iterations must be >= 1");
        if (temperature <= 0.0) throw ContractError("AdaptationConfig: temperature must be > 0");
        if (k < 1) throw ContractError("AdaptationConfig: k must be >= 1");
        for (std::size_t i = 0; i < schedule.size(); ++i) {
            if (schedule[i] < 1 || schedule[i] > k_shots - 1) {
                throw ContractError("AdaptationConfig: schedule entry " +
                                    std::to_string(schedule[i]) + " outside [1," +
                                    std::to_string(k_shots - 1) + "]");
            }
            if (i > 0 && schedule[i] <= schedule[i - 1]) {
                throw ContractError("AdaptationConfig: schedule must be strictly increasing");
            }
        }
    }

    std::vector<std::size_t> effective_schedule(std::size_t k_shots) const {
        if (!schedule.empty()) return schedule;
        std::vector<std::size_t> s;
        for (std::size_t n = 1; n + 1 <= k_shots; ++n) s.push_back(n);
        return s;
    }
};

struct StageRecord {
    std::size_t n = 0;
    std::size_t pair_count = 0;
    double loss_before = 0.0;
    double loss_after = 0.0;
    std::vector<std::string> updated_layers;
};

struct AdaptationTrace {
    std::vector<StageRecord> stages;
    SelectionResult selection;
    double wall_seconds = 0.0;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["selection"] = nlohmann::json::array();
        for (const auto& name : selection.layers) j["selection"].push_back(name);
        j["ranking"] = nlohmann::json::array();
        for (const auto& [name, score] : selection.ranking) {
            j["ranking"].push_back({{"layer", name}, {"score", score}});
        }
        j["stages"] = nlohmann::json::array();
        for (const auto& s : stages) {
            j["stages"].push_back({{"n", s.n},
                                   {"pair_count", s.pair_count},
                                   {"loss_before", s.loss_before},
                                   {"loss_after", s.loss_after},
                                   {"updated_layers", s.updated_layers}});
        }
        j["wall_seconds"] = wall_seconds;
        return j;
    }
};

// Stage failure carrying the trace accumulated so far.
class IsaRunError : public Error {
public:
    IsaRunError(const std::string& msg, AdaptationTrace trace)
        : Error(msg), trace(std::move(trace)) {}
    AdaptationTrace trace;
};

// Mean test-time loss over a stage's training pairs (Eq-style average over
// the emitted pair count). Support features are extracted once and shared
// across all pairs of the stage.
inline Tensor stage_loss(const LayeredModel& model, const std::vector<ImageSample>& supports,
                         const std::vector<TrainingPair>& pairs, double temperature) {
    if (pairs.empty()) throw ContractError("stage_loss: empty pair list");
    std::vector<Tensor> features(supports.size());
    std::vector<bool> needed(supports.size(), false);
    for (const auto& p : pairs) {
        needed[p.pseudo_query] = true;
        for (std::size_t idx : p.support) needed[idx] = true;
    }
    for (std::size_t i = 0; i < supports.size(); ++i) {
        if (needed[i]) features[i] = model.extract_features(supports[i].image);
    }

    std::vector<Tensor> losses;
    losses.reserve(pairs.size());
    for (std::size_t pi = 0; pi < pairs.size(); ++pi) {
        const auto& p = pairs[pi];
        try {
            std::vector<Tensor> fgs, bgs;
            for (std::size_t idx : p.support) {
                Prototype proto = masked_average_pool(features[idx], supports[idx].mask);
                fgs.push_back(proto.fg);
                bgs.push_back(proto.bg);
            }
            Prototype proto{mean_stack(fgs), mean_stack(bgs)};
            const Tensor& fq = features[p.pseudo_query];
            Tensor prob = predict(fq, proto, temperature);
            auto flags = downsample_mask(supports[p.pseudo_query].mask, prob.shape()[0],
                                         prob.shape()[1]);
            std::vector<double> target(flags.begin(), flags.end());
            losses.push_back(bce_mean(prob, Tensor::from(prob.shape(), std::move(target))));
        } catch (const DegenerateMaskError& e) {
            throw DegenerateMaskError("stage_loss: pair " + std::to_string(pi) + ": " + e.what());
        }
    }
    return mean_stack(losses);
}

// One progressive stage: SGD on the selected layers (weights and biases)
// against the stage loss. Transactional: the model is restored on error.
// Returns (loss before, loss after).
inline std::pair<double, double> psa_step(LayeredModel& model, const SelectionResult& selection,
                                          const std::vector<ImageSample>& supports,
                                          const std::vector<TrainingPair>& pairs,
                                          const AdaptationConfig& config) {
    if (selection.layers.empty()) throw ContractError("psa_step: empty selection");
    ParamSet params;
    for (const auto& name : selection.layers) {
        auto& layer = model.layer(name);
        params.push_back(layer.weight);
        params.push_back(layer.bias);
    }
    std::vector<std::vector<double>> snapshot;
    snapshot.reserve(params.size());
    for (const auto& p : params) snapshot.push_back(p.values());

    try {
        double first_loss = 0.0;
        for (std::size_t it = 0; it < config.iterations; ++it) {
            zero_grads(params);
            Tensor loss = stage_loss(model, supports, pairs, config.temperature);
            if (it == 0) first_loss = loss.item();
            backward(loss);
            sgd_step(params, config.lr);
        }
        const double final_loss =
            stage_loss(model, supports, pairs, config.temperature).item();
        zero_grads(params);
        return {first_loss, final_loss};
    } catch (...) {
        for (std::size_t i = 0; i < params.size(); ++i) params[i].values() = snapshot[i];
        throw;
    }
}

// Full ISA loop on a deep copy of the model: ISI once, then one psa_step per
// schedule entry with ascending support shots. The input model is never
// mutated.
inline std::pair<LayeredModel, AdaptationTrace> run_isa(const LayeredModel& model,
                                                        const Episode& episode,
                                                        const AdaptationConfig& config) {
    if (episode.supports.empty()) throw ContractError("run_isa: episode has no supports");
    std::vector<ImageSample> supports = episode.supports;
    if (supports.size() == 1) supports = augment_one_shot(supports[0], config.seed);
    const std::size_t k_shots = supports.size();
    config.validate(k_shots);

    const auto t0 = std::chrono::steady_clock::now();
    LayeredModel adapted = model.deep_copy();
    AdaptationTrace trace;

    if (!config.manual_layers.empty()) {
        trace.selection.layers = config.manual_layers;
        trace.selection.k = config.manual_layers.size();
        for (const auto& name : config.manual_layers) adapted.layer(name);  // existence check
    } else {
        trace.selection = isi(adapted, supports, config.k, config.reduction, config.temperature);
    }

    for (std::size_t n : config.effective_schedule(k_shots)) {
        try {
            if (config.recompute_fisher_per_stage && config.manual_layers.empty()) {
                trace.selection =
                    isi(adapted, supports, config.k, config.reduction, config.temperature);
            }
            auto pairs =
                hierarchical_pairs(k_shots, n, config.combination_cap, Rng::mix(config.seed, n));
            StageRecord rec;
            rec.n = n;
            rec.pair_count = pairs.size();
            rec.updated_layers = trace.selection.layers;
            std::tie(rec.loss_before, rec.loss_after) =
                psa_step(adapted, trace.selection, supports, pairs, config);
            trace.stages.push_back(std::move(rec));
        } catch (const Error& e) {
            trace.wall_seconds =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            throw IsaRunError("run_isa: stage n=" + std::to_string(n) + " failed: " + e.what(),
                              trace);
        }
    }
    trace.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return {std::move(adapted), std::move(trace)};
}

struct AdaptedSegmentation {
    std::vector<Segmentation> predictions;  // one per query
    AdaptationTrace trace;
};

// Adapt on the episode's supports, then segment every query with the adapted
// copy using the full (post-augmentation) support set.
inline AdaptedSegmentation adapt_and_segment(const LayeredModel& model, const Episode& episode,
                                             const AdaptationConfig& config) {
    if (episode.queries.empty()) throw ContractError("adapt_and_segment: episode has no queries");
    auto [adapted, trace] = run_isa(model, episode, config);
    std::vector<ImageSample> supports = episode.supports;
    if (supports.size() == 1) supports = augment_one_shot(supports[0], config.seed);
    AdaptedSegmentation out;
    out.trace = std::move(trace);
    for (const auto& q : episode.queries) {
        out.predictions.push_back(segment(adapted, supports, q, config.temperature));
    }
    return out;
}

}  // namespace isa
