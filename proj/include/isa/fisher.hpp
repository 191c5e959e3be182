#pragma once

#include <algorithm>
#include <cstdint>
#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include "isa/episode.hpp"
#include "isa/error.hpp"
#include "isa/model.hpp"
#include "isa/tensor.hpp"

namespace isa {

// Test-time loss for one support/pseudo-query pair: BCE between the
// prototype-matching prediction and the pseudo-query mask at feature
// resolution.
inline Tensor pair_loss(const LayeredModel& model, const std::vector<ImageSample>& supports,
                        const ImageSample& query, double temperature = kDefaultTemperature) {
    Prototype proto = support_prototype(model, supports);
    Tensor fq = model.extract_features(query.image);
    Tensor prob = predict(fq, proto, temperature);
    auto flags = downsample_mask(query.mask, prob.shape()[0], prob.shape()[1]);
    std::vector<double> target(flags.begin(), flags.end());
    return bce_mean(prob, Tensor::from(prob.shape(), std::move(target)));
}

// Per-parameter empirical Fisher values for each conv weight layer, plus the
// sample count they were averaged over.
struct FisherReport {
    std::vector<std::pair<std::string, Tensor>> per_layer;  // registry order
    std::size_t sample_count = 0;

    const Tensor& layer_values(const std::string& name) const {
        for (const auto& [n, t] : per_layer) {
            if (n == name) return t;
        }
        throw ContractError("FisherReport: no layer named " + name);
    }
};

// Layer score reduction over per-parameter Fisher values.
struct Reduction {
    enum class Kind { Top1, TopKMean, Mean };
    Kind kind = Kind::Top1;
    std::size_t j = 1;  // only for TopKMean

    static Reduction top1() { return {Kind::Top1, 1}; }
    static Reduction topk_mean(std::size_t j) { return {Kind::TopKMean, j}; }
    static Reduction mean() { return {Kind::Mean, 1}; }

    std::string str() const {
        switch (kind) {
            case Kind::Top1: return "top1";
            case Kind::TopKMean: return "top" + std::to_string(j) + "-mean";
            case Kind::Mean: return "mean";
        }
        return "?";
    }
};

// Ordered (registry order) layer -> score map.
using ScoreMap = std::vector<std::pair<std::string, double>>;

struct SelectionResult {
    std::vector<std::string> layers;  // best first
    std::size_t k = 0;
    ScoreMap ranking;  // full score map in registry order, for diagnostics
};

// Mean of squared per-pair gradients of the test-time loss, for every conv
// weight tensor. Pairs are (support subset, pseudo-query). Model parameters
// are left untouched; gradients are zeroed on exit.
inline FisherReport empirical_fisher(
    LayeredModel& model,
    const std::vector<std::pair<std::vector<ImageSample>, ImageSample>>& pairs,
    double temperature = kDefaultTemperature) {
    if (pairs.empty()) throw ContractError("empirical_fisher: need at least one pair");
    auto layers = model.layers();
    std::vector<std::vector<double>> acc;
    acc.reserve(layers.size());
    for (const auto* l : layers) acc.emplace_back(l->weight.size(), 0.0);

    ParamSet weights;
    for (auto* l : layers) weights.push_back(l->weight);

    for (std::size_t pi = 0; pi < pairs.size(); ++pi) {
        zero_grads(weights);
        Tensor loss;
        try {
            loss = pair_loss(model, pairs[pi].first, pairs[pi].second, temperature);
        } catch (const DegenerateMaskError& e) {
            throw DegenerateMaskError("empirical_fisher: pair " + std::to_string(pi) + ": " +
                                      e.what());
        }
        backward(loss);
        for (std::size_t li = 0; li < layers.size(); ++li) {
            const auto& g = layers[li]->weight.grad();
            for (std::size_t i = 0; i < g.size(); ++i) acc[li][i] += g[i] * g[i];
        }
    }
    zero_grads(weights);

    FisherReport report;
    report.sample_count = pairs.size();
    const double inv = 1.0 / static_cast<double>(pairs.size());
    for (std::size_t li = 0; li < layers.size(); ++li) {
        for (double& v : acc[li]) {
            v *= inv;
            if (v < 0.0) throw ContractError("empirical_fisher: negative Fisher value");
        }
        report.per_layer.emplace_back(layers[li]->name,
                                      Tensor::from(layers[li]->weight.shape(),
                                                   std::move(acc[li])));
    }
    return report;
}

// Reduce per-parameter Fisher values to one score per layer.
inline ScoreMap structure_scores(const FisherReport& report, const Reduction& reduction) {
    if (report.per_layer.empty()) throw ContractError("structure_scores: empty report");
    ScoreMap scores;
    for (const auto& [name, values] : report.per_layer) {
        const auto& v = values.values();
        double score = 0.0;
        switch (reduction.kind) {
            case Reduction::Kind::Top1:
                for (double x : v) score = std::max(score, std::abs(x));
                break;
            case Reduction::Kind::TopKMean: {
                std::size_t j = reduction.j;
                if (j > v.size()) {
                    std::cerr << "structure_scores: top" << j << " clamped to layer size "
                              << v.size() << " for " << name << "\n";
                    j = v.size();
                }
                std::vector<double> mags(v.size());
                for (std::size_t i = 0; i < v.size(); ++i) mags[i] = std::abs(v[i]);
                std::partial_sort(mags.begin(), mags.begin() + j, mags.end(),
                                  std::greater<>());
                double s = 0.0;
                for (std::size_t i = 0; i < j; ++i) s += mags[i];
                score = s / static_cast<double>(j);
                break;
            }
            case Reduction::Kind::Mean: {
                double s = 0.0;
                for (double x : v) s += std::abs(x);
                score = s / static_cast<double>(v.size());
                break;
            }
        }
        scores.emplace_back(name, score);
    }
    return scores;
}

// Top-k layers by score, ties broken by registry (map) order.
inline SelectionResult select_layers(const ScoreMap& scores, std::size_t k) {
    if (scores.empty()) throw ContractError("select_layers: empty score map");
    if (k < 1) throw ContractError("select_layers: k must be >= 1");
    std::vector<std::size_t> order(scores.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return scores[a].second > scores[b].second;
    });
    SelectionResult result;
    result.k = k;
    result.ranking = scores;
    const std::size_t take = std::min(k, scores.size());
    for (std::size_t i = 0; i < take; ++i) result.layers.push_back(scores[order[i]].first);
    return result;
}

// Informative Structure Identification: empirical Fisher on cyclic pairs,
// layer scores, top-k selection. Read-only with respect to the model.
inline SelectionResult isi(LayeredModel& model, const std::vector<ImageSample>& supports,
                           std::size_t k, const Reduction& reduction,
                           double temperature = kDefaultTemperature) {
    if (supports.size() < 2) {
        throw ContractError("isi: need at least 2 effective supports (augment 1-shot first)");
    }
    std::vector<std::pair<std::vector<ImageSample>, ImageSample>> pairs;
    for (const auto& cp : cyclic_pairs(supports.size())) {
        std::vector<ImageSample> pool;
        for (std::size_t idx : cp.pool) pool.push_back(supports[idx]);
        pairs.emplace_back(std::move(pool), supports[cp.pseudo_query]);
    }
    FisherReport report = empirical_fisher(model, pairs, temperature);
    return select_layers(structure_scores(report, reduction), k);
}

}  // namespace isa
