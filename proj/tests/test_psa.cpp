#include <catch2/catch_amalgamated.hpp>

#include <algorithm>

#include "isa/psa.hpp"
#include "isa/synth.hpp"
#include "oracles.hpp"

using namespace isa;

namespace {

LayeredModel toy_model(std::uint64_t seed = 90) { return LayeredModel::default_backbone(seed); }

Episode toy_episode(std::uint64_t seed, std::size_t k = 3) {
    return generate_episode(DomainSpec::source(), k, 1, seed);
}

std::vector<std::vector<double>> snapshot(const LayeredModel& m) {
    std::vector<std::vector<double>> out;
    for (const auto& p : m.parameters()) out.push_back(p.values());
    return out;
}

}  // namespace

TEST_CASE("config validation") {
    AdaptationConfig c;
    c.schedule = {1, 2, 4};
    REQUIRE_NOTHROW(c.validate(5));
    c.schedule = {2, 2};
    REQUIRE_THROWS_AS(c.validate(5), ContractError);
    c.schedule = {3, 1};
    REQUIRE_THROWS_AS(c.validate(5), ContractError);
    c.schedule = {5};
    REQUIRE_THROWS_AS(c.validate(5), ContractError);
    c.schedule.clear();
    c.lr = -1.0;
    REQUIRE_THROWS_AS(c.validate(5), ContractError);
    c.lr = 1e-3;
    c.iterations = 0;
    REQUIRE_THROWS_AS(c.validate(5), ContractError);
}

TEST_CASE("default schedule covers 1..K-1") {
    AdaptationConfig c;
    REQUIRE(c.effective_schedule(5) == std::vector<std::size_t>{1, 2, 3, 4});
    c.schedule = {4};
    REQUIRE(c.effective_schedule(5) == std::vector<std::size_t>{4});
}

TEST_CASE("stage_loss mean invariance and per-pair oracle") {
    auto model = toy_model();
    Episode ep = toy_episode(100, 4);
    auto pairs = hierarchical_pairs(4, 2, std::nullopt, 1);
    REQUIRE(pairs.size() == 4 * 3);

    SECTION("duplicated single pair has the same loss as the pair alone") {
        std::vector<TrainingPair> one{pairs[0]};
        std::vector<TrainingPair> four{pairs[0], pairs[0], pairs[0], pairs[0]};
        const double a = stage_loss(model, ep.supports, one, 10.0).item();
        const double b = stage_loss(model, ep.supports, four, 10.0).item();
        REQUIRE(a == Catch::Approx(b));
    }
    SECTION("stage loss equals the average of individually computed pair losses") {
        std::vector<TrainingPair> six(pairs.begin(), pairs.begin() + 6);
        const double combined = stage_loss(model, ep.supports, six, 10.0).item();
        double acc = 0.0;
        for (const auto& p : six) {
            std::vector<ImageSample> sup;
            for (std::size_t i : p.support) sup.push_back(ep.supports[i]);
            acc += pair_loss(model, sup, ep.supports[p.pseudo_query], 10.0).item();
        }
        REQUIRE(combined == Catch::Approx(acc / 6.0));
    }
    SECTION("near-perfect prediction gives near-zero loss") {
        // query mask equal to prediction threshold pattern is not needed;
        // instead check bce on an explicitly perfect probability map
        Episode e2 = toy_episode(101, 2);
        Tensor f = model.extract_features(e2.supports[0].image);
        auto flags = downsample_mask(e2.supports[0].mask, f.shape()[1], f.shape()[2]);
        std::vector<double> perfect(flags.size());
        for (std::size_t i = 0; i < flags.size(); ++i) {
            perfect[i] = flags[i] ? 1.0 - 1e-7 : 1e-7;
        }
        std::vector<double> target(flags.begin(), flags.end());
        Tensor loss = bce_mean(Tensor::from({f.shape()[1], f.shape()[2]}, perfect),
                               Tensor::from({f.shape()[1], f.shape()[2]}, target));
        REQUIRE(loss.item() < 1e-5);
    }
    REQUIRE_THROWS_AS(stage_loss(model, ep.supports, {}, 10.0), ContractError);
}

TEST_CASE("psa_step updates exactly the selected layers") {
    auto model = toy_model(91);
    Episode ep = toy_episode(102, 4);
    auto pairs = hierarchical_pairs(4, 2, std::nullopt, 2);
    SelectionResult sel;
    sel.layers = {"stage2.block0.conv"};
    sel.k = 1;
    AdaptationConfig cfg;

    auto before = snapshot(model);
    auto [loss_before, loss_after] = psa_step(model, sel, ep.supports, pairs, cfg);
    auto names = model.layer_names();
    auto params = model.parameters();  // weight,bias per layer in order
    for (std::size_t l = 0; l < names.size(); ++l) {
        const bool selected = names[l] == "stage2.block0.conv";
        const bool w_same = params[2 * l].values() == before[2 * l];
        const bool b_same = params[2 * l + 1].values() == before[2 * l + 1];
        if (selected) {
            REQUIRE_FALSE(w_same);
        } else {
            REQUIRE(w_same);
            REQUIRE(b_same);
        }
    }
    REQUIRE(loss_before > 0.0);
}

TEST_CASE("psa_step with lr 0 is a no-op; empty selection rejected") {
    auto model = toy_model(92);
    Episode ep = toy_episode(103, 3);
    auto pairs = hierarchical_pairs(3, 1, std::nullopt, 0);
    AdaptationConfig cfg;
    cfg.lr = 0.0;
    SelectionResult sel;
    sel.layers = {"stage1.block0.conv"};
    auto before = snapshot(model);
    psa_step(model, sel, ep.supports, pairs, cfg);
    auto after = snapshot(model);
    REQUIRE(after == before);

    SelectionResult empty;
    REQUIRE_THROWS_AS(psa_step(model, empty, ep.supports, pairs, cfg), ContractError);
}

TEST_CASE("psa_step descent on seeded toy episodes") {
    // one SGD iteration at lr 1e-3 should reduce the stage loss almost always
    int descended = 0;
    const int trials = 100;
    for (int t = 0; t < trials; ++t) {
        auto model = toy_model(2000 + t);
        Episode ep = toy_episode(3000 + t, 3);
        auto pairs = hierarchical_pairs(3, 2, std::nullopt, t);
        SelectionResult sel;
        sel.layers = {"stage3.block2.conv"};
        AdaptationConfig cfg;  // lr 1e-3, one iteration
        auto [before, after] = psa_step(model, sel, ep.supports, pairs, cfg);
        if (after <= before) ++descended;
    }
    REQUIRE(descended >= 95);
}

TEST_CASE("run_isa isolation and trace structure") {
    auto model = toy_model(93);
    Episode ep = generate_episode(DomainSpec::texture_shift(), 5, 1, 104);
    AdaptationConfig cfg;
    auto before = snapshot(model);

    auto [adapted, trace] = run_isa(model, ep, cfg);
    REQUIRE(snapshot(model) == before);  // original untouched
    REQUIRE(trace.stages.size() == 4);
    for (std::size_t i = 0; i < 4; ++i) {
        REQUIRE(trace.stages[i].n == i + 1);
        REQUIRE(trace.stages[i].updated_layers == trace.selection.layers);
    }
    REQUIRE(trace.selection.layers.size() == 1);

    // parameter locality: exactly the selected layers differ in the copy
    auto names = adapted.layer_names();
    auto params = adapted.parameters();
    for (std::size_t l = 0; l < names.size(); ++l) {
        const bool selected = std::find(trace.selection.layers.begin(),
                                        trace.selection.layers.end(),
                                        names[l]) != trace.selection.layers.end();
        const bool w_same = params[2 * l].values() == before[2 * l];
        if (selected) {
            REQUIRE_FALSE(w_same);
        } else {
            REQUIRE(w_same);
            REQUIRE(params[2 * l + 1].values() == before[2 * l + 1]);
        }
    }
}

TEST_CASE("single-entry schedule equals one psa_step") {
    auto model = toy_model(94);
    Episode ep = toy_episode(105, 5);
    AdaptationConfig cfg;
    cfg.schedule = {4};
    cfg.manual_layers = {"stage3.block2.conv"};
    auto [adapted, trace] = run_isa(model, ep, cfg);
    REQUIRE(trace.stages.size() == 1);
    REQUIRE(trace.stages[0].n == 4);

    // replicate by hand: one psa_step on a fresh copy with identical pairs
    auto manual = model.deep_copy();
    SelectionResult sel;
    sel.layers = {"stage3.block2.conv"};
    auto pairs = hierarchical_pairs(5, 4, cfg.combination_cap, Rng::mix(cfg.seed, 4));
    psa_step(manual, sel, ep.supports, pairs, cfg);
    REQUIRE(manual.layer("stage3.block2.conv").weight.values() ==
            adapted.layer("stage3.block2.conv").weight.values());
}

TEST_CASE("run_isa augments 1-shot episodes") {
    auto model = toy_model(95);
    Episode ep = toy_episode(106, 1);
    AdaptationConfig cfg;
    auto [adapted, trace] = run_isa(model, ep, cfg);
    REQUIRE(trace.stages.size() == 2);  // augmented K=3 -> schedule 1,2
    REQUIRE(trace.stages[0].n == 1);
    REQUIRE(trace.stages[1].n == 2);
}

TEST_CASE("chain fidelity: loss-before of stage n+1 reflects stage n updates") {
    auto model = toy_model(96);
    Episode ep = generate_episode(DomainSpec::shape_shift(), 4, 1, 107);
    AdaptationConfig cfg;
    cfg.manual_layers = {"stage3.block2.conv"};
    auto [adapted, trace] = run_isa(model, ep, cfg);
    REQUIRE(trace.stages.size() == 3);

    // replay: after applying stage 1 by hand, stage 2's loss-before matches
    auto replay = model.deep_copy();
    SelectionResult sel;
    sel.layers = cfg.manual_layers;
    auto pairs1 = hierarchical_pairs(4, 1, cfg.combination_cap, Rng::mix(cfg.seed, 1));
    psa_step(replay, sel, ep.supports, pairs1, cfg);
    auto pairs2 = hierarchical_pairs(4, 2, cfg.combination_cap, Rng::mix(cfg.seed, 2));
    const double loss2 = stage_loss(replay, ep.supports, pairs2, cfg.temperature).item();
    REQUIRE(loss2 == Catch::Approx(trace.stages[1].loss_before).margin(1e-12));
}

TEST_CASE("adapt_and_segment with lr 0 reproduces the baseline prediction") {
    auto model = toy_model(97);
    Episode ep = toy_episode(108, 3);
    AdaptationConfig cfg;
    cfg.lr = 0.0;
    auto adapted = adapt_and_segment(model, ep, cfg);
    Segmentation baseline = segment(model, ep.supports, ep.queries[0], cfg.temperature);
    REQUIRE(adapted.predictions[0].prob.values() == baseline.prob.values());
    REQUIRE(adapted.predictions[0].pred_mask.values() == baseline.pred_mask.values());
}

TEST_CASE("adapt_and_segment is deterministic") {
    auto model = toy_model(98);
    Episode ep = generate_episode(DomainSpec::texture_shift(), 3, 2, 109);
    AdaptationConfig cfg;
    auto a = adapt_and_segment(model, ep, cfg);
    auto b = adapt_and_segment(model, ep, cfg);
    for (std::size_t q = 0; q < a.predictions.size(); ++q) {
        REQUIRE(a.predictions[q].pred_mask.values() == b.predictions[q].pred_mask.values());
    }
}

TEST_CASE("episode order independence") {
    auto model = toy_model(99);
    std::vector<Episode> episodes;
    for (int i = 0; i < 4; ++i) {
        episodes.push_back(generate_episode(DomainSpec::shape_shift(), 3, 1, 200 + i));
    }
    AdaptationConfig cfg;
    std::vector<std::vector<double>> forward_order;
    for (const auto& ep : episodes) {
        forward_order.push_back(
            adapt_and_segment(model, ep, cfg).predictions[0].pred_mask.values());
    }
    for (std::size_t r = 0; r < episodes.size(); ++r) {
        const auto& ep = episodes[episodes.size() - 1 - r];
        auto got = adapt_and_segment(model, ep, cfg).predictions[0].pred_mask.values();
        REQUIRE(got == forward_order[episodes.size() - 1 - r]);
    }
}

TEST_CASE("fast profile preset") {
    auto cfg = AdaptationConfig::fast_profile();
    REQUIRE(cfg.manual_layers ==
            std::vector<std::string>{"stage2.block1.conv", "stage3.block2.conv"});
    REQUIRE(cfg.schedule == std::vector<std::size_t>{2, 3, 4});
    REQUIRE(cfg.combination_cap == 1);

    auto model = toy_model(89);
    Episode ep = toy_episode(110, 5);
    auto [adapted, trace] = run_isa(model, ep, cfg);
    REQUIRE(trace.stages.size() == 3);
    for (const auto& s : trace.stages) {
        REQUIRE(s.pair_count == 5);  // one sampled combination per pseudo-query
    }
}
