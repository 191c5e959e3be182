#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <set>

#include "isa/episode.hpp"
#include "isa/synth.hpp"
#include "oracles.hpp"

using namespace isa;

TEST_CASE("cyclic_pairs structure") {
    for (std::size_t k : {2u, 5u}) {
        auto pairs = cyclic_pairs(k);
        REQUIRE(pairs.size() == k);
        std::vector<std::size_t> as_query(k, 0), in_pool(k, 0);
        for (const auto& p : pairs) {
            REQUIRE(p.pool.size() == k - 1);
            ++as_query[p.pseudo_query];
            for (std::size_t idx : p.pool) {
                REQUIRE(idx != p.pseudo_query);
                ++in_pool[idx];
            }
        }
        for (std::size_t i = 0; i < k; ++i) {
            REQUIRE(as_query[i] == 1);
            REQUIRE(in_pool[i] == k - 1);
        }
    }
    REQUIRE_THROWS_AS(cyclic_pairs(1), ContractError);
}

TEST_CASE("enumerate_combinations uncapped") {
    auto all = enumerate_combinations(4, 2, std::nullopt, 0);
    REQUIRE(all.size() == 6);
    // lexicographic order
    REQUIRE(all.front() == std::vector<std::size_t>{0, 1});
    REQUIRE(all.back() == std::vector<std::size_t>{2, 3});

    auto whole = enumerate_combinations(4, 4, std::nullopt, 0);
    REQUIRE(whole.size() == 1);
    REQUIRE(whole[0] == std::vector<std::size_t>{0, 1, 2, 3});

    REQUIRE_THROWS_AS(enumerate_combinations(3, 4, std::nullopt, 0), ContractError);
}

TEST_CASE("capped enumeration is a deterministic distinct sample") {
    auto a = enumerate_combinations(10, 5, 20, 7);
    auto b = enumerate_combinations(10, 5, 20, 7);
    REQUIRE(a.size() == 20);
    REQUIRE(a == b);
    std::set<std::vector<std::size_t>> distinct(a.begin(), a.end());
    REQUIRE(distinct.size() == 20);
    for (const auto& combo : a) {
        REQUIRE(combo.size() == 5);
        for (std::size_t v : combo) REQUIRE(v < 10);
    }
    auto c = enumerate_combinations(10, 5, 20, 8);
    REQUIRE(a != c);
}

TEST_CASE("hierarchical pair counts match K*C(K-1,n)") {
    for (std::size_t k = 2; k <= 6; ++k) {
        for (std::size_t n = 1; n <= k - 1; ++n) {
            auto pairs = hierarchical_pairs(k, n, std::nullopt, 3);
            REQUIRE(pairs.size() == k * binomial(k - 1, n));
            for (const auto& p : pairs) {
                REQUIRE(p.support.size() == n);
                for (std::size_t idx : p.support) REQUIRE(idx != p.pseudo_query);
            }
        }
    }
}

TEST_CASE("hierarchical pairs exact small cases") {
    // K=5, n=4: full-pool case, equals cyclic pairs
    auto full = hierarchical_pairs(5, 4, std::nullopt, 0);
    REQUIRE(full.size() == 5);
    // K=3, n=1: 3 pseudo-queries x 2 singleton supports
    auto singles = hierarchical_pairs(3, 1, std::nullopt, 0);
    REQUIRE(singles.size() == 6);
    std::set<std::pair<std::size_t, std::size_t>> seen;
    for (const auto& p : singles) seen.insert({p.pseudo_query, p.support[0]});
    REQUIRE(seen.size() == 6);
}

TEST_CASE("hierarchical pairs deterministic per seed") {
    auto a = hierarchical_pairs(6, 3, 4, 42);
    auto b = hierarchical_pairs(6, 3, 4, 42);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        REQUIRE(a[i].support == b[i].support);
        REQUIRE(a[i].pseudo_query == b[i].pseudo_query);
    }
}

TEST_CASE("augment_one_shot") {
    Episode ep = generate_episode(DomainSpec::source(), 1, 0, 5);
    const ImageSample& s = ep.supports[0];
    auto aug = augment_one_shot(s, 0);
    REQUIRE(aug.size() == 3);
    REQUIRE(aug[0].image.values() == s.image.values());
    REQUIRE(aug[0].mask.values() == s.mask.values());

    // flipping twice returns the original
    auto twice = augment_one_shot(aug[1], 0);
    REQUIRE(twice[1].image.values() == s.image.values());

    double orig_fg = 0.0;
    for (double v : s.mask.values()) orig_fg += v;
    for (const auto& a : aug) {
        double fg = 0.0;
        for (double v : a.mask.values()) {
            REQUIRE((v == 0.0 || v == 1.0));
            fg += v;
        }
        REQUIRE(fg == orig_fg);
        a.validate();
    }
}

TEST_CASE("non-square augmentation falls back to vertical flip") {
    std::vector<double> img(3 * 4 * 8, 0.5);
    std::vector<double> mask(4 * 8, 0.0);
    mask[0] = 1.0;
    ImageSample s{Tensor::from({3, 4, 8}, img), Tensor::from({4, 8}, mask)};
    auto aug = augment_one_shot(s, 0);
    REQUIRE(aug.size() == 3);
    REQUIRE(aug[2].mask.values()[3 * 8] == 1.0);  // vertical flip moved (0,0) to (3,0)
}

TEST_CASE("episode directory round trip") {
    Episode ep = generate_episode(DomainSpec::texture_shift(), 3, 2, 11);
    const std::string dir = "episode_io_test";
    save_episode(dir, ep);
    Episode back = load_episode(dir);
    REQUIRE(back.supports.size() == ep.supports.size());
    REQUIRE(back.queries.size() == ep.queries.size());
    REQUIRE(back.class_id == ep.class_id);
    REQUIRE(back.domain == ep.domain);
    // generator emits 8-bit quantized values, so the round trip is bit exact
    for (std::size_t i = 0; i < ep.supports.size(); ++i) {
        REQUIRE(back.supports[i].image.values() == ep.supports[i].image.values());
        REQUIRE(back.supports[i].mask.values() == ep.supports[i].mask.values());
    }
    std::filesystem::remove_all(dir);
}
