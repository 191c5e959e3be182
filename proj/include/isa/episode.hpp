#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "isa/error.hpp"
#include "isa/model.hpp"
#include "isa/pgm.hpp"
#include "isa/rng.hpp"

namespace isa {

// One few-shot task: K labeled supports plus queries from one class/domain.
struct Episode {
    std::vector<ImageSample> supports;
    std::vector<ImageSample> queries;
    int class_id = 0;
    std::string domain;
    std::uint64_t episode_id = 0;
};

// Indices into an episode's support list. The pseudo-query is never a member
// of its own support subset.
struct TrainingPair {
    std::vector<std::size_t> support;  // support indices, ascending
    std::size_t pseudo_query;          // support index used as query
    std::size_t combo_index;           // rank of the subset within its pool enumeration
};

struct CyclicPair {
    std::vector<std::size_t> pool;  // all supports except the pseudo-query
    std::size_t pseudo_query;
};

// Each support takes one turn as the pseudo-query; the rest form its pool.
inline std::vector<CyclicPair> cyclic_pairs(std::size_t k) {
    if (k < 2) {
        throw ContractError("cyclic_pairs: need at least 2 supports, got " + std::to_string(k));
    }
    std::vector<CyclicPair> out;
    out.reserve(k);
    for (std::size_t i = 0; i < k; ++i) {
        CyclicPair p;
        p.pseudo_query = i;
        for (std::size_t j = 0; j < k; ++j) {
            if (j != i) p.pool.push_back(j);
        }
        out.push_back(std::move(p));
    }
    return out;
}

inline std::uint64_t binomial(std::uint64_t m, std::uint64_t n) {
    if (n > m) return 0;
    n = std::min(n, m - n);
    std::uint64_t r = 1;
    for (std::uint64_t i = 1; i <= n; ++i) {
        r = r * (m - n + i) / i;
    }
    return r;
}

namespace detail {

// Lexicographic unranking of an n-combination of {0..m-1}.
inline std::vector<std::size_t> unrank_combination(std::uint64_t rank, std::size_t m,
                                                   std::size_t n) {
    std::vector<std::size_t> combo;
    combo.reserve(n);
    std::size_t next = 0;
    for (std::size_t slot = n; slot > 0; --slot) {
        for (std::size_t v = next;; ++v) {
            const std::uint64_t block = binomial(m - v - 1, slot - 1);
            if (rank < block) {
                combo.push_back(v);
                next = v + 1;
                break;
            }
            rank -= block;
        }
    }
    return combo;
}

}  // namespace detail

// All C(m,n) index subsets in lexicographic order; if a cap is given and the
// count exceeds it, a seeded uniform sample (without replacement) of cap
// subsets, still emitted in lexicographic rank order.
inline std::vector<std::vector<std::size_t>> enumerate_combinations(
    std::size_t m, std::size_t n, std::optional<std::size_t> cap, std::uint64_t seed) {
    if (n < 1 || n > m) {
        throw ContractError("enumerate_combinations: n=" + std::to_string(n) +
                            " out of range for pool of " + std::to_string(m));
    }
    const std::uint64_t total = binomial(m, n);
    std::vector<std::vector<std::size_t>> out;
    if (!cap || total <= *cap) {
        out.reserve(total);
        std::vector<std::size_t> combo(n);
        for (std::size_t i = 0; i < n; ++i) combo[i] = i;
        while (true) {
            out.push_back(combo);
            // advance lexicographically
            std::size_t i = n;
            while (i > 0 && combo[i - 1] == m - n + i - 1) --i;
            if (i == 0) break;
            ++combo[i - 1];
            for (std::size_t j = i; j < n; ++j) combo[j] = combo[j - 1] + 1;
        }
        return out;
    }
    Rng rng(seed);
    std::set<std::uint64_t> ranks;
    while (ranks.size() < *cap) ranks.insert(rng.uniform_int(total));
    out.reserve(*cap);
    for (std::uint64_t r : ranks) out.push_back(detail::unrank_combination(r, m, n));
    return out;
}

// HTC: for each cyclic pseudo-query, all (or capped) n-subsets of its pool.
inline std::vector<TrainingPair> hierarchical_pairs(std::size_t k, std::size_t n,
                                                    std::optional<std::size_t> cap,
                                                    std::uint64_t seed) {
    if (k < 2) throw ContractError("hierarchical_pairs: need at least 2 supports");
    if (n < 1 || n > k - 1) {
        throw ContractError("hierarchical_pairs: n=" + std::to_string(n) +
                            " out of range [1," + std::to_string(k - 1) + "]");
    }
    std::vector<TrainingPair> out;
    for (const auto& cp : cyclic_pairs(k)) {
        auto combos = enumerate_combinations(cp.pool.size(), n, cap,
                                             Rng::mix(seed, cp.pseudo_query));
        for (std::size_t s = 0; s < combos.size(); ++s) {
            TrainingPair tp;
            tp.pseudo_query = cp.pseudo_query;
            tp.combo_index = s;
            for (std::size_t idx : combos[s]) tp.support.push_back(cp.pool[idx]);
            out.push_back(std::move(tp));
        }
    }
    return out;
}

namespace detail {

inline Tensor flip_h(const Tensor& t) {
    const auto& s = t.shape();
    const std::size_t w = s.back();
    const std::size_t rows = t.size() / w;
    std::vector<double> out(t.size());
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t x = 0; x < w; ++x) out[r * w + x] = t.values()[r * w + (w - 1 - x)];
    }
    return Tensor::from(s, std::move(out));
}

inline Tensor flip_v(const Tensor& t) {
    const auto& s = t.shape();
    const std::size_t w = s.back();
    const std::size_t h = s[s.size() - 2];
    const std::size_t planes = t.size() / (h * w);
    std::vector<double> out(t.size());
    for (std::size_t p = 0; p < planes; ++p) {
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
                out[(p * h + y) * w + x] = t.values()[(p * h + (h - 1 - y)) * w + x];
            }
        }
    }
    return Tensor::from(s, std::move(out));
}

// 90 degrees clockwise; requires square spatial dims.
inline Tensor rot90(const Tensor& t) {
    const auto& s = t.shape();
    const std::size_t w = s.back();
    const std::size_t h = s[s.size() - 2];
    const std::size_t planes = t.size() / (h * w);
    std::vector<double> out(t.size());
    for (std::size_t p = 0; p < planes; ++p) {
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
                out[(p * h + x) * w + (h - 1 - y)] = t.values()[(p * h + y) * w + x];
            }
        }
    }
    return Tensor::from(s, std::move(out));
}

}  // namespace detail

// 1-shot augmentation: the original plus a horizontal flip and a 90-degree
// rotation (flip + vertical flip for non-square images). Masks transform
// identically.
inline std::vector<ImageSample> augment_one_shot(const ImageSample& support,
                                                 std::uint64_t /*seed*/ = 0) {
    support.validate();
    const bool square = support.image.shape()[1] == support.image.shape()[2];
    std::vector<ImageSample> out;
    out.push_back(ImageSample{support.image.clone(), support.mask.clone()});
    out.push_back(ImageSample{detail::flip_h(support.image), detail::flip_h(support.mask)});
    if (square) {
        out.push_back(ImageSample{detail::rot90(support.image), detail::rot90(support.mask)});
    } else {
        std::cerr << "augment_one_shot: non-square image, substituting vertical flip for "
                     "rotation\n";
        out.push_back(ImageSample{detail::flip_v(support.image), detail::flip_v(support.mask)});
    }
    return out;
}

// --- episode directory I/O (PGM channels + manifest.json) ------------------

namespace detail {

inline void save_sample(const std::string& dir, const std::string& stem, const ImageSample& s,
                        nlohmann::json& entry) {
    const std::size_t c = s.image.shape()[0];
    const std::size_t h = s.image.shape()[1], w = s.image.shape()[2];
    entry["image"] = nlohmann::json::array();
    for (std::size_t ci = 0; ci < c; ++ci) {
        PgmImage img{w, h, std::vector<std::uint8_t>(h * w)};
        for (std::size_t i = 0; i < h * w; ++i) {
            const double v = s.image.values()[ci * h * w + i];
            img.pixels[i] = static_cast<std::uint8_t>(
                std::clamp(static_cast<int>(std::lround(v * 255.0)), 0, 255));
        }
        const std::string name = stem + "_c" + std::to_string(ci) + ".pgm";
        save_pgm(dir + "/" + name, img);
        entry["image"].push_back(name);
    }
    PgmImage mk{w, h, std::vector<std::uint8_t>(h * w)};
    for (std::size_t i = 0; i < h * w; ++i) {
        mk.pixels[i] = s.mask.values()[i] != 0.0 ? 255 : 0;
    }
    const std::string mname = stem + "_mask.pgm";
    save_pgm(dir + "/" + mname, mk);
    entry["mask"] = mname;
}

inline ImageSample load_sample(const std::string& dir, const nlohmann::json& entry) {
    std::vector<PgmImage> channels;
    for (const auto& name : entry.at("image")) {
        channels.push_back(load_pgm(dir + "/" + name.get<std::string>()));
    }
    const std::size_t h = channels.front().height, w = channels.front().width;
    std::vector<double> img(channels.size() * h * w);
    for (std::size_t ci = 0; ci < channels.size(); ++ci) {
        for (std::size_t i = 0; i < h * w; ++i) {
            img[ci * h * w + i] = static_cast<double>(channels[ci].pixels[i]) / 255.0;
        }
    }
    PgmImage mk = load_pgm(dir + "/" + entry.at("mask").get<std::string>());
    std::vector<double> mask(h * w);
    for (std::size_t i = 0; i < h * w; ++i) mask[i] = mk.pixels[i] >= 128 ? 1.0 : 0.0;
    return ImageSample{Tensor::from({channels.size(), h, w}, std::move(img)),
                       Tensor::from({h, w}, std::move(mask))};
}

}  // namespace detail

inline void save_episode(const std::string& dir, const Episode& ep) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    nlohmann::json manifest;
    manifest["class_id"] = ep.class_id;
    manifest["domain"] = ep.domain;
    manifest["episode_id"] = ep.episode_id;
    manifest["samples"] = nlohmann::json::array();
    std::size_t idx = 0;
    for (const auto& s : ep.supports) {
        nlohmann::json entry{{"role", "support"}};
        detail::save_sample(dir, "s" + std::to_string(idx++), s, entry);
        manifest["samples"].push_back(entry);
    }
    idx = 0;
    for (const auto& q : ep.queries) {
        nlohmann::json entry{{"role", "query"}};
        detail::save_sample(dir, "q" + std::to_string(idx++), q, entry);
        manifest["samples"].push_back(entry);
    }
    std::ofstream os(dir + "/manifest.json");
    if (!os) throw IoError("save_episode: cannot write manifest in " + dir);
    os << manifest.dump(2) << "\n";
}

inline Episode load_episode(const std::string& dir) {
    std::ifstream is(dir + "/manifest.json");
    if (!is) throw IoError("load_episode: cannot open manifest in " + dir);
    nlohmann::json manifest = nlohmann::json::parse(is);
    Episode ep;
    ep.class_id = manifest.at("class_id").get<int>();
    ep.domain = manifest.at("domain").get<std::string>();
    ep.episode_id = manifest.at("episode_id").get<std::uint64_t>();
    for (const auto& entry : manifest.at("samples")) {
        ImageSample s = detail::load_sample(dir, entry);
        if (entry.at("role") == "support") {
            ep.supports.push_back(std::move(s));
        } else {
            ep.queries.push_back(std::move(s));
        }
    }
    return ep;
}

}  // namespace isa
