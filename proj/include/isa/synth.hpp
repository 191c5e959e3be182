#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "isa/episode.hpp"
#include "isa/error.hpp"
#include "isa/fisher.hpp"
#include "isa/model.hpp"
#include "isa/psa.hpp"
#include "isa/rng.hpp"

namespace isa {

// ---------------------------------------------------------------------------
// Domain specification and episode generation
// ---------------------------------------------------------------------------

enum class ShiftType {
    Intensity,  // source style: foreground distinguished by brightness
    Texture,    // low-level shift: stripe statistics carry the cue, means match
    Shape       // geometry shift: hollow/composite objects, intensity cue kept
};

inline std::string shift_str(ShiftType t) {
    switch (t) {
        case ShiftType::Intensity: return "intensity";
        case ShiftType::Texture: return "texture";
        case ShiftType::Shape: return "shape";
    }
    return "?";
}

inline ShiftType shift_from_str(const std::string& s) {
    if (s == "intensity") return ShiftType::Intensity;
    if (s == "texture") return ShiftType::Texture;
    if (s == "shape") return ShiftType::Shape;
    throw ContractError("unknown shift type: " + s);
}

struct DomainSpec {
    std::string name = "source";
    ShiftType shift = ShiftType::Intensity;
    std::size_t image_size = 32;
    std::size_t min_objects = 1;
    std::size_t max_objects = 1;
    double noise = 0.03;
    std::size_t class_count = 3;

    void validate() const {
        if (image_size % 4 != 0) {
            throw ContractError("DomainSpec: image size must be divisible by 4");
        }
        if (min_objects < 1 || max_objects < min_objects) {
            throw ContractError("DomainSpec: bad object count range");
        }
        if (class_count < 1 || class_count > 3) {
            throw ContractError("DomainSpec: class count must be in [1,3]");
        }
    }

    static DomainSpec source() { return DomainSpec{}; }
    static DomainSpec texture_shift() {
        DomainSpec d;
        d.name = "texture";
        d.shift = ShiftType::Texture;
        return d;
    }
    static DomainSpec shape_shift() {
        DomainSpec d;
        d.name = "shape";
        d.shift = ShiftType::Shape;
        return d;
    }
};

namespace detail {

// Integer point-in-object predicates. Shape classes differ per shift family
// so that discriminative evidence lives at different depths.
inline bool in_object(ShiftType shift, int cls, int dx, int dy, int r) {
    if (shift == ShiftType::Shape) {
        switch (cls) {
            case 0:  // ring
                return dx * dx + dy * dy <= r * r && dx * dx + dy * dy > (r - 3) * (r - 3);
            case 1:  // hollow frame
                return std::abs(dx) <= r && std::abs(dy) <= r &&
                       !(std::abs(dx) <= r - 3 && std::abs(dy) <= r - 3);
            default:  // cross
                return (std::abs(dx) <= 2 && std::abs(dy) <= r) ||
                       (std::abs(dy) <= 2 && std::abs(dx) <= r);
        }
    }
    switch (cls) {
        case 0:  // disk
            return dx * dx + dy * dy <= r * r;
        case 1:  // square
            return std::abs(dx) <= r - 2 && std::abs(dy) <= r - 2;
        default:  // diamond
            return std::abs(dx) + std::abs(dy) <= r;
    }
}

inline ImageSample render_sample(const DomainSpec& spec, int cls, Rng& rng) {
    const int sz = static_cast<int>(spec.image_size);
    const std::size_t hw = spec.image_size * spec.image_size;
    std::vector<double> mask(hw, 0.0);

    const std::size_t objects =
        spec.min_objects + rng.uniform_int(spec.max_objects - spec.min_objects + 1);
    for (std::size_t o = 0; o < objects; ++o) {
        const int r = 7 + static_cast<int>(rng.uniform_int(4));  // 7..10
        const int cx = r + 1 + static_cast<int>(rng.uniform_int(sz - 2 * (r + 1)));
        const int cy = r + 1 + static_cast<int>(rng.uniform_int(sz - 2 * (r + 1)));
        for (int y = 0; y < sz; ++y) {
            for (int x = 0; x < sz; ++x) {
                if (in_object(spec.shift, cls, x - cx, y - cy, r)) mask[y * sz + x] = 1.0;
            }
        }
    }

    std::vector<double> image(3 * hw, 0.0);
    const double bg_base = spec.shift == ShiftType::Texture ? 0.5 : rng.uniform(0.20, 0.40);
    const double fg_base = spec.shift == ShiftType::Texture ? 0.5 : rng.uniform(0.60, 0.85);
    const int phase = static_cast<int>(rng.uniform_int(2));
    double tint[3];
    for (double& t : tint) t = rng.uniform(-0.05, 0.05);

    for (std::size_t c = 0; c < 3; ++c) {
        for (int y = 0; y < sz; ++y) {
            for (int x = 0; x < sz; ++x) {
                const std::size_t i = static_cast<std::size_t>(y * sz + x);
                double v = mask[i] != 0.0 ? fg_base : bg_base;
                if (spec.shift == ShiftType::Texture && mask[i] != 0.0) {
                    v += ((x + phase) % 2 == 0) ? 0.22 : -0.22;  // zero-mean stripes
                }
                v += tint[c] + rng.uniform(-spec.noise, spec.noise);
                // quantize to the 8-bit grid so PGM round-trips are exact
                const int q = std::clamp(static_cast<int>(std::lround(v * 255.0)), 0, 255);
                image[c * hw + i] = static_cast<double>(q) / 255.0;
            }
        }
    }
    return ImageSample{Tensor::from({3, spec.image_size, spec.image_size}, std::move(image)),
                       Tensor::from({spec.image_size, spec.image_size}, std::move(mask))};
}

}  // namespace detail

// Seeded episode: K supports plus queries of one class, foreground fraction
// kept inside [0.05, 0.6] by construction (re-rendered otherwise).
inline Episode generate_episode(const DomainSpec& spec, std::size_t k, std::size_t n_queries,
                                std::uint64_t seed) {
    spec.validate();
    if (k < 1) throw ContractError("generate_episode: K must be >= 1");
    Rng rng(Rng::mix(seed, 0x5EED));
    Episode ep;
    ep.domain = spec.name;
    ep.episode_id = seed;
    ep.class_id = static_cast<int>(rng.uniform_int(spec.class_count));
    const double lo = 0.05, hi = 0.6;
    // masks must also survive the backbone's 4x nearest-center downsampling
    // with both classes present, or prototype pooling degenerates
    auto coarse_ok = [&](const Tensor& mask) {
        const std::size_t n = spec.image_size / 4;
        const auto flags = downsample_mask(mask, n, n);
        std::size_t fg = 0;
        for (std::uint8_t f : flags) fg += f;
        return fg > 0 && fg < flags.size();
    };
    auto render_valid = [&]() {
        for (int attempt = 0; attempt < 64; ++attempt) {
            ImageSample s = detail::render_sample(spec, ep.class_id, rng);
            double fg = 0.0;
            for (double v : s.mask.values()) fg += v;
            fg /= static_cast<double>(s.mask.size());
            if (fg >= lo && fg <= hi && coarse_ok(s.mask)) return s;
        }
        throw ContractError("generate_episode: could not render a valid mask");
    };
    for (std::size_t i = 0; i < k; ++i) ep.supports.push_back(render_valid());
    for (std::size_t i = 0; i < n_queries; ++i) ep.queries.push_back(render_valid());
    return ep;
}

// ---------------------------------------------------------------------------
// Metric
// ---------------------------------------------------------------------------

// Two-class (fg/bg) mean IoU; a class with an empty union is skipped.
inline double miou(const Tensor& pred, const Tensor& gt) {
    if (pred.shape() != gt.shape()) {
        throw DimensionError("miou: shape mismatch " + shape_str(pred.shape()) + " vs " +
                             shape_str(gt.shape()));
    }
    std::size_t inter_fg = 0, union_fg = 0, inter_bg = 0, union_bg = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred.values()[i] != 0.0;
        const bool g = gt.values()[i] != 0.0;
        inter_fg += (p && g);
        union_fg += (p || g);
        inter_bg += (!p && !g);
        union_bg += (!p || !g);
    }
    double total = 0.0;
    std::size_t classes = 0;
    if (union_fg > 0) {
        total += static_cast<double>(inter_fg) / static_cast<double>(union_fg);
        ++classes;
    }
    if (union_bg > 0) {
        total += static_cast<double>(inter_bg) / static_cast<double>(union_bg);
        ++classes;
    }
    if (classes == 0) return 1.0;  // both masks empty of both classes is impossible
    return total / static_cast<double>(classes);
}

inline double mean_miou(const std::vector<std::pair<Tensor, Tensor>>& pairs) {
    if (pairs.empty()) throw ContractError("mean_miou: empty input");
    double acc = 0.0;
    for (const auto& [p, g] : pairs) acc += miou(p, g);
    return acc / static_cast<double>(pairs.size());
}

// ---------------------------------------------------------------------------
// Source pretraining
// ---------------------------------------------------------------------------

struct PretrainResult {
    LayeredModel model;
    std::vector<double> loss_curve;
};

// Episodic pretraining on a fixed batch of seeded source pairs (full-batch
// gradient descent, all parameters trainable) until the mean loss drops
// below the target or the step budget runs out.
inline PretrainResult pretrain_source(LayeredModel model, const DomainSpec& spec,
                                      std::size_t steps, std::uint64_t seed,
                                      double lr = 0.05, double target_loss = 0.3,
                                      std::size_t batch = 8) {
    spec.validate();
    std::vector<std::pair<std::vector<ImageSample>, ImageSample>> batch_pairs;
    for (std::size_t b = 0; b < batch; ++b) {
        Episode ep = generate_episode(spec, 1, 1, Rng::mix(seed, 0xB00 + b));
        batch_pairs.emplace_back(ep.supports, ep.queries[0]);
    }
    ParamSet params = model.parameters();
    PretrainResult result;
    for (std::size_t step = 0; step < steps; ++step) {
        zero_grads(params);
        std::vector<Tensor> losses;
        for (const auto& [sup, q] : batch_pairs) losses.push_back(pair_loss(model, sup, q));
        Tensor loss = mean_stack(losses);
        const double lv = loss.item();
        result.loss_curve.push_back(lv);
        if (lv > 10.0) {
            throw TrainingFailureError("pretrain_source: diverged at step " +
                                       std::to_string(step) + " with loss " +
                                       std::to_string(lv));
        }
        if (lv < target_loss) break;
        backward(loss);
        sgd_step(params, lr);
    }
    zero_grads(params);
    result.model = std::move(model);
    return result;
}

// ---------------------------------------------------------------------------
// Ablation harness
// ---------------------------------------------------------------------------

enum class Method { Baseline, Msa, IsiOnly, PsaOnly, Isa, FastIsa };

inline std::string method_str(Method m) {
    switch (m) {
        case Method::Baseline: return "baseline";
        case Method::Msa: return "msa";
        case Method::IsiOnly: return "isi-only";
        case Method::PsaOnly: return "psa-only";
        case Method::Isa: return "isa";
        case Method::FastIsa: return "fast-isa";
    }
    return "?";
}

inline Method method_from_str(const std::string& s) {
    for (Method m : {Method::Baseline, Method::Msa, Method::IsiOnly, Method::PsaOnly,
                     Method::Isa, Method::FastIsa}) {
        if (method_str(m) == s) return m;
    }
    throw ContractError("unknown method: " + s);
}

// The per-stage step size the desk-scale benchmark runs with. The protocol
// default of 1e-3 assumes a large backbone; on this ~30k-parameter model a
// single iteration at 1e-3 changes the loss by ~1e-3 and no mask bit flips,
// so the benchmark uses the step size at which adaptation is visible.
inline constexpr double kBenchmarkLr = 0.05;

struct BenchConfig {
    AdaptationConfig adapt = default_adapt();

    static AdaptationConfig default_adapt() {
        AdaptationConfig c;
        c.lr = kBenchmarkLr;
        // two selected layers: the top-1 layer alone trails the manual
        // last-conv baseline on this backbone, see ksweep
        c.k = 2;
        return c;
    }
    DomainSpec source = DomainSpec::source();
    std::vector<DomainSpec> domains = {DomainSpec::texture_shift(), DomainSpec::shape_shift()};
    std::size_t episodes_per_domain = 50;
    std::size_t k_shots = 5;
    std::size_t n_queries = 2;
    std::size_t pretrain_steps = 400;
    std::uint64_t seed = 42;
    std::size_t workers = 1;
};

struct EpisodeRow {
    std::uint64_t episode_id = 0;
    std::string domain;
    std::string method;
    double miou = 0.0;
    bool failed = false;
};

struct SelectionRow {
    std::uint64_t episode_id = 0;
    std::string domain;
    std::string method;
    std::string layer;
};

struct MethodStats {
    double mean = 0.0;
    double stddev = 0.0;
    std::size_t count = 0;
    std::size_t failures = 0;
};

struct BenchmarkReport {
    std::map<std::string, std::map<std::string, MethodStats>> stats;  // domain -> method
    std::map<std::string, std::map<std::string, std::size_t>> histograms;  // domain -> layer
    std::string config_fingerprint;
    std::vector<EpisodeRow> episode_rows;
    std::vector<SelectionRow> selection_rows;
};

namespace detail {

inline std::string fnv1a_hex(const std::string& s) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    std::ostringstream os;
    os << std::hex << h;
    return os.str();
}

inline nlohmann::json adapt_config_json(const AdaptationConfig& c) {
    nlohmann::json j;
    j["lr"] = c.lr;
    j["iterations"] = c.iterations;
    j["schedule"] = c.schedule;
    j["k"] = c.k;
    j["reduction"] = c.reduction.str();
    if (c.combination_cap) j["combination_cap"] = *c.combination_cap;
    j["temperature"] = c.temperature;
    j["seed"] = c.seed;
    j["recompute_fisher_per_stage"] = c.recompute_fisher_per_stage;
    j["manual_layers"] = c.manual_layers;
    return j;
}

inline nlohmann::json domain_json(const DomainSpec& d) {
    return {{"name", d.name},       {"shift", shift_str(d.shift)},
            {"image_size", d.image_size}, {"min_objects", d.min_objects},
            {"max_objects", d.max_objects}, {"noise", d.noise},
            {"class_count", d.class_count}};
}

inline nlohmann::json bench_config_json(const BenchConfig& c) {
    nlohmann::json j;
    j["adapt"] = adapt_config_json(c.adapt);
    j["source"] = domain_json(c.source);
    j["domains"] = nlohmann::json::array();
    for (const auto& d : c.domains) j["domains"].push_back(domain_json(d));
    j["episodes_per_domain"] = c.episodes_per_domain;
    j["k_shots"] = c.k_shots;
    j["n_queries"] = c.n_queries;
    j["pretrain_steps"] = c.pretrain_steps;
    j["seed"] = c.seed;
    return j;
}

// Method-specific adaptation config, derived from the shared base.
inline AdaptationConfig method_config(Method m, const BenchConfig& bench,
                                      const std::string& last_layer, std::uint64_t ep_seed) {
    AdaptationConfig c = bench.adapt;
    c.seed = ep_seed;
    const std::size_t flat_n = bench.k_shots - 1;
    switch (m) {
        case Method::Baseline:
            break;
        case Method::Msa:
            c.manual_layers = {last_layer};
            c.schedule = {flat_n};
            break;
        case Method::IsiOnly:
            c.manual_layers.clear();
            c.schedule = {flat_n};
            break;
        case Method::PsaOnly:
            c.manual_layers = {last_layer};
            c.schedule.clear();  // full progressive 1..K-1
            break;
        case Method::Isa:
            c.manual_layers.clear();
            c.schedule.clear();
            break;
        case Method::FastIsa: {
            AdaptationConfig fast = AdaptationConfig::fast_profile();
            fast.lr = c.lr;
            fast.iterations = c.iterations;
            fast.temperature = c.temperature;
            fast.seed = ep_seed;
            c = fast;
            break;
        }
    }
    return c;
}

}  // namespace detail

// Desk-scale ablation: pretrain once on the source domain, then run every
// requested method on seeded episodes from each target domain. Episodes are
// seeded by id, so results are independent of worker count and episode order.
inline BenchmarkReport run_ablation(const std::vector<Method>& methods,
                                    const BenchConfig& config,
                                    const LayeredModel* pretrained = nullptr,
                                    const std::string& dump_mask_dir = "") {
    if (methods.empty()) throw ContractError("run_ablation: need at least one method");
    if (config.domains.empty()) throw ContractError("run_ablation: need at least one domain");

    LayeredModel model;
    if (pretrained) {
        model = pretrained->deep_copy();
    } else {
        model = pretrain_source(LayeredModel::default_backbone(config.seed), config.source,
                                config.pretrain_steps, config.seed)
                    .model;
    }
    const std::string last_layer = model.layer_names().back();

    struct Job {
        std::size_t domain_idx;
        std::uint64_t episode_id;
        std::uint64_t seed;
    };
    std::vector<Job> jobs;
    for (std::size_t d = 0; d < config.domains.size(); ++d) {
        for (std::size_t e = 0; e < config.episodes_per_domain; ++e) {
            jobs.push_back(Job{d, e, Rng::mix(config.seed, d * 1000003 + e)});
        }
    }

    struct JobResult {
        std::vector<EpisodeRow> rows;
        std::vector<SelectionRow> selections;
    };
    std::vector<JobResult> results(jobs.size());

    auto run_job = [&](const Job& job, JobResult& out) {
        const DomainSpec& domain = config.domains[job.domain_idx];
        Episode ep = generate_episode(domain, config.k_shots, config.n_queries, job.seed);
        ep.episode_id = job.episode_id;
        for (Method m : methods) {
            EpisodeRow row{job.episode_id, domain.name, method_str(m), 0.0, false};
            try {
                std::vector<std::pair<Tensor, Tensor>> preds;
                if (m == Method::Baseline) {
                    for (const auto& q : ep.queries) {
                        preds.emplace_back(
                            segment(model, ep.supports, q, config.adapt.temperature).pred_mask,
                            q.mask);
                    }
                } else {
                    AdaptationConfig mc = detail::method_config(m, config, last_layer, job.seed);
                    auto result = adapt_and_segment(model, ep, mc);
                    for (std::size_t qi = 0; qi < ep.queries.size(); ++qi) {
                        preds.emplace_back(result.predictions[qi].pred_mask,
                                           ep.queries[qi].mask);
                    }
                    if (!result.trace.selection.layers.empty()) {
                        out.selections.push_back(SelectionRow{job.episode_id, domain.name,
                                                              method_str(m),
                                                              result.trace.selection.layers[0]});
                    }
                    if (!dump_mask_dir.empty()) {
                        for (std::size_t qi = 0; qi < preds.size(); ++qi) {
                            const Tensor& pm = preds[qi].first;
                            PgmImage img{pm.shape()[1], pm.shape()[0],
                                         std::vector<std::uint8_t>(pm.size())};
                            for (std::size_t i = 0; i < pm.size(); ++i) {
                                img.pixels[i] = pm.values()[i] != 0.0 ? 255 : 0;
                            }
                            save_pgm(dump_mask_dir + "/" + domain.name + "_ep" +
                                         std::to_string(job.episode_id) + "_" + method_str(m) +
                                         "_q" + std::to_string(qi) + ".pgm",
                                     img);
                        }
                    }
                }
                row.miou = mean_miou(preds);
            } catch (const Error&) {
                row.failed = true;
            }
            out.rows.push_back(std::move(row));
        }
    };

    if (config.workers <= 1) {
        for (std::size_t i = 0; i < jobs.size(); ++i) run_job(jobs[i], results[i]);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < config.workers; ++w) {
            pool.emplace_back([&] {
                while (true) {
                    const std::size_t i = next.fetch_add(1);
                    if (i >= jobs.size()) break;
                    run_job(jobs[i], results[i]);
                }
            });
        }
        for (auto& t : pool) t.join();
    }

    // Single-writer reduction in fixed job order.
    BenchmarkReport report;
    report.config_fingerprint =
        detail::fnv1a_hex(detail::bench_config_json(config).dump());
    for (const auto& r : results) {
        for (const auto& row : r.rows) report.episode_rows.push_back(row);
        for (const auto& sel : r.selections) report.selection_rows.push_back(sel);
    }
    for (const auto& d : config.domains) {
        for (Method m : methods) {
            MethodStats st;
            double sum = 0.0, sq = 0.0;
            for (const auto& row : report.episode_rows) {
                if (row.domain != d.name || row.method != method_str(m)) continue;
                if (row.failed) {
                    ++st.failures;
                    continue;
                }
                sum += row.miou;
                sq += row.miou * row.miou;
                ++st.count;
            }
            if (st.count > 0) {
                st.mean = sum / static_cast<double>(st.count);
                const double var =
                    std::max(0.0, sq / static_cast<double>(st.count) - st.mean * st.mean);
                st.stddev = std::sqrt(var);
            }
            report.stats[d.name][method_str(m)] = st;
        }
    }
    // Figure-4 style histogram from the primary ISI-driven method.
    std::string histo_method;
    for (Method m : {Method::Isa, Method::IsiOnly, Method::FastIsa}) {
        for (Method requested : methods) {
            if (requested == m) {
                histo_method = method_str(m);
                break;
            }
        }
        if (!histo_method.empty()) break;
    }
    for (const auto& sel : report.selection_rows) {
        if (sel.method == histo_method) ++report.histograms[sel.domain][sel.layer];
    }
    return report;
}

// --- report files -----------------------------------------------------------

inline nlohmann::json report_json(const BenchmarkReport& report) {
    nlohmann::json j;
    j["config_fingerprint"] = report.config_fingerprint;
    j["stats"] = nlohmann::json::object();
    for (const auto& [domain, methods] : report.stats) {
        for (const auto& [method, st] : methods) {
            j["stats"][domain][method] = {{"mean_miou", st.mean},
                                          {"stddev", st.stddev},
                                          {"episodes", st.count},
                                          {"failures", st.failures}};
        }
    }
    j["selection_histograms"] = nlohmann::json::object();
    for (const auto& [domain, histo] : report.histograms) {
        for (const auto& [layer, count] : histo) {
            j["selection_histograms"][domain][layer] = count;
        }
    }
    return j;
}

inline void write_report_files(const std::string& dir, const BenchmarkReport& report) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    {
        std::ofstream os(dir + "/report.json");
        if (!os) throw IoError("write_report_files: cannot write report.json in " + dir);
        os << report_json(report).dump(2) << "\n";
    }
    {
        std::ofstream os(dir + "/episodes.csv");
        if (!os) throw IoError("write_report_files: cannot write episodes.csv in " + dir);
        os << "episode_id,domain,method,miou,failed\n";
        os.precision(17);
        for (const auto& r : report.episode_rows) {
            os << r.episode_id << "," << r.domain << "," << r.method << "," << r.miou << ","
               << (r.failed ? 1 : 0) << "\n";
        }
    }
    {
        std::ofstream os(dir + "/selections.csv");
        if (!os) throw IoError("write_report_files: cannot write selections.csv in " + dir);
        os << "episode_id,domain,method,layer\n";
        for (const auto& r : report.selection_rows) {
            os << r.episode_id << "," << r.domain << "," << r.method << "," << r.layer << "\n";
        }
    }
}

}  // namespace isa
