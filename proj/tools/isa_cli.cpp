// Command-line front end: synthetic episode generation, test-time adaptation
// runs, Fisher reports, ablation tables, and gradient checks.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "isa/episode.hpp"
#include "isa/fisher.hpp"
#include "isa/model.hpp"
#include "isa/psa.hpp"
#include "isa/synth.hpp"

namespace {

using nlohmann::json;

struct RunConfig {
    isa::BenchConfig bench;
    std::vector<isa::Method> methods = {isa::Method::Baseline, isa::Method::Msa,
                                        isa::Method::IsiOnly, isa::Method::PsaOnly,
                                        isa::Method::Isa};
    std::string output_dir = "out";
};

isa::DomainSpec domain_from_json(const json& j) {
    isa::DomainSpec d;
    d.name = j.value("name", d.name);
    if (j.contains("shift")) d.shift = isa::shift_from_str(j.at("shift").get<std::string>());
    d.image_size = j.value("image_size", d.image_size);
    d.min_objects = j.value("min_objects", d.min_objects);
    d.max_objects = j.value("max_objects", d.max_objects);
    d.noise = j.value("noise", d.noise);
    d.class_count = j.value("class_count", d.class_count);
    d.validate();
    return d;
}

isa::Reduction reduction_from_str(const std::string& s) {
    if (s == "top1") return isa::Reduction::top1();
    if (s == "mean") return isa::Reduction::mean();
    if (s.rfind("top", 0) == 0 && s.size() > 8 && s.substr(s.size() - 5) == "-mean") {
        return isa::Reduction::topk_mean(std::stoul(s.substr(3, s.size() - 8)));
    }
    throw isa::ContractError("adapt.reduction: unknown reduction '" + s + "'");
}

RunConfig load_config(const std::string& path) {
    RunConfig cfg;
    if (!path.empty()) {
        std::ifstream is(path);
        if (!is) throw isa::IoError("cannot open config file " + path);
        json j = json::parse(is);
        cfg.bench.seed = j.value("seed", cfg.bench.seed);
        cfg.bench.episodes_per_domain =
            j.value("episodes_per_domain", cfg.bench.episodes_per_domain);
        cfg.bench.k_shots = j.value("k_shots", cfg.bench.k_shots);
        cfg.bench.n_queries = j.value("n_queries", cfg.bench.n_queries);
        cfg.bench.pretrain_steps = j.value("pretrain_steps", cfg.bench.pretrain_steps);
        cfg.bench.workers = j.value("workers", cfg.bench.workers);
        cfg.output_dir = j.value("output_dir", cfg.output_dir);
        if (j.contains("adapt")) {
            const json& a = j["adapt"];
            auto& c = cfg.bench.adapt;
            c.lr = a.value("lr", c.lr);
            c.iterations = a.value("iterations", c.iterations);
            if (a.contains("schedule")) c.schedule = a["schedule"].get<std::vector<std::size_t>>();
            c.k = a.value("k", c.k);
            if (a.contains("reduction")) {
                c.reduction = reduction_from_str(a["reduction"].get<std::string>());
            }
            if (a.contains("combination_cap")) {
                if (a["combination_cap"].is_null()) {
                    c.combination_cap.reset();
                } else {
                    c.combination_cap = a["combination_cap"].get<std::size_t>();
                }
            }
            c.temperature = a.value("temperature", c.temperature);
            c.recompute_fisher_per_stage =
                a.value("recompute_fisher_per_stage", c.recompute_fisher_per_stage);
            if (a.contains("manual_layers")) {
                c.manual_layers = a["manual_layers"].get<std::vector<std::string>>();
            }
        }
        if (j.contains("source")) cfg.bench.source = domain_from_json(j["source"]);
        if (j.contains("domains")) {
            cfg.bench.domains.clear();
            for (const auto& d : j["domains"]) cfg.bench.domains.push_back(domain_from_json(d));
        }
        if (j.contains("methods")) {
            cfg.methods.clear();
            for (const auto& m : j["methods"]) {
                cfg.methods.push_back(isa::method_from_str(m.get<std::string>()));
            }
        }
    }
    if (const char* env_seed = std::getenv("ISA_SEED")) {
        cfg.bench.seed = std::stoull(env_seed);
    }
    cfg.bench.adapt.seed = cfg.bench.seed;
    return cfg;
}

std::vector<std::size_t> parse_schedule(const std::string& s) {
    std::vector<std::size_t> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) out.push_back(std::stoul(tok));
    return out;
}

isa::LayeredModel obtain_model(const std::string& model_dir, const RunConfig& cfg) {
    if (!model_dir.empty()) return isa::LayeredModel::load(model_dir);
    std::cerr << "no --model given; pretraining on the source domain (seed "
              << cfg.bench.seed << ")\n";
    return isa::pretrain_source(isa::LayeredModel::default_backbone(cfg.bench.seed),
                                cfg.bench.source, cfg.bench.pretrain_steps, cfg.bench.seed)
        .model;
}

void save_mask_pgm(const std::string& path, const isa::Tensor& mask) {
    isa::PgmImage img{mask.shape()[1], mask.shape()[0],
                      std::vector<std::uint8_t>(mask.size())};
    for (std::size_t i = 0; i < mask.size(); ++i) {
        img.pixels[i] = mask.values()[i] != 0.0 ? 255 : 0;
    }
    isa::save_pgm(path, img);
}

int cmd_generate(const RunConfig& cfg, const std::string& out_dir) {
    std::vector<isa::DomainSpec> all = cfg.bench.domains;
    all.insert(all.begin(), cfg.bench.source);
    for (std::size_t d = 0; d < all.size(); ++d) {
        for (std::size_t e = 0; e < cfg.bench.episodes_per_domain; ++e) {
            const std::uint64_t seed = isa::Rng::mix(cfg.bench.seed, d * 1000003 + e);
            isa::Episode ep = isa::generate_episode(all[d], cfg.bench.k_shots,
                                                    cfg.bench.n_queries, seed);
            ep.episode_id = e;
            isa::save_episode(out_dir + "/" + all[d].name + "/ep" + std::to_string(e), ep);
        }
    }
    std::cout << "wrote " << all.size() * cfg.bench.episodes_per_domain << " episodes under "
              << out_dir << "\n";
    return 0;
}

int cmd_adapt(const RunConfig& cfg, const std::string& episode_dir,
              const std::string& model_dir, const std::string& out_dir,
              const std::string& trace_dir) {
    isa::LayeredModel model = obtain_model(model_dir, cfg);
    isa::Episode ep = isa::load_episode(episode_dir);
    isa::AdaptedSegmentation result;
    try {
        result = isa::adapt_and_segment(model, ep, cfg.bench.adapt);
    } catch (const isa::DegenerateInputError& e) {
        std::cerr << "degenerate episode " << ep.episode_id << ": " << e.what() << "\n";
        return 3;
    }
    std::filesystem::create_directories(out_dir);
    for (std::size_t q = 0; q < result.predictions.size(); ++q) {
        save_mask_pgm(out_dir + "/query" + std::to_string(q) + "_pred.pgm",
                      result.predictions[q].pred_mask);
        if (q < ep.queries.size()) {
            std::cout << "query " << q << " mIoU "
                      << isa::miou(result.predictions[q].pred_mask, ep.queries[q].mask) << "\n";
        }
    }
    const std::string tdir = trace_dir.empty() ? out_dir : trace_dir;
    std::filesystem::create_directories(tdir);
    std::ofstream os(tdir + "/trace_ep" + std::to_string(ep.episode_id) + ".json");
    os << result.trace.to_json().dump(2) << "\n";
    return 0;
}

void print_table(const isa::BenchmarkReport& report) {
    std::cout << std::left << std::setw(12) << "method";
    std::vector<std::string> domains;
    for (const auto& [domain, _] : report.stats) {
        domains.push_back(domain);
        std::cout << std::setw(18) << domain;
    }
    std::cout << std::setw(10) << "mean" << "\n";
    std::vector<std::string> methods;
    if (!report.stats.empty()) {
        for (const auto& [method, _] : report.stats.begin()->second) methods.push_back(method);
    }
    for (const auto& method : methods) {
        std::cout << std::left << std::setw(12) << method;
        double total = 0.0;
        for (const auto& domain : domains) {
            const auto& st = report.stats.at(domain).at(method);
            std::ostringstream cell;
            cell << std::fixed << std::setprecision(2) << 100.0 * st.mean << " +- "
                 << std::setprecision(2) << 100.0 * st.stddev;
            std::cout << std::setw(18) << cell.str();
            total += st.mean;
        }
        std::cout << std::fixed << std::setprecision(2)
                  << 100.0 * total / static_cast<double>(domains.size()) << "\n";
    }
}

int cmd_ablate(const RunConfig& cfg, const std::string& out_dir, bool k_sweep,
               bool dump_masks) {
    std::filesystem::create_directories(out_dir);
    std::string dump_dir;
    if (dump_masks) {
        dump_dir = out_dir + "/masks";
        std::filesystem::create_directories(dump_dir);
    }
    isa::BenchmarkReport report =
        isa::run_ablation(cfg.methods, cfg.bench, nullptr, dump_dir);
    print_table(report);
    isa::write_report_files(out_dir, report);

    std::size_t total_failures = 0, total_rows = 0;
    for (const auto& row : report.episode_rows) {
        ++total_rows;
        total_failures += row.failed ? 1 : 0;
    }
    if (total_failures > 0) {
        std::cerr << total_failures << "/" << total_rows << " episode runs failed\n";
    }
    if (total_rows > 0 && total_failures == total_rows) return 3;

    if (k_sweep) {
        std::ofstream os(out_dir + "/ksweep.csv");
        os << "k,domain,mean_miou,stddev\n";
        std::cout << "\nk-sweep (isa):\n";
        for (std::size_t k = 1; k <= 5; ++k) {
            isa::BenchConfig sweep = cfg.bench;
            sweep.adapt.k = k;
            auto rep = isa::run_ablation({isa::Method::Isa}, sweep);
            double mean = 0.0;
            for (const auto& [domain, by_method] : rep.stats) {
                const auto& st = by_method.at("isa");
                os.precision(17);
                os << k << "," << domain << "," << st.mean << "," << st.stddev << "\n";
                mean += st.mean;
            }
            std::cout << "  k=" << k << "  mean mIoU "
                      << std::fixed << std::setprecision(2)
                      << 100.0 * mean / static_cast<double>(rep.stats.size()) << "\n";
        }
    }
    return 0;
}

int cmd_fisher_report(const RunConfig& cfg, const std::string& episode_dir,
                      const std::string& model_dir, const std::string& out_json,
                      const std::string& out_csv) {
    isa::LayeredModel model = obtain_model(model_dir, cfg);
    isa::Episode ep = isa::load_episode(episode_dir);
    std::vector<isa::ImageSample> supports = ep.supports;
    if (supports.size() == 1) supports = isa::augment_one_shot(supports[0], cfg.bench.seed);

    std::vector<std::pair<std::vector<isa::ImageSample>, isa::ImageSample>> pairs;
    for (const auto& cp : isa::cyclic_pairs(supports.size())) {
        std::vector<isa::ImageSample> pool;
        for (std::size_t i : cp.pool) pool.push_back(supports[i]);
        pairs.emplace_back(std::move(pool), supports[cp.pseudo_query]);
    }
    isa::FisherReport report =
        isa::empirical_fisher(model, pairs, cfg.bench.adapt.temperature);
    isa::ScoreMap scores = isa::structure_scores(report, cfg.bench.adapt.reduction);
    isa::SelectionResult sel = isa::select_layers(scores, cfg.bench.adapt.k);

    json j;
    for (std::size_t l = 0; l < report.per_layer.size(); ++l) {
        const auto& [name, values] = report.per_layer[l];
        std::vector<double> top = values.values();
        std::sort(top.begin(), top.end(), std::greater<>());
        top.resize(std::min<std::size_t>(10, top.size()));
        j[name] = {{"score", scores[l].second},
                   {"reduction", cfg.bench.adapt.reduction.str()},
                   {"param_count", values.size()},
                   {"top_values", top}};
    }
    std::ofstream os(out_json);
    if (!os) throw isa::IoError("cannot write " + out_json);
    os << j.dump(2) << "\n";
    if (!out_csv.empty()) {
        std::ofstream cs(out_csv);
        if (!cs) throw isa::IoError("cannot write " + out_csv);
        cs << "episode_id,selected_layer\n";
        for (const auto& layer : sel.layers) cs << ep.episode_id << "," << layer << "\n";
    }
    std::cout << "selected:";
    for (const auto& layer : sel.layers) std::cout << " " << layer;
    std::cout << "\n";
    return 0;
}

int cmd_gradcheck(std::size_t n_models, std::uint64_t seed) {
    double worst = 0.0;
    for (std::size_t m = 0; m < n_models; ++m) {
        isa::Rng rng(isa::Rng::mix(seed, m));
        // small random conv model: [2,6,6] -> conv -> relu -> sigmoid -> bce
        isa::Tensor x =
            isa::Tensor::from({2, 6, 6}, [&] {
                std::vector<double> v(72);
                for (auto& e : v) e = rng.uniform(-1.0, 1.0);
                return v;
            }(), true);
        isa::Tensor w = isa::Tensor::from({2, 2, 3, 3}, [&] {
            std::vector<double> v(36);
            for (auto& e : v) e = rng.uniform(-1.0, 1.0);
            return v;
        }(), true);
        isa::Tensor b = isa::Tensor::from({2}, {rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3)},
                                          true);
        std::vector<double> tv(2 * 36);
        for (auto& e : tv) e = rng.uniform_int(2) ? 1.0 : 0.0;
        isa::Tensor target = isa::Tensor::from({2, 6, 6}, tv);

        auto graph_loss = [&] {
            isa::Tensor y = isa::relu(isa::conv2d(x, w, b, 1, 1));
            isa::Tensor p =
                isa::scaled_sigmoid_diff(y, isa::Tensor::zeros({2, 6, 6}), 2.0);
            return isa::bce_mean(p, target);
        };
        isa::ParamSet params{x, w, b};
        isa::zero_grads(params);
        isa::backward(graph_loss());
        auto fd = isa::finite_diff_grad([&] { return graph_loss().item(); }, params, 1e-5);
        for (std::size_t pi = 0; pi < params.size(); ++pi) {
            const auto& g = params[pi].grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                const double denom = std::max(1.0, std::abs(fd[pi][i]));
                worst = std::max(worst, std::abs(g[i] - fd[pi][i]) / denom);
            }
        }
    }
    std::cout << "gradcheck over " << n_models << " models: max relative error " << worst
              << "\n";
    if (worst >= 1e-4) {
        std::cerr << "gradcheck FAILED\n";
        return 3;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Fisher-guided test-time adaptation for few-shot segmentation"};
    app.require_subcommand(1);

    std::string config_path, out_dir = "out", episode_dir, model_dir, trace_dir;
    std::string out_json = "fisher_report.json", out_csv;
    std::optional<double> lr_override;
    std::string schedule_override, profile;
    std::optional<std::size_t> workers_override, k_override;
    bool k_sweep = false, dump_masks = false;
    std::size_t gradcheck_models = 20;
    std::uint64_t gradcheck_seed = 1;

    auto* gen = app.add_subcommand("generate", "write synthetic episode directories");
    gen->add_option("--config", config_path, "JSON config file");
    gen->add_option("--out", out_dir, "output directory");

    auto* adapt = app.add_subcommand("adapt", "adapt on one episode and segment its queries");
    adapt->add_option("--config", config_path, "JSON config file");
    adapt->add_option("--episode", episode_dir, "episode directory")->required();
    adapt->add_option("--model", model_dir, "model checkpoint directory");
    adapt->add_option("--out", out_dir, "output directory");
    adapt->add_option("--trace-dir", trace_dir, "directory for adaptation traces");
    adapt->add_option("--lr", lr_override, "learning rate override");
    adapt->add_option("--schedule", schedule_override, "comma-separated shot schedule");
    adapt->add_option("--profile", profile, "preset profile (fast)");

    auto* ablate = app.add_subcommand("ablate", "run the ablation benchmark");
    ablate->add_option("--config", config_path, "JSON config file");
    ablate->add_option("--out", out_dir, "output directory");
    ablate->add_option("--workers", workers_override, "episode worker pool size");
    ablate->add_flag("--k-sweep", k_sweep, "also sweep the selected-layer count k=1..5");
    ablate->add_flag("--dump-masks", dump_masks, "dump predicted masks as PGM");

    auto* fisher = app.add_subcommand("fisher-report", "emit per-layer Fisher scores");
    fisher->add_option("--config", config_path, "JSON config file");
    fisher->add_option("--episode", episode_dir, "episode directory")->required();
    fisher->add_option("--model", model_dir, "model checkpoint directory");
    fisher->add_option("--out", out_json, "output JSON path");
    fisher->add_option("--csv", out_csv, "selection CSV path");
    fisher->add_option("--k", k_override, "number of layers to select");

    auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient check");
    gc->add_option("--models", gradcheck_models, "number of seeded random models");
    gc->add_option("--seed", gradcheck_seed, "base seed");

    CLI11_PARSE(app, argc, argv);

    RunConfig cfg;
    try {
        cfg = load_config(config_path);
        if (lr_override) cfg.bench.adapt.lr = *lr_override;
        if (!schedule_override.empty()) {
            cfg.bench.adapt.schedule = parse_schedule(schedule_override);
        }
        if (profile == "fast") {
            const double lr = cfg.bench.adapt.lr;
            const std::uint64_t seed = cfg.bench.adapt.seed;
            cfg.bench.adapt = isa::AdaptationConfig::fast_profile();
            cfg.bench.adapt.lr = lr;
            cfg.bench.adapt.seed = seed;
        } else if (!profile.empty()) {
            throw isa::ContractError("unknown profile '" + profile + "'");
        }
        if (workers_override) cfg.bench.workers = *workers_override;
        if (k_override) cfg.bench.adapt.k = *k_override;
        cfg.bench.adapt.validate(std::max<std::size_t>(cfg.bench.k_shots, 2));
        cfg.bench.source.validate();
        for (const auto& d : cfg.bench.domains) d.validate();
    } catch (const isa::Error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    }

    try {
        if (gen->parsed()) return cmd_generate(cfg, out_dir);
        if (adapt->parsed()) return cmd_adapt(cfg, episode_dir, model_dir, out_dir, trace_dir);
        if (ablate->parsed()) return cmd_ablate(cfg, out_dir, k_sweep, dump_masks);
        if (fisher->parsed()) {
            return cmd_fisher_report(cfg, episode_dir, model_dir, out_json, out_csv);
        }
        if (gc->parsed()) return cmd_gradcheck(gradcheck_models, gradcheck_seed);
    } catch (const isa::IoError& e) {
        std::cerr << "I/O error: " << e.what() << "\n";
        return 2;
    } catch (const isa::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
