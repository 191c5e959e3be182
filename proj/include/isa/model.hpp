#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "isa/error.hpp"
#include "isa/rng.hpp"
#include "isa/serialize.hpp"
#include "isa/tensor.hpp"

namespace isa {

// One image with its binary segmentation mask.
struct ImageSample {
    Tensor image;  // [C,H,W], values in [0,1]
    Tensor mask;   // [H,W], values in {0,1}

    void validate() const {
        if (image.rank() != 3) {
            throw DimensionError("ImageSample: image must be rank 3, got " +
                                 shape_str(image.shape()));
        }
        if (mask.rank() != 2 || mask.shape()[0] != image.shape()[1] ||
            mask.shape()[1] != image.shape()[2]) {
            throw DimensionError("ImageSample: mask shape " + shape_str(mask.shape()) +
                                 " does not match image spatial size [" +
                                 std::to_string(image.shape()[1]) + "," +
                                 std::to_string(image.shape()[2]) + "]");
        }
        for (double v : mask.values()) {
            if (v != 0.0 && v != 1.0) {
                throw ContractError("ImageSample: mask must be strictly binary");
            }
        }
    }
};

// Foreground/background feature prototypes from masked average pooling.
struct Prototype {
    Tensor fg;  // [C]
    Tensor bg;  // [C]
};

struct ConvLayer {
    std::string name;
    Tensor weight;  // [Cout,Cin,3,3]
    Tensor bias;    // [Cout]
};

// Sequential conv backbone: stages of conv+relu blocks with 2x average
// pooling between stages. Parameter registry iterates in definition order.
class LayeredModel {
public:
    LayeredModel() = default;

    // Arbitrary stage layout: stage_blocks[s] lists the output channels of
    // each block in stage s. 3x3 kernels, He-style seeded init, zero biases.
    static LayeredModel custom_backbone(std::uint64_t seed, std::size_t input_channels,
                                        const std::vector<std::vector<std::size_t>>& stage_blocks,
                                        double init_gain = 1.0) {
        if (stage_blocks.empty()) throw ContractError("custom_backbone: need at least one stage");
        LayeredModel m;
        m.input_channels_ = input_channels;
        Rng rng(seed);
        std::size_t c_in = input_channels;
        for (std::size_t s = 0; s < stage_blocks.size(); ++s) {
            if (stage_blocks[s].empty()) {
                throw ContractError("custom_backbone: stage " + std::to_string(s + 1) +
                                    " has no blocks");
            }
            std::vector<ConvLayer> stage;
            for (std::size_t b = 0; b < stage_blocks[s].size(); ++b) {
                const std::size_t c_out = stage_blocks[s][b];
                ConvLayer layer;
                layer.name = "stage" + std::to_string(s + 1) + ".block" + std::to_string(b) +
                             ".conv";
                const std::size_t fan_in = c_in * 9;
                const double bound = init_gain * std::sqrt(6.0 / static_cast<double>(fan_in));
                std::vector<double> w(c_out * c_in * 9);
                for (auto& v : w) v = rng.uniform(-bound, bound);
                layer.weight = Tensor::from({c_out, c_in, 3, 3}, std::move(w), true);
                layer.bias = Tensor::zeros({c_out}, true);
                stage.push_back(std::move(layer));
                c_in = c_out;
            }
            m.stages_.push_back(std::move(stage));
        }
        return m;
    }

    // 3 stages x 3 blocks, channels 8/16/32, 3x3 kernels, He-style seeded init.
    static LayeredModel default_backbone(std::uint64_t seed, std::size_t input_channels = 3) {
        return custom_backbone(seed, input_channels, {{8, 8, 8}, {16, 16, 16}, {32, 32, 32}});
    }

    std::size_t input_channels() const { return input_channels_; }
    std::size_t stage_count() const { return stages_.size(); }
    std::size_t feature_channels() const { return stages_.back().back().bias.shape()[0]; }

    // Spatial shrink factor from input to feature map (one 2x pool per stage
    // boundary).
    std::size_t spatial_factor() const { return std::size_t{1} << (stages_.size() - 1); }

    std::vector<ConvLayer*> layers() {
        std::vector<ConvLayer*> out;
        for (auto& stage : stages_) {
            for (auto& layer : stage) out.push_back(&layer);
        }
        return out;
    }
    std::vector<const ConvLayer*> layers() const {
        std::vector<const ConvLayer*> out;
        for (const auto& stage : stages_) {
            for (const auto& layer : stage) out.push_back(&layer);
        }
        return out;
    }

    std::vector<std::string> layer_names() const {
        std::vector<std::string> out;
        for (const auto* l : layers()) out.push_back(l->name);
        return out;
    }

    ConvLayer& layer(const std::string& name) {
        for (auto* l : layers()) {
            if (l->name == name) return *l;
        }
        throw ContractError("LayeredModel: no layer named " + name);
    }
    const ConvLayer& layer(const std::string& name) const {
        for (const auto* l : layers()) {
            if (l->name == name) return *l;
        }
        throw ContractError("LayeredModel: no layer named " + name);
    }

    ParamSet parameters() const {
        ParamSet out;
        for (const auto* l : layers()) {
            out.push_back(l->weight);
            out.push_back(l->bias);
        }
        return out;
    }

    // Fresh tensors, same values; adaptation works on copies (episode isolation).
    LayeredModel deep_copy() const {
        LayeredModel m;
        m.input_channels_ = input_channels_;
        for (const auto& stage : stages_) {
            std::vector<ConvLayer> copy;
            for (const auto& layer : stage) {
                copy.push_back(ConvLayer{layer.name, layer.weight.clone(), layer.bias.clone()});
            }
            m.stages_.push_back(std::move(copy));
        }
        return m;
    }

    Tensor extract_features(const Tensor& image) const {
        if (image.rank() != 3 || image.shape()[0] != input_channels_) {
            throw DimensionError("extract_features: expected [" +
                                 std::to_string(input_channels_) +
                                 ",H,W] input, got " + shape_str(image.shape()));
        }
        Tensor x = image;
        for (std::size_t s = 0; s < stages_.size(); ++s) {
            for (const auto& layer : stages_[s]) {
                x = relu(conv2d(x, layer.weight, layer.bias, 1, 1));
            }
            if (s + 1 < stages_.size()) x = avg_pool2d(x, 2);
        }
        return x;
    }

    void save(const std::string& dir) const;
    static LayeredModel load(const std::string& dir);

private:
    std::size_t input_channels_ = 3;
    std::vector<std::vector<ConvLayer>> stages_;
};

// Nearest-neighbor downsample of a binary mask to feature resolution,
// sampling the center of each block.
inline std::vector<std::uint8_t> downsample_mask(const Tensor& mask, std::size_t out_h,
                                                 std::size_t out_w) {
    const std::size_t h = mask.shape()[0], w = mask.shape()[1];
    if (h % out_h != 0 || w % out_w != 0) {
        throw DimensionError("downsample_mask: mask " + shape_str(mask.shape()) +
                             " not divisible into " + std::to_string(out_h) + "x" +
                             std::to_string(out_w));
    }
    const std::size_t fy = h / out_h, fx = w / out_w;
    std::vector<std::uint8_t> out(out_h * out_w);
    for (std::size_t y = 0; y < out_h; ++y) {
        for (std::size_t x = 0; x < out_w; ++x) {
            const std::size_t sy = y * fy + fy / 2;
            const std::size_t sx = x * fx + fx / 2;
            out[y * out_w + x] = mask.values()[sy * w + sx] != 0.0 ? 1 : 0;
        }
    }
    return out;
}

// Masked average pooling: fg/bg prototypes from feature columns under the
// downsampled mask. Requires at least one pixel on each side.
inline Prototype masked_average_pool(const Tensor& features, const Tensor& mask) {
    const std::size_t h = features.shape()[1], w = features.shape()[2];
    auto flags = downsample_mask(mask, h, w);
    std::size_t fg_count = 0;
    for (auto f : flags) fg_count += f;
    if (fg_count == 0) {
        throw DegenerateMaskError("masked_average_pool: empty foreground after downsampling");
    }
    if (fg_count == flags.size()) {
        throw DegenerateMaskError("masked_average_pool: empty background after downsampling");
    }
    std::vector<std::uint8_t> inverted(flags.size());
    for (std::size_t i = 0; i < flags.size(); ++i) inverted[i] = flags[i] ? 0 : 1;
    return Prototype{masked_mean(features, flags), masked_mean(features, inverted)};
}

inline constexpr double kDefaultTemperature = 10.0;

// Per-pixel foreground probability: softmax over temperature-scaled cosine
// similarities to the fg and bg prototypes.
inline Tensor predict(const Tensor& features_q, const Prototype& proto,
                      double temperature = kDefaultTemperature) {
    Tensor cos_fg = cosine_map(features_q, proto.fg);
    Tensor cos_bg = cosine_map(features_q, proto.bg);
    return scaled_sigmoid_diff(cos_fg, cos_bg, temperature);
}

// Mean of per-support MAP prototypes.
inline Prototype support_prototype(const LayeredModel& model,
                                   const std::vector<ImageSample>& supports) {
    if (supports.empty()) throw ContractError("support_prototype: need at least one support");
    std::vector<Tensor> fgs, bgs;
    for (const auto& s : supports) {
        Prototype p = masked_average_pool(model.extract_features(s.image), s.mask);
        fgs.push_back(p.fg);
        bgs.push_back(p.bg);
    }
    return Prototype{mean_stack(fgs), mean_stack(bgs)};
}

// Nearest-neighbor upsample of a binary low-res mask to full resolution.
inline Tensor upsample_mask(const std::vector<double>& low, std::size_t lh, std::size_t lw,
                            std::size_t h, std::size_t w) {
    std::vector<double> out(h * w);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            out[y * w + x] = low[(y * lh / h) * lw + (x * lw / w)];
        }
    }
    return Tensor::from({h, w}, std::move(out));
}

struct Segmentation {
    Tensor prob;       // [H',W'] feature-resolution foreground probability
    Tensor pred_mask;  // [H,W] binary, upsampled to query resolution
};

// Full prototype-matching pipeline. Threshold tie (prob exactly 0.5) goes to
// background.
inline Segmentation segment(const LayeredModel& model, const std::vector<ImageSample>& supports,
                            const ImageSample& query, double temperature = kDefaultTemperature) {
    Prototype proto = support_prototype(model, supports);
    Tensor fq = model.extract_features(query.image);
    Tensor prob = predict(fq, proto, temperature);
    const std::size_t lh = prob.shape()[0], lw = prob.shape()[1];
    std::vector<double> low(lh * lw);
    for (std::size_t i = 0; i < low.size(); ++i) low[i] = prob.values()[i] > 0.5 ? 1.0 : 0.0;
    const std::size_t h = query.image.shape()[1], w = query.image.shape()[2];
    return Segmentation{prob, upsample_mask(low, lh, lw, h, w)};
}

// --- checkpoint I/O: named tensor files plus a JSON manifest ---------------

inline void LayeredModel::save(const std::string& dir) const {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir, ec);
    nlohmann::json manifest;
    manifest["input_channels"] = input_channels_;
    manifest["stages"] = nlohmann::json::array();
    for (const auto& stage : stages_) {
        nlohmann::json js = nlohmann::json::array();
        for (const auto& layer : stage) {
            std::string base = layer.name;
            std::replace(base.begin(), base.end(), '.', '_');
            save_tensor(dir + "/" + base + "_w.isat", layer.weight);
            save_tensor(dir + "/" + base + "_b.isat", layer.bias);
            js.push_back({{"name", layer.name},
                          {"weight", base + "_w.isat"},
                          {"bias", base + "_b.isat"},
                          {"weight_shape", layer.weight.shape()},
                          {"bias_shape", layer.bias.shape()}});
        }
        manifest["stages"].push_back(js);
    }
    std::ofstream os(dir + "/manifest.json");
    if (!os) throw IoError("LayeredModel::save: cannot write manifest in " + dir);
    os << manifest.dump(2) << "\n";
}

inline LayeredModel LayeredModel::load(const std::string& dir) {
    std::ifstream is(dir + "/manifest.json");
    if (!is) throw IoError("LayeredModel::load: cannot open manifest in " + dir);
    nlohmann::json manifest = nlohmann::json::parse(is);
    LayeredModel m;
    m.input_channels_ = manifest.at("input_channels").get<std::size_t>();
    for (const auto& js : manifest.at("stages")) {
        std::vector<ConvLayer> stage;
        for (const auto& jl : js) {
            ConvLayer layer;
            layer.name = jl.at("name").get<std::string>();
            layer.weight = load_tensor(dir + "/" + jl.at("weight").get<std::string>());
            layer.bias = load_tensor(dir + "/" + jl.at("bias").get<std::string>());
            layer.weight.set_requires_grad(true);
            layer.bias.set_requires_grad(true);
            stage.push_back(std::move(layer));
        }
        m.stages_.push_back(std::move(stage));
    }
    return m;
}

}  // namespace isa
