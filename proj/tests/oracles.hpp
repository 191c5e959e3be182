#pragma once

// Independent reference implementations used as test oracles. These never
// touch the autodiff path they check.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "isa/rng.hpp"

namespace oracle {

// Naive quadruple-loop cross-correlation, stride 1 only, no padding handling
// beyond zero fill.
inline std::vector<double> conv2d_ref(const std::vector<double>& x, std::size_t c_in,
                                      std::size_t h, std::size_t w,
                                      const std::vector<double>& kernel, std::size_t c_out,
                                      std::size_t kh, std::size_t kw,
                                      const std::vector<double>& bias, std::size_t stride,
                                      std::size_t padding) {
    const std::size_t oh = (h + 2 * padding - kh) / stride + 1;
    const std::size_t ow = (w + 2 * padding - kw) / stride + 1;
    std::vector<double> out(c_out * oh * ow, 0.0);
    for (std::size_t co = 0; co < c_out; ++co)
        for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t z = 0; z < ow; ++z) {
                double acc = bias[co];
                for (std::size_t ci = 0; ci < c_in; ++ci)
                    for (std::size_t ky = 0; ky < kh; ++ky)
                        for (std::size_t kz = 0; kz < kw; ++kz) {
                            const long iy = static_cast<long>(y * stride + ky) -
                                            static_cast<long>(padding);
                            const long iz = static_cast<long>(z * stride + kz) -
                                            static_cast<long>(padding);
                            if (iy < 0 || iy >= static_cast<long>(h) || iz < 0 ||
                                iz >= static_cast<long>(w))
                                continue;
                            acc += x[(ci * h + iy) * w + iz] *
                                   kernel[((co * c_in + ci) * kh + ky) * kw + kz];
                        }
                out[(co * oh + y) * ow + z] = acc;
            }
    return out;
}

inline std::vector<double> avg_pool_ref(const std::vector<double>& x, std::size_t c,
                                        std::size_t h, std::size_t w, std::size_t win) {
    const std::size_t oh = h / win, ow = w / win;
    std::vector<double> out(c * oh * ow, 0.0);
    for (std::size_t ci = 0; ci < c; ++ci)
        for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t z = 0; z < ow; ++z) {
                double acc = 0.0;
                for (std::size_t dy = 0; dy < win; ++dy)
                    for (std::size_t dz = 0; dz < win; ++dz)
                        acc += x[(ci * h + y * win + dy) * w + z * win + dz];
                out[(ci * oh + y) * ow + z] = acc / static_cast<double>(win * win);
            }
    return out;
}

inline double bce_ref(const std::vector<double>& p, const std::vector<double>& t) {
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double pc = std::clamp(p[i], 1e-7, 1.0 - 1e-7);
        acc -= t[i] * std::log(pc) + (1.0 - t[i]) * std::log(1.0 - pc);
    }
    return acc / static_cast<double>(p.size());
}

// Confusion-matrix mIoU over {bg, fg}.
inline double miou_ref(const std::vector<double>& pred, const std::vector<double>& gt) {
    std::size_t cm[2][2] = {{0, 0}, {0, 0}};
    for (std::size_t i = 0; i < pred.size(); ++i) {
        cm[pred[i] != 0.0 ? 1 : 0][gt[i] != 0.0 ? 1 : 0]++;
    }
    double total = 0.0;
    std::size_t classes = 0;
    // fg
    if (cm[1][1] + cm[1][0] + cm[0][1] > 0) {
        total += static_cast<double>(cm[1][1]) /
                 static_cast<double>(cm[1][1] + cm[1][0] + cm[0][1]);
        ++classes;
    }
    // bg
    if (cm[0][0] + cm[0][1] + cm[1][0] > 0) {
        total += static_cast<double>(cm[0][0]) /
                 static_cast<double>(cm[0][0] + cm[0][1] + cm[1][0]);
        ++classes;
    }
    return classes ? total / static_cast<double>(classes) : 1.0;
}

inline std::vector<double> random_vec(isa::Rng& rng, std::size_t n, double lo = -1.0,
                                      double hi = 1.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(lo, hi);
    return v;
}

}  // namespace oracle
