#include "refwin/sampler.hpp"

#include <cmath>
#include <string>

namespace refwin::flow {

VelocityFn model_velocity(const ModelParams& params, const Conditioning& cond) {
    auto ws = make_workspace();
    return [&params, cond, ws](const TokenGrid& z_t, double t, bool drop_refs,
                               bool drop_text) {
        Conditioning c = cond;
        c.refs_dropped = cond.refs_dropped || drop_refs;
        c.text_dropped = cond.text_dropped || drop_text;
        return forward(params, z_t, t, c, *ws);
    };
}

TokenGrid multi_cfg(const VelocityFn& velocity, const TokenGrid& z_t, double t,
                    const CFGWeights& w, int* forward_passes) {
    w.validate();
    int passes = 0;
    auto eval = [&](bool drop_refs, bool drop_text) {
        ++passes;
        return velocity(z_t, t, drop_refs, drop_text);
    };
    TokenGrid full = eval(false, false);
    TokenGrid no_text = eval(false, true);
    TokenGrid no_ref = eval(true, false);
    TokenGrid none = eval(true, true);
    if (forward_passes) *forward_passes = passes;

    TokenGrid out = full;
    for (size_t i = 0; i < out.data.size(); ++i) {
        double f = full.data[i];
        out.data[i] = f + w.w_text * (f - no_text.data[i]) + w.w_ref * (f - no_ref.data[i]) +
                      w.w_both * (f - none.data[i]);
    }
    return out;
}

std::vector<double> shifted_timesteps(int steps, double shift) {
    require(steps >= 1, "steps must be >= 1");
    require(shift > 0.0, "shift must be positive");
    std::vector<double> ts(steps + 1);
    for (int k = 0; k <= steps; ++k) {
        double u = 1.0 - static_cast<double>(k) / steps;
        ts[k] = shift * u / (1.0 + (shift - 1.0) * u);
    }
    ts.front() = 1.0;
    ts.back() = 0.0;
    return ts;
}

TokenGrid sample(const VelocityFn& velocity, int frames, int height, int width, int channels,
                 const CFGWeights& cfg, const SamplerConfig& sc) {
    sc.validate();
    Rng rng(sc.seed);
    TokenGrid z = gaussian_grid(frames, height, width, channels, rng);
    std::vector<double> ts = shifted_timesteps(sc.steps, sc.shift);
    for (int k = 0; k < sc.steps; ++k) {
        TokenGrid v = multi_cfg(velocity, z, ts[k], cfg);
        double dt = ts[k + 1] - ts[k];
        for (size_t i = 0; i < z.data.size(); ++i) z.data[i] += dt * v.data[i];
        if (!all_finite(z.data))
            throw NumericError("sampler produced non-finite state at step " +
                               std::to_string(k));
    }
    return z;
}

TokenGrid sample_model(const ModelParams& params, const Conditioning& cond,
                       const CFGWeights& cfg, const SamplerConfig& sc) {
    return sample(model_velocity(params, cond), params.cfg.frames, params.cfg.height,
                  params.cfg.width, params.cfg.channels, cfg, sc);
}

}  // namespace refwin::flow
