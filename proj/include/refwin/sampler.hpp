#pragma once

#include <functional>

#include "refwin/model.hpp"

namespace refwin::flow {

struct CFGWeights {
    double w_text = 8.0;
    double w_ref = 2.0;
    double w_both = 3.0;

    void validate() const {
        require(std::isfinite(w_text) && std::isfinite(w_ref) && std::isfinite(w_both),
                "CFG weights must be finite");
    }
};

struct SamplerConfig {
    int steps = 40;
    double shift = 5.66;
    std::uint64_t seed = 0;

    void validate() const {
        require(steps >= 1, "sampler steps must be >= 1");
        require(shift > 0.0, "time shift must be positive");
    }
};

/// Velocity estimate for z_t at diffusion time t with the given condition
/// groups dropped. Lets stubs stand in for the transformer in tests and for
/// the oracle/noise baselines.
using VelocityFn =
    std::function<TokenGrid(const TokenGrid& z_t, double t, bool drop_refs, bool drop_text)>;

VelocityFn model_velocity(const ModelParams& params, const Conditioning& cond);

/// e(c_ref,c_text)
///   + w_text * (e(c_ref,c_text) - e(c_ref,        null))
///   + w_ref  * (e(c_ref,c_text) - e(null,       c_text))
///   + w_both * (e(c_ref,c_text) - e(null,         null))
/// Exactly four evaluations; pass count reported through forward_passes.
TokenGrid multi_cfg(const VelocityFn& velocity, const TokenGrid& z_t, double t,
                    const CFGWeights& w, int* forward_passes = nullptr);

/// sigma(u) = shift*u / (1 + (shift-1)*u) evaluated on a uniform descending
/// grid from 1 to 0; size steps+1, front() == 1, back() == 0.
std::vector<double> shifted_timesteps(int steps, double shift);

/// Euler integration of the guided velocity from pure noise (t=1) to data
/// (t=0). Deterministic given the seed.
TokenGrid sample(const VelocityFn& velocity, int frames, int height, int width, int channels,
                 const CFGWeights& cfg, const SamplerConfig& sc);

TokenGrid sample_model(const ModelParams& params, const Conditioning& cond,
                       const CFGWeights& cfg, const SamplerConfig& sc);

}  // namespace refwin::flow
