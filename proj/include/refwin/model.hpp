#pragma once

#include <cstdint>
#include <memory>
#include <string>

#include "refwin/tokens.hpp"

namespace refwin::flow {

struct FlowConfig {
    // latent clip shape
    int frames = 8, height = 4, width = 4, channels = 16;
    // transformer
    int dim = 128, heads = 4, blocks = 4, ffn_mult = 4;
    // per-head channel split; must sum to dim/heads
    int head_dx = 8, head_dy = 8, head_dt = 16;
    double base_x = 10000.0, base_y = 10000.0, base_t = 10000.0;
    // conditioning
    int text_dim = 16, tag_hidden = 32, tag_count = 4, vocab = 32, max_refs = 4;
    int time_feats = 8;  // sin/cos pairs
    bool use_tags = true, use_caption = true;
    irope::RopeMode mode = irope::RopeMode::we;
    double w_p = 1.0, w_n = -0.5;
    bool mirrored_right_anchor = false;
    // index embeddings added in latent space by default; optionally after the
    // patch projection instead
    bool index_post_patchify = false;
    double index_embed_scale = 0.5;
    std::uint64_t init_seed = 1234;
    std::uint64_t table_seed = 777;  // fixed word-embedding hash table

    int head_dim() const { return dim / heads; }
    rope::AxisSplit split() const { return {head_dx, head_dy, head_dt}; }
    irope::WeRoPEWeights we_weights() const { return {w_p, w_n}; }
    void validate() const;
};

std::string flow_config_to_json(const FlowConfig& cfg);
FlowConfig flow_config_from_json(const std::string& text);

struct ParamInfo {
    std::string name;
    size_t offset = 0;
    size_t size = 0;
};

struct ModelParams {
    FlowConfig cfg;
    std::vector<ParamInfo> infos;
    std::vector<double> flat;        // trainable values, declaration order
    std::vector<double> word_table;  // vocab x text_dim, fixed

    std::span<double> view(const std::string& name);
    std::span<const double> view(const std::string& name) const;
    std::span<const double> word_embedding(int word) const;
    size_t param_count() const { return flat.size(); }
};

ModelParams build_model(const FlowConfig& cfg);

/// Everything the model is conditioned on besides the diffusion timestep.
struct Conditioning {
    std::vector<tokens::ReferenceSpec> refs;
    std::vector<int> caption_words;
    bool refs_dropped = false;
    bool text_dropped = false;
};

/// Joint Bernoulli drop of the whole reference set (images and tags together)
/// and an independent drop of the caption. Interval encodings are never
/// touched; dropped tokens keep their phases and carry the null token.
Conditioning drop_conditions(Conditioning cond, double p_ref_drop, double p_text_drop,
                             Rng& rng);

/// Per-sample forward state kept for the backward pass. Opaque; reuse one per
/// worker thread.
struct Workspace;
std::shared_ptr<Workspace> make_workspace();
const tokens::SequenceLayout& workspace_layout(const Workspace&);
std::span<const double> workspace_output(const Workspace&);  // tokens x channels

/// z_t = (1-t) z + t eps.
TokenGrid interpolate(const TokenGrid& z, const TokenGrid& eps, double t);

/// Predicted velocity on the video token block, as a grid shaped like z_t.
TokenGrid forward(const ModelParams& params, const TokenGrid& z_t, double t,
                  const Conditioning& cond, Workspace& ws);

/// MSE between prediction and (eps - z) over video tokens only, given a
/// prediction produced by any velocity source.
double velocity_mse(const TokenGrid& predicted, const TokenGrid& z, const TokenGrid& eps);

/// Full training loss: forward + velocity_mse. Keeps state in ws for backward.
double flow_loss(const ModelParams& params, const TokenGrid& z, const TokenGrid& eps,
                 double t, const Conditioning& cond, Workspace& ws);

/// Accumulate d(loss)/d(params) into grads (size == params.flat.size()).
/// Requires ws produced by flow_loss on the same params.
void backward(const ModelParams& params, Workspace& ws, std::span<double> grads);

}  // namespace refwin::flow
