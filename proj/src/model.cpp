#include "refwin/model.hpp"

#include <algorithm>
#include <cmath>

#include "json.hpp"

namespace refwin::flow {

void FlowConfig::validate() const {
    require(frames >= 1 && height >= 1 && width >= 1 && channels >= 1, "bad clip shape");
    require(dim >= 2 && heads >= 1 && dim % heads == 0, "dim must divide by heads");
    require(head_dx + head_dy + head_dt == head_dim(), "head split must sum to dim/heads");
    split().validate();
    require(blocks >= 1 && ffn_mult >= 1, "bad transformer shape");
    require(text_dim >= 1 && tag_hidden >= 1 && tag_count >= 1, "bad tag shape");
    require(vocab >= 2 && max_refs >= 1, "bad vocab/refs");
    require(time_feats >= 1, "bad time features");
    require(base_x > 1 && base_y > 1 && base_t > 1, "rope base must be > 1");
    irope::WeRoPEWeights{w_p, w_n}.validate();
}

namespace {

using nlohmann::json;

json cfg_to_json_obj(const FlowConfig& c) {
    json j;
    j["frames"] = c.frames;
    j["height"] = c.height;
    j["width"] = c.width;
    j["channels"] = c.channels;
    j["dim"] = c.dim;
    j["heads"] = c.heads;
    j["blocks"] = c.blocks;
    j["ffn_mult"] = c.ffn_mult;
    j["head_dx"] = c.head_dx;
    j["head_dy"] = c.head_dy;
    j["head_dt"] = c.head_dt;
    j["base_x"] = c.base_x;
    j["base_y"] = c.base_y;
    j["base_t"] = c.base_t;
    j["text_dim"] = c.text_dim;
    j["tag_hidden"] = c.tag_hidden;
    j["tag_count"] = c.tag_count;
    j["vocab"] = c.vocab;
    j["max_refs"] = c.max_refs;
    j["time_feats"] = c.time_feats;
    j["use_tags"] = c.use_tags;
    j["use_caption"] = c.use_caption;
    j["mode"] = irope::rope_mode_name(c.mode);
    j["w_p"] = c.w_p;
    j["w_n"] = c.w_n;
    j["mirrored_right_anchor"] = c.mirrored_right_anchor;
    j["index_post_patchify"] = c.index_post_patchify;
    j["index_embed_scale"] = c.index_embed_scale;
    j["init_seed"] = c.init_seed;
    j["table_seed"] = c.table_seed;
    return j;
}

FlowConfig cfg_from_json_obj(const json& j) {
    FlowConfig c;
    static const std::vector<std::string> known = {
        "frames", "height", "width", "channels", "dim", "heads", "blocks", "ffn_mult",
        "head_dx", "head_dy", "head_dt", "base_x", "base_y", "base_t", "text_dim",
        "tag_hidden", "tag_count", "vocab", "max_refs", "time_feats", "use_tags",
        "use_caption", "mode", "w_p", "w_n", "mirrored_right_anchor",
        "index_post_patchify", "index_embed_scale", "init_seed", "table_seed"};
    for (auto it = j.begin(); it != j.end(); ++it)
        require(std::find(known.begin(), known.end(), it.key()) != known.end(),
                "unknown model config key: " + it.key());
    c.frames = j.value("frames", c.frames);
    c.height = j.value("height", c.height);
    c.width = j.value("width", c.width);
    c.channels = j.value("channels", c.channels);
    c.dim = j.value("dim", c.dim);
    c.heads = j.value("heads", c.heads);
    c.blocks = j.value("blocks", c.blocks);
    c.ffn_mult = j.value("ffn_mult", c.ffn_mult);
    c.head_dx = j.value("head_dx", c.head_dx);
    c.head_dy = j.value("head_dy", c.head_dy);
    c.head_dt = j.value("head_dt", c.head_dt);
    c.base_x = j.value("base_x", c.base_x);
    c.base_y = j.value("base_y", c.base_y);
    c.base_t = j.value("base_t", c.base_t);
    c.text_dim = j.value("text_dim", c.text_dim);
    c.tag_hidden = j.value("tag_hidden", c.tag_hidden);
    c.tag_count = j.value("tag_count", c.tag_count);
    c.vocab = j.value("vocab", c.vocab);
    c.max_refs = j.value("max_refs", c.max_refs);
    c.time_feats = j.value("time_feats", c.time_feats);
    c.use_tags = j.value("use_tags", c.use_tags);
    c.use_caption = j.value("use_caption", c.use_caption);
    if (j.contains("mode")) c.mode = irope::rope_mode_from_name(j["mode"].get<std::string>());
    c.w_p = j.value("w_p", c.w_p);
    c.w_n = j.value("w_n", c.w_n);
    c.mirrored_right_anchor = j.value("mirrored_right_anchor", c.mirrored_right_anchor);
    c.index_post_patchify = j.value("index_post_patchify", c.index_post_patchify);
    c.index_embed_scale = j.value("index_embed_scale", c.index_embed_scale);
    c.init_seed = j.value("init_seed", c.init_seed);
    c.table_seed = j.value("table_seed", c.table_seed);
    return c;
}

// --- small dense kernels -------------------------------------------------

// C[n x m] = A[n x k] * B[k x m]; accumulate optionally.
void mm(const double* A, const double* B, double* C, int n, int k, int m, bool acc = false) {
    if (!acc) std::fill(C, C + static_cast<size_t>(n) * m, 0.0);
    for (int i = 0; i < n; ++i) {
        const double* a = A + static_cast<size_t>(i) * k;
        double* c = C + static_cast<size_t>(i) * m;
        for (int p = 0; p < k; ++p) {
            double av = a[p];
            if (av == 0.0) continue;
            const double* b = B + static_cast<size_t>(p) * m;
            for (int q = 0; q < m; ++q) c[q] += av * b[q];
        }
    }
}

// dA[n x k] += dC[n x m] * B^T
void mm_bt(const double* dC, const double* B, double* dA, int n, int k, int m) {
    for (int i = 0; i < n; ++i) {
        const double* dc = dC + static_cast<size_t>(i) * m;
        double* da = dA + static_cast<size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            const double* b = B + static_cast<size_t>(p) * m;
            double acc = 0.0;
            for (int q = 0; q < m; ++q) acc += dc[q] * b[q];
            da[p] += acc;
        }
    }
}

// dB[k x m] += A^T * dC
void mm_at(const double* A, const double* dC, double* dB, int n, int k, int m) {
    for (int i = 0; i < n; ++i) {
        const double* a = A + static_cast<size_t>(i) * k;
        const double* dc = dC + static_cast<size_t>(i) * m;
        for (int p = 0; p < k; ++p) {
            double av = a[p];
            if (av == 0.0) continue;
            double* db = dB + static_cast<size_t>(p) * m;
            for (int q = 0; q < m; ++q) db[q] += av * dc[q];
        }
    }
}

void add_bias(double* X, const double* b, int n, int m) {
    for (int i = 0; i < n; ++i) {
        double* x = X + static_cast<size_t>(i) * m;
        for (int q = 0; q < m; ++q) x[q] += b[q];
    }
}

void bias_grad(const double* dX, double* db, int n, int m) {
    for (int i = 0; i < n; ++i) {
        const double* dx = dX + static_cast<size_t>(i) * m;
        for (int q = 0; q < m; ++q) db[q] += dx[q];
    }
}

double silu(double x) { return x / (1.0 + std::exp(-x)); }
double silu_grad(double x) {
    double s = 1.0 / (1.0 + std::exp(-x));
    return s * (1.0 + x * (1.0 - s));
}

constexpr double kLnEps = 1e-6;

// y = (x - mu)/sqrt(var + eps) * g + b, per row of width m.
void layer_norm(const double* X, const double* g, const double* b, double* Y, double* mean,
                double* rstd, int n, int m) {
    for (int i = 0; i < n; ++i) {
        const double* x = X + static_cast<size_t>(i) * m;
        double* y = Y + static_cast<size_t>(i) * m;
        double mu = 0.0;
        for (int q = 0; q < m; ++q) mu += x[q];
        mu /= m;
        double var = 0.0;
        for (int q = 0; q < m; ++q) var += (x[q] - mu) * (x[q] - mu);
        var /= m;
        double rs = 1.0 / std::sqrt(var + kLnEps);
        mean[i] = mu;
        rstd[i] = rs;
        for (int q = 0; q < m; ++q) y[q] = (x[q] - mu) * rs * g[q] + b[q];
    }
}

void layer_norm_backward(const double* X, const double* g, const double* mean,
                         const double* rstd, const double* dY, double* dX, double* dg,
                         double* db, int n, int m) {
    for (int i = 0; i < n; ++i) {
        const double* x = X + static_cast<size_t>(i) * m;
        const double* dy = dY + static_cast<size_t>(i) * m;
        double* dx = dX + static_cast<size_t>(i) * m;
        double mu = mean[i], rs = rstd[i];
        double sum_dyg = 0.0, sum_dyg_xhat = 0.0;
        for (int q = 0; q < m; ++q) {
            double xhat = (x[q] - mu) * rs;
            double dyg = dy[q] * g[q];
            sum_dyg += dyg;
            sum_dyg_xhat += dyg * xhat;
            dg[q] += dy[q] * xhat;
            db[q] += dy[q];
        }
        for (int q = 0; q < m; ++q) {
            double xhat = (x[q] - mu) * rs;
            double dyg = dy[q] * g[q];
            dx[q] += rs * (dyg - sum_dyg / m - xhat * sum_dyg_xhat / m);
        }
    }
}

}  // namespace

std::string flow_config_to_json(const FlowConfig& cfg) { return cfg_to_json_obj(cfg).dump(2); }

FlowConfig flow_config_from_json(const std::string& text) {
    return cfg_from_json_obj(json::parse(text));
}

std::span<double> ModelParams::view(const std::string& name) {
    for (const auto& info : infos)
        if (info.name == name) return std::span<double>(flat).subspan(info.offset, info.size);
    throw std::invalid_argument("unknown parameter: " + name);
}

std::span<const double> ModelParams::view(const std::string& name) const {
    for (const auto& info : infos)
        if (info.name == name)
            return std::span<const double>(flat).subspan(info.offset, info.size);
    throw std::invalid_argument("unknown parameter: " + name);
}

std::span<const double> ModelParams::word_embedding(int word) const {
    require(word >= 0 && word < cfg.vocab, "word id out of range");
    return std::span<const double>(word_table)
        .subspan(static_cast<size_t>(word) * cfg.text_dim, cfg.text_dim);
}

namespace {

struct Builder {
    ModelParams& p;
    void add(const std::string& name, size_t size) {
        p.infos.push_back({name, p.flat.size(), size});
        p.flat.resize(p.flat.size() + size, 0.0);
    }
};

void fill_gauss(std::span<double> dst, Rng& rng, double scale) {
    for (double& x : dst) x = rng.gauss() * scale;
}

}  // namespace

ModelParams build_model(const FlowConfig& cfg) {
    cfg.validate();
    ModelParams p;
    p.cfg = cfg;
    Builder b{p};

    const int C = cfg.channels, D = cfg.dim, E = cfg.text_dim;
    const int TF = 2 * cfg.time_feats;
    const int M = cfg.ffn_mult * D;

    b.add("patch_w", static_cast<size_t>(C) * D);
    b.add("patch_b", D);
    b.add("time_w1", static_cast<size_t>(TF) * D);
    b.add("time_b1", D);
    b.add("time_w2", static_cast<size_t>(D) * D);
    b.add("time_b2", D);
    if (cfg.use_caption) {
        b.add("cap_w1", static_cast<size_t>(E) * D);
        b.add("cap_b1", D);
        b.add("cap_w2", static_cast<size_t>(D) * D);
        b.add("cap_b2", D);
        b.add("null_caption", E);
    }
    if (cfg.use_tags) {
        b.add("tag_w1", static_cast<size_t>(E) * cfg.tag_hidden);
        b.add("tag_b1", cfg.tag_hidden);
        b.add("tag_w2", static_cast<size_t>(cfg.tag_hidden) * C);
        b.add("tag_b2", C);
    }
    b.add("index_table",
          static_cast<size_t>(cfg.max_refs) * (cfg.index_post_patchify ? D : C));
    b.add("null_token", C);
    for (int blk = 0; blk < cfg.blocks; ++blk) {
        std::string s = "blk" + std::to_string(blk) + ".";
        b.add(s + "ln1_g", D);
        b.add(s + "ln1_b", D);
        b.add(s + "wq", static_cast<size_t>(D) * D);
        b.add(s + "bq", D);
        b.add(s + "wk", static_cast<size_t>(D) * D);
        b.add(s + "bk", D);
        b.add(s + "wv", static_cast<size_t>(D) * D);
        b.add(s + "bv", D);
        b.add(s + "wo", static_cast<size_t>(D) * D);
        b.add(s + "bo", D);
        b.add(s + "ln2_g", D);
        b.add(s + "ln2_b", D);
        b.add(s + "ffn_w1", static_cast<size_t>(D) * M);
        b.add(s + "ffn_b1", M);
        b.add(s + "ffn_w2", static_cast<size_t>(M) * D);
        b.add(s + "ffn_b2", D);
    }
    b.add("final_ln_g", D);
    b.add("final_ln_b", D);
    b.add("head_w", static_cast<size_t>(D) * C);
    b.add("head_b", C);

    Rng rng(cfg.init_seed);
    fill_gauss(p.view("patch_w"), rng, std::sqrt(1.0 / C));
    fill_gauss(p.view("time_w1"), rng, std::sqrt(1.0 / TF));
    fill_gauss(p.view("time_w2"), rng, std::sqrt(1.0 / D));
    if (cfg.use_caption) {
        fill_gauss(p.view("cap_w1"), rng, std::sqrt(1.0 / E));
        fill_gauss(p.view("cap_w2"), rng, std::sqrt(1.0 / D));
        fill_gauss(p.view("null_caption"), rng, 0.5);
    }
    if (cfg.use_tags) {
        fill_gauss(p.view("tag_w1"), rng, std::sqrt(1.0 / E));
        fill_gauss(p.view("tag_w2"), rng, std::sqrt(1.0 / cfg.tag_hidden));
    }
    fill_gauss(p.view("index_table"), rng, cfg.index_embed_scale);
    fill_gauss(p.view("null_token"), rng, 0.2);
    const double resid_scale = 1.0 / std::sqrt(2.0 * cfg.blocks);
    for (int blk = 0; blk < cfg.blocks; ++blk) {
        std::string s = "blk" + std::to_string(blk) + ".";
        std::fill(p.view(s + "ln1_g").begin(), p.view(s + "ln1_g").end(), 1.0);
        std::fill(p.view(s + "ln2_g").begin(), p.view(s + "ln2_g").end(), 1.0);
        fill_gauss(p.view(s + "wq"), rng, std::sqrt(1.0 / D));
        fill_gauss(p.view(s + "wk"), rng, std::sqrt(1.0 / D));
        fill_gauss(p.view(s + "wv"), rng, std::sqrt(1.0 / D));
        fill_gauss(p.view(s + "wo"), rng, std::sqrt(1.0 / D) * resid_scale);
        fill_gauss(p.view(s + "ffn_w1"), rng, std::sqrt(1.0 / D));
        fill_gauss(p.view(s + "ffn_w2"), rng, std::sqrt(1.0 / M) * resid_scale);
    }
    std::fill(p.view("final_ln_g").begin(), p.view("final_ln_g").end(), 1.0);
    fill_gauss(p.view("head_w"), rng, std::sqrt(1.0 / D) * 0.1);

    // fixed word table, separate stream so it never depends on init order
    p.word_table.resize(static_cast<size_t>(cfg.vocab) * E);
    Rng trng(cfg.table_seed);
    for (double& x : p.word_table) x = trng.gauss();

    tokens::IndexEmbeddingTable check{cfg.max_refs, cfg.index_post_patchify ? D : C, {}};
    auto it = p.view("index_table");
    check.table.assign(it.begin(), it.end());
    check.validate_distinct();
    return p;
}

Conditioning drop_conditions(Conditioning cond, double p_ref_drop, double p_text_drop,
                             Rng& rng) {
    require(p_ref_drop >= 0.0 && p_ref_drop <= 1.0, "p_ref_drop must be in [0,1]");
    require(p_text_drop >= 0.0 && p_text_drop <= 1.0, "p_text_drop must be in [0,1]");
    if (rng.bernoulli(p_ref_drop)) cond.refs_dropped = true;
    if (rng.bernoulli(p_text_drop)) cond.text_dropped = true;
    return cond;
}

TokenGrid interpolate(const TokenGrid& z, const TokenGrid& eps, double t) {
    require(z.same_shape(eps), "interpolate shape mismatch");
    require(t >= 0.0 && t <= 1.0, "t must be in [0,1]");
    TokenGrid out = z;
    for (size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = (1.0 - t) * z.data[i] + t * eps.data[i];
    return out;
}

double velocity_mse(const TokenGrid& predicted, const TokenGrid& z, const TokenGrid& eps) {
    require(predicted.same_shape(z) && z.same_shape(eps), "loss shape mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < z.data.size(); ++i) {
        double d = predicted.data[i] - (eps.data[i] - z.data[i]);
        acc += d * d;
    }
    return acc / static_cast<double>(z.data.size());
}

// --- forward/backward ------------------------------------------------------

struct BlockState {
    std::vector<double> x_in;     // N x D input to the block
    std::vector<double> ln1_out, ln1_mean, ln1_rstd;
    std::vector<double> q, k, v;  // raw projections, N x D
    std::vector<double> qr, kr;   // after positional multipliers
    std::vector<double> probs;    // heads x N x N
    std::vector<double> att;      // N x D concatenated head outputs
    std::vector<double> att_proj; // N x D after wo
    std::vector<double> x_mid;    // N x D after attention residual
    std::vector<double> ln2_out, ln2_mean, ln2_rstd;
    std::vector<double> ffn_pre, ffn_act;  // N x M
};

struct Workspace {
    tokens::AssembledSequence seq;
    Conditioning cond;  // the conditioning used (flags included)
    double t = 0.0;
    int tokens = 0;

    std::vector<double> time_feats;             // 2F
    std::vector<double> time_h_pre, time_h;     // D
    std::vector<double> time_out;               // D
    std::vector<double> cap_in;                 // E (pooled or null)
    bool cap_in_is_null = false;
    std::vector<double> cap_h_pre, cap_h;       // D
    std::vector<double> cap_out;                // D
    std::vector<double> cond_vec;               // D

    std::vector<double> x0;                     // N x D after patchify + cond
    std::vector<BlockState> blocks;
    std::vector<double> final_in;               // N x D
    std::vector<double> fin_out, fin_mean, fin_rstd;
    std::vector<double> out;                    // N x C

    TokenGrid target;  // eps - z, set by flow_loss
    bool has_target = false;
};

std::shared_ptr<Workspace> make_workspace() { return std::make_shared<Workspace>(); }

const tokens::SequenceLayout& workspace_layout(const Workspace& ws) { return ws.seq.layout; }

std::span<const double> workspace_output(const Workspace& ws) {
    return std::span<const double>(ws.out);
}

namespace {

void time_features(double t, int pairs, std::vector<double>& out) {
    out.resize(2 * pairs);
    for (int j = 0; j < pairs; ++j) {
        double f = std::pow(100.0, pairs == 1 ? 0.0 : static_cast<double>(j) / (pairs - 1));
        out[2 * j] = std::sin(t * f);
        out[2 * j + 1] = std::cos(t * f);
    }
}

// y' = c * y per pair, broadcast over heads. mult has head_dim/2 entries.
void apply_rope_rows(const ModelParams& p, const tokens::SequenceLayout& layout,
                     const std::vector<double>& src, std::vector<double>& dst, int N) {
    const int D = p.cfg.dim, H = p.cfg.heads, hd = p.cfg.head_dim();
    dst = src;
    for (int n = 0; n < N; ++n) {
        const auto& mult = layout.records[n].multipliers;
        for (int h = 0; h < H; ++h) {
            double* row = dst.data() + static_cast<size_t>(n) * D + static_cast<size_t>(h) * hd;
            for (int pr = 0; pr < hd / 2; ++pr) {
                double a = row[2 * pr], bb = row[2 * pr + 1];
                row[2 * pr] = a * mult[pr].real() - bb * mult[pr].imag();
                row[2 * pr + 1] = a * mult[pr].imag() + bb * mult[pr].real();
            }
        }
    }
}

// backward of apply_rope_rows: multiply by conj(c)
void apply_rope_rows_conj(const ModelParams& p, const tokens::SequenceLayout& layout,
                          std::vector<double>& grad, int N) {
    const int D = p.cfg.dim, H = p.cfg.heads, hd = p.cfg.head_dim();
    for (int n = 0; n < N; ++n) {
        const auto& mult = layout.records[n].multipliers;
        for (int h = 0; h < H; ++h) {
            double* row = grad.data() + static_cast<size_t>(n) * D + static_cast<size_t>(h) * hd;
            for (int pr = 0; pr < hd / 2; ++pr) {
                double a = row[2 * pr], bb = row[2 * pr + 1];
                row[2 * pr] = a * mult[pr].real() + bb * mult[pr].imag();
                row[2 * pr + 1] = -a * mult[pr].imag() + bb * mult[pr].real();
            }
        }
    }
}

tokens::AssemblyParams assembly_params(const ModelParams& p) {
    tokens::AssemblyParams ap;
    const int C = p.cfg.channels;
    ap.index_table.max_refs = p.cfg.max_refs;
    ap.index_table.dim = C;
    if (p.cfg.index_post_patchify) {
        // real embeddings live in model width and are added after the patch
        // projection; assembly sees a zero table
        ap.index_table.table.assign(static_cast<size_t>(p.cfg.max_refs) * C, 0.0);
    } else {
        auto it = p.view("index_table");
        ap.index_table.table.assign(it.begin(), it.end());
    }
    if (p.cfg.use_tags) {
        ap.tag_mlp.w1 = p.view("tag_w1");
        ap.tag_mlp.b1 = p.view("tag_b1");
        ap.tag_mlp.w2 = p.view("tag_w2");
        ap.tag_mlp.b2 = p.view("tag_b2");
        ap.tag_mlp.in = p.cfg.text_dim;
        ap.tag_mlp.hidden = p.cfg.tag_hidden;
        ap.tag_mlp.out = C;
    }
    ap.null_token = p.view("null_token");
    ap.banks = rope::make_banks(p.cfg.split(), p.cfg.base_x, p.cfg.base_y, p.cfg.base_t);
    ap.split = p.cfg.split();
    return ap;
}

// Sequence assembly honoring the model's tag/caption switches. When tags are
// disabled, references contribute image tokens only.
tokens::AssembledSequence assemble_for_model(const ModelParams& p, const TokenGrid& z_t,
                                             const Conditioning& cond) {
    std::vector<tokens::ReferenceSpec> refs = cond.refs;
    if (!p.cfg.use_tags) {
        for (auto& r : refs) r.tag_tokens.assign(1, std::vector<double>(p.cfg.text_dim, 0.0));
    }
    tokens::AssemblyParams ap = assembly_params(p);
    if (!p.cfg.use_tags) {
        tokens::AssembledSequence seq;
        // assemble with a stub tag MLP that maps everything to zero, then strip
        // the tag tokens from the sequence
        std::vector<double> zw1(static_cast<size_t>(p.cfg.text_dim) * 1, 0.0), zb1(1, 0.0);
        std::vector<double> zw2(static_cast<size_t>(1) * p.cfg.channels, 0.0),
            zb2(p.cfg.channels, 0.0);
        ap.tag_mlp.w1 = zw1;
        ap.tag_mlp.b1 = zb1;
        ap.tag_mlp.w2 = zw2;
        ap.tag_mlp.b2 = zb2;
        ap.tag_mlp.in = p.cfg.text_dim;
        ap.tag_mlp.hidden = 1;
        ap.tag_mlp.out = p.cfg.channels;
        seq = tokens::assemble_sequence(z_t, refs, p.cfg.mode, p.cfg.we_weights(), ap,
                                        cond.refs_dropped, p.cfg.mirrored_right_anchor);
        tokens::AssembledSequence pruned;
        pruned.channels = seq.channels;
        for (size_t i = 0; i < seq.layout.records.size(); ++i) {
            if (seq.layout.records[i].stream == tokens::Stream::ref_text) continue;
            pruned.layout.records.push_back(seq.layout.records[i]);
            pruned.features.insert(pruned.features.end(),
                                   seq.features.begin() + i * seq.channels,
                                   seq.features.begin() + (i + 1) * seq.channels);
        }
        pruned.tokens = static_cast<int>(pruned.layout.records.size());
        pruned.layout.video_tokens = seq.layout.video_tokens;
        return pruned;
    }
    return tokens::assemble_sequence(z_t, refs, p.cfg.mode, p.cfg.we_weights(), ap,
                                     cond.refs_dropped, p.cfg.mirrored_right_anchor);
}

void run_forward(const ModelParams& p, const TokenGrid& z_t, double t,
                 const Conditioning& cond, Workspace& ws) {
    p.cfg.validate();
    require(z_t.frames == p.cfg.frames && z_t.height == p.cfg.height &&
                z_t.width == p.cfg.width && z_t.channels == p.cfg.channels,
            "clip shape does not match model config");
    require(t >= 0.0 && t <= 1.0, "diffusion time must be in [0,1]");

    const int C = p.cfg.channels, D = p.cfg.dim, H = p.cfg.heads, hd = p.cfg.head_dim();
    const int M = p.cfg.ffn_mult * D;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

    ws.cond = cond;
    ws.t = t;
    ws.seq = assemble_for_model(p, z_t, cond);
    const int N = ws.seq.tokens;
    ws.tokens = N;

    // timestep embedding
    time_features(t, p.cfg.time_feats, ws.time_feats);
    const int TF = 2 * p.cfg.time_feats;
    ws.time_h_pre.assign(D, 0.0);
    mm(ws.time_feats.data(), p.view("time_w1").data(), ws.time_h_pre.data(), 1, TF, D);
    add_bias(ws.time_h_pre.data(), p.view("time_b1").data(), 1, D);
    ws.time_h.resize(D);
    for (int i = 0; i < D; ++i) ws.time_h[i] = silu(ws.time_h_pre[i]);
    ws.time_out.assign(D, 0.0);
    mm(ws.time_h.data(), p.view("time_w2").data(), ws.time_out.data(), 1, D, D);
    add_bias(ws.time_out.data(), p.view("time_b2").data(), 1, D);

    ws.cond_vec = ws.time_out;

    if (p.cfg.use_caption) {
        const int E = p.cfg.text_dim;
        ws.cap_in.assign(E, 0.0);
        ws.cap_in_is_null = cond.text_dropped;
        if (cond.text_dropped) {
            auto nc = p.view("null_caption");
            std::copy(nc.begin(), nc.end(), ws.cap_in.begin());
        } else if (!cond.caption_words.empty()) {
            for (int wd : cond.caption_words) {
                auto e = p.word_embedding(wd);
                for (int i = 0; i < E; ++i) ws.cap_in[i] += e[i];
            }
            for (int i = 0; i < E; ++i)
                ws.cap_in[i] /= static_cast<double>(cond.caption_words.size());
        }
        ws.cap_h_pre.assign(D, 0.0);
        mm(ws.cap_in.data(), p.view("cap_w1").data(), ws.cap_h_pre.data(), 1, E, D);
        add_bias(ws.cap_h_pre.data(), p.view("cap_b1").data(), 1, D);
        ws.cap_h.resize(D);
        for (int i = 0; i < D; ++i) ws.cap_h[i] = silu(ws.cap_h_pre[i]);
        ws.cap_out.assign(D, 0.0);
        mm(ws.cap_h.data(), p.view("cap_w2").data(), ws.cap_out.data(), 1, D, D);
        add_bias(ws.cap_out.data(), p.view("cap_b2").data(), 1, D);
        for (int i = 0; i < D; ++i) ws.cond_vec[i] += ws.cap_out[i];
    }

    // patchify + conditioning broadcast
    ws.x0.assign(static_cast<size_t>(N) * D, 0.0);
    mm(ws.seq.features.data(), p.view("patch_w").data(), ws.x0.data(), N, C, D);
    add_bias(ws.x0.data(), p.view("patch_b").data(), N, D);
    if (p.cfg.index_post_patchify) {
        auto table = p.view("index_table");
        for (int n = 0; n < N; ++n) {
            const auto& rec = ws.seq.layout.records[n];
            if (rec.index_embedding_id >= 0 && !rec.dropped) {
                const double* row = table.data() + static_cast<size_t>(rec.index_embedding_id) * D;
                double* x = ws.x0.data() + static_cast<size_t>(n) * D;
                for (int i = 0; i < D; ++i) x[i] += row[i];
            }
        }
    }
    for (int n = 0; n < N; ++n) {
        double* x = ws.x0.data() + static_cast<size_t>(n) * D;
        for (int i = 0; i < D; ++i) x[i] += ws.cond_vec[i];
    }

    ws.blocks.resize(p.cfg.blocks);
    const std::vector<double>* x_prev = &ws.x0;
    for (int blk = 0; blk < p.cfg.blocks; ++blk) {
        std::string s = "blk" + std::to_string(blk) + ".";
        BlockState& st = ws.blocks[blk];
        st.x_in = *x_prev;
        st.ln1_out.assign(static_cast<size_t>(N) * D, 0.0);
        st.ln1_mean.resize(N);
        st.ln1_rstd.resize(N);
        layer_norm(st.x_in.data(), p.view(s + "ln1_g").data(), p.view(s + "ln1_b").data(),
                   st.ln1_out.data(), st.ln1_mean.data(), st.ln1_rstd.data(), N, D);

        st.q.assign(static_cast<size_t>(N) * D, 0.0);
        st.k.assign(static_cast<size_t>(N) * D, 0.0);
        st.v.assign(static_cast<size_t>(N) * D, 0.0);
        mm(st.ln1_out.data(), p.view(s + "wq").data(), st.q.data(), N, D, D);
        add_bias(st.q.data(), p.view(s + "bq").data(), N, D);
        mm(st.ln1_out.data(), p.view(s + "wk").data(), st.k.data(), N, D, D);
        add_bias(st.k.data(), p.view(s + "bk").data(), N, D);
        mm(st.ln1_out.data(), p.view(s + "wv").data(), st.v.data(), N, D, D);
        add_bias(st.v.data(), p.view(s + "bv").data(), N, D);

        apply_rope_rows(p, ws.seq.layout, st.q, st.qr, N);
        apply_rope_rows(p, ws.seq.layout, st.k, st.kr, N);

        st.probs.assign(static_cast<size_t>(H) * N * N, 0.0);
        st.att.assign(static_cast<size_t>(N) * D, 0.0);
        std::vector<double> logits(N);
        for (int h = 0; h < H; ++h) {
            const size_t ho = static_cast<size_t>(h) * hd;
            double* probs_h = st.probs.data() + static_cast<size_t>(h) * N * N;
            for (int i = 0; i < N; ++i) {
                const double* qi = st.qr.data() + static_cast<size_t>(i) * D + ho;
                double mx = -1e300;
                for (int j = 0; j < N; ++j) {
                    const double* kj = st.kr.data() + static_cast<size_t>(j) * D + ho;
                    double acc = 0.0;
                    for (int c = 0; c < hd; ++c) acc += qi[c] * kj[c];
                    logits[j] = acc * scale;
                    mx = std::max(mx, logits[j]);
                }
                double Z = 0.0;
                double* pr = probs_h + static_cast<size_t>(i) * N;
                for (int j = 0; j < N; ++j) {
                    pr[j] = std::exp(logits[j] - mx);
                    Z += pr[j];
                }
                double inv = 1.0 / Z;
                double* oi = st.att.data() + static_cast<size_t>(i) * D + ho;
                for (int j = 0; j < N; ++j) {
                    pr[j] *= inv;
                    const double* vj = st.v.data() + static_cast<size_t>(j) * D + ho;
                    for (int c = 0; c < hd; ++c) oi[c] += pr[j] * vj[c];
                }
            }
        }

        st.att_proj.assign(static_cast<size_t>(N) * D, 0.0);
        mm(st.att.data(), p.view(s + "wo").data(), st.att_proj.data(), N, D, D);
        add_bias(st.att_proj.data(), p.view(s + "bo").data(), N, D);

        st.x_mid.resize(static_cast<size_t>(N) * D);
        for (size_t i = 0; i < st.x_mid.size(); ++i) st.x_mid[i] = st.x_in[i] + st.att_proj[i];

        st.ln2_out.assign(static_cast<size_t>(N) * D, 0.0);
        st.ln2_mean.resize(N);
        st.ln2_rstd.resize(N);
        layer_norm(st.x_mid.data(), p.view(s + "ln2_g").data(), p.view(s + "ln2_b").data(),
                   st.ln2_out.data(), st.ln2_mean.data(), st.ln2_rstd.data(), N, D);

        st.ffn_pre.assign(static_cast<size_t>(N) * M, 0.0);
        mm(st.ln2_out.data(), p.view(s + "ffn_w1").data(), st.ffn_pre.data(), N, D, M);
        add_bias(st.ffn_pre.data(), p.view(s + "ffn_b1").data(), N, M);
        st.ffn_act.resize(static_cast<size_t>(N) * M);
        for (size_t i = 0; i < st.ffn_act.size(); ++i) st.ffn_act[i] = silu(st.ffn_pre[i]);

        // residual add straight into x_mid copy -> block output
        std::vector<double>& x_out = (blk + 1 < p.cfg.blocks) ? ws.blocks[blk + 1].x_in
                                                              : ws.final_in;
        x_out.assign(static_cast<size_t>(N) * D, 0.0);
        mm(st.ffn_act.data(), p.view(s + "ffn_w2").data(), x_out.data(), N, M, D);
        add_bias(x_out.data(), p.view(s + "ffn_b2").data(), N, D);
        for (size_t i = 0; i < x_out.size(); ++i) x_out[i] += st.x_mid[i];
        x_prev = &x_out;
    }

    const int N_ = N;
    ws.fin_out.assign(static_cast<size_t>(N_) * D, 0.0);
    ws.fin_mean.resize(N_);
    ws.fin_rstd.resize(N_);
    layer_norm(ws.final_in.data(), p.view("final_ln_g").data(), p.view("final_ln_b").data(),
               ws.fin_out.data(), ws.fin_mean.data(), ws.fin_rstd.data(), N_, D);
    ws.out.assign(static_cast<size_t>(N_) * C, 0.0);
    mm(ws.fin_out.data(), p.view("head_w").data(), ws.out.data(), N_, D, C);
    add_bias(ws.out.data(), p.view("head_b").data(), N_, C);

    if (!all_finite(ws.out)) throw NumericError("model forward produced non-finite values");
    ws.has_target = false;
}

}  // namespace

TokenGrid forward(const ModelParams& params, const TokenGrid& z_t, double t,
                  const Conditioning& cond, Workspace& ws) {
    run_forward(params, z_t, t, cond, ws);
    TokenGrid vel(params.cfg.frames, params.cfg.height, params.cfg.width,
                  params.cfg.channels);
    std::copy_n(ws.out.data(), vel.data.size(), vel.data.begin());
    return vel;
}

double flow_loss(const ModelParams& params, const TokenGrid& z, const TokenGrid& eps,
                 double t, const Conditioning& cond, Workspace& ws) {
    require(z.same_shape(eps), "flow_loss shape mismatch");
    TokenGrid z_t = interpolate(z, eps, t);
    run_forward(params, z_t, t, cond, ws);
    ws.target = z;  // reuse shape
    for (size_t i = 0; i < ws.target.data.size(); ++i)
        ws.target.data[i] = eps.data[i] - z.data[i];
    ws.has_target = true;
    double acc = 0.0;
    const size_t n = ws.target.data.size();
    for (size_t i = 0; i < n; ++i) {
        double d = ws.out[i] - ws.target.data[i];
        acc += d * d;
    }
    double loss = acc / static_cast<double>(n);
    if (!std::isfinite(loss)) throw NumericError("flow loss is non-finite");
    return loss;
}

void backward(const ModelParams& p, Workspace& ws, std::span<double> grads) {
    require(ws.has_target, "backward requires a workspace produced by flow_loss");
    require(grads.size() == p.flat.size(), "gradient buffer size mismatch");

    const int C = p.cfg.channels, D = p.cfg.dim, H = p.cfg.heads, hd = p.cfg.head_dim();
    const int M = p.cfg.ffn_mult * D;
    const int N = ws.tokens;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

    auto g = [&](const std::string& name) -> double* {
        for (const auto& info : p.infos)
            if (info.name == name) return grads.data() + info.offset;
        throw std::invalid_argument("unknown parameter: " + name);
    };

    // d loss / d out: only the video token block carries loss
    std::vector<double> dout(static_cast<size_t>(N) * C, 0.0);
    const size_t nv = ws.target.data.size();
    for (size_t i = 0; i < nv; ++i)
        dout[i] = 2.0 * (ws.out[i] - ws.target.data[i]) / static_cast<double>(nv);

    // head
    std::vector<double> dfin(static_cast<size_t>(N) * D, 0.0);
    mm_bt(dout.data(), p.view("head_w").data(), dfin.data(), N, D, C);
    mm_at(ws.fin_out.data(), dout.data(), g("head_w"), N, D, C);
    bias_grad(dout.data(), g("head_b"), N, C);

    std::vector<double> dx(static_cast<size_t>(N) * D, 0.0);
    layer_norm_backward(ws.final_in.data(), p.view("final_ln_g").data(), ws.fin_mean.data(),
                        ws.fin_rstd.data(), dfin.data(), dx.data(), g("final_ln_g"),
                        g("final_ln_b"), N, D);

    std::vector<double> dlnout(static_cast<size_t>(N) * D), dmid(static_cast<size_t>(N) * D);
    std::vector<double> dffn_act(static_cast<size_t>(N) * M), dffn_pre(static_cast<size_t>(N) * M);
    std::vector<double> datt(static_cast<size_t>(N) * D), datt_proj(static_cast<size_t>(N) * D);
    std::vector<double> dq(static_cast<size_t>(N) * D), dk(static_cast<size_t>(N) * D),
        dv(static_cast<size_t>(N) * D);

    for (int blk = p.cfg.blocks - 1; blk >= 0; --blk) {
        std::string s = "blk" + std::to_string(blk) + ".";
        BlockState& st = ws.blocks[blk];

        // dx holds gradient at the block output
        std::fill(dffn_act.begin(), dffn_act.end(), 0.0);
        mm_bt(dx.data(), p.view(s + "ffn_w2").data(), dffn_act.data(), N, M, D);
        mm_at(st.ffn_act.data(), dx.data(), g(s + "ffn_w2"), N, M, D);
        bias_grad(dx.data(), g(s + "ffn_b2"), N, D);
        for (size_t i = 0; i < dffn_pre.size(); ++i)
            dffn_pre[i] = dffn_act[i] * silu_grad(st.ffn_pre[i]);
        std::fill(dlnout.begin(), dlnout.end(), 0.0);
        mm_bt(dffn_pre.data(), p.view(s + "ffn_w1").data(), dlnout.data(), N, D, M);
        mm_at(st.ln2_out.data(), dffn_pre.data(), g(s + "ffn_w1"), N, D, M);
        bias_grad(dffn_pre.data(), g(s + "ffn_b1"), N, M);

        std::fill(dmid.begin(), dmid.end(), 0.0);
        layer_norm_backward(st.x_mid.data(), p.view(s + "ln2_g").data(), st.ln2_mean.data(),
                            st.ln2_rstd.data(), dlnout.data(), dmid.data(), g(s + "ln2_g"),
                            g(s + "ln2_b"), N, D);
        // residual: gradient at x_mid = dx (residual path) + dmid (ffn path)
        for (size_t i = 0; i < dmid.size(); ++i) dmid[i] += dx[i];

        // attention projection
        std::fill(datt.begin(), datt.end(), 0.0);
        mm_bt(dmid.data(), p.view(s + "wo").data(), datt.data(), N, D, D);
        mm_at(st.att.data(), dmid.data(), g(s + "wo"), N, D, D);
        bias_grad(dmid.data(), g(s + "bo"), N, D);

        std::fill(dq.begin(), dq.end(), 0.0);
        std::fill(dk.begin(), dk.end(), 0.0);
        std::fill(dv.begin(), dv.end(), 0.0);
        std::vector<double> dprow(N);
        for (int h = 0; h < H; ++h) {
            const size_t ho = static_cast<size_t>(h) * hd;
            const double* probs_h = st.probs.data() + static_cast<size_t>(h) * N * N;
            for (int i = 0; i < N; ++i) {
                const double* pr = probs_h + static_cast<size_t>(i) * N;
                const double* doi = datt.data() + static_cast<size_t>(i) * D + ho;
                // dP[i,j] = dout_i . v_j ; dv_j += P[i,j] * dout_i
                double dot_sum = 0.0;
                for (int j = 0; j < N; ++j) {
                    const double* vj = st.v.data() + static_cast<size_t>(j) * D + ho;
                    double acc = 0.0;
                    for (int c = 0; c < hd; ++c) acc += doi[c] * vj[c];
                    dprow[j] = acc;
                    dot_sum += acc * pr[j];
                    double* dvj = dv.data() + static_cast<size_t>(j) * D + ho;
                    for (int c = 0; c < hd; ++c) dvj[c] += pr[j] * doi[c];
                }
                // softmax backward + score scale
                const double* qi = st.qr.data() + static_cast<size_t>(i) * D + ho;
                double* dqi = dq.data() + static_cast<size_t>(i) * D + ho;
                for (int j = 0; j < N; ++j) {
                    double ds = pr[j] * (dprow[j] - dot_sum) * scale;
                    if (ds == 0.0) continue;
                    const double* kj = st.kr.data() + static_cast<size_t>(j) * D + ho;
                    double* dkj = dk.data() + static_cast<size_t>(j) * D + ho;
                    for (int c = 0; c < hd; ++c) {
                        dqi[c] += ds * kj[c];
                        dkj[c] += ds * qi[c];
                    }
                }
            }
        }

        // undo positional multipliers
        apply_rope_rows_conj(p, ws.seq.layout, dq, N);
        apply_rope_rows_conj(p, ws.seq.layout, dk, N);

        std::fill(dlnout.begin(), dlnout.end(), 0.0);
        mm_bt(dq.data(), p.view(s + "wq").data(), dlnout.data(), N, D, D);
        mm_at(st.ln1_out.data(), dq.data(), g(s + "wq"), N, D, D);
        bias_grad(dq.data(), g(s + "bq"), N, D);
        mm_bt(dk.data(), p.view(s + "wk").data(), dlnout.data(), N, D, D);
        mm_at(st.ln1_out.data(), dk.data(), g(s + "wk"), N, D, D);
        bias_grad(dk.data(), g(s + "bk"), N, D);
        mm_bt(dv.data(), p.view(s + "wv").data(), dlnout.data(), N, D, D);
        mm_at(st.ln1_out.data(), dv.data(), g(s + "wv"), N, D, D);
        bias_grad(dv.data(), g(s + "bv"), N, D);

        std::fill(dx.begin(), dx.end(), 0.0);
        layer_norm_backward(st.x_in.data(), p.view(s + "ln1_g").data(), st.ln1_mean.data(),
                            st.ln1_rstd.data(), dlnout.data(), dx.data(), g(s + "ln1_g"),
                            g(s + "ln1_b"), N, D);
        // residual into block input
        for (size_t i = 0; i < dx.size(); ++i) dx[i] += dmid[i];
    }

    // dx now holds gradient at x0
    // conditioning broadcast: dcond = sum over tokens
    std::vector<double> dcond(D, 0.0);
    for (int n = 0; n < N; ++n) {
        const double* row = dx.data() + static_cast<size_t>(n) * D;
        for (int i = 0; i < D; ++i) dcond[i] += row[i];
    }

    if (p.cfg.index_post_patchify) {
        double* table_g = g("index_table");
        for (int n = 0; n < N; ++n) {
            const auto& rec = ws.seq.layout.records[n];
            if (rec.index_embedding_id >= 0 && !rec.dropped) {
                const double* row = dx.data() + static_cast<size_t>(n) * D;
                double* tg = table_g + static_cast<size_t>(rec.index_embedding_id) * D;
                for (int i = 0; i < D; ++i) tg[i] += row[i];
            }
        }
    }

    // time MLP
    {
        std::vector<double> dh(D, 0.0);
        mm_bt(dcond.data(), p.view("time_w2").data(), dh.data(), 1, D, D);
        mm_at(ws.time_h.data(), dcond.data(), g("time_w2"), 1, D, D);
        bias_grad(dcond.data(), g("time_b2"), 1, D);
        for (int i = 0; i < D; ++i) dh[i] *= silu_grad(ws.time_h_pre[i]);
        const int TF = 2 * p.cfg.time_feats;
        mm_at(ws.time_feats.data(), dh.data(), g("time_w1"), 1, TF, D);
        bias_grad(dh.data(), g("time_b1"), 1, D);
    }
    if (p.cfg.use_caption) {
        const int E = p.cfg.text_dim;
        std::vector<double> dh(D, 0.0);
        mm_bt(dcond.data(), p.view("cap_w2").data(), dh.data(), 1, D, D);
        mm_at(ws.cap_h.data(), dcond.data(), g("cap_w2"), 1, D, D);
        bias_grad(dcond.data(), g("cap_b2"), 1, D);
        for (int i = 0; i < D; ++i) dh[i] *= silu_grad(ws.cap_h_pre[i]);
        std::vector<double> dcap_in(E, 0.0);
        mm_bt(dh.data(), p.view("cap_w1").data(), dcap_in.data(), 1, E, D);
        mm_at(ws.cap_in.data(), dh.data(), g("cap_w1"), 1, E, D);
        bias_grad(dh.data(), g("cap_b1"), 1, D);
        if (ws.cap_in_is_null) {
            double* ng = g("null_caption");
            for (int i = 0; i < E; ++i) ng[i] += dcap_in[i];
        }
        // pooled word embeddings are fixed; no gradient
    }

    // patchify
    std::vector<double> dtok(static_cast<size_t>(N) * C, 0.0);
    mm_bt(dx.data(), p.view("patch_w").data(), dtok.data(), N, C, D);
    mm_at(ws.seq.features.data(), dx.data(), g("patch_w"), N, C, D);
    bias_grad(dx.data(), g("patch_b"), N, D);

    // token features: index table, tag MLP, null token
    double* idx_g = p.cfg.index_post_patchify ? nullptr : g("index_table");
    double* null_g = g("null_token");
    tokens::TagMlpView mlp;
    if (p.cfg.use_tags) {
        mlp.w1 = p.view("tag_w1");
        mlp.b1 = p.view("tag_b1");
        mlp.w2 = p.view("tag_w2");
        mlp.b2 = p.view("tag_b2");
        mlp.in = p.cfg.text_dim;
        mlp.hidden = p.cfg.tag_hidden;
        mlp.out = C;
    }
    for (int n = 0; n < N; ++n) {
        const auto& rec = ws.seq.layout.records[n];
        const double* drow = dtok.data() + static_cast<size_t>(n) * C;
        if (rec.stream == tokens::Stream::video) continue;
        if (rec.dropped) {
            for (int c = 0; c < C; ++c) null_g[c] += drow[c];
            continue;
        }
        if (idx_g && rec.index_embedding_id >= 0) {
            double* tg = idx_g + static_cast<size_t>(rec.index_embedding_id) * C;
            for (int c = 0; c < C; ++c) tg[c] += drow[c];
        }
        if (rec.stream == tokens::Stream::ref_text && p.cfg.use_tags) {
            // find the tag embedding that produced this token
            const tokens::ReferenceSpec* src = nullptr;
            for (const auto& r : ws.cond.refs)
                if (r.index == rec.ref_index) src = &r;
            require(src != nullptr, "layout references unknown ref index");
            const auto& emb = src->tag_tokens[rec.tag_pos];
            tokens::project_tags_backward(
                mlp, emb, std::span<const double>(drow, C),
                std::span<double>(g("tag_w1"), mlp.in * mlp.hidden),
                std::span<double>(g("tag_b1"), mlp.hidden),
                std::span<double>(g("tag_w2"), mlp.hidden * mlp.out),
                std::span<double>(g("tag_b2"), mlp.out));
        }
    }
}

}  // namespace refwin::flow
