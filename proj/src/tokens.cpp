#include "refwin/tokens.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "json.hpp"

namespace refwin::tokens {

const char* stream_name(Stream s) {
    switch (s) {
        case Stream::video: return "video";
        case Stream::ref_image: return "ref_image";
        case Stream::ref_text: return "ref_text";
    }
    return "?";
}

void IndexEmbeddingTable::validate_distinct() const {
    for (int i = 0; i < max_refs; ++i) {
        for (int j = i + 1; j < max_refs; ++j) {
            double d2 = 0.0;
            for (int c = 0; c < dim; ++c) {
                double d = table[i * dim + c] - table[j * dim + c];
                d2 += d * d;
            }
            require(d2 > 0.0, "index embedding rows must be pairwise distinct");
        }
    }
}

double activate(Activation act, double x) {
    if (act == Activation::linear) return x;
    return x / (1.0 + std::exp(-x));
}

double activate_grad(Activation act, double x) {
    if (act == Activation::linear) return 1.0;
    double s = 1.0 / (1.0 + std::exp(-x));
    return s * (1.0 + x * (1.0 - s));
}

std::vector<double> project_tags(const TagMlpView& mlp,
                                 const std::vector<std::vector<double>>& tag_embeddings) {
    std::vector<double> out(tag_embeddings.size() * mlp.out);
    std::vector<double> h(mlp.hidden);
    for (size_t k = 0; k < tag_embeddings.size(); ++k) {
        const auto& e = tag_embeddings[k];
        require(static_cast<int>(e.size()) == mlp.in, "tag embedding dim mismatch");
        for (int j = 0; j < mlp.hidden; ++j) {
            double acc = mlp.b1[j];
            for (int i = 0; i < mlp.in; ++i) acc += e[i] * mlp.w1[i * mlp.hidden + j];
            h[j] = activate(mlp.act, acc);
        }
        for (int o = 0; o < mlp.out; ++o) {
            double acc = mlp.b2[o];
            for (int j = 0; j < mlp.hidden; ++j) acc += h[j] * mlp.w2[j * mlp.out + o];
            out[k * mlp.out + o] = acc;
        }
    }
    return out;
}

void project_tags_backward(const TagMlpView& mlp, std::span<const double> input,
                           std::span<const double> d_out, std::span<double> g_w1,
                           std::span<double> g_b1, std::span<double> g_w2,
                           std::span<double> g_b2) {
    std::vector<double> pre(mlp.hidden), h(mlp.hidden);
    for (int j = 0; j < mlp.hidden; ++j) {
        double acc = mlp.b1[j];
        for (int i = 0; i < mlp.in; ++i) acc += input[i] * mlp.w1[i * mlp.hidden + j];
        pre[j] = acc;
        h[j] = activate(mlp.act, acc);
    }
    std::vector<double> dh(mlp.hidden, 0.0);
    for (int o = 0; o < mlp.out; ++o) {
        g_b2[o] += d_out[o];
        for (int j = 0; j < mlp.hidden; ++j) {
            g_w2[j * mlp.out + o] += h[j] * d_out[o];
            dh[j] += mlp.w2[j * mlp.out + o] * d_out[o];
        }
    }
    for (int j = 0; j < mlp.hidden; ++j) {
        double dpre = dh[j] * activate_grad(mlp.act, pre[j]);
        g_b1[j] += dpre;
        for (int i = 0; i < mlp.in; ++i) g_w1[i * mlp.hidden + j] += input[i] * dpre;
    }
}

double diagonal_text_coord(int position_in_block, int grid_extent) {
    require(position_in_block >= 0, "tag position must be non-negative");
    return static_cast<double>(grid_extent + 1 + position_in_block);
}

rope::PhaseVector diagonal_text_phase(int position_in_block, int grid_extent,
                                      const rope::RopeBanks& banks,
                                      const rope::AxisSplit& split) {
    double xy = diagonal_text_coord(position_in_block, grid_extent);
    return rope::phase_3d(banks, split, xy, xy, 0.0);
}

AssembledSequence assemble_sequence(const TokenGrid& video,
                                    const std::vector<ReferenceSpec>& refs,
                                    irope::RopeMode mode, const irope::WeRoPEWeights& w,
                                    const AssemblyParams& params, bool refs_dropped,
                                    bool mirrored_right_anchor) {
    const int C = video.channels;
    require(static_cast<int>(refs.size()) <= params.index_table.max_refs,
            "more references than index embedding slots");
    {
        std::set<int> seen;
        for (const auto& r : refs) {
            require(r.index >= 0 && r.index < params.index_table.max_refs,
                    "reference index out of range");
            require(seen.insert(r.index).second, "duplicate reference index");
            r.interval.validate();
            require(r.interval.total_frames == video.frames,
                    "reference interval out of range for this clip");
            require(r.image.frames == 1 && r.image.height == video.height &&
                        r.image.width == video.width && r.image.channels == C,
                    "reference image shape mismatch");
            require(!r.tag_tokens.empty(), "reference needs at least one tag token");
        }
    }
    require(params.index_table.dim == C, "index embedding dim mismatch");
    require(params.tag_mlp.out == C, "tag MLP output dim mismatch");

    size_t total = static_cast<size_t>(video.frames) * video.height * video.width;
    for (const auto& r : refs)
        total += static_cast<size_t>(video.height) * video.width + r.tag_tokens.size();

    AssembledSequence seq;
    seq.tokens = static_cast<int>(total);
    seq.channels = C;
    seq.features.assign(total * C, 0.0);
    seq.layout.records.resize(total);
    seq.layout.video_tokens = video.frames * video.height * video.width;

    const int grid_extent = std::max(video.height, video.width) - 1;
    size_t pos = 0;

    for (int f = 0; f < video.frames; ++f) {
        for (int y = 0; y < video.height; ++y) {
            for (int x = 0; x < video.width; ++x) {
                TokenRecord& rec = seq.layout.records[pos];
                rec.stream = Stream::video;
                rec.x = x;
                rec.y = y;
                rec.temporal = irope::frame_encoding(static_cast<double>(f));
                rec.multipliers = irope::token_multipliers(params.banks, params.split, x, y,
                                                           rec.temporal);
                std::copy_n(&video.data[video.offset(f, y, x, 0)], C,
                            &seq.features[pos * C]);
                ++pos;
            }
        }
    }

    for (const auto& r : refs) {
        auto enc = irope::interval_encoding(mode, r.interval, w, mirrored_right_anchor);
        auto idx_row = params.index_table.row(r.index);
        for (int y = 0; y < video.height; ++y) {
            for (int x = 0; x < video.width; ++x) {
                TokenRecord& rec = seq.layout.records[pos];
                rec.stream = Stream::ref_image;
                rec.ref_index = r.index;
                rec.x = x;
                rec.y = y;
                rec.temporal = enc;
                rec.index_embedding_id = r.index;
                rec.dropped = refs_dropped;
                rec.multipliers =
                    irope::token_multipliers(params.banks, params.split, x, y, enc);
                double* dst = &seq.features[pos * C];
                if (refs_dropped) {
                    std::copy_n(params.null_token.data(), C, dst);
                } else {
                    for (int c = 0; c < C; ++c)
                        dst[c] = r.image.at(0, y, x, c) + idx_row[c];
                }
                ++pos;
            }
        }
        std::vector<double> projected = project_tags(params.tag_mlp, r.tag_tokens);
        for (size_t k = 0; k < r.tag_tokens.size(); ++k) {
            TokenRecord& rec = seq.layout.records[pos];
            rec.stream = Stream::ref_text;
            rec.ref_index = r.index;
            double xy = diagonal_text_coord(static_cast<int>(k), grid_extent);
            rec.x = xy;
            rec.y = xy;
            rec.temporal = enc;
            rec.index_embedding_id = r.index;
            rec.tag_word = r.word_id;
            rec.tag_pos = static_cast<int>(k);
            rec.dropped = refs_dropped;
            rec.multipliers =
                irope::token_multipliers(params.banks, params.split, xy, xy, enc);
            double* dst = &seq.features[pos * C];
            if (refs_dropped) {
                std::copy_n(params.null_token.data(), C, dst);
            } else {
                for (int c = 0; c < C; ++c) dst[c] = projected[k * C + c] + idx_row[c];
            }
            ++pos;
        }
    }
    return seq;
}

std::string layout_to_json(const SequenceLayout& layout) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& rec : layout.records) {
        nlohmann::json j;
        j["stream"] = stream_name(rec.stream);
        if (rec.ref_index >= 0) j["ref_index"] = rec.ref_index;
        j["x"] = rec.x;
        j["y"] = rec.y;
        if (rec.index_embedding_id >= 0) j["index_embedding_id"] = rec.index_embedding_id;
        if (rec.dropped) j["dropped"] = true;
        if (rec.temporal.is_interval) {
            j["mode"] = irope::rope_mode_name(rec.temporal.mode);
            j["t0"] = rec.temporal.interval.t0;
            j["t1"] = rec.temporal.interval.t1;
        } else {
            j["t"] = rec.temporal.frame;
        }
        nlohmann::json phases = nlohmann::json::array();
        for (const auto& m : rec.multipliers)
            phases.push_back({m.real(), m.imag()});
        j["phase_multipliers"] = phases;
        arr.push_back(std::move(j));
    }
    nlohmann::json root;
    root["video_tokens"] = layout.video_tokens;
    root["tokens"] = arr;
    return root.dump();
}

}  // namespace refwin::tokens
