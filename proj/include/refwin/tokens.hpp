#pragma once

#include <optional>
#include <string>

#include "refwin/grid.hpp"
#include "refwin/interval_rope.hpp"

namespace refwin::tokens {

enum class Stream { video, ref_image, ref_text };

const char* stream_name(Stream s);

/// One conditioning reference: a single latent frame's worth of tokens, its
/// presence interval, the identifying word and its slot index.
struct ReferenceSpec {
    TokenGrid image;  // frames == 1
    irope::IntervalSpec interval;
    std::vector<std::vector<double>> tag_tokens;  // K x E_text
    int index = 0;
    int word_id = -1;
};

struct TokenRecord {
    Stream stream = Stream::video;
    int ref_index = -1;  // -1 for video tokens
    double x = 0.0, y = 0.0;
    irope::TemporalEncoding temporal;
    int index_embedding_id = -1;
    std::vector<std::complex<double>> multipliers;  // head pairs, filled at assembly
    int tag_word = -1;  // ref_text only
    int tag_pos = -1;   // position within the tag block
    bool dropped = false;
};

struct SequenceLayout {
    std::vector<TokenRecord> records;
    int video_tokens = 0;
};

std::string layout_to_json(const SequenceLayout& layout);

/// Learnable per-slot vectors that disentangle references sharing a spatial
/// position. Rows must be pairwise distinct after initialization.
struct IndexEmbeddingTable {
    int max_refs = 0;
    int dim = 0;
    std::vector<double> table;  // max_refs x dim

    std::span<const double> row(int i) const {
        return std::span<const double>(table).subspan(static_cast<size_t>(i) * dim, dim);
    }
    void validate_distinct() const;
};

enum class Activation { silu, linear };

double activate(Activation act, double x);
double activate_grad(Activation act, double x);

/// Two-layer projection from text-embedding space into the latent channel
/// space shared with video tokens.
struct TagMlpView {
    std::span<const double> w1, b1, w2, b2;
    int in = 0, hidden = 0, out = 0;
    Activation act = Activation::silu;
};

std::vector<double> project_tags(const TagMlpView& mlp,
                                 const std::vector<std::vector<double>>& tag_embeddings);

/// Backprop through project_tags for one tag token; accumulates into the
/// parameter gradient spans and returns nothing for the (fixed) embedding.
void project_tags_backward(const TagMlpView& mlp, std::span<const double> input,
                           std::span<const double> d_out, std::span<double> g_w1,
                           std::span<double> g_b1, std::span<double> g_w2,
                           std::span<double> g_b2);

/// Spatial phases for a tag token: x = y = grid_extent + 1 + position, past
/// the video grid so text never collides with video spatial positions.
rope::PhaseVector diagonal_text_phase(int position_in_block, int grid_extent,
                                      const rope::RopeBanks& banks,
                                      const rope::AxisSplit& split);

double diagonal_text_coord(int position_in_block, int grid_extent);

/// Parameter views needed to assemble a sequence.
struct AssemblyParams {
    IndexEmbeddingTable index_table;
    TagMlpView tag_mlp;
    std::span<const double> null_token;  // latent dim; substituted for dropped refs
    rope::RopeBanks banks;
    rope::AxisSplit split;
};

struct AssembledSequence {
    int tokens = 0;
    int channels = 0;
    std::vector<double> features;  // tokens x channels
    SequenceLayout layout;
};

/// Video tokens first with standard 3D phases, then per reference: image
/// tokens (index embedding added) and tag tokens (tag MLP + index embedding,
/// diagonal spatial phases), all ref tokens carrying the interval temporal
/// encoding for the chosen mode. With refs_dropped the reference features are
/// replaced by the null token; phases are left untouched.
AssembledSequence assemble_sequence(const TokenGrid& video,
                                    const std::vector<ReferenceSpec>& refs,
                                    irope::RopeMode mode, const irope::WeRoPEWeights& w,
                                    const AssemblyParams& params, bool refs_dropped = false,
                                    bool mirrored_right_anchor = false);

}  // namespace refwin::tokens
