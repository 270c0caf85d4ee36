#pragma once

#include <optional>
#include <string>

#include "refwin/grid.hpp"
#include "refwin/interval_rope.hpp"

namespace refwin::synth {

/// Per-frame binary masks of one entity on the frame-resolution grid.
struct MaskTrack {
    int frames = 0, height = 0, width = 0;
    std::vector<std::uint8_t> masks;  // frames x height x width

    MaskTrack() = default;
    MaskTrack(int f, int h, int w)
        : frames(f), height(h), width(w), masks(static_cast<size_t>(f) * h * w, 0) {}

    std::uint8_t& at(int f, int y, int x) {
        return masks[(static_cast<size_t>(f) * height + y) * width + x];
    }
    std::uint8_t at(int f, int y, int x) const {
        return masks[(static_cast<size_t>(f) * height + y) * width + x];
    }
    int area(int f) const {
        int acc = 0;
        for (int i = 0; i < height * width; ++i)
            acc += masks[static_cast<size_t>(f) * height * width + i];
        return acc;
    }
    MaskTrack crop_frames(int f_begin, int f_end) const;  // [f_begin, f_end)
};

/// First-to-last frame with mask area at or above the threshold.
struct PresenceInterval {
    int t0 = 0;
    int t1 = 0;
    int area_threshold = 0;
};

struct SceneConfig {
    int frames = 8, height = 4, width = 4, channels = 16;
    int pat_h = 2, pat_w = 2;
    int min_entities = 1, max_entities = 2;
    int min_len = 2, max_len = 6;  // interval length bounds, frames
    double bg_sigma = 0.1;
    bool random_position = true;   // else centered in the allotted band
    int max_drift = 1;             // per-frame vertical step bound
    int vocab = 32;
    std::uint64_t table_seed = 777;  // word -> pattern table
    int area_threshold = 4;

    void validate() const;
};

std::string scene_config_to_json(const SceneConfig& cfg);
SceneConfig scene_config_from_json(const std::string& text);

struct Entity {
    int id = 0;
    int word = 0;             // tag word, unique within the scene
    TokenGrid pattern;        // 1 x pat_h x pat_w x channels
    MaskTrack track;
    int t0 = 0, t1 = 0;       // construction interval (inclusive frames)
};

struct SynthScene {
    std::uint64_t seed = 0;
    SceneConfig cfg;
    TokenGrid video;
    std::vector<Entity> entities;
};

/// The fixed word -> pattern lookup shared by generation and evaluation.
/// Patterns are +-1 valued, pairwise near-orthogonal for the default sizes.
TokenGrid word_pattern(int word, const SceneConfig& cfg);

/// Background noise plus each entity's pattern stamped at a drifting location
/// during its interval. Entities occupy disjoint column bands so every mask
/// cell shows exactly its own pattern. Throws GenerationError when the
/// requested entities cannot fit.
SynthScene generate_scene(std::uint64_t seed, const SceneConfig& cfg);

std::optional<PresenceInterval> extract_interval(const MaskTrack& track, int threshold);

/// Greedy dedup: a pair whose mean per-overlapping-frame mask IoU exceeds the
/// threshold loses its later member. Order stable.
std::vector<MaskTrack> dedup_tracks(const std::vector<MaskTrack>& tracks,
                                    double iou_threshold);
std::vector<size_t> dedup_track_indices(const std::vector<MaskTrack>& tracks,
                                        double iou_threshold);

struct RefSample {
    TokenGrid grid;  // 1 x height x width x channels, crop centered
    irope::IntervalSpec interval;
    bool outside = false;  // sampled frame lies outside the requested window
    int frame = -1;
};

/// Pick a frame where the entity is present, preferring frames outside
/// [f_a, f_b]; crop the mask bounding box from the scene and center it on a
/// blank grid. The returned interval is the entity's presence clipped to the
/// window and rebased to window-local frames.
std::optional<RefSample> sample_reference(const SynthScene& scene, int entity_id, int f_a,
                                          int f_b, Rng& rng);

struct AugmentConfig {
    double flip_prob = 0.0;
    double zoom_prob = 0.0;
    double zoom_lo = 0.8, zoom_hi = 1.25;
    double jitter_amp = 0.0;   // additive uniform noise bound
    double smooth_prob = 0.0;  // 3x3 box blur
    double smooth_strength = 0.5;
};

TokenGrid augment(const TokenGrid& ref, Rng& rng, const AugmentConfig& cfg);

// --- dataset serialization -------------------------------------------------

/// scenes/<seed>/manifest.json + scenes/<seed>/tensors.bin; masks stored as
/// per-frame run-length [start,len] pairs over the flattened grid.
void save_scene(const SynthScene& scene, const std::string& dir);
SynthScene load_scene(const std::string& dir);
std::string mask_track_to_rle_json(const MaskTrack& track);
MaskTrack mask_track_from_rle_json(const std::string& text);

}  // namespace refwin::synth
