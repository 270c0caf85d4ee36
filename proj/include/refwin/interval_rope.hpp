#pragma once

#include <iosfwd>
#include <string>

#include "refwin/rope.hpp"

namespace refwin::irope {

/// A reference's presence window [t0, t1] in latent-frame units.
struct IntervalSpec {
    double t0 = 0.0;
    double t1 = 0.0;
    int total_frames = 0;

    void validate() const {
        require(total_frames > 0, "total_frames must be positive");
        require(t0 >= 0.0 && t0 <= t1 && t1 <= static_cast<double>(total_frames),
                "interval must satisfy 0 <= t0 <= t1 <= total_frames");
    }

    double mid() const { return 0.5 * (t0 + t1); }
    double left_anchor() const { return 0.5 * t0; }
    // Literal reading by default; the mirrored alternative (t1+T)/2 is kept
    // behind a flag for ablation.
    double right_anchor(bool mirrored = false) const {
        return mirrored ? 0.5 * (t1 + total_frames) : 0.5 * (total_frames - t1);
    }
};

/// Positive center weight, non-positive edge weight.
struct WeRoPEWeights {
    double w_p = 1.0;
    double w_n = -0.5;

    void validate() const {
        require(std::isfinite(w_p) && std::isfinite(w_n), "weights must be finite");
        require(w_p > 0.0, "w_p must be positive");
        require(w_n <= 0.0, "w_n must be non-positive");
    }
};

enum class RopeMode { none, mid, we };

const char* rope_mode_name(RopeMode mode);
RopeMode rope_mode_from_name(const std::string& name);

/// Temporal rotation at the interval midpoint; spatial rotation unchanged.
rope::TokenVector mid_rope(std::span<const double> v, double x, double y,
                           const IntervalSpec& interval, const rope::RopeBanks& banks,
                           const rope::AxisSplit& split);

/// Weighted sum of temporally rotated copies at t_mid (weight w_p) and the two
/// off-interval anchors t_l = t0/2, t_r = (T-t1)/2 (weight w_n each). Only the
/// temporal channel group is blended; spatial channels keep the standard
/// single rotation.
rope::TokenVector we_rope(std::span<const double> v, double x, double y,
                          const IntervalSpec& interval, const WeRoPEWeights& w,
                          const rope::RopeBanks& banks, const rope::AxisSplit& split,
                          bool mirrored_right_anchor = false);

/// Expected attention logit of an interval-encoded key against a canonical
/// all-ones-pairs query placed at each video frame, normalized so that a zero
/// offset scores 1.
struct DecayProfile {
    std::vector<int> offsets;
    std::vector<double> scores;
};

DecayProfile decay_profile(RopeMode variant, const IntervalSpec& interval,
                           const WeRoPEWeights& w, const rope::FrequencyBank& t_bank,
                           bool mirrored_right_anchor = false);

/// CSV rows: frame,score,variant,t0,t1,w_p,w_n (header included).
void write_profile_csv(std::ostream& os, const DecayProfile& profile, RopeMode variant,
                       const IntervalSpec& interval, const WeRoPEWeights& w);

/// How one token's temporal channels are encoded: a plain frame position or an
/// interval under a RopeMode.
struct TemporalEncoding {
    bool is_interval = false;
    double frame = 0.0;           // used when !is_interval
    RopeMode mode = RopeMode::we; // used when is_interval
    IntervalSpec interval;
    WeRoPEWeights weights;
    bool mirrored_right_anchor = false;
};

TemporalEncoding frame_encoding(double frame);
TemporalEncoding interval_encoding(RopeMode mode, const IntervalSpec& interval,
                                   const WeRoPEWeights& w, bool mirrored = false);

/// Fused per-pair complex multipliers for a token at spatial (x, y) with the
/// given temporal encoding. A weighted sum of rotations acting on one complex
/// pair is itself multiplication by the complex sum of the unit phases, so a
/// single multiplier vector captures none/mid/we uniformly. Applying the
/// multipliers reproduces we_rope()/mid_rope() exactly up to rounding.
std::vector<std::complex<double>> token_multipliers(const rope::RopeBanks& banks,
                                                    const rope::AxisSplit& split, double x,
                                                    double y, const TemporalEncoding& enc);

}  // namespace refwin::irope
