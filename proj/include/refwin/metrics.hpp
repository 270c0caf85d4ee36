#pragma once

#include <optional>

#include "refwin/synth.hpp"

namespace refwin::eval {

struct IntervalPair {
    std::optional<synth::PresenceInterval> predicted;
    irope::IntervalSpec ground_truth;
    int total_frames = 0;
};

/// 1-D segment IoU of the two closed intervals; a missing prediction scores 0.
/// Two identical point intervals score 1.
double t_iou(const IntervalPair& p);

/// sqrt(((s_p-s_g)/T)^2 + ((e_p-e_g)/T)^2) / sqrt(2); a missing prediction
/// scores the full penalty 1.
double t_l2(const IntervalPair& p);

/// Peak normalized cross-correlation of the pattern over all window positions
/// of one frame. Zero-variance windows contribute 0.
double frame_peak_ncc(const TokenGrid& video, int frame, const TokenGrid& pattern);

/// Frames whose peak correlation reaches the threshold count as present; the
/// first and last such frames form the interval.
std::optional<synth::PresenceInterval> detect_presence(const TokenGrid& video,
                                                       const TokenGrid& pattern,
                                                       double threshold);

/// Mean over the interval's integer frames of the peak correlation; empty
/// integer range yields no value.
std::optional<double> pattern_similarity(const TokenGrid& video,
                                         const irope::IntervalSpec& interval,
                                         const TokenGrid& pattern);

}  // namespace refwin::eval
