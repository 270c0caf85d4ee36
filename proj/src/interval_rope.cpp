#include "refwin/interval_rope.hpp"

#include <cmath>
#include <ostream>

namespace refwin::irope {

const char* rope_mode_name(RopeMode mode) {
    switch (mode) {
        case RopeMode::none: return "none";
        case RopeMode::mid: return "mid";
        case RopeMode::we: return "we";
    }
    return "?";
}

RopeMode rope_mode_from_name(const std::string& name) {
    if (name == "none") return RopeMode::none;
    if (name == "mid") return RopeMode::mid;
    if (name == "we") return RopeMode::we;
    throw std::invalid_argument("unknown rope variant: " + name);
}

rope::TokenVector mid_rope(std::span<const double> v, double x, double y,
                           const IntervalSpec& interval, const rope::RopeBanks& banks,
                           const rope::AxisSplit& split) {
    interval.validate();
    return rope::rotate(v, rope::phase_3d(banks, split, x, y, interval.mid()));
}

rope::TokenVector we_rope(std::span<const double> v, double x, double y,
                          const IntervalSpec& interval, const WeRoPEWeights& w,
                          const rope::RopeBanks& banks, const rope::AxisSplit& split,
                          bool mirrored_right_anchor) {
    interval.validate();
    w.validate();
    require(v.size() == static_cast<size_t>(split.total()), "token dim must match split");

    const double anchors[3] = {interval.mid(), interval.left_anchor(),
                               interval.right_anchor(mirrored_right_anchor)};
    const double weights[3] = {w.w_p, w.w_n, w.w_n};

    // Spatial channels: standard single rotation. Temporal group: weighted sum
    // of the three rotated copies.
    rope::TokenVector out = rope::rotate(v, rope::phase_3d(banks, split, x, y, anchors[0]));
    const int t_begin = split.d_x + split.d_y;
    for (int c = t_begin; c < split.total(); ++c) out[c] *= weights[0];
    for (int a = 1; a < 3; ++a) {
        rope::TokenVector term = rope::rotate(v, rope::phase_3d(banks, split, x, y, anchors[a]));
        for (int c = t_begin; c < split.total(); ++c) out[c] += weights[a] * term[c];
    }
    return out;
}

namespace {

// g(delta) = (2/d) * sum_i cos(delta * w_i): the normalized score between two
// all-ones-pairs tokens at relative temporal offset delta.
double unit_decay(double delta, const rope::FrequencyBank& bank) {
    double acc = 0.0;
    for (double w : bank.freqs) acc += std::cos(delta * w);
    return acc / static_cast<double>(bank.pairs());
}

}  // namespace

DecayProfile decay_profile(RopeMode variant, const IntervalSpec& interval,
                           const WeRoPEWeights& w, const rope::FrequencyBank& t_bank,
                           bool mirrored_right_anchor) {
    interval.validate();
    if (variant == RopeMode::we) w.validate();

    // All-ones-pairs query/key: every pair is the complex unit 1, so the
    // score against a key rotated by multiplier c reduces to sum Re[e^{i
    // phi(t)} conj(c)].
    rope::AxisSplit split{0, 0, t_bank.dim};
    rope::RopeBanks banks;
    banks.t = t_bank;

    TemporalEncoding enc;
    switch (variant) {
        case RopeMode::none: enc = frame_encoding(0.0); break;
        case RopeMode::mid: enc = frame_encoding(interval.mid()); break;
        case RopeMode::we:
            enc = interval_encoding(RopeMode::we, interval, w, mirrored_right_anchor);
            break;
    }
    auto key_mult = token_multipliers(banks, split, 0.0, 0.0, enc);

    DecayProfile profile;
    profile.offsets.resize(interval.total_frames);
    profile.scores.resize(interval.total_frames);
    for (int f = 0; f < interval.total_frames; ++f) {
        profile.offsets[f] = f;
        rope::PhaseVector pq = phase_1d(t_bank, static_cast<double>(f));
        double acc = 0.0;
        for (int i = 0; i < t_bank.pairs(); ++i) {
            std::complex<double> q{std::cos(pq[i]), std::sin(pq[i])};
            acc += (q * std::conj(key_mult[i])).real();
        }
        profile.scores[f] = acc / static_cast<double>(t_bank.pairs());
    }
    return profile;
}

void write_profile_csv(std::ostream& os, const DecayProfile& profile, RopeMode variant,
                       const IntervalSpec& interval, const WeRoPEWeights& w) {
    os << "frame,score,variant,t0,t1,w_p,w_n\n";
    os.precision(17);
    for (size_t i = 0; i < profile.offsets.size(); ++i) {
        os << profile.offsets[i] << ',' << profile.scores[i] << ',' << rope_mode_name(variant)
           << ',' << interval.t0 << ',' << interval.t1 << ',' << w.w_p << ',' << w.w_n << '\n';
    }
}

TemporalEncoding frame_encoding(double frame) {
    TemporalEncoding enc;
    enc.is_interval = false;
    enc.frame = frame;
    return enc;
}

TemporalEncoding interval_encoding(RopeMode mode, const IntervalSpec& interval,
                                   const WeRoPEWeights& w, bool mirrored) {
    interval.validate();
    if (mode == RopeMode::we) w.validate();
    TemporalEncoding enc;
    enc.is_interval = true;
    enc.mode = mode;
    enc.interval = interval;
    enc.weights = w;
    enc.mirrored_right_anchor = mirrored;
    return enc;
}

std::vector<std::complex<double>> token_multipliers(const rope::RopeBanks& banks,
                                                    const rope::AxisSplit& split, double x,
                                                    double y, const TemporalEncoding& enc) {
    split.validate();
    std::vector<std::complex<double>> mult;
    mult.reserve(split.pairs());
    if (split.d_x > 0)
        for (double p : phase_1d(banks.x, x)) mult.emplace_back(std::cos(p), std::sin(p));
    if (split.d_y > 0)
        for (double p : phase_1d(banks.y, y)) mult.emplace_back(std::cos(p), std::sin(p));
    if (split.d_t == 0) return mult;

    auto unit = [&](double t) { return phase_multipliers(phase_1d(banks.t, t)); };
    if (!enc.is_interval) {
        for (auto& c : unit(enc.frame)) mult.push_back(c);
        return mult;
    }
    switch (enc.mode) {
        case RopeMode::none:
            for (auto& c : unit(0.0)) mult.push_back(c);
            break;
        case RopeMode::mid:
            for (auto& c : unit(enc.interval.mid())) mult.push_back(c);
            break;
        case RopeMode::we: {
            auto cm = unit(enc.interval.mid());
            auto cl = unit(enc.interval.left_anchor());
            auto cr = unit(enc.interval.right_anchor(enc.mirrored_right_anchor));
            for (size_t i = 0; i < cm.size(); ++i)
                mult.push_back(enc.weights.w_p * cm[i] + enc.weights.w_n * (cl[i] + cr[i]));
            break;
        }
    }
    return mult;
}

}  // namespace refwin::irope
