#pragma once

#include <complex>
#include <span>
#include <vector>

#include "refwin/common.hpp"

namespace refwin::rope {

/// Angular frequencies for one axis: freqs[i] = base^(-2i/dim), i in [0, dim/2).
/// freqs[0] == 1 and the sequence is strictly decreasing.
struct FrequencyBank {
    int dim = 0;
    double base = 10000.0;
    std::vector<double> freqs;

    int pairs() const { return dim / 2; }
};

FrequencyBank make_frequency_bank(int dim, double base = 10000.0);

/// Per-pair rotation angles, radians. Length = dim/2 of the bank that made it.
using PhaseVector = std::vector<double>;

/// Token coordinates interpreted as adjacent complex pairs (v[2i], v[2i+1]).
using TokenVector = std::vector<double>;

/// Channel split of a head across the three axes; each part even, summing to
/// the head dimension. Channel order is (x, y, t).
struct AxisSplit {
    int d_x = 0;
    int d_y = 0;
    int d_t = 0;

    int total() const { return d_x + d_y + d_t; }
    int pairs() const { return total() / 2; }
    void validate() const;
};

/// Banks for the three axes; bank dims must match the split.
struct RopeBanks {
    FrequencyBank x, y, t;
};

RopeBanks make_banks(const AxisSplit& split, double base_x, double base_y, double base_t);

PhaseVector phase_1d(const FrequencyBank& bank, double n);

/// Concatenated per-axis phases in (x, y, t) channel order.
PhaseVector phase_3d(const RopeBanks& banks, const AxisSplit& split, double x, double y, double t);

/// Rotate each complex pair of v by the matching phase. |v| == 2*|p|.
TokenVector rotate(std::span<const double> v, const PhaseVector& p);

/// Re[sum_i q_i * conj(k_i) * e^{i(pq_i - pk_i)}]. Equals the dot product of
/// the two rotated vectors; depends only on phase differences.
double rotary_score(std::span<const double> q, std::span<const double> k,
                    const PhaseVector& pq, const PhaseVector& pk);

/// Per-pair unit multipliers e^{i p_j}; applying them is the same as rotate().
std::vector<std::complex<double>> phase_multipliers(const PhaseVector& p);

/// Apply per-pair complex multipliers in place (pairs (v[2j], v[2j+1])).
void apply_multipliers(std::span<double> v, std::span<const std::complex<double>> mult);

}  // namespace refwin::rope
