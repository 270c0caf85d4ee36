#include "refwin/rope.hpp"

#include <cmath>

namespace refwin::rope {

FrequencyBank make_frequency_bank(int dim, double base) {
    require(dim >= 2, "frequency bank dim must be >= 2");
    require(dim % 2 == 0, "frequency bank dim must be even");
    require(base > 1.0, "frequency bank base must be > 1");
    FrequencyBank bank;
    bank.dim = dim;
    bank.base = base;
    bank.freqs.resize(dim / 2);
    for (int i = 0; i < dim / 2; ++i)
        bank.freqs[i] = std::pow(base, -2.0 * i / dim);
    return bank;
}

void AxisSplit::validate() const {
    require(d_x >= 0 && d_y >= 0 && d_t >= 0, "axis dims must be non-negative");
    require(d_x % 2 == 0 && d_y % 2 == 0 && d_t % 2 == 0, "axis dims must be even");
    require(total() > 0, "axis split must cover at least one channel pair");
}

RopeBanks make_banks(const AxisSplit& split, double base_x, double base_y, double base_t) {
    split.validate();
    RopeBanks banks;
    if (split.d_x > 0) banks.x = make_frequency_bank(split.d_x, base_x);
    if (split.d_y > 0) banks.y = make_frequency_bank(split.d_y, base_y);
    if (split.d_t > 0) banks.t = make_frequency_bank(split.d_t, base_t);
    return banks;
}

PhaseVector phase_1d(const FrequencyBank& bank, double n) {
    require(std::isfinite(n), "position must be finite");
    PhaseVector p(bank.freqs.size());
    for (size_t i = 0; i < bank.freqs.size(); ++i) p[i] = n * bank.freqs[i];
    return p;
}

PhaseVector phase_3d(const RopeBanks& banks, const AxisSplit& split, double x, double y, double t) {
    split.validate();
    require(banks.x.dim == split.d_x && banks.y.dim == split.d_y && banks.t.dim == split.d_t,
            "bank dims do not match axis split");
    PhaseVector p;
    p.reserve(split.pairs());
    if (split.d_x > 0) {
        PhaseVector px = phase_1d(banks.x, x);
        p.insert(p.end(), px.begin(), px.end());
    }
    if (split.d_y > 0) {
        PhaseVector py = phase_1d(banks.y, y);
        p.insert(p.end(), py.begin(), py.end());
    }
    if (split.d_t > 0) {
        PhaseVector pt = phase_1d(banks.t, t);
        p.insert(p.end(), pt.begin(), pt.end());
    }
    return p;
}

TokenVector rotate(std::span<const double> v, const PhaseVector& p) {
    require(v.size() == 2 * p.size(), "token length must be twice the phase length");
    TokenVector out(v.size());
    for (size_t i = 0; i < p.size(); ++i) {
        double c = std::cos(p[i]), s = std::sin(p[i]);
        double a = v[2 * i], b = v[2 * i + 1];
        out[2 * i] = a * c - b * s;
        out[2 * i + 1] = a * s + b * c;
    }
    return out;
}

double rotary_score(std::span<const double> q, std::span<const double> k,
                    const PhaseVector& pq, const PhaseVector& pk) {
    require(q.size() == k.size(), "q/k dim mismatch");
    require(pq.size() == pk.size(), "phase dim mismatch");
    require(q.size() == 2 * pq.size(), "token length must be twice the phase length");
    double acc = 0.0;
    for (size_t i = 0; i < pq.size(); ++i) {
        double d = pq[i] - pk[i];
        double c = std::cos(d), s = std::sin(d);
        double qa = q[2 * i], qb = q[2 * i + 1];
        double ka = k[2 * i], kb = k[2 * i + 1];
        // Re[(qa + i qb)(ka - i kb)(c + i s)]
        double re = qa * ka + qb * kb;
        double im = qb * ka - qa * kb;
        acc += re * c - im * s;
    }
    return acc;
}

std::vector<std::complex<double>> phase_multipliers(const PhaseVector& p) {
    std::vector<std::complex<double>> m(p.size());
    for (size_t i = 0; i < p.size(); ++i) m[i] = {std::cos(p[i]), std::sin(p[i])};
    return m;
}

void apply_multipliers(std::span<double> v, std::span<const std::complex<double>> mult) {
    require(v.size() == 2 * mult.size(), "token length must be twice the multiplier length");
    for (size_t i = 0; i < mult.size(); ++i) {
        double a = v[2 * i], b = v[2 * i + 1];
        v[2 * i] = a * mult[i].real() - b * mult[i].imag();
        v[2 * i + 1] = a * mult[i].imag() + b * mult[i].real();
    }
}

}  // namespace refwin::rope
