#include "refwin/grid.hpp"

namespace refwin {

TokenGrid gaussian_grid(int f, int h, int w, int c, Rng& rng, double sigma) {
    TokenGrid g(f, h, w, c);
    for (double& x : g.data) x = rng.gauss() * sigma;
    return g;
}

}  // namespace refwin
