#include "cxrl/diffusion.hpp"

#include <stdexcept>

namespace cxrl::diff {

DiffusionSchedule make_schedule(int T, double beta_min, double beta_max) {
    if (T < 1) throw std::invalid_argument("make_schedule: T must be >= 1");
    if (!(beta_min > 0.0) || !(beta_min <= beta_max) || !(beta_max < 1.0))
        throw std::invalid_argument("make_schedule: need 0 < beta_min <= beta_max < 1");

    DiffusionSchedule s;
    s.T = T;
    s.beta.resize(static_cast<size_t>(T));
    s.alpha.resize(static_cast<size_t>(T));
    s.alpha_bar.resize(static_cast<size_t>(T));
    s.sigma.resize(static_cast<size_t>(T));
    double prod = 1.0;
    for (int t = 1; t <= T; ++t) {
        const double frac = T == 1 ? 0.0 : double(t - 1) / double(T - 1);
        const double b = beta_min + (beta_max - beta_min) * frac;
        prod *= 1.0 - b;
        s.beta[t - 1] = b;
        s.alpha[t - 1] = 1.0 - b;
        s.alpha_bar[t - 1] = prod;
        s.sigma[t - 1] = std::sqrt(b);  // sigma_t^2 = beta_t
    }
    return s;
}

}  // namespace cxrl::diff
