#include "vfamc/signal.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "vfamc/error.hpp"

namespace vfamc {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr double kDenominatorGuard = 1e-9;

void check_flip(double alpha_deg, double tr_s) {
    if (!(alpha_deg > 0.0 && alpha_deg < 90.0)) throw ConfigError("flip angle must lie in (0, 90) degrees");
    if (!(tr_s > 0.0)) throw ConfigError("TR must be positive");
}

template <typename F>
Volume voxelwise_signal(const TissueParams& tissue, const Volume& sens, const B1Map& ft, F&& f) {
    require_same_grid(tissue.r1, tissue.pd, "r1 vs pd");
    require_same_grid(tissue.r1, sens, "r1 vs sensitivity");
    require_same_grid(tissue.r1, ft.ft, "r1 vs transmit field");
    Volume out(tissue.r1.grid());
    for (std::size_t n = 0; n < out.size(); ++n) out[n] = f(tissue.pd[n], tissue.r1[n], sens[n], ft.ft[n]);
    return out;
}

double median_abs(std::vector<double> v) {
    if (v.empty()) return 0.0;
    const auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
    std::nth_element(v.begin(), mid, v.end());
    return *mid;
}

}  // namespace

void VfaAcquisition::validate() const {
    check_flip(flip_angle_deg, tr_s);
    image.grid().validate();
}

double deg_to_rad(double deg) { return deg * (M_PI / 180.0); }

double spgr_signal(double pd, double r1, double sens, double ft, double alpha_deg, double tr_s) {
    const double a = ft * deg_to_rad(alpha_deg);
    const double e = std::exp(-tr_s * r1);
    return sens * pd * std::sin(a) * (1.0 - e) / (1.0 - std::cos(a) * e);
}

double spgr_signal_smallfa(double pd, double r1, double sens, double ft, double alpha_deg, double tr_s) {
    const double a = ft * deg_to_rad(alpha_deg);
    const double x = tr_s * r1;
    return sens * pd * a * x / (0.5 * a * a + x);
}

Volume spgr_signal(const TissueParams& tissue, const Volume& sens, const B1Map& ft, double alpha_deg, double tr_s) {
    check_flip(alpha_deg, tr_s);
    return voxelwise_signal(tissue, sens, ft, [&](double pd, double r1, double s, double f) {
        return spgr_signal(pd, r1, s, f, alpha_deg, tr_s);
    });
}

Volume spgr_signal_smallfa(const TissueParams& tissue, const Volume& sens, const B1Map& ft, double alpha_deg,
                           double tr_s) {
    check_flip(alpha_deg, tr_s);
    return voxelwise_signal(tissue, sens, ft, [&](double pd, double r1, double s, double f) {
        return spgr_signal_smallfa(pd, r1, s, f, alpha_deg, tr_s);
    });
}

Volume r1_vfa(const VfaAcquisition& pdw, const VfaAcquisition& t1w, const Volume* delta, const B1Map& ft_pdw,
              const B1Map* ft_t1w, const R1Options& options) {
    pdw.validate();
    t1w.validate();
    require_same_grid(pdw.image, t1w.image, "PDw vs T1w");
    require_same_grid(pdw.image, ft_pdw.ft, "PDw vs PDw transmit field");
    if (delta) require_same_grid(pdw.image, *delta, "PDw vs relative sensitivity");
    if (ft_t1w) require_same_grid(pdw.image, ft_t1w->ft, "PDw vs T1w transmit field");

    const double a1 = deg_to_rad(pdw.flip_angle_deg);
    const double a2 = deg_to_rad(t1w.flip_angle_deg);
    const double tr1 = pdw.tr_s;
    const double tr2 = t1w.tr_s;
    const std::size_t n_vox = pdw.image.size();

    std::vector<double> num(n_vox, kNaN);
    std::vector<double> den(n_vox, kNaN);
    std::vector<double> scale(n_vox, kNaN);
    std::vector<double> finite_den;
    finite_den.reserve(n_vox);

    for (std::size_t n = 0; n < n_vox; ++n) {
        const double d = delta ? (*delta)[n] : 1.0;
        if (!(d > 0.0)) continue;
        const double i1 = pdw.image[n] / d;
        const double i2 = t1w.image[n];
        const double f1 = ft_pdw.ft[n];
        const double f2 = ft_t1w ? ft_t1w->ft[n] : f1;
        if (!std::isfinite(i1) || !std::isfinite(i2) || !std::isfinite(f1) || !std::isfinite(f2)) continue;
        if (ft_t1w) {
            const double e1 = f1 * a1;
            const double e2 = f2 * a2;
            num[n] = i2 * e2 / tr2 - i1 * e1 / tr1;
            den[n] = i1 / e1 - i2 / e2;
            scale[n] = 0.5;
        } else {
            num[n] = i2 * a2 / tr2 - i1 * a1 / tr1;
            den[n] = i1 / a1 - i2 / a2;
            scale[n] = 0.5 * f1 * f1;
        }
        if (std::isfinite(den[n])) finite_den.push_back(std::abs(den[n]));
    }

    const double eps = kDenominatorGuard * median_abs(std::move(finite_den));
    Volume out(pdw.image.grid(), kNaN);
    out.intent = "r1";
    for (std::size_t n = 0; n < n_vox; ++n) {
        if (!std::isfinite(den[n]) || !(std::abs(den[n]) >= eps) || den[n] == 0.0) continue;
        double r1 = scale[n] * num[n] / den[n];
        if (!std::isfinite(r1)) continue;
        if (options.clamp) r1 = std::clamp(r1, 0.0, 10.0);
        out[n] = r1;
    }
    return out;
}

VfaAcquisition apply_relative_sensitivity(const VfaAcquisition& acq, const Volume& delta) {
    require_same_grid(acq.image, delta, "acquisition vs relative sensitivity");
    VfaAcquisition out = acq;
    for (std::size_t n = 0; n < acq.image.size(); ++n) {
        const double x = acq.image[n];
        const double d = delta[n];
        if (!std::isfinite(x)) continue;
        out.image[n] = (std::isfinite(d) && d > 0.0) ? x / d : kNaN;
    }
    return out;
}

}  // namespace vfamc
