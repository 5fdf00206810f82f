#include "vfamc/ratio.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "vfamc/error.hpp"

namespace vfamc {

namespace {

constexpr double kFloorFraction = 1e-6;

double percentile(std::vector<double> v, double q) {
    if (v.empty()) return 0.0;
    const auto idx = static_cast<std::size_t>(std::floor(q * static_cast<double>(v.size() - 1)));
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(idx), v.end());
    return v[idx];
}

}  // namespace

Volume ratio_relative_sensitivity(const CalibrationImage& moving, const CalibrationImage& reference, double fwhm_mm) {
    require_same_grid(moving.image, reference.image, "calibration images (reslice first)");
    if (!(fwhm_mm >= 0.0)) throw ConfigError("ratio: fwhm must be non-negative");

    const Volume num = fwhm_mm > 0.0 ? gaussian_smooth(moving.image, fwhm_mm) : moving.image;
    const Volume den = fwhm_mm > 0.0 ? gaussian_smooth(reference.image, fwhm_mm) : reference.image;

    std::vector<double> finite;
    finite.reserve(den.size());
    for (double x : den.values())
        if (std::isfinite(x)) finite.push_back(x);
    const double floor = kFloorFraction * percentile(std::move(finite), 0.99);

    Volume out(den.grid(), std::numeric_limits<double>::quiet_NaN());
    out.intent = "relative_sensitivity";
    for (std::size_t n = 0; n < out.size(); ++n) {
        const double d = den[n];
        const double x = num[n];
        if (!std::isfinite(d) || !std::isfinite(x) || !(d >= floor) || d <= 0.0) continue;
        out[n] = x / d;
    }
    return out;
}

Volume upsample_delta(const Volume& delta, const Grid& target) {
    return reslice(delta, RigidTransform::identity(), target);
}

}  // namespace vfamc
