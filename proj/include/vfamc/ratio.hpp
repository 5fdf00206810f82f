#pragma once

#include "vfamc/volume.hpp"

namespace vfamc {

enum class Coil { Array, Body };

// Low-resolution coil-combined magnitude image acquired ahead of a VFA volume.
struct CalibrationImage {
    Volume image;
    Coil coil = Coil::Array;
    int position_index = 0;
};

inline constexpr double kDefaultFwhmMm = 12.0;

// smooth(moving) / smooth(reference) on a shared grid; fwhm_mm == 0 skips the
// smoothing. Voxels where smooth(reference) falls below 1e-6 of its 99th
// percentile are NaN.
Volume ratio_relative_sensitivity(const CalibrationImage& moving, const CalibrationImage& reference, double fwhm_mm);

// Trilinear resampling of a relative-sensitivity field onto a VFA grid.
Volume upsample_delta(const Volume& delta, const Grid& target);

}  // namespace vfamc
