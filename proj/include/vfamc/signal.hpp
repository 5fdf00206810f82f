#pragma once

#include <string>

#include "vfamc/volume.hpp"

namespace vfamc {

// One weighted contrast of a variable-flip-angle pair.
struct VfaAcquisition {
    Volume image;
    double flip_angle_deg = 0.0;  // nominal
    double tr_s = 0.0;
    std::string label;

    void validate() const;
};

// Relative transmit efficiency; 1 is nominal.
struct B1Map {
    Volume ft;
};

struct TissueParams {
    Volume r1;  // s^-1
    Volume pd;
};

enum class B1Mode { Shared, PerContrast };

double deg_to_rad(double deg);

// Spoiled gradient echo steady state: s*pd*sin(a)(1-E)/(1-cos(a)E), a = ft*alpha, E = exp(-tr*r1).
double spgr_signal(double pd, double r1, double sens, double ft, double alpha_deg, double tr_s);
// Small-flip-angle rational form: s*pd*a*(tr*r1) / (a^2/2 + tr*r1).
double spgr_signal_smallfa(double pd, double r1, double sens, double ft, double alpha_deg, double tr_s);

Volume spgr_signal(const TissueParams& tissue, const Volume& sens, const B1Map& ft, double alpha_deg, double tr_s);
Volume spgr_signal_smallfa(const TissueParams& tissue, const Volume& sens, const B1Map& ft, double alpha_deg,
                           double tr_s);

struct R1Options {
    // Clamp the output to [0, 10] s^-1 (display only).
    bool clamp = false;
};

// Small-flip-angle R1 from a PDw/T1w pair already resampled onto one grid.
//
// `delta` is the relative receive sensitivity s_pdw / s_t1w; the PDw image is
// divided by it before estimation (nullptr means delta = 1). When `ft_t1w` is
// nullptr both contrasts share `ft_pdw` and the estimate is evaluated in the
// factored form ft^2/2 * (...) with nominal angles; otherwise each contrast
// uses its own effective flip angle ft_k * alpha_k.
//
// Voxels with non-finite inputs, or whose denominator magnitude falls below
// 1e-9 times the median magnitude over finite voxels, are NaN.
Volume r1_vfa(const VfaAcquisition& pdw, const VfaAcquisition& t1w, const Volume* delta, const B1Map& ft_pdw,
              const B1Map* ft_t1w = nullptr, const R1Options& options = {});

// Divides the image by delta voxel-wise; delta <= 0 at a finite voxel gives NaN.
VfaAcquisition apply_relative_sensitivity(const VfaAcquisition& acq, const Volume& delta);

}  // namespace vfamc
