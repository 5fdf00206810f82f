#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "vfamc/ratio.hpp"
#include "vfamc/solver.hpp"
#include "vfamc/volume.hpp"

namespace vfamc {

// Joint fit of a mean image r and log-sensitivity fields z_k to calibration
// images x_k ~ N(exp(z_k) * r, sigma_k^2), with a bending-energy prior
// lambda_k/2 z_k^T L z_k on each field.

enum class SigmaMode {
    FixedInitial,  // sigma_k^2 from the z = 0 residuals, then held fixed
    MlUpdate,      // re-estimated every iteration; objective gains N_k ln sigma_k
};

std::string to_string(SigmaMode mode);
SigmaMode sigma_mode_from_string(const std::string& s);

struct FitConfig {
    double lambda_array = 1e3;
    double lambda_body = 1e8;
    int iterations = 15;
    SigmaMode sigma_mode = SigmaMode::FixedInitial;
    // Relative objective change below which the fit stops early; 0 disables.
    double tolerance = 0.0;
    double solver_rtol = 1e-8;
    int solver_max_cycles = 50;
    int max_halvings = 10;

    void validate() const;
};

struct SensitivityField {
    Volume log_field;
    double lambda = 0.0;

    Volume sensitivity() const;
};

struct GenModelState {
    Volume mean;
    std::vector<SensitivityField> fields;
    std::vector<double> noise_var;
    // Objective after initialisation followed by one entry per completed iteration.
    std::vector<double> objective_trace;
    SigmaMode sigma_mode = SigmaMode::FixedInitial;
    // Step halvings used by the field updates of each iteration.
    std::vector<int> halvings;
};

double lambda_for(Coil coil, const FitConfig& config);

// z_k = 0; r from the closed-form mean with unit sensitivities; sigma_k^2 from
// the residuals against that mean.
GenModelState initial_state(std::span<const CalibrationImage> images, const FitConfig& config);

// Negative log joint likelihood (constants dropped). Likelihood sums skip
// voxels where x_k or r is not finite.
double objective(const GenModelState& state, std::span<const CalibrationImage> images);

// Closed-form voxel-wise mean for fixed fields.
Volume update_mean(const GenModelState& state, std::span<const CalibrationImage> images);

// sigma_k^2 = |x_k - s_k r|^2 / N_k over valid voxels.
std::vector<double> ml_noise_var(const GenModelState& state, std::span<const CalibrationImage> images);

// Gradient of the objective with respect to z_k.
Volume field_gradient(const GenModelState& state, std::span<const CalibrationImage> images, std::size_t k);

// Majorising preconditioner diag((s r)^2 + |s r| |s r - x|)/sigma^2 + lambda L.
DiagPlusBending field_preconditioner(const GenModelState& state, std::span<const CalibrationImage> images,
                                     std::size_t k);

struct FieldStep {
    Volume log_field;
    int halvings = 0;
    bool accepted = true;  // false: no trial step decreased the objective, z unchanged
    SolveStats solve;
};

// z_k - P^-1 g, halving the step until the objective does not increase.
FieldStep field_update(const GenModelState& state, std::span<const CalibrationImage> images, std::size_t k,
                       const FitConfig& config);

// Removes the lambda-weighted mean log-field from every z_k and folds it into r.
GenModelState rescale(GenModelState state);

// exp(z_k - z_ref)
Volume relative_sensitivity(const GenModelState& state, std::size_t k, std::size_t ref);

// Called with the iteration number and the rescaled state after every iteration.
using FitObserver = std::function<void(int, const GenModelState&)>;

// Alternates mean update, (optional sigma update), field updates and rescaling.
// Images must share one grid. Throws ConfigError for fewer than two images and
// NumericalError when no voxel is observed by two images or the solver fails.
GenModelState fit(std::span<const CalibrationImage> images, const FitConfig& config,
                  const FitObserver& observer = {});

}  // namespace vfamc
