#include "vfamc/genmodel.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include "vfamc/error.hpp"

namespace vfamc {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

void check_images(std::span<const CalibrationImage> images, std::size_t min_count) {
    if (images.size() < min_count) throw ConfigError("generative model: needs at least two calibration images");
    for (std::size_t k = 1; k < images.size(); ++k)
        require_same_grid(images[0].image, images[k].image, "calibration images (reslice to a common grid first)");
}

void check_state(const GenModelState& state, std::span<const CalibrationImage> images) {
    if (state.fields.size() != images.size() || state.noise_var.size() != images.size())
        throw ConfigError("generative model: state does not match the number of images");
    for (std::size_t k = 0; k < images.size(); ++k) {
        require_same_grid(state.mean, images[k].image, "mean vs calibration image");
        require_same_grid(state.mean, state.fields[k].log_field, "mean vs log field");
    }
}

struct TermParts {
    double likelihood = 0.0;
    double prior = 0.0;
    std::size_t count = 0;
};

TermParts objective_term(const Volume& mean, const Volume& z, double lambda, double var, const Volume& x) {
    TermParts t;
    for (std::size_t n = 0; n < x.size(); ++n) {
        if (!std::isfinite(x[n]) || !std::isfinite(mean[n])) continue;
        const double res = x[n] - std::exp(z[n]) * mean[n];
        t.likelihood += res * res;
        ++t.count;
    }
    t.likelihood /= 2.0 * var;
    t.prior = lambda * BendingOperator::for_grid(z.grid()).energy(z);
    return t;
}

double term_value(const TermParts& t, double var, SigmaMode mode) {
    double v = t.likelihood + t.prior;
    if (mode == SigmaMode::MlUpdate) v += 0.5 * static_cast<double>(t.count) * std::log(var);
    return v;
}

// Floor for noise variances so that exact fits stay finite.
double variance_floor(const Volume& x) {
    double ss = 0.0;
    std::size_t n = 0;
    for (double v : x.values()) {
        if (!std::isfinite(v)) continue;
        ss += v * v;
        ++n;
    }
    const double ms = n ? ss / static_cast<double>(n) : 0.0;
    return ms > 0.0 ? 1e-12 * ms : 1e-300;
}

}  // namespace

std::string to_string(SigmaMode mode) { return mode == SigmaMode::FixedInitial ? "fixed-initial" : "ml-update"; }

SigmaMode sigma_mode_from_string(const std::string& s) {
    if (s == "fixed-initial") return SigmaMode::FixedInitial;
    if (s == "ml-update") return SigmaMode::MlUpdate;
    throw ConfigError("unknown sigma mode '" + s + "' (expected fixed-initial or ml-update)");
}

void FitConfig::validate() const {
    if (!(lambda_array > 0.0) || !(lambda_body > 0.0)) throw ConfigError("fit: lambdas must be positive");
    if (iterations < 1) throw ConfigError("fit: iterations must be >= 1");
    if (!(tolerance >= 0.0)) throw ConfigError("fit: tolerance must be >= 0");
    if (!(solver_rtol > 0.0 && solver_rtol < 1.0)) throw ConfigError("fit: solver rtol must lie in (0, 1)");
    if (solver_max_cycles < 1) throw ConfigError("fit: solver max cycles must be >= 1");
    if (max_halvings < 0) throw ConfigError("fit: max halvings must be >= 0");
}

Volume SensitivityField::sensitivity() const {
    Volume s(log_field.grid());
    for (std::size_t n = 0; n < s.size(); ++n) s[n] = std::exp(log_field[n]);
    s.intent = "sensitivity";
    return s;
}

double lambda_for(Coil coil, const FitConfig& config) {
    return coil == Coil::Body ? config.lambda_body : config.lambda_array;
}

GenModelState initial_state(std::span<const CalibrationImage> images, const FitConfig& config) {
    check_images(images, 1);
    config.validate();
    const Grid& grid = images[0].image.grid();
    GenModelState state;
    state.sigma_mode = config.sigma_mode;
    for (const auto& img : images) {
        SensitivityField f{Volume(grid, 0.0), lambda_for(img.coil, config)};
        f.log_field.intent = "log_sensitivity";
        state.fields.push_back(std::move(f));
        state.noise_var.push_back(1.0);
    }
    state.mean = update_mean(state, images);
    for (std::size_t k = 0; k < images.size(); ++k) {
        const Volume& x = images[k].image;
        double ss = 0.0;
        std::size_t count = 0;
        for (std::size_t n = 0; n < x.size(); ++n) {
            if (!std::isfinite(x[n]) || !std::isfinite(state.mean[n])) continue;
            const double r = x[n] - state.mean[n];
            ss += r * r;
            ++count;
        }
        const double var = count ? ss / static_cast<double>(count) : 0.0;
        state.noise_var[k] = std::max(var, variance_floor(x));
    }
    return state;
}

double objective(const GenModelState& state, std::span<const CalibrationImage> images) {
    check_state(state, images);
    double total = 0.0;
    for (std::size_t k = 0; k < images.size(); ++k) {
        const TermParts t = objective_term(state.mean, state.fields[k].log_field, state.fields[k].lambda,
                                           state.noise_var[k], images[k].image);
        total += term_value(t, state.noise_var[k], state.sigma_mode);
    }
    return total;
}

Volume update_mean(const GenModelState& state, std::span<const CalibrationImage> images) {
    const Grid& grid = images[0].image.grid();
    Volume mean(grid, kNaN);
    mean.intent = "mean";
    for (std::size_t n = 0; n < mean.size(); ++n) {
        double num = 0.0;
        double den = 0.0;
        for (std::size_t k = 0; k < images.size(); ++k) {
            const double x = images[k].image[n];
            if (!std::isfinite(x)) continue;
            const double s = std::exp(state.fields[k].log_field[n]);
            num += s * x / state.noise_var[k];
            den += s * s / state.noise_var[k];
        }
        if (den > 0.0) mean[n] = num / den;
    }
    return mean;
}

std::vector<double> ml_noise_var(const GenModelState& state, std::span<const CalibrationImage> images) {
    check_state(state, images);
    std::vector<double> var(images.size());
    for (std::size_t k = 0; k < images.size(); ++k) {
        const Volume& x = images[k].image;
        const Volume& z = state.fields[k].log_field;
        double ss = 0.0;
        std::size_t count = 0;
        for (std::size_t n = 0; n < x.size(); ++n) {
            if (!std::isfinite(x[n]) || !std::isfinite(state.mean[n])) continue;
            const double r = x[n] - std::exp(z[n]) * state.mean[n];
            ss += r * r;
            ++count;
        }
        var[k] = std::max(count ? ss / static_cast<double>(count) : 0.0, variance_floor(x));
    }
    return var;
}

Volume field_gradient(const GenModelState& state, std::span<const CalibrationImage> images, std::size_t k) {
    check_state(state, images);
    const SensitivityField& field = state.fields.at(k);
    const Volume& x = images[k].image;
    const BendingOperator bending = BendingOperator::for_grid(x.grid());
    Volume g = bending.apply(field.log_field);
    const double inv_var = 1.0 / state.noise_var[k];
    for (std::size_t n = 0; n < g.size(); ++n) {
        g[n] *= field.lambda;
        if (!std::isfinite(x[n]) || !std::isfinite(state.mean[n])) continue;
        const double sr = std::exp(field.log_field[n]) * state.mean[n];
        g[n] += inv_var * sr * (sr - x[n]);
    }
    g.intent = "gradient";
    return g;
}

DiagPlusBending field_preconditioner(const GenModelState& state, std::span<const CalibrationImage> images,
                                     std::size_t k) {
    check_state(state, images);
    const SensitivityField& field = state.fields.at(k);
    const Volume& x = images[k].image;
    std::vector<double> diag(x.size(), 0.0);
    const double inv_var = 1.0 / state.noise_var[k];
    for (std::size_t n = 0; n < diag.size(); ++n) {
        if (!std::isfinite(x[n]) || !std::isfinite(state.mean[n])) continue;
        const double sr = std::exp(field.log_field[n]) * state.mean[n];
        diag[n] = inv_var * (sr * sr + std::abs(sr) * std::abs(sr - x[n]));
    }
    return DiagPlusBending(std::move(diag), field.lambda, BendingOperator::for_grid(x.grid()));
}

FieldStep field_update(const GenModelState& state, std::span<const CalibrationImage> images, std::size_t k,
                       const FitConfig& config) {
    const Volume g = field_gradient(state, images, k);
    const Volume& z = state.fields[k].log_field;
    FieldStep step{z, 0, true, {}};

    bool zero = true;
    for (double v : g.values()) zero = zero && v == 0.0;
    if (zero) return step;

    const DiagPlusBending p = field_preconditioner(state, images, k);
    const Volume delta = solve(p, g, config.solver_rtol, config.solver_max_cycles, &step.solve);

    const double lambda = state.fields[k].lambda;
    const double var = state.noise_var[k];
    const Volume& x = images[k].image;
    const double before = term_value(objective_term(state.mean, z, lambda, var, x), var, state.sigma_mode);

    double t = 1.0;
    Volume trial = z;
    for (int h = 0; h <= config.max_halvings; ++h, t *= 0.5) {
        for (std::size_t n = 0; n < trial.size(); ++n) trial[n] = z[n] - t * delta[n];
        const double after = term_value(objective_term(state.mean, trial, lambda, var, x), var, state.sigma_mode);
        if (std::isfinite(after) && after <= before) {
            step.log_field = trial;
            step.halvings = h;
            return step;
        }
    }
    step.halvings = config.max_halvings;
    step.accepted = false;
    return step;
}

GenModelState rescale(GenModelState state) {
    if (state.fields.empty()) return state;
    double lambda_sum = 0.0;
    for (const auto& f : state.fields) lambda_sum += f.lambda;
    const std::size_t n_vox = state.mean.size();
    for (std::size_t n = 0; n < n_vox; ++n) {
        double acc = 0.0;
        for (const auto& f : state.fields) acc += f.lambda * f.log_field[n];
        const double zbar = acc / lambda_sum;
        if (zbar == 0.0) continue;
        for (auto& f : state.fields) f.log_field[n] -= zbar;
        state.mean[n] *= std::exp(zbar);
    }
    return state;
}

Volume relative_sensitivity(const GenModelState& state, std::size_t k, std::size_t ref) {
    const Volume& zk = state.fields.at(k).log_field;
    const Volume& zr = state.fields.at(ref).log_field;
    Volume out(zk.grid());
    for (std::size_t n = 0; n < out.size(); ++n) out[n] = k == ref ? 1.0 : std::exp(zk[n] - zr[n]);
    out.intent = "relative_sensitivity";
    return out;
}

GenModelState fit(std::span<const CalibrationImage> images, const FitConfig& config, const FitObserver& observer) {
    check_images(images, 2);
    config.validate();

    std::size_t overlap = 0;
    for (std::size_t n = 0; n < images[0].image.size(); ++n) {
        int seen = 0;
        for (const auto& img : images) seen += std::isfinite(img.image[n]) ? 1 : 0;
        if (seen >= 2) ++overlap;
    }
    if (overlap == 0) throw NumericalError("generative model: calibration images do not overlap");

    GenModelState state = initial_state(images, config);
    state.objective_trace.push_back(objective(state, images));

    for (int it = 1; it <= config.iterations; ++it) {
        state.mean = update_mean(state, images);
        if (state.sigma_mode == SigmaMode::MlUpdate) state.noise_var = ml_noise_var(state, images);
        int halvings = 0;
        for (std::size_t k = 0; k < images.size(); ++k) {
            try {
                FieldStep step = field_update(state, images, k, config);
                state.fields[k].log_field = std::move(step.log_field);
                halvings += step.halvings;
            } catch (const NumericalError& e) {
                std::ostringstream msg;
                msg << "generative fit failed at iteration " << it << ", image " << k << ": " << e.what();
                throw NumericalError(msg.str());
            }
        }
        state = rescale(std::move(state));
        state.halvings.push_back(halvings);
        const double prev = state.objective_trace.back();
        const double cur = objective(state, images);
        state.objective_trace.push_back(cur);
        if (observer) observer(it, state);
        if (config.tolerance > 0.0 && std::abs(prev - cur) <= config.tolerance * std::abs(prev)) break;
    }
    return state;
}

}  // namespace vfamc
