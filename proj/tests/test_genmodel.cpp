#include <cmath>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "doctest.h"
#include "support.hpp"
#include "vfamc/error.hpp"
#include "vfamc/genmodel.hpp"

using namespace vfamc;
using testsupport::cube;

namespace {

struct Problem {
    std::vector<CalibrationImage> images;
    GenModelState state;
};

// Random positive state with images near its prediction.
Problem random_problem(const Grid& g, int count, std::mt19937_64& rng, double lambda, double noise) {
    std::normal_distribution<double> gauss;
    Problem p;
    p.state.mean = testsupport::random_volume(g, rng, 1.0, 2.0);
    for (int k = 0; k < count; ++k) {
        Volume z(g), x(g);
        for (std::size_t n = 0; n < g.size(); ++n) {
            z[n] = 0.1 * gauss(rng);
            x[n] = std::exp(z[n]) * p.state.mean[n] + noise * gauss(rng);
        }
        p.state.fields.push_back({z, lambda * (k + 1)});
        p.state.noise_var.push_back(0.05 + 0.02 * k);
        p.images.push_back({x, Coil::Array, k});
    }
    return p;
}

double dense_objective(const GenModelState& s, const std::vector<CalibrationImage>& images) {
    double total = 0.0;
    for (std::size_t k = 0; k < images.size(); ++k) {
        const Volume& x = images[k].image;
        const Volume& z = s.fields[k].log_field;
        const Eigen::MatrixXd L = BendingOperator::for_grid(x.grid()).dense();
        Eigen::Map<const Eigen::VectorXd> zv(z.data().data(), static_cast<Eigen::Index>(z.size()));
        double ss = 0.0;
        for (std::size_t n = 0; n < x.size(); ++n) {
            if (!std::isfinite(x[n])) continue;
            ss += std::pow(x[n] - std::exp(z[n]) * s.mean[n], 2);
        }
        total += ss / (2.0 * s.noise_var[k]) + 0.5 * s.fields[k].lambda * zv.dot(L * zv);
    }
    return total;
}

Volume field_from(const Grid& g, const std::function<double(const Vec3&)>& f) {
    Volume v(g);
    for (int k = 0; k < g.dims[2]; ++k)
        for (int j = 0; j < g.dims[1]; ++j)
            for (int i = 0; i < g.dims[0]; ++i) v.at(i, j, k) = f(g.to_world(Vec3(i, j, k)));
    return v;
}

// Textured ball of radius 32 mm, zero outside.
Volume object(const Grid& g) {
    return field_from(g, [](const Vec3& p) {
        return p.norm() < 32.0 ? 1.0 + 0.3 * std::sin(p.x() / 7.0) * std::cos(p.y() / 9.0 + p.z() / 11.0) : 0.0;
    });
}

Volume modulate(const Volume& r, const Volume& z) {
    Volume x(r.grid());
    for (std::size_t n = 0; n < x.size(); ++n) x[n] = r[n] * std::exp(z[n]);
    return x;
}

}  // namespace

TEST_CASE("objective matches a dense evaluation") {
    std::mt19937_64 rng(41);
    Problem p = random_problem(cube(8, 2.0), 3, rng, 0.5, 0.1);
    p.images[1].image[17] = std::nan("");
    CHECK(objective(p.state, p.images) ==
          doctest::Approx(dense_objective(p.state, p.images)).epsilon(1e-10));

    p.state.sigma_mode = SigmaMode::MlUpdate;
    double extra = 0.0;
    for (std::size_t k = 0; k < 3; ++k)
        extra += 0.5 * static_cast<double>(k == 1 ? 511 : 512) * std::log(p.state.noise_var[k]);
    CHECK(objective(p.state, p.images) ==
          doctest::Approx(dense_objective(p.state, p.images) + extra).epsilon(1e-10));
}

TEST_CASE("objective scalar cases") {
    const Grid g = cube(4);
    GenModelState s{Volume(g, 1.0), {{Volume(g, 0.0), 1.0}}, {1.0}, {}, SigmaMode::FixedInitial, {}};
    std::vector<CalibrationImage> images{{Volume(g, 1.0), Coil::Array, 0}};
    CHECK(objective(s, images) == 0.0);

    Volume x(g, std::nan(""));
    x[0] = 3.0;
    images[0].image = x;
    // constant field: no prior contribution
    s.fields[0].log_field = Volume(g, 0.0);
    CHECK(objective(s, images) == 2.0);
}

TEST_CASE("gradient matches central finite differences") {
    std::mt19937_64 rng(42);
    for (SigmaMode mode : {SigmaMode::FixedInitial, SigmaMode::MlUpdate}) {
        Problem p = random_problem(cube(8, 1.5), 2, rng, 2.0, 0.2);
        p.state.sigma_mode = mode;
        double worst = 0.0;
        for (std::size_t k = 0; k < 2; ++k) {
            const Volume g = field_gradient(p.state, p.images, k);
            GenModelState s = p.state;
            for (std::size_t n = 0; n < g.size(); ++n) {
                double& z = s.fields[k].log_field[n];
                const double z0 = z, h = 1e-5 * std::max(1.0, std::abs(z0));
                z = z0 + h;
                const double up = objective(s, p.images);
                z = z0 - h;
                const double down = objective(s, p.images);
                z = z0;
                const double fd = (up - down) / (2.0 * h);
                worst = std::max(worst, std::abs(g[n] - fd) / std::max(std::abs(fd), 1e-12));
            }
        }
        CHECK(worst < 1e-5);
    }
}

TEST_CASE("gradient vanishes at an exact fit") {
    const Grid g = cube(6, 2.0);
    std::mt19937_64 rng(43);
    const Volume r = testsupport::random_volume(g, rng, 1.0, 2.0);
    GenModelState s{r, {{Volume(g, 0.0), 1e3}}, {0.1}, {}, SigmaMode::FixedInitial, {}};
    std::vector<CalibrationImage> images{{r, Coil::Array, 0}};
    const Volume g0 = field_gradient(s, images, 0);
    for (double v : g0.values()) CHECK(v == 0.0);

    s.fields[0].log_field = Volume(g, 0.4);
    images[0].image = modulate(r, s.fields[0].log_field);
    const Volume gc = field_gradient(s, images, 0);
    for (double v : gc.values()) CHECK(v == 0.0);
}

TEST_CASE("preconditioner is the robust diagonal plus bending and is positive definite") {
    std::mt19937_64 rng(44);
    Problem p = random_problem(cube(6, 2.0), 2, rng, 10.0, 0.3);
    for (std::size_t k = 0; k < 2; ++k) {
        const DiagPlusBending P = field_preconditioner(p.state, p.images, k);
        const Volume& x = p.images[k].image;
        for (std::size_t n = 0; n < x.size(); ++n) {
            const double sr = std::exp(p.state.fields[k].log_field[n]) * p.state.mean[n];
            const double d = (sr * sr + sr * std::abs(sr - x[n])) / p.state.noise_var[k];
            CHECK(P.diag[n] == doctest::Approx(d).epsilon(1e-14));
        }
        CHECK(P.lambda == p.state.fields[k].lambda);
        Eigen::LLT<Eigen::MatrixXd> llt(P.dense());
        CHECK(llt.info() == Eigen::Success);
        CHECK((P.dense() - P.dense().transpose()).cwiseAbs().maxCoeff() == 0.0);
    }
}

TEST_CASE("mean update") {
    std::mt19937_64 rng(45);
    const Grid g = cube(5);
    const Volume x1 = testsupport::random_volume(g, rng, 0.5, 2.0);
    const Volume x2 = testsupport::random_volume(g, rng, 0.5, 2.0);
    GenModelState one{Volume(g), {{Volume(g, 0.0), 1.0}}, {0.3}, {}, SigmaMode::FixedInitial, {}};
    std::vector<CalibrationImage> single{{x1, Coil::Array, 0}};
    const Volume m1 = update_mean(one, single);
    for (std::size_t n = 0; n < g.size(); ++n) CHECK(m1[n] == doctest::Approx(x1[n]).epsilon(1e-15));

    GenModelState two{Volume(g), {{Volume(g, 0.0), 1.0}, {Volume(g, 0.0), 1.0}}, {0.3, 0.3}, {},
                      SigmaMode::FixedInitial, {}};
    std::vector<CalibrationImage> pair{{x1, Coil::Array, 0}, {x2, Coil::Array, 1}};
    const Volume m = update_mean(two, pair);
    for (std::size_t n = 0; n < g.size(); ++n) CHECK(m[n] == doctest::Approx((x1[n] + x2[n]) / 2.0).epsilon(1e-15));

    Volume nan_all(g, std::nan(""));
    std::vector<CalibrationImage> none{{nan_all, Coil::Array, 0}};
    CHECK(std::isnan(update_mean(one, none)[0]));
}

TEST_CASE("mean update is a local optimum") {
    std::mt19937_64 rng(46);
    Problem p = random_problem(cube(6, 2.0), 3, rng, 1.0, 0.2);
    p.state.mean = update_mean(p.state, p.images);
    const double best = objective(p.state, p.images);
    for (std::size_t n : {0u, 17u, 100u, 215u}) {
        for (double sign : {-1.0, 1.0}) {
            GenModelState s = p.state;
            s.mean[n] *= 1.0 + sign * 1e-3;
            CHECK(objective(s, p.images) > best);
        }
    }
}

TEST_CASE("field update") {
    const Grid g = cube(8, 2.0);
    std::mt19937_64 rng(47);
    const Volume r = testsupport::random_volume(g, rng, 1.0, 2.0);
    FitConfig cfg;
    cfg.lambda_array = 1e2;

    SUBCASE("zero gradient leaves the field unchanged") {
        GenModelState s{r, {{Volume(g, 0.0), 1e2}}, {0.1}, {}, SigmaMode::FixedInitial, {}};
        std::vector<CalibrationImage> images{{r, Coil::Array, 0}};
        const FieldStep step = field_update(s, images, 0, cfg);
        CHECK(step.log_field.values() == s.fields[0].log_field.values());
        CHECK(step.halvings == 0);
    }

    SUBCASE("tiny residuals: one step equals a dense Newton solve") {
        const Volume z_true = field_from(g, [](const Vec3& p) { return 1e-4 * (p.x() - 0.5 * p.y() + 0.02 * p.z() * p.z()); });
        GenModelState s{r, {{Volume(g, 0.0), 1e2}}, {1e-4}, {}, SigmaMode::FixedInitial, {}};
        std::vector<CalibrationImage> images{{modulate(r, z_true), Coil::Array, 0}};
        const Volume grad = field_gradient(s, images, 0);
        Eigen::MatrixXd P = 1e2 * BendingOperator::for_grid(g).dense();
        for (std::size_t n = 0; n < g.size(); ++n) {
            const double x = images[0].image[n];
            P(n, n) += (r[n] * r[n] + r[n] * std::abs(r[n] - x)) / 1e-4;
        }
        const Eigen::VectorXd newton =
            -P.ldlt().solve(Eigen::Map<const Eigen::VectorXd>(grad.data().data(), static_cast<Eigen::Index>(g.size())));
        const FieldStep step = field_update(s, images, 0, cfg);
        CHECK(step.halvings == 0);
        double err = 0.0;
        for (std::size_t n = 0; n < g.size(); ++n) err = std::max(err, std::abs(step.log_field[n] - newton[n]));
        CHECK(err < 1e-6);
        CHECK(objective(GenModelState{r, {{step.log_field, 1e2}}, {1e-4}, {}, SigmaMode::FixedInitial, {}}, images) <
              objective(s, images));
    }
}

TEST_CASE("rescaling") {
    const Grid g = cube(4);
    auto state_of = [&](double z1, double z2, double l1, double l2) {
        return GenModelState{Volume(g, 2.0), {{Volume(g, z1), l1}, {Volume(g, z2), l2}}, {1, 1}, {},
                             SigmaMode::FixedInitial, {}};
    };
    const GenModelState zero = rescale(state_of(0, 0, 1e3, 1e3));
    CHECK(zero.mean.values() == Volume(g, 2.0).values());

    const GenModelState sym = rescale(state_of(0.3, -0.3, 1e3, 1e3));
    CHECK(sym.fields[0].log_field[0] == 0.3);
    CHECK(sym.mean[0] == 2.0);

    const GenModelState body = rescale(state_of(1.0, 0.0, 1e3, 1e8));
    const double zbar = 1e3 / (1e3 + 1e8);
    CHECK(body.fields[0].log_field[0] == doctest::Approx(1.0 - zbar).epsilon(1e-15));
    CHECK(body.fields[1].log_field[0] == doctest::Approx(-zbar).epsilon(1e-15));
    CHECK(body.mean[0] == doctest::Approx(2.0 * std::exp(zbar)).epsilon(1e-15));

    std::mt19937_64 rng(48);
    Problem p = random_problem(cube(6, 2.0), 3, rng, 1e3, 0.2);
    const GenModelState r = rescale(p.state);
    for (std::size_t n = 0; n < r.mean.size(); ++n) {
        double num = 0.0, den = 0.0;
        for (std::size_t k = 0; k < 3; ++k) {
            num += r.fields[k].lambda * r.fields[k].log_field[n];
            den += r.fields[k].lambda;
            const double before = std::exp(p.state.fields[k].log_field[n]) * p.state.mean[n];
            const double after = std::exp(r.fields[k].log_field[n]) * r.mean[n];
            CHECK(std::abs(after - before) <= 1e-12 * before);
        }
        CHECK(std::abs(num / den) < 1e-10);
    }
    CHECK(objective(r, p.images) <= objective(p.state, p.images) * (1 + 1e-12));
}

TEST_CASE("relative sensitivity") {
    const Grid g = cube(4);
    std::mt19937_64 rng(49);
    GenModelState s{Volume(g, 1.0),
                    {{testsupport::random_volume(g, rng, -1, 1), 1.0}, {Volume(g, 0.2), 1.0}, {Volume(g, -0.1), 1.0}},
                    {1, 1, 1}, {}, SigmaMode::FixedInitial, {}};
    const Volume self = relative_sensitivity(s, 0, 0), rel = relative_sensitivity(s, 1, 2);
    for (double v : self.values()) CHECK(v == 1.0);
    for (double v : rel.values()) CHECK(v == doctest::Approx(std::exp(0.3)).epsilon(1e-15));
}

TEST_CASE("fit of identical images has zero fields") {
    std::vector<CalibrationImage> images(2, CalibrationImage{object(cube(12, 4.0)), Coil::Array, 0});
    const GenModelState s = fit(images, FitConfig{});
    for (std::size_t k = 0; k < 2; ++k)
        for (double z : s.fields[k].log_field.values()) CHECK(std::abs(z) < 1e-8);
    for (std::size_t n = 0; n < s.mean.size(); ++n) CHECK(std::abs(s.mean[n] - images[0].image[n]) < 1e-8);
}

TEST_CASE("fit recovers a global scale between images") {
    const Volume r = object(cube(12, 4.0));
    Volume r2 = r;
    for (std::size_t n = 0; n < r2.size(); ++n) r2[n] *= 2.0;
    std::vector<CalibrationImage> images{{r, Coil::Array, 0}, {r2, Coil::Array, 1}};
    const GenModelState s = fit(images, FitConfig{});
    const Volume d = relative_sensitivity(s, 1, 0);
    for (std::size_t n = 0; n < d.size(); ++n)
        if (r[n] > 0.0) CHECK(std::abs(d[n] - 2.0) < 1e-6);
}

TEST_CASE("fit recovers smooth fields from noisy images") {
    const Grid g = cube(20, 4.0);
    const Volume r = object(g);
    const auto zf = [](const Vec3& p) {
        const Vec3 u = p / 50.0;
        return 0.25 * u.x() - 0.2 * u.y() * u.y() + 0.15 * u.x() * u.z() + 0.1 * u.z();
    };
    const Volume z1 = field_from(g, zf), z2 = field_from(g, [&](const Vec3& p) { return -zf(p); });
    std::mt19937_64 rng(50);
    double mean = 0.0;
    std::size_t inside = 0;
    for (double v : r.values())
        if (v > 0) mean += v, ++inside;
    std::normal_distribution<double> noise(0.0, mean / inside / 50.0);
    std::vector<CalibrationImage> images{{modulate(r, z1), Coil::Array, 0}, {modulate(r, z2), Coil::Array, 1}};
    for (auto& img : images)
        for (std::size_t n = 0; n < g.size(); ++n) img.image[n] += noise(rng);

    const GenModelState s = fit(images, FitConfig{});
    for (std::size_t i = 1; i < s.objective_trace.size(); ++i) {
        CHECK(s.objective_trace[i] <= s.objective_trace[i - 1] * (1 + 1e-9));
        if (i <= 3) CHECK(s.objective_trace[i] < s.objective_trace[i - 1]);
    }
    const Volume d = relative_sensitivity(s, 0, 1);
    double se = 0.0;
    for (std::size_t n = 0; n < g.size(); ++n)
        if (r[n] > 0) se += std::pow(d[n] / std::exp(z1[n] - z2[n]) - 1.0, 2);
    CHECK(std::sqrt(se / inside) < 0.02);
}

TEST_CASE("weakly regularised noiseless fit reproduces the image ratio") {
    const Grid g = cube(10, 4.0);
    const Volume r = field_from(g, [](const Vec3& p) { return 1.0 + 0.3 * std::sin(p.x() / 5.0) + 0.1 * p.y() / 20.0; });
    const Volume z = field_from(g, [](const Vec3& p) { return 0.2 * std::sin(p.y() / 6.0) + 0.1 * p.z() / 20.0; });
    std::vector<CalibrationImage> images{{modulate(r, z), Coil::Array, 0}, {r, Coil::Array, 1}};
    FitConfig cfg;
    cfg.lambda_array = 1e-9;
    cfg.iterations = 40;
    const GenModelState s = fit(images, cfg);
    const Volume d = relative_sensitivity(s, 0, 1);
    double worst = 0.0;
    for (std::size_t n = 0; n < g.size(); ++n)
        worst = std::max(worst, std::abs(d[n] / (images[0].image[n] / images[1].image[n]) - 1.0));
    CHECK(worst < 1e-6);
}

TEST_CASE("fit observer and noise re-estimation") {
    std::mt19937_64 rng(51);
    Problem p = random_problem(cube(8, 4.0), 3, rng, 1.0, 0.1);
    p.images[2].coil = Coil::Body;
    FitConfig cfg;
    cfg.sigma_mode = SigmaMode::MlUpdate;
    cfg.iterations = 6;
    int calls = 0;
    const GenModelState s = fit(p.images, cfg, [&](int it, const GenModelState& st) {
        CHECK(it == ++calls);
        for (std::size_t n = 0; n < st.mean.size(); ++n) {
            double acc = 0.0;
            for (const auto& f : st.fields) acc += f.lambda * f.log_field[n];
            CHECK(std::abs(acc / (2 * cfg.lambda_array + cfg.lambda_body)) < 1e-10);
        }
    });
    CHECK(calls == 6);
    CHECK(s.fields[2].lambda == cfg.lambda_body);
    CHECK(s.objective_trace.size() == 7);
    for (std::size_t i = 1; i < s.objective_trace.size(); ++i)
        CHECK(s.objective_trace[i] <= s.objective_trace[i - 1] + 1e-9 * std::abs(s.objective_trace[i - 1]));
}

TEST_CASE("fit input checks") {
    const Grid g = cube(4);
    std::vector<CalibrationImage> one{{Volume(g, 1.0), Coil::Array, 0}};
    CHECK_THROWS_AS(fit(one, FitConfig{}), ConfigError);
    Volume a(g, std::nan("")), b(g, std::nan(""));
    a[0] = 1.0;
    b[1] = 1.0;
    std::vector<CalibrationImage> disjoint{{a, Coil::Array, 0}, {b, Coil::Array, 1}};
    CHECK_THROWS_AS(fit(disjoint, FitConfig{}), NumericalError);
    FitConfig bad;
    bad.iterations = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    CHECK(sigma_mode_from_string("ml-update") == SigmaMode::MlUpdate);
    CHECK_THROWS_AS(sigma_mode_from_string("x"), ConfigError);
}
