#include "vfamc/solver.hpp"

#include <algorithm>
#include <deque>
#include <mutex>
#include <cmath>
#include <memory>
#include <random>
#include <sstream>

#include <Eigen/Cholesky>
#include <Eigen/SparseCore>

#include "vfamc/error.hpp"

namespace vfamc {

namespace {

constexpr double kJacobiWeight = 2.0 / 3.0;
constexpr int kPreSmooth = 2;
constexpr int kPostSmooth = 2;
constexpr int kCoarsestAxis = 4;
constexpr int kStallWindow = 3;
constexpr double kStallFactor = 0.9;
constexpr double kMonotoneSlack = 1e-12;
constexpr int kMgCgIterations = 200;
constexpr double kSafeSpectrum = 1.5;
constexpr int kPowerIterations = 40;

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

using SparseRow = Eigen::SparseMatrix<double, Eigen::RowMajor>;

// One level of the multigrid hierarchy: A_c = R A P below the finest level.
struct Level {
    SparseRow a;
    Eigen::VectorXd diag;
    SparseRow prolong, restrict;  // to / from the next level
    std::unique_ptr<Level> next;
    Eigen::LDLT<Eigen::MatrixXd> dense;  // coarsest only
    bool coarsest = false;
    double omega = kJacobiWeight;
};

// Cell-centred linear interpolation from nc to nf samples: 3/4 nearest, 1/4 next.
SparseRow prolong_1d(int nf, int nc) {
    std::vector<Eigen::Triplet<double>> t;
    for (int i = 0; i < nf; ++i) {
        const int c0 = i / 2;
        const int c1 = i % 2 == 0 ? std::max(c0 - 1, 0) : std::min(c0 + 1, nc - 1);
        t.emplace_back(i, c0, 0.75);
        t.emplace_back(i, c1, 0.25);
    }
    SparseRow m(nf, nc);
    m.setFromTriplets(t.begin(), t.end());
    return m;
}

SparseRow identity(int n) {
    SparseRow m(n, n);
    m.setIdentity();
    return m;
}

// a (x) b with b varying fastest.
SparseRow kron(const SparseRow& a, const SparseRow& b) {
    std::vector<Eigen::Triplet<double>> t;
    t.reserve(static_cast<std::size_t>(a.nonZeros() * b.nonZeros()));
    for (int i = 0; i < a.outerSize(); ++i)
        for (SparseRow::InnerIterator ia(a, i); ia; ++ia)
            for (int j = 0; j < b.outerSize(); ++j)
                for (SparseRow::InnerIterator ib(b, j); ib; ++ib)
                    t.emplace_back(static_cast<int>(ia.row() * b.rows() + ib.row()),
                                   static_cast<int>(ia.col() * b.cols() + ib.col()), ia.value() * ib.value());
    SparseRow m(a.rows() * b.rows(), a.cols() * b.cols());
    m.setFromTriplets(t.begin(), t.end());
    return m;
}

// Transfers and Galerkin bending operators depend only on the grid shape.
struct GridLevels {
    std::vector<SparseRow> prolong, restrict;  // level l -> l + 1
    std::vector<SparseRow> bending;            // R...R L P...P at each level
};

std::shared_ptr<const GridLevels> build_grid_levels(const BendingOperator& op) {
    auto g = std::make_shared<GridLevels>();
    g->bending.push_back(op.sparse());
    Dims d = op.dims();
    while (true) {
        SparseRow axis[3];
        Dims cd = d;
        int halved = 0;
        for (int i = 0; i < 3; ++i) {
            if (d[i] > kCoarsestAxis) {
                cd[i] = (d[i] + 1) / 2;
                axis[i] = prolong_1d(d[i], cd[i]);
                ++halved;
            } else {
                axis[i] = identity(d[i]);
            }
        }
        if (halved == 0) break;
        SparseRow p = kron(axis[2], kron(axis[1], axis[0]));
        SparseRow r = SparseRow(p.transpose()) * (1.0 / static_cast<double>(1 << halved));
        SparseRow coarse = r * g->bending.back() * p;
        g->prolong.push_back(std::move(p));
        g->restrict.push_back(std::move(r));
        g->bending.push_back(std::move(coarse));
        d = cd;
    }
    return g;
}

std::shared_ptr<const GridLevels> grid_levels(const BendingOperator& op) {
    struct Entry {
        Dims dims;
        Vec3 spacing;
        std::shared_ptr<const GridLevels> levels;
    };
    static std::mutex mutex;
    static std::deque<Entry> cache;
    {
        std::lock_guard<std::mutex> lock(mutex);
        for (const auto& e : cache)
            if (e.dims == op.dims() && e.spacing == op.spacing()) return e.levels;
    }
    auto g = build_grid_levels(op);
    std::lock_guard<std::mutex> lock(mutex);
    cache.push_front({op.dims(), op.spacing(), g});
    if (cache.size() > 8) cache.pop_back();
    return g;
}

// A_0 = D + lambda L and A_{l+1} = R_l A_l P_l, the diagonal's image carried
// separately from the cached bending part.
std::unique_ptr<Level> build_hierarchy(const DiagPlusBending& op) {
    const auto grid = grid_levels(op.bending);
    const auto n = static_cast<Eigen::Index>(op.size());
    SparseRow d(n, n);
    d.reserve(Eigen::VectorXi::Constant(n, 1));
    for (Eigen::Index i = 0; i < n; ++i) d.insert(i, i) = op.diag[static_cast<std::size_t>(i)];
    d.makeCompressed();

    std::unique_ptr<Level> root;
    Level* prev = nullptr;
    for (std::size_t l = 0; l < grid->bending.size(); ++l) {
        if (l > 0) d = grid->restrict[l - 1] * d * grid->prolong[l - 1];
        auto level = std::make_unique<Level>();
        level->a = d + op.lambda * grid->bending[l];
        level->diag = level->a.diagonal();
        if (l + 1 == grid->bending.size()) {
            level->coarsest = true;
            level->dense.compute(Eigen::MatrixXd(level->a));
            if (level->dense.info() != Eigen::Success)
                throw NumericalError("multigrid: coarsest-level factorisation failed");
        } else {
            level->prolong = grid->prolong[l];
            level->restrict = grid->restrict[l];
        }
        Level* raw = level.get();
        if (prev) prev->next = std::move(level);
        else root = std::move(level);
        prev = raw;
    }
    return root;
}

void residual(const DiagPlusBending& op, std::span<const double> x, std::span<const double> rhs,
              std::vector<double>& r) {
    r.resize(x.size());
    op.apply(x, r);
    for (std::size_t i = 0; i < r.size(); ++i) r[i] = rhs[i] - r[i];
}

void vcycle(const Level& level, Eigen::VectorXd& x, const Eigen::VectorXd& rhs) {
    if (level.coarsest) {
        x = level.dense.solve(rhs);
        return;
    }
    auto smooth = [&](int sweeps) {
        for (int s = 0; s < sweeps; ++s) x += level.omega * (rhs - level.a * x).cwiseQuotient(level.diag);
    };
    smooth(kPreSmooth);
    const Eigen::VectorXd rc = level.restrict * (rhs - level.a * x);
    Eigen::VectorXd ec = Eigen::VectorXd::Zero(rc.size());
    vcycle(*level.next, ec, rc);
    x += level.prolong * ec;
    smooth(kPostSmooth);
}

// Lowers each smoother weight to kSafeSpectrum / rho(D^-1 A) where 2/3 would
// amplify the top of the spectrum, which makes the V-cycle positive definite.
// rho comes from power iteration on a fixed start vector.
void stabilise(Level& top) {
    for (Level* level = &top; level && !level->coarsest; level = level->next.get()) {
        std::mt19937_64 rng(level->a.rows());
        std::uniform_real_distribution<double> u(-1.0, 1.0);
        Eigen::VectorXd v(level->a.rows());
        for (auto& e : v) e = u(rng);
        double rho = 0.0;
        for (int it = 0; it < kPowerIterations; ++it) {
            const Eigen::VectorXd w = (level->a * v).cwiseQuotient(level->diag);
            rho = w.norm() / v.norm();
            v = w / w.norm();
        }
        level->omega = std::min(kJacobiWeight, kSafeSpectrum / rho);
    }
}

// CG preconditioned by one V-cycle, continuing from x. Returns false on
// breakdown so the caller can drop to Jacobi.
bool mg_pcg(const Level& top, std::span<const double> rhs, std::vector<double>& x, double target, int max_iter,
            int& iterations) {
    const auto n = static_cast<Eigen::Index>(x.size());
    Eigen::Map<Eigen::VectorXd> xv(x.data(), n);
    Eigen::VectorXd r = Eigen::Map<const Eigen::VectorXd>(rhs.data(), n) - top.a * xv;
    if (r.norm() <= target) return true;
    Eigen::VectorXd z = Eigen::VectorXd::Zero(n);
    vcycle(top, z, r);
    Eigen::VectorXd p = z, q(n);
    double rz = r.dot(z);
    for (int it = 1; it <= max_iter; ++it) {
        iterations = it;
        if (!(rz > 0.0) || !std::isfinite(rz)) return false;
        q.noalias() = top.a * p;
        const double pq = p.dot(q);
        if (!(pq > 0.0)) return false;
        const double alpha = rz / pq;
        xv += alpha * p;
        r -= alpha * q;
        if (r.norm() <= target) return true;
        z.setZero();
        vcycle(top, z, r);
        const double rz_new = r.dot(z);
        p = z + (rz_new / rz) * p;
        rz = rz_new;
    }
    return false;
}

// Jacobi-preconditioned conjugate gradient continuing from x.
bool pcg(const DiagPlusBending& op, const Eigen::VectorXd& full_diag, std::span<const double> rhs,
         std::vector<double>& x, double target, int max_iter, int& iterations) {
    const std::size_t n = x.size();
    std::vector<double> r, z(n), p(n), q(n);
    residual(op, x, rhs, r);
    if (norm2(r) <= target) return true;
    for (std::size_t i = 0; i < n; ++i) z[i] = r[i] / full_diag[i];
    p = z;
    double rz = dot(r, z);
    for (int it = 1; it <= max_iter; ++it) {
        iterations = it;
        op.apply(p, q);
        const double pq = dot(p, q);
        if (!(pq > 0.0)) return false;
        const double alpha = rz / pq;
        for (std::size_t i = 0; i < n; ++i) {
            x[i] += alpha * p[i];
            r[i] -= alpha * q[i];
        }
        if (norm2(r) <= target) {
            // Confirm with the true residual to guard against drift.
            std::vector<double> rt;
            residual(op, x, rhs, rt);
            if (norm2(rt) <= target) return true;
            r = rt;
        }
        for (std::size_t i = 0; i < n; ++i) z[i] = r[i] / full_diag[i];
        const double rz_new = dot(r, z);
        const double beta = rz_new / rz;
        rz = rz_new;
        for (std::size_t i = 0; i < n; ++i) p[i] = z[i] + beta * p[i];
    }
    return false;
}

}  // namespace

DiagPlusBending::DiagPlusBending(std::vector<double> d, double lam, BendingOperator op)
    : diag(std::move(d)), lambda(lam), bending(std::move(op)) {}

void DiagPlusBending::apply(std::span<const double> x, std::span<double> out) const {
    if (x.size() != size() || out.size() != size()) throw GeometryError("solver: vector length does not match the grid");
    if (lambda != 0.0) {
        // assembled matvec: several times faster than the stencil sweep in the inner loops
        const auto n = static_cast<Eigen::Index>(x.size());
        Eigen::Map<Eigen::VectorXd>(out.data(), n).noalias() =
            bending.sparse() * Eigen::Map<const Eigen::VectorXd>(x.data(), n);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = diag[i] * x[i] + lambda * out[i];
    } else {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = diag[i] * x[i];
    }
}

std::vector<double> DiagPlusBending::diagonal() const {
    std::vector<double> d = bending.diagonal();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = diag[i] + lambda * d[i];
    return d;
}

Eigen::MatrixXd DiagPlusBending::dense() const {
    Eigen::MatrixXd m = lambda * bending.dense();
    for (std::size_t i = 0; i < diag.size(); ++i) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)) += diag[i];
    return m;
}

void DiagPlusBending::validate() const {
    if (diag.size() != bending.size()) throw GeometryError("solver: diagonal length does not match the grid");
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("solver: lambda must be finite and >= 0");
    bool positive = false;
    for (double d : diag) {
        if (!(d >= 0.0) || !std::isfinite(d)) throw NumericalError("solver: diagonal must be finite and >= 0");
        positive = positive || d > 0.0;
    }
    if (!positive) throw NumericalError("solver: diagonal is zero everywhere (singular system)");
}

std::vector<double> solve(const DiagPlusBending& op, std::span<const double> rhs, double rtol, int max_cycles,
                          SolveStats* stats) {
    op.validate();
    if (rhs.size() != op.size()) throw GeometryError("solver: rhs length does not match the operator");
    if (!(rtol > 0.0 && rtol < 1.0)) throw ConfigError("solver: rtol must lie in (0, 1)");
    SolveStats local;
    SolveStats& st = stats ? *stats : local;
    st = SolveStats{};

    const std::size_t n = op.size();
    std::vector<double> x(n, 0.0);
    const double b_norm = norm2(rhs);
    st.residual_history.push_back(b_norm);
    if (b_norm == 0.0) return x;

    if (op.lambda == 0.0) {
        for (std::size_t i = 0; i < n; ++i) {
            if (!(op.diag[i] > 0.0)) throw NumericalError("solver: diagonal system has a zero entry");
            x[i] = rhs[i] / op.diag[i];
        }
        st.residual_history.push_back(0.0);
        return x;
    }

    const double target = rtol * b_norm;
    const auto hierarchy = build_hierarchy(op);
    const Eigen::VectorXd b = Eigen::Map<const Eigen::VectorXd>(rhs.data(), static_cast<Eigen::Index>(n));
    std::vector<double> r;
    bool converged = false;
    for (int cycle = 1; cycle <= max_cycles; ++cycle) {
        Eigen::VectorXd xv = Eigen::Map<const Eigen::VectorXd>(x.data(), static_cast<Eigen::Index>(n));
        vcycle(*hierarchy, xv, b);
        std::vector<double> trial(xv.data(), xv.data() + n);
        residual(op, trial, rhs, r);
        const double rn = norm2(r);
        if (!std::isfinite(rn) || rn > st.residual_history.back() + kMonotoneSlack) break;
        x = std::move(trial);
        st.cycles = cycle;
        st.residual_history.push_back(rn);
        if (rn <= target) {
            converged = true;
            break;
        }
        const std::size_t h = st.residual_history.size();
        if (h > kStallWindow && rn > kStallFactor * st.residual_history[h - 1 - kStallWindow]) break;
    }

    if (!converged) {
        st.used_fallback = true;
        std::vector<double> x_mg = x;
        int mg_iter = 0;
        stabilise(*hierarchy);
        if (mg_pcg(*hierarchy, rhs, x_mg, target, kMgCgIterations, mg_iter)) {
            residual(op, x_mg, rhs, r);
            converged = norm2(r) <= target;
        }
        st.cg_iterations = mg_iter;
        if (converged) {
            st.multigrid_cg = true;
            x = std::move(x_mg);
        } else {
            const int max_iter = static_cast<int>(std::max<std::size_t>(2000, 20 * n));
            int jacobi_iter = 0;
            converged = pcg(op, hierarchy->diag, rhs, x, target, max_iter, jacobi_iter);
            st.cg_iterations += jacobi_iter;
        }
    }
    residual(op, x, rhs, r);
    st.relative_residual = norm2(r) / b_norm;
    if (!converged) {
        std::ostringstream msg;
        msg << "solver did not converge: relative residual " << st.relative_residual << " after " << st.cycles
            << " V-cycles and " << st.cg_iterations << " CG iterations (rtol " << rtol << ")";
        throw NumericalError(msg.str());
    }
    return x;
}

Volume solve(const DiagPlusBending& op, const Volume& rhs, double rtol, int max_cycles, SolveStats* stats) {
    if (rhs.grid().dims != op.bending.dims()) throw GeometryError("solver: rhs grid does not match the operator");
    std::vector<double> x = solve(op, rhs.data(), rtol, max_cycles, stats);
    return Volume(rhs.grid(), std::move(x));
}

}  // namespace vfamc
