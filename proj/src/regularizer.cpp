#include "vfamc/regularizer.hpp"

#include <algorithm>
#include <array>
#include <deque>
#include <mutex>

#include "vfamc/error.hpp"

namespace vfamc {

namespace {

constexpr std::size_t kMaxDenseVoxels = 4096;

inline int clamp_index(int i, int n) { return i < 0 ? 0 : (i >= n ? n - 1 : i); }

using SparseRow = Eigen::SparseMatrix<double, Eigen::RowMajor>;

// Assembly dominates small solves, and fits rebuild operators on one grid
// many times, so the last few matrices are kept.
template <typename Build>
std::shared_ptr<const SparseRow> cached_matrix(const Dims& dims, const Vec3& spacing, Build&& build) {
    struct Entry {
        Dims dims;
        Vec3 spacing;
        std::shared_ptr<const SparseRow> matrix;
    };
    constexpr std::size_t kEntries = 8;
    static std::mutex mutex;
    static std::deque<Entry> entries;
    {
        std::lock_guard<std::mutex> lock(mutex);
        for (const auto& e : entries)
            if (e.dims == dims && e.spacing == spacing) return e.matrix;
    }
    std::shared_ptr<const SparseRow> m = build();
    std::lock_guard<std::mutex> lock(mutex);
    entries.push_front({dims, spacing, m});
    if (entries.size() > kEntries) entries.pop_back();
    return m;
}

}  // namespace

BendingOperator::BendingOperator(const Dims& dims, const Vec3& spacing_mm) : dims_(dims), spacing_(spacing_mm) {
    for (int a = 0; a < 3; ++a) {
        if (dims_[a] < 1) throw GeometryError("bending operator: dims must be positive");
        if (!(spacing_[a] > 0.0)) throw GeometryError("bending operator: spacing must be positive");
    }
    const double vol = voxel_volume();
    auto unit = [](int a, int s) {
        std::array<int, 3> o{0, 0, 0};
        o[a] = s;
        return o;
    };
    for (int a = 0; a < 3; ++a) {
        if (dims_[a] < 2) continue;
        const double h2 = spacing_[a] * spacing_[a];
        Term t{{}, vol};
        for (int s : {-1, 0, 1}) {
            const auto o = unit(a, s);
            t.taps.push_back({o[0], o[1], o[2], (s == 0 ? -2.0 : 1.0) / h2});
        }
        terms_.push_back(std::move(t));
    }
    for (int a = 0; a < 3; ++a) {
        for (int b = a + 1; b < 3; ++b) {
            if (dims_[a] < 2 || dims_[b] < 2) continue;
            const double c = 1.0 / (4.0 * spacing_[a] * spacing_[b]);
            Term t{{}, 2.0 * vol};
            for (int sa : {-1, 1}) {
                for (int sb : {-1, 1}) {
                    std::array<int, 3> o{0, 0, 0};
                    o[a] = sa;
                    o[b] = sb;
                    t.taps.push_back({o[0], o[1], o[2], sa * sb * c});
                }
            }
            terms_.push_back(std::move(t));
        }
    }

    matrix_ = cached_matrix(dims_, spacing_, [this] {
        std::vector<Eigen::Triplet<double>> triplets;
        for (const Term& term : terms_) {
            for_each_row(term, [&](std::size_t, const auto& cols, const auto& coefs, int count) {
                for (int p = 0; p < count; ++p)
                    for (int q = 0; q < count; ++q)
                        triplets.emplace_back(static_cast<int>(cols[p]), static_cast<int>(cols[q]),
                                              term.weight * coefs[p] * coefs[q]);
            });
        }
        const auto n = static_cast<Eigen::Index>(size());
        auto m = std::make_shared<SparseRow>(n, n);
        m->setFromTriplets(triplets.begin(), triplets.end());
        return m;
    });
}

BendingOperator BendingOperator::for_grid(const Grid& grid) {
    grid.validate();
    return BendingOperator(grid.dims, grid.voxel_size());
}

std::size_t BendingOperator::size() const {
    return static_cast<std::size_t>(dims_[0]) * dims_[1] * dims_[2];
}

void BendingOperator::check(const Volume& z) const {
    const Vec3 vs = z.grid().voxel_size();
    if (z.grid().dims != dims_ || (vs - spacing_).cwiseAbs().maxCoeff() > 1e-9 * spacing_.maxCoeff())
        throw GeometryError("bending operator: volume grid does not match the operator");
}

// Calls f(row, cols, coefs, count) with taps merged where clamping makes them coincide.
template <typename F>
void BendingOperator::for_each_row(const Term& term, F&& f) const {
    const int nx = dims_[0], ny = dims_[1], nz = dims_[2];
    std::array<std::size_t, 8> cols{};
    std::array<double, 8> coefs{};
    std::size_t row = 0;
    for (int k = 0; k < nz; ++k) {
        for (int j = 0; j < ny; ++j) {
            for (int i = 0; i < nx; ++i, ++row) {
                int count = 0;
                for (const Tap& t : term.taps) {
                    const std::size_t col = static_cast<std::size_t>(clamp_index(i + t.dx, nx)) +
                                            static_cast<std::size_t>(nx) *
                                                (static_cast<std::size_t>(clamp_index(j + t.dy, ny)) +
                                                 static_cast<std::size_t>(ny) * clamp_index(k + t.dz, nz));
                    int m = 0;
                    while (m < count && cols[m] != col) ++m;
                    if (m == count) {
                        cols[count] = col;
                        coefs[count] = 0.0;
                        ++count;
                    }
                    coefs[m] += t.coef;
                }
                f(row, cols, coefs, count);
            }
        }
    }
}

void BendingOperator::apply(std::span<const double> z, std::span<double> out) const {
    if (z.size() != size() || out.size() != size()) throw GeometryError("bending operator: size mismatch");
    std::fill(out.begin(), out.end(), 0.0);
    // Sum of D^T (w D z) over terms; each difference of a constant cancels exactly.
    for (const Term& term : terms_) {
        for_each_row(term, [&](std::size_t, const auto& cols, const auto& coefs, int count) {
            double d = 0.0;
            for (int p = 0; p < count; ++p) d += coefs[p] * z[cols[p]];
            if (d == 0.0) return;
            d *= term.weight;
            for (int p = 0; p < count; ++p) out[cols[p]] += coefs[p] * d;
        });
    }
}

Volume BendingOperator::apply(const Volume& z) const {
    check(z);
    Volume out(z.grid(), 0.0);
    apply(z.data(), out.data());
    return out;
}

double BendingOperator::energy(std::span<const double> z) const {
    if (z.size() != size()) throw GeometryError("bending operator: size mismatch");
    double e = 0.0;
    for (const Term& term : terms_) {
        double acc = 0.0;
        for_each_row(term, [&](std::size_t, const auto& cols, const auto& coefs, int count) {
            double d = 0.0;
            for (int p = 0; p < count; ++p) d += coefs[p] * z[cols[p]];
            acc += d * d;
        });
        e += term.weight * acc;
    }
    return 0.5 * e;
}

double BendingOperator::energy(const Volume& z) const {
    check(z);
    return energy(z.data());
}

std::vector<double> BendingOperator::diagonal() const {
    std::vector<double> diag(size(), 0.0);
    const Eigen::VectorXd d = matrix_->diagonal();
    for (std::size_t i = 0; i < diag.size(); ++i) diag[i] = d[static_cast<Eigen::Index>(i)];
    return diag;
}

Eigen::MatrixXd BendingOperator::dense() const {
    if (size() > kMaxDenseVoxels) throw GeometryError("bending operator: grid too large for dense assembly");
    return Eigen::MatrixXd(*matrix_);
}

}  // namespace vfamc
