#pragma once

#include <memory>
#include <span>
#include <vector>

#include <Eigen/Core>
#include <Eigen/SparseCore>

#include "vfamc/volume.hpp"

namespace vfamc {

// Discrete bending energy on a regular grid with replicate (Neumann) borders.
//
//   z^T L z = V * ( sum_a |D_aa z|^2 + 2 * sum_{a<b} |C_a C_b z|^2 )
//
// D_aa is the (1, -2, 1)/h_a^2 second difference, C_a the (-1, 0, 1)/(2 h_a)
// central difference, V the voxel volume. L is assembled once as the sum of
// D^T D products, so it is symmetric positive semi-definite by construction
// and annihilates constants.
class BendingOperator {
public:
    BendingOperator() = default;
    BendingOperator(const Dims& dims, const Vec3& spacing_mm);
    static BendingOperator for_grid(const Grid& grid);

    const Dims& dims() const { return dims_; }
    const Vec3& spacing() const { return spacing_; }
    std::size_t size() const;
    double voxel_volume() const { return spacing_.prod(); }

    void apply(std::span<const double> z, std::span<double> out) const;
    Volume apply(const Volume& z) const;

    // 1/2 z^T L z
    double energy(std::span<const double> z) const;
    double energy(const Volume& z) const;

    std::vector<double> diagonal() const;
    // Dense L; only for small grids (at most 4096 voxels).
    Eigen::MatrixXd dense() const;
    const Eigen::SparseMatrix<double, Eigen::RowMajor>& sparse() const { return *matrix_; }

private:
    struct Tap {
        int dx, dy, dz;
        double coef;
    };
    struct Term {
        std::vector<Tap> taps;
        double weight;
    };

    void check(const Volume& z) const;
    template <typename F>
    void for_each_row(const Term& term, F&& f) const;

    Dims dims_{1, 1, 1};
    Vec3 spacing_ = Vec3::Ones();
    std::vector<Term> terms_;
    // Shared between operators on the same grid shape.
    std::shared_ptr<const Eigen::SparseMatrix<double, Eigen::RowMajor>> matrix_;
};

}  // namespace vfamc
