#pragma once

#include <span>
#include <vector>

#include <Eigen/Core>

#include "vfamc/regularizer.hpp"

namespace vfamc {

// P = diag(d) + lambda * L, the structure of the Gauss-Newton preconditioner.
struct DiagPlusBending {
    std::vector<double> diag;
    double lambda = 0.0;
    BendingOperator bending;

    DiagPlusBending() = default;
    DiagPlusBending(std::vector<double> diag, double lambda, BendingOperator bending);

    std::size_t size() const { return diag.size(); }
    void apply(std::span<const double> x, std::span<double> out) const;
    // Diagonal of the full operator.
    std::vector<double> diagonal() const;
    Eigen::MatrixXd dense() const;
    // diag >= 0 and finite, strictly positive somewhere, lambda >= 0.
    void validate() const;
};

struct SolveStats {
    int cycles = 0;
    int cg_iterations = 0;
    bool used_fallback = false;
    // the fallback converged with V-cycle preconditioned CG, Jacobi CG not needed
    bool multigrid_cg = false;
    double relative_residual = 0.0;
    // Residual 2-norm before the first and after each accepted V-cycle.
    std::vector<double> residual_history;
};

// Solves op * x = rhs to ||op x - rhs|| <= rtol ||rhs||.
//
// V-cycles: damped Jacobi (2/3, 2 pre + 2 post), full-weighting restriction,
// trilinear prolongation, Galerkin coarse operators R A P, dense solve once
// every axis has at most 4 samples. Falls back to CG if a cycle raises the
// residual or three cycles reduce it by less than 10%: first preconditioned by
// one V-cycle, then by Jacobi if that breaks down. Throws NumericalError when
// nothing reaches the tolerance.
std::vector<double> solve(const DiagPlusBending& op, std::span<const double> rhs, double rtol, int max_cycles,
                          SolveStats* stats = nullptr);

Volume solve(const DiagPlusBending& op, const Volume& rhs, double rtol, int max_cycles, SolveStats* stats = nullptr);

}  // namespace vfamc
