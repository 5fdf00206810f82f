#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

namespace vfamc {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;
using Dims = std::array<int, 3>;

// Sampling geometry of a volume: voxel counts and the voxel-index -> world (mm)
// affine. Voxel sizes are the column norms of the affine's linear part.
struct Grid {
    Dims dims{1, 1, 1};
    Mat4 affine = Mat4::Identity();

    // Axis-aligned grid whose world origin sits at the centre of the field of view.
    static Grid centered(const Dims& dims, const Vec3& voxel_size_mm);

    std::size_t size() const {
        return static_cast<std::size_t>(dims[0]) * static_cast<std::size_t>(dims[1]) *
               static_cast<std::size_t>(dims[2]);
    }
    std::size_t index(int i, int j, int k) const {
        return static_cast<std::size_t>(i) +
               static_cast<std::size_t>(dims[0]) *
                   (static_cast<std::size_t>(j) + static_cast<std::size_t>(dims[1]) * static_cast<std::size_t>(k));
    }

    Vec3 voxel_size() const;
    double voxel_volume() const;
    Vec3 to_world(const Vec3& ijk) const;
    Vec3 to_index(const Vec3& world) const;
    // World coordinate of the field-of-view centre.
    Vec3 centre() const;

    // Throws GeometryError for non-positive dims or a degenerate affine.
    void validate() const;
    bool matches(const Grid& other, double tol = 1e-6) const;
};

// A 3D scalar image on a Grid, x-fastest storage. NaN marks invalid voxels.
class Volume {
public:
    Volume() = default;
    explicit Volume(Grid grid, double fill = 0.0);
    Volume(Grid grid, std::vector<double> data);

    const Grid& grid() const { return grid_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    std::span<const double> data() const { return data_; }
    std::span<double> data() { return data_; }
    const std::vector<double>& values() const { return data_; }

    double operator[](std::size_t n) const { return data_[n]; }
    double& operator[](std::size_t n) { return data_[n]; }
    double at(int i, int j, int k) const { return data_[grid_.index(i, j, k)]; }
    double& at(int i, int j, int k) { return data_[grid_.index(i, j, k)]; }

    std::string intent;

private:
    Grid grid_;
    std::vector<double> data_;
};

// Throws GeometryError naming `what` when the two volumes do not share a grid.
void require_same_grid(const Volume& a, const Volume& b, std::string_view what);

struct RigidTransform {
    Mat3 rotation = Mat3::Identity();
    Vec3 translation_mm = Vec3::Zero();

    static RigidTransform identity() { return {}; }
    // Intrinsic Z-Y'-X'' rotation (R = Rz * Ry * Rx), angles in degrees.
    static RigidTransform from_euler_zyx_deg(const Vec3& angles_xyz_deg, const Vec3& translation_mm);

    Vec3 apply(const Vec3& p) const { return rotation * p + translation_mm; }
    RigidTransform inverse() const;
    // (*this) after (first): p -> this(first(p)).
    RigidTransform compose(const RigidTransform& first) const;
    Mat4 matrix() const;
    bool is_identity(double tol = 0.0) const;
    // Euler angles (deg) about x, y, z for R = Rz * Ry * Rx.
    Vec3 euler_zyx_deg() const;

    void validate() const;
};

// Trilinear resampling of `src` onto `target`. The transform maps target world
// coordinates to source world coordinates. Points outside the source sampling
// hull become NaN, as does any interpolation touching a NaN neighbour.
Volume reslice(const Volume& src, const RigidTransform& transform, const Grid& target);

// Sampled, unit-sum Gaussian truncated at +-ceil(4 sigma). Empty sigma -> {1}.
std::vector<double> gaussian_kernel(double sigma_vox);

// Separable Gaussian smoothing with mirror (half-sample symmetric) boundaries.
// NaN voxels are excluded by normalised convolution and remain NaN.
Volume gaussian_smooth(const Volume& v, double fwhm_mm);

double fwhm_to_sigma(double fwhm);

// Mean-space geometry for a set of aligned grids: log-Euclidean mean rotation,
// grid centred on the mean field-of-view centre, extent covering all inputs.
Grid barycentre_grid(std::span<const Grid> grids);
Grid barycentre_grid(std::span<const Volume> volumes);

}  // namespace vfamc
