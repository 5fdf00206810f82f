#include "vfamc/volume.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include <Eigen/Geometry>
#include <Eigen/LU>
#include <Eigen/SVD>

#include "vfamc/error.hpp"
#include "vfamc/parallel.hpp"

namespace vfamc {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// Fractions closer than this to a sample are snapped onto it, so that grid
// compositions that are integral up to rounding reproduce samples exactly.
constexpr double kSnap = 1e-10;
// Tolerance (in voxels) for points just outside the sampling hull.
constexpr double kHullTol = 1e-6;

Mat3 linear_part(const Mat4& a) { return a.topLeftCorner<3, 3>(); }

}  // namespace

Grid Grid::centered(const Dims& dims, const Vec3& voxel_size_mm) {
    Grid g;
    g.dims = dims;
    g.affine = Mat4::Identity();
    for (int a = 0; a < 3; ++a) {
        g.affine(a, a) = voxel_size_mm[a];
        g.affine(a, 3) = -0.5 * (dims[a] - 1) * voxel_size_mm[a];
    }
    return g;
}

Vec3 Grid::voxel_size() const { return linear_part(affine).colwise().norm().transpose(); }

double Grid::voxel_volume() const { return std::abs(linear_part(affine).determinant()); }

Vec3 Grid::to_world(const Vec3& ijk) const { return linear_part(affine) * ijk + affine.block<3, 1>(0, 3); }

Vec3 Grid::to_index(const Vec3& world) const {
    return linear_part(affine).inverse() * (world - affine.block<3, 1>(0, 3));
}

Vec3 Grid::centre() const {
    return to_world(Vec3(0.5 * (dims[0] - 1), 0.5 * (dims[1] - 1), 0.5 * (dims[2] - 1)));
}

void Grid::validate() const {
    for (int a = 0; a < 3; ++a) {
        if (dims[a] < 1) throw GeometryError("grid dimensions must be positive");
    }
    if (!affine.allFinite()) throw GeometryError("grid affine has non-finite entries");
    const double det = linear_part(affine).determinant();
    if (!(std::abs(det) > 0.0)) throw GeometryError("grid affine is singular");
    if (affine(3, 0) != 0.0 || affine(3, 1) != 0.0 || affine(3, 2) != 0.0 || affine(3, 3) != 1.0)
        throw GeometryError("grid affine last row must be [0 0 0 1]");
}

bool Grid::matches(const Grid& other, double tol) const {
    if (dims != other.dims) return false;
    return (affine - other.affine).cwiseAbs().maxCoeff() <= tol * std::max(1.0, affine.cwiseAbs().maxCoeff());
}

Volume::Volume(Grid grid, double fill) : grid_(std::move(grid)) {
    grid_.validate();
    data_.assign(grid_.size(), fill);
}

Volume::Volume(Grid grid, std::vector<double> data) : grid_(std::move(grid)), data_(std::move(data)) {
    grid_.validate();
    if (data_.size() != grid_.size()) {
        std::ostringstream msg;
        msg << "volume data length " << data_.size() << " does not match grid size " << grid_.size();
        throw GeometryError(msg.str());
    }
}

void require_same_grid(const Volume& a, const Volume& b, std::string_view what) {
    if (!a.grid().matches(b.grid())) throw GeometryError("grid mismatch: " + std::string(what));
}

// ---------------------------------------------------------------------------
// Rigid transforms

RigidTransform RigidTransform::from_euler_zyx_deg(const Vec3& angles_xyz_deg, const Vec3& translation_mm) {
    const Vec3 rad = angles_xyz_deg * (M_PI / 180.0);
    RigidTransform t;
    t.rotation = (Eigen::AngleAxisd(rad[2], Vec3::UnitZ()) * Eigen::AngleAxisd(rad[1], Vec3::UnitY()) *
                  Eigen::AngleAxisd(rad[0], Vec3::UnitX()))
                     .toRotationMatrix();
    t.translation_mm = translation_mm;
    return t;
}

RigidTransform RigidTransform::inverse() const {
    RigidTransform t;
    t.rotation = rotation.transpose();
    t.translation_mm = -(t.rotation * translation_mm);
    return t;
}

RigidTransform RigidTransform::compose(const RigidTransform& first) const {
    RigidTransform t;
    t.rotation = rotation * first.rotation;
    t.translation_mm = rotation * first.translation_mm + translation_mm;
    return t;
}

Mat4 RigidTransform::matrix() const {
    Mat4 m = Mat4::Identity();
    m.topLeftCorner<3, 3>() = rotation;
    m.block<3, 1>(0, 3) = translation_mm;
    return m;
}

bool RigidTransform::is_identity(double tol) const {
    return (rotation - Mat3::Identity()).cwiseAbs().maxCoeff() <= tol && translation_mm.cwiseAbs().maxCoeff() <= tol;
}

Vec3 RigidTransform::euler_zyx_deg() const {
    const Mat3& r = rotation;
    const double sy = std::clamp(-r(2, 0), -1.0, 1.0);
    const double ry = std::asin(sy);
    double rx = 0.0;
    double rz = 0.0;
    if (std::abs(sy) < 1.0 - 1e-12) {
        rx = std::atan2(r(2, 1), r(2, 2));
        rz = std::atan2(r(1, 0), r(0, 0));
    } else {
        // Gimbal lock: fold the x rotation into z.
        rz = std::atan2(-r(0, 1), r(1, 1));
    }
    return Vec3(rx, ry, rz) * (180.0 / M_PI);
}

void RigidTransform::validate() const {
    if (!rotation.allFinite() || !translation_mm.allFinite()) throw GeometryError("transform has non-finite entries");
    const double ortho = (rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff();
    if (!(ortho < 1e-9) || !(rotation.determinant() > 0.0))
        throw GeometryError("transform rotation is not a proper rotation");
}

// ---------------------------------------------------------------------------
// Reslicing

namespace {

struct AxisSample {
    int i0 = 0;
    int i1 = 0;
    double w1 = 0.0;  // weight of i1; i0 gets 1 - w1
};

bool locate(double p, int n, AxisSample& s) {
    if (n == 1) {
        if (std::abs(p) > kHullTol) return false;
        s = {0, 0, 0.0};
        return true;
    }
    if (p < -kHullTol || p > (n - 1) + kHullTol) return false;
    p = std::clamp(p, 0.0, static_cast<double>(n - 1));
    int i0 = static_cast<int>(std::floor(p));
    double f = p - i0;
    if (f < kSnap) {
        f = 0.0;
    } else if (f > 1.0 - kSnap) {
        f = 0.0;
        i0 += 1;
    }
    if (i0 >= n - 1) {
        s = {n - 1, n - 1, 0.0};
        return true;
    }
    s = {i0, i0 + 1, f};
    return true;
}

}  // namespace

Volume reslice(const Volume& src, const RigidTransform& transform, const Grid& target) {
    src.grid().validate();
    target.validate();
    transform.validate();

    if (transform.is_identity() && src.grid().matches(target, 0.0)) {
        Volume out(target, std::vector<double>(src.values()));
        out.intent = src.intent;
        return out;
    }

    const Mat4 vox2vox = src.grid().affine.inverse() * transform.matrix() * target.affine;
    const Mat3 lin = vox2vox.topLeftCorner<3, 3>();
    const Vec3 off = vox2vox.block<3, 1>(0, 3);
    const Grid& sg = src.grid();
    const Dims sd = sg.dims;
    const auto& sv = src.values();

    Volume out(target, kNaN);
    out.intent = src.intent;
    auto od = out.data();
    const Dims td = target.dims;

    parallel_for(0, td[2], [&](std::int64_t k) {
        for (int j = 0; j < td[1]; ++j) {
            for (int i = 0; i < td[0]; ++i) {
                const Vec3 p = lin * Vec3(i, j, static_cast<double>(k)) + off;
                AxisSample ax, ay, az;
                if (!locate(p[0], sd[0], ax) || !locate(p[1], sd[1], ay) || !locate(p[2], sd[2], az)) continue;
                const int xs[2] = {ax.i0, ax.i1};
                const int ys[2] = {ay.i0, ay.i1};
                const int zs[2] = {az.i0, az.i1};
                const double wx[2] = {1.0 - ax.w1, ax.w1};
                const double wy[2] = {1.0 - ay.w1, ay.w1};
                const double wz[2] = {1.0 - az.w1, az.w1};
                double acc = 0.0;
                for (int c = 0; c < 2; ++c) {
                    if (wz[c] == 0.0) continue;
                    for (int b = 0; b < 2; ++b) {
                        if (wy[b] == 0.0) continue;
                        for (int a = 0; a < 2; ++a) {
                            if (wx[a] == 0.0) continue;
                            acc += wx[a] * wy[b] * wz[c] * sv[sg.index(xs[a], ys[b], zs[c])];
                        }
                    }
                }
                od[target.index(i, j, static_cast<int>(k))] = acc;
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Gaussian smoothing

double fwhm_to_sigma(double fwhm) { return fwhm / std::sqrt(8.0 * std::log(2.0)); }

std::vector<double> gaussian_kernel(double sigma_vox) {
    if (!(sigma_vox > 1e-6)) return {1.0};
    const int radius = static_cast<int>(std::ceil(4.0 * sigma_vox));
    std::vector<double> k(2 * radius + 1);
    double sum = 0.0;
    for (int t = -radius; t <= radius; ++t) {
        const double w = std::exp(-0.5 * (t * t) / (sigma_vox * sigma_vox));
        k[t + radius] = w;
        sum += w;
    }
    for (double& w : k) w /= sum;
    return k;
}

namespace {

// Half-sample symmetric reflection into [0, n).
int mirror(int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * n;
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - 1 - i;
}

void convolve_axis(std::vector<double>& data, const Dims& dims, int axis, const std::vector<double>& kernel) {
    if (kernel.size() == 1) return;
    const int radius = static_cast<int>(kernel.size() / 2);
    const int n = dims[axis];
    const std::size_t stride = axis == 0 ? 1 : (axis == 1 ? dims[0] : static_cast<std::size_t>(dims[0]) * dims[1]);
    const int o1 = axis == 0 ? 1 : 0;
    const int o2 = axis == 2 ? 1 : 2;
    const int n1 = dims[o1];
    const int n2 = dims[o2];
    const std::size_t s1 = o1 == 0 ? 1 : (o1 == 1 ? dims[0] : static_cast<std::size_t>(dims[0]) * dims[1]);
    const std::size_t s2 = o2 == 0 ? 1 : (o2 == 1 ? dims[0] : static_cast<std::size_t>(dims[0]) * dims[1]);

    parallel_for(0, n2, [&](std::int64_t b) {
        std::vector<double> line(n);
        for (int a = 0; a < n1; ++a) {
            const std::size_t base = a * s1 + static_cast<std::size_t>(b) * s2;
            for (int i = 0; i < n; ++i) line[i] = data[base + i * stride];
            for (int i = 0; i < n; ++i) {
                double acc = 0.0;
                for (int t = -radius; t <= radius; ++t) acc += kernel[t + radius] * line[mirror(i + t, n)];
                data[base + i * stride] = acc;
            }
        }
    });
}

}  // namespace

Volume gaussian_smooth(const Volume& v, double fwhm_mm) {
    if (!(fwhm_mm > 0.0)) throw ConfigError("gaussian_smooth: fwhm must be positive");
    v.grid().validate();
    const Vec3 vs = v.grid().voxel_size();
    const Dims dims = v.grid().dims;
    std::array<std::vector<double>, 3> kernels;
    for (int a = 0; a < 3; ++a) kernels[a] = gaussian_kernel(fwhm_to_sigma(fwhm_mm) / vs[a]);

    const auto& in = v.values();
    const bool has_nan = std::any_of(in.begin(), in.end(), [](double x) { return !std::isfinite(x); });

    std::vector<double> num(in.size());
    std::vector<double> den;
    if (has_nan) {
        den.resize(in.size());
        for (std::size_t n = 0; n < in.size(); ++n) {
            const bool ok = std::isfinite(in[n]);
            num[n] = ok ? in[n] : 0.0;
            den[n] = ok ? 1.0 : 0.0;
        }
    } else {
        num = in;
    }
    for (int a = 0; a < 3; ++a) {
        convolve_axis(num, dims, a, kernels[a]);
        if (has_nan) convolve_axis(den, dims, a, kernels[a]);
    }
    if (has_nan) {
        for (std::size_t n = 0; n < in.size(); ++n) num[n] = std::isfinite(in[n]) ? num[n] / den[n] : kNaN;
    }
    Volume out(v.grid(), std::move(num));
    out.intent = v.intent;
    return out;
}

// ---------------------------------------------------------------------------
// Barycentre

Grid barycentre_grid(std::span<const Grid> grids) {
    if (grids.empty()) throw GeometryError("barycentre_grid: no input grids");
    for (const auto& g : grids) g.validate();
    if (grids.size() == 1) return grids.front();

    Vec3 log_mean = Vec3::Zero();
    Vec3 centre = Vec3::Zero();
    Vec3 voxel = Vec3::Zero();
    for (const auto& g : grids) {
        const Mat3 lin = linear_part(g.affine);
        Eigen::JacobiSVD<Mat3> svd(lin, Eigen::ComputeFullU | Eigen::ComputeFullV);
        Mat3 rot = svd.matrixU() * svd.matrixV().transpose();
        if (rot.determinant() < 0.0) throw GeometryError("barycentre_grid: affines must be orientation-preserving");
        const Eigen::AngleAxisd aa(rot);
        log_mean += aa.angle() * aa.axis();
        centre += g.centre();
        voxel += g.voxel_size();
    }
    const double count = static_cast<double>(grids.size());
    log_mean /= count;
    centre /= count;
    voxel /= count;

    const double angle = log_mean.norm();
    const Mat3 rot = angle > 0.0 ? Eigen::AngleAxisd(angle, log_mean / angle).toRotationMatrix() : Mat3::Identity();

    Vec3 half = Vec3::Zero();
    for (const auto& g : grids) {
        for (int c = 0; c < 8; ++c) {
            const Vec3 ijk((c & 1) ? g.dims[0] - 1 : 0, (c & 2) ? g.dims[1] - 1 : 0, (c & 4) ? g.dims[2] - 1 : 0);
            const Vec3 q = rot.transpose() * (g.to_world(ijk) - centre);
            half = half.cwiseMax(q.cwiseAbs());
        }
    }

    Grid out;
    Mat3 lin = rot * voxel.asDiagonal();
    for (int a = 0; a < 3; ++a) out.dims[a] = static_cast<int>(std::floor(2.0 * half[a] / voxel[a] + 1e-6)) + 1;
    out.affine = Mat4::Identity();
    out.affine.topLeftCorner<3, 3>() = lin;
    const Vec3 mid(0.5 * (out.dims[0] - 1), 0.5 * (out.dims[1] - 1), 0.5 * (out.dims[2] - 1));
    out.affine.block<3, 1>(0, 3) = centre - lin * mid;
    return out;
}

Grid barycentre_grid(std::span<const Volume> volumes) {
    std::vector<Grid> grids;
    grids.reserve(volumes.size());
    for (const auto& v : volumes) grids.push_back(v.grid());
    return barycentre_grid(std::span<const Grid>(grids));
}

}  // namespace vfamc
