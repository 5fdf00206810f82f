#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "vfamc/io.hpp"
#include "vfamc/ratio.hpp"
#include "vfamc/volume.hpp"

namespace vfamc {

// Tissue classes; csf, gm and wm form the evaluation mask.
enum class Tissue { Scalp, Csf, Gm, Wm, Other };

std::string to_string(Tissue t);
Tissue tissue_from_string(const std::string& s);

// Ellipsoidal region in anatomical coordinates (mm, origin at the head centre).
struct Region {
    std::string name;
    Tissue tissue = Tissue::Other;
    Vec3 centre_mm = Vec3::Zero();
    Vec3 semi_axes_mm = Vec3::Ones();
    Vec3 rotation_deg = Vec3::Zero();  // intrinsic ZYX, same as RigidTransform
    double r1 = 1.0;                   // s^-1
    double pd = 1.0;
};

struct PhantomSpec {
    Dims dims{64, 64, 64};
    Vec3 voxel_size_mm{2.0, 2.0, 2.0};
    std::string layout = "nested-ellipsoids";  // or "shepp-logan-3d"
    // Width of the logistic edge profile.
    double edge_width_mm = 2.0;
    // Painter's order: later regions cover earlier ones.
    std::vector<Region> regions;

    static std::vector<Region> default_regions(const std::string& layout);
    void validate() const;
};

struct Blob {
    Vec3 centre_mm = Vec3::Zero();
    double width_mm = 30.0;
    double amplitude = 0.0;
};

// Smooth log-domain field in scanner coordinates:
//   log f(p) = poly(u) + sum_j a_j exp(-|p - c_j|^2 / (2 w_j^2)),  u = p / scale_mm
// with poly coefficients ordered 1, x, y, z, xx, yy, zz, xy, xz, yz.
struct FieldSpec {
    double scale_mm = 64.0;
    std::array<double, 10> poly{};
    std::vector<Blob> blobs;

    double log_value(const Vec3& p) const;
    double value(const Vec3& p) const;
    void validate(const std::string& what) const;
};

// Head position k: M_k maps anatomical coordinates to scanner coordinates.
// The transmit efficiency at position k is base(p) * (1 + b1_offset + b1_gradient . p / scale).
struct PositionSpec {
    std::string name;
    Vec3 rotation_deg = Vec3::Zero();  // intrinsic ZYX
    Vec3 translation_mm = Vec3::Zero();
    double b1_offset = 0.0;
    Vec3 b1_gradient = Vec3::Zero();

    RigidTransform pose() const { return RigidTransform::from_euler_zyx_deg(rotation_deg, translation_mm); }
};

struct AcquisitionSpec {
    std::string contrast;  // "PDw" or "T1w"
    int position = 0;
};

struct ProtocolSpec {
    double pdw_flip_deg = 6.0;
    double t1w_flip_deg = 26.0;
    double tr_s = 0.0195;
    double calib_flip_deg = 6.0;
    double calib_tr_s = 0.0065;
    int calib_res_factor = 4;
};

struct NoiseSpec {
    // Mean tissue signal over noise sigma; 0 disables noise.
    double snr = 50.0;
    double calib_snr = 50.0;
};

struct SimConfig {
    PhantomSpec phantom;
    FieldSpec receive;
    FieldSpec transmit;
    bool body_coil = false;
    FieldSpec body_receive;
    std::vector<PositionSpec> positions;
    std::vector<AcquisitionSpec> acquisitions;
    ProtocolSpec protocol;
    NoiseSpec noise;

    static SimConfig defaults();
    void validate() const;
};

SimConfig sim_config_from_json(const Json& j);
Json to_json(const SimConfig& c);

struct MotionSummary {
    double net_translation_mm = 0.0;
    double net_rotation_deg = 0.0;
};

// RMS over axes of the translation and of the intrinsic ZYX Euler angles.
MotionSummary motion_summary(const RigidTransform& t);

// Phantom sampled on a scanner-frame grid with the head at `pose`.
struct PhantomSample {
    Volume r1;      // NaN outside the head
    Volume pd;      // 0 outside the head
    Volume labels;  // index of the dominant region, -1 for background
    Volume tissue;  // csf + gm + wm occupancy
};

PhantomSample render_phantom(const PhantomSpec& spec, const Grid& grid, const RigidTransform& pose);

Grid acquisition_grid(const PhantomSpec& spec);
Grid calibration_grid(const PhantomSpec& spec, int res_factor);

// Field values sampled on a grid in scanner coordinates.
Volume sample_field(const FieldSpec& field, const Grid& grid);
Volume transmit_field(const FieldSpec& base, const PositionSpec& pos, const Grid& grid);

// Every position replaced by position 0 (pose and transmit changes), names kept.
SimConfig without_motion(const SimConfig& c);

// Transform taking reference-frame world coordinates (position 0's scanner
// frame) to the scanner frame of position k: M_k * M_0^-1.
RigidTransform reference_to_native(const SimConfig& c, int position);

// Noise-free forward models. Voxels with pd == 0 give 0.
Volume forward_vfa(const Volume& pd, const Volume& r1, const Volume& sens, const Volume& ft, double flip_deg,
                   double tr_s);
// Fine-grid signal block-averaged by `factor` per axis.
Volume block_average(const Volume& fine, const Grid& coarse, int factor);

// Rounds every voxel to float precision (the on-disk representation).
Volume round_to_float(Volume v);

// Writes a dataset directory:
//   vfa_k, b1_k, calib_k (and calib_body_k) per acquisition,
//   truth/{r1,pd,labels,mask,sens_p}, truth/native_p/{r1,pd,sens,ft}, truth/transforms.json,
//   manifest.json.
void generate(const SimConfig& config, std::uint64_t seed, const std::filesystem::path& out_dir);

// Peak of |s_a / s_b - 1| over the reference-frame tissue mask.
double peak_modulation_difference(const SimConfig& c, int position_a, int position_b);

}  // namespace vfamc
