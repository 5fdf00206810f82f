#include "vfamc/simulate.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <random>

#include "vfamc/config.hpp"
#include "vfamc/error.hpp"
#include "vfamc/signal.hpp"

namespace vfamc {

namespace fs = std::filesystem;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr int kSchemaVersion = 1;

Region make_region(std::string name, Tissue t, Vec3 c, Vec3 axes, double rot_z, double r1, double pd) {
    Region r;
    r.name = std::move(name);
    r.tissue = t;
    r.centre_mm = c;
    r.semi_axes_mm = axes;
    r.rotation_deg = Vec3(0.0, 0.0, rot_z);
    r.r1 = r1;
    r.pd = pd;
    return r;
}

bool in_mask(Tissue t) { return t == Tissue::Csf || t == Tissue::Gm || t == Tissue::Wm; }

// Occupancy in [0, 1] from an approximate signed distance to the ellipsoid surface.
double occupancy(const Region& reg, const Mat3& rot_t, const Vec3& a, double edge_mm) {
    const Vec3 q = rot_t * (a - reg.centre_mm);
    const Vec3& s = reg.semi_axes_mm;
    const double rho = std::sqrt((q[0] / s[0]) * (q[0] / s[0]) + (q[1] / s[1]) * (q[1] / s[1]) +
                                 (q[2] / s[2]) * (q[2] / s[2]));
    if (edge_mm <= 0.0) return rho <= 1.0 ? 1.0 : 0.0;
    const double gnorm =
        std::sqrt(q[0] * q[0] / std::pow(s[0], 4) + q[1] * q[1] / std::pow(s[1], 4) + q[2] * q[2] / std::pow(s[2], 4));
    if (rho == 0.0 || gnorm == 0.0) return 1.0;
    const double dist = (rho - 1.0) * rho / gnorm;
    // Logistic profile; 12% .. 88% across one edge width.
    const double arg = 4.0 * dist / edge_mm;
    if (arg > 700.0) return 0.0;
    return 1.0 / (1.0 + std::exp(arg));
}

FieldSpec field_from_json(const Json& j, const std::string& ctx, const FieldSpec& fallback) {
    ObjectReader r(j, ctx);
    FieldSpec f = fallback;
    f.scale_mm = r.get("scale_mm", f.scale_mm);
    if (r.has("poly")) {
        const auto v = r.require<std::vector<double>>("poly");
        if (v.size() != f.poly.size()) throw ConfigError(ctx + ".poly: expected 10 coefficients");
        std::copy(v.begin(), v.end(), f.poly.begin());
    }
    if (r.has("blobs")) {
        f.blobs.clear();
        const Json& blobs = r.raw("blobs");
        if (!blobs.is_array()) throw ConfigError(ctx + ".blobs: expected an array");
        for (const auto& bj : blobs) {
            ObjectReader br(bj, ctx + ".blobs[]");
            Blob b;
            b.centre_mm = vec3_from_json(br.raw("centre_mm"), ctx + ".blobs[].centre_mm");
            b.width_mm = br.require<double>("width_mm");
            b.amplitude = br.require<double>("amplitude");
            br.finish();
            f.blobs.push_back(b);
        }
    }
    r.finish();
    f.validate(ctx);
    return f;
}

Json field_to_json(const FieldSpec& f) {
    Json blobs = Json::array();
    for (const auto& b : f.blobs)
        blobs.push_back({{"centre_mm", vec3_to_json(b.centre_mm)}, {"width_mm", b.width_mm}, {"amplitude", b.amplitude}});
    return {{"scale_mm", f.scale_mm}, {"poly", std::vector<double>(f.poly.begin(), f.poly.end())}, {"blobs", blobs}};
}

// Mean noise-free signal over voxels whose tissue occupancy is at least one half.
double mean_tissue_signal(const Volume& signal, const Volume& tissue) {
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < signal.size(); ++i) {
        if (tissue[i] < 0.5) continue;
        sum += signal[i];
        ++n;
    }
    if (n == 0) throw ConfigError("simulation: phantom has no tissue voxels inside the field of view");
    return sum / static_cast<double>(n);
}

Volume add_noise(Volume v, double sigma, std::uint64_t seed, std::uint32_t stream) {
    if (sigma <= 0.0) return v;
    std::seed_seq seq{static_cast<std::uint32_t>(seed & 0xffffffffu), static_cast<std::uint32_t>(seed >> 32), stream};
    std::mt19937_64 rng(seq);
    std::normal_distribution<double> normal(0.0, sigma);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] += normal(rng);
    return v;
}

void write_truth(const fs::path& path, Volume v, const std::string& intent, const Json& extra = Json::object()) {
    v.intent = intent;
    write_volume(path, v, extra);
}

}  // namespace

std::string to_string(Tissue t) {
    switch (t) {
        case Tissue::Scalp: return "scalp";
        case Tissue::Csf: return "csf";
        case Tissue::Gm: return "gm";
        case Tissue::Wm: return "wm";
        case Tissue::Other: return "other";
    }
    return "other";
}

Tissue tissue_from_string(const std::string& s) {
    if (s == "scalp") return Tissue::Scalp;
    if (s == "csf") return Tissue::Csf;
    if (s == "gm") return Tissue::Gm;
    if (s == "wm") return Tissue::Wm;
    if (s == "other") return Tissue::Other;
    throw ConfigError("unknown tissue '" + s + "'");
}

std::vector<Region> PhantomSpec::default_regions(const std::string& layout) {
    if (layout == "nested-ellipsoids") {
        return {
            make_region("scalp", Tissue::Scalp, {0, 0, 0}, {54, 62, 52}, 0, 1.4, 0.65),
            make_region("csf", Tissue::Csf, {0, 0, 0}, {46, 54, 44}, 0, 0.45, 1.0),
            make_region("gm", Tissue::Gm, {0, 0, 0}, {43, 51, 41}, 0, 0.65, 0.82),
            make_region("wm", Tissue::Wm, {0, 0, 0}, {34, 42, 32}, 0, 1.1, 0.7),
            make_region("ventricle_l", Tissue::Csf, {-8, 2, 6}, {5, 15, 7}, 15, 0.45, 1.0),
            make_region("ventricle_r", Tissue::Csf, {8, 2, 6}, {5, 15, 7}, -15, 0.45, 1.0),
        };
    }
    if (layout == "shepp-logan-3d") {
        // 3D Shepp-Logan geometry in units of 60 mm with tissue-like parameters.
        const double u = 60.0;
        auto sl = [u](std::string name, Tissue t, Vec3 c, Vec3 a, double phi, double r1, double pd) {
            return make_region(std::move(name), t, c * u, a * u, phi, r1, pd);
        };
        return {
            sl("skull", Tissue::Scalp, {0, 0, 0}, {0.69, 0.92, 0.81}, 0, 1.4, 0.65),
            sl("brain", Tissue::Gm, {0, -0.0184, 0}, {0.6624, 0.874, 0.78}, 0, 0.65, 0.82),
            sl("ventricle_r", Tissue::Csf, {0.22, 0, 0}, {0.11, 0.31, 0.22}, -18, 0.45, 1.0),
            sl("ventricle_l", Tissue::Csf, {-0.22, 0, 0}, {0.16, 0.41, 0.28}, 18, 0.45, 1.0),
            sl("white", Tissue::Wm, {0, 0.35, -0.15}, {0.21, 0.25, 0.41}, 0, 1.1, 0.7),
            sl("spot_1", Tissue::Wm, {0, 0.1, 0.25}, {0.046, 0.046, 0.05}, 0, 1.2, 0.68),
            sl("spot_2", Tissue::Gm, {0, -0.1, 0.25}, {0.046, 0.046, 0.05}, 0, 0.8, 0.78),
            sl("spot_3", Tissue::Gm, {-0.08, -0.605, 0}, {0.046, 0.023, 0.05}, 0, 0.8, 0.78),
            sl("spot_4", Tissue::Wm, {0, -0.606, 0}, {0.023, 0.023, 0.02}, 0, 1.2, 0.68),
            sl("spot_5", Tissue::Gm, {0.06, -0.605, 0}, {0.023, 0.046, 0.02}, 0, 0.8, 0.78),
        };
    }
    throw ConfigError("unknown phantom layout '" + layout + "' (expected nested-ellipsoids or shepp-logan-3d)");
}

void PhantomSpec::validate() const {
    for (int a = 0; a < 3; ++a) {
        if (dims[a] < 1) throw ConfigError("phantom: dims must be positive");
        if (!(voxel_size_mm[a] > 0.0)) throw ConfigError("phantom: voxel_size_mm must be positive");
    }
    if (!(edge_width_mm >= 0.0)) throw ConfigError("phantom: edge_width_mm must be >= 0");
    if (regions.empty()) throw ConfigError("phantom: no regions");
    for (const auto& r : regions) {
        if (!(r.r1 >= 0.2 && r.r1 <= 2.5)) throw ConfigError("phantom: region '" + r.name + "' R1 outside [0.2, 2.5]");
        if (!(r.pd >= 0.0)) throw ConfigError("phantom: region '" + r.name + "' pd must be >= 0");
        for (int a = 0; a < 3; ++a)
            if (!(r.semi_axes_mm[a] > 0.0)) throw ConfigError("phantom: region '" + r.name + "' semi-axes must be > 0");
    }
}

double FieldSpec::log_value(const Vec3& p) const {
    const Vec3 u = p / scale_mm;
    const auto& c = poly;
    double v = c[0] + c[1] * u[0] + c[2] * u[1] + c[3] * u[2] + c[4] * u[0] * u[0] + c[5] * u[1] * u[1] +
               c[6] * u[2] * u[2] + c[7] * u[0] * u[1] + c[8] * u[0] * u[2] + c[9] * u[1] * u[2];
    for (const auto& b : blobs) v += b.amplitude * std::exp(-(p - b.centre_mm).squaredNorm() / (2.0 * b.width_mm * b.width_mm));
    return v;
}

double FieldSpec::value(const Vec3& p) const { return std::exp(log_value(p)); }

void FieldSpec::validate(const std::string& what) const {
    if (!(scale_mm > 0.0)) throw ConfigError(what + ": scale_mm must be positive");
    for (double c : poly)
        if (!std::isfinite(c)) throw ConfigError(what + ": non-finite coefficient");
    for (const auto& b : blobs)
        if (!(b.width_mm > 0.0) || !std::isfinite(b.amplitude) || !b.centre_mm.allFinite())
            throw ConfigError(what + ": invalid blob");
}

SimConfig SimConfig::defaults() {
    SimConfig c;
    c.phantom.regions = PhantomSpec::default_regions(c.phantom.layout);
    c.receive.poly = {0.0, 0.50, -0.30, 0.20, -0.40, 0.30, -0.20, 0.20, 0.0, 0.16};
    c.receive.blobs = {Blob{{0, 75, 10}, 35, 0.70}, Blob{{-70, -10, 0}, 30, 0.50}};
    c.transmit.poly = {0.0, 0.0, 0.0, 0.0, -0.06, -0.06, -0.04, 0.0, 0.0, 0.0};
    c.body_receive.poly = {0.0, 0.02, 0.0, -0.02, -0.01, -0.01, -0.01, 0.0, 0.0, 0.0};
    PositionSpec p0;
    p0.name = "reference";
    PositionSpec p1;
    p1.name = "moved";
    p1.rotation_deg = Vec3(7.0, -5.0, 10.0);
    p1.translation_mm = Vec3(5.0, -7.0, 8.0);
    c.positions = {p0, p1};
    c.acquisitions = {{"PDw", 0}, {"T1w", 0}, {"PDw", 0}, {"T1w", 0}, {"PDw", 1}, {"T1w", 1}};
    return c;
}

void SimConfig::validate() const {
    phantom.validate();
    receive.validate("receive");
    transmit.validate("transmit");
    body_receive.validate("body_coil.receive");
    if (positions.empty()) throw ConfigError("simulation: at least one position is required");
    for (const auto& p : positions) {
        if (!p.rotation_deg.allFinite() || !p.translation_mm.allFinite())
            throw ConfigError("simulation: position '" + p.name + "' has non-finite motion");
        if (!(1.0 + p.b1_offset > 0.0) || !p.b1_gradient.allFinite())
            throw ConfigError("simulation: position '" + p.name + "' has an invalid transmit perturbation");
    }
    bool have_pd = false;
    bool have_t1 = false;
    for (const auto& a : acquisitions) {
        if (a.contrast == "PDw") have_pd = true;
        else if (a.contrast == "T1w") have_t1 = true;
        else throw ConfigError("simulation: contrast must be PDw or T1w, got '" + a.contrast + "'");
        if (a.position < 0 || a.position >= static_cast<int>(positions.size()))
            throw ConfigError("simulation: acquisition refers to an unknown position");
    }
    if (!have_pd || !have_t1) throw ConfigError("simulation: needs at least one PDw and one T1w acquisition");
    if (acquisitions.front().contrast != "PDw" || acquisitions.front().position != 0)
        throw ConfigError("simulation: the first acquisition must be a PDw volume at position 0 (the reference)");
    const auto flip_ok = [](double f) { return f > 0.0 && f < 90.0; };
    if (!flip_ok(protocol.pdw_flip_deg) || !flip_ok(protocol.t1w_flip_deg) || !flip_ok(protocol.calib_flip_deg))
        throw ConfigError("simulation: flip angles must lie in (0, 90) degrees");
    if (!(protocol.tr_s > 0.0) || !(protocol.calib_tr_s > 0.0)) throw ConfigError("simulation: TR must be positive");
    if (protocol.calib_res_factor < 1) throw ConfigError("simulation: calib_res_factor must be >= 1");
    for (int a = 0; a < 3; ++a)
        if (phantom.dims[a] % protocol.calib_res_factor != 0)
            throw ConfigError("simulation: phantom dims must be divisible by calib_res_factor");
    if (!(noise.snr >= 0.0) || !(noise.calib_snr >= 0.0)) throw ConfigError("simulation: SNR must be >= 0");
}

SimConfig sim_config_from_json(const Json& j) {
    ObjectReader root(j, "simulation");
    const int version = root.require<int>("schema_version");
    if (version != kSchemaVersion) throw ConfigError("simulation: unsupported schema_version");
    SimConfig c = SimConfig::defaults();

    if (root.has("phantom")) {
        ObjectReader r = root.child("phantom");
        PhantomSpec& p = c.phantom;
        p.layout = r.get("layout", p.layout);
        if (r.has("dims")) {
            const auto d = r.require<std::vector<int>>("dims");
            if (d.size() != 3) throw ConfigError("phantom.dims: expected 3 entries");
            p.dims = {d[0], d[1], d[2]};
        }
        if (r.has("voxel_size_mm")) p.voxel_size_mm = vec3_from_json(r.raw("voxel_size_mm"), "phantom.voxel_size_mm");
        p.edge_width_mm = r.get("edge_width_mm", p.edge_width_mm);
        if (r.has("regions")) {
            p.regions.clear();
            const Json& regs = r.raw("regions");
            if (!regs.is_array()) throw ConfigError("phantom.regions: expected an array");
            for (const auto& rj : regs) {
                ObjectReader rr(rj, "phantom.regions[]");
                Region reg;
                reg.name = rr.require<std::string>("name");
                reg.tissue = tissue_from_string(rr.require<std::string>("tissue"));
                reg.centre_mm = vec3_from_json(rr.raw("centre_mm"), "region.centre_mm");
                reg.semi_axes_mm = vec3_from_json(rr.raw("semi_axes_mm"), "region.semi_axes_mm");
                if (rr.has("rotation_deg")) reg.rotation_deg = vec3_from_json(rr.raw("rotation_deg"), "region.rotation_deg");
                reg.r1 = rr.require<double>("r1");
                reg.pd = rr.require<double>("pd");
                rr.finish();
                p.regions.push_back(reg);
            }
        } else {
            p.regions = PhantomSpec::default_regions(p.layout);
        }
        r.finish();
    }
    if (root.has("receive")) c.receive = field_from_json(root.raw("receive"), "receive", c.receive);
    if (root.has("transmit")) c.transmit = field_from_json(root.raw("transmit"), "transmit", c.transmit);
    if (root.has("body_coil")) {
        ObjectReader r = root.child("body_coil");
        c.body_coil = r.get("enabled", c.body_coil);
        if (r.has("receive")) c.body_receive = field_from_json(r.raw("receive"), "body_coil.receive", c.body_receive);
        r.finish();
    }
    if (root.has("positions")) {
        c.positions.clear();
        const Json& ps = root.raw("positions");
        if (!ps.is_array()) throw ConfigError("positions: expected an array");
        for (const auto& pj : ps) {
            ObjectReader r(pj, "positions[]");
            PositionSpec p;
            p.name = r.get("name", std::string("position_") + std::to_string(c.positions.size()));
            if (r.has("rotation_deg")) p.rotation_deg = vec3_from_json(r.raw("rotation_deg"), "position.rotation_deg");
            if (r.has("translation_mm")) p.translation_mm = vec3_from_json(r.raw("translation_mm"), "position.translation_mm");
            p.b1_offset = r.get("b1_offset", 0.0);
            if (r.has("b1_gradient")) p.b1_gradient = vec3_from_json(r.raw("b1_gradient"), "position.b1_gradient");
            r.finish();
            c.positions.push_back(p);
        }
    }
    if (root.has("acquisitions")) {
        c.acquisitions.clear();
        const Json& as = root.raw("acquisitions");
        if (!as.is_array()) throw ConfigError("acquisitions: expected an array");
        for (const auto& aj : as) {
            ObjectReader r(aj, "acquisitions[]");
            AcquisitionSpec a;
            a.contrast = r.require<std::string>("contrast");
            a.position = r.require<int>("position");
            r.finish();
            c.acquisitions.push_back(a);
        }
    }
    if (root.has("protocol")) {
        ObjectReader r = root.child("protocol");
        ProtocolSpec& p = c.protocol;
        p.pdw_flip_deg = r.get("pdw_flip_deg", p.pdw_flip_deg);
        p.t1w_flip_deg = r.get("t1w_flip_deg", p.t1w_flip_deg);
        p.tr_s = r.get("tr_s", p.tr_s);
        p.calib_flip_deg = r.get("calib_flip_deg", p.calib_flip_deg);
        p.calib_tr_s = r.get("calib_tr_s", p.calib_tr_s);
        p.calib_res_factor = r.get("calib_res_factor", p.calib_res_factor);
        r.finish();
    }
    if (root.has("noise")) {
        ObjectReader r = root.child("noise");
        c.noise.snr = r.get("snr", c.noise.snr);
        c.noise.calib_snr = r.get("calib_snr", c.noise.calib_snr);
        r.finish();
    }
    root.finish();
    c.validate();
    return c;
}

Json to_json(const SimConfig& c) {
    Json regions = Json::array();
    for (const auto& r : c.phantom.regions)
        regions.push_back({{"name", r.name},
                           {"tissue", to_string(r.tissue)},
                           {"centre_mm", vec3_to_json(r.centre_mm)},
                           {"semi_axes_mm", vec3_to_json(r.semi_axes_mm)},
                           {"rotation_deg", vec3_to_json(r.rotation_deg)},
                           {"r1", r.r1},
                           {"pd", r.pd}});
    Json positions = Json::array();
    for (const auto& p : c.positions)
        positions.push_back({{"name", p.name},
                             {"rotation_deg", vec3_to_json(p.rotation_deg)},
                             {"translation_mm", vec3_to_json(p.translation_mm)},
                             {"b1_offset", p.b1_offset},
                             {"b1_gradient", vec3_to_json(p.b1_gradient)}});
    Json acqs = Json::array();
    for (const auto& a : c.acquisitions) acqs.push_back({{"contrast", a.contrast}, {"position", a.position}});
    const auto& pr = c.protocol;
    return {
        {"schema_version", kSchemaVersion},
        {"phantom",
         {{"layout", c.phantom.layout},
          {"dims", {c.phantom.dims[0], c.phantom.dims[1], c.phantom.dims[2]}},
          {"voxel_size_mm", vec3_to_json(c.phantom.voxel_size_mm)},
          {"edge_width_mm", c.phantom.edge_width_mm},
          {"regions", regions}}},
        {"receive", field_to_json(c.receive)},
        {"transmit", field_to_json(c.transmit)},
        {"body_coil", {{"enabled", c.body_coil}, {"receive", field_to_json(c.body_receive)}}},
        {"positions", positions},
        {"acquisitions", acqs},
        {"protocol",
         {{"pdw_flip_deg", pr.pdw_flip_deg},
          {"t1w_flip_deg", pr.t1w_flip_deg},
          {"tr_s", pr.tr_s},
          {"calib_flip_deg", pr.calib_flip_deg},
          {"calib_tr_s", pr.calib_tr_s},
          {"calib_res_factor", pr.calib_res_factor}}},
        {"noise", {{"snr", c.noise.snr}, {"calib_snr", c.noise.calib_snr}}},
    };
}

MotionSummary motion_summary(const RigidTransform& t) {
    const Vec3 e = t.euler_zyx_deg();
    return {std::sqrt(t.translation_mm.squaredNorm() / 3.0), std::sqrt(e.squaredNorm() / 3.0)};
}

Grid acquisition_grid(const PhantomSpec& spec) { return Grid::centered(spec.dims, spec.voxel_size_mm); }

Grid calibration_grid(const PhantomSpec& spec, int res_factor) {
    if (res_factor < 1) throw ConfigError("calibration resolution factor must be >= 1");
    Dims d{};
    for (int a = 0; a < 3; ++a) {
        if (spec.dims[a] % res_factor != 0) throw ConfigError("phantom dims must be divisible by calib_res_factor");
        d[a] = spec.dims[a] / res_factor;
    }
    return Grid::centered(d, spec.voxel_size_mm * res_factor);
}

PhantomSample render_phantom(const PhantomSpec& spec, const Grid& grid, const RigidTransform& pose) {
    spec.validate();
    const RigidTransform to_anat = pose.inverse();
    std::vector<Mat3> rot_t;
    for (const auto& r : spec.regions)
        rot_t.push_back(RigidTransform::from_euler_zyx_deg(r.rotation_deg, Vec3::Zero()).rotation.transpose());

    PhantomSample out{Volume(grid, kNaN), Volume(grid, 0.0), Volume(grid, -1.0), Volume(grid, 0.0)};
    out.r1.intent = "r1";
    out.pd.intent = "pd";
    out.labels.intent = "labels";
    out.tissue.intent = "tissue_fraction";
    const std::size_t nreg = spec.regions.size();
    std::vector<double> occ(nreg);
    for (int k = 0; k < grid.dims[2]; ++k)
        for (int j = 0; j < grid.dims[1]; ++j)
            for (int i = 0; i < grid.dims[0]; ++i) {
                const Vec3 a = to_anat.apply(grid.to_world(Vec3(i, j, k)));
                for (std::size_t r = 0; r < nreg; ++r) occ[r] = occupancy(spec.regions[r], rot_t[r], a, spec.edge_width_mm);
                double cover = 1.0;  // fraction not yet claimed by later regions
                double head = 0.0, pd = 0.0, r1w = 0.0, tissue = 0.0, best = 0.0;
                int label = -1;
                for (std::size_t r = nreg; r-- > 0;) {
                    const double f = occ[r] * cover;
                    cover *= 1.0 - occ[r];
                    if (f <= 0.0) continue;
                    head += f;
                    pd += f * spec.regions[r].pd;
                    r1w += f * spec.regions[r].r1;
                    if (in_mask(spec.regions[r].tissue)) tissue += f;
                    if (f > best) {
                        best = f;
                        label = static_cast<int>(r);
                    }
                }
                const std::size_t n = grid.index(i, j, k);
                if (head < 1e-9) continue;
                out.pd[n] = pd;
                out.r1[n] = r1w / head;
                out.tissue[n] = tissue;
                out.labels[n] = best >= cover ? label : -1;
            }
    return out;
}

Volume sample_field(const FieldSpec& field, const Grid& grid) {
    Volume v(grid);
    for (int k = 0; k < grid.dims[2]; ++k)
        for (int j = 0; j < grid.dims[1]; ++j)
            for (int i = 0; i < grid.dims[0]; ++i) v.at(i, j, k) = field.value(grid.to_world(Vec3(i, j, k)));
    v.intent = "sensitivity";
    return v;
}

Volume transmit_field(const FieldSpec& base, const PositionSpec& pos, const Grid& grid) {
    Volume v(grid);
    for (int k = 0; k < grid.dims[2]; ++k)
        for (int j = 0; j < grid.dims[1]; ++j)
            for (int i = 0; i < grid.dims[0]; ++i) {
                const Vec3 p = grid.to_world(Vec3(i, j, k));
                v.at(i, j, k) = base.value(p) * (1.0 + pos.b1_offset + pos.b1_gradient.dot(p / base.scale_mm));
            }
    v.intent = "b1";
    return v;
}

SimConfig without_motion(const SimConfig& c) {
    SimConfig out = c;
    for (auto& p : out.positions) {
        const std::string name = p.name;
        p = c.positions.at(0);
        p.name = name;
    }
    return out;
}

RigidTransform reference_to_native(const SimConfig& c, int position) {
    const RigidTransform m0 = c.positions.at(0).pose();
    return c.positions.at(static_cast<std::size_t>(position)).pose().compose(m0.inverse());
}

Volume forward_vfa(const Volume& pd, const Volume& r1, const Volume& sens, const Volume& ft, double flip_deg,
                   double tr_s) {
    require_same_grid(pd, r1, "pd vs r1");
    require_same_grid(pd, sens, "pd vs sensitivity");
    require_same_grid(pd, ft, "pd vs transmit field");
    Volume out(pd.grid(), 0.0);
    for (std::size_t n = 0; n < out.size(); ++n) {
        if (pd[n] == 0.0) continue;
        out[n] = spgr_signal(pd[n], r1[n], sens[n], ft[n], flip_deg, tr_s);
    }
    return out;
}

Volume block_average(const Volume& fine, const Grid& coarse, int factor) {
    const Grid& g = fine.grid();
    for (int a = 0; a < 3; ++a)
        if (coarse.dims[a] * factor != g.dims[a]) throw GeometryError("block_average: incompatible grids");
    Volume out(coarse, 0.0);
    const double w = 1.0 / (static_cast<double>(factor) * factor * factor);
    for (int k = 0; k < g.dims[2]; ++k)
        for (int j = 0; j < g.dims[1]; ++j)
            for (int i = 0; i < g.dims[0]; ++i) out.at(i / factor, j / factor, k / factor) += w * fine.at(i, j, k);
    return out;
}

Volume round_to_float(Volume v) {
    for (std::size_t n = 0; n < v.size(); ++n) v[n] = static_cast<double>(static_cast<float>(v[n]));
    return v;
}

double peak_modulation_difference(const SimConfig& c, int position_a, int position_b) {
    const Grid grid = acquisition_grid(c.phantom);
    const PhantomSample ref = render_phantom(c.phantom, grid, c.positions.at(0).pose());
    const RigidTransform ta = reference_to_native(c, position_a);
    const RigidTransform tb = reference_to_native(c, position_b);
    double peak = 0.0;
    for (int k = 0; k < grid.dims[2]; ++k)
        for (int j = 0; j < grid.dims[1]; ++j)
            for (int i = 0; i < grid.dims[0]; ++i) {
                if (ref.tissue.at(i, j, k) < 0.5) continue;
                const Vec3 p = grid.to_world(Vec3(i, j, k));
                const double ratio = std::exp(c.receive.log_value(ta.apply(p)) - c.receive.log_value(tb.apply(p)));
                peak = std::max(peak, std::abs(ratio - 1.0));
            }
    return peak;
}

void generate(const SimConfig& config, std::uint64_t seed, const fs::path& out_dir) {
    config.validate();
    std::error_code ec;
    fs::create_directories(out_dir / "truth", ec);
    if (ec) throw IoError("cannot create " + (out_dir / "truth").string() + ": " + ec.message());

    const Grid grid = acquisition_grid(config.phantom);
    const Grid cgrid = calibration_grid(config.phantom, config.protocol.calib_res_factor);
    const int factor = config.protocol.calib_res_factor;
    const std::size_t npos = config.positions.size();

    // Native truth per position, rounded to the on-disk precision before use.
    struct Native {
        PhantomSample phantom;
        Volume sens, sens_body, ft;
    };
    std::vector<Native> native;
    Json positions = Json::array();
    for (std::size_t p = 0; p < npos; ++p) {
        const PositionSpec& pos = config.positions[p];
        Native n{render_phantom(config.phantom, grid, pos.pose()), round_to_float(sample_field(config.receive, grid)),
                 {}, round_to_float(transmit_field(config.transmit, pos, grid))};
        n.phantom.r1 = round_to_float(n.phantom.r1);
        n.phantom.pd = round_to_float(n.phantom.pd);
        if (config.body_coil) n.sens_body = round_to_float(sample_field(config.body_receive, grid));

        const fs::path dir = out_dir / "truth" / ("native_" + std::to_string(p));
        fs::create_directories(dir, ec);
        if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
        write_truth(dir / "r1", n.phantom.r1, "r1");
        write_truth(dir / "pd", n.phantom.pd, "pd");
        write_truth(dir / "tissue", n.phantom.tissue, "tissue_fraction");
        write_truth(dir / "sens", n.sens, "sensitivity");
        write_truth(dir / "ft", n.ft, "b1");
        if (config.body_coil) write_truth(dir / "sens_body", n.sens_body, "sensitivity");

        const RigidTransform to_native = reference_to_native(config, static_cast<int>(p));
        const MotionSummary ms = motion_summary(to_native);
        positions.push_back({{"name", pos.name},
                             {"pose", transform_to_json(pos.pose())},
                             {"reference_to_native", transform_to_json(to_native)},
                             {"motion_summary",
                              {{"net_translation_mm", ms.net_translation_mm},
                               {"net_rotation_deg", ms.net_rotation_deg},
                               {"euler_convention", "intrinsic ZYX (R = Rz Ry Rx)"}}},
                             {"peak_modulation_difference", peak_modulation_difference(config, static_cast<int>(p), 0)}});

        // Reference-frame sensitivity of this position.
        Volume sref(grid);
        for (int k = 0; k < grid.dims[2]; ++k)
            for (int j = 0; j < grid.dims[1]; ++j)
                for (int i = 0; i < grid.dims[0]; ++i)
                    sref.at(i, j, k) = config.receive.value(to_native.apply(grid.to_world(Vec3(i, j, k))));
        write_truth(out_dir / "truth" / ("sens_" + std::to_string(p)), round_to_float(sref), "sensitivity");
        native.push_back(std::move(n));
    }

    const PhantomSample& ref = native[0].phantom;
    Volume mask(grid, 0.0);
    for (std::size_t n = 0; n < mask.size(); ++n) mask[n] = ref.tissue[n] >= 0.5 ? 1.0 : 0.0;
    write_truth(out_dir / "truth" / "r1", ref.r1, "r1");
    write_truth(out_dir / "truth" / "pd", ref.pd, "pd");
    write_truth(out_dir / "truth" / "tissue", ref.tissue, "tissue_fraction");
    Json label_names = Json::array();
    for (const auto& r : config.phantom.regions) label_names.push_back({{"name", r.name}, {"tissue", to_string(r.tissue)}});
    write_truth(out_dir / "truth" / "labels", ref.labels, "labels", {{"labels", label_names}});
    write_truth(out_dir / "truth" / "mask", mask, "mask");
    write_json(out_dir / "truth" / "transforms.json",
               {{"description", "reference_to_native maps reference-frame world mm to the native scanner frame"},
                {"euler_convention", "intrinsic ZYX (R = Rz Ry Rx)"},
                {"positions", positions}});

    const auto& pr = config.protocol;
    Json acqs = Json::array();
    for (std::size_t v = 0; v < config.acquisitions.size(); ++v) {
        const AcquisitionSpec& a = config.acquisitions[v];
        const Native& n = native[static_cast<std::size_t>(a.position)];
        const double flip = a.contrast == "PDw" ? pr.pdw_flip_deg : pr.t1w_flip_deg;
        const std::string idx = std::to_string(v);
        const auto stream = static_cast<std::uint32_t>(v * 4);

        const Volume clean = forward_vfa(n.phantom.pd, n.phantom.r1, n.sens, n.ft, flip, pr.tr_s);
        const double sigma = config.noise.snr > 0.0 ? mean_tissue_signal(clean, n.phantom.tissue) / config.noise.snr : 0.0;
        Volume vfa = add_noise(clean, sigma, seed, stream);
        vfa.intent = "vfa";
        write_volume(out_dir / ("vfa_" + idx), vfa,
                     {{"acquisition",
                       {{"flip_angle_deg", flip}, {"tr_s", pr.tr_s}, {"label", a.contrast}, {"position", a.position}}}});

        Volume b1 = n.ft;
        b1.intent = "b1";
        write_volume(out_dir / ("b1_" + idx), b1, {{"b1", {{"position", a.position}}}});

        const Volume tissue_c = block_average(n.phantom.tissue, cgrid, factor);
        auto write_calib = [&](const Volume& sens, const std::string& name, const std::string& coil,
                               std::uint32_t s) {
            const Volume fine = forward_vfa(n.phantom.pd, n.phantom.r1, sens, n.ft, pr.calib_flip_deg, pr.calib_tr_s);
            const Volume cal_clean = block_average(fine, cgrid, factor);
            const double cs =
                config.noise.calib_snr > 0.0 ? mean_tissue_signal(cal_clean, tissue_c) / config.noise.calib_snr : 0.0;
            Volume cal = add_noise(cal_clean, cs, seed, s);
            cal.intent = "calibration";
            write_volume(out_dir / name, cal,
                         {{"calibration",
                           {{"coil", coil},
                            {"position", a.position},
                            {"flip_angle_deg", pr.calib_flip_deg},
                            {"tr_s", pr.calib_tr_s}}}});
            return cs;
        };
        Json entry = {{"index", v},
                      {"contrast", a.contrast},
                      {"position", a.position},
                      {"flip_angle_deg", flip},
                      {"tr_s", pr.tr_s},
                      {"vfa", "vfa_" + idx},
                      {"b1", "b1_" + idx},
                      {"calib", "calib_" + idx},
                      {"noise_sigma", sigma}};
        entry["calib_noise_sigma"] = write_calib(n.sens, "calib_" + idx, "array", stream + 1);
        if (config.body_coil) {
            entry["calib_body"] = "calib_body_" + idx;
            entry["calib_body_noise_sigma"] = write_calib(n.sens_body, "calib_body_" + idx, "body", stream + 2);
        }
        acqs.push_back(entry);
    }

    std::map<std::string, std::string> digests;
    for (const auto& e : fs::recursive_directory_iterator(out_dir)) {
        if (!e.is_regular_file()) continue;
        const std::string rel = fs::relative(e.path(), out_dir).generic_string();
        if (rel == "manifest.json") continue;
        digests[rel] = sha256_file(e.path());
    }
    Json manifest = {{"schema_version", kSchemaVersion},
                     {"kind", "vfamc-dataset"},
                     {"seed", seed},
                     {"config", to_json(config)},
                     {"reference_position", 0},
                     {"acquisitions", acqs},
                     {"positions", positions},
                     {"files", digests}};
    write_json(out_dir / "manifest.json", manifest);
}

}  // namespace vfamc
