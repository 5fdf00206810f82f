#include <cmath>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "support.hpp"
#include "vfamc/config.hpp"
#include "vfamc/error.hpp"
#include "vfamc/io.hpp"
#include "vfamc/signal.hpp"
#include "vfamc/simulate.hpp"

using namespace vfamc;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

}  // namespace

TEST_CASE("motion summary") {
    const auto id = motion_summary(RigidTransform::identity());
    CHECK(id.net_translation_mm == 0.0);
    CHECK(id.net_rotation_deg == 0.0);
    const auto t = motion_summary(RigidTransform::from_euler_zyx_deg(Vec3::Zero(), Vec3(3, 4, 0)));
    CHECK(t.net_translation_mm == doctest::Approx(std::sqrt(25.0 / 3.0)).epsilon(1e-12));
    CHECK(t.net_translation_mm == doctest::Approx(2.887).epsilon(1e-3));
    const auto r = motion_summary(RigidTransform::from_euler_zyx_deg(Vec3(0, 0, 6), Vec3::Zero()));
    CHECK(r.net_rotation_deg == doctest::Approx(std::sqrt(12.0)).epsilon(1e-10));
}

TEST_CASE("phantom and field specs") {
    const SimConfig c = SimConfig::defaults();
    for (const auto& reg : c.phantom.regions) {
        CHECK(reg.r1 >= 0.2);
        CHECK(reg.r1 <= 2.5);
    }
    CHECK_NOTHROW(PhantomSpec{{16, 16, 16}, Vec3(8, 8, 8), "shepp-logan-3d", 2.0,
                              PhantomSpec::default_regions("shepp-logan-3d")}
                      .validate());
    FieldSpec f;
    f.poly[0] = std::log(2.0);
    f.blobs.push_back({Vec3(10, 0, 0), 20.0, 0.5});
    CHECK(f.value(Vec3(10, 0, 0)) == doctest::Approx(2.0 * std::exp(0.5)).epsilon(1e-14));
    CHECK(f.value(Vec3(500, 0, 0)) == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("config json round trip and strictness") {
    const SimConfig c = testsupport::small_sim();
    const Json j = to_json(c);
    CHECK(to_json(sim_config_from_json(j)) == j);
    Json bad = j;
    bad["phantom"]["colour"] = "blue";
    CHECK_THROWS_AS(sim_config_from_json(bad), ConfigError);
    Json wrong = j;
    wrong["schema_version"] = 99;
    CHECK_THROWS_AS(sim_config_from_json(wrong), ConfigError);
    SimConfig odd = c;
    odd.protocol.calib_res_factor = 3;
    CHECK_THROWS_AS(odd.validate(), ConfigError);
}

TEST_CASE("without motion copies the reference position") {
    SimConfig c = testsupport::small_sim();
    c.positions[1].b1_offset = 0.1;
    const SimConfig s = without_motion(c);
    REQUIRE(s.positions.size() == 2);
    CHECK(s.positions[1].name == "moved");
    CHECK(s.positions[1].pose().is_identity(0.0));
    CHECK(s.positions[1].b1_offset == 0.0);
    CHECK(reference_to_native(s, 1).is_identity(1e-12));
    CHECK(peak_modulation_difference(s, 1, 0) == 0.0);
    CHECK(peak_modulation_difference(SimConfig::defaults(), 1, 0) >= 0.2);
}

TEST_CASE("generation is deterministic") {
    const SimConfig c = testsupport::small_sim();
    const fs::path a = testsupport::scratch("sim_det_a"), b = testsupport::scratch("sim_det_b"),
                   d = testsupport::scratch("sim_det_c");
    generate(c, 7, a);
    generate(c, 7, b);
    generate(c, 8, d);
    const Json ma = read_json(a / "manifest.json");
    CHECK(slurp(a / "manifest.json") == slurp(b / "manifest.json"));
    for (const auto& [rel, digest] : ma.at("files").items()) CHECK(sha256_file(b / rel) == digest.get<std::string>());
    CHECK(sha256_file(a / "vfa_0.raw") != sha256_file(d / "vfa_0.raw"));
    CHECK(sha256_file(a / "truth/r1.raw") == sha256_file(d / "truth/r1.raw"));
    for (const char* f : {"calib_0.json", "vfa_5.raw", "b1_3.json", "truth/sens_1.json", "truth/transforms.json",
                          "truth/mask.json", "truth/native_1/ft.raw"})
        CHECK(fs::exists(a / f));
}

TEST_CASE("noise level matches the requested SNR") {
    SimConfig c = SimConfig::defaults();
    c.acquisitions = {{"PDw", 0}, {"T1w", 0}};
    const fs::path dir = testsupport::scratch("sim_noise");
    generate(c, 3, dir);
    const Json m = read_json(dir / "manifest.json");
    const Volume pd = read_volume(dir / "truth/native_0/pd");
    const Volume tissue = read_volume(dir / "truth/native_0/tissue");
    for (int v = 0; v < 2; ++v) {
        const Volume img = read_volume(dir / ("vfa_" + std::to_string(v)));
        const Volume r1 = read_volume(dir / "truth/native_0/r1");
        const Volume sens = read_volume(dir / "truth/native_0/sens");
        const Volume ft = read_volume(dir / "truth/native_0/ft");
        const double flip = v == 0 ? c.protocol.pdw_flip_deg : c.protocol.t1w_flip_deg;
        const Volume clean = forward_vfa(pd, r1, sens, ft, flip, c.protocol.tr_s);
        double tissue_sum = 0.0, ss = 0.0;
        std::size_t tissue_n = 0, bg = 0;
        for (std::size_t n = 0; n < img.size(); ++n) {
            if (tissue[n] >= 0.5) tissue_sum += clean[n], ++tissue_n;
            if (pd[n] == 0.0) ss += img[n] * img[n], ++bg;
        }
        REQUIRE(bg >= 10000);
        const double requested = tissue_sum / tissue_n / c.noise.snr;
        CHECK(m.at("acquisitions")[v].at("noise_sigma").get<double>() == doctest::Approx(requested).epsilon(1e-6));
        CHECK(std::abs(std::sqrt(ss / bg) / requested - 1.0) < 0.05);
    }
}

TEST_CASE("truth files regenerate noiseless images") {
    SimConfig c = testsupport::small_sim();
    c.noise.snr = 0.0;
    c.noise.calib_snr = 0.0;
    const fs::path dir = testsupport::scratch("sim_regen");
    generate(c, 1, dir);
    const Json m = read_json(dir / "manifest.json");
    const int f = c.protocol.calib_res_factor;
    for (const auto& a : m.at("acquisitions")) {
        const std::string native = "truth/native_" + std::to_string(a.at("position").get<int>()) + "/";
        const Volume pd = read_volume(dir / (native + "pd")), r1 = read_volume(dir / (native + "r1"));
        const Volume sens = read_volume(dir / (native + "sens")), ft = read_volume(dir / (native + "ft"));
        const Volume vfa = read_volume(dir / a.at("vfa").get<std::string>());
        const Volume regen = round_to_float(
            forward_vfa(pd, r1, sens, ft, a.at("flip_angle_deg").get<double>(), a.at("tr_s").get<double>()));
        CHECK(testsupport::max_abs_diff(regen, vfa) <= 1e-12);

        const Volume cal = read_volume(dir / a.at("calib").get<std::string>());
        const Volume fine = forward_vfa(pd, r1, sens, ft, c.protocol.calib_flip_deg, c.protocol.calib_tr_s);
        CHECK(testsupport::max_abs_diff(round_to_float(block_average(fine, cal.grid(), f)), cal) <= 1e-12);

        const Volume b1 = read_volume(dir / a.at("b1").get<std::string>());
        CHECK(b1.values() == ft.values());
    }
}

TEST_CASE("noiseless unmodulated data reproduce the phantom R1") {
    SimConfig c = testsupport::small_sim();
    c.positions.resize(1);
    c.acquisitions = {{"PDw", 0}, {"T1w", 0}};
    c.receive = FieldSpec{};
    c.transmit = FieldSpec{};
    c.noise.snr = c.noise.calib_snr = 0.0;
    const fs::path dir = testsupport::scratch("sim_truth");
    generate(c, 1, dir);
    const VfaAcquisition pdw{read_volume(dir / "vfa_0"), c.protocol.pdw_flip_deg, c.protocol.tr_s, "PDw"};
    const VfaAcquisition t1w{read_volume(dir / "vfa_1"), c.protocol.t1w_flip_deg, c.protocol.tr_s, "T1w"};
    const Volume r1 = r1_vfa(pdw, t1w, nullptr, B1Map{read_volume(dir / "b1_0")});
    const Volume truth = read_volume(dir / "truth/r1"), mask = read_volume(dir / "truth/mask");
    std::size_t used = 0;
    for (std::size_t n = 0; n < r1.size(); ++n) {
        if (!(mask[n] > 0.5)) continue;
        ++used;
        CHECK(std::abs(r1[n] / truth[n] - 1.0) < 0.03);
    }
    CHECK(used > 1000);
}

TEST_CASE("stored transforms round-trip through reslicing") {
    SimConfig c = testsupport::small_sim();
    c.positions[1].rotation_deg = Vec3::Zero();
    c.positions[1].translation_mm = Vec3(5, 0, 0);
    c.acquisitions = {{"PDw", 0}, {"T1w", 1}};
    c.noise.snr = c.noise.calib_snr = 0.0;
    const fs::path dir = testsupport::scratch("sim_xform");
    generate(c, 1, dir);
    const Json t = read_json(dir / "truth/transforms.json");
    const RigidTransform to_native = transform_from_json(t.at("positions")[1].at("reference_to_native"));
    CHECK((to_native.translation_mm - Vec3(5, 0, 0)).norm() < 1e-12);
    CHECK(to_native.rotation.isIdentity(1e-12));
    CHECK(t.at("positions")[1].at("motion_summary").at("net_translation_mm").get<double>() ==
          doctest::Approx(5.0 / std::sqrt(3.0)));

    const Volume sens_native = read_volume(dir / "truth/native_1/sens");
    const Volume sens_ref = read_volume(dir / "truth/sens_1");
    const Volume back = reslice(sens_native, to_native, sens_ref.grid());
    std::size_t used = 0;
    for (std::size_t n = 0; n < back.size(); ++n) {
        if (!std::isfinite(back[n])) continue;
        ++used;
        CHECK(std::abs(back[n] / sens_ref[n] - 1.0) < 2e-3);
    }
    CHECK(used > 20000);

    // the moved head lands on the reference head up to edge interpolation
    const Volume pd_native = read_volume(dir / "truth/native_1/pd");
    const Volume pd_ref = read_volume(dir / "truth/pd");
    const Volume pd_back = reslice(pd_native, to_native, pd_ref.grid());
    double err = 0.0, mass = 0.0;
    for (std::size_t n = 0; n < pd_back.size(); ++n)
        if (std::isfinite(pd_back[n])) err += std::abs(pd_back[n] - pd_ref[n]), mass += pd_ref[n];
    CHECK(err / mass < 0.05);
}
