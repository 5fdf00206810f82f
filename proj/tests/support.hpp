#pragma once

#include <cmath>
#include <filesystem>
#include <random>
#include <string>

#include "vfamc/simulate.hpp"
#include "vfamc/volume.hpp"

namespace testsupport {

inline vfamc::Volume random_volume(const vfamc::Grid& g, std::mt19937_64& rng, double lo, double hi) {
    std::uniform_real_distribution<double> u(lo, hi);
    vfamc::Volume v(g);
    for (std::size_t n = 0; n < v.size(); ++n) v[n] = u(rng);
    return v;
}

inline vfamc::Grid cube(int n, double h = 1.0) { return vfamc::Grid::centered({n, n, n}, vfamc::Vec3(h, h, h)); }

inline double max_abs_diff(const vfamc::Volume& a, const vfamc::Volume& b) {
    double m = 0.0;
    for (std::size_t n = 0; n < a.size(); ++n) m = std::max(m, std::abs(a[n] - b[n]));
    return m;
}

// Fresh scratch directory under the system temp directory.
inline std::filesystem::path scratch(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("vfamc_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

// Default head on a coarse 32^3 grid of 4 mm voxels, 8 mm calibration voxels.
inline vfamc::SimConfig small_sim() {
    vfamc::SimConfig c = vfamc::SimConfig::defaults();
    c.phantom.dims = {32, 32, 32};
    c.phantom.voxel_size_mm = vfamc::Vec3(4, 4, 4);
    c.protocol.calib_res_factor = 2;
    return c;
}

}  // namespace testsupport
