#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "vfamc/eval.hpp"
#include "vfamc/genmodel.hpp"
#include "vfamc/io.hpp"
#include "vfamc/signal.hpp"
#include "vfamc/simulate.hpp"

namespace vfamc {

enum class Method { None, Ratio, Generative };

std::string to_string(Method m);
Method method_from_string(const std::string& s);
std::string to_string(B1Mode m);
B1Mode b1_mode_from_string(const std::string& s);

// A dataset directory as written by `generate`, with volumes loaded on demand.
class Dataset {
public:
    struct Acquisition {
        int index = 0;
        std::string contrast;
        int position = 0;
        double flip_angle_deg = 0.0;
        double tr_s = 0.0;
        std::string vfa, b1, calib, calib_body;
    };

    static Dataset load(const std::filesystem::path& dir);

    const std::filesystem::path& dir() const { return dir_; }
    const Json& manifest() const { return manifest_; }
    const std::vector<Acquisition>& acquisitions() const { return acqs_; }
    const Acquisition& acquisition(int index) const;
    // Reference-frame world -> native scanner frame of the acquisition's position.
    const RigidTransform& reference_to_native(int index) const;
    // Grid of acquisition 0, where maps are constructed and evaluated.
    const Grid& reference_grid() const { return reference_grid_; }

    const Volume& volume(const std::string& name) const;
    // Files read so far (relative path -> digest at read time).
    std::map<std::string, std::string> inputs_read() const;

private:
    std::filesystem::path dir_;
    Json manifest_;
    std::vector<Acquisition> acqs_;
    std::vector<RigidTransform> to_native_;
    Grid reference_grid_;
    mutable std::map<std::string, Volume> cache_;
};

// Native-space volume of acquisition `index` resampled onto the reference grid.
Volume to_reference(const Dataset& ds, int index, const std::string& name);

// Smoothed-ratio relative sensitivity s_pdw / s_t1w, computed on the PDw
// calibration grid and resampled onto the reference grid.
Volume ratio_delta(const Dataset& ds, int pdw, int t1w, double fwhm_mm);

struct GenerativeFit {
    GenModelState state;
    std::vector<CalibrationImage> images;  // resliced onto the fit grid
    std::vector<int> acquisition;          // acquisition index of each image
    Grid grid;
};

// Joint fit of the calibration images of `indices` (empty: all acquisitions)
// on the barycentre of their aligned grids; body-coil images join when
// `use_body_coil` is set and the dataset has them.
GenerativeFit fit_generative(const Dataset& ds, const std::vector<int>& indices, const FitConfig& config,
                             bool use_body_coil, const FitObserver& observer = {});

// exp(z_pdw - z_t1w) resampled onto the reference grid.
Volume generative_delta(const GenerativeFit& fit, int pdw, int t1w, const Grid& reference);

// R1 on the reference grid; `delta` may be null (no receive correction).
Volume pair_r1(const Dataset& ds, int pdw, int t1w, const Volume* delta, B1Mode mode);

struct PipelineConfig {
    std::filesystem::path dataset;
    std::optional<Json> simulation;  // generate into out_dir/data instead of reading `dataset`
    std::uint64_t seed = 0;
    int pdw = 0;
    int t1w = 1;
    Method method = Method::None;
    B1Mode b1_mode = B1Mode::Shared;
    double fwhm_mm = kDefaultFwhmMm;
    FitConfig fit;
    std::vector<int> fit_images;
    bool use_body_coil = false;
    std::filesystem::path reference;  // default: dataset truth/r1
    std::filesystem::path mask;       // default: dataset truth/mask
    std::filesystem::path out_dir;
    Labels labels;
};

// Relative paths resolve against `base_dir`.
PipelineConfig pipeline_config_from_json(const Json& j, const std::filesystem::path& base_dir = {});
Json to_json(const PipelineConfig& c);

struct PipelineResult {
    Volume r1;
    std::optional<Volume> delta;
    MaeReport report;
    std::filesystem::path manifest;
};

// reslice -> sensitivity estimation -> R1 -> evaluation, all outputs under
// out_dir together with manifest.json (config hash and file digests).
PipelineResult run_pipeline(const PipelineConfig& config);

struct BenchmarkConfig {
    Json simulation;
    std::uint64_t seed = 42;
    int repeats = 3;
    std::vector<Method> methods{Method::None, Method::Ratio, Method::Generative};
    std::vector<B1Mode> b1_modes{B1Mode::Shared, B1Mode::PerContrast};
    double fwhm_mm = kDefaultFwhmMm;
    FitConfig fit;
    bool use_body_coil = false;
    bool write_maps = false;
    std::string dataset_label = "synthetic";
    std::filesystem::path out_dir;
};

BenchmarkConfig benchmark_config_from_json(const Json& j, const std::filesystem::path& base_dir = {});
Json to_json(const BenchmarkConfig& c);

struct BenchmarkResult {
    std::vector<MaeReport> reports;
    std::vector<ConditionRow> table;
};

// Motion (no/yes) x method x B1 mode over the PDw/T1w pairings whose volumes
// sit at different positions, for each repeat. Every repeat simulates the
// configured protocol twice with one seed: as given, and with every position
// replaced by the reference position. Both are scored against the mean of the
// uncorrected, shared-B1 maps of the pairs acquired at the reference position.
BenchmarkResult full_benchmark(const BenchmarkConfig& config);

std::string version();

}  // namespace vfamc
