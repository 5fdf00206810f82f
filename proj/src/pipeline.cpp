#include "vfamc/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "vfamc/config.hpp"
#include "vfamc/error.hpp"
#include "vfamc/ratio.hpp"

#ifndef VFAMC_VERSION
#define VFAMC_VERSION "0.0.0"
#endif

namespace vfamc {

namespace fs = std::filesystem;

namespace {

constexpr int kSchemaVersion = 1;

fs::path resolve(const fs::path& p, const fs::path& base) {
    if (p.empty() || p.is_absolute() || base.empty()) return p;
    return base / p;
}

void make_dirs(const fs::path& p) {
    std::error_code ec;
    fs::create_directories(p, ec);
    if (ec) throw IoError("cannot create " + p.string() + ": " + ec.message());
}

Grid aligned_grid(const Grid& native, const RigidTransform& reference_to_native) {
    Grid g = native;
    g.affine = reference_to_native.inverse().matrix() * native.affine;
    return g;
}

template <typename F>
auto stage(const char* name, F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const Error& e) {
        rethrow_with_context(e, std::string("stage '") + name + "'");
    }
}

FitConfig fit_config_from_json(const Json& j, const std::string& ctx) {
    ObjectReader r(j, ctx);
    FitConfig f;
    f.lambda_array = r.get("lambda_array", f.lambda_array);
    f.lambda_body = r.get("lambda_body", f.lambda_body);
    f.iterations = r.get("iterations", f.iterations);
    if (r.has("sigma_mode")) f.sigma_mode = sigma_mode_from_string(r.require<std::string>("sigma_mode"));
    f.tolerance = r.get("tolerance", f.tolerance);
    f.solver_rtol = r.get("solver_rtol", f.solver_rtol);
    f.solver_max_cycles = r.get("solver_max_cycles", f.solver_max_cycles);
    f.max_halvings = r.get("max_halvings", f.max_halvings);
    r.finish();
    f.validate();
    return f;
}

Json fit_config_to_json(const FitConfig& f) {
    return {{"lambda_array", f.lambda_array},
            {"lambda_body", f.lambda_body},
            {"iterations", f.iterations},
            {"sigma_mode", to_string(f.sigma_mode)},
            {"tolerance", f.tolerance},
            {"solver_rtol", f.solver_rtol},
            {"solver_max_cycles", f.solver_max_cycles},
            {"max_halvings", f.max_halvings}};
}

std::map<std::string, std::string> digest_tree(const fs::path& root, const std::set<std::string>& skip) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(root)) {
        if (!e.is_regular_file()) continue;
        const std::string rel = fs::relative(e.path(), root).generic_string();
        if (skip.count(rel)) continue;
        out[rel] = sha256_file(e.path());
    }
    return out;
}

void check_pair(const Dataset& ds, int pdw, int t1w) {
    if (ds.acquisition(pdw).contrast != "PDw") throw ConfigError("acquisition " + std::to_string(pdw) + " is not PDw");
    if (ds.acquisition(t1w).contrast != "T1w") throw ConfigError("acquisition " + std::to_string(t1w) + " is not T1w");
}

struct PairInputs {
    VfaAcquisition pdw, t1w;
    B1Map ft_pdw, ft_t1w;
};

PairInputs prepare_pair(const Dataset& ds, int pdw, int t1w, B1Mode mode) {
    check_pair(ds, pdw, t1w);
    const auto& ap = ds.acquisition(pdw);
    const auto& at = ds.acquisition(t1w);
    PairInputs in;
    in.pdw = {to_reference(ds, pdw, ap.vfa), ap.flip_angle_deg, ap.tr_s, "PDw"};
    in.t1w = {to_reference(ds, t1w, at.vfa), at.flip_angle_deg, at.tr_s, "T1w"};
    in.ft_pdw = {to_reference(ds, pdw, ap.b1)};
    if (mode == B1Mode::PerContrast) in.ft_t1w = {to_reference(ds, t1w, at.b1)};
    return in;
}

Volume r1_from_inputs(const PairInputs& in, const Volume* delta, B1Mode mode) {
    return r1_vfa(in.pdw, in.t1w, delta, in.ft_pdw, mode == B1Mode::PerContrast ? &in.ft_t1w : nullptr);
}

Json acquisition_json(const VfaAcquisition& a) {
    return {{"acquisition", {{"flip_angle_deg", a.flip_angle_deg}, {"tr_s", a.tr_s}, {"label", a.label}}}};
}

std::string pairing_label(int pdw, int t1w) { return "pdw" + std::to_string(pdw) + "-t1w" + std::to_string(t1w); }

void write_fit(const fs::path& dir, const GenerativeFit& fit, const FitConfig& config) {
    make_dirs(dir);
    write_volume(dir / "mean", fit.state.mean);
    Json images = Json::array();
    for (std::size_t k = 0; k < fit.state.fields.size(); ++k) {
        Volume z = fit.state.fields[k].log_field;
        write_volume(dir / ("logsens_" + std::to_string(k)), z);
        write_volume(dir / ("sens_" + std::to_string(k)), fit.state.fields[k].sensitivity());
        images.push_back({{"acquisition", fit.acquisition[k]},
                          {"coil", fit.images[k].coil == Coil::Body ? "body" : "array"},
                          {"lambda", fit.state.fields[k].lambda}});
    }
    write_json(dir / "trace.json", {{"objective_trace", fit.state.objective_trace},
                                    {"noise_var", fit.state.noise_var},
                                    {"halvings", fit.state.halvings},
                                    {"images", images},
                                    {"grid", grid_to_json(fit.grid)},
                                    {"config", fit_config_to_json(config)}});
}

std::vector<Method> methods_from_json(const Json& j) {
    std::vector<Method> out;
    for (const auto& m : j) out.push_back(method_from_string(m.get<std::string>()));
    return out;
}

std::vector<B1Mode> b1_modes_from_json(const Json& j) {
    std::vector<B1Mode> out;
    for (const auto& m : j) out.push_back(b1_mode_from_string(m.get<std::string>()));
    return out;
}

}  // namespace

std::string version() { return VFAMC_VERSION; }

std::string to_string(Method m) {
    switch (m) {
        case Method::None: return "none";
        case Method::Ratio: return "ratio";
        case Method::Generative: return "generative";
    }
    return "none";
}

Method method_from_string(const std::string& s) {
    if (s == "none") return Method::None;
    if (s == "ratio") return Method::Ratio;
    if (s == "generative") return Method::Generative;
    throw ConfigError("unknown correction method '" + s + "' (expected none, ratio or generative)");
}

std::string to_string(B1Mode m) { return m == B1Mode::Shared ? "shared" : "per-contrast"; }

B1Mode b1_mode_from_string(const std::string& s) {
    if (s == "shared") return B1Mode::Shared;
    if (s == "per-contrast") return B1Mode::PerContrast;
    throw ConfigError("unknown b1 mode '" + s + "' (expected shared or per-contrast)");
}

Dataset Dataset::load(const fs::path& dir) {
    Dataset ds;
    ds.dir_ = dir;
    const fs::path mpath = dir / "manifest.json";
    if (!fs::exists(mpath)) throw IoError("dataset manifest not found: " + mpath.string());
    ds.manifest_ = read_json(mpath);
    try {
        if (ds.manifest_.value("kind", std::string()) != "vfamc-dataset")
            throw ConfigError(mpath.string() + " is not a dataset manifest");
        for (const auto& p : ds.manifest_.at("positions"))
            ds.to_native_.push_back(transform_from_json(p.at("reference_to_native")));
        for (const auto& a : ds.manifest_.at("acquisitions")) {
            Acquisition acq;
            acq.index = a.at("index").get<int>();
            acq.contrast = a.at("contrast").get<std::string>();
            acq.position = a.at("position").get<int>();
            acq.flip_angle_deg = a.at("flip_angle_deg").get<double>();
            acq.tr_s = a.at("tr_s").get<double>();
            acq.vfa = a.at("vfa").get<std::string>();
            acq.b1 = a.at("b1").get<std::string>();
            acq.calib = a.at("calib").get<std::string>();
            acq.calib_body = a.value("calib_body", std::string());
            if (acq.position < 0 || acq.position >= static_cast<int>(ds.to_native_.size()))
                throw ConfigError("dataset acquisition refers to an unknown position");
            if (acq.index != static_cast<int>(ds.acqs_.size()))
                throw ConfigError("dataset acquisitions must be listed in index order");
            ds.acqs_.push_back(acq);
        }
    } catch (const Json::exception& e) {
        throw ConfigError("malformed dataset manifest " + mpath.string() + ": " + e.what());
    }
    if (ds.acqs_.empty()) throw ConfigError("dataset has no acquisitions");
    ds.reference_grid_ = ds.volume(ds.acqs_[0].vfa).grid();
    return ds;
}

const Dataset::Acquisition& Dataset::acquisition(int index) const {
    if (index < 0 || index >= static_cast<int>(acqs_.size()))
        throw ConfigError("acquisition index " + std::to_string(index) + " out of range");
    return acqs_[static_cast<std::size_t>(index)];
}

const RigidTransform& Dataset::reference_to_native(int index) const {
    return to_native_.at(static_cast<std::size_t>(acquisition(index).position));
}

const Volume& Dataset::volume(const std::string& name) const {
    auto it = cache_.find(name);
    if (it != cache_.end()) return it->second;
    Volume v = read_volume(dir_ / name);
    return cache_.emplace(name, std::move(v)).first->second;
}

std::map<std::string, std::string> Dataset::inputs_read() const {
    std::map<std::string, std::string> out;
    for (const auto& [name, v] : cache_) {
        const fs::path base = dir_ / name;
        out[fs::relative(sidecar_path(base), dir_).generic_string()] = sha256_file(sidecar_path(base));
        out[fs::relative(raw_path(base), dir_).generic_string()] = sha256_file(raw_path(base));
    }
    out["manifest.json"] = sha256_file(dir_ / "manifest.json");
    return out;
}

Volume to_reference(const Dataset& ds, int index, const std::string& name) {
    return reslice(ds.volume(name), ds.reference_to_native(index), ds.reference_grid());
}

Volume ratio_delta(const Dataset& ds, int pdw, int t1w, double fwhm_mm) {
    check_pair(ds, pdw, t1w);
    const Volume& cal_p = ds.volume(ds.acquisition(pdw).calib);
    const Volume& cal_t = ds.volume(ds.acquisition(t1w).calib);
    const Grid target = aligned_grid(cal_p.grid(), ds.reference_to_native(pdw));
    CalibrationImage moving{reslice(cal_p, ds.reference_to_native(pdw), target), Coil::Array, pdw};
    CalibrationImage reference{reslice(cal_t, ds.reference_to_native(t1w), target), Coil::Array, t1w};
    Volume d = ratio_relative_sensitivity(moving, reference, fwhm_mm);
    return upsample_delta(d, ds.reference_grid());
}

GenerativeFit fit_generative(const Dataset& ds, const std::vector<int>& indices, const FitConfig& config,
                             bool use_body_coil, const FitObserver& observer) {
    std::vector<int> idx = indices;
    if (idx.empty())
        for (const auto& a : ds.acquisitions()) idx.push_back(a.index);

    struct Source {
        const Volume* image;
        Coil coil;
        int acquisition;
    };
    std::vector<Source> sources;
    for (int i : idx) {
        const auto& a = ds.acquisition(i);
        sources.push_back({&ds.volume(a.calib), Coil::Array, i});
        if (use_body_coil && !a.calib_body.empty()) sources.push_back({&ds.volume(a.calib_body), Coil::Body, i});
    }
    if (sources.size() < 2) throw ConfigError("generative fit needs at least two calibration images");

    std::vector<Grid> grids;
    for (const auto& s : sources) grids.push_back(aligned_grid(s.image->grid(), ds.reference_to_native(s.acquisition)));

    GenerativeFit fit;
    fit.grid = barycentre_grid(grids);
    for (const auto& s : sources) {
        fit.images.push_back({reslice(*s.image, ds.reference_to_native(s.acquisition), fit.grid), s.coil, s.acquisition});
        fit.acquisition.push_back(s.acquisition);
    }
    fit.state = vfamc::fit(fit.images, config, observer);
    return fit;
}

Volume generative_delta(const GenerativeFit& fit, int pdw, int t1w, const Grid& reference) {
    auto find = [&](int acq) {
        for (std::size_t k = 0; k < fit.images.size(); ++k)
            if (fit.acquisition[k] == acq && fit.images[k].coil == Coil::Array) return k;
        throw ConfigError("acquisition " + std::to_string(acq) + " was not part of the generative fit");
    };
    Volume d = relative_sensitivity(fit.state, find(pdw), find(t1w));
    return upsample_delta(d, reference);
}

Volume pair_r1(const Dataset& ds, int pdw, int t1w, const Volume* delta, B1Mode mode) {
    return r1_from_inputs(prepare_pair(ds, pdw, t1w, mode), delta, mode);
}

PipelineConfig pipeline_config_from_json(const Json& j, const fs::path& base_dir) {
    ObjectReader r(j, "pipeline");
    if (r.require<int>("schema_version") != kSchemaVersion) throw ConfigError("pipeline: unsupported schema_version");
    PipelineConfig c;
    if (r.has("dataset")) c.dataset = resolve(r.require<std::string>("dataset"), base_dir);
    if (r.has("simulation")) {
        const Json& s = r.raw("simulation");
        c.simulation = s.is_string() ? read_config(resolve(s.get<std::string>(), base_dir)) : s;
        sim_config_from_json(*c.simulation);
    }
    if (c.dataset.empty() == !c.simulation.has_value())
        throw ConfigError("pipeline: give exactly one of 'dataset' or 'simulation'");
    c.seed = r.get<std::uint64_t>("seed", 0);
    c.pdw = r.get("pdw", c.pdw);
    c.t1w = r.get("t1w", c.t1w);
    c.method = method_from_string(r.get<std::string>("method", "none"));
    c.b1_mode = b1_mode_from_string(r.get<std::string>("b1_mode", "shared"));
    c.fwhm_mm = r.get("fwhm_mm", c.fwhm_mm);
    if (!(c.fwhm_mm >= 0.0)) throw ConfigError("pipeline: fwhm_mm must be >= 0");
    if (r.has("fit")) c.fit = fit_config_from_json(r.raw("fit"), "pipeline.fit");
    c.fit_images = r.get("fit_images", c.fit_images);
    c.use_body_coil = r.get("use_body_coil", c.use_body_coil);
    if (r.has("reference")) c.reference = resolve(r.require<std::string>("reference"), base_dir);
    if (r.has("mask")) c.mask = resolve(r.require<std::string>("mask"), base_dir);
    if (r.has("out_dir")) c.out_dir = resolve(r.require<std::string>("out_dir"), base_dir);
    c.labels = r.get("labels", c.labels);
    r.finish();
    if (!c.dataset.empty() && !fs::exists(c.dataset / "manifest.json"))
        throw ConfigError("pipeline: dataset not found at " + c.dataset.string());
    for (const auto* p : {&c.reference, &c.mask})
        if (!p->empty() && !fs::exists(sidecar_path(*p))) throw ConfigError("pipeline: file not found: " + p->string());
    return c;
}

Json to_json(const PipelineConfig& c) {
    Json j = {{"schema_version", kSchemaVersion},
              {"seed", c.seed},
              {"pdw", c.pdw},
              {"t1w", c.t1w},
              {"method", to_string(c.method)},
              {"b1_mode", to_string(c.b1_mode)},
              {"fwhm_mm", c.fwhm_mm},
              {"fit", fit_config_to_json(c.fit)},
              {"fit_images", c.fit_images},
              {"use_body_coil", c.use_body_coil},
              {"out_dir", c.out_dir.generic_string()},
              {"labels", c.labels}};
    if (c.simulation) j["simulation"] = *c.simulation;
    else j["dataset"] = c.dataset.generic_string();
    if (!c.reference.empty()) j["reference"] = c.reference.generic_string();
    if (!c.mask.empty()) j["mask"] = c.mask.generic_string();
    return j;
}

PipelineResult run_pipeline(const PipelineConfig& config) {
    if (config.out_dir.empty()) throw ConfigError("run: out_dir is required");
    make_dirs(config.out_dir);
    fs::path data_dir = config.dataset;
    if (config.simulation) {
        data_dir = config.out_dir / "data";
        stage("simulate", [&] {
            generate(sim_config_from_json(*config.simulation), config.seed, data_dir);
            return 0;
        });
    }
    const Dataset ds = stage("load", [&] { return Dataset::load(data_dir); });
    const fs::path& out = config.out_dir;

    const PairInputs in = stage("reslice", [&] {
        PairInputs p = prepare_pair(ds, config.pdw, config.t1w, config.b1_mode);
        write_volume(out / "pdw", p.pdw.image, acquisition_json(p.pdw));
        write_volume(out / "t1w", p.t1w.image, acquisition_json(p.t1w));
        write_volume(out / "b1_pdw", p.ft_pdw.ft);
        if (config.b1_mode == B1Mode::PerContrast) write_volume(out / "b1_t1w", p.ft_t1w.ft);
        return p;
    });

    PipelineResult result;
    stage("sensitivity", [&] {
        if (config.method == Method::Ratio) {
            result.delta = ratio_delta(ds, config.pdw, config.t1w, config.fwhm_mm);
        } else if (config.method == Method::Generative) {
            const GenerativeFit fit = fit_generative(ds, config.fit_images, config.fit, config.use_body_coil);
            write_fit(out / "fit", fit, config.fit);
            result.delta = generative_delta(fit, config.pdw, config.t1w, ds.reference_grid());
        }
        if (result.delta) {
            result.delta->intent = "relative_sensitivity";
            write_volume(out / "delta", *result.delta);
        }
        return 0;
    });

    result.r1 = stage("r1", [&] { return r1_from_inputs(in, result.delta ? &*result.delta : nullptr, config.b1_mode); });
    write_volume(out / "r1", result.r1);

    stage("evaluate", [&] {
        const Volume reference = config.reference.empty() ? ds.volume("truth/r1") : read_volume(config.reference);
        const Volume mask = config.mask.empty() ? ds.volume("truth/mask") : read_volume(config.mask);
        Labels labels = config.labels;
        labels.emplace("method", to_string(config.method));
        labels.emplace("b1_mode", to_string(config.b1_mode));
        labels.emplace("pairing", pairing_label(config.pdw, config.t1w));
        labels.emplace("motion", ds.acquisition(config.pdw).position == ds.acquisition(config.t1w).position ? "no" : "yes");
        result.report = mae(result.r1, reference, mask, labels);
        write_volume(out / "error", result.report.error_volume);
        write_json(out / "report.json", report_to_json(result.report));
        return 0;
    });

    const Json cfg = to_json(config);
    std::set<std::string> skip{"manifest.json"};
    Json manifest = {{"schema_version", kSchemaVersion},
                     {"kind", "vfamc-run"},
                     {"version", version()},
                     {"config", cfg},
                     {"config_sha256", sha256_string(cfg.dump())},
                     {"stages", {"reslice", "sensitivity", "r1", "evaluate"}},
                     {"mae_percent", result.report.mae_percent},
                     {"inputs", ds.inputs_read()},
                     {"outputs", digest_tree(out, skip)}};
    result.manifest = out / "manifest.json";
    write_json(result.manifest, manifest);
    return result;
}

BenchmarkConfig benchmark_config_from_json(const Json& j, const fs::path& base_dir) {
    ObjectReader r(j, "benchmark");
    if (r.require<int>("schema_version") != kSchemaVersion) throw ConfigError("benchmark: unsupported schema_version");
    BenchmarkConfig c;
    if (r.has("simulation") == r.has("simulation_file"))
        throw ConfigError("benchmark: give exactly one of 'simulation' or 'simulation_file'");
    if (r.has("simulation")) c.simulation = r.raw("simulation");
    else c.simulation = read_config(resolve(r.require<std::string>("simulation_file"), base_dir));
    sim_config_from_json(c.simulation);
    c.seed = r.get<std::uint64_t>("seed", c.seed);
    c.repeats = r.get("repeats", c.repeats);
    if (c.repeats < 1) throw ConfigError("benchmark: repeats must be >= 1");
    try {
        if (r.has("methods")) c.methods = methods_from_json(r.raw("methods"));
        if (r.has("b1_modes")) c.b1_modes = b1_modes_from_json(r.raw("b1_modes"));
    } catch (const Json::exception& e) {
        throw ConfigError(std::string("benchmark: ") + e.what());
    }
    if (std::find(c.methods.begin(), c.methods.end(), Method::None) == c.methods.end() ||
        std::find(c.b1_modes.begin(), c.b1_modes.end(), B1Mode::Shared) == c.b1_modes.end())
        throw ConfigError("benchmark: method 'none' and b1 mode 'shared' are required for the reference map");
    c.fwhm_mm = r.get("fwhm_mm", c.fwhm_mm);
    if (!(c.fwhm_mm >= 0.0)) throw ConfigError("benchmark: fwhm_mm must be >= 0");
    if (r.has("fit")) c.fit = fit_config_from_json(r.raw("fit"), "benchmark.fit");
    c.use_body_coil = r.get("use_body_coil", c.use_body_coil);
    c.write_maps = r.get("write_maps", c.write_maps);
    c.dataset_label = r.get("dataset_label", c.dataset_label);
    if (r.has("out_dir")) c.out_dir = resolve(r.require<std::string>("out_dir"), base_dir);
    r.finish();
    return c;
}

Json to_json(const BenchmarkConfig& c) {
    Json methods = Json::array();
    for (auto m : c.methods) methods.push_back(to_string(m));
    Json modes = Json::array();
    for (auto m : c.b1_modes) modes.push_back(to_string(m));
    return {{"schema_version", kSchemaVersion},
            {"simulation", c.simulation},
            {"seed", c.seed},
            {"repeats", c.repeats},
            {"methods", methods},
            {"b1_modes", modes},
            {"fwhm_mm", c.fwhm_mm},
            {"fit", fit_config_to_json(c.fit)},
            {"use_body_coil", c.use_body_coil},
            {"write_maps", c.write_maps},
            {"dataset_label", c.dataset_label},
            {"out_dir", c.out_dir.generic_string()}};
}

BenchmarkResult full_benchmark(const BenchmarkConfig& config) {
    if (config.out_dir.empty()) throw ConfigError("benchmark: out_dir is required");
    const SimConfig sim = sim_config_from_json(config.simulation);
    make_dirs(config.out_dir);
    const bool want_ratio = std::find(config.methods.begin(), config.methods.end(), Method::Ratio) != config.methods.end();
    const bool want_gen =
        std::find(config.methods.begin(), config.methods.end(), Method::Generative) != config.methods.end();

    struct Pairing {
        int pdw, t1w;
    };
    std::vector<Pairing> reference_pairs, pairs;
    for (std::size_t p = 0; p < sim.acquisitions.size(); ++p) {
        if (sim.acquisitions[p].contrast != "PDw") continue;
        for (std::size_t t = 0; t < sim.acquisitions.size(); ++t) {
            if (sim.acquisitions[t].contrast != "T1w") continue;
            const int pp = sim.acquisitions[p].position, tp = sim.acquisitions[t].position;
            if (pp == 0 && tp == 0) reference_pairs.push_back({static_cast<int>(p), static_cast<int>(t)});
            else if (pp != tp) pairs.push_back({static_cast<int>(p), static_cast<int>(t)});
        }
    }
    if (reference_pairs.empty()) throw ConfigError("benchmark: no PDw/T1w pair at the reference position");
    if (pairs.empty()) throw ConfigError("benchmark: no PDw/T1w pair across positions");
    const SimConfig still = without_motion(sim);

    BenchmarkResult result;
    for (int rep = 0; rep < config.repeats; ++rep) {
        const fs::path rep_dir = config.out_dir / ("repeat_" + std::to_string(rep));
        const std::uint64_t seed = config.seed + static_cast<std::uint64_t>(rep);
        if (config.write_maps) make_dirs(rep_dir / "maps");
        const fs::path rdir = rep_dir / "reports";
        make_dirs(rdir);

        struct Cell {
            Labels labels;
            Volume r1;
        };
        std::vector<Cell> cells;
        std::optional<Volume> reference, mask;
        // Volumes at the reference position are identical in both datasets,
        // so the no-motion one alone defines the reference map.
        for (const bool motion : {false, true}) {
            const std::string tag = motion ? "yes" : "no";
            const fs::path data_dir = rep_dir / ("data_motion_" + tag);
            stage("simulate", [&] {
                generate(motion ? sim : still, seed, data_dir);
                return 0;
            });
            const Dataset ds = Dataset::load(data_dir);

            if (!reference) {
                stage("reference", [&] {
                    std::vector<Volume> maps;
                    for (const auto& pr : reference_pairs)
                        maps.push_back(r1_from_inputs(prepare_pair(ds, pr.pdw, pr.t1w, B1Mode::Shared), nullptr,
                                                      B1Mode::Shared));
                    reference = reference_map(maps);
                    mask = ds.volume("truth/mask");
                    write_volume(rep_dir / "reference_r1", *reference);
                    return 0;
                });
            }

            std::optional<GenerativeFit> fit;
            if (want_gen)
                fit = stage("generative fit", [&] { return fit_generative(ds, {}, config.fit, config.use_body_coil); });

            stage("r1", [&] {
                for (const auto& pr : pairs) {
                    std::optional<Volume> d_ratio, d_gen;
                    if (want_ratio) d_ratio = ratio_delta(ds, pr.pdw, pr.t1w, config.fwhm_mm);
                    if (want_gen) d_gen = generative_delta(*fit, pr.pdw, pr.t1w, ds.reference_grid());
                    for (B1Mode mode : config.b1_modes) {
                        const PairInputs in = prepare_pair(ds, pr.pdw, pr.t1w, mode);
                        for (Method m : config.methods) {
                            const Volume* d =
                                m == Method::Ratio ? &*d_ratio : m == Method::Generative ? &*d_gen : nullptr;
                            cells.push_back({{{"dataset", config.dataset_label},
                                              {"motion", tag},
                                              {"method", to_string(m)},
                                              {"b1_mode", to_string(mode)},
                                              {"repeat", std::to_string(rep)},
                                              {"pairing", pairing_label(pr.pdw, pr.t1w)}},
                                             r1_from_inputs(in, d, mode)});
                        }
                    }
                }
                return 0;
            });
        }

        stage("evaluate", [&] {
            for (auto& cell : cells) {
                MaeReport rep_report = mae(cell.r1, *reference, *mask, cell.labels);
                const std::string name = cell.labels.at("motion") + "_" + cell.labels.at("method") + "_" +
                                         cell.labels.at("b1_mode") + "_" + cell.labels.at("pairing");
                write_json(rdir / (name + ".json"), report_to_json(rep_report));
                if (config.write_maps) write_volume(rep_dir / "maps" / name, cell.r1);
                rep_report.error_volume = Volume();
                result.reports.push_back(std::move(rep_report));
            }
            return 0;
        });
    }

    result.table = condition_table(result.reports);
    write_text(config.out_dir / "table.csv", table_to_csv(result.table));
    write_json(config.out_dir / "table.json", table_to_json(result.table));
    Json reports = Json::array();
    for (const auto& r : result.reports) reports.push_back(report_to_json(r));
    write_json(config.out_dir / "reports.json", reports);

    const Json cfg = to_json(config);
    write_json(config.out_dir / "manifest.json", {{"schema_version", kSchemaVersion},
                                                  {"kind", "vfamc-benchmark"},
                                                  {"version", version()},
                                                  {"config", cfg},
                                                  {"config_sha256", sha256_string(cfg.dump())},
                                                  {"outputs", digest_tree(config.out_dir, {"manifest.json"})}});
    return result;
}

}  // namespace vfamc
