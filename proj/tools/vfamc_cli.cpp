#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "vfamc/config.hpp"
#include "vfamc/error.hpp"
#include "vfamc/eval.hpp"
#include "vfamc/genmodel.hpp"
#include "vfamc/io.hpp"
#include "vfamc/pipeline.hpp"
#include "vfamc/ratio.hpp"
#include "vfamc/signal.hpp"
#include "vfamc/simulate.hpp"

namespace fs = std::filesystem;
using namespace vfamc;

namespace {

Labels parse_labels(const std::string& s) {
    Labels out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        const auto eq = item.find('=');
        if (eq == std::string::npos || eq == 0) throw ConfigError("labels: expected key=value, got '" + item + "'");
        out[item.substr(0, eq)] = item.substr(eq + 1);
    }
    return out;
}

VfaAcquisition load_acquisition(const fs::path& p, std::optional<double> flip, std::optional<double> tr,
                                const std::string& label) {
    Json side;
    VfaAcquisition a;
    a.image = read_volume(p, &side);
    a.label = label;
    const Json acq = side.value("acquisition", Json::object());
    if (flip) a.flip_angle_deg = *flip;
    else if (acq.contains("flip_angle_deg")) a.flip_angle_deg = acq.at("flip_angle_deg").get<double>();
    else throw ConfigError(p.string() + ": no flip angle in the sidecar; pass it explicitly");
    if (tr) a.tr_s = *tr;
    else if (acq.contains("tr_s")) a.tr_s = acq.at("tr_s").get<double>();
    else throw ConfigError(p.string() + ": no TR in the sidecar; pass it explicitly");
    return a;
}

Coil coil_of(const Json& side, Coil fallback) {
    const Json cal = side.value("calibration", Json::object());
    if (!cal.contains("coil")) return fallback;
    return cal.at("coil").get<std::string>() == "body" ? Coil::Body : Coil::Array;
}

int run_main(int argc, char** argv) {
    CLI::App app{"Inter-scan motion correction for variable flip angle R1 mapping"};
    app.require_subcommand(1);
    app.set_version_flag("--version", version());

    // simulate
    auto* sim = app.add_subcommand("simulate", "Generate a synthetic multi-position dataset");
    std::string sim_config, sim_out;
    std::uint64_t sim_seed = 42;
    sim->add_option("--config", sim_config, "Simulation config (JSON); built-in defaults when omitted");
    sim->add_option("--seed", sim_seed, "RNG seed");
    sim->add_option("--out-dir", sim_out, "Output dataset directory")->required();

    // reslice
    auto* rs = app.add_subcommand("reslice", "Trilinear reslice onto another volume's grid");
    std::string rs_in, rs_target, rs_transform, rs_out;
    bool rs_inverse = false;
    rs->add_option("--input", rs_in, "Source volume")->required();
    rs->add_option("--target", rs_target, "Volume defining the target grid")->required();
    rs->add_option("--transform", rs_transform, "Rigid transform JSON (target world -> source world)");
    rs->add_flag("--inverse", rs_inverse, "Invert the transform before use");
    rs->add_option("--out", rs_out, "Output volume")->required();

    // ratio-sens
    auto* ra = app.add_subcommand("ratio-sens", "Smoothed-ratio relative sensitivity");
    std::string ra_moving, ra_ref, ra_target, ra_out;
    double ra_fwhm = kDefaultFwhmMm;
    ra->add_option("--moving", ra_moving, "Calibration image k")->required();
    ra->add_option("--reference", ra_ref, "Reference calibration image")->required();
    ra->add_option("--fwhm", ra_fwhm, "Smoothing FWHM in mm (0 disables)");
    ra->add_option("--target", ra_target, "Resample the result onto this volume's grid");
    ra->add_option("--out", ra_out, "Output volume")->required();

    // fit-sens
    auto* fs_cmd = app.add_subcommand("fit-sens", "Generative fit of sensitivities and mean image");
    std::vector<std::string> fit_images, fit_body;
    FitConfig fit_cfg;
    std::string fit_sigma = "fixed-initial", fit_out;
    fs_cmd->add_option("--images", fit_images, "Array-coil calibration images (common grid)")->required();
    fs_cmd->add_option("--body", fit_body, "Body-coil calibration images");
    fs_cmd->add_option("--lambda-array", fit_cfg.lambda_array, "Regularisation for array-coil fields");
    fs_cmd->add_option("--lambda-body", fit_cfg.lambda_body, "Regularisation for body-coil fields");
    fs_cmd->add_option("--iters", fit_cfg.iterations, "Iterations");
    fs_cmd->add_option("--sigma-mode", fit_sigma, "fixed-initial or ml-update");
    fs_cmd->add_option("--tolerance", fit_cfg.tolerance, "Relative objective change for early stopping (0 = off)");
    fs_cmd->add_option("--out-dir", fit_out, "Output directory")->required();

    // compute-r1
    auto* r1c = app.add_subcommand("compute-r1", "Small flip angle R1 from a PDw/T1w pair");
    std::string r1_pdw, r1_t1w, r1_b1, r1_b1t, r1_delta, r1_out;
    std::optional<double> r1_pdw_flip, r1_t1w_flip, r1_pdw_tr, r1_t1w_tr;
    bool r1_clamp = false;
    r1c->add_option("--pdw", r1_pdw, "PDw volume")->required();
    r1c->add_option("--t1w", r1_t1w, "T1w volume on the same grid")->required();
    r1c->add_option("--b1", r1_b1, "Transmit map for the PDw volume (default: unity)");
    r1c->add_option("--b1-t1w", r1_b1t, "Transmit map for the T1w volume (per-contrast mode)");
    r1c->add_option("--delta", r1_delta, "Relative sensitivity s_pdw / s_t1w");
    r1c->add_option("--pdw-flip", r1_pdw_flip, "PDw flip angle in degrees (default: sidecar)");
    r1c->add_option("--t1w-flip", r1_t1w_flip, "T1w flip angle in degrees (default: sidecar)");
    r1c->add_option("--pdw-tr", r1_pdw_tr, "PDw TR in seconds (default: sidecar)");
    r1c->add_option("--t1w-tr", r1_t1w_tr, "T1w TR in seconds (default: sidecar)");
    r1c->add_flag("--clamp", r1_clamp, "Clamp R1 to [0, 10] s^-1");
    r1c->add_option("--out", r1_out, "Output R1 volume")->required();

    // evaluate
    auto* ev = app.add_subcommand("evaluate", "Masked mean absolute percentage error");
    std::string ev_est, ev_ref, ev_mask, ev_labels, ev_out, ev_err, ev_hist, ev_tissue;
    double ev_lo = 0.0, ev_hi = 2.5;
    int ev_bins = 100;
    ev->add_option("--estimate", ev_est, "Estimated R1")->required();
    ev->add_option("--reference", ev_ref, "Reference R1")->required();
    ev->add_option("--mask", ev_mask, "Mask volume (> 0.5 = in)")->required();
    ev->add_option("--labels", ev_labels, "Condition labels, key=value[,key=value]");
    ev->add_option("--out", ev_out, "Report JSON")->required();
    ev->add_option("--error-out", ev_err, "Write the relative error volume");
    ev->add_option("--histogram", ev_hist, "Write per-tissue histograms of the estimate (CSV)");
    ev->add_option("--tissue-labels", ev_tissue, "Label volume with region names in its sidecar");
    ev->add_option("--hist-min", ev_lo, "Histogram lower edge");
    ev->add_option("--hist-max", ev_hi, "Histogram upper edge");
    ev->add_option("--bins", ev_bins, "Histogram bins");

    // tabulate
    auto* tb = app.add_subcommand("tabulate", "Mean +- s.d. of reports grouped by condition");
    std::vector<std::string> tb_reports;
    std::string tb_out, tb_json;
    tb->add_option("--reports", tb_reports, "Report JSON files")->required();
    tb->add_option("--out", tb_out, "Table CSV")->required();
    tb->add_option("--json", tb_json, "Also write the table as JSON");

    // run
    auto* run = app.add_subcommand("run", "Run one pipeline configuration");
    std::string run_config, run_out;
    run->add_option("--config", run_config, "Pipeline config (JSON)")->required();
    run->add_option("--out-dir", run_out, "Override the configured output directory");

    // benchmark
    auto* bm = app.add_subcommand("benchmark", "Run the motion x correction x B1 condition grid");
    std::string bm_config, bm_out;
    std::optional<int> bm_repeats;
    bm->add_option("--config", bm_config, "Benchmark config (JSON)")->required();
    bm->add_option("--out-dir", bm_out, "Override the configured output directory");
    bm->add_option("--repeats", bm_repeats, "Override the number of noise repeats");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    if (*sim) {
        const SimConfig c = sim_config.empty() ? SimConfig::defaults() : sim_config_from_json(read_config(sim_config));
        generate(c, sim_seed, sim_out);
        std::cout << "wrote dataset to " << sim_out << "\n";
    } else if (*rs) {
        const Volume src = read_volume(rs_in);
        const Volume target = read_volume(rs_target);
        RigidTransform t;
        if (!rs_transform.empty()) t = transform_from_json(read_config(rs_transform));
        if (rs_inverse) t = t.inverse();
        Volume out = reslice(src, t, target.grid());
        out.intent = src.intent;
        write_volume(rs_out, out);
    } else if (*ra) {
        Json ms, rsd;
        CalibrationImage moving{read_volume(ra_moving, &ms), Coil::Array, 0};
        CalibrationImage reference{read_volume(ra_ref, &rsd), Coil::Array, 1};
        Volume d = ratio_relative_sensitivity(moving, reference, ra_fwhm);
        if (!ra_target.empty()) d = upsample_delta(d, read_volume(ra_target).grid());
        d.intent = "relative_sensitivity";
        write_volume(ra_out, d, {{"ratio", {{"fwhm_mm", ra_fwhm}}}});
    } else if (*fs_cmd) {
        fit_cfg.sigma_mode = sigma_mode_from_string(fit_sigma);
        std::vector<CalibrationImage> images;
        std::vector<std::string> sources;
        for (const auto& p : fit_images) {
            Json side;
            Volume v = read_volume(p, &side);
            images.push_back({std::move(v), coil_of(side, Coil::Array), static_cast<int>(images.size())});
            sources.push_back(p);
        }
        for (const auto& p : fit_body) {
            images.push_back({read_volume(p), Coil::Body, static_cast<int>(images.size())});
            sources.push_back(p);
        }
        const GenModelState st = fit(images, fit_cfg);
        fs::create_directories(fit_out);
        const fs::path out(fit_out);
        write_volume(out / "mean", st.mean);
        Json imgs = Json::array();
        for (std::size_t k = 0; k < st.fields.size(); ++k) {
            write_volume(out / ("sens_" + std::to_string(k)), st.fields[k].sensitivity());
            write_volume(out / ("logsens_" + std::to_string(k)), st.fields[k].log_field);
            imgs.push_back({{"source", sources[k]},
                            {"coil", images[k].coil == Coil::Body ? "body" : "array"},
                            {"lambda", st.fields[k].lambda}});
        }
        write_json(out / "trace.json", {{"objective_trace", st.objective_trace},
                                        {"noise_var", st.noise_var},
                                        {"halvings", st.halvings},
                                        {"images", imgs},
                                        {"config",
                                         {{"lambda_array", fit_cfg.lambda_array},
                                          {"lambda_body", fit_cfg.lambda_body},
                                          {"iterations", fit_cfg.iterations},
                                          {"sigma_mode", to_string(fit_cfg.sigma_mode)},
                                          {"tolerance", fit_cfg.tolerance}}}});
    } else if (*r1c) {
        const VfaAcquisition pdw = load_acquisition(r1_pdw, r1_pdw_flip, r1_pdw_tr, "PDw");
        const VfaAcquisition t1w = load_acquisition(r1_t1w, r1_t1w_flip, r1_t1w_tr, "T1w");
        const B1Map ft_p{r1_b1.empty() ? Volume(pdw.image.grid(), 1.0) : read_volume(r1_b1)};
        std::optional<B1Map> ft_t;
        if (!r1_b1t.empty()) ft_t = B1Map{read_volume(r1_b1t)};
        std::optional<Volume> delta;
        if (!r1_delta.empty()) delta = read_volume(r1_delta);
        R1Options opt;
        opt.clamp = r1_clamp;
        const Volume r1 = r1_vfa(pdw, t1w, delta ? &*delta : nullptr, ft_p, ft_t ? &*ft_t : nullptr, opt);
        write_volume(r1_out, r1, {{"b1_mode", ft_t ? "per-contrast" : "shared"}, {"clamped", r1_clamp}});
    } else if (*ev) {
        const Volume est = read_volume(ev_est);
        const Volume mask = read_volume(ev_mask);
        const MaeReport rep = mae(est, read_volume(ev_ref), mask, parse_labels(ev_labels));
        write_json(ev_out, report_to_json(rep));
        if (!ev_err.empty()) write_volume(ev_err, rep.error_volume);
        if (!ev_hist.empty()) {
            if (ev_tissue.empty()) throw ConfigError("--histogram needs --tissue-labels");
            Json side;
            const Volume labels = read_volume(ev_tissue, &side);
            std::vector<std::string> tissue_of;
            for (const auto& l : side.value("labels", Json::array())) tissue_of.push_back(l.value("tissue", "other"));
            write_text(ev_hist, tissue_histograms_csv(est, labels, mask, tissue_of, ev_lo, ev_hi, ev_bins));
        }
        std::cout << "MAE " << rep.mae_percent << " % over " << rep.n_voxels << " voxels\n";
    } else if (*tb) {
        std::vector<MaeReport> reports;
        for (const auto& p : tb_reports) {
            const Json j = read_config(p);
            if (j.is_array())
                for (const auto& r : j) reports.push_back(report_from_json(r));
            else
                reports.push_back(report_from_json(j));
        }
        const auto rows = condition_table(reports);
        write_text(tb_out, table_to_csv(rows));
        if (!tb_json.empty()) write_json(tb_json, table_to_json(rows));
    } else if (*run) {
        const fs::path path(run_config);
        PipelineConfig c = pipeline_config_from_json(read_config(path), path.parent_path());
        if (!run_out.empty()) c.out_dir = run_out;
        const PipelineResult r = run_pipeline(c);
        std::cout << "MAE " << r.report.mae_percent << " % (" << r.report.n_voxels << " voxels); manifest "
                  << r.manifest.string() << "\n";
    } else if (*bm) {
        const fs::path path(bm_config);
        BenchmarkConfig c = benchmark_config_from_json(read_config(path), path.parent_path());
        if (!bm_out.empty()) c.out_dir = bm_out;
        if (bm_repeats) {
            if (*bm_repeats < 1) throw ConfigError("--repeats must be >= 1");
            c.repeats = *bm_repeats;
        }
        const BenchmarkResult r = full_benchmark(c);
        std::cout << table_to_csv(r.table);
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run_main(argc, argv);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code(e.kind());
    } catch (const fs::filesystem_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code(ErrorKind::Io);
    } catch (const Json::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code(ErrorKind::Config);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
