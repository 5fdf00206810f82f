#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "vfamc/io.hpp"
#include "vfamc/volume.hpp"

namespace vfamc {

using Labels = std::map<std::string, std::string>;

struct MaeReport {
    double mae_percent = 0.0;
    std::size_t n_voxels = 0;
    // |reference - estimate| / reference on the voxels used, NaN elsewhere.
    Volume error_volume;
    Labels labels;
};

// Masked mean absolute relative error in percent. Voxels count when mask > 0.5
// and both maps are finite there. Throws ConfigError when no voxel remains or
// the reference is not positive on a counted voxel.
MaeReport mae(const Volume& estimate, const Volume& reference, const Volume& mask, Labels labels = {});

// Voxel-wise mean over the finite entries; all-NaN voxels stay NaN.
Volume reference_map(std::span<const Volume> maps);

Json report_to_json(const MaeReport& r);
// Restores the scalar fields and labels; the error volume is not stored.
MaeReport report_from_json(const Json& j);

// Labels identifying replicates rather than conditions.
inline const std::vector<std::string> kReplicateKeys{"repeat", "pairing"};

struct ConditionRow {
    Labels labels;
    std::size_t n = 0;
    double mean = 0.0;
    double sd = 0.0;               // sample s.d. over all reports in the group
    bool single = false;           // n == 1, s.d. reported as 0
    double sd_across_repeats = 0;  // s.d. of per-repeat means
    double sd_across_pairings = 0; // s.d. of per-pairing means
};

// Groups reports by their non-replicate labels. Rows follow the order
// motion (no, yes), b1_mode (shared, per-contrast), method (none, ratio,
// generative), with other values sorted lexically after the known ones.
std::vector<ConditionRow> condition_table(std::span<const MaeReport> reports);

std::string table_to_csv(const std::vector<ConditionRow>& rows);
Json table_to_json(const std::vector<ConditionRow>& rows);

// Per-tissue histogram of `values` over voxels where mask > 0.5. Label voxels
// carry region indices; `tissue_of_label` maps each index to a tissue name.
std::string tissue_histograms_csv(const Volume& values, const Volume& labels, const Volume& mask,
                                  const std::vector<std::string>& tissue_of_label, double lo, double hi, int bins);

double sample_sd(std::span<const double> v);

}  // namespace vfamc
