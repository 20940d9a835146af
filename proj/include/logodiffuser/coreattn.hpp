#pragma once

// Core-token analysis: per-token attention statistics over I2I maps,
// layer-wise cumulative averaging, top-k selection and the injection plan
// that tells the sampler which I2I rows to replace at each (step, layer).

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "logodiffuser/matrix.hpp"
#include "logodiffuser/tensor_file.hpp"
#include "logodiffuser/trace.hpp"

namespace logodiffuser::coreattn {

enum class ScoreMode { RowMass, RowMax, ColumnMass, LayerVariance };

const char* to_string(ScoreMode mode) noexcept;
ScoreMode parse_score_mode(std::string_view name);

struct ScoreVector {
    std::vector<double> scores;
    int layer = -1;
    int step = -1;
    ScoreMode mode = ScoreMode::RowMass;
};

/// Running mean of score vectors absorbed one layer at a time.
struct CumulativeScore {
    std::vector<double> mean;
    int layers = 0;
    ScoreMode mode = ScoreMode::RowMass;
};

struct CoreTokenSet {
    std::vector<int> indices;  // ascending, distinct
    double ratio = 0.0;
    int step = -1;
    int layer = -1;
    ScoreMode mode = ScoreMode::RowMass;
    bool averaged = false;

    bool contains(int index) const;
};

struct InjectionConfig {
    double ratio = 0.125;
    int cutoff_step = 12;
    ScoreMode mode = ScoreMode::RowMass;
    bool averaging = true;

    bool operator==(const InjectionConfig&) const = default;
};

struct InjectionPlan {
    std::uint64_t trace_checksum = 0;
    int cutoff_step = 0;
    int layers = 0;
    int n_img = 0;
    InjectionConfig config;
    std::vector<CoreTokenSet> sets;  // [step][layer], step < cutoff_step

    const CoreTokenSet& at(int step, int layer) const;

    TensorFile to_file() const;
    static InjectionPlan from_file(const TensorFile& f);
    void save(const std::filesystem::path& path) const { to_file().save(path); }
    static InjectionPlan load(const std::filesystem::path& path) { return from_file(TensorFile::load(path)); }
};

/// Head-averaged statistic per image token j over a layer's I2I probability
/// maps (one per head, all N x N):
///   RowMass     sum_k A[j,k]
///   RowMax      max_k A[j,k]
///   ColumnMass  sum_i A[i,j] / N
/// LayerVariance is produced by variance_scores, not here.
ScoreVector token_scores(std::span<const ConstMatrixView<float>> heads, ScoreMode mode);

/// Per-token population variance across the given layers.
ScoreVector variance_scores(std::span<const ScoreVector> layers);

/// mean' = mean + (s - mean) / (L + 1). The first update adopts the mode of `s`.
CumulativeScore cumulative_update(const CumulativeScore& state, const ScoreVector& s);

/// The ceil(ratio * N) highest-scoring tokens, ties to the lower index,
/// returned in ascending index order. ratio must lie in (0, 1].
CoreTokenSet select_core_tokens(const ScoreVector& s, double ratio);

/// ceil(ratio * n) with a small tolerance so that e.g. 0.125 * 256 is 32.
std::size_t core_token_count(double ratio, std::size_t n);

/// Builds one core-token set per (step, layer) for steps < cutoff_step.
/// A ratio of 0 yields empty sets (injection that replaces nothing).
InjectionPlan build_injection(const AttentionTrace& trace, const InjectionConfig& cfg);

/// Copy of `gen` with each row listed in `set` taken from `trace`.
Matrix<float> apply_injection(ConstMatrixView<float> gen, ConstMatrixView<float> trace, const CoreTokenSet& set);
/// In-place variant used inside the attention hook.
void apply_injection_in_place(MatrixView<float> gen, ConstMatrixView<float> trace, std::span<const int> rows);

/// Element-wise mean over heads.
Matrix<double> head_average(std::span<const ConstMatrixView<float>> heads);

/// Mean over `rows` of the share of each row's mass falling on patches whose
/// mask fraction is below `threshold`. Throws ZeroRowMass for an all-zero row.
double off_mask_mass(ConstMatrixView<double> map, std::span<const int> rows, std::span<const double> mask_fraction,
                     double threshold = 0.5);

/// off_mask_mass for each layer's (head-averaged) map with the same rows.
std::vector<double> attention_shift(std::span<const ConstMatrixView<double>> layers, const CoreTokenSet& set,
                                    std::span<const double> mask_fraction, double threshold = 0.5);

TensorFile scores_to_file(const ScoreVector& s);
ScoreVector scores_from_file(const TensorFile& f);

}  // namespace logodiffuser::coreattn
