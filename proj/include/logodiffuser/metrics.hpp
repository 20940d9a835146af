#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "logodiffuser/matrix.hpp"

namespace logodiffuser::metrics {

/// Code-point equality after trimming surrounding whitespace. Case-sensitive.
bool exact_match(std::string_view predicted, std::string_view target);

struct CharF1Result {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

/// Bag-of-code-points overlap: |pred ∩ target| over |pred| and |target|,
/// after the same trim as exact_match. Two empty strings score 1; one empty
/// string scores 0.
CharF1Result char_f1(std::string_view predicted, std::string_view target);

/// Share of core rows' attention landing on masked patches
/// (1 - coreattn::off_mask_mass).
double mask_coverage(ConstMatrixView<double> map, std::span<const int> core_rows, std::span<const double> mask_fraction,
                     double threshold = 0.5);

struct SweepCell {
    double ratio = 0.0;
    int step = 0;
    std::string metric;
    double value = 0.0;
    std::string manifest;  // path or id of the run that produced it
};

/// Grid of metric values over (ratio, step). Ratios and steps ascend; metric
/// columns keep first-appearance order.
class SweepTable {
public:
    SweepTable() = default;
    SweepTable(std::vector<double> ratios, std::vector<int> steps, std::vector<std::string> metrics);

    const std::vector<double>& ratios() const noexcept { return ratios_; }
    const std::vector<int>& steps() const noexcept { return steps_; }
    const std::vector<std::string>& metrics() const noexcept { return metrics_; }

    std::optional<double> at(std::string_view metric, double ratio, int step) const;
    void set(std::string_view metric, double ratio, int step, double value);
    std::size_t row_count() const noexcept { return ratios_.size() * steps_.size(); }
    std::size_t missing_count() const;

    /// Header `ratio,step,<metric>...`, one row per (ratio, step), missing
    /// cells written as NA, LF line endings.
    std::string to_csv() const;

private:
    std::size_t index(std::size_t metric, std::size_t ratio, std::size_t step) const;

    std::vector<double> ratios_;
    std::vector<int> steps_;
    std::vector<std::string> metrics_;
    std::vector<std::optional<double>> values_;
};

/// Collects cells into a table. The grid is the union of the cells' ratios
/// and steps plus any extra `grid_ratios` / `grid_steps`, so cells that never
/// arrived show up as missing. Throws DuplicateCell.
SweepTable sweep_aggregate(std::span<const SweepCell> cells, std::span<const double> grid_ratios = {},
                           std::span<const int> grid_steps = {}, std::span<const std::string> metric_order = {});

/// Shortest round-trip decimal form.
std::string format_number(double v);

}  // namespace logodiffuser::metrics
