#include "logodiffuser/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <map>
#include <set>
#include <tuple>
#include <unordered_map>

#include "logodiffuser/coreattn.hpp"
#include "logodiffuser/error.hpp"
#include "logodiffuser/utf8.hpp"

namespace logodiffuser::metrics {

bool exact_match(std::string_view predicted, std::string_view target) {
    return trim(decode_utf8(predicted)) == trim(decode_utf8(target));
}

CharF1Result char_f1(std::string_view predicted, std::string_view target) {
    // same normalization as exact_match, so a match always scores 1
    const std::u32string p = trim(decode_utf8(predicted));
    const std::u32string t = trim(decode_utf8(target));
    if (p.empty() && t.empty()) return {1.0, 1.0, 1.0};
    if (p.empty() || t.empty()) return {0.0, 0.0, 0.0};

    std::unordered_map<char32_t, long> remaining;
    for (char32_t c : t) ++remaining[c];
    long overlap = 0;
    for (char32_t c : p) {
        auto it = remaining.find(c);
        if (it != remaining.end() && it->second > 0) {
            --it->second;
            ++overlap;
        }
    }
    CharF1Result r;
    r.precision = static_cast<double>(overlap) / static_cast<double>(p.size());
    r.recall = static_cast<double>(overlap) / static_cast<double>(t.size());
    r.f1 = r.precision + r.recall > 0.0 ? 2.0 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
    return r;
}

double mask_coverage(ConstMatrixView<double> map, std::span<const int> core_rows, std::span<const double> mask_fraction,
                     double threshold) {
    return 1.0 - coreattn::off_mask_mass(map, core_rows, mask_fraction, threshold);
}

std::string format_number(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
}

SweepTable::SweepTable(std::vector<double> ratios, std::vector<int> steps, std::vector<std::string> metrics)
    : ratios_(std::move(ratios)), steps_(std::move(steps)), metrics_(std::move(metrics)) {
    std::sort(ratios_.begin(), ratios_.end());
    ratios_.erase(std::unique(ratios_.begin(), ratios_.end()), ratios_.end());
    std::sort(steps_.begin(), steps_.end());
    steps_.erase(std::unique(steps_.begin(), steps_.end()), steps_.end());
    values_.assign(metrics_.size() * ratios_.size() * steps_.size(), std::nullopt);
}

std::size_t SweepTable::index(std::size_t metric, std::size_t ratio, std::size_t step) const {
    return (metric * ratios_.size() + ratio) * steps_.size() + step;
}

namespace {
template <class T>
std::optional<std::size_t> position(const std::vector<T>& v, const T& x) {
    auto it = std::find(v.begin(), v.end(), x);
    if (it == v.end()) return std::nullopt;
    return static_cast<std::size_t>(it - v.begin());
}
}  // namespace

std::optional<double> SweepTable::at(std::string_view metric, double ratio, int step) const {
    const auto m = position(metrics_, std::string(metric));
    const auto r = position(ratios_, ratio);
    const auto s = position(steps_, step);
    if (!m || !r || !s) return std::nullopt;
    return values_[index(*m, *r, *s)];
}

void SweepTable::set(std::string_view metric, double ratio, int step, double value) {
    const auto m = position(metrics_, std::string(metric));
    const auto r = position(ratios_, ratio);
    const auto s = position(steps_, step);
    if (!m || !r || !s) {
        throw Error(Errc::IndexOutOfRange, "cell (" + format_number(ratio) + ", " + std::to_string(step) + ", " +
                                               std::string(metric) + ") is outside the grid");
    }
    values_[index(*m, *r, *s)] = value;
}

std::size_t SweepTable::missing_count() const {
    return static_cast<std::size_t>(std::count(values_.begin(), values_.end(), std::nullopt));
}

std::string SweepTable::to_csv() const {
    std::string out = "ratio,step";
    for (const auto& m : metrics_) out += "," + m;
    out += "\n";
    for (std::size_t r = 0; r < ratios_.size(); ++r) {
        for (std::size_t s = 0; s < steps_.size(); ++s) {
            out += format_number(ratios_[r]) + "," + std::to_string(steps_[s]);
            for (std::size_t m = 0; m < metrics_.size(); ++m) {
                const auto& v = values_[index(m, r, s)];
                out += "," + (v ? format_number(*v) : std::string("NA"));
            }
            out += "\n";
        }
    }
    return out;
}

SweepTable sweep_aggregate(std::span<const SweepCell> cells, std::span<const double> grid_ratios,
                           std::span<const int> grid_steps, std::span<const std::string> metric_order) {
    std::set<std::tuple<double, int, std::string>> seen;
    std::vector<double> ratios(grid_ratios.begin(), grid_ratios.end());
    std::vector<int> steps(grid_steps.begin(), grid_steps.end());
    std::vector<std::string> metrics(metric_order.begin(), metric_order.end());
    for (const auto& c : cells) {
        if (!seen.emplace(c.ratio, c.step, c.metric).second) {
            throw Error(Errc::DuplicateCell, "duplicate cell (" + format_number(c.ratio) + ", " +
                                                 std::to_string(c.step) + ", " + c.metric + ")");
        }
        ratios.push_back(c.ratio);
        steps.push_back(c.step);
        if (std::find(metrics.begin(), metrics.end(), c.metric) == metrics.end()) metrics.push_back(c.metric);
    }
    SweepTable table(std::move(ratios), std::move(steps), std::move(metrics));
    for (const auto& c : cells) table.set(c.metric, c.ratio, c.step, c.value);
    return table;
}

}  // namespace logodiffuser::metrics
