#include "logodiffuser/coreattn.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <string>

#include "logodiffuser/error.hpp"
#include "logodiffuser/hash.hpp"

namespace logodiffuser::coreattn {

const char* to_string(ScoreMode mode) noexcept {
    switch (mode) {
        case ScoreMode::RowMass: return "row_mass";
        case ScoreMode::RowMax: return "row_max";
        case ScoreMode::ColumnMass: return "column_mass";
        case ScoreMode::LayerVariance: return "layer_variance";
    }
    return "?";
}

ScoreMode parse_score_mode(std::string_view name) {
    for (ScoreMode m : {ScoreMode::RowMass, ScoreMode::RowMax, ScoreMode::ColumnMass, ScoreMode::LayerVariance}) {
        if (name == to_string(m)) return m;
    }
    throw Error(Errc::InvalidArgument, "unknown score mode '" + std::string(name) + "'");
}

bool CoreTokenSet::contains(int index) const { return std::binary_search(indices.begin(), indices.end(), index); }

const CoreTokenSet& InjectionPlan::at(int step, int layer) const {
    if (step < 0 || step >= cutoff_step || layer < 0 || layer >= layers) {
        throw Error(Errc::IndexOutOfRange, "plan has no set for (step " + std::to_string(step) + ", layer " +
                                               std::to_string(layer) + ")");
    }
    return sets[static_cast<std::size_t>(step) * layers + layer];
}

ScoreVector token_scores(std::span<const ConstMatrixView<float>> heads, ScoreMode mode) {
    if (mode == ScoreMode::LayerVariance) {
        throw Error(Errc::InvalidArgument, "layer_variance scores come from variance_scores");
    }
    if (heads.empty()) {
        throw Error(Errc::ShapeMismatch, "no attention maps given");
    }
    const std::size_t n = heads.front().rows;
    for (const auto& h : heads) {
        if (h.rows != n || h.cols != n) {
            throw Error(Errc::ShapeMismatch, "I2I maps must all be square and of equal size");
        }
    }
    ScoreVector out;
    out.mode = mode;
    out.scores.assign(n, 0.0);
    std::vector<double> per_head(n);
    for (const auto& a : heads) {
        switch (mode) {
            case ScoreMode::RowMass:
                for (std::size_t j = 0; j < n; ++j) {
                    double s = 0.0;
                    for (std::size_t k = 0; k < n; ++k) s += a(j, k);
                    per_head[j] = s;
                }
                break;
            case ScoreMode::RowMax:
                for (std::size_t j = 0; j < n; ++j) {
                    auto r = a.row(j);
                    per_head[j] = *std::max_element(r.begin(), r.end());
                }
                break;
            case ScoreMode::ColumnMass:
                std::fill(per_head.begin(), per_head.end(), 0.0);
                for (std::size_t i = 0; i < n; ++i) {
                    for (std::size_t j = 0; j < n; ++j) per_head[j] += a(i, j);
                }
                for (auto& v : per_head) v /= static_cast<double>(n);
                break;
            case ScoreMode::LayerVariance: break;
        }
        for (std::size_t j = 0; j < n; ++j) out.scores[j] += per_head[j];
    }
    for (auto& v : out.scores) v /= static_cast<double>(heads.size());
    return out;
}

ScoreVector variance_scores(std::span<const ScoreVector> layers) {
    if (layers.size() < 2) {
        throw Error(Errc::FewerThanTwoLayers, "variance needs at least two layers");
    }
    const std::size_t n = layers.front().scores.size();
    for (const auto& l : layers) {
        if (l.scores.size() != n) throw Error(Errc::ShapeMismatch, "score vectors differ in length");
        if (l.mode != layers.front().mode) throw Error(Errc::ModeMismatch, "score vectors differ in mode");
    }
    ScoreVector out;
    out.mode = ScoreMode::LayerVariance;
    out.step = layers.front().step;
    out.scores.resize(n);
    const double count = static_cast<double>(layers.size());
    for (std::size_t j = 0; j < n; ++j) {
        double mean = 0.0;
        for (const auto& l : layers) mean += l.scores[j];
        mean /= count;
        double var = 0.0;
        for (const auto& l : layers) {
            const double c = l.scores[j] - mean;
            var += c * c;
        }
        out.scores[j] = var / count;
    }
    return out;
}

CumulativeScore cumulative_update(const CumulativeScore& state, const ScoreVector& s) {
    if (state.layers == 0) {
        return CumulativeScore{s.scores, 1, s.mode};
    }
    if (s.mode != state.mode) {
        throw Error(Errc::ModeMismatch, std::string("cannot absorb ") + to_string(s.mode) + " into a " +
                                            to_string(state.mode) + " average");
    }
    if (s.scores.size() != state.mean.size()) {
        throw Error(Errc::ShapeMismatch, "score vector length differs from running mean");
    }
    CumulativeScore next = state;
    const double denom = static_cast<double>(state.layers + 1);
    for (std::size_t j = 0; j < next.mean.size(); ++j) {
        next.mean[j] += (s.scores[j] - next.mean[j]) / denom;
    }
    next.layers = state.layers + 1;
    return next;
}

std::size_t core_token_count(double ratio, std::size_t n) {
    const double k = std::ceil(ratio * static_cast<double>(n) - 1e-9);
    return std::min(n, static_cast<std::size_t>(std::max(0.0, k)));
}

CoreTokenSet select_core_tokens(const ScoreVector& s, double ratio) {
    if (!(ratio > 0.0 && ratio <= 1.0)) {
        throw Error(Errc::InvalidArgument, "ratio must lie in (0, 1]");
    }
    const std::size_t n = s.scores.size();
    const std::size_t k = core_token_count(ratio, n);
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    const auto& v = s.scores;
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(), [&](int a, int b) {
        return v[a] > v[b] || (v[a] == v[b] && a < b);
    });
    order.resize(k);
    std::sort(order.begin(), order.end());
    CoreTokenSet set;
    set.indices = std::move(order);
    set.ratio = ratio;
    set.step = s.step;
    set.layer = s.layer;
    set.mode = s.mode;
    return set;
}

InjectionPlan build_injection(const AttentionTrace& trace, const InjectionConfig& cfg) {
    if (!(cfg.ratio >= 0.0 && cfg.ratio <= 1.0)) {
        throw Error(Errc::InvalidArgument, "ratio must lie in [0, 1]");
    }
    if (cfg.cutoff_step < 0) {
        throw Error(Errc::InvalidArgument, "cutoff_step must be >= 0");
    }
    if (cfg.cutoff_step > 0 && trace.empty()) {
        throw Error(Errc::EmptyTrace, "trace holds no steps");
    }
    if (cfg.cutoff_step > trace.steps()) {
        throw Error(Errc::TraceMismatch, "cutoff step " + std::to_string(cfg.cutoff_step) + " exceeds the " +
                                             std::to_string(trace.steps()) + " traced steps");
    }
    InjectionPlan plan;
    plan.trace_checksum = trace.checksum();
    plan.cutoff_step = cfg.cutoff_step;
    plan.layers = trace.layers();
    plan.n_img = trace.n_img();
    plan.config = cfg;
    plan.sets.reserve(static_cast<std::size_t>(cfg.cutoff_step) * trace.layers());

    const bool variance = cfg.mode == ScoreMode::LayerVariance;
    const ScoreMode base_mode = variance ? ScoreMode::RowMass : cfg.mode;
    std::vector<ConstMatrixView<float>> heads(static_cast<std::size_t>(trace.heads()));

    for (int step = 0; step < cfg.cutoff_step; ++step) {
        std::vector<ScoreVector> per_layer;
        for (int layer = 0; layer < trace.layers(); ++layer) {
            for (int h = 0; h < trace.heads(); ++h) heads[static_cast<std::size_t>(h)] = trace.probabilities(step, layer, h);
            ScoreVector sv = token_scores(heads, base_mode);
            sv.step = step;
            sv.layer = layer;
            per_layer.push_back(std::move(sv));
        }

        auto make_set = [&](const ScoreVector& sv, int layer, bool averaged) {
            CoreTokenSet set;
            if (cfg.ratio > 0.0) set = select_core_tokens(sv, cfg.ratio);
            set.ratio = cfg.ratio;
            set.step = step;
            set.layer = layer;
            set.mode = cfg.mode;
            set.averaged = averaged;
            return set;
        };

        if (variance) {
            // One variance vector across all layers of the step, shared by every layer.
            ScoreVector var = variance_scores(per_layer);
            for (int layer = 0; layer < trace.layers(); ++layer) {
                plan.sets.push_back(make_set(var, layer, false));
            }
            continue;
        }
        CumulativeScore state;
        for (int layer = 0; layer < trace.layers(); ++layer) {
            const ScoreVector& sv = per_layer[static_cast<std::size_t>(layer)];
            if (cfg.averaging) {
                state = cumulative_update(state, sv);
                ScoreVector avg{state.mean, layer, step, sv.mode};
                plan.sets.push_back(make_set(avg, layer, true));
            } else {
                plan.sets.push_back(make_set(sv, layer, false));
            }
        }
    }
    return plan;
}

namespace {
void check_injection_shapes(ConstMatrixView<float> gen, ConstMatrixView<float> trace, std::span<const int> rows) {
    if (gen.rows != trace.rows || gen.cols != trace.cols) {
        throw Error(Errc::ShapeMismatch, "generation and trace logits differ in shape");
    }
    for (int r : rows) {
        if (r < 0 || static_cast<std::size_t>(r) >= gen.rows) {
            throw Error(Errc::IndexOutOfRange, "core token " + std::to_string(r) + " outside the I2I block");
        }
    }
}
}  // namespace

void apply_injection_in_place(MatrixView<float> gen, ConstMatrixView<float> trace, std::span<const int> rows) {
    check_injection_shapes(gen, trace, rows);
    for (int r : rows) {
        auto src = trace.row(static_cast<std::size_t>(r));
        std::copy(src.begin(), src.end(), gen.row(static_cast<std::size_t>(r)).begin());
    }
}

Matrix<float> apply_injection(ConstMatrixView<float> gen, ConstMatrixView<float> trace, const CoreTokenSet& set) {
    Matrix<float> out(gen.rows, gen.cols, std::vector<float>(gen.data, gen.data + gen.size()));
    apply_injection_in_place(out.view(), trace, set.indices);
    return out;
}

Matrix<double> head_average(std::span<const ConstMatrixView<float>> heads) {
    if (heads.empty()) {
        throw Error(Errc::ShapeMismatch, "no attention maps given");
    }
    const std::size_t rows = heads.front().rows;
    const std::size_t cols = heads.front().cols;
    Matrix<double> out(rows, cols, 0.0);
    for (const auto& h : heads) {
        if (h.rows != rows || h.cols != cols) throw Error(Errc::ShapeMismatch, "head maps differ in shape");
        for (std::size_t i = 0; i < h.size(); ++i) out.values()[i] += h.data[i];
    }
    for (auto& v : out.values()) v /= static_cast<double>(heads.size());
    return out;
}

double off_mask_mass(ConstMatrixView<double> map, std::span<const int> rows, std::span<const double> mask_fraction,
                     double threshold) {
    if (mask_fraction.size() != map.cols) {
        throw Error(Errc::ShapeMismatch, "mask fraction length does not match attention map");
    }
    if (rows.empty()) {
        throw Error(Errc::InvalidArgument, "no core rows given");
    }
    double total = 0.0;
    for (int j : rows) {
        if (j < 0 || static_cast<std::size_t>(j) >= map.rows) {
            throw Error(Errc::IndexOutOfRange, "core row " + std::to_string(j) + " outside the map");
        }
        double off = 0.0;
        double all = 0.0;
        for (std::size_t k = 0; k < map.cols; ++k) {
            const double a = map(static_cast<std::size_t>(j), k);
            all += a;
            if (mask_fraction[k] < threshold) off += a;
        }
        if (all == 0.0) {
            throw Error(Errc::ZeroRowMass, "row " + std::to_string(j) + " carries no attention mass");
        }
        total += off / all;
    }
    return total / static_cast<double>(rows.size());
}

std::vector<double> attention_shift(std::span<const ConstMatrixView<double>> layers, const CoreTokenSet& set,
                                    std::span<const double> mask_fraction, double threshold) {
    std::vector<double> out;
    out.reserve(layers.size());
    for (const auto& m : layers) out.push_back(off_mask_mass(m, set.indices, mask_fraction, threshold));
    return out;
}

namespace {
std::string format_double(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
}
}  // namespace

TensorFile InjectionPlan::to_file() const {
    TensorFile f;
    f.meta["kind"] = "plan";
    f.meta["trace_checksum"] = hex64(trace_checksum);
    f.meta["cutoff_step"] = std::to_string(cutoff_step);
    f.meta["layers"] = std::to_string(layers);
    f.meta["n_img"] = std::to_string(n_img);
    f.meta["ratio"] = format_double(config.ratio);
    f.meta["mode"] = to_string(config.mode);
    f.meta["averaging"] = config.averaging ? "1" : "0";
    const std::size_t k = sets.empty() ? 0 : sets.front().indices.size();
    std::vector<std::int32_t> flat;
    flat.reserve(sets.size() * k);
    for (const auto& s : sets) {
        if (s.indices.size() != k) throw Error(Errc::ShapeMismatch, "plan sets differ in size");
        flat.insert(flat.end(), s.indices.begin(), s.indices.end());
    }
    f.add<std::int32_t>("indices", flat,
                        {static_cast<std::size_t>(cutoff_step), static_cast<std::size_t>(layers), k});
    return f;
}

InjectionPlan InjectionPlan::from_file(const TensorFile& f) {
    if (f.meta.count("kind") == 0 || f.meta.at("kind") != "plan") {
        throw Error(Errc::MalformedHeader, "not an injection plan");
    }
    InjectionPlan p;
    p.trace_checksum = std::stoull(f.meta_at("trace_checksum"), nullptr, 16);
    p.cutoff_step = std::stoi(f.meta_at("cutoff_step"));
    p.layers = std::stoi(f.meta_at("layers"));
    p.n_img = std::stoi(f.meta_at("n_img"));
    const std::string& ratio = f.meta_at("ratio");
    std::from_chars(ratio.data(), ratio.data() + ratio.size(), p.config.ratio);
    p.config.cutoff_step = p.cutoff_step;
    p.config.mode = parse_score_mode(f.meta_at("mode"));
    p.config.averaging = f.meta_at("averaging") == "1";
    const TensorEntry& e = f.find("indices");
    if (e.shape.size() != 3 || e.shape[0] != static_cast<std::size_t>(p.cutoff_step) ||
        e.shape[1] != static_cast<std::size_t>(p.layers)) {
        throw Error(Errc::MalformedHeader, "plan indices have an unexpected shape");
    }
    const std::size_t k = e.shape[2];
    const auto flat = f.get<std::int32_t>("indices");
    for (int step = 0; step < p.cutoff_step; ++step) {
        for (int layer = 0; layer < p.layers; ++layer) {
            CoreTokenSet s;
            const auto base = (static_cast<std::size_t>(step) * p.layers + layer) * k;
            s.indices.assign(flat.begin() + static_cast<std::ptrdiff_t>(base),
                             flat.begin() + static_cast<std::ptrdiff_t>(base + k));
            s.ratio = p.config.ratio;
            s.step = step;
            s.layer = layer;
            s.mode = p.config.mode;
            s.averaged = p.config.averaging && p.config.mode != ScoreMode::LayerVariance;
            p.sets.push_back(std::move(s));
        }
    }
    return p;
}

TensorFile scores_to_file(const ScoreVector& s) {
    TensorFile f;
    f.meta["kind"] = "scores";
    f.meta["mode"] = to_string(s.mode);
    f.meta["layer"] = std::to_string(s.layer);
    f.meta["step"] = std::to_string(s.step);
    f.add<double>("scores", s.scores, {s.scores.size()});
    return f;
}

ScoreVector scores_from_file(const TensorFile& f) {
    ScoreVector s;
    s.scores = f.get<double>("scores");
    if (f.meta.count("mode")) s.mode = parse_score_mode(f.meta.at("mode"));
    if (f.meta.count("layer")) s.layer = std::stoi(f.meta.at("layer"));
    if (f.meta.count("step")) s.step = std::stoi(f.meta.at("step"));
    return s;
}

}  // namespace logodiffuser::coreattn
