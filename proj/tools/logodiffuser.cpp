// logodiffuser command-line front end.
//
// Exit codes: 0 ok, 1 failure, 2 bad configuration or usage,
// 3 non-finite activations, 4 sweep finished with missing cells.

#include <cmath>
#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "logodiffuser/coreattn.hpp"
#include "logodiffuser/error.hpp"
#include "logodiffuser/flow.hpp"
#include "logodiffuser/glyphkit.hpp"
#include "logodiffuser/hash.hpp"
#include "logodiffuser/pipeline.hpp"
#include "logodiffuser/tensor_file.hpp"
#include "logodiffuser/trace.hpp"

namespace ld = logodiffuser;
using nlohmann::ordered_json;

namespace {

enum Exit { ok = 0, failure = 1, config_error = 2, numeric_error = 3, partial_sweep = 4 };

int exit_code_for(const std::exception& e) {
    if (const auto* err = dynamic_cast<const ld::Error*>(&e)) {
        switch (err->code()) {
            case ld::Errc::ConfigError:
            case ld::Errc::DuplicateCell:  // only reachable from a repeated grid value in the config
                return config_error;
            case ld::Errc::NonFiniteActivation: return numeric_error;
            default: return failure;
        }
    }
    return failure;
}

// Config file plus flag overrides; flags win.
struct ConfigArgs {
    std::string path;
    std::vector<std::pair<std::string, std::string>> overrides;
    std::vector<std::string> sets;  // raw key=value

    void add_value(CLI::App* app, const std::string& flag, const std::string& key, const std::string& help) {
        app->add_option_function<std::string>(
            flag, [this, key](const std::string& v) { overrides.emplace_back(key, v); }, help);
    }
    void add_flag(CLI::App* app, const std::string& flag, const std::string& key, const std::string& value,
                  const std::string& help) {
        app->add_flag_callback(
            flag, [this, key, value] { overrides.emplace_back(key, value); }, help);
    }

    void attach(CLI::App* app) {
        app->add_option("-c,--config", path, "run configuration (key = value lines)");
        add_value(app, "--steps", "sampler.steps", "sampling steps");
        add_value(app, "--guidance", "sampler.guidance", "classifier-free guidance scale");
        add_value(app, "--cutoff", "sampler.cutoff", "inject during steps below this one");
        add_value(app, "--seed-weights", "model.seed", "weight initialization seed");
        add_value(app, "--seed-noise", "sampler.seed", "sampling noise seed");
        add_value(app, "--ratio", "injection.ratio", "core-token ratio");
        add_value(app, "--mode", "injection.mode", "row_mass | row_max | column_mass | layer_variance");
        add_flag(app, "--no-averaging", "injection.averaging", "false", "select per layer, no running mean");
        add_flag(app, "--no-injection", "injection.enabled", "false", "plain sampling baseline");
        add_value(app, "--text", "glyph.text", "glyph text to rasterize");
        add_value(app, "--layout", "glyph.layout", "horizontal | vertical | diagonal");
        add_value(app, "--scale", "glyph.scale", "font pixel size");
        add_value(app, "--glyph", "glyph.path", "glyph bitmap (PBM/PGM) instead of text");
        add_value(app, "--word", "prompt.word", "prompt word (defaults to the glyph text)");
        add_value(app, "--style", "prompt.style", "prompt decoration");
        add_value(app, "--prompt", "prompt.text", "verbatim prompt");
        add_value(app, "--predicted", "metrics.predicted", "text read back from the output");
        add_value(app, "--manifest", "io.manifest", "manifest path (JSON)");
        app->add_option("--set", sets, "extra key=value overrides");
    }

    ld::pipeline::RunConfig load() const {
        ld::pipeline::RunConfig cfg = path.empty() ? ld::pipeline::RunConfig{} : ld::pipeline::RunConfig::load(path);
        for (const auto& [k, v] : overrides) cfg.set(k, v);
        for (const auto& kv : sets) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos) {
                throw ld::Error(ld::Errc::ConfigError, "--set expects key=value, got '" + kv + "'");
            }
            cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
        }
        cfg.validate();
        return cfg;
    }
};

void print_json(const ordered_json& j) { std::cout << j.dump(2) << "\n"; }

int cmd_rasterize(const ConfigArgs& args, const std::string& output) {
    const auto cfg = args.load();
    const auto glyph = ld::pipeline::load_glyph(cfg);
    if (!output.empty()) ld::glyphkit::write_pgm(output, glyph.width, glyph.height, ld::glyphkit::quantize(glyph.pixels));
    if (!cfg.io.mask.empty()) ld::glyphkit::write_mask_pgm(cfg.io.mask, glyph);
    print_json({{"text", glyph.text},
                {"layout", ld::glyphkit::to_string(glyph.layout)},
                {"width", glyph.width},
                {"height", glyph.height},
                {"mask_pixels", glyph.mask_count()},
                {"checksum", ld::hex64(glyph.checksum())},
                {"warnings", glyph.warnings}});
    return ok;
}

int cmd_reconstruct(const ConfigArgs& args, const std::string& output) {
    const auto cfg = args.load();
    const auto glyph = ld::pipeline::load_glyph(cfg);
    const auto w = ld::mmdit::init_model(cfg.model);
    const auto trace = ld::flow::reconstruct_capture(w, glyph, cfg.sampler.recon_prompt, cfg.sampler);
    const std::string path = output.empty() ? cfg.io.trace : output;
    if (path.empty()) throw ld::Error(ld::Errc::ConfigError, "reconstruct needs -o or io.trace");
    trace.save(path);
    print_json({{"trace", path},
                {"steps", trace.steps()},
                {"layers", trace.layers()},
                {"heads", trace.heads()},
                {"n_img", trace.n_img()},
                {"checksum", ld::hex64(trace.checksum())},
                {"config_hash", ld::hex64(trace.config_hash())}});
    return ok;
}

int cmd_generate(const ConfigArgs& args, const std::string& output) {
    ld::pipeline::RunConfig cfg;
    try {
        cfg = args.load();
    } catch (const std::exception& e) {
        print_json(ld::pipeline::error_manifest(nullptr, "generate", e));
        return exit_code_for(e);
    }
    if (!output.empty()) cfg.io.output = output;
    try {
        const auto outcome = ld::pipeline::run_generate(cfg);
        ordered_json summary = outcome.manifest;
        summary.erase("steps");
        summary.erase("config");
        print_json(summary);
        return ok;
    } catch (const std::exception& e) {
        const auto m = ld::pipeline::error_manifest(&cfg, "generate", e);
        if (!cfg.io.manifest.empty()) {
            try {
                ld::write_file(cfg.io.manifest, m.dump(2) + "\n");
            } catch (const std::exception&) {
            }
        }
        print_json(m);
        return exit_code_for(e);
    }
}

std::vector<double> selection_scores(const ld::AttentionTrace& trace, const ld::coreattn::InjectionConfig& ic,
                                     int step, int layer) {
    namespace ca = ld::coreattn;
    const ca::ScoreMode base = ic.mode == ca::ScoreMode::LayerVariance ? ca::ScoreMode::RowMass : ic.mode;
    std::vector<ca::ScoreVector> layers;
    for (int l = 0; l < trace.layers(); ++l) {
        std::vector<ld::ConstMatrixView<float>> heads;
        for (int h = 0; h < trace.heads(); ++h) heads.push_back(trace.probabilities(step, l, h));
        layers.push_back(ca::token_scores(heads, base));
    }
    if (ic.mode == ca::ScoreMode::LayerVariance) return ca::variance_scores(layers).scores;
    if (!ic.averaging) return layers[static_cast<std::size_t>(layer)].scores;
    ca::CumulativeScore state;
    for (int l = 0; l <= layer; ++l) state = ca::cumulative_update(state, layers[static_cast<std::size_t>(l)]);
    return state.mean;
}

int cmd_analyze(const ConfigArgs& args, const std::string& trace_path, const std::string& output,
                const std::string& scores_out, const std::string& heatmap_out, int step, int layer) {
    const auto cfg = args.load();
    const auto trace = ld::AttentionTrace::load(trace_path);
    ld::coreattn::InjectionConfig ic = cfg.injection;
    ic.cutoff_step = std::min(cfg.sampler.cutoff_step, trace.steps());
    const auto plan = ld::coreattn::build_injection(trace, ic);
    if (!output.empty()) plan.save(output);

    ordered_json sets = ordered_json::array();
    for (const auto& s : plan.sets) sets.push_back({{"step", s.step}, {"layer", s.layer}, {"indices", s.indices}});
    ordered_json report{{"trace_checksum", ld::hex64(trace.checksum())},
                        {"cutoff", ic.cutoff_step},
                        {"ratio", ic.ratio},
                        {"mode", ld::coreattn::to_string(ic.mode)},
                        {"averaging", ic.averaging},
                        {"sets", sets}};

    // Off-mask mass of the selected rows on the traced maps, when the glyph is known.
    if (!cfg.glyph.text.empty() || !cfg.glyph.path.empty()) {
        const auto glyph = ld::pipeline::load_glyph(cfg);
        const auto mask = ld::glyphkit::glyph_mask_patches(glyph, cfg.model.patch);
        ordered_json shift = ordered_json::array();
        if (ic.ratio > 0.0 && static_cast<int>(mask.size()) == trace.n_img()) {
            for (int s = 0; s < ic.cutoff_step; ++s) {
                std::vector<double> per_layer;
                for (int l = 0; l < trace.layers(); ++l) {
                    std::vector<ld::ConstMatrixView<float>> heads;
                    for (int h = 0; h < trace.heads(); ++h) heads.push_back(trace.probabilities(s, l, h));
                    const auto avg = ld::coreattn::head_average(heads);
                    per_layer.push_back(ld::coreattn::off_mask_mass(avg.view(), plan.at(s, l).indices, mask));
                }
                shift.push_back(per_layer);
            }
        }
        report["attention_shift"] = shift;
    }

    if (!scores_out.empty() || !heatmap_out.empty()) {
        if (step < 0 || step >= trace.steps() || layer < 0 || layer >= trace.layers()) {
            throw ld::Error(ld::Errc::IndexOutOfRange, "--step/--layer outside the trace");
        }
        ld::coreattn::ScoreVector sv;
        sv.scores = selection_scores(trace, ic, step, layer);
        sv.step = step;
        sv.layer = layer;
        sv.mode = ic.mode;
        if (!scores_out.empty()) ld::coreattn::scores_to_file(sv).save(scores_out);
        if (!heatmap_out.empty()) {
            const int side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(sv.scores.size()))));
            ld::pipeline::export_heatmap(sv.scores, side, heatmap_out);
        }
    }
    print_json(report);
    return ok;
}

int cmd_sweep(const ConfigArgs& args, const std::string& csv, const std::optional<int>& jobs) {
    auto cfg = args.load();
    if (!csv.empty()) cfg.io.csv = csv;
    if (jobs) cfg.set("sweep.jobs", std::to_string(*jobs));
    ld::pipeline::SweepOutcome out;
    try {
        out = ld::pipeline::run_sweep(cfg);
    } catch (const std::exception& e) {
        const auto m = ld::pipeline::error_manifest(&cfg, "sweep", e);
        if (!cfg.io.manifest.empty()) {
            try {
                ld::write_file(cfg.io.manifest, m.dump(2) + "\n");
            } catch (const std::exception&) {
            }
        }
        print_json(m);
        return exit_code_for(e);
    }
    if (cfg.io.csv.empty()) std::cout << out.table.to_csv();
    for (const auto& f : out.failures) {
        std::cerr << "cell ratio=" << ld::metrics::format_number(f.ratio) << " step=" << f.step
                  << " failed: " << f.error << "\n";
    }
    if (out.failures.empty()) return ok;
    return out.failures.size() == out.cell_count ? failure : partial_sweep;
}

int cmd_export_heatmap(const std::string& scores_path, const std::string& trace_path, int step, int layer, int head,
                       int row, int side, const std::string& output) {
    std::vector<double> values;
    if (!scores_path.empty()) {
        values = ld::coreattn::scores_from_file(ld::TensorFile::load(scores_path)).scores;
    } else if (!trace_path.empty()) {
        const auto trace = ld::AttentionTrace::load(trace_path);
        const auto map = trace.probabilities(step, layer, head);
        if (row < 0 || static_cast<std::size_t>(row) >= map.rows) {
            throw ld::Error(ld::Errc::IndexOutOfRange, "--row outside the attention map");
        }
        const auto r = map.row(static_cast<std::size_t>(row));
        values.assign(r.begin(), r.end());
    } else {
        throw ld::Error(ld::Errc::ConfigError, "export-heatmap needs --scores or --trace");
    }
    if (side <= 0) side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(values.size()))));
    ld::pipeline::export_heatmap(values, side, output);
    print_json({{"output", output}, {"side", side}, {"values", values.size()}});
    return ok;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Glyph-guided logo generation with a toy multimodal diffusion transformer"};
    app.require_subcommand(1);
    app.set_version_flag("--version", ld::pipeline::version);

    ConfigArgs rasterize_args, reconstruct_args, generate_args, analyze_args, sweep_args;
    std::string rasterize_out, reconstruct_out, generate_out, analyze_out, sweep_csv;
    std::string trace_path, scores_out, heatmap_out;
    int analyze_step = 0, analyze_layer = 0;
    std::optional<int> sweep_jobs;

    auto* rasterize = app.add_subcommand("rasterize", "render glyph text (or load a bitmap) to PGM");
    rasterize_args.attach(rasterize);
    rasterize->add_option("-o,--output", rasterize_out, "image path (PGM)");
    rasterize->add_option_function<std::string>(
        "--mask", [&](const std::string& v) { rasterize_args.overrides.emplace_back("io.mask", v); },
        "mask path (PGM)");

    auto* reconstruct = app.add_subcommand("reconstruct", "record I2I attention while reconstructing the glyph");
    reconstruct_args.attach(reconstruct);
    reconstruct->add_option("-o,--output", reconstruct_out, "trace path");

    auto* generate = app.add_subcommand("generate", "reconstruct, select core tokens, inject and sample");
    generate_args.attach(generate);
    generate->add_option("-o,--output", generate_out, "image path (PGM)");
    generate->add_option_function<std::string>(
        "--trace-out", [&](const std::string& v) { generate_args.overrides.emplace_back("io.trace", v); },
        "trace path");
    generate->add_option_function<std::string>(
        "--plan-out", [&](const std::string& v) { generate_args.overrides.emplace_back("io.plan", v); },
        "plan path");

    auto* analyze = app.add_subcommand("analyze", "score a trace and select core tokens");
    analyze_args.attach(analyze);
    analyze->add_option("--trace", trace_path, "trace path")->required();
    analyze->add_option("-o,--output", analyze_out, "plan path");
    analyze->add_option("--scores-out", scores_out, "selection scores of --step/--layer");
    analyze->add_option("--heatmap", heatmap_out, "selection scores of --step/--layer as PGM");
    analyze->add_option("--step", analyze_step, "0-based step for score dumps");
    analyze->add_option("--layer", analyze_layer, "layer for score dumps");

    auto* sweep = app.add_subcommand("sweep", "run the ratio x step grid and write a CSV table");
    sweep_args.attach(sweep);
    sweep->add_option("-o,--csv", sweep_csv, "CSV path (stdout when absent)");
    sweep->add_option("-j,--jobs", sweep_jobs, "worker threads");

    std::string heat_scores, heat_trace, heat_out;
    int heat_step = 0, heat_layer = 0, heat_head = 0, heat_row = 0, heat_side = 0;
    auto* heat = app.add_subcommand("export-heatmap", "write a score vector or attention row as PGM");
    heat->add_option("--scores", heat_scores, "score file");
    heat->add_option("--trace", heat_trace, "trace file");
    heat->add_option("--step", heat_step, "0-based step");
    heat->add_option("--layer", heat_layer, "layer");
    heat->add_option("--head", heat_head, "head");
    heat->add_option("--row", heat_row, "image token row");
    heat->add_option("--side", heat_side, "grid side (default sqrt of length)");
    heat->add_option("-o,--output", heat_out, "PGM path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? ok : config_error;
    }

    try {
        if (*rasterize) return cmd_rasterize(rasterize_args, rasterize_out);
        if (*reconstruct) return cmd_reconstruct(reconstruct_args, reconstruct_out);
        if (*generate) return cmd_generate(generate_args, generate_out);
        if (*analyze) {
            return cmd_analyze(analyze_args, trace_path, analyze_out, scores_out, heatmap_out, analyze_step,
                               analyze_layer);
        }
        if (*sweep) return cmd_sweep(sweep_args, sweep_csv, sweep_jobs);
        if (*heat) {
            return cmd_export_heatmap(heat_scores, heat_trace, heat_step, heat_layer, heat_head, heat_row, heat_side,
                                      heat_out);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code_for(e);
    }
    return failure;
}
