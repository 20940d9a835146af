#pragma once

// Run orchestration shared by the CLI and the Python module: prompts and
// datasets, the flat run configuration, manifests, single runs and sweeps.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "logodiffuser/coreattn.hpp"
#include "logodiffuser/flow.hpp"
#include "logodiffuser/glyphkit.hpp"
#include "logodiffuser/metrics.hpp"
#include "logodiffuser/mmdit.hpp"
#include "logodiffuser/trace.hpp"

namespace logodiffuser::pipeline {

inline constexpr const char* version = "0.1.0";

struct PromptRecord {
    std::string word;
    std::string style;
    std::string lang;
    std::string prompt;

    bool operator==(const PromptRecord&) const = default;
};

/// "A text <word> logo decorated with <style>." Throws EmptyWord.
PromptRecord build_prompt(std::string_view word, std::string_view style, std::string_view lang = "");

/// JSON array of {"word", "style", "lang"} objects. Throws ConfigError.
std::vector<PromptRecord> parse_dataset(std::string_view json_text);
std::vector<PromptRecord> load_dataset(const std::filesystem::path& path);

struct GlyphSpec {
    std::string text = "AB";
    glyphkit::Layout layout = glyphkit::Layout::Horizontal;
    int scale = 0;     // 0 = largest scale that fits the canvas
    std::string path;  // PBM/PGM file; overrides text when set

    bool operator==(const GlyphSpec&) const = default;
};

struct PromptSpec {
    std::string word;   // defaults to the glyph text
    std::string style = "a bright neon sign";
    std::string lang = "en";
    std::string text;   // verbatim prompt; overrides word/style when set

    bool operator==(const PromptSpec&) const = default;
};

struct IoSpec {
    std::string output;    // generated image (PGM)
    std::string manifest;  // JSON
    std::string trace;
    std::string plan;
    std::string mask;  // glyph mask (PGM)
    std::string csv;   // sweep table

    bool operator==(const IoSpec&) const = default;
};

struct SweepSpec {
    std::vector<double> ratios{0.125, 0.25, 0.5, 0.75, 1.0};
    std::vector<int> steps{8, 10, 12, 15, 18};
    std::vector<std::string> metrics{"mask_coverage", "attention_shift", "glyph_fidelity"};
    int jobs = 1;

    bool operator==(const SweepSpec&) const = default;
};

/// Every setting of a run. Text form is one `key = value` per line, `#`
/// starts a comment; string values are JSON-quoted, lists comma-separated.
struct RunConfig {
    mmdit::ModelConfig model;
    flow::SamplerConfig sampler;
    coreattn::InjectionConfig injection;  // cutoff_step mirrors sampler.cutoff_step
    bool inject = true;
    GlyphSpec glyph;
    PromptSpec prompt;
    std::optional<std::string> predicted;  // caller-supplied reading of the output
    IoSpec io;
    SweepSpec sweep;

    /// Applies one key. Throws ConfigError on unknown keys or bad values.
    void set(std::string_view key, std::string_view value);
    /// Checks cross-field constraints. Throws ConfigError.
    void validate() const;
    std::string serialize() const;
    static RunConfig parse(std::string_view text);
    static RunConfig load(const std::filesystem::path& path);

    std::string rendered_prompt() const;
    std::string glyph_word() const;

    bool operator==(const RunConfig&) const = default;
};

/// Every key RunConfig understands, in serialization order.
const std::vector<std::string>& config_keys();

/// Hash of every setting that can change output bytes (everything except
/// io.* and sweep.jobs), the input checksums and the version string.
std::uint64_t config_hash(const RunConfig& cfg, std::uint64_t glyph_checksum);

glyphkit::GlyphImage load_glyph(const RunConfig& cfg);

/// Structure metrics of one generation: head-averaged I2I probabilities of
/// the conditional branch at the last sampling step, evaluated on the core
/// rows of the last injected step, averaged over layers.
struct StructureMetrics {
    double mask_coverage = 0.0;
    double attention_shift = 0.0;
    std::vector<double> shift_per_layer;
};

/// Core rows per layer at the last injected step, or nothing when no
/// injection happened.
std::optional<std::vector<std::vector<int>>> probe_rows(const coreattn::InjectionPlan* plan, int cutoff_step,
                                                        int layers);
StructureMetrics structure_metrics(const flow::GenerationResult& result,
                                   const std::vector<std::vector<int>>& rows_per_layer,
                                   const std::vector<double>& mask_fraction, int n_img);
/// Pearson correlation of output pixels with the glyph pixels; 0 when either
/// side is constant.
double glyph_fidelity(const std::vector<double>& pixels, const glyphkit::GlyphImage& glyph);

/// Capture flags used for the structure metrics (all layers and heads, I2I
/// probabilities).
mmdit::CaptureFlags metric_capture();

struct GenerateOutcome {
    glyphkit::GlyphImage glyph;
    flow::GenerationResult result;
    std::optional<AttentionTrace> trace;
    std::optional<coreattn::InjectionPlan> plan;
    nlohmann::ordered_json manifest;
};

/// rasterize -> reconstruct -> build_injection -> generate -> metrics.
/// Writes whatever io.* paths are set. Errors propagate.
GenerateOutcome run_generate(const RunConfig& cfg);

/// Manifest describing a failed command.
nlohmann::ordered_json error_manifest(const RunConfig* cfg, std::string_view command, const std::exception& e);

struct SweepFailure {
    double ratio = 0.0;
    int step = 0;
    std::string error;
};

struct SweepOutcome {
    metrics::SweepTable table;
    std::vector<metrics::SweepCell> cells;
    std::vector<SweepFailure> failures;
    std::size_t cell_count = 0;
    nlohmann::ordered_json manifest;
};

struct SweepHooks {
    /// Called before each cell is finalized; throwing marks it missing.
    std::function<void(double ratio, int step)> before_cell;
};

/// Every (ratio, cutoff step) cell of the grid with the same weights, glyph
/// and noise. One trace up to the largest step serves all cells. Throws
/// DuplicateCell; per-cell failures become missing cells.
SweepOutcome run_sweep(const RunConfig& cfg, const SweepHooks& hooks = {});

/// Min-max normalization to round(255 v); constant input maps to all zeros.
/// Throws ShapeMismatch unless values.size() == side * side.
std::vector<std::uint8_t> heatmap_pixels(const std::vector<double>& values, int side);
void export_heatmap(const std::vector<double>& values, int side, const std::filesystem::path& path);

}  // namespace logodiffuser::pipeline
