#include "logodiffuser/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "logodiffuser/error.hpp"
#include "logodiffuser/hash.hpp"
#include "logodiffuser/tensor_file.hpp"
#include "logodiffuser/utf8.hpp"

namespace logodiffuser::pipeline {

using nlohmann::ordered_json;

PromptRecord build_prompt(std::string_view word, std::string_view style, std::string_view lang) {
    if (word.empty()) throw Error(Errc::EmptyWord, "prompt word is empty");
    PromptRecord r;
    r.word = word;
    r.style = style;
    r.lang = lang;
    r.prompt = "A text " + r.word + " logo decorated with " + r.style + ".";
    return r;
}

std::vector<PromptRecord> parse_dataset(std::string_view json_text) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(json_text);
    } catch (const nlohmann::json::exception& e) {
        throw Error(Errc::ConfigError, std::string("dataset is not valid JSON: ") + e.what());
    }
    if (!doc.is_array()) throw Error(Errc::ConfigError, "dataset must be a JSON array");
    std::vector<PromptRecord> out;
    for (std::size_t i = 0; i < doc.size(); ++i) {
        const auto& rec = doc[i];
        auto field = [&](const char* name, bool required) -> std::string {
            if (!rec.is_object() || !rec.contains(name)) {
                if (required) {
                    throw Error(Errc::ConfigError, "dataset record " + std::to_string(i) + " lacks '" + name + "'");
                }
                return {};
            }
            if (!rec.at(name).is_string()) {
                throw Error(Errc::ConfigError,
                            "dataset record " + std::to_string(i) + ": '" + name + "' must be a string");
            }
            return rec.at(name).get<std::string>();
        };
        const std::string word = field("word", true);
        const std::string style = field("style", true);
        out.push_back(build_prompt(word, style, field("lang", false)));
    }
    return out;
}

std::vector<PromptRecord> load_dataset(const std::filesystem::path& path) {
    return parse_dataset(read_file(path));
}

// --- config ---------------------------------------------------------------------

namespace {

[[noreturn]] void bad_value(std::string_view key, std::string_view value, const char* expected) {
    throw Error(Errc::ConfigError,
                "bad value '" + std::string(value) + "' for " + std::string(key) + " (expected " + expected + ")");
}

template <class T>
T parse_number(std::string_view key, std::string_view v, const char* expected) {
    T out{};
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (v.empty() || ec != std::errc{} || ptr != v.data() + v.size()) bad_value(key, v, expected);
    if constexpr (std::is_floating_point_v<T>) {
        if (!std::isfinite(out)) bad_value(key, v, expected);
    }
    return out;
}

bool parse_bool(std::string_view key, std::string_view v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    bad_value(key, v, "true or false");
}

std::string trim_ascii(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(std::string_view v) {
    std::vector<std::string> out;
    if (trim_ascii(v).empty()) return out;
    std::size_t start = 0;
    while (true) {
        const auto comma = v.find(',', start);
        out.push_back(trim_ascii(v.substr(start, comma == std::string_view::npos ? v.npos : comma - start)));
        if (comma == std::string_view::npos) break;
        start = comma + 1;
    }
    return out;
}

std::string parse_string(std::string_view key, std::string_view v) {
    if (v.empty() || v.front() != '"') return std::string(v);
    try {
        const auto j = nlohmann::json::parse(v);
        if (j.is_string()) return j.get<std::string>();
    } catch (const nlohmann::json::exception&) {
    }
    bad_value(key, v, "a JSON string");
}

std::string quote(const std::string& s) { return nlohmann::json(s).dump(); }

std::string number(double v) { return metrics::format_number(v); }

template <class T>
std::string join(const std::vector<T>& values) {
    std::string out;
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (i) out += ",";
        if constexpr (std::is_same_v<T, double>) {
            out += number(values[i]);
        } else if constexpr (std::is_same_v<T, std::string>) {
            out += values[i];
        } else {
            out += std::to_string(values[i]);
        }
    }
    return out;
}

}  // namespace

const std::vector<std::string>& config_keys() {
    static const std::vector<std::string> keys{
        "model.d_model",    "model.heads",      "model.layers",       "model.patch",       "model.grid",
        "model.text_tokens", "model.seed",      "sampler.steps",      "sampler.guidance",  "sampler.cutoff",
        "sampler.seed",     "sampler.recon_prompt", "injection.enabled", "injection.ratio", "injection.mode",
        "injection.averaging", "glyph.text",    "glyph.layout",       "glyph.scale",       "glyph.path",
        "prompt.word",      "prompt.style",     "prompt.lang",        "prompt.text",       "metrics.predicted",
        "io.output",        "io.manifest",      "io.trace",           "io.plan",           "io.mask",
        "io.csv",           "sweep.ratios",     "sweep.steps",        "sweep.metrics",     "sweep.jobs",
    };
    return keys;
}

void RunConfig::set(std::string_view key, std::string_view raw) {
    const std::string v = trim_ascii(raw);
    auto as_int = [&] { return parse_number<int>(key, v, "an integer"); };
    auto as_double = [&] { return parse_number<double>(key, v, "a number"); };
    auto as_seed = [&] { return parse_number<std::uint64_t>(key, v, "an unsigned integer"); };

    if (key == "model.d_model") model.d_model = as_int();
    else if (key == "model.heads") model.n_heads = as_int();
    else if (key == "model.layers") model.n_layers = as_int();
    else if (key == "model.patch") model.patch = as_int();
    else if (key == "model.grid") model.grid = as_int();
    else if (key == "model.text_tokens") model.t_txt = as_int();
    else if (key == "model.seed") model.seed = as_seed();
    else if (key == "sampler.steps") sampler.steps = as_int();
    else if (key == "sampler.guidance") sampler.guidance = as_double();
    else if (key == "sampler.cutoff") sampler.cutoff_step = injection.cutoff_step = as_int();
    else if (key == "sampler.seed") sampler.noise_seed = as_seed();
    else if (key == "sampler.recon_prompt") sampler.recon_prompt = parse_string(key, v);
    else if (key == "injection.enabled") inject = parse_bool(key, v);
    else if (key == "injection.ratio") injection.ratio = as_double();
    else if (key == "injection.mode") {
        try {
            injection.mode = coreattn::parse_score_mode(v);
        } catch (const Error&) {
            bad_value(key, v, "row_mass, row_max, column_mass or layer_variance");
        }
    } else if (key == "injection.averaging") injection.averaging = parse_bool(key, v);
    else if (key == "glyph.text") glyph.text = parse_string(key, v);
    else if (key == "glyph.layout") {
        try {
            glyph.layout = glyphkit::parse_layout(v);
        } catch (const Error&) {
            bad_value(key, v, "horizontal, vertical or diagonal");
        }
    } else if (key == "glyph.scale") glyph.scale = as_int();
    else if (key == "glyph.path") glyph.path = parse_string(key, v);
    else if (key == "prompt.word") prompt.word = parse_string(key, v);
    else if (key == "prompt.style") prompt.style = parse_string(key, v);
    else if (key == "prompt.lang") prompt.lang = parse_string(key, v);
    else if (key == "prompt.text") prompt.text = parse_string(key, v);
    else if (key == "metrics.predicted") predicted = parse_string(key, v);
    else if (key == "io.output") io.output = parse_string(key, v);
    else if (key == "io.manifest") io.manifest = parse_string(key, v);
    else if (key == "io.trace") io.trace = parse_string(key, v);
    else if (key == "io.plan") io.plan = parse_string(key, v);
    else if (key == "io.mask") io.mask = parse_string(key, v);
    else if (key == "io.csv") io.csv = parse_string(key, v);
    else if (key == "sweep.ratios") {
        sweep.ratios.clear();
        for (const auto& item : split_list(v)) sweep.ratios.push_back(parse_number<double>(key, item, "numbers"));
    } else if (key == "sweep.steps") {
        sweep.steps.clear();
        for (const auto& item : split_list(v)) sweep.steps.push_back(parse_number<int>(key, item, "integers"));
    } else if (key == "sweep.metrics") sweep.metrics = split_list(v);
    else if (key == "sweep.jobs") sweep.jobs = as_int();
    else throw Error(Errc::ConfigError, "unknown config key '" + std::string(key) + "'");
}

void RunConfig::validate() const {
    try {
        model.validate();
        sampler.validate();
    } catch (const Error& e) {
        throw Error(Errc::ConfigError, e.what());
    }
    auto require = [](bool ok, const std::string& what) {
        if (!ok) throw Error(Errc::ConfigError, what);
    };
    require(injection.cutoff_step == sampler.cutoff_step, "injection cutoff differs from sampler cutoff");
    require(injection.ratio >= 0.0 && injection.ratio <= 1.0, "injection.ratio must lie in [0, 1]");
    require(glyph.scale >= 0, "glyph.scale must be >= 0");
    require(!glyph.path.empty() || !glyph.text.empty(), "glyph.text or glyph.path is required");
    require(sweep.jobs >= 1, "sweep.jobs must be >= 1");
}

std::string RunConfig::serialize() const {
    std::ostringstream out;
    out << "model.d_model = " << model.d_model << "\n";
    out << "model.heads = " << model.n_heads << "\n";
    out << "model.layers = " << model.n_layers << "\n";
    out << "model.patch = " << model.patch << "\n";
    out << "model.grid = " << model.grid << "\n";
    out << "model.text_tokens = " << model.t_txt << "\n";
    out << "model.seed = " << model.seed << "\n";
    out << "sampler.steps = " << sampler.steps << "\n";
    out << "sampler.guidance = " << number(sampler.guidance) << "\n";
    out << "sampler.cutoff = " << sampler.cutoff_step << "\n";
    out << "sampler.seed = " << sampler.noise_seed << "\n";
    out << "sampler.recon_prompt = " << quote(sampler.recon_prompt) << "\n";
    out << "injection.enabled = " << (inject ? "true" : "false") << "\n";
    out << "injection.ratio = " << number(injection.ratio) << "\n";
    out << "injection.mode = " << coreattn::to_string(injection.mode) << "\n";
    out << "injection.averaging = " << (injection.averaging ? "true" : "false") << "\n";
    out << "glyph.text = " << quote(glyph.text) << "\n";
    out << "glyph.layout = " << glyphkit::to_string(glyph.layout) << "\n";
    out << "glyph.scale = " << glyph.scale << "\n";
    out << "glyph.path = " << quote(glyph.path) << "\n";
    out << "prompt.word = " << quote(prompt.word) << "\n";
    out << "prompt.style = " << quote(prompt.style) << "\n";
    out << "prompt.lang = " << quote(prompt.lang) << "\n";
    out << "prompt.text = " << quote(prompt.text) << "\n";
    if (predicted) out << "metrics.predicted = " << quote(*predicted) << "\n";
    out << "io.output = " << quote(io.output) << "\n";
    out << "io.manifest = " << quote(io.manifest) << "\n";
    out << "io.trace = " << quote(io.trace) << "\n";
    out << "io.plan = " << quote(io.plan) << "\n";
    out << "io.mask = " << quote(io.mask) << "\n";
    out << "io.csv = " << quote(io.csv) << "\n";
    out << "sweep.ratios = " << join(sweep.ratios) << "\n";
    out << "sweep.steps = " << join(sweep.steps) << "\n";
    out << "sweep.metrics = " << join(sweep.metrics) << "\n";
    out << "sweep.jobs = " << sweep.jobs << "\n";
    return out.str();
}

RunConfig RunConfig::parse(std::string_view text) {
    RunConfig cfg;
    std::set<std::string> seen;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const auto nl = text.find('\n', pos);
        const std::string_view line = text.substr(pos, nl == std::string_view::npos ? text.npos : nl - pos);
        pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
        ++line_no;
        const std::string body = trim_ascii(line);
        if (body.empty() || body.front() == '#') continue;
        const auto eq = body.find('=');
        if (eq == std::string::npos) {
            throw Error(Errc::ConfigError, "line " + std::to_string(line_no) + ": expected key = value");
        }
        const std::string key = trim_ascii(std::string_view(body).substr(0, eq));
        if (!seen.insert(key).second) {
            throw Error(Errc::ConfigError, "line " + std::to_string(line_no) + ": key '" + key + "' repeated");
        }
        cfg.set(key, std::string_view(body).substr(eq + 1));
    }
    return cfg;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
    std::string text;
    try {
        text = read_file(path);
    } catch (const Error& e) {
        throw Error(Errc::ConfigError, e.what());
    }
    return parse(text);
}

std::string RunConfig::glyph_word() const { return prompt.word.empty() ? glyph.text : prompt.word; }

std::string RunConfig::rendered_prompt() const {
    if (!prompt.text.empty()) return prompt.text;
    return build_prompt(glyph_word(), prompt.style, prompt.lang).prompt;
}

std::uint64_t config_hash(const RunConfig& cfg, std::uint64_t glyph_checksum) {
    RunConfig canon = cfg;
    canon.io = IoSpec{};
    canon.sweep.jobs = 1;
    Fnv1a h;
    h.update(canon.serialize());
    h.update_value(glyph_checksum);
    h.update(std::string_view(version));
    return h.digest();
}

glyphkit::GlyphImage load_glyph(const RunConfig& cfg) {
    if (!cfg.glyph.path.empty()) {
        glyphkit::GlyphImage g = glyphkit::load_glyph_bitmap(cfg.glyph.path, cfg.model.patch);
        if (g.width != cfg.model.image_side() || g.height != cfg.model.image_side()) {
            throw Error(Errc::ShapeMismatch, "glyph bitmap is " + std::to_string(g.width) + "x" +
                                                 std::to_string(g.height) + ", model expects " +
                                                 std::to_string(cfg.model.image_side()) + " square");
        }
        if (!cfg.glyph.text.empty()) g.text = cfg.glyph.text;
        return g;
    }
    const int side = cfg.model.image_side();
    const glyphkit::Canvas canvas{side, side, cfg.model.patch};
    const auto& font = glyphkit::BitmapFont::builtin();
    if (cfg.glyph.scale > 0) return glyphkit::rasterize_text(cfg.glyph.text, font, cfg.glyph.layout, canvas, cfg.glyph.scale);
    for (int scale = side / font.height(); scale > 1; --scale) {
        try {
            return glyphkit::rasterize_text(cfg.glyph.text, font, cfg.glyph.layout, canvas, scale);
        } catch (const Error& e) {
            if (e.code() != Errc::TextOverflow) throw;
        }
    }
    return glyphkit::rasterize_text(cfg.glyph.text, font, cfg.glyph.layout, canvas, 1);
}

// --- metrics --------------------------------------------------------------------

mmdit::CaptureFlags metric_capture() {
    mmdit::CaptureFlags f;
    f.probabilities = true;
    return f;
}

std::optional<std::vector<std::vector<int>>> probe_rows(const coreattn::InjectionPlan* plan, int cutoff_step,
                                                        int layers) {
    if (plan == nullptr || cutoff_step <= 0) return std::nullopt;
    std::vector<std::vector<int>> rows;
    for (int layer = 0; layer < layers; ++layer) {
        rows.push_back(plan->at(cutoff_step - 1, layer).indices);
        if (rows.back().empty()) return std::nullopt;
    }
    return rows;
}

StructureMetrics structure_metrics(const flow::GenerationResult& result,
                                   const std::vector<std::vector<int>>& rows_per_layer,
                                   const std::vector<double>& mask_fraction, int n_img) {
    const std::size_t layers = rows_per_layer.size();
    std::vector<std::vector<ConstMatrixView<float>>> heads(layers);
    for (const auto& rec : result.captured) {
        if (rec.joint || rec.probabilities.empty() || rec.rows != static_cast<std::size_t>(n_img)) {
            throw Error(Errc::ShapeMismatch, "captured attention is not an I2I probability map");
        }
        if (rec.layer < 0 || static_cast<std::size_t>(rec.layer) >= layers) {
            throw Error(Errc::IndexOutOfRange, "captured layer outside the probed range");
        }
        heads[static_cast<std::size_t>(rec.layer)].push_back(rec.probabilities_view());
    }
    StructureMetrics m;
    double coverage = 0.0;
    for (std::size_t l = 0; l < layers; ++l) {
        const Matrix<double> avg = coreattn::head_average(heads[l]);
        const double shift = coreattn::off_mask_mass(avg.view(), rows_per_layer[l], mask_fraction);
        m.shift_per_layer.push_back(shift);
        coverage += metrics::mask_coverage(avg.view(), rows_per_layer[l], mask_fraction);
    }
    double shift = 0.0;
    for (double s : m.shift_per_layer) shift += s;
    m.attention_shift = shift / static_cast<double>(layers);
    m.mask_coverage = coverage / static_cast<double>(layers);
    return m;
}

double glyph_fidelity(const std::vector<double>& pixels, const glyphkit::GlyphImage& glyph) {
    if (pixels.size() != glyph.pixels.size()) {
        throw Error(Errc::ShapeMismatch, "output and glyph differ in size");
    }
    const double n = static_cast<double>(pixels.size());
    double ma = 0.0;
    double mb = 0.0;
    for (std::size_t i = 0; i < pixels.size(); ++i) {
        ma += pixels[i];
        mb += glyph.pixels[i];
    }
    ma /= n;
    mb /= n;
    double sab = 0.0;
    double saa = 0.0;
    double sbb = 0.0;
    for (std::size_t i = 0; i < pixels.size(); ++i) {
        const double a = pixels[i] - ma;
        const double b = glyph.pixels[i] - mb;
        sab += a * b;
        saa += a * a;
        sbb += b * b;
    }
    if (saa == 0.0 || sbb == 0.0) return 0.0;
    return sab / std::sqrt(saa * sbb);
}

// --- generate -------------------------------------------------------------------

namespace {

ordered_json config_json(const RunConfig& cfg) {
    ordered_json j = ordered_json::object();
    const std::string text = cfg.serialize();
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        const auto eq = line.find(" = ");
        j[line.substr(0, eq)] = line.substr(eq + 3);
    }
    return j;
}

ordered_json step_log_json(const flow::GenerationResult& r) {
    ordered_json steps = ordered_json::array();
    for (const auto& s : r.steps) {
        steps.push_back({{"step", s.step}, {"t", s.t}, {"injected_layers", s.injected_layers}});
    }
    return steps;
}

ordered_json text_metrics(const RunConfig& cfg) {
    ordered_json j = ordered_json::object();
    if (!cfg.predicted) return j;
    const auto f1 = metrics::char_f1(*cfg.predicted, cfg.glyph_word());
    j["exact_match"] = metrics::exact_match(*cfg.predicted, cfg.glyph_word());
    j["char_precision"] = f1.precision;
    j["char_recall"] = f1.recall;
    j["char_f1"] = f1.f1;
    return j;
}

}  // namespace

GenerateOutcome run_generate(const RunConfig& cfg) {
    cfg.validate();
    GenerateOutcome out;
    out.glyph = load_glyph(cfg);
    const std::uint64_t hash = config_hash(cfg, out.glyph.checksum());
    const mmdit::ModelWeights w = mmdit::init_model(cfg.model);
    const std::string prompt = cfg.rendered_prompt();

    flow::GenerateOptions opts;
    opts.capture = metric_capture();
    opts.capture_step = cfg.sampler.steps - 1;
    if (cfg.inject) {
        out.trace = flow::reconstruct_capture(w, out.glyph, cfg.sampler.recon_prompt, cfg.sampler);
        coreattn::InjectionConfig ic = cfg.injection;
        ic.cutoff_step = cfg.sampler.cutoff_step;
        out.plan = coreattn::build_injection(*out.trace, ic);
    }
    out.result = flow::generate_with_injection(w, prompt, out.trace ? &*out.trace : nullptr,
                                               out.plan ? &*out.plan : nullptr, cfg.sampler, opts);

    ordered_json metric_values = text_metrics(cfg);
    const std::vector<double> mask_fraction = glyphkit::glyph_mask_patches(out.glyph, cfg.model.patch);
    if (auto rows = probe_rows(out.plan ? &*out.plan : nullptr, cfg.sampler.cutoff_step, cfg.model.n_layers)) {
        const StructureMetrics sm = structure_metrics(out.result, *rows, mask_fraction, cfg.model.n_img());
        metric_values["mask_coverage"] = sm.mask_coverage;
        metric_values["attention_shift"] = sm.attention_shift;
        metric_values["attention_shift_per_layer"] = sm.shift_per_layer;
    }
    metric_values["glyph_fidelity"] = glyph_fidelity(out.result.pixels, out.glyph);

    ordered_json outputs = ordered_json::object();
    if (!cfg.io.output.empty()) {
        glyphkit::write_pgm(cfg.io.output, out.result.width, out.result.height, out.result.quantized());
        outputs["image"] = cfg.io.output;
    }
    if (!cfg.io.mask.empty()) {
        glyphkit::write_mask_pgm(cfg.io.mask, out.glyph);
        outputs["mask"] = cfg.io.mask;
    }
    if (!cfg.io.trace.empty() && out.trace) {
        out.trace->save(cfg.io.trace);
        outputs["trace"] = cfg.io.trace;
    }
    if (!cfg.io.plan.empty() && out.plan) {
        out.plan->save(cfg.io.plan);
        outputs["plan"] = cfg.io.plan;
    }
    if (!cfg.io.manifest.empty()) outputs["manifest"] = cfg.io.manifest;

    ordered_json& m = out.manifest;
    m["version"] = version;
    m["command"] = "generate";
    m["status"] = "ok";
    m["config_hash"] = hex64(hash);
    m["config"] = config_json(cfg);
    m["prompt"] = prompt;
    m["inputs"] = {{"weights_checksum", hex64(w.checksum())},
                   {"glyph_checksum", hex64(out.glyph.checksum())},
                   {"weights_seed", cfg.model.seed},
                   {"noise_seed", cfg.sampler.noise_seed}};
    if (out.trace) m["inputs"]["trace_checksum"] = hex64(out.trace->checksum());
    m["warnings"] = out.glyph.warnings;
    m["steps"] = step_log_json(out.result);
    m["injected_layer_steps"] = out.result.injected_layer_steps;
    m["model_evaluations"] = out.result.model_evaluations;
    m["output_checksum"] = hex64(out.result.checksum());
    m["outputs"] = outputs;
    m["metrics"] = metric_values;

    if (!cfg.io.manifest.empty()) write_file(cfg.io.manifest, out.manifest.dump(2) + "\n");
    return out;
}

ordered_json error_manifest(const RunConfig* cfg, std::string_view command, const std::exception& e) {
    ordered_json m;
    m["version"] = version;
    m["command"] = std::string(command);
    m["status"] = "error";
    if (cfg) m["config"] = config_json(*cfg);
    const auto* err = dynamic_cast<const Error*>(&e);
    m["error"] = {{"code", err ? to_string(err->code()) : "Exception"}, {"message", e.what()}};
    return m;
}

// --- sweep ----------------------------------------------------------------------

namespace {

const std::set<std::string>& known_sweep_metrics() {
    static const std::set<std::string> names{"mask_coverage", "attention_shift", "glyph_fidelity", "exact_match",
                                             "char_f1"};
    return names;
}

struct ChainResult {
    std::vector<metrics::SweepCell> cells;
    std::vector<SweepFailure> failures;
    ordered_json records = ordered_json::array();
};

}  // namespace

SweepOutcome run_sweep(const RunConfig& cfg, const SweepHooks& hooks) {
    cfg.validate();
    const SweepSpec& sw = cfg.sweep;
    if (sw.ratios.empty() || sw.steps.empty()) throw Error(Errc::ConfigError, "sweep grid is empty");
    for (double r : sw.ratios) {
        if (!(r > 0.0 && r <= 1.0)) throw Error(Errc::ConfigError, "sweep ratio " + number(r) + " outside (0, 1]");
    }
    for (int s : sw.steps) {
        if (s < 1 || s > cfg.sampler.steps) {
            throw Error(Errc::ConfigError,
                        "sweep step " + std::to_string(s) + " outside [1, " + std::to_string(cfg.sampler.steps) + "]");
        }
    }
    if (sw.metrics.empty()) throw Error(Errc::ConfigError, "sweep needs at least one metric");
    for (const auto& name : sw.metrics) {
        if (!known_sweep_metrics().count(name)) throw Error(Errc::ConfigError, "unknown sweep metric '" + name + "'");
        if ((name == "exact_match" || name == "char_f1") && !cfg.predicted) {
            throw Error(Errc::ConfigError, "metric '" + name + "' needs metrics.predicted");
        }
    }
    std::vector<double> ratios = sw.ratios;
    std::vector<int> steps = sw.steps;
    std::sort(ratios.begin(), ratios.end());
    std::sort(steps.begin(), steps.end());
    if (auto it = std::adjacent_find(ratios.begin(), ratios.end()); it != ratios.end()) {
        throw Error(Errc::DuplicateCell, "ratio " + number(*it) + " appears twice in the sweep grid");
    }
    if (auto it = std::adjacent_find(steps.begin(), steps.end()); it != steps.end()) {
        throw Error(Errc::DuplicateCell, "step " + std::to_string(*it) + " appears twice in the sweep grid");
    }

    const glyphkit::GlyphImage glyph = load_glyph(cfg);
    const std::uint64_t hash = config_hash(cfg, glyph.checksum());
    const mmdit::ModelWeights w = mmdit::init_model(cfg.model);
    const std::string prompt = cfg.rendered_prompt();
    const std::vector<double> mask_fraction = glyphkit::glyph_mask_patches(glyph, cfg.model.patch);

    // Steps before a cell's cutoff are identical for every cutoff, so each
    // ratio runs one chain that is copied at every grid step.
    flow::SamplerConfig chain_cfg = cfg.sampler;
    chain_cfg.cutoff_step = steps.back();
    const AttentionTrace trace = flow::reconstruct_capture(w, glyph, cfg.sampler.recon_prompt, chain_cfg);
    const std::string manifest_ref = cfg.io.manifest.empty() ? std::string("sweep") : cfg.io.manifest;

    auto run_chain = [&](double ratio) {
        ChainResult out;
        auto fail = [&](int step, const std::exception& e) {
            out.failures.push_back({ratio, step, e.what()});
            out.records.push_back({{"ratio", ratio}, {"step", step}, {"status", "error"}, {"error", e.what()}});
        };
        std::optional<coreattn::InjectionPlan> plan;
        std::optional<flow::Sampler> chain;
        try {
            coreattn::InjectionConfig ic = cfg.injection;
            ic.ratio = ratio;
            ic.cutoff_step = chain_cfg.cutoff_step;
            plan = coreattn::build_injection(trace, ic);
            flow::GenerateOptions opts;
            opts.capture = metric_capture();
            opts.capture_step = cfg.sampler.steps - 1;
            chain.emplace(w, prompt, &trace, &*plan, chain_cfg, opts);
        } catch (const std::exception& e) {
            for (int s : steps) fail(s, e);
            return out;
        }
        for (int step : steps) {
            try {
                chain->advance(step);
                flow::Sampler cell = *chain;
                cell.set_cutoff(step);
                if (hooks.before_cell) hooks.before_cell(ratio, step);
                const flow::GenerationResult result = cell.finish();
                const auto rows = probe_rows(&*plan, step, cfg.model.n_layers);
                std::map<std::string, double> values;
                if (rows) {
                    const StructureMetrics sm = structure_metrics(result, *rows, mask_fraction, cfg.model.n_img());
                    values["mask_coverage"] = sm.mask_coverage;
                    values["attention_shift"] = sm.attention_shift;
                }
                values["glyph_fidelity"] = glyph_fidelity(result.pixels, glyph);
                if (cfg.predicted) {
                    values["exact_match"] = metrics::exact_match(*cfg.predicted, cfg.glyph_word()) ? 1.0 : 0.0;
                    values["char_f1"] = metrics::char_f1(*cfg.predicted, cfg.glyph_word()).f1;
                }
                const std::string ref = manifest_ref + "#ratio=" + number(ratio) + ",step=" + std::to_string(step);
                ordered_json rec{{"ratio", ratio},
                                 {"step", step},
                                 {"status", "ok"},
                                 {"output_checksum", hex64(result.checksum())},
                                 {"injected_layer_steps", result.injected_layer_steps}};
                for (const auto& name : sw.metrics) {
                    auto it = values.find(name);
                    if (it == values.end()) continue;
                    out.cells.push_back({ratio, step, name, it->second, ref});
                    rec["metrics"][name] = it->second;
                }
                out.records.push_back(rec);
            } catch (const std::exception& e) {
                fail(step, e);
            }
        }
        return out;
    };

    std::vector<ChainResult> chains(ratios.size());
    const std::size_t jobs = std::min<std::size_t>(static_cast<std::size_t>(sw.jobs), ratios.size());
    if (jobs <= 1) {
        for (std::size_t i = 0; i < ratios.size(); ++i) chains[i] = run_chain(ratios[i]);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> workers;
        for (std::size_t t = 0; t < jobs; ++t) {
            workers.emplace_back([&] {
                for (std::size_t i = next++; i < ratios.size(); i = next++) chains[i] = run_chain(ratios[i]);
            });
        }
        for (auto& t : workers) t.join();
    }

    SweepOutcome out;
    out.cell_count = ratios.size() * steps.size();
    ordered_json records = ordered_json::array();
    for (auto& c : chains) {
        out.cells.insert(out.cells.end(), c.cells.begin(), c.cells.end());
        out.failures.insert(out.failures.end(), c.failures.begin(), c.failures.end());
        for (auto& r : c.records) records.push_back(std::move(r));
    }
    out.table = metrics::sweep_aggregate(out.cells, ratios, steps, sw.metrics);

    ordered_json& m = out.manifest;
    m["version"] = version;
    m["command"] = "sweep";
    m["status"] = out.failures.empty() ? "ok" : (out.failures.size() == out.cell_count ? "error" : "partial");
    m["config_hash"] = hex64(hash);
    m["config"] = config_json(cfg);
    m["prompt"] = prompt;
    m["inputs"] = {{"weights_checksum", hex64(w.checksum())},
                   {"glyph_checksum", hex64(glyph.checksum())},
                   {"trace_checksum", hex64(trace.checksum())},
                   {"weights_seed", cfg.model.seed},
                   {"noise_seed", cfg.sampler.noise_seed}};
    m["cells"] = records;
    m["missing_cells"] = out.table.missing_count();
    if (!cfg.io.csv.empty()) m["outputs"]["csv"] = cfg.io.csv;

    if (!cfg.io.csv.empty()) write_file(cfg.io.csv, out.table.to_csv());
    if (!cfg.io.manifest.empty()) write_file(cfg.io.manifest, m.dump(2) + "\n");
    return out;
}

// --- heatmap --------------------------------------------------------------------

std::vector<std::uint8_t> heatmap_pixels(const std::vector<double>& values, int side) {
    if (side < 1 || values.size() != static_cast<std::size_t>(side) * static_cast<std::size_t>(side)) {
        throw Error(Errc::ShapeMismatch, std::to_string(values.size()) + " values do not fill a " +
                                             std::to_string(side) + "x" + std::to_string(side) + " grid");
    }
    for (double v : values) {
        if (!std::isfinite(v)) throw Error(Errc::InvalidArgument, "heatmap values must be finite");
    }
    const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
    std::vector<std::uint8_t> out(values.size(), 0);
    const double range = *hi - *lo;
    if (range == 0.0) return out;
    for (std::size_t i = 0; i < values.size(); ++i) {
        out[i] = static_cast<std::uint8_t>(std::lround(255.0 * ((values[i] - *lo) / range)));
    }
    return out;
}

void export_heatmap(const std::vector<double>& values, int side, const std::filesystem::path& path) {
    glyphkit::write_pgm(path, side, side, heatmap_pixels(values, side));
}

}  // namespace logodiffuser::pipeline
