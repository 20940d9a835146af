// End-to-end acceptance checks. Prints one PASS/FAIL line per item and exits
// nonzero if any item fails. Tolerances are fixed here, not configurable.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <functional>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "logodiffuser/coreattn.hpp"
#include "logodiffuser/flow.hpp"
#include "logodiffuser/metrics.hpp"
#include "logodiffuser/pipeline.hpp"
#include "logodiffuser/utf8.hpp"

namespace ld = logodiffuser;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

constexpr double kMeanTol = 1e-9;
constexpr double kFlowTol = 1e-6;
constexpr double kF1Tol = 1e-4;
constexpr double kComplementTol = 1e-9;
constexpr double kRowSumTol = 1e-6;
constexpr double kTopkSeconds = 5.0;
constexpr double kGenerateSeconds = 10.0;

struct Outcome {
    bool ok = true;
    std::string detail;

    void require(bool cond, const std::string& what) {
        if (!cond && ok) {
            ok = false;
            detail = what;
        }
    }
};

int failures = 0;

void report(int id, const char* name, const std::function<Outcome()>& body) {
    const auto t0 = Clock::now();
    Outcome o;
    try {
        o = body();
    } catch (const std::exception& e) {
        o.ok = false;
        o.detail = std::string("exception: ") + e.what();
    }
    const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
    if (!o.ok) ++failures;
    std::printf("%s [%d] %s (%.2fs)%s%s\n", o.ok ? "PASS" : "FAIL", id, name, secs, o.detail.empty() ? "" : ": ",
                o.detail.c_str());
    std::fflush(stdout);
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::vector<int> stable_sort_topk(const std::vector<double>& s, std::size_t k) {
    std::vector<int> idx(s.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(),
                     [&](int a, int b) { return s[static_cast<std::size_t>(a)] > s[static_cast<std::size_t>(b)]; });
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
}

Outcome topk_oracle() {
    Outcome o;
    const std::vector<double> ratios{0.125, 0.25, 0.5, 0.75, 1.0};
    std::mt19937_64 rng(20240101);
    std::uniform_real_distribution<double> cont(0.0, 1.0);
    const auto t0 = Clock::now();
    int cases = 0;
    for (int v = 0; v < 1000; ++v) {
        ld::coreattn::ScoreVector s;
        s.scores.resize(256);
        // every other vector drawn from 16 levels so ties are common
        for (auto& x : s.scores) x = (v % 2 == 0) ? cont(rng) : static_cast<double>(rng() % 16) / 16.0;
        for (double r : ratios) {
            const auto k = static_cast<std::size_t>(std::ceil(r * 256.0));
            const auto got = ld::coreattn::select_core_tokens(s, r).indices;
            o.require(got == stable_sort_topk(s.scores, k),
                      "mismatch at vector " + std::to_string(v) + ", ratio " + std::to_string(r));
            ++cases;
        }
    }
    const double secs = seconds_since(t0);
    o.require(cases == 5000, "case count");
    o.require(secs < kTopkSeconds, "took " + std::to_string(secs) + " s");
    if (o.ok) o.detail = "5000/5000 cases";
    return o;
}

ld::AttentionTrace diagonal_trace(const std::vector<std::vector<double>>& layer_scores) {
    const int layers = static_cast<int>(layer_scores.size());
    const int n = static_cast<int>(layer_scores[0].size());
    std::vector<float> probs, logits;
    for (const auto& ly : layer_scores)
        for (int r = 0; r < n; ++r)
            for (int c = 0; c < n; ++c) {
                probs.push_back(r == c ? static_cast<float>(ly[static_cast<std::size_t>(r)]) : 0.0f);
                logits.push_back(0.0f);
            }
    return ld::AttentionTrace(1, layers, 1, n, {1.0}, logits, probs);
}

Outcome cumulative_average() {
    Outcome o;
    std::mt19937_64 rng(77);
    std::uniform_real_distribution<double> u(-10.0, 10.0);
    double worst = 0.0;
    for (int seq = 0; seq < 100; ++seq) {
        const int layers = 1 + static_cast<int>(rng() % 12);
        std::vector<std::vector<double>> vs(static_cast<std::size_t>(layers), std::vector<double>(64));
        for (auto& v : vs)
            for (auto& x : v) x = u(rng);
        ld::coreattn::CumulativeScore st;
        for (const auto& v : vs) {
            ld::coreattn::ScoreVector s;
            s.scores = v;
            st = ld::coreattn::cumulative_update(st, s);
        }
        for (std::size_t j = 0; j < 64; ++j) {
            double sum = 0.0;
            for (const auto& v : vs) sum += v[j];
            worst = std::max(worst, std::fabs(st.mean[j] - sum / layers));
        }
    }
    o.require(worst <= kMeanTol, "max deviation " + std::to_string(worst));

    // glyph tokens {0,1}; the third of four layers spikes on background {6,7}
    const std::vector<double> glyph{0.9, 0.8, 0.1, 0.1, 0.1, 0.1, 0.2, 0.2};
    const std::vector<double> spike{0.0, 0.0, 0.1, 0.1, 0.1, 0.1, 0.95, 0.95};
    const ld::AttentionTrace tr = diagonal_trace({glyph, glyph, spike, glyph});
    ld::coreattn::InjectionConfig on;
    on.ratio = 0.25;
    on.cutoff_step = 1;
    ld::coreattn::InjectionConfig off = on;
    off.averaging = false;
    const auto p_on = ld::coreattn::build_injection(tr, on);
    const auto p_off = ld::coreattn::build_injection(tr, off);
    const std::vector<int> core{0, 1}, bg{6, 7};
    for (int l = 0; l < 4; ++l) {
        o.require(p_on.at(0, l).indices == core, "averaged set moved at layer " + std::to_string(l + 1));
        o.require(p_off.at(0, l).indices == (l == 2 ? bg : core), "per-layer set wrong at layer " + std::to_string(l + 1));
    }
    if (o.ok) {
        char buf[96];
        std::snprintf(buf, sizeof buf, "max |incremental - batch| = %.2e; spike flips per-layer only", worst);
        o.detail = buf;
    }
    return o;
}

Outcome injection_equality() {
    Outcome o;
    const ld::pipeline::RunConfig cfg;
    const auto w = ld::mmdit::init_model(cfg.model);
    const auto glyph = ld::pipeline::load_glyph(cfg);

    // ratio 1, cutoff = steps, generation prompt == reconstruction prompt, shared seed
    ld::flow::SamplerConfig full = cfg.sampler;
    full.cutoff_step = full.steps;
    const ld::AttentionTrace tr = ld::flow::reconstruct_capture(w, glyph, full.recon_prompt, full);
    ld::coreattn::InjectionConfig ic = cfg.injection;
    ic.ratio = 1.0;
    ic.cutoff_step = full.steps;
    const auto plan = ld::coreattn::build_injection(tr, ic);
    int maps = 0;
    int mismatched = 0;
    ld::flow::GenerateOptions opts;
    opts.observe = [&](int step, int layer, int head, const ld::mmdit::JointAttentionView& v) {
        if (step != 0) return;
        const auto got = v.i2i_logits();
        const auto want = tr.logits(0, layer, head);
        if (std::memcmp(got.values().data(), want.data, want.size() * sizeof(float)) != 0) ++mismatched;
        ++maps;
    };
    ld::flow::Sampler s(w, full.recon_prompt, &tr, &plan, full, opts);
    s.advance(1);
    const int expect_maps = cfg.model.n_layers * cfg.model.n_heads * 2;
    o.require(maps == expect_maps, "observed " + std::to_string(maps) + " maps");
    o.require(mismatched == 0, std::to_string(mismatched) + " maps differ from the trace");

    // ratio 0 and cutoff 0 against the no-injection baseline
    ld::pipeline::RunConfig base_cfg;
    base_cfg.inject = false;
    const auto base = ld::pipeline::run_generate(base_cfg).result.quantized();
    ld::pipeline::RunConfig r0;
    r0.injection.ratio = 0.0;
    o.require(ld::pipeline::run_generate(r0).result.quantized() == base, "ratio 0 differs from baseline");
    ld::pipeline::RunConfig c0;
    c0.sampler.cutoff_step = c0.injection.cutoff_step = 0;
    o.require(ld::pipeline::run_generate(c0).result.quantized() == base, "cutoff 0 differs from baseline");
    if (o.ok) o.detail = std::to_string(maps) + " step-1 I2I maps bit-equal; ratio 0 and cutoff 0 byte-equal to baseline";
    return o;
}

Outcome sampler_correctness() {
    Outcome o;
    const ld::flow::SamplerConfig defaults;
    o.require(defaults.steps == 28 && defaults.guidance == 7.5, "defaults are not 28 steps / guidance 7.5");
    std::mt19937_64 rng(5);
    std::normal_distribution<double> nd;
    std::vector<double> x0(4096), eps(4096), v(4096);
    for (auto& x : x0) x = nd(rng);
    for (auto& x : eps) x = nd(rng);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = eps[i] - x0[i];
    const auto sched = defaults.schedule();
    std::vector<double> x = eps;
    for (int i = 0; i < defaults.steps; ++i)
        x = ld::flow::euler_step(x, v, sched[static_cast<std::size_t>(i)], sched[static_cast<std::size_t>(i) + 1]);
    double worst = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) worst = std::max(worst, std::fabs(x[i] - x0[i]));
    o.require(worst <= kFlowTol, "endpoint error " + std::to_string(worst));

    o.require(ld::flow::noise_to(x0, 0.0, eps) == x0, "noise_to(t=0) != x0");
    o.require(ld::flow::noise_to(x0, 1.0, eps) == eps, "noise_to(t=1) != eps");
    std::vector<double> vc(4096), vu(4096);
    for (auto& a : vc) a = nd(rng) * 3.0;
    for (auto& a : vu) a = nd(rng) * 3.0;
    o.require(ld::flow::cfg_combine(vc, vu, 1.0) == vc, "cfg_combine(s=1) != v_cond");
    o.require(ld::flow::cfg_combine(vc, vu, 0.0) == vu, "cfg_combine(s=0) != v_uncond");
    o.require(ld::flow::cfg_combine(std::vector<double>{1.0}, std::vector<double>{0.0}, defaults.guidance)[0] == 7.5,
              "cfg_combine at guidance 7.5");
    if (o.ok) {
        char buf[96];
        std::snprintf(buf, sizeof buf, "28-step endpoint error %.2e", worst);
        o.detail = buf;
    }
    return o;
}

#ifdef LOGODIFFUSER_CLI
int run_cli(const std::string& args, const fs::path& dir) {
    const std::string cmd = std::string("\"") + LOGODIFFUSER_CLI + "\" " + args + " > \"" + (dir / "stdout.txt").string() +
                            "\" 2>&1";
    return std::system(cmd.c_str());
}
#endif

Outcome determinism() {
    Outcome o;
#ifdef LOGODIFFUSER_CLI
    const fs::path dir = fs::temp_directory_path() / ("ld_accept_" + std::to_string(std::random_device{}()));
    fs::create_directories(dir);
    std::vector<std::string> checksums;
    std::vector<std::string> images;
    double slowest = 0.0;
    for (int run = 0; run < 2; ++run) {
        const fs::path img = dir / ("out" + std::to_string(run) + ".pgm");
        const fs::path man = dir / ("run" + std::to_string(run) + ".json");
        const auto t0 = Clock::now();
        const int rc = run_cli("generate -o \"" + img.string() + "\" --manifest \"" + man.string() + "\"", dir);
        slowest = std::max(slowest, seconds_since(t0));
        o.require(rc == 0, "generate exited with " + std::to_string(rc));
        if (rc != 0) break;
        const auto m = nlohmann::json::parse(ld::read_file(man));
        std::string text;
        for (const auto& [k, v] : m["config"].items())
            if (k.rfind("io.", 0) != 0) text += k + " = " + v.get<std::string>() + "\n";
        const auto used = ld::pipeline::RunConfig::parse(text);
        const ld::pipeline::RunConfig defaults;
        o.require(used.sampler == defaults.sampler && used.injection == defaults.injection && used.model == defaults.model &&
                      used.sampler.steps == 28 && used.sampler.guidance == 7.5,
                  "manifest does not show the default configuration");
        o.require(m["injected_layer_steps"] == 12 * 6, "injected layer steps " + m["injected_layer_steps"].dump());
        checksums.push_back(m["output_checksum"].get<std::string>());
        images.push_back(ld::read_file(img));
    }
    if (checksums.size() == 2) {
        o.require(checksums[0] == checksums[1], "checksums differ: " + checksums[0] + " vs " + checksums[1]);
        o.require(images[0] == images[1], "output images differ");
    }
    o.require(slowest < kGenerateSeconds, "slowest run " + std::to_string(slowest) + " s");
    std::error_code ec;
    fs::remove_all(dir, ec);
    if (o.ok) {
        char buf[128];
        std::snprintf(buf, sizeof buf, "checksum %s twice, slowest run %.2fs", checksums[0].c_str(), slowest);
        o.detail = buf;
    }
#else
    o.require(false, "built without the CLI");
#endif
    return o;
}

Outcome metric_properties() {
    Outcome o;
    const auto r = ld::metrics::char_f1("lgo", "logo");
    o.require(r.precision == 1.0 && r.recall == 0.75 && std::fabs(r.f1 - 0.8571) <= kF1Tol,
              "char_f1(lgo, logo) = " + std::to_string(r.precision) + ", " + std::to_string(r.recall) + ", " +
                  std::to_string(r.f1));
    // multiset oracle: sorted intersection
    std::u32string a = U"lgo", b = U"logo", common;
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(common));
    o.require(common.size() == 3, "oracle overlap");

    std::mt19937_64 rng(500);
    const std::u32string alphabet = U"logLOG é中 ";
    int matches = 0;
    for (int i = 0; i < 500; ++i) {
        auto word = [&] {
            std::u32string s;
            const std::size_t n = rng() % 6;
            for (std::size_t k = 0; k < n; ++k) s += alphabet[rng() % alphabet.size()];
            return ld::encode_utf8(s);
        };
        const std::string p = word();
        const std::string t = (i % 2 == 0) ? p : word();
        if (ld::metrics::exact_match(p, t)) {
            ++matches;
            o.require(ld::metrics::char_f1(p, t).f1 == 1.0, "exact match without F1 = 1 on pair " + std::to_string(i));
        }
    }
    o.require(matches >= 250, "too few matching pairs");
    o.require(ld::metrics::char_f1("ogol", "logo").f1 == 1.0 && !ld::metrics::exact_match("ogol", "logo"),
              "anagram pair");
    if (o.ok) o.detail = "F1(lgo, logo) = " + std::to_string(r.f1) + "; " + std::to_string(matches) + " matching pairs";
    return o;
}

std::vector<std::string> split(const std::string& line, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream in(line);
    while (std::getline(in, cur, sep)) out.push_back(cur);
    return out;
}

Outcome sweep_shape() {
    Outcome o;
    const fs::path dir = fs::temp_directory_path() / ("ld_sweep_" + std::to_string(std::random_device{}()));
    fs::create_directories(dir);
    ld::pipeline::RunConfig cfg;
    cfg.io.csv = (dir / "sweep.csv").string();
    const auto out = ld::pipeline::run_sweep(cfg);
    const std::string csv = ld::read_file(cfg.io.csv);
    std::error_code ec;
    fs::remove_all(dir, ec);

    o.require(out.failures.empty(), "sweep reported failures");
    o.require(csv == out.table.to_csv(), "written CSV differs from the table");
    o.require(csv.find('\r') == std::string::npos && !csv.empty() && csv.back() == '\n', "line endings");
    std::istringstream in(csv);
    std::string line;
    std::getline(in, line);
    const auto header = split(line, ',');
    o.require(header.size() >= 4 && header[0] == "ratio" && header[1] == "step", "header: " + line);
    const auto col = [&](const std::string& name) {
        return static_cast<std::size_t>(std::find(header.begin(), header.end(), name) - header.begin());
    };
    const std::size_t cov_i = col("mask_coverage"), shift_i = col("attention_shift");
    o.require(cov_i < header.size() && shift_i < header.size(), "missing metric columns");
    if (!o.ok) return o;

    const std::vector<double> ratios{0.125, 0.25, 0.5, 0.75, 1.0};
    const std::vector<int> steps{8, 10, 12, 15, 18};
    std::size_t row = 0;
    double worst = 0.0;
    double lo = 1.0, hi = 0.0;
    while (std::getline(in, line)) {
        const auto f = split(line, ',');
        o.require(f.size() == header.size(), "ragged row " + std::to_string(row));
        if (f.size() != header.size() || row >= 25) {
            ++row;
            continue;
        }
        o.require(std::stod(f[0]) == ratios[row / 5] && std::stoi(f[1]) == steps[row % 5],
                  "row " + std::to_string(row) + " out of order: " + line);
        for (std::size_t k = 2; k < f.size(); ++k) o.require(f[k] != "NA", "missing cell in row " + std::to_string(row));
        const double cov = std::stod(f[cov_i]);
        const double shift = std::stod(f[shift_i]);
        lo = std::min(lo, cov);
        hi = std::max(hi, cov);
        o.require(cov >= 0.0 && cov <= 1.0, "coverage out of range: " + f[cov_i]);
        worst = std::max(worst, std::fabs(cov + shift - 1.0));
        ++row;
    }
    o.require(row == 25, std::to_string(row) + " data rows");
    o.require(worst <= kComplementTol, "coverage + shift off by " + std::to_string(worst));
    if (o.ok) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "25 rows x %zu metrics; coverage in [%.4f, %.4f]; max |cov+shift-1| = %.1e",
                      header.size() - 2, lo, hi, worst);
        o.detail = buf;
    }
    return o;
}

Outcome attention_normalization() {
    Outcome o;
    const ld::pipeline::RunConfig cfg;
    const auto w = ld::mmdit::init_model(cfg.model);
    const auto glyph = ld::pipeline::load_glyph(cfg);
    const auto tr = ld::flow::reconstruct_capture(w, glyph, cfg.sampler.recon_prompt, cfg.sampler);
    const auto plan = ld::coreattn::build_injection(tr, cfg.injection);
    std::size_t rows = 0, maps = 0, hooked_maps = 0;
    double worst = 0.0;
    ld::flow::GenerateOptions opts;
    opts.observe = [&](int step, int, int, const ld::mmdit::JointAttentionView& v) {
        ++maps;
        if (step < cfg.sampler.cutoff_step) ++hooked_maps;
        for (std::size_t r = 0; r < v.probabilities.rows; ++r) {
            double s = 0.0;
            for (float p : v.probabilities.row(r)) s += p;
            worst = std::max(worst, std::fabs(s - 1.0));
            ++rows;
        }
    };
    ld::flow::generate_with_injection(w, cfg.rendered_prompt(), &tr, &plan, cfg.sampler, opts);
    const std::size_t expect_maps = static_cast<std::size_t>(cfg.sampler.steps) * 2 * cfg.model.n_layers * cfg.model.n_heads;
    o.require(maps == expect_maps, std::to_string(maps) + " maps observed");
    o.require(hooked_maps == static_cast<std::size_t>(cfg.sampler.cutoff_step) * 2 * cfg.model.n_layers * cfg.model.n_heads,
              "hooked map count");
    o.require(worst <= kRowSumTol, "row sum off by " + std::to_string(worst));
    if (o.ok) {
        char buf[128];
        std::snprintf(buf, sizeof buf, "%zu rows in %zu maps (%zu hooked); max |sum-1| = %.2e", rows, maps, hooked_maps,
                      worst);
        o.detail = buf;
    }
    return o;
}

}  // namespace

int main() {
    const auto t0 = Clock::now();
    report(1, "top-k selection matches the stable-sort oracle", topk_oracle);
    report(2, "cumulative layer average and spike-layer stability", cumulative_average);
    report(3, "injection bit-equality and empty-injection baselines", injection_equality);
    report(4, "sampler endpoints, interpolation and guidance", sampler_correctness);
    report(5, "generate is deterministic and fast at default settings", determinism);
    report(6, "text metric properties", metric_properties);
    report(7, "default sweep grid, CSV shape and metric complement", sweep_shape);
    report(8, "attention rows normalize through a full default run", attention_normalization);
    std::printf("%d of 8 failed, %.1fs total\n", failures, seconds_since(t0));
    return failures == 0 ? 0 : 1;
}
