#include "logodiffuser/flow.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <string>

#include "logodiffuser/error.hpp"
#include "logodiffuser/hash.hpp"

namespace logodiffuser::flow {

void SamplerConfig::validate() const {
    if (steps < 1) throw Error(Errc::InvalidArgument, "steps must be >= 1");
    if (cutoff_step < 0 || cutoff_step > steps) throw Error(Errc::InvalidArgument, "cutoff_step must lie in [0, steps]");
    if (!(guidance >= 0.0) || !std::isfinite(guidance)) throw Error(Errc::InvalidArgument, "guidance must be >= 0");
}

std::vector<double> SamplerConfig::schedule() const {
    validate();
    std::vector<double> t(static_cast<std::size_t>(steps) + 1);
    for (int i = 0; i <= steps; ++i) {
        t[static_cast<std::size_t>(i)] = 1.0 - static_cast<double>(i) / steps;
    }
    t.back() = 0.0;
    return t;
}

namespace {
void require_same_size(std::size_t a, std::size_t b) {
    if (a != b) throw Error(Errc::ShapeMismatch, "operand sizes differ");
}
}  // namespace

std::vector<double> noise_to(std::span<const double> x0, double t, std::span<const double> eps) {
    require_same_size(x0.size(), eps.size());
    if (!(t >= 0.0 && t <= 1.0)) throw Error(Errc::InvalidArgument, "t must lie in [0,1]");
    std::vector<double> out(x0.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (1.0 - t) * x0[i] + t * eps[i];
    return out;
}

std::vector<double> cfg_combine(std::span<const double> v_cond, std::span<const double> v_uncond, double s) {
    require_same_size(v_cond.size(), v_uncond.size());
    std::vector<double> out(v_cond.size());
    // lerp is exact at s = 0 and s = 1
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::lerp(v_uncond[i], v_cond[i], s);
    return out;
}

std::vector<double> euler_step(std::span<const double> x, std::span<const double> v, double t, double t_next) {
    require_same_size(x.size(), v.size());
    if (!(t_next < t)) throw Error(Errc::InvalidArgument, "euler_step needs t_next < t");
    const double dt = t_next - t;
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + dt * v[i];
    return out;
}

std::vector<double> gaussian_noise(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    // (0, 1]: never feeds log(0)
    auto uniform = [&rng] { return (static_cast<double>(rng() >> 11) + 1.0) * 0x1.0p-53; };
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; i += 2) {
        const double r = std::sqrt(-2.0 * std::log(uniform()));
        const double theta = 2.0 * std::numbers::pi * uniform();
        out[i] = r * std::cos(theta);
        if (i + 1 < n) out[i + 1] = r * std::sin(theta);
    }
    return out;
}

AttentionTrace reconstruct_capture(const mmdit::ModelWeights& w, const glyphkit::GlyphImage& glyph,
                                   std::string_view recon_prompt, const SamplerConfig& cfg) {
    const mmdit::ModelConfig& mc = w.config;
    const std::vector<double> schedule = cfg.schedule();
    const std::vector<double> x0 = mmdit::patchify(glyph, mc);
    const std::vector<double> eps = gaussian_noise(x0.size(), cfg.noise_seed);

    const int steps = cfg.cutoff_step;
    const std::size_t n = static_cast<std::size_t>(mc.n_img());
    const std::size_t per_map = n * n;
    const std::size_t total = static_cast<std::size_t>(steps) * mc.n_layers * mc.n_heads * per_map;
    std::vector<float> logits(total);
    std::vector<float> probs(total);
    std::vector<double> t_values(static_cast<std::size_t>(steps));

    mmdit::AttentionHook hook;
    hook.capture.logits = true;
    hook.capture.probabilities = true;

    mmdit::TokenSequence tokens{mmdit::embed_prompt(w, recon_prompt), {}};
    for (int step = 0; step < steps; ++step) {
        const double t = schedule[static_cast<std::size_t>(step)];
        t_values[static_cast<std::size_t>(step)] = t;
        tokens.image = mmdit::embed_patches(w, noise_to(x0, t, eps));
        const mmdit::ForwardResult r = mmdit::forward(w, tokens, t, &hook, step);
        for (const auto& rec : r.captured) {
            const std::size_t off =
                ((static_cast<std::size_t>(step) * mc.n_layers + rec.layer) * mc.n_heads + rec.head) * per_map;
            std::copy(rec.logits.begin(), rec.logits.end(), logits.begin() + static_cast<std::ptrdiff_t>(off));
            std::copy(rec.probabilities.begin(), rec.probabilities.end(),
                      probs.begin() + static_cast<std::ptrdiff_t>(off));
        }
    }

    Fnv1a h;
    h.update_value(w.checksum()).update_value(glyph.checksum()).update(recon_prompt);
    h.update_value(cfg.steps).update_value(cfg.cutoff_step).update_value(cfg.noise_seed);
    return AttentionTrace(steps, mc.n_layers, mc.n_heads, mc.n_img(), std::move(t_values), std::move(logits),
                          std::move(probs), h.digest());
}

std::uint64_t GenerationResult::checksum() const {
    const std::vector<std::uint8_t> q = quantized();
    Fnv1a h;
    h.update_value(width).update_value(height).update_span(std::span<const std::uint8_t>(q));
    return h.digest();
}

namespace {

void check_trace_and_plan(const mmdit::ModelWeights& w, const AttentionTrace& trace,
                          const coreattn::InjectionPlan& plan, const SamplerConfig& cfg,
                          const std::vector<double>& schedule) {
    const mmdit::ModelConfig& mc = w.config;
    auto fail = [](const std::string& why) { throw Error(Errc::TraceMismatch, why); };
    if (plan.trace_checksum != trace.checksum()) fail("plan was not built from this trace");
    if (trace.layers() != mc.n_layers || trace.heads() != mc.n_heads || trace.n_img() != mc.n_img()) {
        fail("trace dimensions do not match the model");
    }
    if (plan.layers != trace.layers() || plan.n_img != trace.n_img()) fail("plan dimensions do not match the trace");
    if (cfg.cutoff_step > plan.cutoff_step) fail("plan covers fewer steps than the sampler cutoff");
    if (cfg.cutoff_step > trace.steps()) fail("trace covers fewer steps than the sampler cutoff");
    for (int i = 0; i < cfg.cutoff_step; ++i) {
        if (trace.t_values()[static_cast<std::size_t>(i)] != schedule[static_cast<std::size_t>(i)]) {
            fail("trace schedule differs from the sampler schedule at step " + std::to_string(i + 1));
        }
    }
}

}  // namespace

Sampler::Sampler(const mmdit::ModelWeights& w, std::string_view prompt, const AttentionTrace* trace,
                 const coreattn::InjectionPlan* plan, const SamplerConfig& cfg, GenerateOptions opts)
    : w_(&w), trace_(trace), plan_(plan), cfg_(cfg), opts_(std::move(opts)), schedule_(cfg.schedule()) {
    if ((trace == nullptr) != (plan == nullptr)) {
        throw Error(Errc::TraceMismatch, "trace and plan must be supplied together");
    }
    if (trace) check_trace_and_plan(w, *trace, *plan, cfg_, schedule_);
    const mmdit::ModelConfig& mc = w.config;
    cond_text_ = mmdit::embed_prompt(w, prompt);
    uncond_text_ = mmdit::embed_prompt(w, "");
    x_ = gaussian_noise(static_cast<std::size_t>(mc.n_img()) * mc.patch_dim(), cfg_.noise_seed);
    result_.width = result_.height = mc.image_side();
}

void Sampler::set_cutoff(int cutoff_step) {
    if (std::min(step_, cfg_.cutoff_step) != std::min(step_, cutoff_step)) {
        throw Error(Errc::InvalidArgument, "cutoff " + std::to_string(cutoff_step) + " would change steps already taken");
    }
    SamplerConfig next = cfg_;
    next.cutoff_step = cutoff_step;
    next.validate();
    if (trace_) check_trace_and_plan(*w_, *trace_, *plan_, next, schedule_);
    cfg_ = next;
}

void Sampler::run_step() {
    const mmdit::ModelConfig& mc = w_->config;
    const int step = step_;
    const double t = schedule_[static_cast<std::size_t>(step)];
    const bool inject = trace_ != nullptr && step < cfg_.cutoff_step;

    mmdit::AttentionHook hook;
    hook.observe = opts_.observe;
    int calls = 0;
    if (inject) {
        const AttentionTrace* trace = trace_;
        const coreattn::InjectionPlan* plan = plan_;
        hook.override_i2i = [trace, plan, &calls](int s, int layer, int head, MatrixView<float> i2i) {
            ++calls;
            coreattn::apply_injection_in_place(i2i, trace->logits(s, layer, head), plan->at(s, layer).indices);
        };
    }
    const bool capture = step == opts_.capture_step;
    const bool any_hook = inject || static_cast<bool>(opts_.observe) || capture;
    mmdit::AttentionHook cond_hook = hook;
    if (capture) cond_hook.capture = opts_.capture;

    const Matrix<float> image = mmdit::embed_patches(*w_, x_);
    const mmdit::TokenSequence cond{cond_text_, image};
    const mmdit::TokenSequence uncond{uncond_text_, image};
    mmdit::ForwardResult vc = mmdit::forward(*w_, cond, t, any_hook ? &cond_hook : nullptr, step);
    const mmdit::ForwardResult vu = mmdit::forward(*w_, uncond, t, any_hook ? &hook : nullptr, step);
    result_.model_evaluations += 2;
    result_.override_calls += calls;
    if (capture) result_.captured = std::move(vc.captured);

    const std::vector<double> v = cfg_combine(vc.velocity, vu.velocity, cfg_.guidance);
    x_ = euler_step(x_, v, t, schedule_[static_cast<std::size_t>(step) + 1]);

    int injected_layers = 0;
    if (inject) {
        for (int layer = 0; layer < mc.n_layers; ++layer) {
            if (!plan_->at(step, layer).indices.empty()) ++injected_layers;
        }
    }
    const StepLog log{step + 1, t, injected_layers};
    result_.injected_layer_steps += log.injected_layers;
    result_.steps.push_back(log);
    ++step_;
}

void Sampler::advance(int until_step) {
    if (until_step < step_ || until_step > cfg_.steps) {
        throw Error(Errc::InvalidArgument, "cannot advance to step " + std::to_string(until_step));
    }
    while (step_ < until_step) run_step();
}

GenerationResult Sampler::finish() {
    advance(cfg_.steps);
    GenerationResult out = result_;
    out.pixels = mmdit::unpatchify(x_, w_->config);
    for (auto& p : out.pixels) {
        if (!std::isfinite(p)) throw Error(Errc::NonFiniteActivation, "sampler produced a non-finite pixel");
        p = std::clamp(p, 0.0, 1.0);
    }
    return out;
}

GenerationResult generate_with_injection(const mmdit::ModelWeights& w, std::string_view prompt,
                                         const AttentionTrace* trace, const coreattn::InjectionPlan* plan,
                                         const SamplerConfig& cfg, const GenerateOptions& opts) {
    Sampler sampler(w, prompt, trace, plan, cfg, opts);
    return sampler.finish();
}

}  // namespace logodiffuser::flow
