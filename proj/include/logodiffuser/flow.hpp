#pragma once

// Rectified-flow sampling: x_t = (1 - t) x0 + t eps, integrated from t = 1
// (noise) to t = 0 (data) with explicit Euler steps and classifier-free
// guidance. Also the glyph-reconstruction pass that records I2I attention
// and the generation pass that injects it.

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "logodiffuser/coreattn.hpp"
#include "logodiffuser/glyphkit.hpp"
#include "logodiffuser/mmdit.hpp"
#include "logodiffuser/trace.hpp"

namespace logodiffuser::flow {

struct SamplerConfig {
    int steps = 28;
    double guidance = 7.5;
    int cutoff_step = 12;
    std::uint64_t noise_seed = 42;
    /// Conditioning used while reconstructing the glyph.
    std::string recon_prompt;

    void validate() const;
    /// steps + 1 values, 1 = t_0 > t_1 > ... > t_steps = 0, evenly spaced.
    /// The model is evaluated at the first `steps` of them.
    std::vector<double> schedule() const;

    bool operator==(const SamplerConfig&) const = default;
};

std::vector<double> noise_to(std::span<const double> x0, double t, std::span<const double> eps);
/// v_uncond + s * (v_cond - v_uncond)
std::vector<double> cfg_combine(std::span<const double> v_cond, std::span<const double> v_uncond, double s);
/// x + (t_next - t) * v
std::vector<double> euler_step(std::span<const double> x, std::span<const double> v, double t, double t_next);

/// Standard normal draws: Box-Muller over mt19937_64(seed), pairs in order.
std::vector<double> gaussian_noise(std::size_t n, std::uint64_t seed);

/// Re-noises the clean glyph to t_i with one fixed eps at every step
/// i < cutoff_step and records all layers' I2I logits and probabilities.
AttentionTrace reconstruct_capture(const mmdit::ModelWeights& w, const glyphkit::GlyphImage& glyph,
                                   std::string_view recon_prompt, const SamplerConfig& cfg);

struct StepLog {
    int step = 0;  // 1-based
    double t = 0.0;
    int injected_layers = 0;  // layers whose I2I rows were replaced
};

struct GenerateOptions {
    /// Called for every head of every forward (both guidance branches).
    mmdit::ObserverFn observe;
    /// Records attention of the conditional branch at `capture_step` (0-based).
    mmdit::CaptureFlags capture;
    int capture_step = -1;
};

struct GenerationResult {
    int width = 0;
    int height = 0;
    std::vector<double> pixels;  // clamped to [0,1]
    std::vector<StepLog> steps;
    int model_evaluations = 0;
    int injected_layer_steps = 0;  // sum of StepLog::injected_layers
    int override_calls = 0;        // per head, per branch
    std::vector<mmdit::AttentionRecord> captured;

    std::vector<std::uint8_t> quantized() const { return glyphkit::quantize(pixels); }
    std::uint64_t checksum() const;
};

/// Euler sampling from gaussian_noise(noise_seed). With a plan, each step
/// i < cutoff_step replaces, in every layer and head and in both guidance
/// branches, the I2I logits rows of that (step, layer)'s core tokens with the
/// trace's rows. The unconditional branch uses the empty prompt.
/// `trace` and `plan` must be both null (plain sampling) or both set.
///
/// A Sampler can be copied mid-run; the copy continues independently and
/// produces exactly what an uninterrupted run would.
class Sampler {
public:
    Sampler(const mmdit::ModelWeights& w, std::string_view prompt, const AttentionTrace* trace,
            const coreattn::InjectionPlan* plan, const SamplerConfig& cfg, GenerateOptions opts = {});

    int step() const noexcept { return step_; }
    bool done() const noexcept { return step_ == cfg_.steps; }
    const SamplerConfig& config() const noexcept { return cfg_; }

    /// Moves the injection cutoff. Only allowed when every step already taken
    /// would have been treated the same under the new cutoff.
    void set_cutoff(int cutoff_step);
    /// Runs steps [step(), until_step).
    void advance(int until_step);
    /// Runs the remaining steps and returns the image.
    GenerationResult finish();

private:
    void run_step();

    const mmdit::ModelWeights* w_;
    const AttentionTrace* trace_;
    const coreattn::InjectionPlan* plan_;
    SamplerConfig cfg_;
    GenerateOptions opts_;
    std::vector<double> schedule_;
    Matrix<float> cond_text_;
    Matrix<float> uncond_text_;
    std::vector<double> x_;
    int step_ = 0;
    GenerationResult result_;
};

GenerationResult generate_with_injection(const mmdit::ModelWeights& w, std::string_view prompt,
                                         const AttentionTrace* trace, const coreattn::InjectionPlan* plan,
                                         const SamplerConfig& cfg, const GenerateOptions& opts = {});

}  // namespace logodiffuser::flow
