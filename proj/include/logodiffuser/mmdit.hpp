#pragma once

// A small multimodal diffusion transformer. Text and image tokens are
// concatenated (text first) and mixed by one joint multi-head attention per
// block; each modality keeps its own projection, MLP and timestep
// modulation weights. The attention hook can observe every joint map and
// rewrite the image-to-image (I2I) logits before the row softmax.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string_view>
#include <vector>

#include "logodiffuser/glyphkit.hpp"
#include "logodiffuser/matrix.hpp"

namespace logodiffuser::mmdit {

struct ModelConfig {
    int d_model = 64;
    int n_heads = 4;
    int n_layers = 6;
    int patch = 8;
    int grid = 16;
    int t_txt = 16;
    std::uint64_t seed = 1;

    /// Throws InvalidArgument on any broken invariant.
    void validate() const;

    int n_img() const noexcept { return grid * grid; }
    int seq_len() const noexcept { return t_txt + n_img(); }
    int d_head() const noexcept { return d_model / n_heads; }
    int d_mlp() const noexcept { return 4 * d_model; }
    int patch_dim() const noexcept { return patch * patch; }
    int image_side() const noexcept { return grid * patch; }

    bool operator==(const ModelConfig&) const = default;
};

/// Number of rows in the prompt-word embedding table.
inline constexpr int vocab_size = 4096;

/// y = x * W with W stored row-major as [in][out].
struct Linear {
    int in = 0;
    int out = 0;
    std::vector<float> w;
};

struct StreamWeights {
    Linear modulation;  // d -> 4d: (scale_attn, shift_attn, scale_mlp, shift_mlp)
    Linear qkv;         // d -> 3d
    Linear proj;        // d -> d
    Linear mlp_in;      // d -> 4d
    Linear mlp_out;     // 4d -> d
};

struct BlockWeights {
    StreamWeights text;
    StreamWeights image;
};

struct ModelWeights {
    ModelConfig config;
    Linear patch_embed;           // patch^2 -> d
    std::vector<float> text_table;  // vocab_size x d
    std::vector<float> pad;         // d
    std::vector<BlockWeights> blocks;
    Linear final_modulation;  // d -> 2d: (scale, shift)
    Linear head;              // d -> patch^2

    std::uint64_t checksum() const;
    void save(const std::filesystem::path& path) const;
    static ModelWeights load(const std::filesystem::path& path);
};

/// Deterministic initialization. Every tensor is filled in this order with
/// uniform draws in [-1/sqrt(fan_in), 1/sqrt(fan_in)) from mt19937_64(seed):
/// patch_embed, text_table (fan_in 1), pad (fan_in 1), then per block
/// text{modulation, qkv, proj, mlp_in, mlp_out} followed by the same five for
/// image, then final_modulation and head. Within a tensor, draws go in
/// row-major order. A draw is (next() >> 11) * 2^-53 mapped affinely.
ModelWeights init_model(const ModelConfig& cfg);

/// Raw pixel patches, N_img x patch^2, row-major over patches; token i covers
/// patch (i / grid, i % grid) and its values are that patch's pixels row-major.
std::vector<double> patchify(const glyphkit::GlyphImage& g, const ModelConfig& cfg);
std::vector<double> unpatchify(std::span<const double> latent, const ModelConfig& cfg);

/// Image block: linear patch embedding plus 2-D sinusoidal position code.
Matrix<float> embed_patches(const ModelWeights& w, std::span<const double> latent);

/// Bucket of a prompt word: FNV-1a 64 of its UTF-8 bytes, mod vocab_size.
int word_bucket(std::string_view word) noexcept;

/// Text block: whitespace-split words looked up by bucket, truncated or
/// padded (with the pad vector) to t_txt rows.
Matrix<float> embed_prompt(const ModelWeights& w, std::string_view prompt);

struct TokenSequence {
    Matrix<float> text;   // t_txt x d
    Matrix<float> image;  // N_img x d
};

/// Read-only view of one head's joint attention for one forward pass.
struct JointAttentionView {
    int t_txt = 0;
    int seq = 0;
    ConstMatrixView<float> logits;         // seq x seq, already scaled
    ConstMatrixView<float> probabilities;  // seq x seq, row softmax

    Matrix<float> i2i_logits() const;
    Matrix<float> i2i_probabilities() const;
};

struct CaptureFlags {
    std::vector<int> layers;  // empty = all
    std::vector<int> heads;   // empty = all, ascending; otherwise this order
    bool logits = false;
    bool probabilities = false;
    bool joint = false;  // store the whole seq x seq map instead of the I2I block
};

struct AttentionRecord {
    int layer = 0;
    int head = 0;
    bool joint = false;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<float> logits;
    std::vector<float> probabilities;

    ConstMatrixView<float> logits_view() const { return {logits.data(), rows, cols}; }
    ConstMatrixView<float> probabilities_view() const { return {probabilities.data(), rows, cols}; }
};

/// Rewrites the N_img x N_img I2I logits in place. Runs after 1/sqrt(d_head)
/// scaling and before the softmax over the full joint row.
using OverrideFn = std::function<void(int step, int layer, int head, MatrixView<float> i2i_logits)>;
/// Sees the full joint map after any override.
using ObserverFn = std::function<void(int step, int layer, int head, const JointAttentionView&)>;

struct AttentionHook {
    CaptureFlags capture;
    OverrideFn override_i2i;
    ObserverFn observe;
};

struct ForwardResult {
    std::vector<double> velocity;  // N_img x patch^2
    std::vector<AttentionRecord> captured;
};

/// One model evaluation at time t in [0,1]. `step` is passed through to the
/// hook. Throws NonFiniteActivation if any activation leaves the finite range.
ForwardResult forward(const ModelWeights& w, const TokenSequence& tokens, double t, const AttentionHook* hook = nullptr,
                      int step = 0);

/// Final image-token features (after the last block and final modulation),
/// i.e. the input to the linear head.
Matrix<float> forward_features(const ModelWeights& w, const TokenSequence& tokens, double t,
                               const AttentionHook* hook = nullptr, int step = 0);
std::vector<double> apply_head(const ModelWeights& w, const Matrix<float>& features);

}  // namespace logodiffuser::mmdit
