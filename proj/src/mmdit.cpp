#include "logodiffuser/mmdit.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <numbers>
#include <random>
#include <string>

#include "logodiffuser/error.hpp"
#include "logodiffuser/hash.hpp"
#include "logodiffuser/tensor_file.hpp"
#include "logodiffuser/utf8.hpp"

#include "gemm.hpp"

namespace logodiffuser::mmdit {

void ModelConfig::validate() const {
    auto require = [](bool ok, const char* what) {
        if (!ok) throw Error(Errc::InvalidArgument, what);
    };
    require(d_model >= 1 && n_heads >= 1 && n_layers >= 1 && patch >= 1 && grid >= 1 && t_txt >= 1,
            "model sizes must all be >= 1");
    require(d_model % n_heads == 0, "d_model must be divisible by n_heads");
    require(d_model % 4 == 0, "d_model must be divisible by 4 (2-D position code)");
}

// --- initialization ------------------------------------------------------------

namespace {

class UniformDraws {
public:
    explicit UniformDraws(std::uint64_t seed) : rng_(seed) {}

    void fill(std::vector<float>& v, std::size_t n, int fan_in) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        v.resize(n);
        for (auto& x : v) {
            const double u = static_cast<double>(rng_() >> 11) * 0x1.0p-53;  // [0,1)
            x = static_cast<float>((2.0 * u - 1.0) * bound);
        }
    }

    Linear linear(int in, int out) {
        Linear l;
        l.in = in;
        l.out = out;
        fill(l.w, static_cast<std::size_t>(in) * out, in);
        return l;
    }

private:
    std::mt19937_64 rng_;
};

StreamWeights init_stream(UniformDraws& draws, int d) {
    StreamWeights s;
    s.modulation = draws.linear(d, 4 * d);
    s.qkv = draws.linear(d, 3 * d);
    s.proj = draws.linear(d, d);
    s.mlp_in = draws.linear(d, 4 * d);
    s.mlp_out = draws.linear(4 * d, d);
    return s;
}

// Visits every tensor in checkpoint order; W may be const or mutable.
template <class W, class F>
void for_each_tensor(W& w, F&& f) {
    using Shape = std::vector<std::size_t>;
    auto shape_of = [](const Linear& l) { return Shape{std::size_t(l.in), std::size_t(l.out)}; };
    const auto d = std::size_t(w.config.d_model);
    f("patch_embed", w.patch_embed.w, shape_of(w.patch_embed));
    f("text_table", w.text_table, Shape{std::size_t(vocab_size), d});
    f("pad", w.pad, Shape{d});
    for (std::size_t b = 0; b < w.blocks.size(); ++b) {
        auto& block = w.blocks[b];
        for (auto* s : {&block.text, &block.image}) {
            const std::string prefix =
                "blocks." + std::to_string(b) + (s == &block.text ? ".text." : ".image.");
            f(prefix + "modulation", s->modulation.w, shape_of(s->modulation));
            f(prefix + "qkv", s->qkv.w, shape_of(s->qkv));
            f(prefix + "proj", s->proj.w, shape_of(s->proj));
            f(prefix + "mlp_in", s->mlp_in.w, shape_of(s->mlp_in));
            f(prefix + "mlp_out", s->mlp_out.w, shape_of(s->mlp_out));
        }
    }
    f("final_modulation", w.final_modulation.w, shape_of(w.final_modulation));
    f("head", w.head.w, shape_of(w.head));
}

}  // namespace

ModelWeights init_model(const ModelConfig& cfg) {
    cfg.validate();
    const int d = cfg.d_model;
    UniformDraws draws(cfg.seed);
    ModelWeights w;
    w.config = cfg;
    w.patch_embed = draws.linear(cfg.patch_dim(), d);
    draws.fill(w.text_table, static_cast<std::size_t>(vocab_size) * d, 1);
    draws.fill(w.pad, static_cast<std::size_t>(d), 1);
    w.blocks.resize(static_cast<std::size_t>(cfg.n_layers));
    for (auto& b : w.blocks) {
        b.text = init_stream(draws, d);
        b.image = init_stream(draws, d);
    }
    w.final_modulation = draws.linear(d, 2 * d);
    w.head = draws.linear(d, cfg.patch_dim());
    return w;
}

std::uint64_t ModelWeights::checksum() const {
    Fnv1a h;
    h.update_value(config.d_model).update_value(config.n_heads).update_value(config.n_layers);
    h.update_value(config.patch).update_value(config.grid).update_value(config.t_txt).update_value(config.seed);
    for_each_tensor(*this, [&](const std::string&, const std::vector<float>& v, const auto&) {
        h.update_span(std::span<const float>(v));
    });
    return h.digest();
}

void ModelWeights::save(const std::filesystem::path& path) const {
    TensorFile f;
    f.meta["kind"] = "weights";
    f.meta["model.d_model"] = std::to_string(config.d_model);
    f.meta["model.n_heads"] = std::to_string(config.n_heads);
    f.meta["model.n_layers"] = std::to_string(config.n_layers);
    f.meta["model.patch"] = std::to_string(config.patch);
    f.meta["model.grid"] = std::to_string(config.grid);
    f.meta["model.t_txt"] = std::to_string(config.t_txt);
    f.meta["model.seed"] = std::to_string(config.seed);
    for_each_tensor(*this, [&](const std::string& name, const std::vector<float>& v, auto shape) {
        f.add<float>(name, v, std::move(shape));
    });
    f.save(path);
}

ModelWeights ModelWeights::load(const std::filesystem::path& path) {
    const TensorFile f = TensorFile::load(path);
    if (f.meta.count("kind") == 0 || f.meta.at("kind") != "weights") {
        throw Error(Errc::MalformedHeader, "not a weight checkpoint");
    }
    auto int_meta = [&](const char* key) { return std::stoi(f.meta_at(key)); };
    ModelConfig cfg;
    cfg.d_model = int_meta("model.d_model");
    cfg.n_heads = int_meta("model.n_heads");
    cfg.n_layers = int_meta("model.n_layers");
    cfg.patch = int_meta("model.patch");
    cfg.grid = int_meta("model.grid");
    cfg.t_txt = int_meta("model.t_txt");
    cfg.seed = std::stoull(f.meta_at("model.seed"));
    cfg.validate();

    // Allocate with the right shapes, then overwrite from the file.
    ModelWeights w;
    w.config = cfg;
    const int d = cfg.d_model;
    auto shaped = [](int in, int out) {
        Linear l;
        l.in = in;
        l.out = out;
        return l;
    };
    auto stream = [&]() {
        return StreamWeights{shaped(d, 4 * d), shaped(d, 3 * d), shaped(d, d), shaped(d, 4 * d), shaped(4 * d, d)};
    };
    w.patch_embed = shaped(cfg.patch_dim(), d);
    w.blocks.resize(static_cast<std::size_t>(cfg.n_layers));
    for (auto& b : w.blocks) {
        b.text = stream();
        b.image = stream();
    }
    w.final_modulation = shaped(d, 2 * d);
    w.head = shaped(d, cfg.patch_dim());
    for_each_tensor(w, [&](const std::string& name, std::vector<float>& v, const auto& shape) {
        if (f.find(name).shape != shape) {
            throw Error(Errc::ShapeMismatch, "tensor '" + name + "' has unexpected shape");
        }
        v = f.get<float>(name);
    });
    return w;
}

// --- embeddings ------------------------------------------------------------------

std::vector<double> patchify(const glyphkit::GlyphImage& g, const ModelConfig& cfg) {
    const int side = cfg.image_side();
    if (g.width != side || g.height != side) {
        throw Error(Errc::ShapeMismatch, "glyph is " + std::to_string(g.width) + "x" + std::to_string(g.height) +
                                             ", model expects " + std::to_string(side) + "x" + std::to_string(side));
    }
    const int p = cfg.patch;
    std::vector<double> out(static_cast<std::size_t>(cfg.n_img()) * cfg.patch_dim());
    std::size_t k = 0;
    for (int token = 0; token < cfg.n_img(); ++token) {
        const int py = token / cfg.grid;
        const int px = token % cfg.grid;
        for (int y = 0; y < p; ++y) {
            for (int x = 0; x < p; ++x) {
                out[k++] = g.pixel(px * p + x, py * p + y);
            }
        }
    }
    return out;
}

std::vector<double> unpatchify(std::span<const double> latent, const ModelConfig& cfg) {
    const int p = cfg.patch;
    const int side = cfg.image_side();
    if (latent.size() != static_cast<std::size_t>(cfg.n_img()) * cfg.patch_dim()) {
        throw Error(Errc::ShapeMismatch, "latent size does not match model grid");
    }
    std::vector<double> img(static_cast<std::size_t>(side) * side);
    std::size_t k = 0;
    for (int token = 0; token < cfg.n_img(); ++token) {
        const int py = token / cfg.grid;
        const int px = token % cfg.grid;
        for (int y = 0; y < p; ++y) {
            for (int x = 0; x < p; ++x) {
                img[static_cast<std::size_t>(py * p + y) * side + static_cast<std::size_t>(px * p + x)] = latent[k++];
            }
        }
    }
    return img;
}

namespace {

// y[r] (+)= x[r] * W
void matmul(ConstMatrixView<float> x, const Linear& l, MatrixView<float> y, bool accumulate = false) {
    assert(x.cols == static_cast<std::size_t>(l.in) && y.cols == static_cast<std::size_t>(l.out) && x.rows == y.rows);
    detail::gemm(x.data, x.cols, l.w.data(), static_cast<std::size_t>(l.out), y.data, y.cols, x.rows,
                 static_cast<std::size_t>(l.out), x.cols, accumulate);
}

std::vector<float> matvec(std::span<const float> x, const Linear& l) {
    std::vector<float> y(static_cast<std::size_t>(l.out), 0.0f);
    matmul(ConstMatrixView<float>(x.data(), 1, x.size()), l, MatrixView<float>(y.data(), 1, y.size()));
    return y;
}

}  // namespace

Matrix<float> embed_patches(const ModelWeights& w, std::span<const double> latent) {
    const ModelConfig& cfg = w.config;
    const std::size_t n = static_cast<std::size_t>(cfg.n_img());
    const std::size_t pd = static_cast<std::size_t>(cfg.patch_dim());
    if (latent.size() != n * pd) {
        throw Error(Errc::ShapeMismatch, "latent size does not match model grid");
    }
    std::vector<float> raw(latent.begin(), latent.end());
    Matrix<float> out(n, static_cast<std::size_t>(cfg.d_model));
    matmul(ConstMatrixView<float>(raw.data(), n, pd), w.patch_embed, out.view());

    const int quarter = cfg.d_model / 4;
    for (std::size_t i = 0; i < n; ++i) {
        const double r = static_cast<double>(i / static_cast<std::size_t>(cfg.grid));
        const double c = static_cast<double>(i % static_cast<std::size_t>(cfg.grid));
        auto row = out.row(i);
        for (int k = 0; k < quarter; ++k) {
            const double freq = std::pow(10000.0, -static_cast<double>(k) / quarter);
            row[k] += static_cast<float>(std::sin(r * freq));
            row[quarter + k] += static_cast<float>(std::cos(r * freq));
            row[2 * quarter + k] += static_cast<float>(std::sin(c * freq));
            row[3 * quarter + k] += static_cast<float>(std::cos(c * freq));
        }
    }
    return out;
}

int word_bucket(std::string_view word) noexcept { return static_cast<int>(fnv1a64(word) % vocab_size); }

Matrix<float> embed_prompt(const ModelWeights& w, std::string_view prompt) {
    const std::size_t d = static_cast<std::size_t>(w.config.d_model);
    const std::size_t rows = static_cast<std::size_t>(w.config.t_txt);
    Matrix<float> out(rows, d);
    // Split on Unicode whitespace, keep UTF-8 bytes of each word.
    const std::u32string cps = decode_utf8(prompt);
    std::vector<std::string> words;
    std::u32string cur;
    for (char32_t c : cps) {
        if (is_unicode_space(c)) {
            if (!cur.empty()) words.push_back(encode_utf8(cur));
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    if (!cur.empty()) words.push_back(encode_utf8(cur));

    for (std::size_t r = 0; r < rows; ++r) {
        const float* src = w.pad.data();
        if (r < words.size()) {
            src = w.text_table.data() + static_cast<std::size_t>(word_bucket(words[r])) * d;
        }
        std::copy(src, src + d, out.row(r).begin());
    }
    return out;
}

// --- attention views --------------------------------------------------------------

namespace {
Matrix<float> i2i_block(ConstMatrixView<float> m, int t_txt) {
    const std::size_t off = static_cast<std::size_t>(t_txt);
    const std::size_t n = m.rows - off;
    Matrix<float> out(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        std::copy_n(m.data + (off + i) * m.cols + off, n, out.row(i).begin());
    }
    return out;
}
}  // namespace

Matrix<float> JointAttentionView::i2i_logits() const { return i2i_block(logits, t_txt); }
Matrix<float> JointAttentionView::i2i_probabilities() const { return i2i_block(probabilities, t_txt); }

// --- forward ----------------------------------------------------------------------

namespace {

constexpr float layer_norm_eps = 1e-6f;

std::vector<float> timestep_embedding(double t, int d) {
    std::vector<float> e(static_cast<std::size_t>(d));
    const int half = d / 2;
    for (int k = 0; k < half; ++k) {
        const double freq = std::exp(-std::log(10000.0) * k / half);
        const double arg = t * 1000.0 * freq;
        e[static_cast<std::size_t>(k)] = static_cast<float>(std::cos(arg));
        e[static_cast<std::size_t>(half + k)] = static_cast<float>(std::sin(arg));
    }
    // SiLU; the modulation layers consume the activated embedding.
    for (auto& x : e) x = x / (1.0f + std::exp(-x));
    return e;
}

// out = LayerNorm(x) * (1 + scale) + shift, per row, no learned affine.
void modulated_norm(ConstMatrixView<float> x, std::span<const float> scale, std::span<const float> shift,
                    MatrixView<float> out) {
    const std::size_t d = x.cols;
    for (std::size_t r = 0; r < x.rows; ++r) {
        const float* xr = x.data + r * d;
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += xr[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double c = xr[j] - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const float inv = static_cast<float>(1.0 / std::sqrt(var + layer_norm_eps));
        const float m = static_cast<float>(mean);
        float* o = out.data + r * d;
        for (std::size_t j = 0; j < d; ++j) {
            o[j] = (xr[j] - m) * inv * (1.0f + scale[j]) + shift[j];
        }
    }
}

// Sigmoid form of GELU, x * sigmoid(1.702 x): one exp per element.
float gelu(float x) { return x / (1.0f + std::exp(-1.702f * x)); }

void require_finite(std::span<const float> v, const char* where, int layer) {
    for (float x : v) {
        if (!std::isfinite(x)) {
            throw Error(Errc::NonFiniteActivation,
                        std::string("non-finite activation in ") + where + " of layer " + std::to_string(layer));
        }
    }
}

bool wants(const std::vector<int>& selected, int v) {
    return selected.empty() || std::find(selected.begin(), selected.end(), v) != selected.end();
}

struct StreamState {
    Matrix<float>& x;
    const StreamWeights& w;
    std::vector<float> mod;  // 4d
    Matrix<float> normed;
    Matrix<float> qkv;
};

// Runs one joint block in place on (text, image).
void run_block(const ModelConfig& cfg, const BlockWeights& bw, int layer, std::span<const float> temb,
               Matrix<float>& text, Matrix<float>& image, const AttentionHook* hook, int step,
               std::vector<AttentionRecord>& captured) {
    const std::size_t d = static_cast<std::size_t>(cfg.d_model);
    const std::size_t tt = static_cast<std::size_t>(cfg.t_txt);
    const std::size_t ni = static_cast<std::size_t>(cfg.n_img());
    const std::size_t seq = tt + ni;
    const std::size_t dh = static_cast<std::size_t>(cfg.d_head());

    StreamState streams[2] = {{text, bw.text, {}, {}, {}}, {image, bw.image, {}, {}, {}}};
    for (auto& s : streams) {
        s.mod = matvec(temb, s.w.modulation);
        s.normed = Matrix<float>(s.x.rows(), d);
        std::span<const float> mod(s.mod);
        modulated_norm(s.x.view(), mod.subspan(0, d), mod.subspan(d, d), s.normed.view());
        s.qkv = Matrix<float>(s.x.rows(), 3 * d);
        matmul(s.normed.view(), s.w.qkv, s.qkv.view());
    }

    // joint q/k/v, text rows first
    Matrix<float> qkv(seq, 3 * d);
    std::copy(streams[0].qkv.values().begin(), streams[0].qkv.values().end(), qkv.values().begin());
    std::copy(streams[1].qkv.values().begin(), streams[1].qkv.values().end(),
              qkv.values().begin() + static_cast<std::ptrdiff_t>(tt * 3 * d));

    Matrix<float> attn_out(seq, d, 0.0f);
    Matrix<float> logits(seq, seq);
    Matrix<float> probs(seq, seq);
    Matrix<float> key_t(dh, seq);
    Matrix<float> i2i(ni, ni);
    const float inv_sqrt = static_cast<float>(1.0 / std::sqrt(static_cast<double>(dh)));
    const bool capture_layer = hook && (hook->capture.logits || hook->capture.probabilities) &&
                               wants(hook->capture.layers, layer);
    std::vector<AttentionRecord> layer_records(static_cast<std::size_t>(cfg.n_heads));

    for (int head = 0; head < cfg.n_heads; ++head) {
        const std::size_t qo = static_cast<std::size_t>(head) * dh;
        const std::size_t ko = d + qo;
        const std::size_t vo = 2 * d + qo;
        for (std::size_t j = 0; j < seq; ++j) {
            for (std::size_t c = 0; c < dh; ++c) key_t(c, j) = qkv(j, ko + c);
        }
        detail::gemm(&qkv(0, qo), 3 * d, &key_t(0, 0), seq, &logits(0, 0), seq, seq, seq, dh, false);
        for (auto& v : logits.values()) v *= inv_sqrt;

        if (hook && hook->override_i2i) {
            for (std::size_t i = 0; i < ni; ++i) {
                std::copy_n(&logits(tt + i, tt), ni, i2i.row(i).begin());
            }
            hook->override_i2i(step, layer, head, i2i.view());
            for (std::size_t i = 0; i < ni; ++i) {
                std::copy_n(i2i.row(i).begin(), ni, &logits(tt + i, tt));
            }
        }

        for (std::size_t i = 0; i < seq; ++i) {
            const float* lr = &logits(i, 0);
            float* pr = &probs(i, 0);
            const float mx = *std::max_element(lr, lr + seq);
            double sum = 0.0;
            for (std::size_t j = 0; j < seq; ++j) {
                pr[j] = std::exp(lr[j] - mx);
                sum += pr[j];
            }
            for (std::size_t j = 0; j < seq; ++j) {
                pr[j] = static_cast<float>(static_cast<double>(pr[j]) / sum);
            }
        }

        detail::gemm(&probs(0, 0), seq, &qkv(0, vo), 3 * d, &attn_out(0, qo), d, seq, dh, seq, true);

        const JointAttentionView view{cfg.t_txt, static_cast<int>(seq), logits.view(), probs.view()};
        if (hook && hook->observe) {
            hook->observe(step, layer, head, view);
        }
        if (capture_layer && wants(hook->capture.heads, head)) {
            AttentionRecord& rec = layer_records[static_cast<std::size_t>(head)];
            rec.layer = layer;
            rec.head = head;
            rec.joint = hook->capture.joint;
            if (rec.joint) {
                rec.rows = rec.cols = seq;
                if (hook->capture.logits) rec.logits = logits.values();
                if (hook->capture.probabilities) rec.probabilities = probs.values();
            } else {
                rec.rows = rec.cols = ni;
                if (hook->capture.logits) rec.logits = view.i2i_logits().values();
                if (hook->capture.probabilities) rec.probabilities = view.i2i_probabilities().values();
            }
        }
    }

    if (capture_layer) {
        if (hook->capture.heads.empty()) {
            for (auto& r : layer_records) captured.push_back(std::move(r));
        } else {
            for (int h : hook->capture.heads) {
                if (h < 0 || h >= cfg.n_heads) {
                    throw Error(Errc::IndexOutOfRange, "capture head " + std::to_string(h) + " out of range");
                }
                captured.push_back(layer_records[static_cast<std::size_t>(h)]);
            }
        }
    }

    // projection, residual, MLP per stream
    const std::size_t offsets[2] = {0, tt};
    for (int si = 0; si < 2; ++si) {
        StreamState& s = streams[si];
        const std::size_t rows = s.x.rows();
        matmul(ConstMatrixView<float>(&attn_out(offsets[si], 0), rows, d), s.w.proj, s.x.view(), true);

        std::span<const float> mod(s.mod);
        modulated_norm(s.x.view(), mod.subspan(2 * d, d), mod.subspan(3 * d, d), s.normed.view());
        Matrix<float> hidden(rows, static_cast<std::size_t>(cfg.d_mlp()));
        matmul(s.normed.view(), s.w.mlp_in, hidden.view());
        for (auto& v : hidden.values()) v = gelu(v);
        matmul(hidden.view(), s.w.mlp_out, s.x.view(), true);
    }
    require_finite(text.values(), "text stream", layer);
    require_finite(image.values(), "image stream", layer);
}

Matrix<float> run_features(const ModelWeights& w, const TokenSequence& tokens, double t, const AttentionHook* hook,
                           int step, std::vector<AttentionRecord>& captured) {
    const ModelConfig& cfg = w.config;
    const std::size_t d = static_cast<std::size_t>(cfg.d_model);
    if (tokens.text.rows() != static_cast<std::size_t>(cfg.t_txt) || tokens.text.cols() != d ||
        tokens.image.rows() != static_cast<std::size_t>(cfg.n_img()) || tokens.image.cols() != d) {
        throw Error(Errc::ShapeMismatch, "token sequence does not match model config");
    }
    if (!(t >= 0.0 && t <= 1.0)) {
        throw Error(Errc::InvalidArgument, "t must lie in [0,1]");
    }
    require_finite(tokens.text.values(), "text input", -1);
    require_finite(tokens.image.values(), "image input", -1);

    const std::vector<float> temb = timestep_embedding(t, cfg.d_model);
    Matrix<float> text = tokens.text;
    Matrix<float> image = tokens.image;
    for (int layer = 0; layer < cfg.n_layers; ++layer) {
        run_block(cfg, w.blocks[static_cast<std::size_t>(layer)], layer, temb, text, image, hook, step, captured);
    }
    const std::vector<float> mod = matvec(temb, w.final_modulation);
    std::span<const float> ms(mod);
    Matrix<float> features(image.rows(), d);
    modulated_norm(image.view(), ms.subspan(0, d), ms.subspan(d, d), features.view());
    return features;
}

}  // namespace

Matrix<float> forward_features(const ModelWeights& w, const TokenSequence& tokens, double t,
                               const AttentionHook* hook, int step) {
    std::vector<AttentionRecord> unused;
    return run_features(w, tokens, t, hook, step, unused);
}

std::vector<double> apply_head(const ModelWeights& w, const Matrix<float>& features) {
    Matrix<float> out(features.rows(), static_cast<std::size_t>(w.head.out));
    matmul(features.view(), w.head, out.view());
    require_finite(out.values(), "output head", w.config.n_layers);
    return {out.values().begin(), out.values().end()};
}

ForwardResult forward(const ModelWeights& w, const TokenSequence& tokens, double t, const AttentionHook* hook,
                      int step) {
    ForwardResult r;
    const Matrix<float> features = run_features(w, tokens, t, hook, step, r.captured);
    r.velocity = apply_head(w, features);
    return r;
}

}  // namespace logodiffuser::mmdit
