#include <doctest.h>

#include <cmath>
#include <cstring>
#include <limits>
#include <random>

#include "gemm.hpp"
#include "helpers.hpp"
#include "logodiffuser/error.hpp"
#include "logodiffuser/hash.hpp"
#include "logodiffuser/mmdit.hpp"

using namespace logodiffuser;
using namespace logodiffuser::mmdit;

namespace {

TokenSequence tokens_for(const ModelWeights& w, const std::vector<double>& latent, std::string_view prompt) {
    return {embed_prompt(w, prompt), embed_patches(w, latent)};
}

std::vector<double> random_latent(const ModelConfig& c, std::uint64_t seed) {
    return testutil::uniform(static_cast<std::size_t>(c.n_img() * c.patch_dim()), seed, -1.0, 1.0);
}

bool bit_equal(const std::vector<float>& a, const std::vector<float>& b) {
    return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

}  // namespace

TEST_CASE("config validation") {
    ModelConfig c;
    CHECK_NOTHROW(c.validate());
    c.d_model = 65;
    c.n_heads = 4;
    CHECK_THROWS_AS(c.validate(), Error);
    c = ModelConfig{};
    c.n_layers = 0;
    CHECK_THROWS_AS(c.validate(), Error);
    CHECK(ModelConfig{}.n_img() == 256);
    CHECK(ModelConfig{}.image_side() == 128);
}

TEST_CASE("init is deterministic and seed dependent") {
    const ModelWeights a = init_model(testutil::tiny_model(1));
    const ModelWeights b = init_model(testutil::tiny_model(1));
    const ModelWeights c = init_model(testutil::tiny_model(2));
    CHECK(a.checksum() == b.checksum());
    CHECK(a.head.w == b.head.w);
    CHECK(a.checksum() != c.checksum());
    const float bound = 1.0f / std::sqrt(16.0f);
    for (float v : a.blocks[0].image.qkv.w) CHECK(std::fabs(v) <= bound);
}

TEST_CASE("weights save/load round-trips bit-exactly") {
    testutil::TempDir dir("weights");
    const ModelWeights a = init_model(testutil::tiny_model(3));
    a.save(dir / "w.ldtf");
    const ModelWeights b = ModelWeights::load(dir / "w.ldtf");
    CHECK(b.config == a.config);
    CHECK(b.checksum() == a.checksum());
    CHECK(bit_equal(a.blocks[2].text.mlp_out.w, b.blocks[2].text.mlp_out.w));
    CHECK(bit_equal(a.text_table, b.text_table));
}

TEST_CASE("patchify indexing") {
    ModelConfig c = testutil::tiny_model();
    c.grid = 2;
    c.patch = 8;
    glyphkit::GlyphImage g;
    g.width = g.height = 16;
    g.pixels.assign(256, 0.0f);
    g.mask.assign(256, 0);
    g.pixels[0] = 1.0f;           // top-left patch
    g.pixels[15] = 0.5f;          // top-right patch, last column
    g.pixels[16 * 9 + 2] = 0.25f;  // bottom-left patch, row 1 col 2
    const auto p = patchify(g, c);
    REQUIRE(p.size() == 4u * 64u);
    CHECK(p[0] == 1.0);
    CHECK(p[64 + 7] == 0.5);
    CHECK(p[2 * 64 + 8 + 2] == 0.25);
    CHECK(unpatchify(p, c) == std::vector<double>(g.pixels.begin(), g.pixels.end()));

    g.width = 15;
    CHECK_THROWS_AS(patchify(g, c), Error);
}

TEST_CASE("translating ink one patch right permutes raw patch vectors") {
    const ModelConfig c = testutil::tiny_model();
    const int side = c.image_side();
    glyphkit::GlyphImage g;
    g.width = g.height = side;
    g.pixels.assign(static_cast<std::size_t>(side * side), 0.0f);
    g.mask.assign(g.pixels.size(), 0);
    std::mt19937 rng(5);
    // ink only in the first grid-1 patch columns so nothing wraps
    for (int y = 0; y < side; ++y)
        for (int x = 0; x < side - c.patch; ++x)
            g.pixels[static_cast<std::size_t>(y * side + x)] = static_cast<float>(rng() % 4) / 3.0f;
    glyphkit::GlyphImage moved = g;
    std::fill(moved.pixels.begin(), moved.pixels.end(), 0.0f);
    for (int y = 0; y < side; ++y)
        for (int x = 0; x + c.patch < side; ++x)
            moved.pixels[static_cast<std::size_t>(y * side + x + c.patch)] = g.pixels[static_cast<std::size_t>(y * side + x)];

    const auto a = patchify(g, c);
    const auto b = patchify(moved, c);
    const auto pd = static_cast<std::size_t>(c.patch_dim());
    for (int i = 0; i < c.n_img(); ++i) {
        const int row = i / c.grid, col = i % c.grid;
        std::vector<double> expect(pd, 0.0);
        if (col > 0) {
            const auto src = static_cast<std::size_t>(row * c.grid + col - 1);
            expect.assign(a.begin() + static_cast<long>(src * pd), a.begin() + static_cast<long>((src + 1) * pd));
        }
        const auto at = static_cast<std::size_t>(i) * pd;
        CHECK(std::vector<double>(b.begin() + static_cast<long>(at), b.begin() + static_cast<long>(at + pd)) == expect);
    }
}

TEST_CASE("zero image embeds differ only by position code") {
    const ModelConfig c = testutil::tiny_model();
    const ModelWeights w = init_model(c);
    const std::vector<double> zeros(static_cast<std::size_t>(c.n_img() * c.patch_dim()), 0.0);
    const Matrix<float> e = embed_patches(w, zeros);
    int distinct_pairs = 0;
    for (int i = 1; i < c.n_img(); ++i) distinct_pairs += e.row(0)[0] != e.row(static_cast<std::size_t>(i))[0] ||
                                                          e.row(0)[1] != e.row(static_cast<std::size_t>(i))[1];
    CHECK(distinct_pairs > 0);
    // same position code added to two latents: the difference is the linear embedding of the difference
    const auto x = random_latent(c, 3);
    const Matrix<float> ex = embed_patches(w, x);
    for (int j = 0; j < c.d_model; ++j) {
        double lin = 0.0;
        for (int k = 0; k < c.patch_dim(); ++k)
            lin += x[static_cast<std::size_t>(k)] * w.patch_embed.w[static_cast<std::size_t>(k * c.d_model + j)];
        CHECK(ex(0, static_cast<std::size_t>(j)) - e(0, static_cast<std::size_t>(j)) == doctest::Approx(lin).epsilon(1e-5));
    }
}

TEST_CASE("prompt embedding") {
    const ModelConfig c = testutil::tiny_model();
    const ModelWeights w = init_model(c);
    const Matrix<float> empty = embed_prompt(w, "");
    for (int r = 0; r < c.t_txt; ++r)
        CHECK(std::vector<float>(empty.row(static_cast<std::size_t>(r)).begin(), empty.row(static_cast<std::size_t>(r)).end()) == w.pad);
    CHECK(embed_prompt(w, "a red logo") == embed_prompt(w, "a red logo"));
    CHECK(embed_prompt(w, "  a red\tlogo ") == embed_prompt(w, "a red logo"));

    const Matrix<float> x = embed_prompt(w, "a red logo");
    const Matrix<float> y = embed_prompt(w, "a blue logo");
    for (int r = 0; r < c.t_txt; ++r) {
        const bool same = std::equal(x.row(static_cast<std::size_t>(r)).begin(), x.row(static_cast<std::size_t>(r)).end(),
                                     y.row(static_cast<std::size_t>(r)).begin());
        CHECK(same == (r != 1));
    }
    // truncation to t_txt words
    CHECK(embed_prompt(w, "a b c d e f") == embed_prompt(w, "a b c d"));
    // FNV-1a 64 of "a" is 0xaf63dc4c8601ec8c
    CHECK(word_bucket("a") == static_cast<int>(0xaf63dc4c8601ec8cULL % 4096));
}

TEST_CASE("forward: probability rows normalize and the I2I view is the lower-right block") {
    const ModelConfig c = testutil::tiny_model();
    const ModelWeights w = init_model(c);
    const TokenSequence tok = tokens_for(w, random_latent(c, 11), "a text logo");
    AttentionHook joint;
    joint.capture.logits = joint.capture.probabilities = joint.capture.joint = true;
    AttentionHook i2i;
    i2i.capture.logits = i2i.capture.probabilities = true;
    const ForwardResult rj = forward(w, tok, 0.6, &joint);
    const ForwardResult ri = forward(w, tok, 0.6, &i2i);
    REQUIRE(rj.captured.size() == static_cast<std::size_t>(c.n_layers * c.n_heads));
    REQUIRE(ri.captured.size() == rj.captured.size());
    const auto seq = static_cast<std::size_t>(c.seq_len());
    const auto tt = static_cast<std::size_t>(c.t_txt);
    for (std::size_t m = 0; m < rj.captured.size(); ++m) {
        const auto& J = rj.captured[m];
        const auto& I = ri.captured[m];
        CHECK(J.layer == I.layer);
        CHECK(J.head == I.head);
        for (std::size_t r = 0; r < seq; ++r) {
            double s = 0.0;
            for (std::size_t k = 0; k < seq; ++k) s += J.probabilities_view()(r, k);
            CHECK(std::fabs(s - 1.0) <= 1e-6);
        }
        for (std::size_t r = 0; r < I.rows; ++r)
            for (std::size_t k = 0; k < I.cols; ++k) {
                CHECK(I.logits_view()(r, k) == J.logits_view()(tt + r, tt + k));
                CHECK(I.probabilities_view()(r, k) == J.probabilities_view()(tt + r, tt + k));
            }
    }
    // identity hook and no hook agree bit for bit
    AttentionHook identity;
    identity.override_i2i = [](int, int, int, MatrixView<float>) {};
    CHECK(forward(w, tok, 0.6, &identity).velocity == forward(w, tok, 0.6).velocity);
    CHECK(forward(w, tok, 0.6, &joint).velocity == forward(w, tok, 0.6).velocity);
}

TEST_CASE("forward is deterministic and step dependent") {
    const ModelConfig c = testutil::tiny_model();
    const ModelWeights w = init_model(c);
    const TokenSequence tok = tokens_for(w, random_latent(c, 12), "x");
    CHECK(forward(w, tok, 0.3).velocity == forward(w, tok, 0.3).velocity);
    CHECK(forward(w, tok, 0.3).velocity != forward(w, tok, 0.7).velocity);
}

TEST_CASE("constant I2I row gives uniform image-key probabilities sharing the non-text mass") {
    const ModelConfig c = testutil::tiny_model();
    const ModelWeights w = init_model(c);
    const TokenSequence tok = tokens_for(w, random_latent(c, 13), "glyph row");
    const int target = 5;
    AttentionHook hook;
    hook.capture.probabilities = hook.capture.joint = true;
    hook.override_i2i = [&](int, int, int, MatrixView<float> m) {
        for (std::size_t k = 0; k < m.cols; ++k) m(static_cast<std::size_t>(target), k) = 0.75f;
    };
    const ForwardResult r = forward(w, tok, 0.5, &hook);
    const auto tt = static_cast<std::size_t>(c.t_txt);
    const auto row = tt + target;
    const auto n = static_cast<std::size_t>(c.n_img());
    for (const auto& rec : r.captured) {
        const auto P = rec.probabilities_view();
        double text_mass = 0.0;
        for (std::size_t k = 0; k < tt; ++k) text_mass += P(row, k);
        const double expect = (1.0 - text_mass) / static_cast<double>(n);
        for (std::size_t k = 0; k < n; ++k) CHECK(P(row, tt + k) == doctest::Approx(expect).epsilon(1e-5));
    }
}

TEST_CASE("override locality: only the I2I block of the hooked layer changes") {
    const ModelConfig c = testutil::tiny_model();
    const ModelWeights w = init_model(c);
    const TokenSequence tok = tokens_for(w, random_latent(c, 14), "p q");
    AttentionHook plain;
    plain.capture.logits = plain.capture.joint = true;
    AttentionHook hooked = plain;
    const int hooked_layer = c.n_layers - 1;
    hooked.override_i2i = [&](int, int layer, int, MatrixView<float> m) {
        if (layer != hooked_layer) return;
        for (float& v : m.flat()) v = -v + 0.5f;
    };
    const ForwardResult a = forward(w, tok, 0.4, &plain);
    const ForwardResult b = forward(w, tok, 0.4, &hooked);
    const auto tt = static_cast<std::size_t>(c.t_txt);
    const auto seq = static_cast<std::size_t>(c.seq_len());
    bool i2i_changed = false;
    for (std::size_t m = 0; m < a.captured.size(); ++m) {
        const auto A = a.captured[m].logits_view();
        const auto B = b.captured[m].logits_view();
        for (std::size_t r = 0; r < seq; ++r)
            for (std::size_t k = 0; k < seq; ++k) {
                const bool in_i2i = r >= tt && k >= tt;
                if (a.captured[m].layer != hooked_layer || !in_i2i) {
                    CHECK(A(r, k) == B(r, k));
                } else if (A(r, k) != B(r, k)) {
                    i2i_changed = true;
                }
            }
    }
    CHECK(i2i_changed);
    CHECK(a.velocity != b.velocity);
}

TEST_CASE("head selection order is respected") {
    const ModelConfig c = testutil::tiny_model();
    const ModelWeights w = init_model(c);
    const TokenSequence tok = tokens_for(w, random_latent(c, 15), "heads");
    AttentionHook fwd;
    fwd.capture.probabilities = true;
    fwd.capture.layers = {1};
    AttentionHook rev = fwd;
    rev.capture.heads = {1, 0};
    const auto a = forward(w, tok, 0.2, &fwd).captured;
    const auto b = forward(w, tok, 0.2, &rev).captured;
    REQUIRE(a.size() == 2);
    REQUIRE(b.size() == 2);
    CHECK(a[0].layer == 1);
    CHECK(b[0].head == 1);
    CHECK(b[0].probabilities == a[1].probabilities);
    CHECK(b[1].probabilities == a[0].probabilities);
    rev.capture.heads = {7};
    CHECK_THROWS_AS(forward(w, tok, 0.2, &rev), Error);
}

TEST_CASE("non-finite input is reported") {
    const ModelConfig c = testutil::tiny_model();
    const ModelWeights w = init_model(c);
    TokenSequence tok = tokens_for(w, random_latent(c, 16), "nan");
    tok.image(3, 2) = std::numeric_limits<float>::quiet_NaN();
    try {
        forward(w, tok, 0.5);
        FAIL("expected NonFiniteActivation");
    } catch (const Error& e) {
        CHECK(e.code() == Errc::NonFiniteActivation);
    }
}

TEST_CASE("finite differences of the head probe match its analytic linear gradient") {
    // attention pinned: every I2I logit replaced by the same constant
    const ModelConfig c = testutil::tiny_model();
    const ModelWeights w = init_model(c);
    const TokenSequence tok = tokens_for(w, random_latent(c, 17), "probe");
    AttentionHook frozen;
    frozen.override_i2i = [](int, int, int, MatrixView<float> m) {
        for (float& v : m.flat()) v = 0.0f;
    };
    const Matrix<float> f = forward_features(w, tok, 0.5, &frozen);
    CHECK(apply_head(w, f) == forward(w, tok, 0.5, &frozen).velocity);

    auto probe = [&](const Matrix<float>& x) {
        double s = 0.0;
        for (double v : apply_head(w, x)) s += v;
        return s;
    };
    std::mt19937_64 rng(99);
    std::normal_distribution<float> nd;
    for (int trial = 0; trial < 5; ++trial) {
        Matrix<float> dir(f.rows(), f.cols());
        for (float& v : dir.values()) v = nd(rng);
        double analytic = 0.0;
        for (std::size_t i = 0; i < f.rows(); ++i)
            for (std::size_t k = 0; k < f.cols(); ++k) {
                double col = 0.0;
                for (int o = 0; o < w.head.out; ++o) col += w.head.w[k * static_cast<std::size_t>(w.head.out) + static_cast<std::size_t>(o)];
                analytic += dir(i, k) * col;
            }
        const float h = 0.25f;
        Matrix<float> plus = f, minus = f;
        for (std::size_t i = 0; i < f.values().size(); ++i) {
            plus.values()[i] += h * dir.values()[i];
            minus.values()[i] -= h * dir.values()[i];
        }
        const double fd = (probe(plus) - probe(minus)) / (2.0 * h);
        CHECK(std::fabs(fd - analytic) <= 1e-4 * std::max(1.0, std::fabs(analytic)));
    }
}

TEST_CASE("gemm kernels agree bit for bit with the ascending-k reference") {
    std::mt19937_64 rng(21);
    std::uniform_real_distribution<float> d(-1.0f, 1.0f);
    const std::size_t shapes[][3] = {{272, 192, 64}, {272, 272, 16}, {272, 16, 272}, {1, 256, 64}, {7, 13, 5}, {9, 33, 3}};
    for (const auto& s : shapes) {
        const std::size_t m = s[0], n = s[1], k = s[2];
        std::vector<float> a(m * k), b(k * n), c0(m * n), ref(m * n);
        for (float& v : a) v = d(rng);
        for (float& v : b) v = d(rng);
        for (float& v : c0) v = d(rng);
        for (bool acc : {false, true}) {
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) {
                    float sum = acc ? c0[i * n + j] : 0.0f;
                    for (std::size_t kk = 0; kk < k; ++kk) {
                        const float p = a[i * k + kk] * b[kk * n + j];
                        sum = sum + p;
                    }
                    ref[i * n + j] = sum;
                }
            std::vector<float> fast = c0, portable = c0;
            detail::set_portable_gemm(false);
            detail::gemm(a.data(), k, b.data(), n, fast.data(), n, m, n, k, acc);
            detail::set_portable_gemm(true);
            detail::gemm(a.data(), k, b.data(), n, portable.data(), n, m, n, k, acc);
            detail::set_portable_gemm(false);
            CHECK(bit_equal(fast, ref));
            CHECK(bit_equal(portable, ref));
        }
    }
    const std::string kernel = detail::gemm_kernel();
    CHECK((kernel == "avx2" || kernel == "sse" || kernel == "scalar"));
}

TEST_CASE("forward output does not depend on the gemm kernel") {
    const ModelConfig c = testutil::tiny_model();
    const ModelWeights w = init_model(c);
    const TokenSequence tok = tokens_for(w, random_latent(c, 18), "kernel");
    detail::set_portable_gemm(true);
    const auto a = forward(w, tok, 0.5).velocity;
    detail::set_portable_gemm(false);
    CHECK(forward(w, tok, 0.5).velocity == a);
}
