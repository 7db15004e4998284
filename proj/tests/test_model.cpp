#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>

#include "dualsam/model.hpp"
#include "dualsam/rng.hpp"
#include "dualsam/train.hpp"
#include "test_util.hpp"

using namespace dualsam;
using testutil::random_tensor;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.image_size = 32;
    cfg.patch_size = 8;
    cfg.embed_dim = 16;
    cfg.heads = 2;
    cfg.encoder_layers = 2;
    cfg.lora_rank = 2;
    cfg.adapter_dim = 4;
    cfg.prompt_layers = 2;
    cfg.injection_indices = {1, 2};
    cfg.decoder_levels = 2;
    cfg.ffn_hidden = 24;
    cfg.prompt_ffn_hidden = 24;
    cfg.se_dim = 4;
    cfg.seed = 99;
    return cfg;
}

EncoderLayerParams tiny_layer(Rng& rng, int d, int rank, int adapter, int hidden) {
    EncoderLayerParams p;
    p.attn.w_q = random_tensor(rng, {d, d}, -0.5, 0.5, true);
    p.attn.w_k = random_tensor(rng, {d, d}, -0.5, 0.5, true);
    p.attn.w_v = random_tensor(rng, {d, d}, -0.5, 0.5, true);
    p.ffn.w1 = random_tensor(rng, {d, hidden}, -0.5, 0.5, true);
    p.ffn.b1 = random_tensor(rng, {hidden}, -0.1, 0.1, true);
    p.ffn.w2 = random_tensor(rng, {hidden, d}, -0.5, 0.5, true);
    p.ffn.b2 = random_tensor(rng, {d}, -0.1, 0.1, true);
    p.ln.gain = random_tensor(rng, {d}, 0.8, 1.2, true);
    p.ln.bias = random_tensor(rng, {d}, -0.1, 0.1, true);
    p.q_down = random_tensor(rng, {d, rank}, -0.2, 0.2, true);
    p.q_up = random_tensor(rng, {rank, d}, -0.2, 0.2, true);
    p.v_down = random_tensor(rng, {d, rank}, -0.2, 0.2, true);
    p.v_up = random_tensor(rng, {rank, d}, -0.2, 0.2, true);
    p.adapter_down = random_tensor(rng, {d, adapter}, -0.2, 0.2, true);
    p.adapter_up = random_tensor(rng, {adapter, d}, -0.2, 0.2, true);
    return p;
}

RawImage solid_image(int size, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    RawImage img;
    img.width = size;
    img.height = size;
    img.channels = 3;
    img.pixels.resize(static_cast<std::size_t>(size) * size * 3);
    for (int i = 0; i < size * size; ++i) {
        img.pixels[static_cast<std::size_t>(3 * i)] = r;
        img.pixels[static_cast<std::size_t>(3 * i + 1)] = g;
        img.pixels[static_cast<std::size_t>(3 * i + 2)] = b;
    }
    return img;
}

RawImage noisy_image(Rng& rng, int size) {
    RawImage img = solid_image(size, 0, 0, 0);
    for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng.uniform_int(10, 245));
    return img;
}

constexpr double kFdTol = 1e-6;

}  // namespace

TEST_CASE("config validation catches contract violations") {
    ModelConfig cfg = tiny_config();
    CHECK_NOTHROW(cfg.validate());

    ModelConfig bad = cfg;
    bad.embed_dim = 15;  // not divisible by heads
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

    bad = cfg;
    bad.injection_indices = {2, 1};
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

    bad = cfg;
    bad.injection_indices = {1, 5};
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

    bad = cfg;
    bad.injection_indices = {1};
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

    bad = cfg;
    bad.image_size = 30;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

    bad = cfg;
    bad.se_dim = bad.embed_dim;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

    bad = cfg;
    bad.dual_branch = false;  // prompts still on
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("build_model freezes the encoder stack and zero-inits the deltas") {
    DualModel model = build_model(tiny_config());
    CHECK(model.beta.has_value());
    CHECK(model.prompt.has_value());

    for (const Parameter& p : model.params.items()) {
        CHECK(p.value.requires_grad());
        const bool base = p.name.find(".attn.") != std::string::npos ||
                          p.name.find(".ffn.") != std::string::npos ||
                          p.name.find(".ln.") != std::string::npos ||
                          p.name.find("patch") != std::string::npos;
        const bool branch_base = (p.name.rfind("alpha.", 0) == 0 || p.name.rfind("beta.", 0) == 0) &&
                                 p.name.find(".dfam") == std::string::npos && base;
        CHECK(p.frozen == branch_base);
        if (p.name.find("lora_q.up") != std::string::npos ||
            p.name.find("lora_v.up") != std::string::npos ||
            p.name.find("adapter.up") != std::string::npos ||
            p.name.find("gate") != std::string::npos) {
            for (double v : p.value.values()) CHECK(v == 0.0);
        }
    }

    // duplicate names are rejected
    ParamStore store;
    store.add("x", Tensor::zeros({1}, true), false);
    CHECK_THROWS_AS(store.add("x", Tensor::zeros({1}, true), false), std::invalid_argument);
}

TEST_CASE("trainable share of the branch encoders stays below a quarter") {
    ModelConfig cfg;  // the full-size default config
    cfg.seed = 7;
    DualModel model = build_model(cfg);
    std::int64_t frozen = 0, trainable = 0;
    for (const Parameter& p : model.params.items()) {
        const bool encoder_scope = (p.name.rfind("alpha.", 0) == 0 || p.name.rfind("beta.", 0) == 0) &&
                                   (p.name.find(".enc") != std::string::npos ||
                                    p.name.find(".patch.") != std::string::npos ||
                                    p.name.find(".gate") != std::string::npos);
        if (!encoder_scope) continue;
        (p.frozen ? frozen : trainable) += p.value.size();
    }
    CHECK(trainable > 0);
    CHECK(frozen > 0);
    CHECK(static_cast<double>(trainable) / static_cast<double>(trainable + frozen) < 0.25);
}

TEST_CASE("patch_embed shapes, zero case, and gradient") {
    ModelConfig cfg = tiny_config();
    DualModel model = build_model(cfg);
    NormImage zero;
    zero.width = cfg.image_size;
    zero.height = cfg.image_size;
    zero.channels = 3;
    zero.values.assign(static_cast<std::size_t>(cfg.image_size) * cfg.image_size * 3, 0.0);

    Tape tape;
    Tensor tokens = patch_embed(tape, {&zero}, model.alpha.patch_w, model.alpha.patch_b,
                                cfg.patch_size);
    REQUIRE(tokens.shape() == Shape{cfg.tokens(), cfg.embed_dim});
    for (std::int64_t i = 0; i < tokens.size(); ++i) CHECK(tokens.value_at(i) == 0.0);

    // six-channel stream doubles the input features
    Tensor pair_tokens = patch_embed(tape, {&zero, &zero}, model.prompt->patch_w,
                                     model.prompt->patch_b, cfg.patch_size);
    REQUIRE(pair_tokens.shape() == Shape{cfg.tokens(), cfg.embed_dim});

    // projection gradient
    Rng rng(5);
    NormImage img = zero;
    for (double& v : img.values) v = rng.uniform();
    Tensor w0 = random_tensor(rng, {3 * cfg.patch_size * cfg.patch_size, 6}, -0.3, 0.3);
    Tensor b0 = random_tensor(rng, {6}, -0.1, 0.1);
    const double err = finite_diff_check(
        [&](Tape& t, const Tensor& probe) {
            return sum(t, patch_embed(t, {&img}, probe, b0, cfg.patch_size));
        },
        w0, 1e-5);
    CHECK(err < kFdTol);

    NormImage wrong = zero;
    wrong.width = 17;
    CHECK_THROWS_AS(patch_embed(tape, {&wrong}, model.alpha.patch_w, model.alpha.patch_b,
                                cfg.patch_size),
                    std::invalid_argument);
}

TEST_CASE("encoder_block: zero-initialized deltas change nothing") {
    Rng rng(31);
    const int d = 8, n = 5;
    EncoderLayerParams p = tiny_layer(rng, d, 2, 4, 12);
    // zero the up matrices, as at initialization
    for (Tensor* t : {&p.q_up, &p.v_up, &p.adapter_up}) {
        for (double& v : t->mutable_values()) v = 0.0;
    }
    Tensor x = random_tensor(rng, {n, d}, -1.0, 1.0);
    Tape tape;
    Tensor with_deltas = encoder_block(tape, x, p, 2, true);
    Tensor base_only = encoder_block(tape, x, p, 2, false);
    REQUIRE(with_deltas.shape() == Shape{n, d});
    double worst = 0.0;
    for (std::int64_t i = 0; i < with_deltas.size(); ++i) {
        worst = std::max(worst, std::abs(with_deltas.value_at(i) - base_only.value_at(i)));
    }
    CHECK(worst == 0.0);
}

TEST_CASE("encoder_block gradients pass the finite-difference oracle") {
    const int d = 8, n = 5;
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
        Rng rng(seed * 7919);
        EncoderLayerParams p = tiny_layer(rng, d, 2, 4, 12);
        Tensor x = random_tensor(rng, {n, d}, -1.0, 1.0);

        auto check_wrt = [&](Tensor EncoderLayerParams::* field) {
            EncoderLayerParams probe_params = p;
            const double err = finite_diff_check(
                [&](Tape& t, const Tensor& probe) {
                    EncoderLayerParams local = probe_params;
                    local.*field = probe;
                    return sum(t, encoder_block(t, x, local, 2, true));
                },
                p.*field, 1e-5);
            CHECK(err < kFdTol);
        };
        check_wrt(&EncoderLayerParams::q_down);
        check_wrt(&EncoderLayerParams::q_up);
        check_wrt(&EncoderLayerParams::v_down);
        check_wrt(&EncoderLayerParams::v_up);
        check_wrt(&EncoderLayerParams::adapter_down);
        check_wrt(&EncoderLayerParams::adapter_up);

        const double err_x = finite_diff_check(
            [&](Tape& t, const Tensor& probe) { return sum(t, encoder_block(t, probe, p, 2, true)); },
            x, 1e-5);
        CHECK(err_x < kFdTol);
    }
}

namespace {

McpLevelParams tiny_mcp(Rng& rng, int d, int hidden) {
    McpLevelParams p;
    auto attn = [&](AttnProjParams& a) {
        a.w_q = random_tensor(rng, {d, d}, -0.4, 0.4, true);
        a.w_k = random_tensor(rng, {d, d}, -0.4, 0.4, true);
        a.w_v = random_tensor(rng, {d, d}, -0.4, 0.4, true);
    };
    attn(p.trans_attn);
    attn(p.mhca);
    auto ffn = [&](FfnParams& f) {
        f.w1 = random_tensor(rng, {d, hidden}, -0.4, 0.4, true);
        f.b1 = random_tensor(rng, {hidden}, -0.1, 0.1, true);
        f.w2 = random_tensor(rng, {hidden, d}, -0.4, 0.4, true);
        f.b2 = random_tensor(rng, {d}, -0.1, 0.1, true);
    };
    ffn(p.trans_ffn);
    ffn(p.ffn);
    auto ln = [&](LayerNormParams& l) {
        l.gain = random_tensor(rng, {d}, 0.8, 1.2, true);
        l.bias = random_tensor(rng, {d}, -0.1, 0.1, true);
    };
    ln(p.trans_ln);
    ln(p.ln);
    p.fc_alpha_w = random_tensor(rng, {d, d}, -0.4, 0.4, true);
    p.fc_alpha_b = random_tensor(rng, {d}, -0.1, 0.1, true);
    p.fc_beta_w = random_tensor(rng, {d, d}, -0.4, 0.4, true);
    p.fc_beta_b = random_tensor(rng, {d}, -0.1, 0.1, true);
    return p;
}

}  // namespace

TEST_CASE("mcp_step shapes, degenerate projections, gradients") {
    const int d = 8, n = 4;
    Rng rng(101);
    McpLevelParams p = tiny_mcp(rng, d, 12);
    Tensor xa = random_tensor(rng, {n, d}, -1.0, 1.0);
    Tensor xb = random_tensor(rng, {n, d}, -1.0, 1.0);
    Tensor state = random_tensor(rng, {n, d}, -1.0, 1.0);

    Tape tape;
    McpStepOut out = mcp_step(tape, xa, xb, state, p, 2);
    REQUIRE(out.p_alpha.shape() == Shape{n, d});
    REQUIRE(out.p_beta.shape() == Shape{n, d});
    REQUIRE(out.next_state.shape() == Shape{n, d});

    // zero FC weights emit zero prompts regardless of everything upstream
    McpLevelParams zeroed = p;
    zeroed.fc_alpha_w = Tensor::zeros({d, d}, true);
    zeroed.fc_alpha_b = Tensor::zeros({d}, true);
    McpStepOut out0 = mcp_step(tape, xa, xb, state, zeroed, 2);
    for (std::int64_t i = 0; i < out0.p_alpha.size(); ++i) CHECK(out0.p_alpha.value_at(i) == 0.0);

    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
        Rng seed_rng(seed * 271);
        Tensor probe_state = random_tensor(seed_rng, {n, d}, -1.0, 1.0);
        // through the cross-attention path: perturb the alpha features
        const double err_a = finite_diff_check(
            [&](Tape& t, const Tensor& probe) {
                McpStepOut o = mcp_step(t, probe, xb, probe_state, p, 2);
                return sum(t, add(t, o.p_alpha, o.p_beta));
            },
            xa, 1e-5);
        CHECK(err_a < kFdTol);
        const double err_k = finite_diff_check(
            [&](Tape& t, const Tensor& probe) {
                McpLevelParams local = p;
                local.mhca.w_k = probe;
                McpStepOut o = mcp_step(t, xa, xb, probe_state, local, 2);
                return sum(t, o.p_alpha);
            },
            p.mhca.w_k, 1e-5);
        CHECK(err_k < kFdTol);
    }
}

TEST_CASE("inject_prompt identities and gate derivative") {
    Rng rng(11);
    Tensor x = random_tensor(rng, {4, 6}, -1.0, 1.0);
    Tensor p = random_tensor(rng, {4, 6}, -1.0, 1.0);

    Tape tape;
    Tensor zero_gate = Tensor::zeros({1}, true);
    Tensor same = inject_prompt(tape, x, p, zero_gate);
    CHECK(same.values() == x.values());

    Tensor one_gate = Tensor::full({1}, 1.0, true);
    Tensor minus = scale(tape, x, -1.0);
    Tensor cancelled = inject_prompt(tape, x, minus, one_gate);
    for (std::int64_t i = 0; i < cancelled.size(); ++i) CHECK(cancelled.value_at(i) == 0.0);

    // dE/dg = p, via the finite-difference oracle and directly
    Tensor gate = Tensor::full({1}, 0.3);
    const double err = finite_diff_check(
        [&](Tape& t, const Tensor& probe) { return sum(t, inject_prompt(t, x, p, probe)); }, gate,
        1e-5);
    CHECK(err < kFdTol);

    Tensor g2 = Tensor::full({1}, 0.3, true);
    Tape t2;
    Tensor loss = sum(t2, inject_prompt(t2, x, p, g2));
    backward(t2, loss);
    double expect = 0.0;
    for (std::int64_t i = 0; i < p.size(); ++i) expect += p.value_at(i);
    CHECK(g2.grad()[0] == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("dfam: zero-gate closed form, doubling, gradients") {
    Rng rng(301);
    const int c = 8, h = 4;
    DfamBlockParams p;
    p.fuse_w = random_tensor(rng, {c, 2 * c, 1, 1}, -0.3, 0.3, true);
    p.fuse_b = random_tensor(rng, {c}, -0.1, 0.1, true);
    p.se_down = Tensor::zeros({c, 2}, true);
    p.se_up = Tensor::zeros({2, c}, true);
    p.dil_w = random_tensor(rng, {c, c, 3, 3}, -0.2, 0.2, true);
    p.dil_b = random_tensor(rng, {c}, -0.1, 0.1, true);

    Tensor e = random_tensor(rng, {c, h, h}, -1.0, 1.0);
    Tensor g_prev = random_tensor(rng, {c, h, h}, -1.0, 1.0);

    // with zero squeeze-excite weights the channel gate is exactly 0.5
    Tape tape;
    Tensor fused = concat_channels(tape, e, g_prev);
    Tensor fr = gelu(tape, add_channel_bias(tape, conv2d(tape, fused, p.fuse_w, 1, 0), p.fuse_b));
    Tensor out = dfam(tape, e, g_prev, p);
    REQUIRE(out.shape() == Shape{c, 2 * h, 2 * h});
    // reconstruct: out = upsample(gelu(conv(1.5 * fr)))
    Tensor probe = upsample2x(
        tape, gelu(tape, add_channel_bias(tape, conv2d(tape, scale(tape, fr, 1.5), p.dil_w, 2, 2),
                                          p.dil_b)));
    for (std::int64_t i = 0; i < out.size(); ++i) {
        CHECK(out.value_at(i) == doctest::Approx(probe.value_at(i)).epsilon(1e-12));
    }

    // gradients through the full block
    DfamBlockParams lively = p;
    lively.se_down = random_tensor(rng, {c, 2}, -0.3, 0.3, true);
    lively.se_up = random_tensor(rng, {2, c}, -0.3, 0.3, true);
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
        Rng seed_rng(seed * 7321);
        Tensor ee = random_tensor(seed_rng, {c, h, h}, -1.0, 1.0);
        const double err_e = finite_diff_check(
            [&](Tape& t, const Tensor& pr) { return sum(t, dfam(t, pr, g_prev, lively)); }, ee, 1e-5);
        CHECK(err_e < kFdTol);
        const double err_w = finite_diff_check(
            [&](Tape& t, const Tensor& pr) {
                DfamBlockParams local = lively;
                local.dil_w = pr;
                return sum(t, dfam(t, e, g_prev, local));
            },
            lively.dil_w, 1e-5);
        CHECK(err_w < kFdTol);
        const double err_se = finite_diff_check(
            [&](Tape& t, const Tensor& pr) {
                DfamBlockParams local = lively;
                local.se_down = pr;
                return sum(t, dfam(t, e, g_prev, local));
            },
            lively.se_down, 1e-5);
        CHECK(err_se < kFdTol);
    }

    Tensor small = random_tensor(rng, {c, 2, 2}, -1.0, 1.0);
    Tape t3;
    CHECK_THROWS_AS(dfam(t3, small, g_prev, p), std::invalid_argument);
}

TEST_CASE("forward emits per-level sigmoid maps at doubling resolutions") {
    ModelConfig cfg = tiny_config();
    DualModel model = build_model(cfg);
    Rng rng(777);
    RawImage img = noisy_image(rng, cfg.image_size);

    Tape tape;
    ForwardResult out = forward(tape, model, img);
    REQUIRE(out.alpha.maps.size() == 2);
    REQUIRE(out.beta.maps.size() == 2);
    CHECK(out.alpha.maps[0].shape() == Shape{8, 4, 4});
    CHECK(out.alpha.maps[1].shape() == Shape{8, 8, 8});
    CHECK(out.alpha.prompted.size() == 2);
    for (const Tensor& map : {out.alpha.maps[0], out.alpha.maps[1], out.beta.maps[1]}) {
        for (std::int64_t i = 0; i < map.size(); ++i) {
            CHECK(map.value_at(i) > 0.0);
            CHECK(map.value_at(i) < 1.0);
        }
    }

    // determinism: a second forward is bit-identical
    Tape tape2;
    ForwardResult again = forward(tape2, model, img);
    CHECK(again.alpha.maps[1].values() == out.alpha.maps[1].values());

    RawImage wrong = img;
    wrong.width = 16;
    wrong.pixels.resize(static_cast<std::size_t>(16) * img.height * 3);
    CHECK_THROWS_AS(forward(tape, model, wrong), std::invalid_argument);
}

TEST_CASE("identity at init: trainable additions change no activation") {
    ModelConfig cfg = tiny_config();
    DualModel full = build_model(cfg);

    ModelConfig bare_cfg = cfg;
    bare_cfg.use_adapters = false;
    bare_cfg.use_prompts = false;
    DualModel bare = build_model(bare_cfg);

    Rng rng(888);
    RawImage img = noisy_image(rng, cfg.image_size);
    Tape t1, t2;
    ForwardResult with_deltas = forward(t1, full, img);
    ForwardResult base = forward(t2, bare, img);

    double worst = 0.0;
    for (std::size_t level = 0; level < with_deltas.alpha.prompted.size(); ++level) {
        const Tensor& a = with_deltas.alpha.prompted[level];
        const Tensor& b = base.alpha.prompted[level];
        for (std::int64_t i = 0; i < a.size(); ++i) {
            worst = std::max(worst, std::abs(a.value_at(i) - b.value_at(i)));
        }
    }
    for (std::size_t level = 0; level < with_deltas.alpha.maps.size(); ++level) {
        const Tensor& a = with_deltas.alpha.maps[level];
        const Tensor& b = base.alpha.maps[level];
        for (std::int64_t i = 0; i < a.size(); ++i) {
            worst = std::max(worst, std::abs(a.value_at(i) - b.value_at(i)));
        }
    }
    CHECK(worst == 0.0);
}

TEST_CASE("default config emits four maps per branch at sizes 8, 16, 32, 64") {
    ModelConfig cfg;  // defaults: 64x64, patch 8, 4 levels
    cfg.seed = 12;
    DualModel model = build_model(cfg);
    Rng rng(4242);
    RawImage img = noisy_image(rng, cfg.image_size);
    Tape tape;
    ForwardResult out = forward(tape, model, img);
    REQUIRE(out.alpha.maps.size() == 4);
    REQUIRE(out.beta.maps.size() == 4);
    for (int l = 0; l < 4; ++l) {
        const int expect = 8 << l;
        CHECK(out.alpha.maps[static_cast<std::size_t>(l)].shape() == Shape{8, expect, expect});
        CHECK(out.beta.maps[static_cast<std::size_t>(l)].shape() == Shape{8, expect, expect});
    }
}

TEST_CASE("single-branch model runs without beta or prompts") {
    ModelConfig cfg = tiny_config();
    cfg.dual_branch = false;
    cfg.use_prompts = false;
    DualModel model = build_model(cfg);
    CHECK(!model.beta.has_value());
    CHECK(!model.prompt.has_value());

    Rng rng(999);
    RawImage img = noisy_image(rng, cfg.image_size);
    Tape tape;
    ForwardResult out = forward(tape, model, img);
    CHECK(out.alpha.maps.size() == 2);
    CHECK(out.beta.maps.empty());
}

TEST_CASE("checkpoints round-trip bit-exactly and validate") {
    ModelConfig cfg = tiny_config();
    DualModel model = build_model(cfg);
    const auto bytes = checkpoint_to_bytes(model.params);

    // same-seed rebuild serializes identically
    DualModel twin = build_model(cfg);
    CHECK(checkpoint_to_bytes(twin.params) == bytes);

    // perturb, then restore
    for (Parameter& p : twin.params.items()) {
        for (double& v : p.value.mutable_values()) v += 1.0;
    }
    CHECK(checkpoint_to_bytes(twin.params) != bytes);
    checkpoint_from_bytes(bytes, twin.params);
    CHECK(checkpoint_to_bytes(twin.params) == bytes);

    // corrupted magic
    auto bad = bytes;
    bad[0] = 'X';
    CHECK_THROWS_AS(checkpoint_from_bytes(bad, twin.params), std::runtime_error);

    // model mismatch
    ModelConfig other = cfg;
    other.embed_dim = 8;
    other.se_dim = 2;
    DualModel different = build_model(other);
    CHECK_THROWS_AS(checkpoint_from_bytes(bytes, different.params), std::runtime_error);
}
