#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>

#include "dualsam/metrics.hpp"
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
    cfg.seed = 5;
    return cfg;
}

SynthConfig tiny_synth() {
    SynthConfig synth;
    synth.image_size = 32;
    synth.min_extent = 5;
    synth.max_extent = 11;
    return synth;
}

}  // namespace

TEST_CASE("mu endpoints, interior value, monotonicity, domain") {
    Schedule s;  // T = 50
    CHECK(mu(s.total_epochs, s) == 0.1);
    CHECK(std::abs(mu(0, s) - 6.737946999085467e-4) < 1e-12);
    CHECK(std::abs(mu(25, s) - 2.865047968601901e-2) < 1e-10);
    for (int t = 1; t <= s.total_epochs; ++t) {
        CHECK(mu(t, s) > mu(t - 1, s));
        CHECK(mu(t, s) <= 0.1);
        CHECK(mu(t, s) > 0.0);
    }
    CHECK_THROWS_AS(mu(-1, s), std::invalid_argument);
    CHECK_THROWS_AS(mu(51, s), std::invalid_argument);
}

TEST_CASE("connectivity_bce wiring and closed forms") {
    Tape tape;
    BinaryMask mask = BinaryMask::zeros(3, 3);
    mask.at(1, 1) = 1;
    mask.at(2, 1) = 1;
    const ConnectivityLabel label = encode(mask);

    // a map that matches the label exactly has (post-clamp) near-zero loss
    Tensor perfect = label_to_tensor(label);
    const double tight = connectivity_bce(tape, perfect, label).scalar_value();
    CHECK(tight >= 0.0);
    CHECK(tight < 9 * 8 * 1e-6);

    // one confident mistake costs about -ln(eps)
    Tensor off = perfect.clone(false);
    off.mutable_values()[0] = 1.0 - off.value_at(0);
    const double worse = connectivity_bce(tape, off, label).scalar_value();
    CHECK(worse > 15.0);

    Tensor wrong_shape = Tensor::full({8, 2, 2}, 0.5);
    CHECK_THROWS_AS(connectivity_bce(tape, wrong_shape, label), std::invalid_argument);
}

TEST_CASE("mutual_bce treats the pseudo-label as a constant") {
    Tape tape;
    // pseudo all-ones against a uniform-half prediction: 8 * ln 2
    ConnectivityLabel pseudo = ConnectivityLabel::zeros(1, 1);
    for (auto& v : pseudo.values) v = 1;
    Tensor uniform = Tensor::full({8, 1, 1}, 0.5, true);
    const double loss = mutual_bce(tape, pseudo, uniform).scalar_value();
    CHECK(loss == doctest::Approx(8 * 0.6931471805599453).epsilon(1e-12));

    // no gradient flows into the branch that produced the pseudo-label
    Rng rng(17);
    Tensor logits_a = random_tensor(rng, {8, 2, 2}, -1.5, 1.5, true);
    Tensor logits_b = random_tensor(rng, {8, 2, 2}, -1.5, 1.5, true);
    Tape t2;
    Tensor map_a = sigmoid(t2, logits_a);
    Tensor map_b = sigmoid(t2, logits_b);
    const ConnectivityLabel pseudo_a = threshold(map_from_tensor(map_a), 0.5);
    Tensor mut = mutual_bce(t2, pseudo_a, map_b);
    backward(t2, mut);
    CHECK(logits_b.has_grad());
    bool b_nonzero = false;
    for (double g : logits_b.grad()) b_nonzero = b_nonzero || g != 0.0;
    CHECK(b_nonzero);
    if (logits_a.has_grad()) {
        for (double g : logits_a.grad()) CHECK(g == 0.0);
    }
}

TEST_CASE("level targets follow OR-pool-then-encode construction") {
    ModelConfig cfg = tiny_config();
    Rng rng(23);
    BinaryMask gt = BinaryMask::zeros(32, 32);
    for (auto& v : gt.values) v = rng.uniform() < 0.3 ? 1 : 0;

    const auto masks = level_masks(gt, cfg);
    REQUIRE(masks.size() == 2);
    CHECK(masks[0].width == 4);
    CHECK(masks[1].width == 8);
    CHECK(masks[0] == downsample_mask(gt, 8));
    CHECK(masks[1] == downsample_mask(gt, 4));

    const auto labels = level_labels(gt, cfg);
    CHECK(labels[0] == encode(downsample_mask(gt, 8)));
    CHECK(labels[1] == encode(downsample_mask(gt, 4)));
}

TEST_CASE("total_loss bookkeeping, symmetry, and pms-off degeneracy") {
    ModelConfig cfg = tiny_config();
    DualModel model = build_model(cfg);
    SyntheticSample sample = gen_synthetic_one(42, tiny_synth());
    const Schedule schedule{30, 0.1, 5.0};

    Tape tape;
    ForwardResult outputs = forward(tape, model, preprocess(cfg, sample.image));
    TotalLoss with_pms = total_loss(tape, outputs, sample.mask, 15, schedule, 0.5, cfg, true);
    CHECK(with_pms.report.mu == doctest::Approx(mu(15, schedule)));
    CHECK(std::abs(with_pms.report.total - with_pms.report.recompute_total()) < 1e-12);
    CHECK(with_pms.report.total >= 0.0);
    CHECK(std::isfinite(with_pms.report.total));

    // identical branch outputs make the two mutual terms equal
    ForwardResult mirrored;
    mirrored.alpha = outputs.alpha;
    mirrored.beta = outputs.alpha;
    TotalLoss sym = total_loss(tape, mirrored, sample.mask, 15, schedule, 0.5, cfg, true);
    for (std::size_t l = 0; l < sym.report.mut_alpha.size(); ++l) {
        CHECK(sym.report.mut_alpha[l] == sym.report.mut_beta[l]);
    }

    TotalLoss without = total_loss(tape, outputs, sample.mask, 15, schedule, 0.5, cfg, false);
    CHECK(without.report.mu == 0.0);
    CHECK(without.report.mut_alpha.empty());
    double sup = 0.0;
    for (double v : without.report.sup_alpha) sup += v;
    for (double v : without.report.sup_beta) sup += v;
    CHECK(without.report.total == doctest::Approx(sup).epsilon(1e-12));
}

TEST_CASE("adamw closed forms and contracts") {
    ParamStore store;
    Tensor weight = store.add("w", Tensor::scalar(1.0, true), false);
    Tensor frozen = store.add("frozen", Tensor::scalar(2.0, true), true);

    AdamWConfig cfg;
    cfg.lr = 1e-3;
    cfg.weight_decay = 0.0;
    AdamW opt(store, cfg);

    // one step with unit gradient: hat terms cancel to ~1
    weight.grad_buffer()[0] = 1.0;
    opt.step(store, cfg.lr);
    CHECK(weight.value_at(0) == doctest::Approx(0.999).epsilon(1e-6));
    CHECK(frozen.value_at(0) == 2.0);

    // zero gradient and zero weight decay leave the value alone
    ParamStore store2;
    Tensor w2 = store2.add("w", Tensor::scalar(0.7, true), false);
    AdamW opt2(store2, cfg);
    w2.grad_buffer()[0] = 0.0;
    opt2.step(store2, cfg.lr);
    CHECK(w2.value_at(0) == 0.7);

    // missing gradient on a trainable parameter is an error
    ParamStore store3;
    store3.add("w", Tensor::scalar(0.7, true), false);
    AdamW opt3(store3, cfg);
    CHECK_THROWS_AS(opt3.step(store3, cfg.lr), std::runtime_error);
}

TEST_CASE("synthetic samples are reproducible and well-formed") {
    const SynthConfig synth = tiny_synth();
    const auto batch1 = gen_synthetic(9, 6, synth);
    const auto batch2 = gen_synthetic(9, 6, synth);
    REQUIRE(batch1.size() == 6);
    for (std::size_t i = 0; i < batch1.size(); ++i) {
        CHECK(batch1[i].image.pixels == batch2[i].image.pixels);
        CHECK(batch1[i].mask == batch2[i].mask);
        // regeneration from the stored per-sample seed is bit-identical
        const SyntheticSample redo = gen_synthetic_one(batch1[i].seed, synth);
        CHECK(redo.image.pixels == batch1[i].image.pixels);
        CHECK(redo.mask == batch1[i].mask);
    }

    int nonempty = 0;
    for (int s = 0; s < 100; ++s) {
        const SyntheticSample sample = gen_synthetic_one(gen_synthetic(s, 1, synth)[0].seed, synth);
        std::size_t fg = 0;
        for (auto v : sample.mask.values) fg += v;
        CHECK(fg < sample.mask.values.size());
        if (fg > 0) ++nonempty;
    }
    CHECK(nonempty == 100);

    // a huge noiseless shape covers the full frame
    SynthConfig full = synth;
    full.noise = 0.0;
    full.min_shapes = 1;
    full.max_shapes = 1;
    full.min_extent = 200;
    full.max_extent = 200;
    const SyntheticSample cover = gen_synthetic_one(3, full);
    for (auto v : cover.mask.values) CHECK(v == 1);

    CHECK_THROWS_AS(gen_synthetic(1, 0, synth), std::invalid_argument);
}

TEST_CASE("train: zero epochs keep the initial checkpoint") {
    ModelConfig cfg = tiny_config();
    DualModel model = build_model(cfg);
    const auto init_bytes = checkpoint_to_bytes(model.params);
    TrainOptions options;
    options.epochs = 0;
    const auto data = gen_synthetic(1, 4, tiny_synth());
    TrainResult result = train(model, data, options);
    CHECK(result.history.empty());
    CHECK(checkpoint_to_bytes(model.params) == init_bytes);
}

TEST_CASE("train: deterministic, frozen-invariant, loss improves") {
    const auto data = gen_synthetic(77, 12, tiny_synth());
    TrainOptions options;
    options.epochs = 6;
    options.batch = 4;

    ModelConfig cfg = tiny_config();
    DualModel model_a = build_model(cfg);
    const auto init_bytes = checkpoint_to_bytes(model_a.params);
    TrainResult run_a = train(model_a, data, options);

    DualModel model_b = build_model(cfg);
    TrainResult run_b = train(model_b, data, options);

    // bit-identical checkpoints and histories for identical seeds
    CHECK(checkpoint_to_bytes(model_a.params) == checkpoint_to_bytes(model_b.params));
    REQUIRE(run_a.history.size() == run_b.history.size());
    for (std::size_t i = 0; i < run_a.history.size(); ++i) {
        CHECK(run_a.history[i].total == run_b.history[i].total);
        CHECK(run_a.history[i].mu == run_b.history[i].mu);
    }

    // frozen parameters are bitwise untouched; trainable ones moved
    DualModel reference = build_model(cfg);
    bool some_moved = false;
    for (std::size_t i = 0; i < model_a.params.size(); ++i) {
        const Parameter& after = model_a.params.items()[i];
        const Parameter& before = reference.params.items()[i];
        REQUIRE(after.name == before.name);
        if (after.frozen) {
            CHECK(after.value.values() == before.value.values());
        } else if (after.value.values() != before.value.values()) {
            some_moved = true;
        }
    }
    CHECK(some_moved);
    CHECK(checkpoint_to_bytes(model_a.params) != init_bytes);

    // supervised fit improves even in a short smoke run (the weighted mutual
    // term grows with mu, so the raw total is not monotone this early)
    CHECK(run_a.history.back().sup_per_element < run_a.history.front().sup_per_element);
}

TEST_CASE("gradient flow reaches every trainable sub-block") {
    ModelConfig cfg = tiny_config();
    DualModel model = build_model(cfg);
    const auto data = gen_synthetic(13, 4, tiny_synth());

    // a couple of optimizer steps move the zero-initialized gates off zero,
    // unblocking the prompt path
    TrainOptions warmup;
    warmup.epochs = 2;
    warmup.batch = 4;
    train(model, data, warmup);

    Tape tape;
    ForwardResult outputs = forward(tape, model, preprocess(cfg, data[0].image));
    const Schedule schedule{30, 0.1, 5.0};
    TotalLoss loss = total_loss(tape, outputs, data[0].mask, 10, schedule, 0.5, cfg, true);
    backward(tape, loss.loss);

    auto block_has_nonzero = [&](const std::string& needle) {
        bool any = false;
        for (const Parameter& p : model.params.items()) {
            if (p.frozen || p.name.find(needle) == std::string::npos) continue;
            REQUIRE(p.value.has_grad());
            for (double g : p.value.grad()) any = any || g != 0.0;
        }
        return any;
    };
    CHECK(block_has_nonzero(".lora_"));
    CHECK(block_has_nonzero(".adapter."));
    CHECK(block_has_nonzero("mcp."));
    CHECK(block_has_nonzero(".gate"));
    CHECK(block_has_nonzero(".dfam"));
    CHECK(block_has_nonzero(".head"));

    for (const Parameter& p : model.params.items()) {
        if (!p.frozen) CHECK(p.value.has_grad());
    }
}

TEST_CASE("train aborts with a diagnostic on non-finite loss") {
    ModelConfig cfg = tiny_config();
    DualModel model = build_model(cfg);
    for (Parameter& p : model.params.items()) {
        if (p.name == "alpha.head1.w") {
            p.value.mutable_values()[0] = std::numeric_limits<double>::quiet_NaN();
        }
    }
    const auto data = gen_synthetic(3, 2, tiny_synth());
    TrainOptions options;
    options.epochs = 1;
    options.batch = 2;
    CHECK(testutil::throws_with([&] { train(model, data, options); }, "non-finite"));
}

TEST_CASE("predict produces masks at the finest map resolution") {
    ModelConfig cfg = tiny_config();
    DualModel model = build_model(cfg);
    const SyntheticSample sample = gen_synthetic_one(21, tiny_synth());
    const ModelInput input = preprocess(cfg, sample.image);

    const BinaryMask mask = predict_mask(model, input, 0.5);
    CHECK(mask.width == 8);
    CHECK(mask.height == 8);
    const NormImage soft = predict_soft(model, input, 0.5);
    CHECK(soft.width == 8);
    for (double v : soft.values) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }

    // the evaluation path resizes up to the ground truth
    MetricReport report = evaluate_dataset({soft}, {sample.mask});
    CHECK(report.per_image.size() == 1);

    // pixel-wise head variant emits probabilities
    ModelConfig pw = cfg;
    pw.head_mode = HeadMode::PixelWise;
    pw.seed = 6;
    DualModel pw_model = build_model(pw);
    const NormImage pw_soft = predict_soft(pw_model, preprocess(pw, sample.image), 0.5);
    bool strictly_inside = true;
    for (double v : pw_soft.values) strictly_inside = strictly_inside && v > 0.0 && v < 1.0;
    CHECK(strictly_inside);
}

TEST_CASE("config and history files round-trip") {
    ModelConfig cfg = tiny_config();
    cfg.head_mode = HeadMode::PixelWise;
    cfg.gamma = GammaVariant::StandardAgc;
    const auto kv = config_to_kv(cfg);
    const ModelConfig back = config_from_kv(kv);
    CHECK(back.image_size == cfg.image_size);
    CHECK(back.embed_dim == cfg.embed_dim);
    CHECK(back.injection_indices == cfg.injection_indices);
    CHECK(back.head_mode == cfg.head_mode);
    CHECK(back.gamma == cfg.gamma);
    CHECK(back.seed == cfg.seed);

    const std::string dir = "/tmp/dualsam_test_cfg";
    write_config_file(dir + ".txt", kv);
    const auto kv_back = read_config_file(dir + ".txt");
    CHECK(kv_back == kv);

    std::vector<EpochStats> history(2);
    history[0].epoch = 1;
    history[0].total = 12.5;
    history[1].epoch = 2;
    history[1].total = 7.25;
    write_history_csv(dir + ".csv", history);
    const auto again = read_config_file(dir + ".txt");
    CHECK(again == kv);
}
