// Batch front end for the dual-branch connectivity segmentation pipeline:
// gamma correction, mask<->label codec files, synthetic data, training runs,
// evaluation, the ablation grid, and a built-in selftest.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "dualsam/metrics.hpp"
#include "dualsam/reference.hpp"
#include "dualsam/rng.hpp"
#include "dualsam/train.hpp"

namespace fs = std::filesystem;
using namespace dualsam;

namespace {

struct CommonModelFlags {
    std::uint64_t seed = 0;
    int image_size = 64;
    int levels = 4;
    std::string head = "c3p";
    std::string gamma_variant = "as-written";
    bool single_branch = false;
    bool no_prompts = false;
    bool no_adapters = false;
};

void add_model_flags(CLI::App* cmd, CommonModelFlags* flags) {
    cmd->add_option("--seed", flags->seed, "model init seed");
    cmd->add_option("--image-size", flags->image_size, "square input size (default 64)");
    cmd->add_option("--levels", flags->levels, "decoder levels (default 4)");
    cmd->add_option("--head", flags->head, "prediction head: c3p | pixelwise")
        ->check(CLI::IsMember({"c3p", "pixelwise"}));
    cmd->add_option("--gamma-variant", flags->gamma_variant,
                    "as-written | standard-agc (default as-written)")
        ->check(CLI::IsMember({"as-written", "standard-agc"}));
    cmd->add_flag("--single-branch", flags->single_branch, "disable the gamma branch");
    cmd->add_flag("--no-prompts", flags->no_prompts, "disable the coupled prompt stream");
    cmd->add_flag("--no-adapters", flags->no_adapters, "disable LoRA and FFN adapters");
}

ModelConfig config_from_flags(const CommonModelFlags& flags) {
    ModelConfig cfg;
    cfg.seed = flags.seed;
    cfg.image_size = flags.image_size;
    cfg.decoder_levels = flags.levels;
    cfg.prompt_layers = flags.levels;
    cfg.injection_indices.clear();
    for (int i = cfg.encoder_layers - flags.levels + 1; i <= cfg.encoder_layers; ++i) {
        cfg.injection_indices.push_back(i);
    }
    cfg.head_mode = flags.head == "pixelwise" ? HeadMode::PixelWise : HeadMode::Connectivity;
    cfg.gamma = gamma_variant_from_string(flags.gamma_variant);
    cfg.dual_branch = !flags.single_branch;
    cfg.use_prompts = cfg.dual_branch && !flags.no_prompts;
    cfg.use_adapters = !flags.no_adapters;
    cfg.validate();
    return cfg;
}

BinaryMask mask_from_pgm(const RawImage& img) {
    if (img.channels != 1) throw std::runtime_error("mask images must be single-channel PGM");
    BinaryMask mask = BinaryMask::zeros(img.width, img.height);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) mask.values[i] = img.pixels[i] >= 128 ? 1 : 0;
    return mask;
}

RawImage mask_to_pgm(const BinaryMask& mask) {
    RawImage img;
    img.width = mask.width;
    img.height = mask.height;
    img.channels = 1;
    img.pixels.resize(mask.values.size());
    for (std::size_t i = 0; i < mask.values.size(); ++i) img.pixels[i] = mask.values[i] ? 255 : 0;
    return img;
}

// -- train ------------------------------------------------------------------

struct TrainFlags {
    CommonModelFlags model;
    std::string out;
    int epochs = 30;
    int train_count = 200;
    std::uint64_t data_seed = 1;
    int batch = 4;
    double xi = 0.5;
    double lr = 1e-3;
    double weight_decay = 0.1;
    bool no_pms = false;
    bool verbose = false;
};

int run_train(const TrainFlags& flags) {
    const ModelConfig cfg = config_from_flags(flags.model);
    SynthConfig synth;
    synth.image_size = cfg.image_size;
    const auto data = gen_synthetic(flags.data_seed, flags.train_count, synth);

    DualModel model = build_model(cfg);
    TrainOptions options;
    options.epochs = flags.epochs;
    options.batch = flags.batch;
    options.xi = flags.xi;
    options.pms = !flags.no_pms && cfg.dual_branch;
    options.opt.lr = flags.lr;
    options.opt.weight_decay = flags.weight_decay;
    options.shuffle_seed = flags.data_seed;
    options.verbose = flags.verbose;
    const TrainResult result = train(model, data, options);

    fs::create_directories(flags.out);
    auto kv = config_to_kv(cfg);
    kv.emplace_back("epochs", std::to_string(flags.epochs));
    kv.emplace_back("batch", std::to_string(flags.batch));
    kv.emplace_back("xi", std::to_string(flags.xi));
    kv.emplace_back("pms", options.pms ? "1" : "0");
    kv.emplace_back("lr", std::to_string(flags.lr));
    kv.emplace_back("weight_decay", std::to_string(flags.weight_decay));
    kv.emplace_back("train_count", std::to_string(flags.train_count));
    kv.emplace_back("data_seed", std::to_string(flags.data_seed));
    write_config_file((fs::path(flags.out) / "config.txt").string(), kv);
    write_history_csv((fs::path(flags.out) / "history.csv").string(), result.history);
    save_checkpoint((fs::path(flags.out) / "checkpoint.dsam").string(), model.params);
    if (!result.history.empty()) {
        std::printf("trained %d epochs; final mean loss %.3f (per-element %.5f)\n",
                    flags.epochs, result.history.back().total,
                    result.history.back().sup_per_element);
    }
    std::printf("run written to %s\n", flags.out.c_str());
    return 0;
}

// -- eval -------------------------------------------------------------------

struct EvalFlags {
    std::string run;
    std::string out = "metrics.csv";
    std::uint64_t seed = 1234;
    int count = 50;
    double xi = 0.5;
    std::string images, masks;
};

DualModel load_run(const std::string& run_dir) {
    const ModelConfig cfg = config_from_kv(read_config_file((fs::path(run_dir) / "config.txt").string()));
    cfg.validate();
    DualModel model = build_model(cfg);
    load_checkpoint((fs::path(run_dir) / "checkpoint.dsam").string(), model.params);
    return model;
}

int run_eval(const EvalFlags& flags) {
    DualModel model = load_run(flags.run);
    std::vector<NormImage> preds;
    std::vector<BinaryMask> gts;

    if (!flags.images.empty()) {
        std::vector<fs::path> files;
        for (const auto& entry : fs::directory_iterator(flags.images)) {
            if (entry.path().extension() == ".ppm") files.push_back(entry.path());
        }
        std::sort(files.begin(), files.end());
        if (files.empty()) throw std::runtime_error("no .ppm images under " + flags.images);
        for (const fs::path& file : files) {
            const RawImage img = read_pnm_file(file.string());
            fs::path mask_path = fs::path(flags.masks) / file.filename();
            mask_path.replace_extension(".pgm");
            const BinaryMask gt = mask_from_pgm(read_pnm_file(mask_path.string()));
            preds.push_back(predict_soft(model, preprocess(model.config, img), flags.xi));
            gts.push_back(gt);
        }
    } else {
        SynthConfig synth;
        synth.image_size = model.config.image_size;
        for (const SyntheticSample& s : gen_synthetic(flags.seed, flags.count, synth)) {
            preds.push_back(predict_soft(model, preprocess(model.config, s.image), flags.xi));
            gts.push_back(s.mask);
        }
    }

    const MetricReport report = evaluate_dataset(preds, gts);
    write_report_csv(flags.out, report);
    fs::path summary(flags.out);
    summary.replace_extension(".summary.txt");
    write_report_summary(summary.string(), report);
    std::printf("images %zu  fg-IoU %.4f  F-beta %.4f  MAE %.4f\n", report.per_image.size(),
                report.miou, report.f_beta, report.mae);
    std::printf("report written to %s (summary %s)\n", flags.out.c_str(), summary.c_str());
    return 0;
}

// -- ablate -----------------------------------------------------------------

struct AblateFlags {
    std::string out = "ablation";
    int seeds = 3;
    int epochs = 12;
    int train_count = 64;
    int eval_count = 24;
    int image_size = 64;
    double xi = 0.5;
};

struct AblateRow {
    std::string head, branches, pms;
    double miou = 0.0, f_beta = 0.0, mae = 0.0;
};

AblateRow ablate_cell(const AblateFlags& flags, const std::string& head, bool dual, bool pms) {
    AblateRow row;
    row.head = head;
    row.branches = dual ? "dual" : "single";
    row.pms = pms ? "on" : "off";

    SynthConfig synth;
    synth.image_size = flags.image_size;
    const auto held = gen_synthetic(424242, flags.eval_count, synth);

    for (int s = 0; s < flags.seeds; ++s) {
        CommonModelFlags mf;
        mf.seed = static_cast<std::uint64_t>(100 + s);
        mf.image_size = flags.image_size;
        mf.head = head;
        mf.single_branch = !dual;
        ModelConfig cfg = config_from_flags(mf);
        DualModel model = build_model(cfg);

        const auto data = gen_synthetic(static_cast<std::uint64_t>(7000 + s), flags.train_count, synth);
        TrainOptions options;
        options.epochs = flags.epochs;
        options.batch = 4;
        options.xi = flags.xi;
        options.pms = pms && dual;
        options.shuffle_seed = static_cast<std::uint64_t>(s + 1);
        train(model, data, options);

        std::vector<NormImage> preds;
        std::vector<BinaryMask> gts;
        for (const SyntheticSample& sample : held) {
            preds.push_back(predict_soft(model, preprocess(cfg, sample.image), flags.xi));
            gts.push_back(sample.mask);
        }
        const MetricReport report = evaluate_dataset(preds, gts);
        row.miou += report.miou;
        row.f_beta += report.f_beta;
        row.mae += report.mae;
    }
    row.miou /= flags.seeds;
    row.f_beta /= flags.seeds;
    row.mae /= flags.seeds;
    return row;
}

int run_ablate(const AblateFlags& flags) {
    std::vector<AblateRow> rows;
    for (const std::string& head : {std::string("pixelwise"), std::string("c3p")}) {
        rows.push_back(ablate_cell(flags, head, /*dual=*/false, /*pms=*/false));
        rows.push_back(ablate_cell(flags, head, /*dual=*/true, /*pms=*/false));
        rows.push_back(ablate_cell(flags, head, /*dual=*/true, /*pms=*/true));
        std::printf("finished %s rows\n", head.c_str());
        std::fflush(stdout);
    }

    std::printf("\n%-10s %-8s %-4s %8s %8s %8s\n", "head", "branch", "pms", "fg-IoU", "F-beta",
                "MAE");
    for (const AblateRow& row : rows) {
        std::printf("%-10s %-8s %-4s %8.4f %8.4f %8.4f\n", row.head.c_str(),
                    row.branches.c_str(), row.pms.c_str(), row.miou, row.f_beta, row.mae);
    }

    fs::create_directories(flags.out);
    const std::string csv = (fs::path(flags.out) / "ablation.csv").string();
    std::FILE* f = std::fopen(csv.c_str(), "w");
    if (f == nullptr) throw std::runtime_error("cannot open " + csv + " for writing");
    std::fprintf(f, "head,branches,pms,miou,f_beta,mae\n");
    for (const AblateRow& row : rows) {
        std::fprintf(f, "%s,%s,%s,%.6f,%.6f,%.6f\n", row.head.c_str(), row.branches.c_str(),
                     row.pms.c_str(), row.miou, row.f_beta, row.mae);
    }
    std::fclose(f);
    std::printf("table written to %s\n", csv.c_str());
    return 0;
}

// -- selftest -----------------------------------------------------------------

bool report_check(const char* what, bool ok) {
    std::printf("[%s] %s\n", ok ? "PASS" : "FAIL", what);
    return ok;
}

int run_selftest(bool quick) {
    bool all = true;
    const int mask_trials = quick ? 50 : 200;

    {
        Rng rng(404);
        bool codec_ok = true, recip_ok = true;
        for (int trial = 0; trial < mask_trials; ++trial) {
            const int w = 1 + static_cast<int>(rng.uniform_int(0, 31));
            const int h = 1 + static_cast<int>(rng.uniform_int(0, 31));
            BinaryMask mask = BinaryMask::zeros(w, h);
            const double density = rng.uniform();
            for (auto& v : mask.values) v = rng.uniform() < density ? 1 : 0;
            const ConnectivityLabel label = encode(mask);
            codec_ok = codec_ok && decode(label) == ref::drop_isolated(mask) &&
                       label == ref::encode_label(mask);
            for (int y = 0; y < h && recip_ok; ++y) {
                for (int x = 0; x < w && recip_ok; ++x) {
                    for (int c = 1; c <= 8; ++c) {
                        const PixelOffset& o = offsets().channel(c);
                        const int u = x + o.du, v = y + o.dv;
                        if (u < 0 || u >= w || v < 0 || v >= h) continue;
                        recip_ok = recip_ok && label.at(x, y, c) == label.at(u, v, 9 - c);
                    }
                }
            }
        }
        all &= report_check("codec round trip vs brute-force oracle", codec_ok);
        all &= report_check("codec reciprocity", recip_ok);
    }

    {
        Rng rng(405);
        auto rand_tensor = [&rng](Shape shape, double lo, double hi) {
            std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
            for (double& x : v) x = rng.uniform(lo, hi);
            return Tensor(std::move(shape), std::move(v), true);
        };
        const int d = 8, n = 4;
        bool grads_ok = true;

        // encoder block wrt one low-rank factor
        ModelConfig micro;
        micro.image_size = 16;
        micro.patch_size = 8;
        micro.embed_dim = d;
        micro.heads = 2;
        micro.encoder_layers = 1;
        micro.lora_rank = 2;
        micro.adapter_dim = 4;
        micro.prompt_layers = 1;
        micro.injection_indices = {1};
        micro.decoder_levels = 1;
        micro.ffn_hidden = 12;
        micro.prompt_ffn_hidden = 12;
        micro.se_dim = 2;
        micro.seed = 11;
        DualModel micro_model = build_model(micro);
        EncoderLayerParams enc = micro_model.alpha.layers[0];
        for (double& v : enc.q_up.mutable_values()) v = 0.01;
        Tensor x = rand_tensor({n, d}, -1.0, 1.0);
        const double e_enc = finite_diff_check(
            [&](Tape& t, const Tensor& probe) {
                EncoderLayerParams local = enc;
                local.q_down = probe;
                return sum(t, encoder_block(t, x, local, 2, true));
            },
            enc.q_down, 1e-5);
        grads_ok = grads_ok && e_enc < 1e-6;

        // coupled prompt step wrt the cross-attention key projection
        McpLevelParams mcp = micro_model.prompt->levels[0];
        Tensor xa = rand_tensor({n, d}, -1.0, 1.0);
        Tensor xb = rand_tensor({n, d}, -1.0, 1.0);
        Tensor state = rand_tensor({n, d}, -1.0, 1.0);
        const double e_mcp = finite_diff_check(
            [&](Tape& t, const Tensor& probe) {
                McpLevelParams local = mcp;
                local.mhca.w_k = probe;
                McpStepOut out = mcp_step(t, xa, xb, state, local, 2);
                return sum(t, add(t, out.p_alpha, out.p_beta));
            },
            mcp.mhca.w_k, 1e-5);
        grads_ok = grads_ok && e_mcp < 1e-6;

        // prompt injection wrt the gate
        Tensor gate = Tensor::full({1}, 0.25);
        const double e_gate = finite_diff_check(
            [&](Tape& t, const Tensor& probe) { return sum(t, inject_prompt(t, xa, xb, probe)); },
            gate, 1e-5);
        grads_ok = grads_ok && e_gate < 1e-6;

        // decoder block wrt the dilated kernel
        DfamBlockParams blk = micro_model.alpha.dfam.empty() ? DfamBlockParams{}
                                                             : micro_model.alpha.dfam[0];
        if (!blk.dil_w.defined()) {
            blk.fuse_w = rand_tensor({d, 2 * d, 1, 1}, -0.3, 0.3);
            blk.fuse_b = rand_tensor({d}, -0.1, 0.1);
            blk.se_down = rand_tensor({d, 2}, -0.3, 0.3);
            blk.se_up = rand_tensor({2, d}, -0.3, 0.3);
            blk.dil_w = rand_tensor({d, d, 3, 3}, -0.2, 0.2);
            blk.dil_b = rand_tensor({d}, -0.1, 0.1);
        }
        Tensor e_feat = rand_tensor({d, 4, 4}, -1.0, 1.0);
        Tensor g_feat = rand_tensor({d, 4, 4}, -1.0, 1.0);
        const double e_dfam = finite_diff_check(
            [&](Tape& t, const Tensor& probe) {
                DfamBlockParams local = blk;
                local.dil_w = probe;
                return sum(t, dfam(t, e_feat, g_feat, local));
            },
            blk.dil_w, 1e-5);
        grads_ok = grads_ok && e_dfam < 1e-6;

        // loss path
        Tensor logits = rand_tensor({8, 3, 3}, -1.5, 1.5);
        BinaryMask gt = BinaryMask::zeros(3, 3);
        gt.at(1, 1) = 1;
        gt.at(2, 1) = 1;
        const ConnectivityLabel target = encode(gt);
        const double e_loss = finite_diff_check(
            [&](Tape& t, const Tensor& probe) {
                return connectivity_bce(t, sigmoid(t, probe), target);
            },
            logits, 1e-5);
        grads_ok = grads_ok && e_loss < 1e-6;
        all &= report_check("gradient checks (encoder, prompt, gate, decoder, loss)", grads_ok);
    }

    {
        const Schedule s{50, 0.1, 5.0};
        bool mu_ok = mu(50, s) == 0.1 && std::abs(mu(0, s) - 6.737946999085467e-4) < 1e-12;
        for (int t = 1; t <= 50; ++t) mu_ok = mu_ok && mu(t, s) > mu(t - 1, s);
        all &= report_check("schedule endpoints and monotonicity", mu_ok);
    }

    {
        Rng rng(406);
        bool metrics_ok = true;
        for (int trial = 0; trial < (quick ? 20 : 50); ++trial) {
            const int w = 2 + static_cast<int>(rng.uniform_int(0, 14));
            const int h = 2 + static_cast<int>(rng.uniform_int(0, 14));
            BinaryMask pred = BinaryMask::zeros(w, h);
            BinaryMask gt = BinaryMask::zeros(w, h);
            for (auto& v : pred.values) v = rng.uniform() < 0.5 ? 1 : 0;
            for (auto& v : gt.values) v = rng.uniform() < 0.5 ? 1 : 0;
            gt.at(0, 0) = 1;
            NormImage soft;
            soft.width = w;
            soft.height = h;
            soft.channels = 1;
            soft.values.resize(static_cast<std::size_t>(w) * h);
            for (double& v : soft.values) v = rng.uniform();
            metrics_ok = metrics_ok && std::abs(iou(pred, gt) - ref::iou_fg(pred, gt)) < 1e-12 &&
                         std::abs(f_beta(pred, gt, 0.3) - ref::f_beta(pred, gt, 0.3)) < 1e-12 &&
                         std::abs(mae(soft, gt) - ref::mae(soft, gt)) < 1e-12;
        }
        // spot value: precision 1, recall 1/2, beta^2 = 0.3
        BinaryMask gt2 = BinaryMask::zeros(2, 1);
        gt2.at(0, 0) = 1;
        gt2.at(1, 0) = 1;
        BinaryMask half = BinaryMask::zeros(2, 1);
        half.at(0, 0) = 1;
        metrics_ok = metrics_ok && f_beta(half, gt2, 0.3) == 0.8125;
        all &= report_check("metric oracle agreement", metrics_ok);
    }

    std::printf("selftest %s\n", all ? "passed" : "FAILED");
    return all ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dual-branch criss-cross connectivity segmentation toolkit"};
    app.require_subcommand(1);

    // gamma
    auto* gamma_cmd = app.add_subcommand("gamma", "gamma-correct a PPM image");
    std::string gamma_in, gamma_out;
    std::string gamma_variant = "as-written";
    gamma_cmd->add_option("--image", gamma_in, "input PPM")->required();
    gamma_cmd->add_option("--out", gamma_out, "output PPM")->required();
    gamma_cmd->add_option("--gamma-variant", gamma_variant, "as-written | standard-agc")
        ->check(CLI::IsMember({"as-written", "standard-agc"}));

    // encode / decode
    auto* encode_cmd = app.add_subcommand("encode", "binary mask PGM -> connectivity label file");
    std::string encode_mask, encode_out;
    encode_cmd->add_option("--mask", encode_mask, "input PGM mask")->required();
    encode_cmd->add_option("--out", encode_out, "output .c3pl file")->required();

    auto* decode_cmd = app.add_subcommand("decode", "connectivity label file -> mask PGM");
    std::string decode_label, decode_out;
    decode_cmd->add_option("--label", decode_label, "input .c3pl file")->required();
    decode_cmd->add_option("--out", decode_out, "output PGM mask")->required();

    // synth
    auto* synth_cmd = app.add_subcommand("synth", "generate synthetic image/mask pairs");
    std::uint64_t synth_seed = 1;
    int synth_count = 10;
    int synth_size = 64;
    std::string synth_out = "synth";
    synth_cmd->add_option("--seed", synth_seed, "generator seed");
    synth_cmd->add_option("--count", synth_count, "number of samples")->check(CLI::PositiveNumber);
    synth_cmd->add_option("--image-size", synth_size, "square size");
    synth_cmd->add_option("--out", synth_out, "output directory")->required();

    // train
    auto* train_cmd = app.add_subcommand("train", "train a model on synthetic data");
    TrainFlags train_flags;
    add_model_flags(train_cmd, &train_flags.model);
    train_cmd->add_option("--out", train_flags.out, "run directory")->required();
    train_cmd->add_option("--epochs", train_flags.epochs, "training epochs")
        ->check(CLI::NonNegativeNumber);
    train_cmd->add_option("--train-count", train_flags.train_count, "synthetic training samples");
    train_cmd->add_option("--data-seed", train_flags.data_seed, "dataset seed");
    train_cmd->add_option("--batch", train_flags.batch, "mini-batch size")->check(CLI::PositiveNumber);
    train_cmd->add_option("--xi", train_flags.xi, "pseudo-label threshold (default 0.5)");
    train_cmd->add_option("--lr", train_flags.lr, "initial learning rate");
    train_cmd->add_option("--weight-decay", train_flags.weight_decay, "AdamW weight decay");
    train_cmd->add_flag("--no-pms", train_flags.no_pms, "disable mutual supervision");
    train_cmd->add_flag("--verbose", train_flags.verbose, "per-epoch progress lines");

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a trained run");
    EvalFlags eval_flags;
    eval_cmd->add_option("--run", eval_flags.run, "run directory from train")->required();
    eval_cmd->add_option("--out", eval_flags.out, "metrics CSV path");
    eval_cmd->add_option("--seed", eval_flags.seed, "held-out synthetic seed");
    eval_cmd->add_option("--count", eval_flags.count, "held-out sample count")
        ->check(CLI::PositiveNumber);
    eval_cmd->add_option("--xi", eval_flags.xi, "decode threshold (default 0.5)");
    eval_cmd->add_option("--images", eval_flags.images, "directory of .ppm inputs");
    eval_cmd->add_option("--masks", eval_flags.masks, "directory of matching .pgm masks");

    // ablate
    auto* ablate_cmd = app.add_subcommand("ablate", "head/branch/supervision comparison grid");
    AblateFlags ablate_flags;
    ablate_cmd->add_option("--out", ablate_flags.out, "output directory");
    ablate_cmd->add_option("--seeds", ablate_flags.seeds, "seeds per cell")->check(CLI::PositiveNumber);
    ablate_cmd->add_option("--epochs", ablate_flags.epochs, "epochs per run");
    ablate_cmd->add_option("--train-count", ablate_flags.train_count, "training samples per run");
    ablate_cmd->add_option("--eval-count", ablate_flags.eval_count, "held-out samples");
    ablate_cmd->add_option("--image-size", ablate_flags.image_size, "square size");
    ablate_cmd->add_option("--xi", ablate_flags.xi, "pseudo-label threshold");

    // selftest
    auto* selftest_cmd = app.add_subcommand("selftest", "codec, gradient, schedule, metric checks");
    bool selftest_quick = false;
    selftest_cmd->add_flag("--quick", selftest_quick, "smaller trial counts");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);  // prints help, exit 0
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (gamma_cmd->parsed()) {
            const RawImage img = read_pnm_file(gamma_in);
            const auto [gray, stats] = to_gray(img);
            const GammaVariant variant = gamma_variant_from_string(gamma_variant);
            const NormImage corrected = gamma_correct(normalize(img), stats, variant);
            write_pnm_file(gamma_out, quantize(corrected));
            const double mean = stats.mean_gray / 255.0;
            const double gamma_value = variant == GammaVariant::AsWritten
                                           ? std::log10(0.5) - std::log10(mean)
                                           : std::log10(0.5) / std::log10(mean);
            std::printf("mean_gray %.6f gamma %.9g\n", stats.mean_gray, gamma_value);
            return 0;
        }
        if (encode_cmd->parsed()) {
            const BinaryMask mask = mask_from_pgm(read_pnm_file(encode_mask));
            write_label_file(encode_out, encode(mask));
            return 0;
        }
        if (decode_cmd->parsed()) {
            const ConnectivityLabel label = read_label_file(decode_label);
            write_pnm_file(decode_out, mask_to_pgm(decode(label)));
            return 0;
        }
        if (synth_cmd->parsed()) {
            SynthConfig synth;
            synth.image_size = synth_size;
            fs::create_directories(synth_out);
            const auto samples = gen_synthetic(synth_seed, synth_count, synth);
            char name[64];
            for (std::size_t i = 0; i < samples.size(); ++i) {
                std::snprintf(name, sizeof(name), "img_%04zu.ppm", i);
                write_pnm_file((fs::path(synth_out) / name).string(), samples[i].image);
                std::snprintf(name, sizeof(name), "mask_%04zu.pgm", i);
                write_pnm_file((fs::path(synth_out) / name).string(), mask_to_pgm(samples[i].mask));
            }
            std::printf("wrote %zu sample pairs to %s\n", samples.size(), synth_out.c_str());
            return 0;
        }
        if (train_cmd->parsed()) return run_train(train_flags);
        if (eval_cmd->parsed()) return run_eval(eval_flags);
        if (ablate_cmd->parsed()) return run_ablate(ablate_flags);
        if (selftest_cmd->parsed()) return run_selftest(selftest_quick);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
