#include "dualsam/model.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "dualsam/rng.hpp"

namespace dualsam {

void ModelConfig::validate() const {
    if (image_size < 1 || patch_size < 1 || image_size % patch_size != 0) {
        throw std::invalid_argument("config: image_size must be a positive multiple of patch_size");
    }
    if (embed_dim < 1 || heads < 1 || embed_dim % heads != 0) {
        throw std::invalid_argument("config: embed_dim must be divisible by heads");
    }
    if (encoder_layers < 1) throw std::invalid_argument("config: encoder_layers must be positive");
    if (lora_rank < 1 || adapter_dim < 1) {
        throw std::invalid_argument("config: lora_rank and adapter_dim must be positive");
    }
    if (decoder_levels < 1) throw std::invalid_argument("config: decoder_levels must be positive");
    if (static_cast<int>(injection_indices.size()) != decoder_levels) {
        throw std::invalid_argument("config: need one injection index per decoder level");
    }
    int prev = 0;
    for (int j : injection_indices) {
        if (j <= prev || j > encoder_layers) {
            throw std::invalid_argument(
                "config: injection indices must be strictly increasing within [1, encoder_layers]");
        }
        prev = j;
    }
    if (use_prompts && prompt_layers != decoder_levels) {
        throw std::invalid_argument("config: prompt_layers must equal decoder_levels");
    }
    if (se_dim < 1 || se_dim >= embed_dim) {
        throw std::invalid_argument("config: squeeze-excite dim must be below embed_dim");
    }
    if (ffn_hidden < 1 || prompt_ffn_hidden < 1) {
        throw std::invalid_argument("config: FFN widths must be positive");
    }
    if (!dual_branch && use_prompts) {
        throw std::invalid_argument("config: the coupled prompt stream needs both branches");
    }
}

Tensor ParamStore::add(const std::string& name, Tensor value, bool frozen) {
    if (find(name) != nullptr) {
        throw std::invalid_argument("duplicate parameter name '" + name + "'");
    }
    items_.push_back(Parameter{name, value, frozen});
    return value;
}

const Parameter* ParamStore::find(const std::string& name) const {
    for (const Parameter& p : items_) {
        if (p.name == name) return &p;
    }
    return nullptr;
}

std::int64_t ParamStore::count_values(bool frozen) const {
    std::int64_t n = 0;
    for (const Parameter& p : items_) {
        if (p.frozen == frozen) n += p.value.size();
    }
    return n;
}

// -- initialization ---------------------------------------------------------

namespace {

Tensor gaussian_tensor(Rng& rng, Shape shape, double stddev) {
    std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
    for (double& x : v) x = rng.normal(0.0, stddev);
    return Tensor(std::move(shape), std::move(v), true);
}

Tensor xavier_tensor(Rng& rng, int fan_in, int fan_out) {
    return gaussian_tensor(rng, {fan_in, fan_out}, std::sqrt(2.0 / (fan_in + fan_out)));
}

// QR of a Gaussian square matrix, diagonal signs fixed so the draw is unique.
Tensor orthogonal_tensor(Rng& rng, int n) {
    Eigen::MatrixXd g(n, n);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) g(i, j) = rng.normal();
    }
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    Eigen::MatrixXd q = qr.householderQ();
    const Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
    for (int j = 0; j < n; ++j) {
        if (r(j, j) < 0) q.col(j) = -q.col(j);
    }
    std::vector<double> v(static_cast<std::size_t>(n) * n);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) v[static_cast<std::size_t>(i) * n + j] = q(i, j);
    }
    return Tensor({n, n}, std::move(v), true);
}

Tensor conv_kernel(Rng& rng, int cout, int cin, int k) {
    const double stddev = std::sqrt(2.0 / (static_cast<double>(cin) * k * k));
    return gaussian_tensor(rng, {cout, cin, k, k}, stddev);
}

struct Builder {
    ParamStore& store;
    std::uint64_t seed;

    Tensor orthogonal(const std::string& name, int n, bool frozen) {
        Rng rng = named_rng(seed, name);
        return store.add(name, orthogonal_tensor(rng, n), frozen);
    }
    Tensor xavier(const std::string& name, int fan_in, int fan_out, bool frozen) {
        Rng rng = named_rng(seed, name);
        return store.add(name, xavier_tensor(rng, fan_in, fan_out), frozen);
    }
    Tensor gaussian(const std::string& name, Shape shape, double stddev, bool frozen) {
        Rng rng = named_rng(seed, name);
        return store.add(name, gaussian_tensor(rng, std::move(shape), stddev), frozen);
    }
    Tensor conv(const std::string& name, int cout, int cin, int k, bool frozen) {
        Rng rng = named_rng(seed, name);
        return store.add(name, conv_kernel(rng, cout, cin, k), frozen);
    }
    Tensor zeros(const std::string& name, Shape shape, bool frozen) {
        return store.add(name, Tensor::zeros(std::move(shape), true), frozen);
    }
    Tensor ones(const std::string& name, Shape shape, bool frozen) {
        return store.add(name, Tensor::full(std::move(shape), 1.0, true), frozen);
    }

    FfnParams ffn(const std::string& prefix, int dim, int hidden, bool frozen) {
        FfnParams p;
        p.w1 = xavier(prefix + ".w1", dim, hidden, frozen);
        p.b1 = zeros(prefix + ".b1", {hidden}, frozen);
        p.w2 = xavier(prefix + ".w2", hidden, dim, frozen);
        p.b2 = zeros(prefix + ".b2", {dim}, frozen);
        return p;
    }
    LayerNormParams layer_norm_affine(const std::string& prefix, int dim, bool frozen) {
        return LayerNormParams{ones(prefix + ".gain", {dim}, frozen),
                               zeros(prefix + ".bias", {dim}, frozen)};
    }
    AttnProjParams attn(const std::string& prefix, int dim, bool frozen) {
        return AttnProjParams{orthogonal(prefix + ".w_q", dim, frozen),
                              orthogonal(prefix + ".w_k", dim, frozen),
                              orthogonal(prefix + ".w_v", dim, frozen)};
    }
};

constexpr double kDownInitStd = 0.02;

BranchParams build_branch(Builder& b, const std::string& prefix, const ModelConfig& cfg) {
    BranchParams branch;
    const int d = cfg.embed_dim;
    const int patch_in = 3 * cfg.patch_size * cfg.patch_size;
    branch.patch_w = b.xavier(prefix + ".patch.w", patch_in, d, /*frozen=*/true);
    branch.patch_b = b.zeros(prefix + ".patch.b", {d}, /*frozen=*/true);
    for (int j = 1; j <= cfg.encoder_layers; ++j) {
        const std::string lp = prefix + ".enc" + std::to_string(j);
        EncoderLayerParams layer;
        layer.attn = b.attn(lp + ".attn", d, /*frozen=*/true);
        layer.ffn = b.ffn(lp + ".ffn", d, cfg.ffn_hidden, /*frozen=*/true);
        layer.ln = b.layer_norm_affine(lp + ".ln", d, /*frozen=*/true);
        if (cfg.use_adapters) {
            layer.q_down = b.gaussian(lp + ".lora_q.down", {d, cfg.lora_rank}, kDownInitStd, false);
            layer.q_up = b.zeros(lp + ".lora_q.up", {cfg.lora_rank, d}, false);
            layer.v_down = b.gaussian(lp + ".lora_v.down", {d, cfg.lora_rank}, kDownInitStd, false);
            layer.v_up = b.zeros(lp + ".lora_v.up", {cfg.lora_rank, d}, false);
            layer.adapter_down =
                b.gaussian(lp + ".adapter.down", {d, cfg.adapter_dim}, kDownInitStd, false);
            layer.adapter_up = b.zeros(lp + ".adapter.up", {cfg.adapter_dim, d}, false);
        }
        branch.layers.push_back(layer);
    }
    if (cfg.use_prompts) {
        for (int i = 1; i <= cfg.decoder_levels; ++i) {
            branch.gates.push_back(b.zeros(prefix + ".gate" + std::to_string(i), {1}, false));
        }
    }
    for (int l = 2; l <= cfg.decoder_levels; ++l) {
        const std::string dp = prefix + ".dfam" + std::to_string(l);
        DfamBlockParams blk;
        blk.fuse_w = b.conv(dp + ".fuse.w", d, 2 * d, 1, false);
        blk.fuse_b = b.zeros(dp + ".fuse.b", {d}, false);
        blk.se_down = b.xavier(dp + ".se.down", d, cfg.se_dim, false);
        blk.se_up = b.xavier(dp + ".se.up", cfg.se_dim, d, false);
        blk.dil_w = b.conv(dp + ".dil.w", d, d, 3, false);
        blk.dil_b = b.zeros(dp + ".dil.b", {d}, false);
        branch.dfam.push_back(blk);
    }
    for (int l = 1; l <= cfg.decoder_levels; ++l) {
        const std::string hp = prefix + ".head" + std::to_string(l);
        branch.head_w.push_back(b.conv(hp + ".w", cfg.head_channels(), d, 1, false));
        branch.head_b.push_back(b.zeros(hp + ".b", {cfg.head_channels()}, false));
    }
    return branch;
}

PromptStreamParams build_prompt_stream(Builder& b, const ModelConfig& cfg) {
    PromptStreamParams prompt;
    const int d = cfg.embed_dim;
    const int patch_in = 6 * cfg.patch_size * cfg.patch_size;
    prompt.patch_w = b.xavier("mcp.patch.w", patch_in, d, false);
    prompt.patch_b = b.zeros("mcp.patch.b", {d}, false);
    for (int i = 1; i <= cfg.decoder_levels; ++i) {
        const std::string lp = "mcp.lvl" + std::to_string(i);
        McpLevelParams level;
        level.trans_attn = b.attn(lp + ".trans.attn", d, false);
        level.trans_ln = b.layer_norm_affine(lp + ".trans.ln", d, false);
        level.trans_ffn = b.ffn(lp + ".trans.ffn", d, cfg.prompt_ffn_hidden, false);
        level.mhca = b.attn(lp + ".mhca", d, false);
        level.ln = b.layer_norm_affine(lp + ".ln", d, false);
        level.ffn = b.ffn(lp + ".ffn", d, cfg.prompt_ffn_hidden, false);
        level.fc_alpha_w = b.xavier(lp + ".fc_alpha.w", d, d, false);
        level.fc_alpha_b = b.zeros(lp + ".fc_alpha.b", {d}, false);
        level.fc_beta_w = b.xavier(lp + ".fc_beta.w", d, d, false);
        level.fc_beta_b = b.zeros(lp + ".fc_beta.b", {d}, false);
        prompt.levels.push_back(level);
    }
    return prompt;
}

}  // namespace

DualModel build_model(const ModelConfig& config) {
    config.validate();
    DualModel model;
    model.config = config;
    Builder b{model.params, config.seed};
    model.alpha = build_branch(b, "alpha", config);
    if (config.dual_branch) model.beta = build_branch(b, "beta", config);
    if (config.use_prompts) model.prompt = build_prompt_stream(b, config);
    return model;
}

// -- forward pieces ----------------------------------------------------------

Tensor patch_embed(Tape& tape, const std::vector<const NormImage*>& images,
                   const Tensor& weight, const Tensor& bias, int patch_size) {
    if (images.empty()) throw std::invalid_argument("patch_embed: no input images");
    const int w = images[0]->width, h = images[0]->height;
    int channels = 0;
    for (const NormImage* img : images) {
        if (img->width != w || img->height != h) {
            throw std::invalid_argument("patch_embed: input images disagree on size");
        }
        channels += img->channels;
    }
    if (w % patch_size != 0 || h % patch_size != 0) {
        throw std::invalid_argument("patch_embed: image size not divisible by patch size");
    }
    const int gx = w / patch_size, gy = h / patch_size;
    const int n = gx * gy;
    const int feat = channels * patch_size * patch_size;
    if (weight.rank() != 2 || weight.dim(0) != feat) {
        throw std::invalid_argument("patch_embed: weight expects " + std::to_string(feat) +
                                    " input features, got " + shape_str(weight.shape()));
    }
    std::vector<double> patches(static_cast<std::size_t>(n) * feat);
    for (int ty = 0; ty < gy; ++ty) {
        for (int tx = 0; tx < gx; ++tx) {
            double* row = patches.data() + static_cast<std::size_t>(ty * gx + tx) * feat;
            int at = 0;
            for (const NormImage* img : images) {
                for (int c = 0; c < img->channels; ++c) {
                    for (int py = 0; py < patch_size; ++py) {
                        for (int px = 0; px < patch_size; ++px) {
                            row[at++] = img->at(tx * patch_size + px, ty * patch_size + py, c);
                        }
                    }
                }
            }
        }
    }
    Tensor patch_matrix({n, feat}, std::move(patches), false);
    return add_row_bias(tape, matmul(tape, patch_matrix, weight), bias);
}

Tensor multi_head_attention(Tape& tape, const Tensor& q, const Tensor& k, const Tensor& v,
                            int heads) {
    const int d = q.dim(1);
    if (d % heads != 0) throw std::invalid_argument("attention: dim not divisible by heads");
    const int dh = d / heads;
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Tensor> outs;
    outs.reserve(static_cast<std::size_t>(heads));
    for (int hd = 0; hd < heads; ++hd) {
        Tensor qh = slice_cols(tape, q, hd * dh, dh);
        Tensor kh = slice_cols(tape, k, hd * dh, dh);
        Tensor vh = slice_cols(tape, v, hd * dh, dh);
        Tensor scores = scale(tape, matmul(tape, qh, transpose(tape, kh)), att_scale);
        Tensor att = softmax(tape, scores, 1);
        outs.push_back(matmul(tape, att, vh));
    }
    return concat_cols(tape, outs);
}

namespace {

Tensor ffn_forward(Tape& tape, const Tensor& x, const FfnParams& p) {
    Tensor hidden = gelu(tape, add_row_bias(tape, matmul(tape, x, p.w1), p.b1));
    return add_row_bias(tape, matmul(tape, hidden, p.w2), p.b2);
}

Tensor ln_forward(Tape& tape, const Tensor& x, const LayerNormParams& p) {
    return layer_norm(tape, x, p.gain, p.bias);
}

}  // namespace

Tensor encoder_block(Tape& tape, const Tensor& x, const EncoderLayerParams& p, int heads,
                     bool use_adapters) {
    Tensor q = matmul(tape, x, p.attn.w_q);
    Tensor k = matmul(tape, x, p.attn.w_k);
    Tensor v = matmul(tape, x, p.attn.w_v);
    if (use_adapters) {
        q = add(tape, q, matmul(tape, matmul(tape, x, p.q_down), p.q_up));
        v = add(tape, v, matmul(tape, matmul(tape, x, p.v_down), p.v_up));
    }
    Tensor h = add(tape, multi_head_attention(tape, q, k, v, heads), x);
    if (!use_adapters) return h;  // the FFN only reaches the output through the adapter
    Tensor ffn_out = ffn_forward(tape, ln_forward(tape, h, p.ln), p.ffn);
    Tensor squeezed = gelu(tape, matmul(tape, ffn_out, p.adapter_down));
    return add(tape, matmul(tape, squeezed, p.adapter_up), h);
}

McpStepOut mcp_step(Tape& tape, const Tensor& x_alpha, const Tensor& x_beta,
                    const Tensor& prompt_state, const McpLevelParams& p, int heads) {
    // state update through a standard transformer block
    Tensor sq = matmul(tape, prompt_state, p.trans_attn.w_q);
    Tensor sk = matmul(tape, prompt_state, p.trans_attn.w_k);
    Tensor sv = matmul(tape, prompt_state, p.trans_attn.w_v);
    Tensor s1 = add(tape, multi_head_attention(tape, sq, sk, sv, heads), prompt_state);
    Tensor next_state = add(tape, ffn_forward(tape, ln_forward(tape, s1, p.trans_ln), p.trans_ffn), s1);

    // couple the branches: queries from alpha, keys from beta, values from the state
    Tensor cq = matmul(tape, x_alpha, p.mhca.w_q);
    Tensor ck = matmul(tape, x_beta, p.mhca.w_k);
    Tensor cv = matmul(tape, next_state, p.mhca.w_v);
    Tensor h_tau = add(tape, multi_head_attention(tape, cq, ck, cv, heads), next_state);
    Tensor p_omega = add(tape, ffn_forward(tape, ln_forward(tape, h_tau, p.ln), p.ffn), h_tau);

    McpStepOut out;
    out.p_alpha = add_row_bias(tape, matmul(tape, p_omega, p.fc_alpha_w), p.fc_alpha_b);
    out.p_beta = add_row_bias(tape, matmul(tape, p_omega, p.fc_beta_w), p.fc_beta_b);
    out.next_state = next_state;
    return out;
}

Tensor inject_prompt(Tape& tape, const Tensor& x, const Tensor& p, const Tensor& gate) {
    return add_scaled(tape, x, p, gate);
}

Tensor dfam(Tape& tape, const Tensor& e, const Tensor& g_prev, const DfamBlockParams& p) {
    if (e.shape() != g_prev.shape()) {
        throw std::invalid_argument("dfam: feature shapes disagree: " + shape_str(e.shape()) +
                                    " vs " + shape_str(g_prev.shape()));
    }
    Tensor fused = concat_channels(tape, e, g_prev);
    Tensor fr = gelu(tape, add_channel_bias(tape, conv2d(tape, fused, p.fuse_w, 1, 0), p.fuse_b));
    const int c = fr.dim(0);
    Tensor pooled = reshape(tape, global_avg_pool(tape, fr), {1, c});
    Tensor gate = sigmoid(tape, matmul(tape, gelu(tape, matmul(tape, pooled, p.se_down)), p.se_up));
    Tensor attended = add(tape, channel_scale(tape, fr, reshape(tape, gate, {c})), fr);
    Tensor dilated =
        gelu(tape, add_channel_bias(tape, conv2d(tape, attended, p.dil_w, 2, 2), p.dil_b));
    return upsample2x(tape, dilated);
}

// -- full forward -------------------------------------------------------------

ModelInput preprocess(const ModelConfig& config, const RawImage& img) {
    if (img.width != config.image_size || img.height != config.image_size) {
        throw std::invalid_argument("forward: image is " + std::to_string(img.width) + "x" +
                                    std::to_string(img.height) + ", config wants " +
                                    std::to_string(config.image_size));
    }
    if (img.channels != 3) {
        throw std::invalid_argument("forward: expected a 3-channel image");
    }
    ModelInput input;
    input.norm_alpha = normalize(img);
    input.stats = to_gray(img).second;
    input.norm_beta = gamma_correct(input.norm_alpha, input.stats, config.gamma);
    return input;
}

namespace {

// [N,D] tokens -> [D, g, g] feature planes (token order is row-major).
Tensor tokens_to_spatial(Tape& tape, const Tensor& tokens, int grid) {
    const int d = tokens.dim(1);
    return reshape(tape, transpose(tape, tokens), {d, grid, grid});
}

BranchOutputs decode_branch(Tape& tape, const ModelConfig& cfg, const BranchParams& branch,
                            const std::vector<Tensor>& prompted) {
    const int grid = cfg.token_grid();
    const int levels = cfg.decoder_levels;
    std::vector<Tensor> spatial;
    spatial.reserve(prompted.size());
    for (const Tensor& e : prompted) spatial.push_back(tokens_to_spatial(tape, e, grid));

    BranchOutputs out;
    out.prompted = prompted;
    Tensor g = spatial.back();  // deepest prompted feature seeds the pyramid
    auto emit = [&](int level, const Tensor& feat) {
        Tensor logits = add_channel_bias(
            tape, conv2d(tape, feat, branch.head_w[static_cast<std::size_t>(level)], 1, 0),
            branch.head_b[static_cast<std::size_t>(level)]);
        out.maps.push_back(sigmoid(tape, logits));
    };
    emit(0, g);
    for (int l = 2; l <= levels; ++l) {
        Tensor e = spatial[static_cast<std::size_t>(levels - l)];
        for (int ups = 0; ups < l - 2; ++ups) e = upsample2x(tape, e);
        g = dfam(tape, e, g, branch.dfam[static_cast<std::size_t>(l - 2)]);
        emit(l - 1, g);
    }
    return out;
}

}  // namespace

ForwardResult forward(Tape& tape, const DualModel& model, const ModelInput& input) {
    const ModelConfig& cfg = model.config;
    if (input.norm_alpha.width != cfg.image_size || input.norm_alpha.height != cfg.image_size) {
        throw std::invalid_argument("forward: preprocessed input does not match config size");
    }

    auto run_encoder = [&](const BranchParams& branch, const NormImage& img) {
        std::vector<Tensor> states;  // X_1 .. X_L
        Tensor x = patch_embed(tape, {&img}, branch.patch_w, branch.patch_b, cfg.patch_size);
        for (int j = 0; j < cfg.encoder_layers; ++j) {
            x = encoder_block(tape, x, branch.layers[static_cast<std::size_t>(j)], cfg.heads,
                              cfg.use_adapters);
            states.push_back(x);
        }
        return states;
    };

    const std::vector<Tensor> xs_alpha = run_encoder(model.alpha, input.norm_alpha);
    std::vector<Tensor> xs_beta;
    if (model.beta) xs_beta = run_encoder(*model.beta, input.norm_beta);

    std::vector<Tensor> prompted_alpha, prompted_beta;
    prompted_alpha.reserve(static_cast<std::size_t>(cfg.decoder_levels));
    if (model.prompt) {
        Tensor state = patch_embed(tape, {&input.norm_alpha, &input.norm_beta},
                                   model.prompt->patch_w, model.prompt->patch_b, cfg.patch_size);
        for (int i = 0; i < cfg.decoder_levels; ++i) {
            const int j = cfg.injection_indices[static_cast<std::size_t>(i)] - 1;
            const Tensor& xa = xs_alpha[static_cast<std::size_t>(j)];
            const Tensor& xb = xs_beta[static_cast<std::size_t>(j)];
            McpStepOut step = mcp_step(tape, xa, xb, state,
                                       model.prompt->levels[static_cast<std::size_t>(i)], cfg.heads);
            state = step.next_state;
            prompted_alpha.push_back(inject_prompt(
                tape, xa, step.p_alpha, model.alpha.gates[static_cast<std::size_t>(i)]));
            prompted_beta.push_back(inject_prompt(
                tape, xb, step.p_beta, model.beta->gates[static_cast<std::size_t>(i)]));
        }
    } else {
        for (int i = 0; i < cfg.decoder_levels; ++i) {
            const int j = cfg.injection_indices[static_cast<std::size_t>(i)] - 1;
            prompted_alpha.push_back(xs_alpha[static_cast<std::size_t>(j)]);
            if (model.beta) prompted_beta.push_back(xs_beta[static_cast<std::size_t>(j)]);
        }
    }

    ForwardResult result;
    result.alpha = decode_branch(tape, cfg, model.alpha, prompted_alpha);
    if (model.beta) result.beta = decode_branch(tape, cfg, *model.beta, prompted_beta);
    return result;
}

ForwardResult forward(Tape& tape, const DualModel& model, const RawImage& img) {
    return forward(tape, model, preprocess(model.config, img));
}

// -- checkpoints ---------------------------------------------------------------

namespace {

constexpr char kCkptMagic[8] = {'D', 'S', 'A', 'M', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCkptVersion = 1;

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v & 0xff));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f64(std::vector<std::uint8_t>& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

struct ByteReader {
    const std::vector<std::uint8_t>& bytes;
    std::size_t pos = 0;

    void need(std::size_t n) const {
        if (pos + n > bytes.size()) throw std::runtime_error("checkpoint: truncated file");
    }
    std::uint16_t u16() {
        need(2);
        const std::uint16_t v = static_cast<std::uint16_t>(bytes[pos] | (bytes[pos + 1] << 8));
        pos += 2;
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint8_t u8() {
        need(1);
        return bytes[pos++];
    }
    double f64() {
        need(8);
        std::uint64_t bits = 0;
        for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes[pos + i]) << (8 * i);
        pos += 8;
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    std::string str(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(bytes.data() + pos), n);
        pos += n;
        return s;
    }
};

}  // namespace

std::vector<std::uint8_t> checkpoint_to_bytes(const ParamStore& params) {
    std::vector<const Parameter*> sorted;
    sorted.reserve(params.size());
    for (const Parameter& p : params.items()) sorted.push_back(&p);
    std::sort(sorted.begin(), sorted.end(),
              [](const Parameter* a, const Parameter* b) { return a->name < b->name; });

    std::vector<std::uint8_t> out(kCkptMagic, kCkptMagic + 8);
    put_u32(out, kCkptVersion);
    put_u32(out, static_cast<std::uint32_t>(sorted.size()));
    for (const Parameter* p : sorted) {
        put_u16(out, static_cast<std::uint16_t>(p->name.size()));
        out.insert(out.end(), p->name.begin(), p->name.end());
        out.push_back(static_cast<std::uint8_t>(p->value.rank()));
        for (int i = 0; i < p->value.rank(); ++i) {
            put_u32(out, static_cast<std::uint32_t>(p->value.dim(i)));
        }
        for (double v : p->value.values()) put_f64(out, v);
    }
    return out;
}

void checkpoint_from_bytes(const std::vector<std::uint8_t>& bytes, ParamStore& params) {
    ByteReader r{bytes};
    r.need(8);
    if (std::memcmp(bytes.data(), kCkptMagic, 8) != 0) {
        throw std::runtime_error("checkpoint: bad magic");
    }
    r.pos = 8;
    const std::uint32_t version = r.u32();
    if (version != kCkptVersion) {
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
    }
    const std::uint32_t count = r.u32();
    if (count != params.size()) {
        throw std::runtime_error("checkpoint: holds " + std::to_string(count) +
                                 " parameters, model has " + std::to_string(params.size()));
    }
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint16_t name_len = r.u16();
        const std::string name = r.str(name_len);
        const int rank = r.u8();
        Shape shape(static_cast<std::size_t>(rank));
        for (int d = 0; d < rank; ++d) shape[static_cast<std::size_t>(d)] = static_cast<int>(r.u32());
        const Parameter* found = params.find(name);
        if (found == nullptr) throw std::runtime_error("checkpoint: unknown parameter '" + name + "'");
        if (found->value.shape() != shape) {
            throw std::runtime_error("checkpoint: shape mismatch for '" + name + "': file has " +
                                     shape_str(shape) + ", model has " +
                                     shape_str(found->value.shape()));
        }
        for (Parameter& p : params.items()) {
            if (p.name != name) continue;
            for (double& v : p.value.mutable_values()) v = r.f64();
            break;
        }
    }
    if (r.pos != bytes.size()) throw std::runtime_error("checkpoint: trailing bytes");
}

void save_checkpoint(const std::string& path, const ParamStore& params) {
    const auto bytes = checkpoint_to_bytes(params);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("short write to " + path);
}

void load_checkpoint(const std::string& path, ParamStore& params) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    checkpoint_from_bytes(bytes, params);
}

}  // namespace dualsam
