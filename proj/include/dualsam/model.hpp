#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dualsam/image.hpp"
#include "dualsam/tensor.hpp"

// The dual-branch network at toy resolution: two adapter-augmented token
// encoders over the original and gamma-corrected image, a shared coupled
// prompt stream that injects per-level additive prompts into both branches,
// and per-branch pyramid decoders emitting 8-channel connectivity maps (or
// single-channel masks in the pixel-wise ablation mode).

namespace dualsam {

enum class HeadMode { Connectivity, PixelWise };

struct ModelConfig {
    int image_size = 64;
    int patch_size = 8;
    int embed_dim = 32;
    int heads = 4;
    int encoder_layers = 4;
    int lora_rank = 4;
    int adapter_dim = 8;
    int prompt_layers = 4;
    std::vector<int> injection_indices = {1, 2, 3, 4};
    int decoder_levels = 4;
    std::uint64_t seed = 0;

    int ffn_hidden = 128;         // frozen encoder FFN width
    int prompt_ffn_hidden = 64;   // trainable prompt-stream FFN width
    int se_dim = 8;               // squeeze-excite bottleneck in the decoder

    HeadMode head_mode = HeadMode::Connectivity;
    bool dual_branch = true;
    bool use_prompts = true;   // coupled prompt stream on/off
    bool use_adapters = true;  // low-rank + FFN adapter deltas on/off
    GammaVariant gamma = GammaVariant::AsWritten;

    void validate() const;
    int token_grid() const { return image_size / patch_size; }
    int tokens() const { return token_grid() * token_grid(); }
    int head_channels() const { return head_mode == HeadMode::Connectivity ? 8 : 1; }
};

struct Parameter {
    std::string name;
    Tensor value;
    bool frozen = false;
};

class ParamStore {
public:
    Tensor add(const std::string& name, Tensor value, bool frozen);
    std::size_t size() const { return items_.size(); }
    const std::vector<Parameter>& items() const { return items_; }
    std::vector<Parameter>& items() { return items_; }
    const Parameter* find(const std::string& name) const;
    std::int64_t count_values(bool frozen) const;

private:
    std::vector<Parameter> items_;
};

struct LayerNormParams {
    Tensor gain, bias;
};

struct FfnParams {
    Tensor w1, b1, w2, b2;
};

struct AttnProjParams {
    Tensor w_q, w_k, w_v;
};

struct EncoderLayerParams {
    // frozen base
    AttnProjParams attn;
    FfnParams ffn;
    LayerNormParams ln;
    // trainable deltas (up matrices start at zero)
    Tensor q_down, q_up, v_down, v_up;
    Tensor adapter_down, adapter_up;
};

struct DfamBlockParams {
    Tensor fuse_w, fuse_b;  // 1x1 over [e, g_prev]
    Tensor se_down, se_up;  // channel attention bottleneck
    Tensor dil_w, dil_b;    // 3x3, dilation 2
};

struct BranchParams {
    Tensor patch_w, patch_b;  // frozen
    std::vector<EncoderLayerParams> layers;
    std::vector<Tensor> gates;            // one scalar per level, zero-initialized
    std::vector<DfamBlockParams> dfam;    // decoder_levels - 1 blocks
    std::vector<Tensor> head_w, head_b;   // 1x1 heads per level
};

struct McpLevelParams {
    AttnProjParams trans_attn;  // self-attention of the prompt state
    LayerNormParams trans_ln;
    FfnParams trans_ffn;
    AttnProjParams mhca;        // cross attention: Q from alpha, K from beta
    LayerNormParams ln;
    FfnParams ffn;
    Tensor fc_alpha_w, fc_alpha_b, fc_beta_w, fc_beta_b;
};

struct PromptStreamParams {
    Tensor patch_w, patch_b;
    std::vector<McpLevelParams> levels;
};

struct DualModel {
    ModelConfig config;
    ParamStore params;
    BranchParams alpha;
    std::optional<BranchParams> beta;
    std::optional<PromptStreamParams> prompt;
};

DualModel build_model(const ModelConfig& config);

// -- forward pieces --------------------------------------------------------

// Non-overlapping patch flattening + linear projection. Images are
// channel-concatenated; their spatial dims must all equal image_size.
Tensor patch_embed(Tape& tape, const std::vector<const NormImage*>& images,
                   const Tensor& weight, const Tensor& bias, int patch_size);

// Scaled dot-product attention over already-projected Q/K/V, multi-head
// split along the embedding axis, heads concatenated back.
Tensor multi_head_attention(Tape& tape, const Tensor& q, const Tensor& k, const Tensor& v,
                            int heads);

Tensor encoder_block(Tape& tape, const Tensor& x, const EncoderLayerParams& p, int heads,
                     bool use_adapters);

struct McpStepOut {
    Tensor p_alpha, p_beta, next_state;
};

McpStepOut mcp_step(Tape& tape, const Tensor& x_alpha, const Tensor& x_beta,
                    const Tensor& prompt_state, const McpLevelParams& p, int heads);

// E = x + gate * p.
Tensor inject_prompt(Tape& tape, const Tensor& x, const Tensor& p, const Tensor& gate);

// Fuse an encoder feature with the running decoder state and double the
// resolution: 1x1 fuse, channel attention, residual, dilated 3x3, upsample.
Tensor dfam(Tape& tape, const Tensor& e, const Tensor& g_prev, const DfamBlockParams& p);

struct BranchOutputs {
    std::vector<Tensor> maps;      // coarse -> fine, sigmoid outputs [C,h,w]
    std::vector<Tensor> prompted;  // per-level prompted token features [N,D]
};

struct ModelInput {
    NormImage norm_alpha;
    NormImage norm_beta;
    GrayStats stats;
};

ModelInput preprocess(const ModelConfig& config, const RawImage& img);

struct ForwardResult {
    BranchOutputs alpha;
    BranchOutputs beta;  // empty maps when single-branch
};

ForwardResult forward(Tape& tape, const DualModel& model, const ModelInput& input);
ForwardResult forward(Tape& tape, const DualModel& model, const RawImage& img);

// -- checkpoints ------------------------------------------------------------
// "DSAMCKPT", version u32, count u32, then per parameter (sorted by name):
// u16 name length, name bytes, u8 rank, dims as u32, doubles little-endian.

std::vector<std::uint8_t> checkpoint_to_bytes(const ParamStore& params);
void checkpoint_from_bytes(const std::vector<std::uint8_t>& bytes, ParamStore& params);
void save_checkpoint(const std::string& path, const ParamStore& params);
void load_checkpoint(const std::string& path, ParamStore& params);

}  // namespace dualsam
