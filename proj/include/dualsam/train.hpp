#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dualsam/c3p.hpp"
#include "dualsam/image.hpp"
#include "dualsam/model.hpp"
#include "dualsam/tensor.hpp"

// The full objective: per-level connectivity BCE against encoded ground
// truth, pseudo-label mutual supervision between the two branches with an
// exponential epoch schedule, AdamW, a synthetic shape dataset, and the
// training loop itself.

namespace dualsam {

// mu(t) = base * exp(-decay * (1 - t/T)^2); strictly increasing on [0, T].
struct Schedule {
    int total_epochs = 50;
    double base_weight = 0.1;
    double decay = 5.0;
};

double mu(int t, const Schedule& schedule);

struct LossReport {
    std::vector<double> sup_alpha, sup_beta;  // per level
    std::vector<double> mut_alpha, mut_beta;  // per level
    double mu = 0.0;
    double total = 0.0;
    std::int64_t sup_elements = 0;  // summed BCE terms per branch, for per-element means

    double recompute_total() const;
};

// -- loss pieces -------------------------------------------------------------

Tensor label_to_tensor(const ConnectivityLabel& label);              // [8,H,W]
Tensor mask_to_tensor(const BinaryMask& mask);                       // [1,H,W]
ConnectivityMap map_from_tensor(const Tensor& t);                    // [8,H,W] -> map

// Unreduced-sum BCE of an 8-channel prediction against an encoded label.
Tensor connectivity_bce(Tape& tape, const Tensor& pred, const ConnectivityLabel& target);
// Same, single-channel prediction against a mask (pixel-wise ablation head).
Tensor mask_bce(Tape& tape, const Tensor& pred, const BinaryMask& target);
// One branch's thresholded output supervises the other branch's raw map. The
// pseudo-label is a constant: no gradient flows back through it.
Tensor mutual_bce(Tape& tape, const ConnectivityLabel& pseudo, const Tensor& pred_other);

// Per-level targets for a ground-truth mask at the model's map resolutions:
// OR-pool the mask down to each level, then encode at that resolution.
std::vector<ConnectivityLabel> level_labels(const BinaryMask& gt, const ModelConfig& config);
std::vector<BinaryMask> level_masks(const BinaryMask& gt, const ModelConfig& config);

struct TotalLoss {
    Tensor loss;
    LossReport report;
};

// Eq-for-eq total: sum_l [(L_a + L_b) + mu(t) * (Lm_a + Lm_b)]. Mutual terms
// are built only when use_pms is set and both branches exist.
TotalLoss total_loss(Tape& tape, const ForwardResult& outputs, const BinaryMask& gt, int t,
                     const Schedule& schedule, double xi, const ModelConfig& config,
                     bool use_pms);

// -- optimizer ----------------------------------------------------------------

struct AdamWConfig {
    double lr = 1e-3;
    double weight_decay = 0.1;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

class AdamW {
public:
    AdamW(const ParamStore& params, AdamWConfig config);
    // Applies one decoupled-weight-decay update from the accumulated grads.
    // Frozen parameters are untouched; a missing gradient on a trainable
    // parameter is an error.
    void step(ParamStore& params, double lr_now);
    int steps_taken() const { return step_count_; }

private:
    AdamWConfig config_;
    int step_count_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

// -- synthetic data -------------------------------------------------------------

struct SynthConfig {
    int image_size = 64;
    double intensity_gap = 0.4;  // foreground minus background mean level
    double darkening = 0.5;      // global underwater dimming factor
    double noise = 0.05;         // additive uniform noise amplitude
    int min_shapes = 1;
    int max_shapes = 3;
    int min_extent = 8;   // shape half-extents, in pixels
    int max_extent = 22;
};

struct SyntheticSample {
    RawImage image;
    BinaryMask mask;
    std::uint64_t seed = 0;  // regenerating from this seed is bit-identical
};

SyntheticSample gen_synthetic_one(std::uint64_t seed, const SynthConfig& config = {});
std::vector<SyntheticSample> gen_synthetic(std::uint64_t seed, int count,
                                           const SynthConfig& config = {});

// -- training loop ---------------------------------------------------------------

struct TrainOptions {
    int epochs = 30;
    int batch = 4;
    double xi = 0.5;
    bool pms = true;
    AdamWConfig opt;
    int lr_step_epochs = 20;     // learning rate / 10 after every 20 epochs
    double lr_step_factor = 0.1;
    std::uint64_t shuffle_seed = 1;
    bool verbose = false;
};

struct EpochStats {
    int epoch = 0;
    double mu = 0.0;
    double lr = 0.0;
    double total = 0.0;  // epoch means of the per-sample sums
    double sup_alpha = 0.0, sup_beta = 0.0;
    double mut_alpha = 0.0, mut_beta = 0.0;
    double sup_per_element = 0.0;
};

struct TrainResult {
    std::vector<EpochStats> history;
};

TrainResult train(DualModel& model, const std::vector<SyntheticSample>& data,
                  const TrainOptions& options);

void write_history_csv(const std::string& path, const std::vector<EpochStats>& history);

// -- inference --------------------------------------------------------------------

// Final prediction: finest-level maps (averaged across branches when dual),
// thresholded and decoded by mutual confirmation for the connectivity head,
// plain probabilities for the pixel-wise head.
BinaryMask predict_mask(const DualModel& model, const ModelInput& input, double xi = 0.5);
NormImage predict_soft(const DualModel& model, const ModelInput& input, double xi = 0.5);

// -- run-directory config files ------------------------------------------------------

std::vector<std::pair<std::string, std::string>> config_to_kv(const ModelConfig& config);
ModelConfig config_from_kv(const std::vector<std::pair<std::string, std::string>>& kv);
void write_config_file(const std::string& path,
                       const std::vector<std::pair<std::string, std::string>>& kv);
std::vector<std::pair<std::string, std::string>> read_config_file(const std::string& path);

}  // namespace dualsam
