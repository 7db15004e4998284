#include "dualsam/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "dualsam/rng.hpp"

namespace dualsam {

double mu(int t, const Schedule& schedule) {
    if (t < 0 || t > schedule.total_epochs) {
        throw std::invalid_argument("mu: epoch " + std::to_string(t) + " outside [0, " +
                                    std::to_string(schedule.total_epochs) + "]");
    }
    const double frac = 1.0 - static_cast<double>(t) / schedule.total_epochs;
    return schedule.base_weight * std::exp(-schedule.decay * frac * frac);
}

double LossReport::recompute_total() const {
    // same association order as the tape builds the loss, so the match is
    // exact rather than merely close
    double sup = 0.0, mut = 0.0;
    for (std::size_t l = 0; l < sup_alpha.size(); ++l) {
        sup += sup_alpha[l];
        if (l < sup_beta.size()) sup += sup_beta[l];
        if (l < mut_alpha.size() && l < mut_beta.size()) mut += mut_alpha[l] + mut_beta[l];
    }
    return mu > 0.0 ? sup + mu * mut : sup;
}

// -- loss pieces --------------------------------------------------------------

Tensor label_to_tensor(const ConnectivityLabel& label) {
    const int w = label.width, h = label.height;
    std::vector<double> v(static_cast<std::size_t>(8) * h * w);
    for (int c = 1; c <= 8; ++c) {
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                v[static_cast<std::size_t>(((c - 1) * h + y) * w + x)] = label.at(x, y, c);
            }
        }
    }
    return Tensor({8, h, w}, std::move(v), false);
}

Tensor mask_to_tensor(const BinaryMask& mask) {
    std::vector<double> v(mask.values.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = mask.values[i];
    return Tensor({1, mask.height, mask.width}, std::move(v), false);
}

ConnectivityMap map_from_tensor(const Tensor& t) {
    if (t.rank() != 3 || t.dim(0) != 8) {
        throw std::invalid_argument("map_from_tensor: expected [8,H,W], got " +
                                    shape_str(t.shape()));
    }
    const int h = t.dim(1), w = t.dim(2);
    ConnectivityMap map = ConnectivityMap::zeros(w, h);
    for (int c = 1; c <= 8; ++c) {
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                map.at(x, y, c) = t.value_at(((c - 1) * h + y) * w + x);
            }
        }
    }
    return map;
}

Tensor connectivity_bce(Tape& tape, const Tensor& pred, const ConnectivityLabel& target) {
    if (pred.rank() != 3 || pred.dim(0) != 8 || pred.dim(1) != target.height ||
        pred.dim(2) != target.width) {
        throw std::invalid_argument("connectivity_bce: prediction " + shape_str(pred.shape()) +
                                    " does not match label " + std::to_string(target.width) + "x" +
                                    std::to_string(target.height) + "x8");
    }
    return bce_sum(tape, pred, label_to_tensor(target));
}

Tensor mask_bce(Tape& tape, const Tensor& pred, const BinaryMask& target) {
    if (pred.rank() != 3 || pred.dim(0) != 1 || pred.dim(1) != target.height ||
        pred.dim(2) != target.width) {
        throw std::invalid_argument("mask_bce: prediction " + shape_str(pred.shape()) +
                                    " does not match mask " + std::to_string(target.width) + "x" +
                                    std::to_string(target.height));
    }
    return bce_sum(tape, pred, mask_to_tensor(target));
}

Tensor mutual_bce(Tape& tape, const ConnectivityLabel& pseudo, const Tensor& pred_other) {
    return connectivity_bce(tape, pred_other, pseudo);
}

std::vector<ConnectivityLabel> level_labels(const BinaryMask& gt, const ModelConfig& config) {
    std::vector<ConnectivityLabel> out;
    out.reserve(static_cast<std::size_t>(config.decoder_levels));
    for (const BinaryMask& m : level_masks(gt, config)) out.push_back(encode(m));
    return out;
}

std::vector<BinaryMask> level_masks(const BinaryMask& gt, const ModelConfig& config) {
    std::vector<BinaryMask> out;
    out.reserve(static_cast<std::size_t>(config.decoder_levels));
    for (int l = 1; l <= config.decoder_levels; ++l) {
        const int res = config.token_grid() << (l - 1);
        if (gt.width % res != 0 || gt.height % res != 0) {
            throw std::invalid_argument("level_masks: ground truth " + std::to_string(gt.width) +
                                        "x" + std::to_string(gt.height) +
                                        " not divisible down to level resolution " +
                                        std::to_string(res));
        }
        out.push_back(downsample_mask(gt, gt.width / res));
    }
    return out;
}

namespace {

// Values > xi become 1; built straight from the map tensor's buffer.
ConnectivityLabel threshold_tensor(const Tensor& map, double xi) {
    return threshold(map_from_tensor(map), xi);
}

}  // namespace

TotalLoss total_loss(Tape& tape, const ForwardResult& outputs, const BinaryMask& gt, int t,
                     const Schedule& schedule, double xi, const ModelConfig& config,
                     bool use_pms) {
    const bool dual = !outputs.beta.maps.empty();
    const bool c3p = config.head_mode == HeadMode::Connectivity;
    const int levels = static_cast<int>(outputs.alpha.maps.size());

    std::vector<ConnectivityLabel> labels;
    std::vector<BinaryMask> masks;
    if (c3p) labels = level_labels(gt, config);
    else masks = level_masks(gt, config);

    TotalLoss result;
    result.report.mu = (use_pms && dual) ? mu(t, schedule) : 0.0;

    Tensor sup_total = Tensor::scalar(0.0);
    Tensor mut_total = Tensor::scalar(0.0);
    for (int l = 0; l < levels; ++l) {
        const Tensor& pa = outputs.alpha.maps[static_cast<std::size_t>(l)];
        Tensor la = c3p ? connectivity_bce(tape, pa, labels[static_cast<std::size_t>(l)])
                        : mask_bce(tape, pa, masks[static_cast<std::size_t>(l)]);
        result.report.sup_alpha.push_back(la.scalar_value());
        result.report.sup_elements += pa.size();
        sup_total = add(tape, sup_total, la);

        if (dual) {
            const Tensor& pb = outputs.beta.maps[static_cast<std::size_t>(l)];
            Tensor lb = c3p ? connectivity_bce(tape, pb, labels[static_cast<std::size_t>(l)])
                            : mask_bce(tape, pb, masks[static_cast<std::size_t>(l)]);
            result.report.sup_beta.push_back(lb.scalar_value());
            result.report.sup_elements += pb.size();
            sup_total = add(tape, sup_total, lb);

            if (use_pms) {
                if (c3p) {
                    const ConnectivityLabel pseudo_a = threshold_tensor(pa, xi);
                    const ConnectivityLabel pseudo_b = threshold_tensor(pb, xi);
                    Tensor ma = mutual_bce(tape, pseudo_a, pb);
                    Tensor mb = mutual_bce(tape, pseudo_b, pa);
                    result.report.mut_alpha.push_back(ma.scalar_value());
                    result.report.mut_beta.push_back(mb.scalar_value());
                    mut_total = add(tape, mut_total, add(tape, ma, mb));
                } else {
                    // pixel-wise ablation: same mutual scheme on 1-channel maps
                    auto binarize = [xi](const Tensor& m) {
                        BinaryMask b = BinaryMask::zeros(m.dim(2), m.dim(1));
                        for (std::size_t i = 0; i < b.values.size(); ++i) {
                            b.values[i] = m.value_at(static_cast<std::int64_t>(i)) > xi ? 1 : 0;
                        }
                        return b;
                    };
                    Tensor ma = mask_bce(tape, pb, binarize(pa));
                    Tensor mb = mask_bce(tape, pa, binarize(pb));
                    result.report.mut_alpha.push_back(ma.scalar_value());
                    result.report.mut_beta.push_back(mb.scalar_value());
                    mut_total = add(tape, mut_total, add(tape, ma, mb));
                }
            }
        }
    }

    Tensor loss = sup_total;
    if (result.report.mu > 0.0) {
        loss = add(tape, loss, scale(tape, mut_total, result.report.mu));
    }
    result.loss = loss;
    result.report.total = loss.scalar_value();
    return result;
}

// -- optimizer ------------------------------------------------------------------

AdamW::AdamW(const ParamStore& params, AdamWConfig config) : config_(config) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params.items()[i].frozen) continue;
        const std::size_t n = params.items()[i].value.values().size();
        m_[i].assign(n, 0.0);
        v_[i].assign(n, 0.0);
    }
}

void AdamW::step(ParamStore& params, double lr_now) {
    ++step_count_;
    const double bc1 = 1.0 - std::pow(config_.beta1, step_count_);
    const double bc2 = 1.0 - std::pow(config_.beta2, step_count_);
    for (std::size_t i = 0; i < params.size(); ++i) {
        Parameter& p = params.items()[i];
        if (p.frozen) continue;
        if (!p.value.has_grad()) {
            throw std::runtime_error("adamw: parameter '" + p.name + "' has no gradient");
        }
        const std::vector<double>& g = p.value.grad();
        std::vector<double>& values = p.value.mutable_values();
        std::vector<double>& m = m_[i];
        std::vector<double>& v = v_[i];
        for (std::size_t j = 0; j < values.size(); ++j) {
            m[j] = config_.beta1 * m[j] + (1.0 - config_.beta1) * g[j];
            v[j] = config_.beta2 * v[j] + (1.0 - config_.beta2) * g[j] * g[j];
            const double m_hat = m[j] / bc1;
            const double v_hat = v[j] / bc2;
            values[j] -= lr_now * (m_hat / (std::sqrt(v_hat) + config_.eps) +
                                   config_.weight_decay * values[j]);
        }
    }
}

// -- synthetic data ----------------------------------------------------------------

namespace {

struct Shape2D {
    bool ellipse = true;
    double cx = 0, cy = 0;  // center
    double ex = 0, ey = 0;  // half extents
    double color[3] = {0, 0, 0};

    bool contains(int x, int y) const {
        const double dx = (x + 0.5 - cx) / ex;
        const double dy = (y + 0.5 - cy) / ey;
        if (ellipse) return dx * dx + dy * dy <= 1.0;
        return std::abs(dx) <= 1.0 && std::abs(dy) <= 1.0;
    }
};

std::uint64_t sample_seed(std::uint64_t seed, int index) {
    // splitmix64 over (seed, index) so neighboring samples decorrelate
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * static_cast<std::uint64_t>(index + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

}  // namespace

SyntheticSample gen_synthetic_one(std::uint64_t seed, const SynthConfig& config) {
    Rng rng(seed);
    const int size = config.image_size;

    const double base = rng.uniform(0.3, 0.55);
    const double bg[3] = {base * rng.uniform(0.55, 0.85), base * rng.uniform(0.9, 1.0),
                          base * rng.uniform(0.95, 1.05)};

    const int count = static_cast<int>(rng.uniform_int(config.min_shapes, config.max_shapes));
    std::vector<Shape2D> shapes;
    shapes.reserve(static_cast<std::size_t>(count));
    for (int s = 0; s < count; ++s) {
        Shape2D sh;
        sh.ellipse = rng.uniform() < 0.5;
        sh.cx = rng.uniform(size * 0.2, size * 0.8);
        sh.cy = rng.uniform(size * 0.2, size * 0.8);
        sh.ex = rng.uniform(config.min_extent, config.max_extent);
        sh.ey = rng.uniform(config.min_extent, config.max_extent);
        const double fg_base = base + config.intensity_gap;
        for (int c = 0; c < 3; ++c) sh.color[c] = fg_base * rng.uniform(0.85, 1.05);
        shapes.push_back(sh);
    }

    SyntheticSample sample;
    sample.seed = seed;
    sample.mask = BinaryMask::zeros(size, size);
    NormImage img;
    img.width = size;
    img.height = size;
    img.channels = 3;
    img.values.resize(static_cast<std::size_t>(size) * size * 3);
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            const Shape2D* hit = nullptr;
            for (const Shape2D& sh : shapes) {
                if (sh.contains(x, y)) {
                    hit = &sh;
                    break;
                }
            }
            if (hit != nullptr) sample.mask.at(x, y) = 1;
            for (int c = 0; c < 3; ++c) {
                double v = (hit != nullptr ? hit->color[c] : bg[c]) * config.darkening;
                v += rng.uniform(-config.noise, config.noise);
                img.at(x, y, c) = std::clamp(v, 0.0, 1.0);
            }
        }
    }
    sample.image = quantize(img);
    return sample;
}

std::vector<SyntheticSample> gen_synthetic(std::uint64_t seed, int count,
                                           const SynthConfig& config) {
    if (count < 1) throw std::invalid_argument("gen_synthetic: count must be >= 1");
    std::vector<SyntheticSample> out;
    out.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) out.push_back(gen_synthetic_one(sample_seed(seed, i), config));
    return out;
}

// -- training loop --------------------------------------------------------------------

namespace {

const char* worst_loss_term(const LossReport& report) {
    auto bad = [](const std::vector<double>& terms) {
        for (double v : terms) {
            if (!std::isfinite(v)) return true;
        }
        return false;
    };
    if (bad(report.sup_alpha)) return "supervised alpha";
    if (bad(report.sup_beta)) return "supervised beta";
    if (bad(report.mut_alpha)) return "mutual alpha";
    if (bad(report.mut_beta)) return "mutual beta";
    return "total";
}

}  // namespace

TrainResult train(DualModel& model, const std::vector<SyntheticSample>& data,
                  const TrainOptions& options) {
    if (data.empty()) throw std::invalid_argument("train: empty dataset");
    const ModelConfig& cfg = model.config;
    const Schedule schedule{options.epochs, 0.1, 5.0};

    // Inputs and targets never change across epochs.
    std::vector<ModelInput> inputs;
    inputs.reserve(data.size());
    for (const SyntheticSample& s : data) inputs.push_back(preprocess(cfg, s.image));

    AdamW optimizer(model.params, options.opt);
    TrainResult result;
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);

    for (int t = 1; t <= options.epochs; ++t) {
        const double lr_now =
            options.opt.lr * std::pow(options.lr_step_factor, (t - 1) / options.lr_step_epochs);
        // deterministic per-epoch shuffle
        Rng shuffle_rng(options.shuffle_seed ^ (0x51ed2701u + static_cast<std::uint64_t>(t)));
        for (std::size_t i = order.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(shuffle_rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
            std::swap(order[i - 1], order[j]);
        }

        EpochStats stats;
        stats.epoch = t;
        stats.lr = lr_now;
        stats.mu = options.pms && model.beta ? mu(t, schedule) : 0.0;
        std::int64_t sup_elements = 0;

        for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(options.batch)) {
            const std::size_t batch_end =
                std::min(order.size(), at + static_cast<std::size_t>(options.batch));
            const double inv = 1.0 / static_cast<double>(batch_end - at);
            Tape tape;
            Tensor batch_loss = Tensor::scalar(0.0);
            for (std::size_t i = at; i < batch_end; ++i) {
                const std::size_t idx = order[i];
                ForwardResult outputs = forward(tape, model, inputs[idx]);
                TotalLoss sample_loss = total_loss(tape, outputs, data[idx].mask, t, schedule,
                                                   options.xi, cfg, options.pms);
                if (!std::isfinite(sample_loss.report.total)) {
                    throw std::runtime_error(
                        std::string("train: non-finite loss in the ") +
                        worst_loss_term(sample_loss.report) + " term at epoch " +
                        std::to_string(t) + ", sample " + std::to_string(idx));
                }
                const LossReport& rep = sample_loss.report;
                stats.total += rep.total;
                for (double v : rep.sup_alpha) stats.sup_alpha += v;
                for (double v : rep.sup_beta) stats.sup_beta += v;
                for (double v : rep.mut_alpha) stats.mut_alpha += v;
                for (double v : rep.mut_beta) stats.mut_beta += v;
                sup_elements += rep.sup_elements;
                batch_loss = add(tape, batch_loss, scale(tape, sample_loss.loss, inv));
            }
            backward(tape, batch_loss);
            optimizer.step(model.params, lr_now);
            for (Parameter& p : model.params.items()) p.value.zero_grad();
        }

        const double n = static_cast<double>(order.size());
        stats.total /= n;
        stats.sup_alpha /= n;
        stats.sup_beta /= n;
        stats.mut_alpha /= n;
        stats.mut_beta /= n;
        stats.sup_per_element =
            sup_elements > 0 ? (stats.sup_alpha + stats.sup_beta) * n / static_cast<double>(sup_elements)
                             : 0.0;
        result.history.push_back(stats);
        if (options.verbose) {
            std::printf("epoch %3d  lr %.2e  mu %.4e  total %.3f  per-elem %.5f\n", t, lr_now,
                        stats.mu, stats.total, stats.sup_per_element);
            std::fflush(stdout);
        }
    }
    return result;
}

void write_history_csv(const std::string& path, const std::vector<EpochStats>& history) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    out << "epoch,mu,lr,total,sup_alpha,sup_beta,mut_alpha,mut_beta,sup_per_element\n";
    char line[256];
    for (const EpochStats& s : history) {
        std::snprintf(line, sizeof(line), "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                      s.epoch, s.mu, s.lr, s.total, s.sup_alpha, s.sup_beta, s.mut_alpha,
                      s.mut_beta, s.sup_per_element);
        out << line;
    }
    if (!out) throw std::runtime_error("short write to " + path);
}

// -- inference ----------------------------------------------------------------------------

namespace {

// Finest-level map, averaged across branches when both exist.
std::vector<double> fused_final_map(const DualModel& model, const ModelInput& input,
                                    Shape* shape_out) {
    Tape tape;
    ForwardResult outputs = forward(tape, model, input);
    const Tensor& fine_a = outputs.alpha.maps.back();
    std::vector<double> fused = fine_a.values();
    if (!outputs.beta.maps.empty()) {
        const Tensor& fine_b = outputs.beta.maps.back();
        for (std::size_t i = 0; i < fused.size(); ++i) {
            fused[i] = 0.5 * (fused[i] + fine_b.values()[i]);
        }
    }
    *shape_out = fine_a.shape();
    return fused;
}

}  // namespace

BinaryMask predict_mask(const DualModel& model, const ModelInput& input, double xi) {
    Shape shape;
    const std::vector<double> fused = fused_final_map(model, input, &shape);
    const int h = shape[1], w = shape[2];
    if (model.config.head_mode == HeadMode::Connectivity) {
        Tensor map({8, h, w}, fused, false);
        return decode(threshold(map_from_tensor(map), xi));
    }
    BinaryMask mask = BinaryMask::zeros(w, h);
    for (std::size_t i = 0; i < mask.values.size(); ++i) mask.values[i] = fused[i] > 0.5 ? 1 : 0;
    return mask;
}

NormImage predict_soft(const DualModel& model, const ModelInput& input, double xi) {
    NormImage soft;
    if (model.config.head_mode == HeadMode::Connectivity) {
        const BinaryMask mask = predict_mask(model, input, xi);
        soft.width = mask.width;
        soft.height = mask.height;
        soft.channels = 1;
        soft.values.resize(mask.values.size());
        for (std::size_t i = 0; i < mask.values.size(); ++i) soft.values[i] = mask.values[i];
        return soft;
    }
    Shape shape;
    soft.values = fused_final_map(model, input, &shape);
    soft.width = shape[2];
    soft.height = shape[1];
    soft.channels = 1;
    return soft;
}

// -- config files -----------------------------------------------------------------------------

std::vector<std::pair<std::string, std::string>> config_to_kv(const ModelConfig& config) {
    std::vector<std::pair<std::string, std::string>> kv;
    auto put = [&kv](const std::string& k, auto v) { kv.emplace_back(k, std::to_string(v)); };
    put("image_size", config.image_size);
    put("patch_size", config.patch_size);
    put("embed_dim", config.embed_dim);
    put("heads", config.heads);
    put("encoder_layers", config.encoder_layers);
    put("lora_rank", config.lora_rank);
    put("adapter_dim", config.adapter_dim);
    put("prompt_layers", config.prompt_layers);
    std::string idx;
    for (int j : config.injection_indices) idx += (idx.empty() ? "" : " ") + std::to_string(j);
    kv.emplace_back("injection_indices", idx);
    put("decoder_levels", config.decoder_levels);
    put("seed", config.seed);
    put("ffn_hidden", config.ffn_hidden);
    put("prompt_ffn_hidden", config.prompt_ffn_hidden);
    put("se_dim", config.se_dim);
    kv.emplace_back("head_mode",
                    config.head_mode == HeadMode::Connectivity ? "connectivity" : "pixelwise");
    put("dual_branch", config.dual_branch ? 1 : 0);
    put("use_prompts", config.use_prompts ? 1 : 0);
    put("use_adapters", config.use_adapters ? 1 : 0);
    kv.emplace_back("gamma_variant", to_string(config.gamma));
    return kv;
}

ModelConfig config_from_kv(const std::vector<std::pair<std::string, std::string>>& kv) {
    ModelConfig config;
    for (const auto& [key, value] : kv) {
        if (key == "image_size") config.image_size = std::stoi(value);
        else if (key == "patch_size") config.patch_size = std::stoi(value);
        else if (key == "embed_dim") config.embed_dim = std::stoi(value);
        else if (key == "heads") config.heads = std::stoi(value);
        else if (key == "encoder_layers") config.encoder_layers = std::stoi(value);
        else if (key == "lora_rank") config.lora_rank = std::stoi(value);
        else if (key == "adapter_dim") config.adapter_dim = std::stoi(value);
        else if (key == "prompt_layers") config.prompt_layers = std::stoi(value);
        else if (key == "injection_indices") {
            config.injection_indices.clear();
            std::istringstream in(value);
            int j;
            while (in >> j) config.injection_indices.push_back(j);
        } else if (key == "decoder_levels") config.decoder_levels = std::stoi(value);
        else if (key == "seed") config.seed = std::stoull(value);
        else if (key == "ffn_hidden") config.ffn_hidden = std::stoi(value);
        else if (key == "prompt_ffn_hidden") config.prompt_ffn_hidden = std::stoi(value);
        else if (key == "se_dim") config.se_dim = std::stoi(value);
        else if (key == "head_mode") {
            config.head_mode = value == "pixelwise" ? HeadMode::PixelWise : HeadMode::Connectivity;
        } else if (key == "dual_branch") config.dual_branch = value != "0";
        else if (key == "use_prompts") config.use_prompts = value != "0";
        else if (key == "use_adapters") config.use_adapters = value != "0";
        else if (key == "gamma_variant") config.gamma = gamma_variant_from_string(value);
        // unknown keys (training settings etc.) are fine to skip
    }
    return config;
}

void write_config_file(const std::string& path,
                       const std::vector<std::pair<std::string, std::string>>& kv) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    for (const auto& [key, value] : kv) out << key << '=' << value << '\n';
    if (!out) throw std::runtime_error("short write to " + path);
}

std::vector<std::pair<std::string, std::string>> read_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::vector<std::pair<std::string, std::string>> kv;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw std::runtime_error(path + ": malformed line '" + line + "'");
        kv.emplace_back(line.substr(0, eq), line.substr(eq + 1));
    }
    return kv;
}

}  // namespace dualsam
