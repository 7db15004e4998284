#include "dualsam/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace dualsam {

namespace {

void require_same_dims(int wa, int ha, int wb, int hb, const char* what) {
    if (wa != wb || ha != hb) {
        throw std::invalid_argument(std::string(what) + ": dimension mismatch " +
                                    std::to_string(wa) + "x" + std::to_string(ha) + " vs " +
                                    std::to_string(wb) + "x" + std::to_string(hb));
    }
}

}  // namespace

ConfusionCounts confusion(const BinaryMask& pred, const BinaryMask& gt) {
    require_same_dims(pred.width, pred.height, gt.width, gt.height, "confusion");
    ConfusionCounts c;
    for (std::size_t i = 0; i < pred.values.size(); ++i) {
        const bool p = pred.values[i] != 0;
        const bool g = gt.values[i] != 0;
        if (p && g) ++c.tp;
        else if (p) ++c.fp;
        else if (g) ++c.fn;
        else ++c.tn;
    }
    return c;
}

double iou(const BinaryMask& pred, const BinaryMask& gt, IouMode mode) {
    const ConfusionCounts c = confusion(pred, gt);
    const auto fg_union = c.tp + c.fp + c.fn;
    const double fg = fg_union == 0 ? 1.0 : static_cast<double>(c.tp) / static_cast<double>(fg_union);
    if (mode == IouMode::ForegroundOnly) return fg;
    const auto bg_union = c.tn + c.fp + c.fn;
    const double bg = bg_union == 0 ? 1.0 : static_cast<double>(c.tn) / static_cast<double>(bg_union);
    return 0.5 * (fg + bg);
}

double f_beta(const BinaryMask& pred, const BinaryMask& gt, double beta_sq) {
    const ConfusionCounts c = confusion(pred, gt);
    if (c.tp + c.fn == 0) {
        throw std::invalid_argument("f_beta: ground truth has no foreground");
    }
    if (c.tp == 0) return 0.0;
    const double precision = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
    const double recall = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
    const double denom = beta_sq * precision + recall;
    if (denom == 0.0) return 0.0;
    return (1.0 + beta_sq) * precision * recall / denom;
}

double mae(const NormImage& pred, const BinaryMask& gt) {
    if (pred.channels != 1) throw std::invalid_argument("mae: prediction must be single-channel");
    require_same_dims(pred.width, pred.height, gt.width, gt.height, "mae");
    double total = 0.0;
    for (std::size_t i = 0; i < pred.values.size(); ++i) {
        total += std::abs(pred.values[i] - static_cast<double>(gt.values[i]));
    }
    return total / static_cast<double>(pred.values.size());
}

MetricReport evaluate_dataset(const std::vector<NormImage>& preds,
                              const std::vector<BinaryMask>& gts,
                              const EvalOptions& options) {
    if (preds.empty()) throw std::invalid_argument("evaluate_dataset: empty dataset");
    if (preds.size() != gts.size()) {
        throw std::invalid_argument("evaluate_dataset: " + std::to_string(preds.size()) +
                                    " predictions vs " + std::to_string(gts.size()) +
                                    " ground truths");
    }
    MetricReport report;
    report.per_image.reserve(preds.size());
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const BinaryMask& gt = gts[i];
        NormImage soft = resize_bilinear(preds[i], gt.width, gt.height);
        BinaryMask bin = BinaryMask::zeros(gt.width, gt.height);
        for (std::size_t j = 0; j < soft.values.size(); ++j) {
            bin.values[j] = soft.values[j] > options.bin_threshold ? 1 : 0;
        }
        ImageMetrics m;
        {
            const ConfusionCounts c = confusion(bin, gt);
            if (c.tp + c.fp + c.fn == 0) report.empty_empty_iou_used = true;
        }
        m.iou = iou(bin, gt, options.iou_mode);
        m.f_beta = f_beta(bin, gt, options.beta_sq);
        m.mae = mae(soft, gt);
        report.per_image.push_back(m);
        report.miou += m.iou;
        report.f_beta += m.f_beta;
        report.mae += m.mae;
    }
    const double n = static_cast<double>(report.per_image.size());
    report.miou /= n;
    report.f_beta /= n;
    report.mae /= n;
    return report;
}

void write_report_csv(const std::string& path, const MetricReport& report) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    out << "image,iou,f_beta,mae\n";
    char line[128];
    for (std::size_t i = 0; i < report.per_image.size(); ++i) {
        const ImageMetrics& m = report.per_image[i];
        std::snprintf(line, sizeof(line), "%zu,%.9f,%.9f,%.9f\n", i, m.iou, m.f_beta, m.mae);
        out << line;
    }
    std::snprintf(line, sizeof(line), "mean,%.9f,%.9f,%.9f\n", report.miou, report.f_beta,
                  report.mae);
    out << line;
    if (!out) throw std::runtime_error("short write to " + path);
}

void write_report_summary(const std::string& path, const MetricReport& report) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    char line[256];
    std::snprintf(line, sizeof(line),
                  "images=%zu\nmiou=%.9f\nf_beta=%.9f\nmae=%.9f\nempty_empty_iou_used=%d\n",
                  report.per_image.size(), report.miou, report.f_beta, report.mae,
                  report.empty_empty_iou_used ? 1 : 0);
    out << line;
    if (!out) throw std::runtime_error("short write to " + path);
}

}  // namespace dualsam
