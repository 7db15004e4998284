#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dualsam/c3p.hpp"
#include "dualsam/image.hpp"

namespace dualsam {

struct ConfusionCounts {
    std::int64_t tp = 0;
    std::int64_t fp = 0;
    std::int64_t fn = 0;
    std::int64_t tn = 0;
};

ConfusionCounts confusion(const BinaryMask& pred, const BinaryMask& gt);

enum class IouMode {
    ForegroundOnly,  // |pred n gt| / |pred u gt|; 1.0 when both are empty
    TwoClass,        // mean of foreground and background IoU
};

double iou(const BinaryMask& pred, const BinaryMask& gt, IouMode mode = IouMode::ForegroundOnly);

// ((1+b2) * Prec * Rec) / (b2 * Prec + Rec), 0 when the denominator vanishes.
// Throws if the ground truth has no foreground.
double f_beta(const BinaryMask& pred, const BinaryMask& gt, double beta_sq = 0.3);

// Mean absolute discrepancy between a [0,1]-valued single-channel map and a
// binary ground truth.
double mae(const NormImage& pred, const BinaryMask& gt);

struct EvalOptions {
    IouMode iou_mode = IouMode::ForegroundOnly;
    double beta_sq = 0.3;
    double bin_threshold = 0.5;  // binarization for IoU / F-beta
};

struct ImageMetrics {
    double iou = 0.0;
    double f_beta = 0.0;
    double mae = 0.0;
};

struct MetricReport {
    double miou = 0.0;
    double f_beta = 0.0;
    double mae = 0.0;
    std::vector<ImageMetrics> per_image;
    bool empty_empty_iou_used = false;  // the IoU(empty, empty) = 1 convention fired
};

// Predictions are soft maps; each is bilinearly resized to its ground truth's
// dimensions, then thresholded for the binary metrics.
MetricReport evaluate_dataset(const std::vector<NormImage>& preds,
                              const std::vector<BinaryMask>& gts,
                              const EvalOptions& options = {});

void write_report_csv(const std::string& path, const MetricReport& report);
void write_report_summary(const std::string& path, const MetricReport& report);

}  // namespace dualsam
