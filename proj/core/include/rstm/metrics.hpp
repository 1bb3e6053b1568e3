#pragma once

#include <optional>
#include <string>
#include <vector>

#include "rstm/image.hpp"
#include "rstm/params.hpp"
#include "rstm/toyfaces.hpp"

namespace rstm {

// peak-signal-to-noise ratio with peak 1.0; identical images report the
// capped sentinel 99.0 dB
double psnr(const Image& a, const Image& b);

// diagonal-covariance Gaussian fit
struct FeatureStats {
    std::vector<double> mu;
    std::vector<double> var;
};

FeatureStats feature_stats(const std::vector<std::vector<float>>& features);

// ||mu_a - mu_b||^2 + sum_i (var_a + var_b - 2*sqrt(var_a)*sqrt(var_b))
double frechet_distance(const FeatureStats& a, const FeatureStats& b);

struct DiversityResult {
    std::optional<double> mcsd;  // null when the region is empty
    std::optional<double> mocd;  // null when the region covers everything
};

// all-pairs mean absolute pixel difference inside / outside the region mask
DiversityResult mcsd_mocd(const std::vector<Image>& samples,
                          const std::vector<char>& region_mask);

// ---------------------------------------------------------------------------
// harmony score

struct HarmonyTrainConfig {
    int epochs = 4;
    int batch = 16;
    double lr = 1e-3;
    std::uint64_t seed = 1;
    bool shuffle_labels = false;  // sanity control: held-out AUC should be ~0.5
    double holdout_fraction = 0.25;
};

struct HarmonyTrainResult {
    double auc_holdout = 0.0;
    int steps = 0;
};

// Trains the real-vs-composite classifier. Real samples get a random region
// of their segmentation mask as the foreground channel so the mask channel
// itself carries no label signal.
HarmonyTrainResult train_harmony(ParamStore<float>& ps, const std::vector<Image>& reals,
                                 const std::vector<SegMask>& real_masks,
                                 const std::vector<Image>& composites,
                                 const std::vector<SegMask>& composite_fg,
                                 const HarmonyTrainConfig& cfg);

// sigmoid of the classifier logit; higher = more harmonious
double harmony_score(ParamStore<float>& ps, const Image& img, const SegMask& fg_mask);
std::vector<double> harmony_scores(ParamStore<float>& ps, const std::vector<Image>& imgs,
                                   const std::vector<SegMask>& fg_masks);

// penultimate-layer embedding (64-dim), used for the Frechet metric
std::vector<std::vector<float>> harmony_features(ParamStore<float>& ps,
                                                 const std::vector<Image>& imgs,
                                                 const std::vector<SegMask>& fg_masks);

// binary foreground mask covering one class of a segmentation mask
SegMask class_fg_mask(const SegMask& seg, int cls);

}  // namespace rstm
