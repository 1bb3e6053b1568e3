#pragma once

#include <optional>
#include <string>
#include <vector>

#include "rstm/metrics.hpp"
#include "rstm/pipeline.hpp"
#include "rstm/toyfaces.hpp"

namespace rstm {

struct EvalReport {
    double psnr_mean = 0.0;
    std::optional<double> hs_mean;   // needs a trained harmony classifier
    std::optional<double> frechet;   // idem (harmony-feature statistics)
    std::optional<double> mcsd;      // needs trained mapping nets
    std::optional<double> mocd;
    std::uint64_t seed = 0;
    std::string config_echo;
};

// Reconstruct every evaluated image, score it, and (when the respective
// parameters are available) add harmony / Frechet / diversity numbers.
// `hs_ps` may be null. Diversity uses mapping-net hair samples on the first
// image and is skipped unless `gen_ps` contains mapping nets.
EvalReport run_eval(const Dataset& ds, const RunConfig& cfg, ParamStore<float>& gen_ps,
                    ParamStore<float>* hs_ps, int max_images = 32, int diversity_samples = 8);

// Reconstructions for a slice of the dataset (chunked batched decode).
std::vector<Image> reconstruct_images(const Dataset& ds, const RunConfig& cfg,
                                      ParamStore<float>& gen_ps, int max_images);

std::string eval_report_json(const EvalReport& r);  // sorted keys

}  // namespace rstm
