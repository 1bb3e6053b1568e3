#pragma once

#include <string>
#include <vector>

#include "rstm/pipeline.hpp"
#include "rstm/toyfaces.hpp"

namespace rstm {

struct TrainLogRow {
    int step = 0;
    double g_adv = 0, fm = 0, perc = 0, d = 0;
};

struct TrainResult {
    bool nan_abort = false;
    int steps_done = 0;
    std::vector<TrainLogRow> log;
};

// Stage-1 parameter set: generator (encoder + MRSA + decoder), image
// discriminator and the frozen perceptual net.
void init_stage1(ParamStore<float>& ps, const ModelConfig& cfg, std::uint64_t seed);

// Supervised reconstruction stage: alternating G/D hinge steps with TTUR
// rates; on a non-finite loss the loop stops before applying the bad update,
// so `ps` still holds the last good parameters.
TrainResult train_stage1(const Dataset& ds, const RunConfig& cfg, ParamStore<float>& ps,
                         const std::string& loss_log_path = "");

// Encoded style rows per group, gathered once from the frozen encoder.
struct StyleBank {
    // bank[j] is a row-major [count, |group_j| * D] matrix
    std::vector<std::vector<std::vector<float>>> bank;
};

StyleBank collect_style_bank(const Dataset& ds, const RunConfig& cfg, ParamStore<float>& ps,
                             const GroupingConfig& gc);

// Stage 2: adversarial training of the mapping nets in style space against
// the frozen encoder's styles (or, in StarGAN-v2 comparison mode, through
// the image-space adversarial loss). Only map.* / sdisc.* (or map.* /
// disc.*) parameters change.
TrainResult train_stage2_rsm(const Dataset& ds, const RunConfig& cfg, ParamStore<float>& ps,
                             const GroupingConfig& gc, const std::string& loss_log_path = "");

// Assemble a [1,C,D] style batch from mapping-net samples for the groups
// covering `regions`, replacing those rows of `base`.
StyleBatch<float> sample_styles_into(Tape<float>& tape, ParamStore<float>& ps,
                                     const StyleBatch<float>& base, const std::set<int>& regions,
                                     const GroupingConfig& gc, const ModelConfig& cfg, Rng& rng);

// Per-group diagonal Frechet distance between mapping-net samples and the
// encoded style bank (used for the stage-2 progress check).
std::vector<double> rsm_style_frechet(const StyleBank& bank, ParamStore<float>& ps,
                                      const GroupingConfig& gc, const ModelConfig& cfg,
                                      int num_samples, std::uint64_t seed);

}  // namespace rstm
