#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace rstm {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Flat `key = value` run configuration; '#' starts a comment. Unknown keys
// are rejected by name.
struct RunConfig {
    std::string data_dir;
    std::string out_dir = ".";
    std::uint64_t seed = 1;
    int steps = 3000;
    int batch = 8;
    double lr_g = 0.0001;
    double lr_d = 0.0004;
    double lr_rsm = 0.0002;
    double lambda_fm = 10.0;
    double lambda_perc = 10.0;
    bool ablate_softmax = false;
    bool ablate_sa = false;
    bool rsm_stargan_mode = false;
    int image_size = 64;
    int num_classes = 8;
    int style_dim = 64;
};

RunConfig parse_run_config(const std::string& path);
RunConfig parse_run_config_text(const std::string& text, const std::string& origin = "<string>");
std::string run_config_echo(const RunConfig& cfg);  // canonical key=value dump

}  // namespace rstm
