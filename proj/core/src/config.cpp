#include "rstm/config.hpp"

#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace rstm {

namespace {

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("bad boolean for key '" + key + "': " + v);
}

}  // namespace

RunConfig parse_run_config_text(const std::string& text, const std::string& origin) {
    RunConfig cfg;
    std::map<std::string, std::function<void(const std::string&, const std::string&)>> setters = {
        {"data_dir", [&](const std::string&, const std::string& v) { cfg.data_dir = v; }},
        {"out_dir", [&](const std::string&, const std::string& v) { cfg.out_dir = v; }},
        {"seed", [&](const std::string&, const std::string& v) { cfg.seed = std::stoull(v); }},
        {"steps", [&](const std::string&, const std::string& v) { cfg.steps = std::stoi(v); }},
        {"batch", [&](const std::string&, const std::string& v) { cfg.batch = std::stoi(v); }},
        {"lr_g", [&](const std::string&, const std::string& v) { cfg.lr_g = std::stod(v); }},
        {"lr_d", [&](const std::string&, const std::string& v) { cfg.lr_d = std::stod(v); }},
        {"lr_rsm", [&](const std::string&, const std::string& v) { cfg.lr_rsm = std::stod(v); }},
        {"lambda_fm",
         [&](const std::string&, const std::string& v) { cfg.lambda_fm = std::stod(v); }},
        {"lambda_perc",
         [&](const std::string&, const std::string& v) { cfg.lambda_perc = std::stod(v); }},
        {"ablate_softmax",
         [&](const std::string& k, const std::string& v) { cfg.ablate_softmax = parse_bool(v, k); }},
        {"ablate_sa",
         [&](const std::string& k, const std::string& v) { cfg.ablate_sa = parse_bool(v, k); }},
        {"rsm_stargan_mode",
         [&](const std::string& k, const std::string& v) {
             cfg.rsm_stargan_mode = parse_bool(v, k);
         }},
        {"image_size",
         [&](const std::string&, const std::string& v) { cfg.image_size = std::stoi(v); }},
        {"num_classes",
         [&](const std::string&, const std::string& v) { cfg.num_classes = std::stoi(v); }},
        {"style_dim",
         [&](const std::string&, const std::string& v) { cfg.style_dim = std::stoi(v); }},
    };
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
        std::string key = trim(line.substr(0, eq));
        std::string val = trim(line.substr(eq + 1));
        auto it = setters.find(key);
        if (it == setters.end())
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": unknown key '" + key +
                              "'");
        try {
            it->second(key, val);
        } catch (const ConfigError&) {
            throw;
        } catch (const std::exception&) {
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": bad value for '" + key +
                              "': " + val);
        }
    }
    if (cfg.steps < 0 || cfg.batch < 1 || cfg.lr_g <= 0 || cfg.lr_d <= 0 || cfg.lr_rsm <= 0)
        throw ConfigError(origin + ": invalid rates or sizes");
    return cfg;
}

RunConfig parse_run_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse_run_config_text(ss.str(), path);
}

std::string run_config_echo(const RunConfig& c) {
    std::ostringstream os;
    os << "ablate_sa = " << (c.ablate_sa ? "true" : "false") << "\n"
       << "ablate_softmax = " << (c.ablate_softmax ? "true" : "false") << "\n"
       << "batch = " << c.batch << "\n"
       << "data_dir = " << c.data_dir << "\n"
       << "image_size = " << c.image_size << "\n"
       << "lambda_fm = " << c.lambda_fm << "\n"
       << "lambda_perc = " << c.lambda_perc << "\n"
       << "lr_d = " << c.lr_d << "\n"
       << "lr_g = " << c.lr_g << "\n"
       << "lr_rsm = " << c.lr_rsm << "\n"
       << "num_classes = " << c.num_classes << "\n"
       << "out_dir = " << c.out_dir << "\n"
       << "rsm_stargan_mode = " << (c.rsm_stargan_mode ? "true" : "false") << "\n"
       << "seed = " << c.seed << "\n"
       << "steps = " << c.steps << "\n"
       << "style_dim = " << c.style_dim << "\n";
    return os.str();
}

}  // namespace rstm
