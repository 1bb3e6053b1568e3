#include "rstm/evaluate.hpp"

#include <algorithm>

#include <nlohmann/json.hpp>

#include "rstm/training.hpp"

namespace rstm {

std::vector<Image> reconstruct_images(const Dataset& ds, const RunConfig& cfg,
                                      ParamStore<float>& gen_ps, int max_images) {
    ModelConfig mcfg = model_config_from(cfg);
    int n = std::min<int>(max_images, static_cast<int>(ds.images.size()));
    std::vector<Image> out;
    const int chunk = 8;
    for (int start = 0; start < n; start += chunk) {
        int cnt = std::min(chunk, n - start);
        std::vector<Image> imgs(ds.images.begin() + start, ds.images.begin() + start + cnt);
        std::vector<SegMask> masks(ds.masks.begin() + start, ds.masks.begin() + start + cnt);
        Tape<float> tape;
        Var<float> x = tape.constant(images_to_tensor(imgs));
        Var<float> y = generate(tape, gen_ps, x, masks, mcfg, false, false);
        for (int i = 0; i < cnt; ++i) out.push_back(tensor_to_image(y.val(), i));
    }
    return out;
}

EvalReport run_eval(const Dataset& ds, const RunConfig& cfg, ParamStore<float>& gen_ps,
                    ParamStore<float>* hs_ps, int max_images, int diversity_samples) {
    if (ds.images.empty()) throw std::invalid_argument("run_eval: empty dataset");
    ModelConfig mcfg = model_config_from(cfg);
    EvalReport rep;
    rep.seed = cfg.seed;
    rep.config_echo = run_config_echo(cfg);

    std::vector<Image> recon = reconstruct_images(ds, cfg, gen_ps, max_images);
    int n = static_cast<int>(recon.size());
    double psum = 0;
    for (int i = 0; i < n; ++i) psum += psnr(ds.images[static_cast<std::size_t>(i)],
                                             recon[static_cast<std::size_t>(i)]);
    rep.psnr_mean = psum / n;

    if (hs_ps && hs_ps->has("hs.fc_w")) {
        std::vector<Image> reals(ds.images.begin(), ds.images.begin() + n);
        std::vector<SegMask> fg;
        for (int i = 0; i < n; ++i)
            fg.push_back(class_fg_mask(ds.masks[static_cast<std::size_t>(i)], kSkin));
        auto scores = harmony_scores(*hs_ps, recon, fg);
        double ssum = 0;
        for (double s : scores) ssum += s;
        rep.hs_mean = ssum / n;
        rep.frechet = frechet_distance(feature_stats(harmony_features(*hs_ps, reals, fg)),
                                       feature_stats(harmony_features(*hs_ps, recon, fg)));
    }

    // hair-region diversity on the first image, mapping-net samples
    if (gen_ps.has("map.g0.l0_w")) {
        GroupingConfig gc = default_grouping();
        Rng rng(cfg.seed ^ 0x646976657273ull);
        std::vector<Image> samples;
        std::vector<SegMask> mask1{ds.masks[0]};
        std::vector<Image> img1{ds.images[0]};
        for (int k = 0; k < diversity_samples; ++k) {
            Tape<float> tape;
            Var<float> x = tape.constant(images_to_tensor(img1));
            StyleBatch<float> s_t = encode_styles(tape, gen_ps, x, mask1, mcfg, false, false);
            StyleBatch<float> edited =
                sample_styles_into(tape, gen_ps, s_t, {kHair}, gc, mcfg, rng);
            StyleBatch<float> attended = mrsa_attend(tape, gen_ps, edited, s_t, mcfg, false);
            Var<float> y = decode(tape, gen_ps, attended, mask1, mcfg, false);
            samples.push_back(tensor_to_image(y.val(), 0));
        }
        SegMask hair = class_fg_mask(ds.masks[0], kHair);
        std::vector<char> region(hair.labels.begin(), hair.labels.end());
        DiversityResult div = mcsd_mocd(samples, region);
        rep.mcsd = div.mcsd;
        rep.mocd = div.mocd;
    }
    return rep;
}

std::string eval_report_json(const EvalReport& r) {
    nlohmann::json j;  // object keys come out sorted
    j["psnr_mean"] = r.psnr_mean;
    j["hs_mean"] = r.hs_mean ? nlohmann::json(*r.hs_mean) : nlohmann::json(nullptr);
    j["frechet"] = r.frechet ? nlohmann::json(*r.frechet) : nlohmann::json(nullptr);
    j["mcsd"] = r.mcsd ? nlohmann::json(*r.mcsd) : nlohmann::json(nullptr);
    j["mocd"] = r.mocd ? nlohmann::json(*r.mocd) : nlohmann::json(nullptr);
    j["seed"] = r.seed;
    j["config_echo"] = r.config_echo;
    return j.dump(2) + "\n";
}

}  // namespace rstm
