#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "oracles.hpp"
#include "rstm/checkpoint.hpp"
#include "rstm/evaluate.hpp"
#include "rstm/metrics.hpp"
#include "rstm/training.hpp"

using namespace rstm;
namespace fs = std::filesystem;

namespace {

Dataset make_faces(int count, std::uint64_t seed, Split split) {
    Dataset ds;
    ds.seed = seed;
    ds.split = split;
    ds.classes.assign(class_names().begin(), class_names().end());
    for (int i = 0; i < count; ++i) {
        FaceSpec spec = sample_face(seed * 1000 + static_cast<std::uint64_t>(i), split);
        Image img;
        SegMask mask;
        render(spec, &img, &mask);
        ds.images.push_back(std::move(img));
        ds.masks.push_back(std::move(mask));
    }
    return ds;
}

Image noise_image(int h, int w, std::uint64_t seed) {
    Image img(h, w);
    Rng rng(seed);
    for (auto& v : img.pixels) v = static_cast<float>(rng.uniform());
    return img;
}

bool same_bits(const TensorMap& a, const TensorMap& b) {
    if (a.size() != b.size()) return false;
    for (const auto& [name, t] : a) {
        auto it = b.find(name);
        if (it == b.end() || it->second.dims != t.dims || it->second.data != t.data) return false;
    }
    return true;
}

}  // namespace

// --------------------------------------------------------------------------
// metrics

TEST_CASE("psnr matches hand values and the oracle") {
    Image a(8, 8), b(8, 8);
    CHECK_EQ(psnr(a, a), 99.0);
    for (auto& v : b.pixels) v = 0.5f;
    CHECK_EQ(psnr(a, b), doctest::Approx(10.0 * std::log10(4.0)).epsilon(1e-9));
    for (int rep = 0; rep < 20; ++rep) {
        Image x = noise_image(6, 7, 100 + static_cast<std::uint64_t>(rep));
        Image y = noise_image(6, 7, 200 + static_cast<std::uint64_t>(rep));
        CHECK_EQ(psnr(x, y), doctest::Approx(oracle::psnr(x, y)).epsilon(1e-12));
    }
    Image small(4, 4);
    CHECK_THROWS_AS(psnr(a, small), std::invalid_argument);
}

TEST_CASE("frechet_distance matches hand values and the oracle") {
    std::vector<std::vector<float>> fa = {{1.f, 2.f}, {3.f, 4.f}, {2.f, 3.f}};
    CHECK_EQ(frechet_distance(feature_stats(fa), feature_stats(fa)), 0.0);

    // shifting every sample by delta in one dimension adds delta^2
    std::vector<std::vector<float>> fb = fa;
    for (auto& f : fb) f[0] += 0.5f;
    CHECK_EQ(frechet_distance(feature_stats(fa), feature_stats(fb)),
             doctest::Approx(0.25).epsilon(1e-9));

    Rng rng(9);
    for (int rep = 0; rep < 20; ++rep) {
        std::vector<std::vector<float>> xa, xb;
        int n = 3 + static_cast<int>(rng.below(6));
        int d = 1 + static_cast<int>(rng.below(5));
        for (int i = 0; i < n; ++i) {
            std::vector<float> ra(static_cast<std::size_t>(d)), rb(static_cast<std::size_t>(d));
            for (auto& v : ra) v = static_cast<float>(rng.uniform(-2.0, 2.0));
            for (auto& v : rb) v = static_cast<float>(rng.uniform(-2.0, 2.0));
            xa.push_back(ra);
            xb.push_back(rb);
        }
        CHECK_EQ(frechet_distance(feature_stats(xa), feature_stats(xb)),
                 doctest::Approx(oracle::frechet(xa, xb)).epsilon(1e-9));
    }
    CHECK_THROWS_AS(feature_stats({}), std::invalid_argument);
    FeatureStats s1{{0.0}, {1.0}}, s2{{0.0, 0.0}, {1.0, 1.0}};
    CHECK_THROWS_AS(frechet_distance(s1, s2), std::invalid_argument);
}

TEST_CASE("mcsd_mocd matches hand values and the oracle") {
    // two images differing by 0.3 only inside the region
    Image a(4, 4), b(4, 4);
    std::vector<char> region(16, 0);
    for (int i = 0; i < 4; ++i) region[static_cast<std::size_t>(i)] = 1;
    for (int i = 0; i < 4; ++i)
        for (int c = 0; c < 3; ++c) b.pixels[static_cast<std::size_t>(i * 3 + c)] = 0.3f;
    DiversityResult r = mcsd_mocd({a, b}, region);
    REQUIRE(r.mcsd.has_value());
    REQUIRE(r.mocd.has_value());
    CHECK_EQ(*r.mcsd, doctest::Approx(0.3).epsilon(1e-6));
    CHECK_EQ(*r.mocd, doctest::Approx(0.0).epsilon(1e-12));

    Rng rng(77);
    for (int rep = 0; rep < 20; ++rep) {
        int n = 2 + static_cast<int>(rng.below(4));
        std::vector<Image> samples;
        for (int i = 0; i < n; ++i)
            samples.push_back(noise_image(5, 5, 1000 + static_cast<std::uint64_t>(rep * 10 + i)));
        std::vector<char> mask(25);
        for (auto& m : mask) m = static_cast<char>(rng.below(2));
        DiversityResult got = mcsd_mocd(samples, mask);
        auto [want_in, want_out] = oracle::diversity(samples, mask);
        CHECK_EQ(got.mcsd.has_value(), want_in.has_value());
        CHECK_EQ(got.mocd.has_value(), want_out.has_value());
        if (want_in) CHECK_EQ(*got.mcsd, doctest::Approx(*want_in).epsilon(1e-9));
        if (want_out) CHECK_EQ(*got.mocd, doctest::Approx(*want_out).epsilon(1e-9));
    }

    std::vector<char> empty_region(16, 0), full_region(16, 1);
    CHECK_FALSE(mcsd_mocd({a, b}, empty_region).mcsd.has_value());
    CHECK_FALSE(mcsd_mocd({a, b}, full_region).mocd.has_value());
    CHECK_THROWS_AS(mcsd_mocd({a}, region), std::invalid_argument);
}

TEST_CASE("class_fg_mask marks exactly one class") {
    SegMask seg(3, 3);
    seg.at(0, 0) = kHair;
    seg.at(1, 1) = kHair;
    seg.at(2, 2) = kSkin;
    SegMask fg = class_fg_mask(seg, kHair);
    int count = 0;
    for (int y = 0; y < 3; ++y)
        for (int x = 0; x < 3; ++x) {
            CHECK_EQ(fg.at(y, x), seg.at(y, x) == kHair ? 1 : 0);
            count += fg.at(y, x);
        }
    CHECK_EQ(count, 2);
}

TEST_CASE("harmony classifier separates blatant composites and fails on shuffled labels") {
    Dataset ds = make_faces(48, 5, Split::kWild);
    std::vector<Image> composites;
    std::vector<SegMask> composite_fg;
    Rng rng(6);
    for (int i = 0; i < 24; ++i) {
        Image img = ds.images[static_cast<std::size_t>(i)];
        SegMask fg(img.height, img.width);
        int y0 = 8 + static_cast<int>(rng.below(32));
        int x0 = 8 + static_cast<int>(rng.below(32));
        for (int y = y0; y < y0 + 12; ++y)
            for (int x = x0; x < x0 + 12; ++x) {
                for (int c = 0; c < 3; ++c)
                    img.at(y, x, c) = static_cast<float>(rng.uniform());
                fg.at(y, x) = 1;
            }
        composites.push_back(std::move(img));
        composite_fg.push_back(std::move(fg));
    }
    std::vector<Image> reals(ds.images.begin() + 24, ds.images.end());
    std::vector<SegMask> real_masks(ds.masks.begin() + 24, ds.masks.end());

    HarmonyTrainConfig hcfg;
    hcfg.epochs = 3;
    hcfg.batch = 8;
    hcfg.seed = 11;
    ParamStore<float> ps;
    init_harmony_params(ps, 11);
    HarmonyTrainResult res = train_harmony(ps, reals, real_masks, composites, composite_fg, hcfg);
    CHECK_GT(res.steps, 0);
    CHECK_GT(res.auc_holdout, 0.7);

    // identical rerun is deterministic
    ParamStore<float> ps2;
    init_harmony_params(ps2, 11);
    HarmonyTrainResult res2 =
        train_harmony(ps2, reals, real_masks, composites, composite_fg, hcfg);
    CHECK_EQ(res.auc_holdout, res2.auc_holdout);
    CHECK(same_bits(snapshot(ps), snapshot(ps2)));

    hcfg.shuffle_labels = true;
    ParamStore<float> ps3;
    init_harmony_params(ps3, 11);
    HarmonyTrainResult shuffled =
        train_harmony(ps3, reals, real_masks, composites, composite_fg, hcfg);
    CHECK_GT(shuffled.auc_holdout, 0.15);
    CHECK_LT(shuffled.auc_holdout, 0.85);

    CHECK_THROWS_AS(train_harmony(ps, reals, real_masks, {}, {}, hcfg), std::invalid_argument);

    // scores are sigmoids, features have the advertised width
    std::vector<double> scores = harmony_scores(ps, composites, composite_fg);
    REQUIRE_EQ(scores.size(), composites.size());
    for (double s : scores) {
        CHECK_GE(s, 0.0);
        CHECK_LE(s, 1.0);
    }
    auto feats = harmony_features(ps, reals, real_masks);
    REQUIRE_EQ(feats.size(), reals.size());
    CHECK_EQ(feats[0].size(), 64);
}

// --------------------------------------------------------------------------
// training loops

TEST_CASE("short supervised training runs are bit-identical and touch only their stage") {
    Dataset ds = make_faces(4, 21, Split::kStudio);
    RunConfig cfg;
    cfg.seed = 3;
    cfg.steps = 2;
    cfg.batch = 2;
    ModelConfig mcfg = model_config_from(cfg);

    auto run = [&](const std::string& log_path) {
        ParamStore<float> ps;
        init_stage1(ps, mcfg, cfg.seed);
        TrainResult r = train_stage1(ds, cfg, ps, log_path);
        REQUIRE_FALSE(r.nan_abort);
        REQUIRE_EQ(r.steps_done, 2);
        REQUIRE_EQ(r.log.size(), 2);
        return snapshot(ps);
    };
    fs::path log = fs::temp_directory_path() / "rstm_test_loss_log.csv";
    TensorMap a = run(log.string());
    TensorMap b = run("");
    CHECK(same_bits(a, b));

    std::ifstream lf(log);
    std::string header;
    std::getline(lf, header);
    CHECK_EQ(header, "step,loss_G_adv,loss_FM,loss_perc,loss_D");
    int rows = 0;
    for (std::string line; std::getline(lf, line);)
        if (!line.empty()) ++rows;
    CHECK_EQ(rows, 2);

    // the frozen perceptual net is byte-identical to a fresh copy
    ParamStore<float> fresh;
    init_stage1(fresh, mcfg, cfg.seed);
    for (const auto& name : fresh.names_with_prefix("perc."))
        CHECK(a.at(name).data == fresh.get(name).data);

    // training moved generator and discriminator weights
    CHECK(a.at("enc.c0.w").data != fresh.get("enc.c0.w").data);
    CHECK(a.at("disc.s0.c0.w").data != fresh.get("disc.s0.c0.w").data);
}

TEST_CASE("training aborts on non-finite losses without applying the bad update") {
    Dataset ds = make_faces(4, 22, Split::kStudio);
    RunConfig cfg;
    cfg.steps = 3;
    cfg.batch = 2;
    ModelConfig mcfg = model_config_from(cfg);
    ParamStore<float> ps;
    init_stage1(ps, mcfg, cfg.seed);
    for (auto& v : ps.get("enc.c0.w").data) v = 1e30f;  // poison the forward pass
    TensorMap before = snapshot(ps);
    TrainResult r = train_stage1(ds, cfg, ps, "");
    CHECK(r.nan_abort);
    CHECK_EQ(r.steps_done, 0);
    // weights are untouched; only the spectral-norm power-iteration state
    // (.u buffers) may have advanced during the aborted forward pass
    TensorMap after = snapshot(ps);
    for (const auto& [name, t] : before) {
        if (name.size() > 2 && name.compare(name.size() - 2, 2, ".u") == 0) continue;
        CHECK_MESSAGE(after.at(name).data == t.data, name, " changed despite the abort");
    }

    RunConfig small = cfg;
    small.batch = 100;
    CHECK_THROWS_AS(train_stage1(ds, small, ps, ""), std::invalid_argument);
}

TEST_CASE("style bank rows have the grouped width") {
    Dataset ds = make_faces(6, 23, Split::kStudio);
    RunConfig cfg;
    ModelConfig mcfg = model_config_from(cfg);
    GroupingConfig gc = default_grouping();
    ParamStore<float> ps;
    init_stage1(ps, mcfg, cfg.seed);
    StyleBank bank = collect_style_bank(ds, cfg, ps, gc);
    REQUIRE_EQ(bank.bank.size(), 5);
    for (int j = 0; j < gc.num_groups(); ++j) {
        const auto& rows = bank.bank[static_cast<std::size_t>(j)];
        CHECK_GT(rows.size(), 0);
        CHECK_LE(rows.size(), 6);
        for (const auto& r : rows)
            CHECK_EQ(r.size(), gc.groups[static_cast<std::size_t>(j)].size() *
                                   static_cast<std::size_t>(mcfg.style_dim));
    }
}

TEST_CASE("mapping-net training leaves the generator and image discriminator untouched") {
    Dataset ds = make_faces(6, 24, Split::kStudio);
    RunConfig cfg;
    cfg.steps = 3;
    cfg.batch = 4;
    cfg.seed = 9;
    ModelConfig mcfg = model_config_from(cfg);
    GroupingConfig gc = default_grouping();
    ParamStore<float> ps;
    init_stage1(ps, mcfg, cfg.seed);
    init_rsm_params(ps, mcfg, gc, cfg.seed);
    TensorMap before = snapshot(ps);
    TrainResult r = train_stage2_rsm(ds, cfg, ps, gc, "");
    REQUIRE_FALSE(r.nan_abort);
    REQUIRE_EQ(r.steps_done, 3);
    TensorMap after = snapshot(ps);
    for (const auto& [name, t] : after) {
        bool rsm = name.rfind("map.", 0) == 0 || name.rfind("sdisc.", 0) == 0;
        auto it = before.find(name);
        if (it == before.end()) continue;  // fresh optimizer state
        if (rsm) continue;
        CHECK_MESSAGE(it->second.data == t.data, name, " changed during mapping-net training");
    }
    CHECK(after.at("map.g0.l0_w").data != before.at("map.g0.l0_w").data);

    std::vector<double> fd = rsm_style_frechet(collect_style_bank(ds, cfg, ps, gc), ps, gc, mcfg,
                                               32, 5);
    REQUIRE_EQ(fd.size(), 5);
    for (double v : fd) CHECK_GE(v, 0.0);
    CHECK(fd == rsm_style_frechet(collect_style_bank(ds, cfg, ps, gc), ps, gc, mcfg, 32, 5));
}

TEST_CASE("sample_styles_into replaces exactly the requested class rows") {
    RunConfig cfg;
    ModelConfig mcfg = model_config_from(cfg);
    GroupingConfig gc = default_grouping();
    ParamStore<float> ps;
    init_rsm_params(ps, mcfg, gc, 31);
    Tape<float> tape;
    Tensor<float> base({1, mcfg.num_classes, mcfg.style_dim});
    Rng rng(32);
    for (auto& v : base.data) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    std::vector<std::vector<char>> valid(1, std::vector<char>(kNumClasses, 1));
    valid[0][kHair] = 0;
    StyleBatch<float> sb{tape.constant(base), valid};
    Rng zrng(33);
    StyleBatch<float> out = sample_styles_into(tape, ps, sb, {kHair}, gc, mcfg, zrng);
    REQUIRE_EQ(out.styles.dims(), base.dims);
    CHECK(out.valid[0][kHair]);  // sampling makes the region available
    int D = mcfg.style_dim;
    for (int c = 0; c < mcfg.num_classes; ++c) {
        bool changed = false;
        for (int d = 0; d < D; ++d) {
            std::size_t i = static_cast<std::size_t>(c) * D + d;
            changed |= (out.styles.val().data[i] != base.data[i]);
        }
        CHECK_EQ(changed, c == kHair);
    }
}

// --------------------------------------------------------------------------
// evaluation reports

TEST_CASE("eval reports are deterministic and mark unavailable metrics as null") {
    Dataset ds = make_faces(4, 41, Split::kStudio);
    RunConfig cfg;
    cfg.seed = 12;
    ModelConfig mcfg = model_config_from(cfg);
    ParamStore<float> gen;
    init_generator_params(gen, mcfg, cfg.seed);

    EvalReport r1 = run_eval(ds, cfg, gen, nullptr, 2, 4);
    EvalReport r2 = run_eval(ds, cfg, gen, nullptr, 2, 4);
    CHECK_EQ(eval_report_json(r1), eval_report_json(r2));
    CHECK_GT(r1.psnr_mean, 0.0);
    CHECK_FALSE(r1.hs_mean.has_value());
    CHECK_FALSE(r1.frechet.has_value());
    CHECK_FALSE(r1.mcsd.has_value());

    auto parsed = nlohmann::json::parse(eval_report_json(r1));
    CHECK(parsed.at("hs_mean").is_null());
    CHECK_EQ(parsed.at("psnr_mean").get<double>(), r1.psnr_mean);
    CHECK_EQ(parsed.at("seed").get<std::uint64_t>(), cfg.seed);

    // with mapping nets present the diversity numbers appear
    init_rsm_params(gen, mcfg, default_grouping(), cfg.seed);
    EvalReport r3 = run_eval(ds, cfg, gen, nullptr, 2, 4);
    CHECK(r3.mcsd.has_value());
    CHECK(r3.mocd.has_value());

    // and a trained harmony net fills in the remaining fields
    ParamStore<float> hs;
    init_harmony_params(hs, 3);
    EvalReport r4 = run_eval(ds, cfg, gen, &hs, 2, 4);
    CHECK(r4.hs_mean.has_value());
    CHECK(r4.frechet.has_value());
    CHECK_EQ(eval_report_json(r4), eval_report_json(run_eval(ds, cfg, gen, &hs, 2, 4)));

    std::vector<Image> recon = reconstruct_images(ds, cfg, gen, 3);
    REQUIRE_EQ(recon.size(), 3);
    CHECK_EQ(recon[0].height, cfg.image_size);
}
