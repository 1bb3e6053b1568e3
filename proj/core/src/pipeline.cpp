#include "rstm/pipeline.hpp"

#include <algorithm>

namespace rstm {

ModelConfig model_config_from(const RunConfig& rc) {
    ModelConfig cfg;
    cfg.image_size = rc.image_size;
    cfg.num_classes = rc.num_classes;
    cfg.style_dim = rc.style_dim;
    cfg.unified_res = rc.image_size / 4;
    cfg.ablate_softmax = rc.ablate_softmax;
    cfg.ablate_sa = rc.ablate_sa;
    return cfg;
}

void GroupingConfig::validate(int num_classes) const {
    std::vector<int> seen(static_cast<std::size_t>(num_classes), 0);
    for (const auto& g : groups)
        for (int c : g) {
            if (c < 0 || c >= num_classes)
                throw std::invalid_argument("grouping: class id out of range");
            ++seen[static_cast<std::size_t>(c)];
        }
    for (int c = 0; c < num_classes; ++c)
        if (seen[static_cast<std::size_t>(c)] != 1)
            throw std::invalid_argument("grouping: class " +
                                        class_names()[static_cast<std::size_t>(c)] +
                                        " must appear in exactly one group");
}

int GroupingConfig::group_of(int cls) const {
    for (std::size_t j = 0; j < groups.size(); ++j)
        for (int c : groups[j])
            if (c == cls) return static_cast<int>(j);
    throw std::invalid_argument("grouping: class not covered");
}

GroupingConfig default_grouping() {
    GroupingConfig gc;
    gc.groups = {{kBackground},
                 {kSkin, kNose},
                 {kHair},
                 {kLeftEye, kRightEye, kBrows},
                 {kMouth}};
    gc.validate(kNumClasses);
    return gc;
}

TensorF images_to_tensor(const std::vector<Image>& imgs) {
    int n = static_cast<int>(imgs.size());
    int h = imgs[0].height, w = imgs[0].width;
    TensorF out({n, 3, h, w});
    for (int i = 0; i < n; ++i)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                for (int c = 0; c < 3; ++c) out.at4(i, c, y, x) = imgs[static_cast<std::size_t>(i)].at(y, x, c);
    return out;
}

Image tensor_to_image(const TensorF& t, int n) {
    int h = t.dims[2], w = t.dims[3];
    Image img(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                img.at(y, x, c) = std::min(1.f, std::max(0.f, t.at4(n, c, y, x)));
    return img;
}

LabelMaps make_label_maps(const std::vector<SegMask>& masks, int res) {
    auto out = std::make_shared<std::vector<std::vector<int>>>();
    out->reserve(masks.size());
    for (const auto& m : masks) {
        SegMask r = (m.height == res && m.width == res) ? m : resize_mask_nearest(m, res, res);
        std::vector<int> lab(static_cast<std::size_t>(res) * res);
        for (std::size_t i = 0; i < lab.size(); ++i) lab[i] = r.labels[i];
        out->push_back(std::move(lab));
    }
    return out;
}

std::vector<std::vector<char>> validity_from_labels(const LabelMaps& labels, int num_classes) {
    std::vector<std::vector<char>> valid;
    valid.reserve(labels->size());
    for (const auto& lab : *labels) {
        std::vector<char> v(static_cast<std::size_t>(num_classes), 0);
        for (int l : lab) v[static_cast<std::size_t>(l)] = 1;
        valid.push_back(std::move(v));
    }
    return valid;
}

namespace {

TensorF& add_conv(ParamStore<float>& ps, const std::string& base, int cout, int cin, int k,
                  Rng& rng, bool spectral) {
    TensorF& w = ps.add(base + ".w", {cout, cin, k, k});
    init_kaiming(w, rng);
    ps.add(base + ".b", {cout});
    if (spectral) ps.add(base + ".w.u", {cout}, /*trainable=*/false) = TensorF({cout}, 1.f);
    return w;
}

void add_linear(ParamStore<float>& ps, const std::string& base, int dout, int din, Rng& rng,
                bool spectral) {
    TensorF& w = ps.add(base + "_w", {dout, din});
    init_kaiming(w, rng);
    ps.add(base + "_b", {dout});
    if (spectral) ps.add(base + "_w.u", {dout}, /*trainable=*/false) = TensorF({dout}, 1.f);
}

}  // namespace

void init_generator_params(ParamStore<float>& ps, const ModelConfig& cfg, std::uint64_t seed) {
    Rng rng(seed ^ 0x67656e65726174ull);
    int cin = 3;
    for (int i = 0; i < cfg.num_scales; ++i) {
        int cout = cfg.enc_channels[static_cast<std::size_t>(i)];
        add_conv(ps, "enc.c" + std::to_string(i), cout, cin, 3, rng, true);
        add_conv(ps, "enc.p" + std::to_string(i), cfg.unified_channels, cout, 1, rng, true);
        cin = cout;
    }
    ps.add("enc.fusion_a", {cfg.num_scales});  // softmax of zeros = uniform
    add_linear(ps, "enc.style", cfg.style_dim, cfg.unified_channels, rng, false);

    if (!cfg.ablate_sa) {
        int d = cfg.style_dim;
        TensorF& wq = ps.add("mrsa.wq", {d, d});
        init_normal(wq, rng, 1.0 / std::sqrt(static_cast<double>(d)));
        TensorF& wk = ps.add("mrsa.wk", {d, d});
        init_normal(wk, rng, 1.0 / std::sqrt(static_cast<double>(d)));
        TensorF& wv = ps.add("mrsa.wv", {d, d});
        init_normal(wv, rng, 1.0 / std::sqrt(static_cast<double>(d)));
        ps.add("mrsa.alpha", {1});  // starts at 0: early training is plain swapping
    }

    TensorF& cst = ps.add("dec.const", {1, cfg.dec_channels[0], cfg.dec_start_res,
                                        cfg.dec_start_res});
    init_normal(cst, rng, 0.5);
    int c = cfg.dec_channels[0];
    for (int blk = 0; blk < 4; ++blk) {
        int cnext = blk < 3 ? cfg.dec_channels[static_cast<std::size_t>(blk + 1)]
                            : cfg.dec_channels[3];
        std::string base = "dec.b" + std::to_string(blk);
        add_conv(ps, base + ".style", 2 * c, cfg.style_dim, 1, rng, false);
        add_conv(ps, base + ".mask", 2 * c, cfg.num_classes, 3, rng, false);
        ps.add(base + ".blend_g", {c});
        ps.add(base + ".blend_b", {c});
        add_conv(ps, base + ".conv", cnext, c, 3, rng, false);
        c = cnext;
    }
    add_conv(ps, "dec.out", 3, c, 3, rng, false);
}

void init_discriminator_params(ParamStore<float>& ps, const ModelConfig& cfg, std::uint64_t seed) {
    Rng rng(seed ^ 0x646973637269ull);
    const int chans[4] = {32, 64, 128, 256};
    for (int s = 0; s < 2; ++s) {
        int cin = 3 + cfg.num_classes;
        for (int l = 0; l < 4; ++l) {
            add_conv(ps, "disc.s" + std::to_string(s) + ".c" + std::to_string(l), chans[l], cin, 3,
                     rng, true);
            cin = chans[l];
        }
        add_conv(ps, "disc.s" + std::to_string(s) + ".out", 1, cin, 3, rng, true);
    }
}

void init_perceptual_params(ParamStore<float>& ps, const ModelConfig& cfg) {
    (void)cfg;
    Rng rng(0xfacefeedcafeull);  // fixed: the net is frozen by construction
    const int chans[5] = {16, 32, 32, 64, 64};
    int cin = 3;
    for (int l = 0; l < 5; ++l) {
        std::string base = "perc.c" + std::to_string(l);
        TensorF& w = ps.add(base + ".w", {chans[l], cin, 3, 3}, /*trainable=*/false);
        init_kaiming(w, rng);
        TensorF& b = ps.add(base + ".b", {chans[l]}, /*trainable=*/false);
        init_normal(b, rng, 0.1);
        cin = chans[l];
    }
}

void init_harmony_params(ParamStore<float>& ps, std::uint64_t seed) {
    Rng rng(seed ^ 0x6861726d6f6e79ull);
    const int chans[4] = {16, 32, 64, 64};
    int cin = 4;
    for (int l = 0; l < 4; ++l) {
        add_conv(ps, "hs.c" + std::to_string(l), chans[l], cin, 3, rng, false);
        cin = chans[l];
    }
    add_linear(ps, "hs.fc", 1, 64, rng, false);
}

void init_rsm_params(ParamStore<float>& ps, const ModelConfig& cfg, const GroupingConfig& gc,
                     std::uint64_t seed) {
    Rng rng(seed ^ 0x72736d6d6170ull);
    for (int j = 0; j < gc.num_groups(); ++j) {
        int out = static_cast<int>(gc.groups[static_cast<std::size_t>(j)].size()) * cfg.style_dim;
        std::string mb = "map.g" + std::to_string(j);
        add_linear(ps, mb + ".l0", cfg.map_hidden, cfg.z_dim, rng, false);
        add_linear(ps, mb + ".l1", cfg.map_hidden, cfg.map_hidden, rng, false);
        add_linear(ps, mb + ".l2", out, cfg.map_hidden, rng, false);
        std::string db = "sdisc.g" + std::to_string(j);
        add_linear(ps, db + ".l0", 64, out, rng, true);
        add_linear(ps, db + ".l1", 64, 64, rng, true);
        add_linear(ps, db + ".l2", 1, 64, rng, true);
    }
}

}  // namespace rstm
