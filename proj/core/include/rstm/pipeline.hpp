#pragma once

#include <array>
#include <set>
#include <string>
#include <vector>

#include "rstm/config.hpp"
#include "rstm/gradcheck.hpp"
#include "rstm/image.hpp"
#include "rstm/ops.hpp"
#include "rstm/params.hpp"
#include "rstm/toyfaces.hpp"

// Model definition: multi-scale encoder with softmax-weighted fusion,
// region-wise style pooling, multi-region style attention, mapping nets,
// SEAN-style decoder, patch discriminator, fixed-feature perceptual net and
// the harmony classifier. Forward passes are templated so the verification
// harness can rerun them in double precision.

namespace rstm {

struct ModelConfig {
    int image_size = 64;
    int num_classes = kNumClasses;
    int style_dim = 64;

    int num_scales = 4;
    std::array<int, 4> enc_channels{32, 64, 128, 128};
    int unified_channels = 128;
    int unified_res = 16;  // image_size / 4

    std::array<int, 4> dec_channels{128, 128, 64, 32};
    int dec_start_res = 4;

    int z_dim = 16;
    int map_hidden = 64;

    bool ablate_softmax = false;
    bool ablate_sa = false;
};

ModelConfig model_config_from(const RunConfig& rc);

struct GroupingConfig {
    std::vector<std::vector<int>> groups;

    int num_groups() const { return static_cast<int>(groups.size()); }
    void validate(int num_classes) const;  // disjoint cover of all classes
    int group_of(int cls) const;
};

GroupingConfig default_grouping();

// ---------------------------------------------------------------------------
// batch plumbing (float only)

TensorF images_to_tensor(const std::vector<Image>& imgs);
Image tensor_to_image(const TensorF& t, int n);  // clamped to [0,1]
LabelMaps make_label_maps(const std::vector<SegMask>& masks, int res);
std::vector<std::vector<char>> validity_from_labels(const LabelMaps& labels, int num_classes);

// ---------------------------------------------------------------------------
// parameter initialization (always float; cast<double>() for verification)

void init_generator_params(ParamStore<float>& ps, const ModelConfig& cfg, std::uint64_t seed);
void init_discriminator_params(ParamStore<float>& ps, const ModelConfig& cfg, std::uint64_t seed);
void init_perceptual_params(ParamStore<float>& ps, const ModelConfig& cfg);  // fixed seed, frozen
void init_harmony_params(ParamStore<float>& ps, std::uint64_t seed);
void init_rsm_params(ParamStore<float>& ps, const ModelConfig& cfg, const GroupingConfig& gc,
                     std::uint64_t seed);

// ---------------------------------------------------------------------------
// styles

template <typename T>
struct StyleBatch {
    Var<T> styles;  // [N, C, D]; invalid rows are exactly zero
    std::vector<std::vector<char>> valid;
};

// Parameter leaf or frozen constant, depending on whether this pass trains.
template <typename T>
Var<T> pvar(Tape<T>& tape, ParamStore<T>& ps, const std::string& name, bool trainable) {
    Tensor<T>& t = ps.get(name);
    return trainable ? tape.param(t) : tape.constant(t);
}

// Conv weight wrapped in spectral normalization; u state lives at name+".u".
template <typename T>
Var<T> sn_pvar(Tape<T>& tape, ParamStore<T>& ps, const std::string& name, bool trainable,
               bool update_sn) {
    Var<T> w = pvar(tape, ps, name, trainable);
    return spectral_norm_var(tape, w, ps.get(name + ".u"), update_sn);
}

template <typename T>
Tensor<T> onehot_tensor(const LabelMaps& labels, int res, int num_classes) {
    int n = static_cast<int>(labels->size());
    Tensor<T> out({n, num_classes, res, res});
    for (int i = 0; i < n; ++i) {
        const auto& lab = (*labels)[static_cast<std::size_t>(i)];
        for (int k = 0; k < res * res; ++k)
            out.data[((static_cast<std::size_t>(i) * num_classes +
                       lab[static_cast<std::size_t>(k)]) *
                          res +
                      k / res) *
                         res +
                     k % res] = T(1);
    }
    return out;
}

// ---------------------------------------------------------------------------
// encoder

// stride-2 conv stack; scale i has spatial dims input/2^(i+1)
template <typename T>
std::vector<Var<T>> encode_pyramid(Tape<T>& tape, ParamStore<T>& ps, Var<T> x,
                                   const ModelConfig& cfg, bool trainable, bool update_sn) {
    std::vector<Var<T>> feats;
    Var<T> h = x;
    for (int i = 0; i < cfg.num_scales; ++i) {
        std::string base = "enc.c" + std::to_string(i);
        Var<T> w = sn_pvar(tape, ps, base + ".w", trainable, update_sn);
        Var<T> b = pvar(tape, ps, base + ".b", trainable);
        h = leaky_relu(conv2d(h, w, b, 2, 1));
        feats.push_back(h);
    }
    return feats;
}

// F = sum_i alpha_i * project_i(resize(F_i)); alpha = softmax(a) unless the
// softmax ablation is on, in which case the raw weights are used directly.
template <typename T>
Var<T> fuse_multiscale(Tape<T>& tape, ParamStore<T>& ps, const std::vector<Var<T>>& pyramid,
                       const ModelConfig& cfg, bool trainable, bool update_sn) {
    Var<T> a = pvar(tape, ps, "enc.fusion_a", trainable);
    int K = static_cast<int>(pyramid.size());
    Var<T> alpha = a;
    if (!cfg.ablate_softmax) {
        alpha = reshape(softmax_rows(reshape(a, {1, K})), {K});
    }
    Var<T> acc{nullptr, -1};
    for (int i = 0; i < K; ++i) {
        std::string base = "enc.p" + std::to_string(i);
        Var<T> w = sn_pvar(tape, ps, base + ".w", trainable, update_sn);
        Var<T> b = pvar(tape, ps, base + ".b", trainable);
        Var<T> fi = resize(pyramid[static_cast<std::size_t>(i)], cfg.unified_res, cfg.unified_res,
                           ResizeMode::kBilinear);
        Var<T> pi = conv2d(fi, w, b, 1, 0);
        Var<T> term = mul_scalar(pi, slice_axis(alpha, 0, i, i + 1));
        acc = (i == 0) ? term : add(acc, term);
    }
    return acc;
}

// pooled region means mapped to style_dim by a shared linear layer; invalid
// rows (class absent at the pooled resolution) are forced to exactly zero
template <typename T>
StyleBatch<T> region_styles(Tape<T>& tape, ParamStore<T>& ps, Var<T> fused,
                            const LabelMaps& labels, const ModelConfig& cfg, bool trainable) {
    int N = fused.dims()[0];
    int C = cfg.num_classes;
    Var<T> pooled = region_avg_pool(fused, labels, C);  // [N,C,Cf]
    int Cf = pooled.dims()[2];
    Var<T> flat = reshape(pooled, {N * C, Cf});
    Var<T> w = pvar(tape, ps, "enc.style_w", trainable);
    Var<T> b = pvar(tape, ps, "enc.style_b", trainable);
    Var<T> mapped = reshape(linear(flat, w, b), {N, C, cfg.style_dim});
    auto valid = validity_from_labels(labels, C);
    std::vector<T> rowmask(static_cast<std::size_t>(N) * C);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            rowmask[static_cast<std::size_t>(n) * C + c] =
                valid[static_cast<std::size_t>(n)][static_cast<std::size_t>(c)] ? T(1) : T(0);
    StyleBatch<T> out{scale_rows_const(mapped, std::move(rowmask)), std::move(valid)};
    return out;
}

template <typename T>
StyleBatch<T> encode_styles(Tape<T>& tape, ParamStore<T>& ps, Var<T> images,
                            const std::vector<SegMask>& masks, const ModelConfig& cfg,
                            bool trainable, bool update_sn) {
    auto pyr = encode_pyramid(tape, ps, images, cfg, trainable, update_sn);
    Var<T> fused = fuse_multiscale(tape, ps, pyr, cfg, trainable, update_sn);
    auto labels = make_label_maps(masks, cfg.unified_res);
    return region_styles(tape, ps, fused, labels, cfg, trainable);
}

// ---------------------------------------------------------------------------
// MRSA

// rows in `regions` come from s_r, all others from s_t (exact selection)
template <typename T>
StyleBatch<T> compose_swapped(const StyleBatch<T>& s_t, const StyleBatch<T>& s_r,
                              const std::set<int>& regions) {
    require_shape(s_t.styles.dims() == s_r.styles.dims(), "compose_swapped", s_t.styles.dims(),
                  s_r.styles.dims());
    int N = s_t.styles.dims()[0], C = s_t.styles.dims()[1];
    for (int cls : regions) {
        if (cls < 0 || cls >= C) throw std::invalid_argument("compose_swapped: bad class id");
        for (int n = 0; n < N; ++n)
            if (!s_r.valid[static_cast<std::size_t>(n)][static_cast<std::size_t>(cls)])
                throw std::invalid_argument(
                    "cannot transfer style of region absent in reference: " +
                    class_names()[static_cast<std::size_t>(cls)]);
    }
    std::vector<T> from_r(static_cast<std::size_t>(N) * C, T(0));
    std::vector<T> from_t(static_cast<std::size_t>(N) * C, T(1));
    for (int n = 0; n < N; ++n)
        for (int cls : regions) {
            from_r[static_cast<std::size_t>(n) * C + cls] = T(1);
            from_t[static_cast<std::size_t>(n) * C + cls] = T(0);
        }
    StyleBatch<T> out;
    out.styles = add(scale_rows_const(s_r.styles, std::move(from_r)),
                     scale_rows_const(s_t.styles, std::move(from_t)));
    out.valid = s_t.valid;
    for (int n = 0; n < N; ++n)
        for (int cls : regions)
            out.valid[static_cast<std::size_t>(n)][static_cast<std::size_t>(cls)] =
                s_r.valid[static_cast<std::size_t>(n)][static_cast<std::size_t>(cls)];
    return out;
}

// s'_t = s'_r + alpha * softmax(Q K^T) V, rows/cols of absent regions masked
// out; with the ablation on this is the identity on s'_r
template <typename T>
StyleBatch<T> mrsa_attend(Tape<T>& tape, ParamStore<T>& ps, const StyleBatch<T>& sr_prime,
                          const StyleBatch<T>& s_t, const ModelConfig& cfg, bool trainable) {
    if (cfg.ablate_sa) return sr_prime;
    int N = sr_prime.styles.dims()[0], C = sr_prime.styles.dims()[1], D = cfg.style_dim;
    Var<T> wq = pvar(tape, ps, "mrsa.wq", trainable);
    Var<T> wk = pvar(tape, ps, "mrsa.wk", trainable);
    Var<T> wv = pvar(tape, ps, "mrsa.wv", trainable);
    Var<T> alpha = pvar(tape, ps, "mrsa.alpha", trainable);
    Var<T> srp_flat = reshape(sr_prime.styles, {N * C, D});
    Var<T> st_flat = reshape(s_t.styles, {N * C, D});
    Var<T> q = reshape(matmul(srp_flat, wq, false, true), {N, C, D});
    Var<T> k = reshape(matmul(st_flat, wk, false, true), {N, C, D});
    Var<T> v = reshape(matmul(st_flat, wv, false, true), {N, C, D});
    Var<T> logits = bmm(q, k, /*tb=*/true);  // [N,C,C], no 1/sqrt(D) scaling
    Tensor<T> keymask({N, C, C});
    for (int n = 0; n < N; ++n)
        for (int r = 0; r < C; ++r)
            for (int c = 0; c < C; ++c)
                keymask.data[(static_cast<std::size_t>(n) * C + r) * C + c] =
                    s_t.valid[static_cast<std::size_t>(n)][static_cast<std::size_t>(c)]
                        ? T(0)
                        : T(-1e30);
    logits = add(logits, tape.constant(std::move(keymask)));
    Var<T> attn = reshape(softmax_rows(reshape(logits, {N * C, C})), {N, C, C});
    Var<T> correction = bmm(attn, v);
    std::vector<T> rowmask(static_cast<std::size_t>(N) * C);
    for (int n = 0; n < N; ++n)
        for (int r = 0; r < C; ++r)
            rowmask[static_cast<std::size_t>(n) * C + r] =
                sr_prime.valid[static_cast<std::size_t>(n)][static_cast<std::size_t>(r)] ? T(1)
                                                                                         : T(0);
    correction = scale_rows_const(correction, std::move(rowmask));
    StyleBatch<T> out;
    out.styles = add(sr_prime.styles, mul_scalar(correction, alpha));
    out.valid = sr_prime.valid;
    return out;
}

// ---------------------------------------------------------------------------
// decoder

// modulate -> 3x3 conv -> leaky-relu (upsampling happens in decode())
template <typename T>
Var<T> sean_block(Tape<T>& tape, ParamStore<T>& ps, const std::string& base, Var<T> x,
                  Var<T> style_map, Var<T> onehot, bool trainable) {
    int C = x.dims()[1];
    Var<T> normed = instance_norm(x);
    Var<T> sw = pvar(tape, ps, base + ".style.w", trainable);
    Var<T> sb = pvar(tape, ps, base + ".style.b", trainable);
    Var<T> smod = conv2d(style_map, sw, sb, 1, 0);  // [N,2C,r,r]
    Var<T> mw = pvar(tape, ps, base + ".mask.w", trainable);
    Var<T> mb = pvar(tape, ps, base + ".mask.b", trainable);
    Var<T> mmod = conv2d(onehot, mw, mb, 1, 1);
    Var<T> gs = slice_axis(smod, 1, 0, C);
    Var<T> bs = slice_axis(smod, 1, C, 2 * C);
    Var<T> gm = slice_axis(mmod, 1, 0, C);
    Var<T> bm = slice_axis(mmod, 1, C, 2 * C);
    Var<T> wg = sigmoid(pvar(tape, ps, base + ".blend_g", trainable));
    Var<T> wb = sigmoid(pvar(tape, ps, base + ".blend_b", trainable));
    Var<T> wg1 = add_const(scale(wg, T(-1)), T(1));
    Var<T> wb1 = add_const(scale(wb, T(-1)), T(1));
    Var<T> gamma = add(scale_channels(gs, wg), scale_channels(gm, wg1));
    Var<T> beta = add(scale_channels(bs, wb), scale_channels(bm, wb1));
    Var<T> h = add(mul(gamma, normed), beta);
    Var<T> cw = pvar(tape, ps, base + ".conv.w", trainable);
    Var<T> cb = pvar(tape, ps, base + ".conv.b", trainable);
    return leaky_relu(conv2d(h, cw, cb, 1, 1));
}

// full decode pass: learned 4x4 constant -> 4 SEAN blocks with 2x nearest
// upsampling -> 3-channel conv, tanh mapped to [0,1]
template <typename T>
Var<T> decode(Tape<T>& tape, ParamStore<T>& ps, const StyleBatch<T>& styles,
              const std::vector<SegMask>& masks, const ModelConfig& cfg, bool trainable) {
    int N = styles.styles.dims()[0];
    Var<T> x = repeat_batch(pvar(tape, ps, "dec.const", trainable), N);
    int res = cfg.dec_start_res;
    for (int blk = 0; blk < 4; ++blk) {
        auto labels = make_label_maps(masks, res);
        Var<T> style_map = broadcast_style(styles.styles, labels, res, res);
        Var<T> onehot = tape.constant(onehot_tensor<T>(labels, res, cfg.num_classes));
        x = sean_block(tape, ps, "dec.b" + std::to_string(blk), x, style_map, onehot, trainable);
        if (res < cfg.image_size) {
            res *= 2;
            x = resize(x, res, res, ResizeMode::kNearest);
        }
    }
    Var<T> ow = pvar(tape, ps, "dec.out.w", trainable);
    Var<T> ob = pvar(tape, ps, "dec.out.b", trainable);
    Var<T> y = tanh_(conv2d(x, ow, ob, 1, 1));
    return add_const(scale(y, T(0.5)), T(0.5));
}

// encoder -> (optional swap) -> MRSA -> decoder; reconstruction is the
// regions = {} case of the same code path
template <typename T>
Var<T> generate(Tape<T>& tape, ParamStore<T>& ps, Var<T> target_images,
                const std::vector<SegMask>& target_masks, const ModelConfig& cfg, bool trainable,
                bool update_sn) {
    StyleBatch<T> s_t = encode_styles(tape, ps, target_images, target_masks, cfg, trainable,
                                      update_sn);
    StyleBatch<T> srp = compose_swapped(s_t, s_t, {});
    StyleBatch<T> stp = mrsa_attend(tape, ps, srp, s_t, cfg, trainable);
    return decode(tape, ps, stp, target_masks, cfg, trainable);
}

// ---------------------------------------------------------------------------
// image discriminator (two-scale patch, hinge-trained)

template <typename T>
struct DiscOut {
    std::vector<Var<T>> logits;              // per scale, [N,1,h,w]
    std::vector<std::vector<Var<T>>> feats;  // per scale, per layer
};

template <typename T>
DiscOut<T> discriminator(Tape<T>& tape, ParamStore<T>& ps, Var<T> img,
                         const std::vector<SegMask>& masks, const ModelConfig& cfg, bool trainable,
                         bool update_sn) {
    DiscOut<T> out;
    int full = cfg.image_size;
    for (int s = 0; s < 2; ++s) {
        int res = s == 0 ? full : full / 2;
        Var<T> x = s == 0 ? img : resize(img, res, res, ResizeMode::kBilinear);
        auto labels = make_label_maps(masks, res);
        Var<T> onehot = tape.constant(onehot_tensor<T>(labels, res, cfg.num_classes));
        Var<T> h = concat<T>({x, onehot}, 1);
        std::vector<Var<T>> feats;
        for (int l = 0; l < 4; ++l) {
            std::string base = "disc.s" + std::to_string(s) + ".c" + std::to_string(l);
            Var<T> w = sn_pvar(tape, ps, base + ".w", trainable, update_sn);
            Var<T> b = pvar(tape, ps, base + ".b", trainable);
            h = leaky_relu(conv2d(h, w, b, 2, 1));
            feats.push_back(h);
        }
        std::string base = "disc.s" + std::to_string(s) + ".out";
        Var<T> w = sn_pvar(tape, ps, base + ".w", trainable, update_sn);
        Var<T> b = pvar(tape, ps, base + ".b", trainable);
        out.logits.push_back(conv2d(h, w, b, 1, 1));
        out.feats.push_back(std::move(feats));
    }
    return out;
}

// ---------------------------------------------------------------------------
// losses

// L_D = mean(relu(1-D(real))) + mean(relu(1+D(fake))), averaged over scales
template <typename T>
Var<T> hinge_loss_d(const DiscOut<T>& real, const DiscOut<T>& fake) {
    Var<T> acc{nullptr, -1};
    int S = static_cast<int>(real.logits.size());
    for (int s = 0; s < S; ++s) {
        Var<T> lr = mean_all(relu(add_const(scale(real.logits[static_cast<std::size_t>(s)], T(-1)),
                                            T(1))));
        Var<T> lf = mean_all(relu(add_const(fake.logits[static_cast<std::size_t>(s)], T(1))));
        Var<T> term = add(lr, lf);
        acc = s == 0 ? term : add(acc, term);
    }
    return scale(acc, T(1) / static_cast<T>(S));
}

// L_G_adv = -mean(D(fake)), averaged over scales
template <typename T>
Var<T> hinge_loss_g(const DiscOut<T>& fake) {
    Var<T> acc{nullptr, -1};
    int S = static_cast<int>(fake.logits.size());
    for (int s = 0; s < S; ++s) {
        Var<T> term = scale(mean_all(fake.logits[static_cast<std::size_t>(s)]), T(-1));
        acc = s == 0 ? term : add(acc, term);
    }
    return scale(acc, T(1) / static_cast<T>(S));
}

// mean L1 over discriminator features, averaged over layers and scales
template <typename T>
Var<T> feature_matching_loss(const DiscOut<T>& real, const DiscOut<T>& fake) {
    Var<T> acc{nullptr, -1};
    int terms = 0;
    for (std::size_t s = 0; s < real.feats.size(); ++s)
        for (std::size_t l = 0; l < real.feats[s].size(); ++l) {
            Var<T> term = mean_all(abs_(sub(real.feats[s][l], fake.feats[s][l])));
            acc = terms == 0 ? term : add(acc, term);
            ++terms;
        }
    return scale(acc, T(1) / static_cast<T>(terms));
}

// L1 over the stages of a fixed randomly-initialized conv net (stand-in for
// a pretrained feature extractor); stage weights 1/32,1/16,1/8,1/4,1
template <typename T>
Var<T> perceptual_loss(Tape<T>& tape, ParamStore<T>& ps, Var<T> a, Var<T> b) {
    static const T stage_w[5] = {T(1) / 32, T(1) / 16, T(1) / 8, T(1) / 4, T(1)};
    Var<T> ha = a, hb = b;
    Var<T> acc{nullptr, -1};
    for (int l = 0; l < 5; ++l) {
        std::string base = "perc.c" + std::to_string(l);
        Var<T> w = pvar(tape, ps, base + ".w", false);
        Var<T> bias = pvar(tape, ps, base + ".b", false);
        ha = leaky_relu(conv2d(ha, w, bias, 2, 1));
        hb = leaky_relu(conv2d(hb, w, bias, 2, 1));
        Var<T> term = scale(mean_all(abs_(sub(ha, hb))), stage_w[l]);
        acc = l == 0 ? term : add(acc, term);
    }
    return acc;
}

// ---------------------------------------------------------------------------
// RSM: mapping nets and style discriminators

template <typename T>
Var<T> mapping_forward(Tape<T>& tape, ParamStore<T>& ps, int group, Var<T> z, bool trainable) {
    std::string base = "map.g" + std::to_string(group);
    Var<T> h = leaky_relu(linear(z, pvar(tape, ps, base + ".l0_w", trainable),
                                 pvar(tape, ps, base + ".l0_b", trainable)));
    h = leaky_relu(linear(h, pvar(tape, ps, base + ".l1_w", trainable),
                          pvar(tape, ps, base + ".l1_b", trainable)));
    return linear(h, pvar(tape, ps, base + ".l2_w", trainable),
                  pvar(tape, ps, base + ".l2_b", trainable));
}

template <typename T>
Var<T> style_disc_forward(Tape<T>& tape, ParamStore<T>& ps, int group, Var<T> x, bool trainable,
                          bool update_sn) {
    std::string base = "sdisc.g" + std::to_string(group);
    auto lin = [&](Var<T> in, const std::string& layer) {
        Var<T> w = sn_pvar(tape, ps, base + "." + layer + "_w", trainable, update_sn);
        Var<T> b = pvar(tape, ps, base + "." + layer + "_b", trainable);
        return linear(in, w, b);
    };
    Var<T> h = leaky_relu(lin(x, "l0"));
    h = leaky_relu(lin(h, "l1"));
    return lin(h, "l2");  // [B,1]
}

// non-saturating GAN losses in style space
template <typename T>
Var<T> nsgan_loss_d(Var<T> real_logits, Var<T> fake_logits) {
    return add(mean_all(softplus(scale(real_logits, T(-1)))), mean_all(softplus(fake_logits)));
}

template <typename T>
Var<T> nsgan_loss_g(Var<T> fake_logits) {
    return mean_all(softplus(scale(fake_logits, T(-1))));
}

// ---------------------------------------------------------------------------
// harmony classifier

template <typename T>
struct HarmonyOut {
    Var<T> logits;    // [N,1]
    Var<T> features;  // [N,64] penultimate layer (global average pool)
};

template <typename T>
HarmonyOut<T> harmony_forward(Tape<T>& tape, ParamStore<T>& ps, Var<T> x4, bool trainable) {
    Var<T> h = x4;  // [N,4,H,W]
    for (int l = 0; l < 4; ++l) {
        std::string base = "hs.c" + std::to_string(l);
        h = leaky_relu(conv2d(h, pvar(tape, ps, base + ".w", trainable),
                              pvar(tape, ps, base + ".b", trainable), 2, 1));
    }
    Var<T> feat = mean_hw(h);  // [N,64]
    Var<T> logits = linear(feat, pvar(tape, ps, "hs.fc_w", trainable),
                           pvar(tape, ps, "hs.fc_b", trainable));
    return {logits, feat};
}

}  // namespace rstm
