#include "rstm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "rstm/pipeline.hpp"

namespace rstm {

double psnr(const Image& a, const Image& b) {
    if (a.height != b.height || a.width != b.width)
        throw std::invalid_argument("psnr: dimension mismatch");
    double mse = 0;
    for (std::size_t i = 0; i < a.pixels.size(); ++i) {
        double d = static_cast<double>(a.pixels[i]) - b.pixels[i];
        mse += d * d;
    }
    mse /= static_cast<double>(a.pixels.size());
    if (mse <= 0) return 99.0;
    return std::min(99.0, 10.0 * std::log10(1.0 / mse));
}

FeatureStats feature_stats(const std::vector<std::vector<float>>& features) {
    if (features.empty()) throw std::invalid_argument("feature_stats: empty set");
    std::size_t dim = features[0].size();
    FeatureStats st;
    st.mu.assign(dim, 0.0);
    st.var.assign(dim, 0.0);
    for (const auto& f : features)
        for (std::size_t d = 0; d < dim; ++d) st.mu[d] += f[d];
    for (auto& m : st.mu) m /= static_cast<double>(features.size());
    for (const auto& f : features)
        for (std::size_t d = 0; d < dim; ++d) {
            double dv = f[d] - st.mu[d];
            st.var[d] += dv * dv;
        }
    for (auto& v : st.var) v /= static_cast<double>(features.size());
    return st;
}

double frechet_distance(const FeatureStats& a, const FeatureStats& b) {
    if (a.mu.size() != b.mu.size())
        throw std::invalid_argument("frechet_distance: dimension mismatch");
    double dist = 0;
    for (std::size_t d = 0; d < a.mu.size(); ++d) {
        double dm = a.mu[d] - b.mu[d];
        dist += dm * dm + a.var[d] + b.var[d] - 2.0 * std::sqrt(a.var[d]) * std::sqrt(b.var[d]);
    }
    return dist;
}

DiversityResult mcsd_mocd(const std::vector<Image>& samples,
                          const std::vector<char>& region_mask) {
    if (samples.size() < 2) throw std::invalid_argument("mcsd_mocd: need at least 2 samples");
    std::size_t hw = static_cast<std::size_t>(samples[0].height) * samples[0].width;
    if (region_mask.size() != hw) throw std::invalid_argument("mcsd_mocd: mask size mismatch");
    long nin = std::count(region_mask.begin(), region_mask.end(), static_cast<char>(1));
    long nout = static_cast<long>(hw) - nin;
    double in_sum = 0, out_sum = 0;
    long pairs = 0;
    for (std::size_t i = 0; i < samples.size(); ++i)
        for (std::size_t j = i + 1; j < samples.size(); ++j) {
            double di = 0, dout = 0;
            for (std::size_t p = 0; p < hw; ++p) {
                double diff = 0;
                for (int c = 0; c < 3; ++c)
                    diff += std::abs(static_cast<double>(samples[i].pixels[p * 3 + c]) -
                                     samples[j].pixels[p * 3 + c]);
                diff /= 3.0;
                if (region_mask[p]) di += diff;
                else dout += diff;
            }
            if (nin > 0) in_sum += di / static_cast<double>(nin);
            if (nout > 0) out_sum += dout / static_cast<double>(nout);
            ++pairs;
        }
    DiversityResult r;
    if (nin > 0) r.mcsd = in_sum / static_cast<double>(pairs);
    if (nout > 0) r.mocd = out_sum / static_cast<double>(pairs);
    return r;
}

// ---------------------------------------------------------------------------

SegMask class_fg_mask(const SegMask& seg, int cls) {
    SegMask fg(seg.height, seg.width);
    for (std::size_t i = 0; i < seg.labels.size(); ++i)
        fg.labels[i] = seg.labels[i] == cls ? 1 : 0;
    return fg;
}

namespace {

TensorF pack_rgba(const std::vector<const Image*>& imgs, const std::vector<const SegMask*>& fgs) {
    int n = static_cast<int>(imgs.size());
    int h = imgs[0]->height, w = imgs[0]->width;
    TensorF out({n, 4, h, w});
    for (int i = 0; i < n; ++i)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                for (int c = 0; c < 3; ++c)
                    out.at4(i, c, y, x) = imgs[static_cast<std::size_t>(i)]->at(y, x, c);
                out.at4(i, 3, y, x) =
                    fgs[static_cast<std::size_t>(i)]->at(y, x) ? 1.f : 0.f;
            }
    return out;
}

struct Sample {
    const Image* img;
    const SegMask* fg;
    float label;  // 1 = real
};

double auc_from_scores(const std::vector<std::pair<double, float>>& scored) {
    // rank-sum AUC; ties get average rank
    std::vector<std::pair<double, float>> s = scored;
    std::sort(s.begin(), s.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    double pos_ranks = 0;
    long npos = 0, nneg = 0;
    std::size_t i = 0;
    while (i < s.size()) {
        std::size_t j = i;
        while (j < s.size() && s[j].first == s[i].first) ++j;
        double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
        for (std::size_t k = i; k < j; ++k)
            if (s[k].second > 0.5f) pos_ranks += avg_rank;
        i = j;
    }
    for (const auto& [sc, lab] : s)
        (lab > 0.5f ? npos : nneg)++;
    if (npos == 0 || nneg == 0) throw std::invalid_argument("AUC: degenerate single-class input");
    return (pos_ranks - 0.5 * npos * (npos + 1)) / (static_cast<double>(npos) * nneg);
}

}  // namespace

HarmonyTrainResult train_harmony(ParamStore<float>& ps, const std::vector<Image>& reals,
                                 const std::vector<SegMask>& real_masks,
                                 const std::vector<Image>& composites,
                                 const std::vector<SegMask>& composite_fg,
                                 const HarmonyTrainConfig& cfg) {
    if (reals.empty() || composites.empty())
        throw std::invalid_argument("train_harmony: degenerate single-class input");
    Rng rng(cfg.seed ^ 0x68735f747261696eull);
    // real samples get a random class region as their fg channel
    std::vector<SegMask> real_fg;
    real_fg.reserve(reals.size());
    for (const auto& m : real_masks)
        real_fg.push_back(class_fg_mask(m, 1 + static_cast<int>(rng.below(kNumClasses - 1))));

    std::vector<Sample> all;
    for (std::size_t i = 0; i < reals.size(); ++i)
        all.push_back({&reals[i], &real_fg[i], 1.f});
    for (std::size_t i = 0; i < composites.size(); ++i)
        all.push_back({&composites[i], &composite_fg[i], 0.f});
    // deterministic shuffle, then split off the holdout
    for (std::size_t i = all.size(); i > 1; --i)
        std::swap(all[i - 1], all[static_cast<std::size_t>(rng.below(i))]);
    std::size_t holdout = static_cast<std::size_t>(
        static_cast<double>(all.size()) * cfg.holdout_fraction);
    std::vector<Sample> test(all.end() - static_cast<std::ptrdiff_t>(holdout), all.end());
    std::vector<Sample> train(all.begin(), all.end() - static_cast<std::ptrdiff_t>(holdout));

    std::vector<float> train_labels;
    for (const auto& s : train) train_labels.push_back(s.label);
    if (cfg.shuffle_labels)
        for (std::size_t i = train_labels.size(); i > 1; --i)
            std::swap(train_labels[i - 1], train_labels[static_cast<std::size_t>(rng.below(i))]);

    HarmonyTrainResult res;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<std::size_t> order(train.size());
        std::iota(order.begin(), order.end(), 0);
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[static_cast<std::size_t>(rng.below(i))]);
        for (std::size_t start = 0; start + cfg.batch <= order.size();
             start += static_cast<std::size_t>(cfg.batch)) {
            std::vector<const Image*> imgs;
            std::vector<const SegMask*> fgs;
            std::vector<float> labels;
            for (int k = 0; k < cfg.batch; ++k) {
                std::size_t idx = order[start + static_cast<std::size_t>(k)];
                imgs.push_back(train[idx].img);
                fgs.push_back(train[idx].fg);
                labels.push_back(train_labels[idx]);
            }
            ps.zero_grads();
            Tape<float> tape;
            Var<float> x = tape.constant(pack_rgba(imgs, fgs));
            auto out = harmony_forward(tape, ps, x, /*trainable=*/true);
            // BCE: softplus(-logit) for positives, softplus(logit) for negatives
            std::vector<float> sign(labels.size());
            for (std::size_t i = 0; i < labels.size(); ++i)
                sign[i] = labels[i] > 0.5f ? -1.f : 1.f;
            Tensor<float> st({static_cast<int>(labels.size()), 1});
            st.data = sign;
            Var<float> loss = mean_all(softplus(mul(out.logits, tape.constant(st))));
            tape.backward(loss);
            ps.adam_step("hs.", static_cast<float>(cfg.lr), 0.5f, 0.999f);
            ++res.steps;
        }
    }

    std::vector<std::pair<double, float>> scored;
    for (const auto& s : test)
        scored.emplace_back(harmony_score(ps, *s.img, *s.fg), s.label);
    res.auc_holdout = auc_from_scores(scored);
    return res;
}

std::vector<double> harmony_scores(ParamStore<float>& ps, const std::vector<Image>& imgs,
                                   const std::vector<SegMask>& fg_masks) {
    std::vector<double> out;
    const int chunk = 16;
    for (std::size_t start = 0; start < imgs.size(); start += chunk) {
        std::size_t cnt = std::min<std::size_t>(chunk, imgs.size() - start);
        std::vector<const Image*> ip;
        std::vector<const SegMask*> fp;
        for (std::size_t i = 0; i < cnt; ++i) {
            ip.push_back(&imgs[start + i]);
            fp.push_back(&fg_masks[start + i]);
        }
        Tape<float> tape;
        auto hout = harmony_forward(tape, ps, tape.constant(pack_rgba(ip, fp)), false);
        for (std::size_t i = 0; i < cnt; ++i) {
            double logit = hout.logits.val().data[i];
            out.push_back(1.0 / (1.0 + std::exp(-logit)));
        }
    }
    return out;
}

double harmony_score(ParamStore<float>& ps, const Image& img, const SegMask& fg_mask) {
    return harmony_scores(ps, {img}, {fg_mask})[0];
}

std::vector<std::vector<float>> harmony_features(ParamStore<float>& ps,
                                                 const std::vector<Image>& imgs,
                                                 const std::vector<SegMask>& fg_masks) {
    std::vector<std::vector<float>> out;
    const int chunk = 16;
    for (std::size_t start = 0; start < imgs.size(); start += chunk) {
        std::size_t cnt = std::min<std::size_t>(chunk, imgs.size() - start);
        std::vector<const Image*> ip;
        std::vector<const SegMask*> fp;
        for (std::size_t i = 0; i < cnt; ++i) {
            ip.push_back(&imgs[start + i]);
            fp.push_back(&fg_masks[start + i]);
        }
        Tape<float> tape;
        auto hout = harmony_forward(tape, ps, tape.constant(pack_rgba(ip, fp)), false);
        int dim = hout.features.dims()[1];
        for (std::size_t i = 0; i < cnt; ++i) {
            std::vector<float> f(static_cast<std::size_t>(dim));
            for (int d = 0; d < dim; ++d)
                f[static_cast<std::size_t>(d)] = hout.features.val().data[i * static_cast<std::size_t>(dim) + static_cast<std::size_t>(d)];
            out.push_back(std::move(f));
        }
    }
    return out;
}

}  // namespace rstm
