#include "rstm/training.hpp"

#include <cmath>
#include <fstream>

namespace rstm {

void init_stage1(ParamStore<float>& ps, const ModelConfig& cfg, std::uint64_t seed) {
    init_generator_params(ps, cfg, seed);
    init_discriminator_params(ps, cfg, seed);
    init_perceptual_params(ps, cfg);
}

namespace {

struct Batch {
    TensorF images;
    std::vector<SegMask> masks;
};

Batch draw_batch(const Dataset& ds, int batch, Rng& rng) {
    std::vector<Image> imgs;
    Batch out;
    for (int i = 0; i < batch; ++i) {
        std::size_t idx = static_cast<std::size_t>(rng.below(ds.images.size()));
        imgs.push_back(ds.images[idx]);
        out.masks.push_back(ds.masks[idx]);
    }
    out.images = images_to_tensor(imgs);
    return out;
}

}  // namespace

TrainResult train_stage1(const Dataset& ds, const RunConfig& cfg, ParamStore<float>& ps,
                         const std::string& loss_log_path) {
    if (static_cast<int>(ds.images.size()) < cfg.batch)
        throw std::invalid_argument("train_stage1: dataset smaller than batch size");
    ModelConfig mcfg = model_config_from(cfg);
    float b1 = 0.5f, b2 = 0.999f;
    Rng order_rng(cfg.seed ^ 0x5374616765314full);
    std::ofstream log;
    if (!loss_log_path.empty()) {
        log.open(loss_log_path);
        log << "step,loss_G_adv,loss_FM,loss_perc,loss_D\n";
    }
    TrainResult res;
    for (int step = 1; step <= cfg.steps; ++step) {
        Batch batch = draw_batch(ds, cfg.batch, order_rng);

        // generator step; discriminator and perceptual weights enter as
        // frozen constants so no gradient can reach them
        ps.zero_grads();
        TensorF fake_value;
        TrainLogRow row;
        row.step = step;
        {
            Tape<float> tape;
            Var<float> imgs = tape.constant(batch.images);
            Var<float> fake = generate(tape, ps, imgs, batch.masks, mcfg, /*trainable=*/true,
                                       /*update_sn=*/true);
            auto d_real = discriminator(tape, ps, imgs, batch.masks, mcfg, false, false);
            auto d_fake = discriminator(tape, ps, fake, batch.masks, mcfg, false, false);
            Var<float> g_adv = hinge_loss_g(d_fake);
            Var<float> fm = feature_matching_loss(d_real, d_fake);
            Var<float> perc = perceptual_loss(tape, ps, imgs, fake);
            Var<float> total = add(g_adv, add(scale(fm, static_cast<float>(cfg.lambda_fm)),
                                              scale(perc, static_cast<float>(cfg.lambda_perc))));
            row.g_adv = g_adv.val().data[0];
            row.fm = fm.val().data[0];
            row.perc = perc.val().data[0];
            if (!std::isfinite(total.val().data[0]) || row.fm < 0 || row.perc < 0) {
                res.nan_abort = true;
                break;
            }
            tape.backward(total);
            fake_value = fake.val();
        }
        ps.adam_step("enc.", static_cast<float>(cfg.lr_g), b1, b2);
        ps.adam_step("mrsa.", static_cast<float>(cfg.lr_g), b1, b2);
        ps.adam_step("dec.", static_cast<float>(cfg.lr_g), b1, b2);

        // discriminator step on real vs detached fake
        ps.zero_grads();
        {
            Tape<float> tape;
            Var<float> imgs = tape.constant(batch.images);
            Var<float> fake = tape.constant(fake_value);
            auto d_real = discriminator(tape, ps, imgs, batch.masks, mcfg, true, /*update_sn=*/true);
            auto d_fake = discriminator(tape, ps, fake, batch.masks, mcfg, true, false);
            Var<float> d_loss = hinge_loss_d(d_real, d_fake);
            row.d = d_loss.val().data[0];
            if (!std::isfinite(row.d) || row.d < 0) {
                res.nan_abort = true;
                break;
            }
            tape.backward(d_loss);
        }
        ps.adam_step("disc.", static_cast<float>(cfg.lr_d), b1, b2);

        res.log.push_back(row);
        res.steps_done = step;
        if (log.is_open())
            log << row.step << "," << row.g_adv << "," << row.fm << "," << row.perc << ","
                << row.d << "\n";
    }
    return res;
}

StyleBank collect_style_bank(const Dataset& ds, const RunConfig& cfg, ParamStore<float>& ps,
                             const GroupingConfig& gc) {
    ModelConfig mcfg = model_config_from(cfg);
    StyleBank bank;
    bank.bank.resize(static_cast<std::size_t>(gc.num_groups()));
    int n = static_cast<int>(ds.images.size());
    const int chunk = 16;
    for (int start = 0; start < n; start += chunk) {
        int cnt = std::min(chunk, n - start);
        std::vector<Image> imgs(ds.images.begin() + start, ds.images.begin() + start + cnt);
        std::vector<SegMask> masks(ds.masks.begin() + start, ds.masks.begin() + start + cnt);
        Tape<float> tape;
        Var<float> x = tape.constant(images_to_tensor(imgs));
        StyleBatch<float> s = encode_styles(tape, ps, x, masks, mcfg, false, false);
        const TensorF& sv = s.styles.val();
        for (int i = 0; i < cnt; ++i) {
            for (int j = 0; j < gc.num_groups(); ++j) {
                const auto& group = gc.groups[static_cast<std::size_t>(j)];
                bool all_valid = true;
                for (int cls : group)
                    all_valid = all_valid &&
                                s.valid[static_cast<std::size_t>(i)][static_cast<std::size_t>(cls)];
                if (!all_valid) continue;  // absent region rows are excluded
                std::vector<float> rowvec;
                rowvec.reserve(group.size() * static_cast<std::size_t>(mcfg.style_dim));
                for (int cls : group)
                    for (int d = 0; d < mcfg.style_dim; ++d)
                        rowvec.push_back(
                            sv.data[((static_cast<std::size_t>(i) * mcfg.num_classes + cls) *
                                     mcfg.style_dim) +
                                    d]);
                bank.bank[static_cast<std::size_t>(j)].push_back(std::move(rowvec));
            }
        }
    }
    return bank;
}

namespace {

TensorF zbatch(int n, int zdim, Rng& rng) {
    TensorF z({n, zdim});
    for (auto& v : z.data) v = static_cast<float>(rng.normal());
    return z;
}

TensorF real_style_batch(const std::vector<std::vector<float>>& rows, int n, Rng& rng) {
    int dim = static_cast<int>(rows[0].size());
    TensorF out({n, dim});
    for (int i = 0; i < n; ++i) {
        const auto& r = rows[static_cast<std::size_t>(rng.below(rows.size()))];
        std::copy(r.begin(), r.end(), out.data.begin() + static_cast<std::size_t>(i) * dim);
    }
    return out;
}

}  // namespace

TrainResult train_stage2_rsm(const Dataset& ds, const RunConfig& cfg, ParamStore<float>& ps,
                             const GroupingConfig& gc, const std::string& loss_log_path) {
    ModelConfig mcfg = model_config_from(cfg);
    float b1 = 0.5f, b2 = 0.999f;
    float lr = static_cast<float>(cfg.lr_rsm);
    Rng rng(cfg.seed ^ 0x537461676532ull);
    std::ofstream log;
    if (!loss_log_path.empty()) {
        log.open(loss_log_path);
        log << "step,loss_G_adv,loss_FM,loss_perc,loss_D\n";
    }
    TrainResult res;

    if (cfg.rsm_stargan_mode) {
        // comparison mode: mapping nets trained through the image-space
        // adversarial loss; style discriminators are untouched
        for (int step = 1; step <= cfg.steps; ++step) {
            Batch batch = draw_batch(ds, cfg.batch, rng);
            TrainLogRow row;
            row.step = step;
            ps.zero_grads();
            TensorF fake_value;
            {
                Tape<float> tape;
                Var<float> imgs = tape.constant(batch.images);
                StyleBatch<float> s_t =
                    encode_styles(tape, ps, imgs, batch.masks, mcfg, false, false);
                // sampled styles for every group, slotted into class order
                Var<float> zs = tape.constant(zbatch(cfg.batch, mcfg.z_dim, rng));
                std::vector<Var<float>> cls_rows(static_cast<std::size_t>(mcfg.num_classes),
                                                 Var<float>{nullptr, -1});
                for (int j = 0; j < gc.num_groups(); ++j) {
                    const auto& group = gc.groups[static_cast<std::size_t>(j)];
                    int gsz = static_cast<int>(group.size());
                    Var<float> r3 = reshape(mapping_forward(tape, ps, j, zs, /*trainable=*/true),
                                            {cfg.batch, gsz, mcfg.style_dim});
                    for (int gi = 0; gi < gsz; ++gi)
                        cls_rows[static_cast<std::size_t>(group[static_cast<std::size_t>(gi)])] =
                            slice_axis(r3, 1, gi, gi + 1);
                }
                Var<float> styles = concat(cls_rows, 1);
                StyleBatch<float> s_rand{styles, s_t.valid};
                for (auto& v : s_rand.valid) std::fill(v.begin(), v.end(), 1);
                std::set<int> all;
                for (int c = 0; c < mcfg.num_classes; ++c) all.insert(c);
                StyleBatch<float> srp = compose_swapped(s_t, s_rand, all);
                StyleBatch<float> stp = mrsa_attend(tape, ps, srp, s_t, mcfg, false);
                Var<float> fake = decode(tape, ps, stp, batch.masks, mcfg, false);
                auto d_fake = discriminator(tape, ps, fake, batch.masks, mcfg, false, false);
                Var<float> g_adv = hinge_loss_g(d_fake);
                row.g_adv = g_adv.val().data[0];
                if (!std::isfinite(row.g_adv)) {
                    res.nan_abort = true;
                    break;
                }
                tape.backward(g_adv);
                fake_value = fake.val();
            }
            ps.adam_step("map.", lr, b1, b2);

            ps.zero_grads();
            {
                Tape<float> tape;
                Var<float> imgs = tape.constant(batch.images);
                Var<float> fake = tape.constant(fake_value);
                auto d_real = discriminator(tape, ps, imgs, batch.masks, mcfg, true, true);
                auto d_fake = discriminator(tape, ps, fake, batch.masks, mcfg, true, false);
                Var<float> d_loss = hinge_loss_d(d_real, d_fake);
                row.d = d_loss.val().data[0];
                if (!std::isfinite(row.d)) {
                    res.nan_abort = true;
                    break;
                }
                tape.backward(d_loss);
            }
            ps.adam_step("disc.", static_cast<float>(cfg.lr_d), b1, b2);
            res.log.push_back(row);
            res.steps_done = step;
            if (log.is_open())
                log << row.step << "," << row.g_adv << ",0,0," << row.d << "\n";
        }
        return res;
    }

    StyleBank bank = collect_style_bank(ds, cfg, ps, gc);
    for (int j = 0; j < gc.num_groups(); ++j)
        if (bank.bank[static_cast<std::size_t>(j)].empty())
            throw std::runtime_error("train_stage2_rsm: no encoded styles for group " +
                                     std::to_string(j));

    for (int step = 1; step <= cfg.steps; ++step) {
        TrainLogRow row;
        row.step = step;
        double dsum = 0, gsum = 0;
        for (int j = 0; j < gc.num_groups(); ++j) {
            const auto& rows = bank.bank[static_cast<std::size_t>(j)];
            // discriminator update
            ps.zero_grads();
            {
                Tape<float> tape;
                Var<float> z = tape.constant(zbatch(cfg.batch, mcfg.z_dim, rng));
                Var<float> fake = mapping_forward(tape, ps, j, z, /*trainable=*/false);
                Var<float> real = tape.constant(real_style_batch(rows, cfg.batch, rng));
                Var<float> lr_logit = style_disc_forward(tape, ps, j, real, true, true);
                Var<float> lf_logit = style_disc_forward(tape, ps, j, fake, true, false);
                Var<float> d_loss = nsgan_loss_d(lr_logit, lf_logit);
                dsum += d_loss.val().data[0];
                if (!std::isfinite(d_loss.val().data[0])) {
                    res.nan_abort = true;
                    return res;
                }
                tape.backward(d_loss);
            }
            ps.adam_step("sdisc.g" + std::to_string(j) + ".", lr, b1, b2);

            // mapping-net update
            ps.zero_grads();
            {
                Tape<float> tape;
                Var<float> z = tape.constant(zbatch(cfg.batch, mcfg.z_dim, rng));
                Var<float> fake = mapping_forward(tape, ps, j, z, /*trainable=*/true);
                Var<float> lf_logit = style_disc_forward(tape, ps, j, fake, false, false);
                Var<float> g_loss = nsgan_loss_g(lf_logit);
                gsum += g_loss.val().data[0];
                if (!std::isfinite(g_loss.val().data[0])) {
                    res.nan_abort = true;
                    return res;
                }
                tape.backward(g_loss);
            }
            ps.adam_step("map.g" + std::to_string(j) + ".", lr, b1, b2);
        }
        row.g_adv = gsum / gc.num_groups();
        row.d = dsum / gc.num_groups();
        res.log.push_back(row);
        res.steps_done = step;
        if (log.is_open()) log << row.step << "," << row.g_adv << ",0,0," << row.d << "\n";
    }
    return res;
}

StyleBatch<float> sample_styles_into(Tape<float>& tape, ParamStore<float>& ps,
                                     const StyleBatch<float>& base, const std::set<int>& regions,
                                     const GroupingConfig& gc, const ModelConfig& cfg, Rng& rng) {
    int N = base.styles.dims()[0];
    std::set<int> groups_needed;
    for (int cls : regions) groups_needed.insert(gc.group_of(cls));
    // one z per needed group, shared across the batch row assembly
    std::vector<Var<float>> cls_rows(static_cast<std::size_t>(cfg.num_classes),
                                     Var<float>{nullptr, -1});
    for (int j : groups_needed) {
        Var<float> z = tape.constant(zbatch(N, cfg.z_dim, rng));
        const auto& group = gc.groups[static_cast<std::size_t>(j)];
        Var<float> rows = reshape(mapping_forward(tape, ps, j, z, false),
                                  {N, static_cast<int>(group.size()), cfg.style_dim});
        for (std::size_t gi = 0; gi < group.size(); ++gi)
            if (regions.count(group[gi]))
                cls_rows[static_cast<std::size_t>(group[gi])] =
                    slice_axis(rows, 1, static_cast<int>(gi), static_cast<int>(gi) + 1);
    }
    std::vector<Var<float>> seq;
    for (int c = 0; c < cfg.num_classes; ++c) {
        if (cls_rows[static_cast<std::size_t>(c)].tape) {
            seq.push_back(cls_rows[static_cast<std::size_t>(c)]);
        } else {
            seq.push_back(slice_axis(base.styles, 1, c, c + 1));
        }
    }
    StyleBatch<float> out;
    out.styles = concat(seq, 1);
    out.valid = base.valid;
    for (auto& v : out.valid)
        for (int cls : regions) v[static_cast<std::size_t>(cls)] = 1;
    return out;
}

std::vector<double> rsm_style_frechet(const StyleBank& bank, ParamStore<float>& ps,
                                      const GroupingConfig& gc, const ModelConfig& cfg,
                                      int num_samples, std::uint64_t seed) {
    std::vector<double> out;
    Rng rng(seed ^ 0x66726563686574ull);
    for (int j = 0; j < gc.num_groups(); ++j) {
        const auto& rows = bank.bank[static_cast<std::size_t>(j)];
        int dim = static_cast<int>(rows[0].size());
        Tape<float> tape;
        Var<float> z = tape.constant(zbatch(num_samples, cfg.z_dim, rng));
        Var<float> fake = mapping_forward(tape, ps, j, z, false);
        // diagonal Gaussian fit of both sets
        auto stat = [dim](auto&& get, int n) {
            std::vector<double> mu(static_cast<std::size_t>(dim), 0.0),
                var(static_cast<std::size_t>(dim), 0.0);
            for (int i = 0; i < n; ++i)
                for (int d = 0; d < dim; ++d) mu[static_cast<std::size_t>(d)] += get(i, d);
            for (auto& m : mu) m /= n;
            for (int i = 0; i < n; ++i)
                for (int d = 0; d < dim; ++d) {
                    double dv = get(i, d) - mu[static_cast<std::size_t>(d)];
                    var[static_cast<std::size_t>(d)] += dv * dv;
                }
            for (auto& v : var) v /= n;
            return std::pair{mu, var};
        };
        auto [mu_r, var_r] = stat(
            [&](int i, int d) {
                return static_cast<double>(
                    rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(d)]);
            },
            static_cast<int>(rows.size()));
        auto [mu_f, var_f] = stat(
            [&](int i, int d) {
                return static_cast<double>(
                    fake.val().data[static_cast<std::size_t>(i) * dim + d]);
            },
            num_samples);
        double dist = 0;
        for (int d = 0; d < dim; ++d) {
            double dm = mu_r[static_cast<std::size_t>(d)] - mu_f[static_cast<std::size_t>(d)];
            dist += dm * dm;
            double sa = std::sqrt(var_r[static_cast<std::size_t>(d)]);
            double sb = std::sqrt(var_f[static_cast<std::size_t>(d)]);
            dist += var_r[static_cast<std::size_t>(d)] + var_f[static_cast<std::size_t>(d)] -
                    2.0 * sa * sb;
        }
        out.push_back(dist);
    }
    return out;
}

}  // namespace rstm
