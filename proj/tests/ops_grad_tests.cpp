#include <doctest.h>

#include <Eigen/SVD>

#include <cmath>
#include <cstring>
#include <memory>
#include <vector>

#include "rstm/gradcheck.hpp"
#include "rstm/ops.hpp"
#include "rstm/params.hpp"
#include "rstm/rng.hpp"

#include "oracles.hpp"

// Per-operation finite-difference verification plus brute-force oracles.
// Inputs are kept O(1) and away from activation kinks so the central
// difference at h=1e-4 stays in its asymptotic regime.

using namespace rstm;

namespace {

constexpr double kH = 1e-4;
constexpr double kTol = 1e-4;

void fill_uniform(Tensor<double>& t, Rng& rng, double lo, double hi) {
    for (auto& v : t.data) v = rng.uniform(lo, hi);
}

// magnitudes in [margin, margin+span], random sign; safe for relu/abs kinks
void fill_offzero(Tensor<double>& t, Rng& rng, double margin = 0.2, double span = 1.0) {
    for (auto& v : t.data) {
        double m = margin + span * rng.uniform();
        v = (rng.next_u64() & 1) ? m : -m;
    }
}

// one checked parameter "x" with an op applied and a sum-of-squares readout
double check_unary(const std::vector<int>& dims, std::uint64_t seed, bool offzero,
                   const std::function<Var<double>(Var<double>)>& op) {
    ParamStore<double> ps;
    Rng rng(seed);
    Tensor<double>& x = ps.add("x", dims);
    if (offzero) fill_offzero(x, rng);
    else fill_uniform(x, rng, -1.0, 1.0);
    ScalarFn f = [&op](Tape<double>& t, ParamStore<double>& p) {
        Var<double> y = op(t.param(p.get("x")));
        return mean_all(mul(y, y));
    };
    return grad_check(f, ps, {"x"}, kH).max_rel_error;
}

const std::vector<std::vector<int>> kShapes4d = {{2, 3, 4, 5}, {1, 4, 6, 6}, {3, 2, 5, 3}};
const std::vector<std::vector<int>> kShapes2d = {{3, 7}, {5, 4}, {2, 9}};

}  // namespace

TEST_CASE("elementwise activations pass finite-difference checks") {
    struct Case {
        const char* name;
        bool offzero;
        std::function<Var<double>(Var<double>)> op;
    };
    const Case cases[] = {
        {"relu", true, [](Var<double> x) { return relu(x); }},
        {"leaky_relu", true, [](Var<double> x) { return leaky_relu(x); }},
        {"abs", true, [](Var<double> x) { return abs_(x); }},
        {"sigmoid", false, [](Var<double> x) { return sigmoid(x); }},
        {"tanh", false, [](Var<double> x) { return tanh_(x); }},
        {"softplus", false, [](Var<double> x) { return softplus(x); }},
        {"scale", false, [](Var<double> x) { return scale(x, 1.7); }},
        {"add_const", false, [](Var<double> x) { return add_const(x, 0.4); }},
        {"reshape", false, [](Var<double> x) {
             std::int64_t n = x.val().size();
             return reshape(x, {static_cast<int>(n)});
         }},
    };
    for (const auto& c : cases) {
        std::uint64_t seed = 100;
        for (const auto& dims : kShapes4d) {
            CAPTURE(c.name);
            CAPTURE(shape_str(dims));
            CHECK_LT(check_unary(dims, seed++, c.offzero, c.op), kTol);
        }
    }
}

TEST_CASE("reciprocal passes finite-difference checks away from zero") {
    std::uint64_t seed = 7;
    for (const auto& dims : kShapes2d) {
        ParamStore<double> ps;
        Rng rng(seed++);
        fill_offzero(ps.add("x", dims), rng, 0.5, 1.0);
        ScalarFn f = [](Tape<double>& t, ParamStore<double>& p) {
            Var<double> y = reciprocal(t.param(p.get("x")));
            return mean_all(mul(y, y));
        };
        CHECK_LT(grad_check(f, ps, {"x"}, kH).max_rel_error, kTol);
    }
}

TEST_CASE("binary elementwise ops pass finite-difference checks") {
    struct Case {
        const char* name;
        std::function<Var<double>(Var<double>, Var<double>)> op;
    };
    const Case cases[] = {
        {"add", [](Var<double> a, Var<double> b) { return add(a, b); }},
        {"sub", [](Var<double> a, Var<double> b) { return sub(a, b); }},
        {"mul", [](Var<double> a, Var<double> b) { return mul(a, b); }},
    };
    for (const auto& c : cases) {
        std::uint64_t seed = 300;
        for (const auto& dims : kShapes4d) {
            ParamStore<double> ps;
            Rng rng(seed++);
            fill_uniform(ps.add("a", dims), rng, -1.0, 1.0);
            fill_uniform(ps.add("b", dims), rng, -1.0, 1.0);
            ScalarFn f = [&c](Tape<double>& t, ParamStore<double>& p) {
                Var<double> y = c.op(t.param(p.get("a")), t.param(p.get("b")));
                return mean_all(mul(y, y));
            };
            CAPTURE(c.name);
            CHECK_LT(grad_check(f, ps, {"a", "b"}, kH).max_rel_error, kTol);
        }
    }
}

TEST_CASE("mul_scalar passes finite-difference checks") {
    std::uint64_t seed = 11;
    for (const auto& dims : kShapes4d) {
        ParamStore<double> ps;
        Rng rng(seed++);
        fill_uniform(ps.add("x", dims), rng, -1.0, 1.0);
        fill_uniform(ps.add("s", {1}), rng, 0.3, 1.3);
        ScalarFn f = [](Tape<double>& t, ParamStore<double>& p) {
            Var<double> y = mul_scalar(t.param(p.get("x")), t.param(p.get("s")));
            return mean_all(mul(y, y));
        };
        CHECK_LT(grad_check(f, ps, {"x", "s"}, kH).max_rel_error, kTol);
    }
}

TEST_CASE("matmul passes finite-difference checks in all transpose modes") {
    std::uint64_t seed = 400;
    for (int mode = 0; mode < 4; ++mode) {
        bool ta = mode & 1, tb = mode & 2;
        for (int rep = 0; rep < 3; ++rep) {
            Rng rng(seed++);
            int M = 2 + static_cast<int>(rng.below(4));
            int K = 2 + static_cast<int>(rng.below(4));
            int N = 2 + static_cast<int>(rng.below(4));
            ParamStore<double> ps;
            fill_uniform(ps.add("a", ta ? std::vector<int>{K, M} : std::vector<int>{M, K}), rng,
                         -1.0, 1.0);
            fill_uniform(ps.add("b", tb ? std::vector<int>{N, K} : std::vector<int>{K, N}), rng,
                         -1.0, 1.0);
            ScalarFn f = [ta, tb](Tape<double>& t, ParamStore<double>& p) {
                Var<double> y = matmul(t.param(p.get("a")), t.param(p.get("b")), ta, tb);
                return mean_all(mul(y, y));
            };
            CAPTURE(mode);
            CHECK_LT(grad_check(f, ps, {"a", "b"}, kH).max_rel_error, kTol);
        }
    }
}

TEST_CASE("bmm passes finite-difference checks") {
    std::uint64_t seed = 500;
    for (int tb = 0; tb < 2; ++tb) {
        for (int rep = 0; rep < 3; ++rep) {
            Rng rng(seed++);
            int B = 1 + static_cast<int>(rng.below(3));
            int M = 2 + static_cast<int>(rng.below(3));
            int K = 2 + static_cast<int>(rng.below(3));
            int L = 2 + static_cast<int>(rng.below(3));
            ParamStore<double> ps;
            fill_uniform(ps.add("a", {B, M, K}), rng, -1.0, 1.0);
            fill_uniform(ps.add("b", tb ? std::vector<int>{B, L, K} : std::vector<int>{B, K, L}),
                         rng, -1.0, 1.0);
            ScalarFn f = [tb](Tape<double>& t, ParamStore<double>& p) {
                Var<double> y = bmm(t.param(p.get("a")), t.param(p.get("b")), tb != 0);
                return mean_all(mul(y, y));
            };
            CHECK_LT(grad_check(f, ps, {"a", "b"}, kH).max_rel_error, kTol);
        }
    }
}

TEST_CASE("linear passes finite-difference checks") {
    std::uint64_t seed = 600;
    for (int rep = 0; rep < 3; ++rep) {
        Rng rng(seed++);
        int N = 2 + static_cast<int>(rng.below(4));
        int Din = 2 + static_cast<int>(rng.below(5));
        int Dout = 2 + static_cast<int>(rng.below(5));
        ParamStore<double> ps;
        fill_uniform(ps.add("x", {N, Din}), rng, -1.0, 1.0);
        fill_uniform(ps.add("w", {Dout, Din}), rng, -1.0, 1.0);
        fill_uniform(ps.add("b", {Dout}), rng, -0.5, 0.5);
        ScalarFn f = [](Tape<double>& t, ParamStore<double>& p) {
            Var<double> y = linear(t.param(p.get("x")), t.param(p.get("w")), t.param(p.get("b")));
            return mean_all(mul(y, y));
        };
        CHECK_LT(grad_check(f, ps, {"x", "w", "b"}, kH).max_rel_error, kTol);
    }
}

TEST_CASE("conv2d passes finite-difference checks") {
    struct Case {
        int N, Cin, H, W, Cout, k, stride, pad;
    };
    const Case cases[] = {
        {1, 2, 6, 6, 3, 3, 1, 1},
        {2, 3, 8, 7, 2, 3, 2, 1},
        {1, 4, 5, 5, 4, 1, 1, 0},
        {2, 2, 9, 9, 3, 5, 2, 2},
    };
    std::uint64_t seed = 700;
    for (const auto& c : cases) {
        Rng rng(seed++);
        ParamStore<double> ps;
        fill_uniform(ps.add("x", {c.N, c.Cin, c.H, c.W}), rng, -1.0, 1.0);
        fill_uniform(ps.add("w", {c.Cout, c.Cin, c.k, c.k}), rng, -0.5, 0.5);
        fill_uniform(ps.add("b", {c.Cout}), rng, -0.5, 0.5);
        ScalarFn f = [&c](Tape<double>& t, ParamStore<double>& p) {
            Var<double> y = conv2d(t.param(p.get("x")), t.param(p.get("w")), t.param(p.get("b")),
                                   c.stride, c.pad);
            return mean_all(mul(y, y));
        };
        CHECK_LT(grad_check(f, ps, {"x", "w", "b"}, kH).max_rel_error, kTol);
    }
}

TEST_CASE("softmax_rows passes finite-difference checks") {
    std::uint64_t seed = 800;
    for (const auto& dims : kShapes2d) {
        ParamStore<double> ps;
        Rng rng(seed++);
        fill_uniform(ps.add("x", dims), rng, -2.0, 2.0);
        ScalarFn f = [](Tape<double>& t, ParamStore<double>& p) {
            Var<double> y = softmax_rows(t.param(p.get("x")));
            return mean_all(mul(y, y));
        };
        CHECK_LT(grad_check(f, ps, {"x"}, kH).max_rel_error, kTol);
    }
}

TEST_CASE("resize passes finite-difference checks in both modes") {
    struct Case {
        std::vector<int> dims;
        int oh, ow;
    };
    const Case cases[] = {
        {{1, 2, 4, 4}, 8, 8},
        {{2, 3, 5, 3}, 7, 6},
        {{1, 2, 6, 6}, 3, 3},
    };
    for (auto mode : {ResizeMode::kNearest, ResizeMode::kBilinear}) {
        std::uint64_t seed = 900;
        for (const auto& c : cases) {
            ParamStore<double> ps;
            Rng rng(seed++);
            fill_uniform(ps.add("x", c.dims), rng, -1.0, 1.0);
            ScalarFn f = [&c, mode](Tape<double>& t, ParamStore<double>& p) {
                Var<double> y = resize(t.param(p.get("x")), c.oh, c.ow, mode);
                return mean_all(mul(y, y));
            };
            CHECK_LT(grad_check(f, ps, {"x"}, kH).max_rel_error, kTol);
        }
    }
}

TEST_CASE("instance_norm passes finite-difference checks") {
    std::uint64_t seed = 1000;
    for (const auto& dims : kShapes4d) {
        ParamStore<double> ps;
        Rng rng(seed++);
        fill_uniform(ps.add("x", dims), rng, -1.5, 1.5);
        ScalarFn f = [](Tape<double>& t, ParamStore<double>& p) {
            Var<double> y = instance_norm(t.param(p.get("x")));
            Tensor<double> w(y.dims());
            Rng wr(42);
            for (auto& v : w.data) v = wr.uniform(0.5, 1.5);
            return mean_all(mul(y, t.constant(std::move(w))));
        };
        CHECK_LT(grad_check(f, ps, {"x"}, kH).max_rel_error, kTol);
    }
}

TEST_CASE("concat and slice_axis pass finite-difference checks") {
    std::uint64_t seed = 1100;
    for (int axis = 0; axis < 3; ++axis) {
        ParamStore<double> ps;
        Rng rng(seed++);
        std::vector<int> da = {2, 3, 4}, db = {2, 3, 4};
        da[static_cast<std::size_t>(axis)] = 2;
        db[static_cast<std::size_t>(axis)] = 3;
        fill_uniform(ps.add("a", da), rng, -1.0, 1.0);
        fill_uniform(ps.add("b", db), rng, -1.0, 1.0);
        ScalarFn f = [axis](Tape<double>& t, ParamStore<double>& p) {
            Var<double> y = concat<double>({t.param(p.get("a")), t.param(p.get("b"))}, axis);
            Var<double> s = slice_axis(y, axis, 1, y.dims()[static_cast<std::size_t>(axis)]);
            return mean_all(mul(s, s));
        };
        CAPTURE(axis);
        CHECK_LT(grad_check(f, ps, {"a", "b"}, kH).max_rel_error, kTol);
    }
}

TEST_CASE("repeat_batch, reductions and channel scaling pass finite-difference checks") {
    std::uint64_t seed = 1200;
    for (const auto& dims : kShapes4d) {
        ParamStore<double> ps;
        Rng rng(seed++);
        std::vector<int> d1 = dims;
        d1[0] = 1;
        fill_uniform(ps.add("x", d1), rng, -1.0, 1.0);
        fill_uniform(ps.add("s", {d1[1]}), rng, 0.2, 1.2);
        ScalarFn f = [&dims](Tape<double>& t, ParamStore<double>& p) {
            Var<double> y = repeat_batch(t.param(p.get("x")), dims[0]);
            y = scale_channels(y, t.param(p.get("s")));
            Var<double> pooled = mean_hw(y);  // [N,C]
            return add(mean_all(mul(pooled, pooled)), scale(sum_all(y), 0.01));
        };
        CHECK_LT(grad_check(f, ps, {"x", "s"}, kH).max_rel_error, kTol);
    }
}

TEST_CASE("scale_rows_const passes finite-difference checks") {
    std::uint64_t seed = 1300;
    for (int rep = 0; rep < 3; ++rep) {
        Rng rng(seed++);
        int N = 2, C = 4, D = 5;
        ParamStore<double> ps;
        fill_uniform(ps.add("x", {N, C, D}), rng, -1.0, 1.0);
        std::vector<double> m(static_cast<std::size_t>(N) * C);
        for (auto& v : m) v = (rng.next_u64() & 1) ? 1.0 : ((rng.next_u64() & 1) ? 0.0 : 0.5);
        ScalarFn f = [m](Tape<double>& t, ParamStore<double>& p) {
            Var<double> y = scale_rows_const(t.param(p.get("x")), m);
            return mean_all(mul(y, y));
        };
        CHECK_LT(grad_check(f, ps, {"x"}, kH).max_rel_error, kTol);
    }
}

TEST_CASE("region_avg_pool and broadcast_style pass finite-difference checks") {
    std::uint64_t seed = 1400;
    for (int rep = 0; rep < 3; ++rep) {
        Rng rng(seed++);
        int N = 2, Cf = 3, H = 4, W = 4, K = 5, D = 3;
        auto labels = std::make_shared<std::vector<std::vector<int>>>();
        for (int n = 0; n < N; ++n) {
            std::vector<int> lab(static_cast<std::size_t>(H) * W);
            for (auto& l : lab) l = static_cast<int>(rng.below(static_cast<std::uint64_t>(K)));
            labels->push_back(std::move(lab));
        }
        LabelMaps lm = labels;
        ParamStore<double> ps;
        fill_uniform(ps.add("f", {N, Cf, H, W}), rng, -1.0, 1.0);
        fill_uniform(ps.add("s", {N, K, D}), rng, -1.0, 1.0);
        ScalarFn f = [lm, K, H, W](Tape<double>& t, ParamStore<double>& p) {
            Var<double> pooled = region_avg_pool(t.param(p.get("f")), lm, K);
            Var<double> bc = broadcast_style(t.param(p.get("s")), lm, H, W);
            return add(mean_all(mul(pooled, pooled)), mean_all(mul(bc, bc)));
        };
        CHECK_LT(grad_check(f, ps, {"f", "s"}, kH).max_rel_error, kTol);
    }
}

TEST_CASE("spectral normalization graph form passes finite-difference checks") {
    std::uint64_t seed = 1500;
    for (const auto& dims : std::vector<std::vector<int>>{{4, 6}, {5, 3}, {3, 2, 3, 3}}) {
        ParamStore<double> ps;
        Rng rng(seed++);
        fill_uniform(ps.add("w", dims), rng, -1.0, 1.0);
        auto u = std::make_shared<Tensor<double>>();
        // warm the power-iteration state once, then keep it frozen
        {
            std::vector<double> uv;
            spectral_normalize(ps.get("w"), uv, 30);
            *u = Tensor<double>({dims[0]});
            u->data = uv;
        }
        ScalarFn f = [u](Tape<double>& t, ParamStore<double>& p) {
            Var<double> w = spectral_norm_var(t, t.param(p.get("w")), *u, /*update_u=*/false);
            return mean_all(mul(w, w));
        };
        CHECK_LT(grad_check(f, ps, {"w"}, kH).max_rel_error, kTol);
    }
}

TEST_CASE("gradient of sum of squares is exactly 2x") {
    Rng rng(2025);
    ParamStore<double> ps;
    Tensor<double>& x = ps.add("x", {3, 5});
    fill_uniform(x, rng, -2.0, 2.0);
    Tape<double> tape;
    Var<double> xv = tape.param(x);
    Var<double> loss = sum_all(mul(xv, xv));
    tape.backward(loss);
    for (std::size_t i = 0; i < x.data.size(); ++i)
        CHECK_EQ(x.grad[i], doctest::Approx(2.0 * x.data[i]).epsilon(1e-12));
}

TEST_CASE("gradient of a constant function is exactly zero") {
    ParamStore<double> ps;
    Rng rng(3);
    fill_uniform(ps.add("x", {4, 4}), rng, -1.0, 1.0);
    ScalarFn f = [](Tape<double>& t, ParamStore<double>& p) {
        t.param(p.get("x"));  // on the tape but not in the output
        Tensor<double> c({1});
        c.data[0] = 3.5;
        return t.constant(std::move(c));
    };
    CHECK_EQ(grad_check(f, ps, {"x"}, kH).max_rel_error, 0.0);
}

// --------------------------------------------------------------------------
// brute-force oracles

TEST_CASE("conv2d matches the nested-loop oracle on random instances") {
    Rng rng(4242);
    for (int rep = 0; rep < 24; ++rep) {
        int N = 1 + static_cast<int>(rng.below(2));
        int Cin = 1 + static_cast<int>(rng.below(3));
        int Cout = 1 + static_cast<int>(rng.below(3));
        int k = 1 + 2 * static_cast<int>(rng.below(3));  // 1,3,5
        int stride = 1 + static_cast<int>(rng.below(2));
        int pad = static_cast<int>(rng.below(static_cast<std::uint64_t>(k / 2 + 1)));
        int H = k + static_cast<int>(rng.below(6));
        int W = k + static_cast<int>(rng.below(6));
        Tensor<double> x({N, Cin, H, W}), w({Cout, Cin, k, k}), b({Cout});
        fill_uniform(x, rng, -1.0, 1.0);
        fill_uniform(w, rng, -1.0, 1.0);
        fill_uniform(b, rng, -1.0, 1.0);
        Tensor<double> want = oracle::conv2d(x, w, b, stride, pad);
        Tape<double> t;
        Var<double> y = conv2d(t.constant(x), t.constant(w), t.constant(b), stride, pad);
        REQUIRE_EQ(y.dims(), want.dims);
        for (std::size_t i = 0; i < want.data.size(); ++i)
            CHECK_EQ(y.val().data[i], doctest::Approx(want.data[i]).epsilon(1e-5));
    }
}

TEST_CASE("matmul and linear match naive triple loops") {
    Rng rng(555);
    for (int rep = 0; rep < 5; ++rep) {
        int M = 2 + static_cast<int>(rng.below(4));
        int K = 2 + static_cast<int>(rng.below(4));
        int N = 2 + static_cast<int>(rng.below(4));
        Tensor<double> a({M, K}), b({K, N}), bias({N});
        fill_uniform(a, rng, -1.0, 1.0);
        fill_uniform(b, rng, -1.0, 1.0);
        fill_uniform(bias, rng, -1.0, 1.0);
        Tape<double> t;
        Var<double> y = matmul(t.constant(a), t.constant(b));
        Tensor<double> wt({N, K});
        for (int i = 0; i < N; ++i)
            for (int j = 0; j < K; ++j) wt.at2(i, j) = b.at2(j, i);
        Var<double> lin = linear(t.constant(a), t.constant(wt), t.constant(bias));
        for (int i = 0; i < M; ++i)
            for (int j = 0; j < N; ++j) {
                double acc = 0;
                for (int k = 0; k < K; ++k) acc += a.at2(i, k) * b.at2(k, j);
                CHECK_EQ(y.val().at2(i, j), doctest::Approx(acc).epsilon(1e-10));
                CHECK_EQ(lin.val().at2(i, j),
                         doctest::Approx(acc + bias.data[static_cast<std::size_t>(j)])
                             .epsilon(1e-10));
            }
    }
}

TEST_CASE("softmax_rows matches a long-double oracle and its rows sum to 1") {
    Rng rng(777);
    for (int rep = 0; rep < 20; ++rep) {
        int R = 1 + static_cast<int>(rng.below(5));
        int C = 2 + static_cast<int>(rng.below(6));
        Tensor<double> x({R, C});
        fill_uniform(x, rng, -5.0, 5.0);
        Tape<double> t;
        Var<double> y = softmax_rows(t.constant(x));
        for (int r = 0; r < R; ++r) {
            long double mx = x.at2(r, 0);
            for (int c = 1; c < C; ++c) mx = std::max<long double>(mx, x.at2(r, c));
            long double sum = 0;
            for (int c = 0; c < C; ++c) sum += expl(static_cast<long double>(x.at2(r, c)) - mx);
            double rowsum = 0;
            for (int c = 0; c < C; ++c) {
                long double want = expl(static_cast<long double>(x.at2(r, c)) - mx) / sum;
                CHECK_EQ(y.val().at2(r, c), doctest::Approx(static_cast<double>(want)).epsilon(1e-12));
                rowsum += y.val().at2(r, c);
            }
            CHECK_EQ(rowsum, doctest::Approx(1.0).epsilon(1e-6));
        }
    }
}

TEST_CASE("softmax_rows rows sum to 1 under extreme magnitude spread") {
    const std::vector<std::vector<double>> rows = {
        {1e30, 0.0, -1e30, 5.0},
        {1e-30, 2e-30, -3e-30, 0.0},
        {-1e30, -1e30, -1e30, -1e30},
        {1e30, 1e30, 1e30, 1e30},
        {700.0, -700.0, 0.0, 350.0},
    };
    Tensor<double> x({static_cast<int>(rows.size()), 4});
    for (int r = 0; r < x.dims[0]; ++r)
        for (int c = 0; c < 4; ++c) x.at2(r, c) = rows[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)];
    Tape<double> t;
    Var<double> y = softmax_rows(t.constant(x));
    for (int r = 0; r < x.dims[0]; ++r) {
        double sum = 0;
        for (int c = 0; c < 4; ++c) {
            double v = y.val().at2(r, c);
            CHECK(std::isfinite(v));
            CHECK_GE(v, 0.0);
            sum += v;
        }
        CHECK_EQ(sum, doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("region_avg_pool and broadcast_style match naive oracles") {
    Rng rng(888);
    for (int rep = 0; rep < 20; ++rep) {
        int N = 1 + static_cast<int>(rng.below(2));
        int Cf = 1 + static_cast<int>(rng.below(4));
        int H = 2 + static_cast<int>(rng.below(4));
        int W = 2 + static_cast<int>(rng.below(4));
        int K = 2 + static_cast<int>(rng.below(5));
        auto labels = std::make_shared<std::vector<std::vector<int>>>();
        for (int n = 0; n < N; ++n) {
            std::vector<int> lab(static_cast<std::size_t>(H) * W);
            for (auto& l : lab) l = static_cast<int>(rng.below(static_cast<std::uint64_t>(K)));
            labels->push_back(std::move(lab));
        }
        LabelMaps lm = labels;
        Tensor<double> f({N, Cf, H, W});
        fill_uniform(f, rng, -1.0, 1.0);
        Tape<double> t;
        Var<double> pooled = region_avg_pool(t.constant(f), lm, K);
        for (int n = 0; n < N; ++n)
            for (int cl = 0; cl < K; ++cl)
                for (int c = 0; c < Cf; ++c) {
                    double acc = 0;
                    int cnt = 0;
                    for (int i = 0; i < H; ++i)
                        for (int j = 0; j < W; ++j)
                            if ((*lm)[static_cast<std::size_t>(n)]
                                     [static_cast<std::size_t>(i * W + j)] == cl) {
                                acc += f.at4(n, c, i, j);
                                ++cnt;
                            }
                    double want = cnt ? acc / cnt : 0.0;
                    double got =
                        pooled.val().data[(static_cast<std::size_t>(n) * K + cl) * Cf + c];
                    CHECK_EQ(got, doctest::Approx(want).epsilon(1e-10));
                }
        int D = 1 + static_cast<int>(rng.below(4));
        Tensor<double> s({N, K, D});
        fill_uniform(s, rng, -1.0, 1.0);
        Var<double> bc = broadcast_style(t.constant(s), lm, H, W);
        for (int n = 0; n < N; ++n)
            for (int d = 0; d < D; ++d)
                for (int i = 0; i < H; ++i)
                    for (int j = 0; j < W; ++j) {
                        int cl = (*lm)[static_cast<std::size_t>(n)]
                                      [static_cast<std::size_t>(i * W + j)];
                        CHECK_EQ(bc.val().at4(n, d, i, j),
                                 s.data[(static_cast<std::size_t>(n) * K + cl) * D + d]);
                    }
    }
}

TEST_CASE("instance_norm output has zero mean and unit variance per channel") {
    Rng rng(999);
    Tensor<double> x({2, 3, 6, 6});
    fill_uniform(x, rng, -3.0, 2.0);
    Tape<double> t;
    Var<double> y = instance_norm(t.constant(x));
    int HW = 36;
    for (int n = 0; n < 2; ++n)
        for (int c = 0; c < 3; ++c) {
            double mean = 0, var = 0;
            for (int i = 0; i < 6; ++i)
                for (int j = 0; j < 6; ++j) mean += y.val().at4(n, c, i, j);
            mean /= HW;
            for (int i = 0; i < 6; ++i)
                for (int j = 0; j < 6; ++j) {
                    double d = y.val().at4(n, c, i, j) - mean;
                    var += d * d;
                }
            var /= HW;
            CHECK_EQ(mean, doctest::Approx(0.0).epsilon(1e-10));
            CHECK_EQ(var, doctest::Approx(1.0).epsilon(1e-3));  // eps in the denominator
        }
}

TEST_CASE("nearest resize at 2x replicates pixels exactly") {
    Rng rng(123);
    Tensor<double> x({1, 2, 3, 4});
    fill_uniform(x, rng, -1.0, 1.0);
    Tape<double> t;
    Var<double> y = resize(t.constant(x), 6, 8, ResizeMode::kNearest);
    for (int c = 0; c < 2; ++c)
        for (int i = 0; i < 6; ++i)
            for (int j = 0; j < 8; ++j)
                CHECK_EQ(y.val().at4(0, c, i, j), x.at4(0, c, i / 2, j / 2));
}

TEST_CASE("bilinear resize preserves constants and interior linear ramps") {
    Tensor<double> c({1, 1, 4, 4}, 0.7);
    Tape<double> t;
    Var<double> yc = resize(t.constant(c), 9, 5, ResizeMode::kBilinear);
    for (double v : yc.val().data) CHECK_EQ(v, doctest::Approx(0.7).epsilon(1e-12));

    Tensor<double> ramp({1, 1, 1, 8});
    for (int j = 0; j < 8; ++j) ramp.data[static_cast<std::size_t>(j)] = j;
    Var<double> yr = resize(t.constant(ramp), 1, 16, ResizeMode::kBilinear);
    // interior samples of a linear ramp stay on the ramp (borders clamp)
    for (int j = 2; j < 14; ++j) {
        double src = (j + 0.5) * 8.0 / 16.0 - 0.5;
        CHECK_EQ(yr.val().data[static_cast<std::size_t>(j)], doctest::Approx(src).epsilon(1e-12));
    }
}

TEST_CASE("spectral_normalize brings the top singular value to 1") {
    Rng rng(31);
    for (int rep = 0; rep < 5; ++rep) {
        int R = 3 + static_cast<int>(rng.below(4));
        int C = 3 + static_cast<int>(rng.below(4));
        Tensor<double> w({R, C});
        fill_uniform(w, rng, -1.0, 1.0);
        std::vector<double> u;
        Tensor<double> wn = spectral_normalize(w, u, 100);
        Eigen::MatrixXd m(R, C);
        for (int i = 0; i < R; ++i)
            for (int j = 0; j < C; ++j) m(i, j) = wn.at2(i, j);
        Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
        CHECK_EQ(svd.singularValues()(0), doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("spectral_normalize on a diagonal matrix divides by the largest entry") {
    Tensor<double> w({2, 2});
    w.at2(0, 0) = 3.0;
    w.at2(1, 1) = 1.0;
    std::vector<double> u;
    Tensor<double> wn = spectral_normalize(w, u, 100);
    CHECK_EQ(wn.at2(0, 0), doctest::Approx(1.0).epsilon(1e-9));
    CHECK_EQ(wn.at2(1, 1), doctest::Approx(1.0 / 3.0).epsilon(1e-9));
    CHECK_EQ(wn.at2(0, 1), 0.0);
}

TEST_CASE("adam_step matches the textbook update") {
    ParamStore<double> ps;
    Tensor<double>& p = ps.add("w", {3});
    p.data = {1.0, -2.0, 0.5};
    p.ensure_grad();
    p.grad = {0.3, -0.1, 0.0};
    std::vector<double> want(3);
    double lr = 0.01, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    for (int i = 0; i < 3; ++i) {
        double g = p.grad[static_cast<std::size_t>(i)];
        double m = (1 - b1) * g, v = (1 - b2) * g * g;
        double mhat = m / (1 - b1), vhat = v / (1 - b2);
        want[static_cast<std::size_t>(i)] =
            p.data[static_cast<std::size_t>(i)] - lr * mhat / (std::sqrt(vhat) + eps);
    }
    ps.adam_step("w", lr, b1, b2, eps);
    for (int i = 0; i < 3; ++i)
        CHECK_EQ(p.data[static_cast<std::size_t>(i)],
                 doctest::Approx(want[static_cast<std::size_t>(i)]).epsilon(1e-14));
    CHECK_EQ(ps.entry("w").step, 1);
}

TEST_CASE("adam_step prefix filter leaves other parameters untouched") {
    ParamStore<double> ps;
    Tensor<double>& a = ps.add("net.a", {2});
    Tensor<double>& b = ps.add("other.b", {2});
    a.data = {1.0, 1.0};
    b.data = {1.0, 1.0};
    a.ensure_grad();
    b.ensure_grad();
    a.grad = {1.0, 1.0};
    b.grad = {1.0, 1.0};
    ps.adam_step("net.", 0.1, 0.9, 0.999);
    CHECK_NE(a.data[0], 1.0);
    CHECK_EQ(b.data[0], 1.0);
}

TEST_CASE("forward and backward are bit-identical across repeated runs") {
    auto run = [](std::vector<double>* out_vals, std::vector<double>* out_grads) {
        Rng rng(64);
        ParamStore<double> ps;
        Tensor<double>& x = ps.add("x", {2, 3, 8, 8});
        Tensor<double>& w = ps.add("w", {4, 3, 3, 3});
        Tensor<double>& b = ps.add("b", {4});
        fill_uniform(x, rng, -1.0, 1.0);
        fill_uniform(w, rng, -0.5, 0.5);
        fill_uniform(b, rng, -0.3, 0.3);
        Tape<double> t;
        Var<double> h = leaky_relu(conv2d(t.param(x), t.param(w), t.param(b), 2, 1));
        h = instance_norm(h);
        Var<double> pooled = mean_hw(h);
        Var<double> sm = softmax_rows(pooled);
        Var<double> loss = mean_all(mul(sm, sm));
        t.backward(loss);
        *out_vals = loss.val().data;
        for (double v : sm.val().data) out_vals->push_back(v);
        *out_grads = w.grad;
        out_grads->insert(out_grads->end(), x.grad.begin(), x.grad.end());
    };
    std::vector<double> v1, g1, v2, g2;
    run(&v1, &g1);
    run(&v2, &g2);
    REQUIRE_EQ(v1.size(), v2.size());
    REQUIRE_EQ(g1.size(), g2.size());
    CHECK_EQ(std::memcmp(v1.data(), v2.data(), v1.size() * sizeof(double)), 0);
    CHECK_EQ(std::memcmp(g1.data(), g2.data(), g1.size() * sizeof(double)), 0);
}

TEST_CASE("rng is reproducible and statistically sane") {
    Rng a(12345), b(12345);
    for (int i = 0; i < 100; ++i) CHECK_EQ(a.next_u64(), b.next_u64());
    Rng c(9);
    double mean = 0, m2 = 0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        double v = c.normal();
        mean += v;
        m2 += v * v;
    }
    mean /= n;
    m2 /= n;
    CHECK_LT(std::abs(mean), 0.03);
    CHECK_EQ(m2 - mean * mean, doctest::Approx(1.0).epsilon(0.05));
}
