#include "doctest.h"
#include "prefixvc/nn.hpp"

#include <cmath>
#include <cstring>
#include <random>

using namespace prefixvc;

namespace {

// Reference attention: per-row exp/normalize/weighted-sum with masked keys
// excluded outright. The production kernel uses a -1e9 additive penalty, which
// underflows to the same weights, so the two must agree to well under 1e-9.
std::vector<double> naive_attention(const std::vector<double> & q, const std::vector<double> & k,
                                    const std::vector<double> & v, int n, int m, int d,
                                    const std::vector<uint8_t> * mask) {
    std::vector<double> out(static_cast<size_t>(n) * d, 0.0);
    const double inv = 1.0 / std::sqrt(static_cast<double>(d));
    for (int i = 0; i < n; ++i) {
        std::vector<double> score(static_cast<size_t>(m), -1e300);
        double mx = -1e300;
        for (int j = 0; j < m; ++j) {
            if (mask && !(*mask)[static_cast<size_t>(i) * m + j]) continue;
            double s = 0.0;
            for (int c = 0; c < d; ++c)
                s += q[static_cast<size_t>(i) * d + c] * k[static_cast<size_t>(j) * d + c];
            score[static_cast<size_t>(j)] = s * inv;
            mx = std::max(mx, score[static_cast<size_t>(j)]);
        }
        double z = 0.0;
        std::vector<double> w(static_cast<size_t>(m), 0.0);
        for (int j = 0; j < m; ++j) {
            if (mask && !(*mask)[static_cast<size_t>(i) * m + j]) continue;
            w[static_cast<size_t>(j)] = std::exp(score[static_cast<size_t>(j)] - mx);
            z += w[static_cast<size_t>(j)];
        }
        for (int j = 0; j < m; ++j)
            for (int c = 0; c < d; ++c)
                out[static_cast<size_t>(i) * d + c] += (w[static_cast<size_t>(j)] / z) * v[static_cast<size_t>(j) * d + c];
    }
    return out;
}

std::vector<double> rand_vec(size_t n, std::mt19937_64 & rng, double scale = 1.0) {
    std::normal_distribution<double> nd(0.0, scale);
    std::vector<double> v(n);
    for (double & x : v) x = nd(rng);
    return v;
}

double max_abs_diff(const double * a, const double * b, size_t n) {
    double m = 0.0;
    for (size_t i = 0; i < n; ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

} // namespace

TEST_CASE("attention: identity 2x2, rows mix with weights summing to 1") {
    Tensor id = Tensor::from({2, 2}, {1, 0, 0, 1});
    Tensor out = attention(id, id, id);
    // weight-row sums observed through a ones-valued V: every output entry = 1
    Tensor ones = Tensor::full({2, 2}, 1.0);
    Tensor mix = attention(id, id, ones);
    for (size_t i = 0; i < mix.size(); ++i) CHECK(mix.data()[i] == doctest::Approx(1.0).epsilon(1e-9));
    // output rows are convex mixes of V rows, so entries lie in (0, 1)
    for (size_t i = 0; i < out.size(); ++i) {
        CHECK(out.data()[i] > 0.0);
        CHECK(out.data()[i] < 1.0);
    }
    CHECK(out.at(0, 0) + out.at(0, 1) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("attention: single key returns V row 0 exactly") {
    auto rng = make_rng(7);
    Tensor q = Tensor::from({3, 4}, rand_vec(12, rng));
    Tensor k = Tensor::from({1, 4}, rand_vec(4, rng));
    Tensor v = Tensor::from({1, 4}, {0.5, -1.25, 3.0, 0.0});
    Tensor out = attention(q, k, v);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 4; ++j) CHECK(out.at(i, j) == v.at(0, j));
}

TEST_CASE("attention: random causal case matches per-row oracle") {
    for (uint64_t seed = 0; seed < 30; ++seed) {
        auto rng = make_rng(mix_seed(11, seed));
        const int n = 3, m = 3, d = 4;
        auto qv = rand_vec(static_cast<size_t>(n) * d, rng);
        auto kv = rand_vec(static_cast<size_t>(m) * d, rng);
        auto vv = rand_vec(static_cast<size_t>(m) * d, rng);
        std::vector<uint8_t> mask(static_cast<size_t>(n) * m, 0);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j <= i; ++j) mask[static_cast<size_t>(i) * m + j] = 1;
        Tensor out = attention(Tensor::from({n, d}, qv), Tensor::from({m, d}, kv),
                               Tensor::from({m, d}, vv), &mask);
        auto ref = naive_attention(qv, kv, vv, n, m, d, &mask);
        CHECK(max_abs_diff(out.data(), ref.data(), ref.size()) <= 1e-9);
    }
}

TEST_CASE("attention: fully masked row is a degenerate-mask error") {
    Tensor x = Tensor::full({2, 2}, 1.0);
    std::vector<uint8_t> mask = {1, 1, 0, 0};
    CHECK_THROWS_AS(attention(x, x, x, &mask), Error);
    try {
        attention(x, x, x, &mask);
    } catch (const Error & e) {
        CHECK(e.kind() == ErrorKind::input);
    }
}

TEST_CASE("attention: shape mismatch errors") {
    Tensor q = Tensor::full({2, 3}, 1.0);
    Tensor k = Tensor::full({2, 4}, 1.0);
    CHECK_THROWS_AS(attention(q, k, k), Error);
    Tensor v = Tensor::full({3, 3}, 1.0);
    Tensor k3 = Tensor::full({2, 3}, 1.0);
    CHECK_THROWS_AS(attention(q, k3, v), Error);
}

TEST_CASE("softmax rows sum to 1 within 1e-9") {
    for (uint64_t seed = 0; seed < 25; ++seed) {
        auto rng = make_rng(mix_seed(23, seed));
        const int n = 4, m = 6;
        Tensor x = Tensor::from({n, m}, rand_vec(static_cast<size_t>(n) * m, rng, 3.0));
        Tensor s = softmax_rows(x);
        for (int i = 0; i < n; ++i) {
            double sum = 0.0;
            for (int j = 0; j < m; ++j) sum += s.at(i, j);
            CHECK(std::abs(sum - 1.0) <= 1e-9);
        }
    }
}

TEST_CASE("grad_check: sum of squares has exact polynomial gradient") {
    Tensor x = Tensor::from({3}, {1, 2, 3});
    {
        Tape tape;
        x.set_requires_grad(true);
        Tensor y = sum_all(mul(x, x));
        tape.backward(y);
        const auto & g = x.grad();
        CHECK(g[0] == doctest::Approx(2.0).epsilon(1e-12));
        CHECK(g[1] == doctest::Approx(4.0).epsilon(1e-12));
        CHECK(g[2] == doctest::Approx(6.0).epsilon(1e-12));
        x.set_requires_grad(false);
        x.zero_grad();
    }
    double rel = grad_check([](const Tensor & t) { return sum_all(mul(t, t)); }, x);
    CHECK(rel < 1e-6);
}

TEST_CASE("grad_check: cross-entropy of one softmax row") {
    auto rng = make_rng(5);
    Tensor logits = Tensor::from({1, 6}, rand_vec(6, rng));
    double rel = grad_check(
        [](const Tensor & t) { return cross_entropy_rows(t, std::vector<int>{2}); }, logits);
    CHECK(rel < 1e-4);
}

TEST_CASE("grad_check: attention-then-sum over random 3x4 inputs") {
    auto rng = make_rng(9);
    Tensor x = Tensor::from({3, 4}, rand_vec(12, rng));
    double rel = grad_check([](const Tensor & t) { return sum_all(attention(t, t, t)); }, x);
    CHECK(rel < 1e-4);
}

TEST_CASE("grad_check property: composite network over 20+ seeds") {
    for (uint64_t seed = 0; seed < 22; ++seed) {
        auto rng = make_rng(mix_seed(31, seed));
        Tensor x = Tensor::from({3, 4}, rand_vec(12, rng));
        Tensor c1 = Tensor::from({4, 5}, rand_vec(20, rng));
        Tensor c2 = Tensor::from({3, 5}, rand_vec(15, rng));
        Tensor c3 = Tensor::from({6, 4}, rand_vec(24, rng));
        Tensor gamma = Tensor::from({4}, rand_vec(4, rng, 0.3));
        Tensor beta = Tensor::from({4}, rand_vec(4, rng, 0.3));
        Tensor vrow = Tensor::from({5}, rand_vec(5, rng));
        std::vector<int> targets = {1, 3, 0};
        auto f = [&](const Tensor & t) {
            Tensor a = add_rowvec(matmul(t, c1), vrow);
            Tensor b = mul(tanh_t(gelu(a)), c2);
            Tensor ln = layer_norm_rows(t, gamma, beta);
            Tensor att = attention(t, ln, t);
            Tensor joined = concat_cols({slice_cols(att, 0, 2), slice_cols(att, 2, 4)});
            Tensor stacked = concat_rows(slice_rows(joined, 0, 2), slice_rows(joined, 1, 3));
            Tensor ce = cross_entropy_rows(matmul_nt(t, c3), targets);
            Tensor parts = add(sum_all(b), mean_all(stacked));
            Tensor soft = add(sum_all(mul(softmax_rows(t), matmul(t, matmul_nt(c1, c1)))),
                              sum_all(matmul_tn(t, att)));
            return add(add(parts, ce), add(soft, scale(sum_all(sub(t, att)), 0.5)));
        };
        CHECK(grad_check(f, x) <= 1e-4);
    }
}

TEST_CASE("grad_check property: relu away from the kink, embedding scatter") {
    for (uint64_t seed = 0; seed < 20; ++seed) {
        auto rng = make_rng(mix_seed(47, seed));
        auto raw = rand_vec(12, rng);
        for (double & v : raw) v += (v >= 0 ? 0.2 : -0.2); // keep |x| > eps so relu stays smooth
        Tensor x = Tensor::from({3, 4}, raw);
        CHECK(grad_check([](const Tensor & t) { return sum_all(relu(t)); }, x) <= 1e-4);

        Tensor table = Tensor::from({5, 3}, rand_vec(15, rng));
        std::vector<int> ids = {0, 2, 2, 4};
        auto f = [&ids](const Tensor & t) { return sum_all(mul(embedding_rows(t, ids), embedding_rows(t, ids))); };
        CHECK(grad_check(f, table) <= 1e-4);

        Tensor one = Tensor::from({1, 4}, rand_vec(4, rng));
        CHECK(grad_check([](const Tensor & t) { return sum_all(tanh_t(repeat_row(t, 3))); }, one) <= 1e-4);
    }
}

TEST_CASE("grad_check property: masked attention") {
    for (uint64_t seed = 0; seed < 20; ++seed) {
        auto rng = make_rng(mix_seed(59, seed));
        Tensor x = Tensor::from({4, 3}, rand_vec(12, rng));
        std::vector<uint8_t> mask(16, 0);
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j <= i; ++j) mask[static_cast<size_t>(i) * 4 + j] = 1;
        auto f = [&mask](const Tensor & t) { return sum_all(attention(t, t, t, &mask)); };
        CHECK(grad_check(f, x) <= 1e-4);
    }
}

TEST_CASE("adamw: zero gradient and zero weight decay leave parameters unchanged") {
    Parameter p{"w", Tensor::from({3}, {1.0, -2.0, 0.5}), false};
    p.tensor.set_requires_grad(true);
    p.tensor.grad(); // materialize zeros
    std::vector<double> before = p.tensor.values();
    AdamW opt(0.1, 0.9, 0.999, 1e-8, 0.0);
    opt.step({&p});
    CHECK(std::memcmp(before.data(), p.tensor.data(), before.size() * sizeof(double)) == 0);
}

TEST_CASE("adamw: one step on w^2 from w=1 strictly decreases w") {
    Parameter p{"w", Tensor::from({1}, {1.0}), false};
    p.tensor.set_requires_grad(true);
    AdamW opt(0.1);
    {
        Tape tape;
        Tensor loss = mul(p.tensor, p.tensor);
        tape.backward(loss);
    }
    opt.step({&p});
    CHECK(p.tensor.data()[0] < 1.0);
    CHECK(p.tensor.data()[0] > 0.0);
}

TEST_CASE("adamw: 200 steps on a 2-D quadratic reach the optimum within 1e-3") {
    Parameter p{"w", Tensor::from({2}, {2.0, -1.5}), false};
    p.tensor.set_requires_grad(true);
    AdamW opt(0.05, 0.9, 0.999, 1e-8, 0.0);
    Tensor opt_pt = Tensor::from({2}, {1.5, -0.5});
    Tensor scl = Tensor::from({2}, {1.0, 2.0});
    double last = 0.0;
    for (int i = 0; i < 200; ++i) {
        Tape tape;
        Tensor d = sub(p.tensor, opt_pt);
        Tensor loss = sum_all(mul(scl, mul(d, d)));
        last = loss.item();
        opt.zero_grad({&p});
        tape.backward(loss);
        opt.step({&p});
    }
    CHECK(last < 1e-3);
    CHECK(opt.steps_taken() == 200);
}

TEST_CASE("adamw: single-step hand oracle with weight decay") {
    Parameter p{"w", Tensor::from({1}, {1.0}), false};
    p.tensor.set_requires_grad(true);
    p.tensor.grad()[0] = 0.5;
    AdamW opt(0.1, 0.9, 0.999, 1e-8, 0.01);
    opt.step({&p});
    const double m = 0.1 * 0.5, v = 0.001 * 0.25;
    const double mhat = m / 0.1, vhat = v / 0.001;
    const double expect = 1.0 - 0.1 * (mhat / (std::sqrt(vhat) + 1e-8) + 0.01 * 1.0);
    CHECK(p.tensor.data()[0] == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("adamw: frozen parameters are skipped, lr must be positive") {
    Parameter p{"w", Tensor::from({2}, {1.0, 2.0}), true};
    p.tensor.grad() = {5.0, 5.0};
    AdamW opt(0.1);
    opt.step({&p});
    CHECK(p.tensor.data()[0] == 1.0);
    CHECK(p.tensor.data()[1] == 2.0);
    CHECK_THROWS_AS(AdamW(0.0), Error);
    try {
        AdamW bad(-1.0);
    } catch (const Error & e) {
        CHECK(e.kind() == ErrorKind::config);
    }
}

TEST_CASE("determinism: same seed and op sequence give bit-identical results") {
    auto run = [](uint64_t seed) {
        auto rng = make_rng(seed);
        Tensor a = Tensor::randn({4, 4}, rng, 1.0);
        Tensor b = Tensor::randn({4, 4}, rng, 0.5);
        Tensor y = attention(gelu(a), tanh_t(b), softmax_rows(a));
        return y.values();
    };
    auto r1 = run(1234), r2 = run(1234);
    CHECK(std::memcmp(r1.data(), r2.data(), r1.size() * sizeof(double)) == 0);
    auto r3 = run(1235);
    CHECK(std::memcmp(r1.data(), r3.data(), r1.size() * sizeof(double)) != 0);
}

TEST_CASE("tape: no recording without a tape; requires_grad gates recording") {
    Tensor a = Tensor::from({2}, {1.0, 2.0});
    a.set_requires_grad(true);
    Tensor y = mul(a, a); // outside any tape: plain value computation
    CHECK(y.node()->backprop == nullptr);
    {
        Tape tape;
        Tensor b = Tensor::from({2}, {3.0, 4.0});
        Tensor z = mul(b, b); // no input requires grad
        CHECK(tape.size() == 0);
        Tensor w = mul(a, b);
        CHECK(tape.size() == 1);
        tape.backward(sum_all(w));
        CHECK(a.grad()[0] == doctest::Approx(3.0));
        CHECK(b.node()->grad.empty());
    }
}

TEST_CASE("non-finite detection raises numeric errors") {
    Tensor x = Tensor::from({2}, {1.0, std::numeric_limits<double>::infinity()});
    CHECK_THROWS_AS(ensure_finite(x, "x"), Error);
    try {
        ensure_finite(x, "x");
    } catch (const Error & e) {
        CHECK(e.kind() == ErrorKind::numeric);
        CHECK(exit_code(e.kind()) == 5);
    }
}

TEST_CASE("linear layer matches explicit matmul and collects parameters") {
    auto rng = make_rng(77);
    Linear lin("l", 3, 2, rng);
    Tensor x = Tensor::from({2, 3}, rand_vec(6, rng));
    Tensor y = lin.forward(x);
    for (int i = 0; i < 2; ++i)
        for (int o = 0; o < 2; ++o) {
            double acc = lin.b.tensor.data()[o];
            for (int j = 0; j < 3; ++j) acc += x.at(i, j) * lin.w.tensor.at(o, j);
            CHECK(y.at(i, o) == doctest::Approx(acc).epsilon(1e-12));
        }
    std::vector<Parameter *> ps;
    lin.collect(ps);
    CHECK(ps.size() == 2);
    lin.set_frozen(true);
    CHECK(ps[0]->frozen);
}

TEST_CASE("grad_check flows through a full encoder block") {
    auto rng = make_rng(101);
    EncoderBlock blk("b", 4, 2, 8, rng);
    Tensor x = Tensor::from({3, 4}, rand_vec(12, rng, 0.5));
    CHECK(grad_check([&blk](const Tensor & t) { return sum_all(blk.forward(t)); }, x) <= 1e-4);

    // gradient reaches every block parameter
    std::vector<Parameter *> ps;
    blk.collect(ps);
    Tape tape;
    Tensor loss = sum_all(blk.forward(x));
    tape.backward(loss);
    for (Parameter * p : ps) {
        const auto & g = p->tensor.grad_raw();
        bool any = false;
        for (double v : g)
            if (v != 0.0) any = true;
        CHECK_MESSAGE(any, p->name);
    }
}

TEST_CASE("pool classifier learns a linearly separable toy problem") {
    auto rng = make_rng(2024);
    std::normal_distribution<double> nd(0.0, 0.3);
    std::vector<std::vector<double>> xs, xv;
    std::vector<int> ys, yv;
    for (int n = 0; n < 120; ++n) {
        int cls = n % 3;
        std::vector<double> v(6);
        for (int j = 0; j < 6; ++j) v[static_cast<size_t>(j)] = nd(rng);
        v[static_cast<size_t>(cls)] += 3.0;
        if (n < 90) {
            xs.push_back(v);
            ys.push_back(cls);
        } else {
            xv.push_back(v);
            yv.push_back(cls);
        }
    }
    auto init_rng = make_rng(5);
    PoolClassifier clf("probe", 6, 16, 8, 3, init_rng);
    double acc = clf.train_classifier(xs, ys, xv, yv, 30, 16, 1e-2, 99);
    CHECK(acc >= 0.95);
    Tensor e = clf.embed(Tensor::from({1, 6}, xs[0]));
    CHECK(e.cols() == 8);
}
