#include "doctest.h"
#include "prefixvc/prefix_encoder.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

using namespace prefixvc;

namespace {

PrefixEncoderConfig tiny_cfg() {
    PrefixEncoderConfig cfg;
    cfg.mel_channels = 16;
    cfg.d_style = 8;
    cfg.style_layers = 1;
    cfg.style_heads = 2;
    cfg.style_ffn = 16;
    cfg.latents = 3;
    cfg.d_emo = 4;
    cfg.d_model = 6;
    return cfg;
}

MelLike random_mel(int t, int d, uint64_t seed) {
    auto rng = make_rng(seed);
    std::normal_distribution<double> nd(0.0, 1.0);
    MelLike m;
    m.t = t;
    m.d = d;
    m.frames.resize(static_cast<size_t>(t) * d);
    for (double & v : m.frames) v = nd(rng);
    return m;
}

std::vector<std::vector<double>> sorted_rows(const MelLike & m) {
    std::vector<std::vector<double>> rows(static_cast<size_t>(m.t));
    for (int i = 0; i < m.t; ++i)
        rows[static_cast<size_t>(i)].assign(m.frames.begin() + static_cast<size_t>(i) * m.d,
                                            m.frames.begin() + static_cast<size_t>(i + 1) * m.d);
    std::sort(rows.begin(), rows.end());
    return rows;
}

double cosine(const std::vector<double> & a, const std::vector<double> & b) {
    double dot = 0, na = 0, nb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

} // namespace

TEST_CASE("temporal_shuffle: T=1 identity, row multiset and moments exactly preserved") {
    MelLike one = random_mel(1, 5, 3);
    MelLike s1 = temporal_shuffle(one, 999);
    CHECK(std::memcmp(one.frames.data(), s1.frames.data(), one.frames.size() * sizeof(double)) == 0);

    for (uint64_t seed = 0; seed < 25; ++seed) {
        MelLike m = random_mel(17, 6, mix_seed(5, seed));
        MelLike s = temporal_shuffle(m, seed);
        REQUIRE(s.t == m.t);
        REQUIRE(s.d == m.d);
        auto ra = sorted_rows(m), rb = sorted_rows(s);
        CHECK(ra == rb); // bitwise equality of the sorted row multisets
        // moments computed in sorted order are bit-identical
        for (int j = 0; j < m.d; ++j) {
            double sum_a = 0, sum_b = 0, sq_a = 0, sq_b = 0;
            for (int i = 0; i < m.t; ++i) {
                sum_a += ra[static_cast<size_t>(i)][static_cast<size_t>(j)];
                sum_b += rb[static_cast<size_t>(i)][static_cast<size_t>(j)];
                sq_a += ra[static_cast<size_t>(i)][static_cast<size_t>(j)] * ra[static_cast<size_t>(i)][static_cast<size_t>(j)];
                sq_b += rb[static_cast<size_t>(i)][static_cast<size_t>(j)] * rb[static_cast<size_t>(i)][static_cast<size_t>(j)];
            }
            CHECK(sum_a == sum_b);
            CHECK(sq_a == sq_b);
        }
    }
}

TEST_CASE("temporal_shuffle: seeded draw equals the documented Fisher-Yates permutation") {
    for (uint64_t seed = 1; seed <= 12; ++seed) {
        MelLike m = random_mel(3, 4, 77);
        // independent re-derivation of the permutation
        std::vector<int> perm = {0, 1, 2};
        auto rng = make_rng(seed);
        for (size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng() % i]);
        MelLike s = temporal_shuffle(m, seed);
        for (int r = 0; r < 3; ++r)
            for (int j = 0; j < 4; ++j) CHECK(s.at(r, j) == m.at(perm[static_cast<size_t>(r)], j));
    }
}

TEST_CASE("encode_style: shape contract, gradient reach, uninitialized state error") {
    PrefixEncoderConfig cfg = tiny_cfg();
    auto rng = make_rng(42);
    StyleEncoder enc(cfg, rng);
    for (int t : {2, 50, 120}) {
        Tensor f = enc.forward(random_mel(t, cfg.mel_channels, static_cast<uint64_t>(t)));
        CHECK(f.rows() == t);
        CHECK(f.cols() == cfg.d_style);
    }

    std::vector<Parameter *> ps;
    enc.collect(ps);
    Tape tape;
    Tensor loss = sum_all(enc.forward(random_mel(7, cfg.mel_channels, 5)));
    tape.backward(loss);
    for (Parameter * p : ps) {
        bool any = false;
        for (double g : p->tensor.grad_raw())
            if (g != 0.0) any = true;
        CHECK_MESSAGE(any, p->name);
    }

    StyleEncoder blank;
    CHECK_THROWS_AS(blank.forward(random_mel(3, cfg.mel_channels, 1)), Error);
    try {
        blank.forward(random_mel(3, cfg.mel_channels, 1));
    } catch (const Error & e) {
        CHECK(e.kind() == ErrorKind::state);
    }
}

TEST_CASE("perceive: fixed-length bottleneck for T in {2,10,50,200}") {
    PrefixEncoderConfig cfg = tiny_cfg();
    auto rng = make_rng(8);
    StyleEncoder enc(cfg, rng);
    Perceiver pv(cfg, rng);
    for (int t : {2, 10, 50, 200}) {
        Tensor s = pv.forward(enc.forward(random_mel(t, cfg.mel_channels, static_cast<uint64_t>(t) + 9)));
        CHECK(s.rows() == cfg.latents);
        CHECK(s.cols() == cfg.d_style);
    }
    CHECK_THROWS_AS(pv.forward(Tensor{}), Error);
}

TEST_CASE("perceive: identical keys make duplication a no-op") {
    PrefixEncoderConfig cfg = tiny_cfg();
    auto rng = make_rng(15);
    Perceiver pv(cfg, rng);
    auto vrng = make_rng(3);
    Tensor row = Tensor::randn({1, cfg.d_style}, vrng, 1.0);
    Tensor f3 = repeat_row(row, 3);
    Tensor f9 = repeat_row(row, 9);
    Tensor s3 = pv.forward(f3);
    Tensor s9 = pv.forward(f9);
    for (size_t i = 0; i < s3.size(); ++i)
        CHECK(s3.data()[i] == doctest::Approx(s9.data()[i]).epsilon(1e-12));
}

TEST_CASE("perceive: single latent and single feature match the scalar hand computation") {
    PrefixEncoderConfig cfg = tiny_cfg();
    cfg.latents = 1;
    cfg.d_style = 2;
    cfg.style_heads = 1;
    cfg.style_ffn = 3;
    cfg.perceiver_blocks = 1;
    auto rng = make_rng(21);
    Perceiver pv(cfg, rng);
    auto frng = make_rng(4);
    Tensor f = Tensor::randn({1, 2}, frng, 1.0);
    Tensor s = pv.forward(f);

    auto layer_norm2 = [](double a, double b, double * out) {
        const double mu = 0.5 * (a + b);
        const double var = 0.5 * ((a - mu) * (a - mu) + (b - mu) * (b - mu));
        const double inv = 1.0 / std::sqrt(var + 1e-5);
        out[0] = (a - mu) * inv;
        out[1] = (b - mu) * inv;
    };
    auto linear = [](const Tensor & w, const Tensor & bias, const double * x, int in, int out, double * y) {
        for (int o = 0; o < out; ++o) {
            y[o] = bias.data()[o];
            for (int i = 0; i < in; ++i) y[o] += w.at(o, i) * x[i];
        }
    };
    const auto & blk = pv.blocks[0];
    const double l0 = pv.latents.tensor.at(0, 0), l1 = pv.latents.tensor.at(0, 1);
    double ln[2];
    layer_norm2(l0, l1, ln);
    // single key: attention output is exactly the value projection of f
    double v[2];
    linear(blk.cross.wv.w.tensor, blk.cross.wv.b.tensor, f.data(), 2, 2, v);
    double o[2];
    linear(blk.cross.wo.w.tensor, blk.cross.wo.b.tensor, v, 2, 2, o);
    double x1[2] = {l0 + o[0], l1 + o[1]};
    double ln2v[2];
    layer_norm2(x1[0], x1[1], ln2v);
    double h[3];
    linear(blk.fc1.w.tensor, blk.fc1.b.tensor, ln2v, 2, 3, h);
    for (double & z : h) z = 0.5 * z * (1.0 + std::erf(z * 0.7071067811865475244));
    double mlp[2];
    linear(blk.fc2.w.tensor, blk.fc2.b.tensor, h, 3, 2, mlp);
    CHECK(s.at(0, 0) == doctest::Approx(x1[0] + mlp[0]).epsilon(1e-12));
    CHECK(s.at(0, 1) == doctest::Approx(x1[1] + mlp[1]).epsilon(1e-12));
}

TEST_CASE("emotion embedder: accuracy floor, determinism, cosine structure, state errors") {
    GenConfig gcfg;
    gcfg.contents = 16;
    gcfg.seed = 31;
    CorpusSplit sp = make_split(gcfg, {11, 2, 3});
    std::vector<MelLike> train_mels, test_mels;
    std::vector<int> train_y, test_y;
    for (const auto & s : sp.train) {
        train_mels.push_back(gen_utterance(s, gcfg));
        train_y.push_back(s.emotion_id);
    }
    for (const auto & s : sp.test) {
        test_mels.push_back(gen_utterance(s, gcfg));
        test_y.push_back(s.emotion_id);
    }

    EmotionEmbedder emb(gcfg.channels, 16, gcfg.emotions, 1);
    CHECK_THROWS_AS(emb.embed(train_mels[0]), Error);
    double acc = emb.train(train_mels, train_y, test_mels, test_y);
    CHECK(acc >= 0.95);
    emb.freeze();
    CHECK(emb.frozen);

    Tensor e1 = emb.embed(test_mels[0]);
    Tensor e2 = emb.embed(test_mels[0]);
    CHECK(std::memcmp(e1.data(), e2.data(), e1.size() * sizeof(double)) == 0);
    CHECK(e1.cols() == 16);

    // same-emotion embeddings sit closer than cross-emotion ones
    std::vector<std::vector<double>> es;
    for (const auto & m : test_mels) {
        Tensor e = emb.embed(m);
        es.emplace_back(e.data(), e.data() + e.size());
    }
    double same_sum = 0, cross_sum = 0;
    int same_n = 0, cross_n = 0;
    for (size_t i = 0; i < es.size(); ++i)
        for (size_t j = i + 1; j < es.size(); ++j) {
            const double c = cosine(es[i], es[j]);
            if (test_y[i] == test_y[j]) {
                same_sum += c;
                ++same_n;
            } else {
                cross_sum += c;
                ++cross_n;
            }
        }
    CHECK(same_sum / same_n > cross_sum / cross_n);

    // an embedder that cannot reach the floor refuses to freeze
    EmotionEmbedder weak(gcfg.channels, 16, gcfg.emotions, 2);
    std::vector<int> shuffled_y = train_y;
    auto srng = make_rng(9);
    for (size_t i = shuffled_y.size(); i > 1; --i) std::swap(shuffled_y[i - 1], shuffled_y[srng() % i]);
    weak.train(train_mels, shuffled_y, test_mels, test_y, 3, 32, 1e-3, 5);
    CHECK_THROWS_AS(weak.freeze(), Error);
}

TEST_CASE("fuse_emotion: zero projection, broadcast semantics, hand-set scalar projection") {
    PrefixEncoderConfig cfg = tiny_cfg();
    cfg.latents = 2;
    auto rng = make_rng(33);
    PrefixEncoder pe(cfg, rng);

    auto srng = make_rng(6);
    Tensor s = Tensor::randn({2, cfg.d_style}, srng, 1.0);
    Tensor e = Tensor::randn({1, cfg.d_emo}, srng, 1.0);

    std::fill(pe.fusion.w.tensor.values().begin(), pe.fusion.w.tensor.values().end(), 0.0);
    std::fill(pe.fusion.b.tensor.values().begin(), pe.fusion.b.tensor.values().end(), 0.0);
    Tensor zero = pe.fuse(s, e);
    for (size_t i = 0; i < zero.size(); ++i) CHECK(zero.data()[i] == 0.0);

    // weights reading only the e-columns make both rows identical
    for (int o = 0; o < cfg.d_model; ++o)
        for (int j = 0; j < cfg.d_emo; ++j) pe.fusion.w.tensor.at(o, cfg.d_style + j) = 0.1 * (o + 1) + 0.01 * j;
    Tensor bc = pe.fuse(s, e);
    for (int o = 0; o < cfg.d_model; ++o) CHECK(bc.at(0, o) == bc.at(1, o));

    // hand-set full projection vs scalar loop
    auto wrng = make_rng(12);
    PrefixEncoderConfig one = tiny_cfg();
    one.latents = 2;
    one.d_model = 1;
    PrefixEncoder pe1(one, wrng);
    auto vrng = make_rng(13);
    Tensor s1 = Tensor::randn({2, one.d_style}, vrng, 1.0);
    Tensor e1 = Tensor::randn({1, one.d_emo}, vrng, 1.0);
    Tensor out = pe1.fuse(s1, e1);
    for (int r = 0; r < 2; ++r) {
        double acc = pe1.fusion.b.tensor.data()[0];
        for (int j = 0; j < one.d_style; ++j) acc += pe1.fusion.w.tensor.at(0, j) * s1.at(r, j);
        for (int j = 0; j < one.d_emo; ++j) acc += pe1.fusion.w.tensor.at(0, one.d_style + j) * e1.at(0, j);
        CHECK(out.at(r, 0) == doctest::Approx(acc).epsilon(1e-12));
    }

    Tensor bad_e = Tensor::zeros({1, cfg.d_emo + 1});
    CHECK_THROWS_AS(pe.fuse(s, bad_e), Error);
}

TEST_CASE("prefix encoder: end-to-end differentiability and parameter gradients") {
    PrefixEncoderConfig cfg = tiny_cfg();
    auto rng = make_rng(50);
    PrefixEncoder pe(cfg, rng);
    MelLike mel = random_mel(9, cfg.mel_channels, 77);
    auto erng = make_rng(2);
    Tensor e = Tensor::randn({1, cfg.d_emo}, erng, 1.0);

    auto loss = [&]() { return sum_all(pe.encode(mel, e, 123)); };
    CHECK(param_grad_check(loss, pe.perceiver.latents.tensor) <= 1e-4);
    CHECK(param_grad_check(loss, pe.fusion.w.tensor) <= 1e-4);
    CHECK(param_grad_check(loss, pe.style.blocks[0].attn.wq.w.tensor) <= 1e-4);

    std::vector<Parameter *> ps;
    pe.collect(ps);
    Tape tape;
    Tensor l = loss();
    tape.backward(l);
    int with_grad = 0;
    for (Parameter * p : ps) {
        bool any = false;
        for (double g : p->tensor.grad_raw())
            if (g != 0.0) any = true;
        if (any) ++with_grad;
    }
    CHECK(with_grad == static_cast<int>(ps.size()));
}

TEST_CASE("prefix encoder: shuffles of one utterance stay closer than different utterances") {
    PrefixEncoderConfig cfg = tiny_cfg();
    auto rng = make_rng(4);
    PrefixEncoder pe(cfg, rng);
    GenConfig gcfg;
    gcfg.contents = 8;
    gcfg.seed = 3;

    auto erng = make_rng(5);
    Tensor e = Tensor::randn({1, cfg.d_emo}, erng, 0.5);
    auto embed_of = [&](const MelLike & m, uint64_t shuffle_seed) {
        Tensor E = pe.encode(m, e, shuffle_seed);
        return std::vector<double>(E.data(), E.data() + E.size());
    };
    auto dist = [](const std::vector<double> & a, const std::vector<double> & b) {
        double d2 = 0;
        for (size_t i = 0; i < a.size(); ++i) d2 += (a[i] - b[i]) * (a[i] - b[i]);
        return std::sqrt(d2);
    };

    std::vector<MelLike> mels;
    for (int c = 0; c < gcfg.contents; ++c)
        for (int s = 0; s < gcfg.speakers; ++s)
            for (int em = 0; em < 2; ++em) mels.push_back(gen_utterance(make_spec(gcfg, c, s, em), gcfg));
    REQUIRE(mels.size() >= 50);

    double intra = 0, inter = 0;
    int intra_n = 0, inter_n = 0;
    std::vector<std::vector<double>> firsts;
    for (size_t i = 0; i < mels.size(); ++i) {
        auto a = embed_of(mels[i], mix_seed(900, i));
        auto b = embed_of(mels[i], mix_seed(901, i));
        intra += dist(a, b);
        ++intra_n;
        firsts.push_back(std::move(a));
    }
    for (size_t i = 0; i < firsts.size(); ++i)
        for (size_t j = i + 1; j < firsts.size(); j += 7) {
            inter += dist(firsts[i], firsts[j]);
            ++inter_n;
        }
    CHECK(intra / intra_n < inter / inter_n);
}
