#include "prefixvc/prefix_encoder.hpp"

#include <cstring>
#include <numeric>

namespace prefixvc {

MelLike temporal_shuffle(const MelLike & mel, uint64_t seed) {
    if (mel.t < 1) throw Error(ErrorKind::input, "temporal_shuffle: empty mel");
    std::vector<int> perm(static_cast<size_t>(mel.t));
    std::iota(perm.begin(), perm.end(), 0);
    auto rng = make_rng(seed);
    for (size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng() % i]);
    MelLike out;
    out.t = mel.t;
    out.d = mel.d;
    out.frames.resize(mel.frames.size());
    for (int r = 0; r < mel.t; ++r)
        std::memcpy(&out.frames[static_cast<size_t>(r) * mel.d],
                    &mel.frames[static_cast<size_t>(perm[static_cast<size_t>(r)]) * mel.d],
                    sizeof(double) * static_cast<size_t>(mel.d));
    return out;
}

StyleEncoder::StyleEncoder(const PrefixEncoderConfig & cfg, std::mt19937_64 & rng)
    : d_style(cfg.d_style) {
    in_proj = Linear("style.in", cfg.mel_channels, cfg.d_style, rng);
    blocks.reserve(static_cast<size_t>(cfg.style_layers));
    for (int l = 0; l < cfg.style_layers; ++l)
        blocks.emplace_back("style.b" + std::to_string(l), cfg.d_style, cfg.style_heads, cfg.style_ffn, rng);
    out_ln = LayerNorm("style.ln", cfg.d_style);
    initialized = true;
}

Tensor StyleEncoder::forward(const MelLike & mel) const {
    if (mel.t < 1) throw Error(ErrorKind::input, "encode_style: empty mel");
    return forward(Tensor::from({mel.t, mel.d}, mel.frames));
}

Tensor StyleEncoder::forward(const Tensor & frames) const {
    if (!initialized) throw Error(ErrorKind::state, "encode_style: encoder not initialized");
    Tensor x = add(in_proj.forward(frames), sinusoidal_positions(frames.rows(), d_style));
    for (const auto & b : blocks) x = b.forward(x);
    return out_ln.forward(x);
}

void StyleEncoder::collect(std::vector<Parameter *> & out) {
    in_proj.collect(out);
    for (auto & b : blocks) b.collect(out);
    out_ln.collect(out);
}

void StyleEncoder::set_frozen(bool frozen) {
    in_proj.set_frozen(frozen);
    for (auto & b : blocks) b.set_frozen(frozen);
    out_ln.set_frozen(frozen);
}

Perceiver::Perceiver(const PrefixEncoderConfig & cfg, std::mt19937_64 & rng) {
    if (cfg.latents < 1) throw Error(ErrorKind::config, "perceiver: k must be positive");
    latents = Parameter{"perceiver.latents", Tensor::randn({cfg.latents, cfg.d_style}, rng, 0.5), false};
    latents.tensor.set_requires_grad(true);
    blocks.resize(static_cast<size_t>(cfg.perceiver_blocks));
    for (int i = 0; i < cfg.perceiver_blocks; ++i) {
        auto & b = blocks[static_cast<size_t>(i)];
        const std::string pre = "perceiver.b" + std::to_string(i);
        b.ln1 = LayerNorm(pre + ".ln1", cfg.d_style);
        b.ln2 = LayerNorm(pre + ".ln2", cfg.d_style);
        b.cross = CrossAttention(pre + ".cross", cfg.d_style, cfg.style_heads, rng);
        b.fc1 = Linear(pre + ".fc1", cfg.d_style, cfg.style_ffn, rng);
        b.fc2 = Linear(pre + ".fc2", cfg.style_ffn, cfg.d_style, rng);
    }
    initialized = true;
}

Tensor Perceiver::forward(const Tensor & features) const {
    if (!initialized) throw Error(ErrorKind::state, "perceive: perceiver not initialized");
    if (!features.defined() || features.rows() < 1)
        throw Error(ErrorKind::input, "perceive: empty features");
    Tensor x = latents.tensor;
    for (const auto & b : blocks) {
        x = add(x, b.cross.forward(b.ln1.forward(x), features));
        x = add(x, b.fc2.forward(gelu(b.fc1.forward(b.ln2.forward(x)))));
    }
    return x;
}

void Perceiver::collect(std::vector<Parameter *> & out) {
    out.push_back(&latents);
    for (auto & b : blocks) {
        b.ln1.collect(out);
        b.cross.collect(out);
        b.ln2.collect(out);
        b.fc1.collect(out);
        b.fc2.collect(out);
    }
}

void Perceiver::set_frozen(bool frozen) {
    latents.frozen = frozen;
    latents.tensor.set_requires_grad(!frozen);
    for (auto & b : blocks) {
        b.ln1.set_frozen(frozen);
        b.cross.set_frozen(frozen);
        b.ln2.set_frozen(frozen);
        b.fc1.set_frozen(frozen);
        b.fc2.set_frozen(frozen);
    }
}

EmotionEmbedder::EmotionEmbedder(int mel_channels, int d_emo, int emotions, uint64_t init_seed) {
    auto rng = make_rng(init_seed);
    clf = PoolClassifier("emotion_embedder", mel_channels, 32, d_emo, emotions, rng);
}

double EmotionEmbedder::train(const std::vector<MelLike> & mels, const std::vector<int> & labels,
                              const std::vector<MelLike> & val_mels, const std::vector<int> & val_labels,
                              int epochs, int batch, double lr, uint64_t seed) {
    if (frozen) throw Error(ErrorKind::state, "emotion embedder already frozen");
    std::vector<std::vector<double>> x, xv;
    x.reserve(mels.size());
    for (const auto & m : mels) x.push_back(mean_frame(m));
    for (const auto & m : val_mels) xv.push_back(mean_frame(m));
    heldout_accuracy = clf.train_classifier(x, labels, xv, val_labels, epochs, batch, lr, seed);
    return heldout_accuracy;
}

void EmotionEmbedder::freeze() {
    if (!clf.trained) throw Error(ErrorKind::state, "emotion embedder not trained");
    if (heldout_accuracy < kAccuracyFloor)
        throw Error(ErrorKind::state, "emotion embedder below the accuracy floor");
    clf.set_frozen(true);
    frozen = true;
}

Tensor EmotionEmbedder::embed(const MelLike & mel) const {
    if (!clf.trained) throw Error(ErrorKind::state, "emotion embedder not trained");
    return clf.embed(Tensor::from({1, clf.in_dim}, mean_frame(mel)));
}

int EmotionEmbedder::predict(const MelLike & mel) const {
    if (!clf.trained) throw Error(ErrorKind::state, "emotion embedder not trained");
    return clf.predict_row(mean_frame(mel).data());
}

PrefixEncoder::PrefixEncoder(const PrefixEncoderConfig & c, std::mt19937_64 & rng) : cfg(c) {
    style = StyleEncoder(cfg, rng);
    perceiver = Perceiver(cfg, rng);
    fusion = Linear("prefix.fusion", cfg.d_style + cfg.d_emo, cfg.d_model, rng);
    initialized = true;
}

Tensor PrefixEncoder::fuse(const Tensor & s, const Tensor & emotion_emb) const {
    if (emotion_emb.rows() != 1 || emotion_emb.cols() != cfg.d_emo)
        throw Error(ErrorKind::config, "fuse_emotion: emotion embedding must be 1 x d_emo");
    if (s.cols() != cfg.d_style) throw Error(ErrorKind::config, "fuse_emotion: style width mismatch");
    return fusion.forward(concat_cols({s, repeat_row(emotion_emb, s.rows())}));
}

Tensor PrefixEncoder::encode(const MelLike & mel_ref, const Tensor & emotion_emb,
                             std::optional<uint64_t> shuffle_seed) const {
    if (!initialized) throw Error(ErrorKind::state, "prefix encoder not initialized");
    const MelLike * input = &mel_ref;
    MelLike shuffled;
    if (shuffle_seed) {
        shuffled = temporal_shuffle(mel_ref, *shuffle_seed);
        input = &shuffled;
    }
    return fuse(perceiver.forward(style.forward(*input)), emotion_emb);
}

void PrefixEncoder::collect(std::vector<Parameter *> & out) {
    style.collect(out);
    perceiver.collect(out);
    fusion.collect(out);
}

void PrefixEncoder::set_frozen(bool frozen) {
    style.set_frozen(frozen);
    perceiver.set_frozen(frozen);
    fusion.set_frozen(frozen);
}

} // namespace prefixvc
