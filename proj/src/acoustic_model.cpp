#include "prefixvc/acoustic_model.hpp"

#include <cmath>
#include <cstring>

namespace prefixvc {

void FlowConfig::validate() const {
    if (audio_vocab < 1) throw Error(ErrorKind::config, "flow: audio_vocab must be positive");
    if (mel_channels < 1) throw Error(ErrorKind::config, "flow: mel_channels must be positive");
    if (d_model < 1 || layers < 1 || ffn < 1)
        throw Error(ErrorKind::config, "flow: model dimensions must be positive");
    if (heads < 1 || d_model % heads != 0)
        throw Error(ErrorKind::config, "flow: d_model must be divisible by heads");
}

ConditioningPack condition_pack(const TokenSeq & a, const TokenSeq & a_ref, const MelLike & m_ref) {
    if (a.kind != TokenKind::audio || a_ref.kind != TokenKind::audio)
        throw Error(ErrorKind::input, "conditioning expects audio tokens");
    if (a.tokens.empty()) throw Error(ErrorKind::input, "conditioning: empty target token sequence");
    if (static_cast<int>(a_ref.tokens.size()) != m_ref.t)
        throw Error(ErrorKind::input, "conditioning: reference tokens and mel frames disagree in length");

    ConditioningPack pack;
    pack.ref_tokens = a_ref.tokens;
    pack.tgt_tokens = a.tokens;
    pack.ref_mel = m_ref;
    return pack;
}

ConditioningPack mask_ref_tokens(const ConditioningPack & pack, int mask_id) {
    ConditioningPack out = pack;
    std::fill(out.ref_tokens.begin(), out.ref_tokens.end(), mask_id);
    return out;
}

void apply_dc_jitter(MelLike & ref_mel, MelLike & target, const std::vector<int> & channels,
                     double sigma, std::mt19937_64 & rng) {
    if (sigma < 0.0) throw Error(ErrorKind::config, "jitter sigma must be non-negative");
    std::normal_distribution<double> dist(0.0, sigma);
    for (int c : channels) {
        if (c < 0 || (ref_mel.t > 0 && c >= ref_mel.d) || c >= target.d)
            throw Error(ErrorKind::input, "jitter channel out of range");
        const double delta = dist(rng);
        for (int i = 0; i < ref_mel.t; ++i) ref_mel.at(i, c) += delta;
        for (int i = 0; i < target.t; ++i) target.at(i, c) += delta;
    }
}

Tensor mel_to_tensor(const MelLike & m) {
    Tensor out = Tensor::zeros({m.t, m.d});
    std::memcpy(out.data(), m.frames.data(), sizeof(double) * m.frames.size());
    return out;
}

MelLike tensor_to_mel(const Tensor & t) {
    MelLike m;
    m.t = t.rows();
    m.d = t.cols();
    m.frames.assign(t.data(), t.data() + t.size());
    return m;
}

Tensor interpolate_path(const Tensor & x0, const Tensor & x1, double t) {
    if (x0.rows() != x1.rows() || x0.cols() != x1.cols())
        throw Error(ErrorKind::shape, "path endpoints must share a shape");
    if (t < 0.0 || t > 1.0) throw Error(ErrorKind::input, "path time must lie in [0, 1]");
    if (t == 0.0) return x0;
    if (t == 1.0) return x1;
    return add(scale(x0, 1.0 - t), scale(x1, t));
}

Tensor fm_objective(const Tensor & u, const Tensor & x0, const Tensor & x1) {
    if (u.rows() != x1.rows() || u.cols() != x1.cols())
        throw Error(ErrorKind::shape, "velocity and target must share a shape");
    Tensor r = sub(u, sub(x1, x0));
    return mean_all(mul(r, r));
}

FlowDecoder::FlowDecoder(const FlowConfig & c, uint64_t seed) : cfg(c) {
    cfg.validate();
    std::mt19937_64 rng = make_rng(seed);
    // one extra embedding row: the reference-token mask id
    tok_emb = Parameter("flow.tok_emb", Tensor::randn({cfg.audio_vocab + 1, cfg.d_model}, rng, 0.5), true);
    in_proj = Linear("flow.in_proj", cfg.mel_channels + 2, cfg.d_model, rng);
    blocks.reserve(cfg.layers);
    for (int l = 0; l < cfg.layers; ++l)
        blocks.emplace_back("flow.l" + std::to_string(l), cfg.d_model, cfg.heads, cfg.ffn, rng);
    final_ln = LayerNorm("flow.final_ln", cfg.d_model);
    out_proj = Linear("flow.out_proj", cfg.d_model, cfg.mel_channels, rng);
    initialized = true;
}

Tensor FlowDecoder::assemble(const ConditioningPack & pack, const Tensor & x_t) const {
    const int r = pack.ref_len(), n = pack.tgt_len(), d = cfg.mel_channels;
    if (pack.ref_mel.t != r || (r > 0 && pack.ref_mel.d != d))
        throw Error(ErrorKind::shape, "conditioning mel does not match the model's channel count");
    if (x_t.rows() != n || x_t.cols() != d)
        throw Error(ErrorKind::shape, "flow state does not match the target region");

    Tensor tags = Tensor::zeros({n, 2});
    for (int i = 0; i < n; ++i) tags.data()[static_cast<size_t>(i) * 2 + 1] = 1.0;
    Tensor tgt_rows = concat_cols({x_t, tags});
    if (r == 0) return tgt_rows;

    // reference rows carry the prompt mel verbatim; no projection happens
    // before the shared input layer sees them
    Tensor ref_rows = Tensor::zeros({r, d + 2});
    for (int i = 0; i < r; ++i) {
        std::memcpy(ref_rows.data() + static_cast<size_t>(i) * (d + 2),
                    pack.ref_mel.frames.data() + static_cast<size_t>(i) * d,
                    sizeof(double) * static_cast<size_t>(d));
        ref_rows.data()[static_cast<size_t>(i) * (d + 2) + d] = 1.0;
    }
    return concat_rows(ref_rows, tgt_rows);
}

Tensor FlowDecoder::velocity_full(const ConditioningPack & pack, const Tensor & x_t, double t) const {
    if (!initialized) throw Error(ErrorKind::state, "flow decoder not initialized");
    if (t < 0.0 || t > 1.0) throw Error(ErrorKind::input, "flow time must lie in [0, 1]");
    for (int id : pack.ref_tokens)
        if (id < 0 || id > cfg.audio_vocab) throw Error(ErrorKind::input, "flow: reference token out of range");
    for (int id : pack.tgt_tokens)
        if (id < 0 || id >= cfg.audio_vocab) throw Error(ErrorKind::input, "flow: target token out of range");

    std::vector<int> all_tokens = pack.ref_tokens;
    all_tokens.insert(all_tokens.end(), pack.tgt_tokens.begin(), pack.tgt_tokens.end());

    Tensor h = in_proj.forward(assemble(pack, x_t));
    h = add(h, embedding_rows(tok_emb.tensor, all_tokens));
    h = add(h, sinusoidal_positions(pack.total(), cfg.d_model));
    h = add_rowvec(h, sinusoidal_time_embedding(t, cfg.d_model));
    for (const auto & blk : blocks) h = blk.forward(h);
    return out_proj.forward(final_ln.forward(h));
}

Tensor FlowDecoder::velocity(const ConditioningPack & pack, const Tensor & x_t, double t) const {
    Tensor full = velocity_full(pack, x_t, t);
    return slice_rows(full, pack.ref_len(), pack.total());
}

void FlowDecoder::collect(std::vector<Parameter *> & out) {
    out.push_back(&tok_emb);
    in_proj.collect(out);
    for (auto & blk : blocks) blk.collect(out);
    final_ln.collect(out);
    out_proj.collect(out);
}

void FlowDecoder::set_frozen(bool frozen) {
    std::vector<Parameter *> ps;
    collect(ps);
    for (auto * p : ps) p->frozen = frozen;
}

FlowBatch make_flow_batch(const ConditioningPack & cond, const MelLike & target, std::mt19937_64 & rng) {
    if (target.t != cond.tgt_len())
        throw Error(ErrorKind::input, "flow batch: target mel does not match the token sequence");
    FlowBatch b;
    b.cond = cond;
    b.x1 = mel_to_tensor(target);
    b.x0 = Tensor::randn({target.t, target.d}, rng, 1.0);
    b.t = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    return b;
}

Tensor fm_loss(const FlowDecoder & m, const FlowBatch & b) {
    if (b.t < 0.0 || b.t > 1.0) throw Error(ErrorKind::input, "flow batch time must lie in [0, 1]");
    Tensor x_t = interpolate_path(b.x0, b.x1, b.t);
    return fm_objective(m.velocity(b.cond, x_t, b.t), b.x0, b.x1);
}

double fm_train_step(FlowDecoder & m, const std::vector<FlowBatch> & batch, AdamW & opt,
                     const std::vector<Parameter *> & params) {
    if (batch.empty()) throw Error(ErrorKind::input, "flow training step on an empty batch");
    Tape tape;
    Tensor total;
    for (const auto & b : batch) {
        Tensor l = fm_loss(m, b);
        total = total.defined() ? add(total, l) : l;
    }
    Tensor loss = scale(total, 1.0 / static_cast<double>(batch.size()));
    const double value = loss.data()[0];
    if (!std::isfinite(value))
        throw Error(ErrorKind::numeric, "flow training diverged (non-finite loss)");
    tape.backward(loss);
    opt.step(params);
    opt.zero_grad(params);
    return value;
}

MelLike fm_sample(const FlowDecoder & m, const ConditioningPack & pack, int steps, uint64_t seed) {
    if (steps < 1) throw Error(ErrorKind::config, "flow sampler needs at least one step");
    std::mt19937_64 rng = make_rng(seed);
    Tensor x = Tensor::randn({pack.tgt_len(), m.cfg.mel_channels}, rng, 1.0);
    const double dt = 1.0 / static_cast<double>(steps);
    for (int s = 0; s < steps; ++s) {
        Tensor u = m.velocity(pack, x, s * dt);
        x = add(x, scale(u, dt));
        for (size_t i = 0; i < x.size(); ++i)
            if (!std::isfinite(x.data()[i]))
                throw Error(ErrorKind::numeric, "flow sampler diverged at step " + std::to_string(s));
    }
    return tensor_to_mel(x);
}

MelLike decode_utterance(const FlowDecoder & m, const TokenSeq & a, const TokenSeq & a_ref,
                         const MelLike & m_ref, int steps, uint64_t seed) {
    return fm_sample(m, condition_pack(a, a_ref, m_ref), steps, seed);
}

} // namespace prefixvc
