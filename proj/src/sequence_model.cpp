#include "prefixvc/sequence_model.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>

namespace prefixvc {

PrefixMode parse_prefix_mode(const std::string & s) {
    if (s == "deep-prefix") return PrefixMode::deep_kv;
    if (s == "input-prepend") return PrefixMode::input_prepend;
    if (s == "none") return PrefixMode::none;
    throw Error(ErrorKind::config, "unknown prefix mode: " + s);
}

const char * prefix_mode_name(PrefixMode m) {
    switch (m) {
        case PrefixMode::deep_kv: return "deep-prefix";
        case PrefixMode::input_prepend: return "input-prepend";
        default: return "none";
    }
}

void ArConfig::validate() const {
    if (content_vocab < 1 || audio_vocab < 2) throw Error(ErrorKind::config, "vocab sizes too small");
    if (layers < 1 || d_model < 2 || ffn < 1) throw Error(ErrorKind::config, "bad decoder shape");
    if (heads < 1 || d_model % heads != 0) throw Error(ErrorKind::config, "heads must divide d_model");
    if (lora_rank < 1 || lora_alpha <= 0.0) throw Error(ErrorKind::config, "bad adapter shape");
}

std::vector<int> build_tokens(const ArConfig & cfg, const ArInput & in) {
    if (in.content.empty()) throw Error(ErrorKind::input, "content tokens required");
    std::vector<int> toks;
    toks.reserve(in.ref_audio.size() + in.content.size() + in.audio.size() + 2);
    for (int t : in.ref_audio) {
        if (t < 0 || t >= cfg.audio_vocab) throw Error(ErrorKind::input, "reference token out of range");
        toks.push_back(cfg.audio_base() + t);
    }
    toks.push_back(cfg.sep_id());
    for (int t : in.content) {
        if (t < 0 || t >= cfg.content_vocab) throw Error(ErrorKind::input, "content token out of range");
        toks.push_back(t);
    }
    toks.push_back(cfg.bos_id());
    for (int t : in.audio) {
        if (t < 0 || t >= cfg.audio_vocab) throw Error(ErrorKind::input, "audio token out of range");
        toks.push_back(cfg.audio_base() + t);
    }
    return toks;
}

int prompt_rows(const ArInput & in) {
    return static_cast<int>(in.ref_audio.size()) + 1 + static_cast<int>(in.content.size()) + 1;
}

PrefixProjections::PrefixProjections(int layers, int d, std::mt19937_64 & rng) : d_model(d) {
    if (layers < 1 || d < 1) throw Error(ErrorKind::config, "bad prefix projection shape");
    const double std = 1.0 / std::sqrt(static_cast<double>(d));
    wk.resize(static_cast<size_t>(layers));
    wv.resize(static_cast<size_t>(layers));
    for (int l = 0; l < layers; ++l) {
        wk[static_cast<size_t>(l)] = {"prefix_proj.k" + std::to_string(l),
                                      Tensor::randn({d, d}, rng, std), false};
        wv[static_cast<size_t>(l)] = {"prefix_proj.v" + std::to_string(l),
                                      Tensor::randn({d, d}, rng, std), false};
        wk[static_cast<size_t>(l)].tensor.set_requires_grad(true);
        wv[static_cast<size_t>(l)].tensor.set_requires_grad(true);
    }
}

void PrefixProjections::collect(std::vector<Parameter *> & out) {
    for (auto & p : wk) out.push_back(&p);
    for (auto & p : wv) out.push_back(&p);
}

void PrefixProjections::set_frozen(bool frozen) {
    for (auto & p : wk) {
        p.frozen = frozen;
        p.tensor.set_requires_grad(!frozen);
    }
    for (auto & p : wv) {
        p.frozen = frozen;
        p.tensor.set_requires_grad(!frozen);
    }
}

std::vector<LayerKV> project_prefix(const Tensor & e, const PrefixProjections & proj) {
    if (!e.defined()) throw Error(ErrorKind::config, "prefix rows required");
    if (proj.wk.empty()) throw Error(ErrorKind::state, "prefix projections not initialized");
    if (e.cols() != proj.d_model) throw Error(ErrorKind::config, "prefix width does not match projections");
    std::vector<LayerKV> out(proj.wk.size());
    for (size_t l = 0; l < proj.wk.size(); ++l) {
        out[l].k_e = matmul(e, proj.wk[l].tensor);
        out[l].v_e = matmul(e, proj.wv[l].tensor);
        out[l].layer_index = static_cast<int>(l);
    }
    return out;
}

LoraAdapter::LoraAdapter(const std::string & tgt, int d_in, int d_out, int rank, double al,
                         std::mt19937_64 & rng)
    : alpha(al), r(rank), target(tgt) {
    if (rank < 1 || d_in < 1 || d_out < 1 || al <= 0.0) throw Error(ErrorKind::config, "bad adapter shape");
    if (rank >= std::min(d_in, d_out))
        std::cerr << "warning: adapter rank " << rank << " on " << tgt << " is not low-rank\n";
    a = {tgt + ".lora_a", Tensor::randn({rank, d_in}, rng, 1.0 / std::sqrt(static_cast<double>(d_in))), false};
    b = {tgt + ".lora_b", Tensor::zeros({d_out, rank}), false};
    a.tensor.set_requires_grad(true);
    b.tensor.set_requires_grad(true);
}

Tensor LoraAdapter::delta(const Tensor & x) const {
    return scale(matmul_nt(matmul_nt(x, a.tensor), b.tensor), alpha / r);
}

Tensor LoraAdapter::materialize() const {
    return scale(matmul(b.tensor, a.tensor), alpha / r);
}

void LoraAdapter::collect(std::vector<Parameter *> & out) {
    out.push_back(&a);
    out.push_back(&b);
}

void LoraAdapter::set_frozen(bool frozen) {
    a.frozen = frozen;
    a.tensor.set_requires_grad(!frozen);
    b.frozen = frozen;
    b.tensor.set_requires_grad(!frozen);
}

Tensor apply_lora(const Linear & base, const LoraAdapter & ad, const Tensor & x) {
    if (x.cols() != base.in_dim) throw Error(ErrorKind::shape, "apply_lora: input width mismatch");
    return add(base.forward(x), ad.delta(x));
}

void merge_lora(Linear & base, const LoraAdapter & ad) {
    Tensor d = ad.materialize();
    if (d.rows() != base.out_dim || d.cols() != base.in_dim)
        throw Error(ErrorKind::shape, "merge_lora: adapter does not match base");
    for (size_t i = 0; i < d.size(); ++i) base.w.tensor.values()[i] += d.data()[i];
}

Tensor cached_attention(const Tensor & q, const Tensor & k_all, const Tensor & v_all,
                        int heads, int prefix_rows, int past_rows) {
    const int tq = q.rows(), total = k_all.rows(), d = q.cols();
    if (k_all.cols() != d || v_all.cols() != d || v_all.rows() != total)
        throw Error(ErrorKind::shape, "cached_attention: key/value shape mismatch");
    if (heads < 1 || d % heads != 0) throw Error(ErrorKind::config, "cached_attention: bad head count");
    if (total != prefix_rows + past_rows + tq)
        throw Error(ErrorKind::shape, "cached_attention: cache length mismatch");
    std::vector<uint8_t> mask(static_cast<size_t>(tq) * total, 0);
    for (int i = 0; i < tq; ++i) {
        const int upto = prefix_rows + past_rows + i + 1;
        for (int c = 0; c < upto; ++c) mask[static_cast<size_t>(i) * total + c] = 1;
    }
    const int dh = d / heads;
    std::vector<Tensor> mixed;
    mixed.reserve(static_cast<size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
        Tensor kh = slice_cols(k_all, h * dh, (h + 1) * dh);
        Tensor vh = slice_cols(v_all, h * dh, (h + 1) * dh);
        mixed.push_back(attention(qh, kh, vh, &mask));
    }
    return heads == 1 ? mixed[0] : concat_cols(mixed);
}

ArTransformer::ArTransformer(const ArConfig & c, uint64_t seed) : cfg(c) {
    cfg.validate();
    auto rng = make_rng(seed);
    tok_emb = {"decoder.tok_emb", Tensor::randn({cfg.input_vocab(), cfg.d_model}, rng, 0.5), false};
    tok_emb.tensor.set_requires_grad(true);
    blocks.resize(static_cast<size_t>(cfg.layers));
    for (int l = 0; l < cfg.layers; ++l) {
        ArLayer & L = blocks[static_cast<size_t>(l)];
        const std::string p = "decoder.l" + std::to_string(l);
        L.ln1 = LayerNorm(p + ".ln1", cfg.d_model);
        L.wq = Linear(p + ".wq", cfg.d_model, cfg.d_model, rng);
        L.wk = Linear(p + ".wk", cfg.d_model, cfg.d_model, rng);
        L.wv = Linear(p + ".wv", cfg.d_model, cfg.d_model, rng);
        L.wo = Linear(p + ".wo", cfg.d_model, cfg.d_model, rng);
        L.ln2 = LayerNorm(p + ".ln2", cfg.d_model);
        L.fc1 = Linear(p + ".fc1", cfg.d_model, cfg.ffn, rng);
        L.fc2 = Linear(p + ".fc2", cfg.ffn, cfg.d_model, rng);
    }
    final_ln = LayerNorm("decoder.final_ln", cfg.d_model);
    head = Linear("decoder.head", cfg.d_model, cfg.out_vocab(), rng);
    // zero head: the first-step loss is exactly ln(out_vocab)
    std::fill(head.w.tensor.values().begin(), head.w.tensor.values().end(), 0.0);
    std::fill(head.b.tensor.values().begin(), head.b.tensor.values().end(), 0.0);
    initialized = true;
}

DecoderState ArTransformer::begin(const std::vector<LayerKV> * prefix) const {
    if (!initialized) throw Error(ErrorKind::state, "decoder not initialized");
    DecoderState st;
    st.ks.resize(static_cast<size_t>(cfg.layers));
    st.vs.resize(static_cast<size_t>(cfg.layers));
    if (prefix && !prefix->empty()) {
        if (static_cast<int>(prefix->size()) != cfg.layers)
            throw Error(ErrorKind::config, "prefix layer count does not match decoder");
        const int k = (*prefix)[0].k_e.rows();
        if (k > 0) {
            for (int l = 0; l < cfg.layers; ++l) {
                const LayerKV & kv = (*prefix)[static_cast<size_t>(l)];
                if (kv.k_e.rows() != k || kv.v_e.rows() != k || kv.k_e.cols() != cfg.d_model ||
                    kv.v_e.cols() != cfg.d_model)
                    throw Error(ErrorKind::config, "prefix rows have inconsistent shape");
                st.ks[static_cast<size_t>(l)] = kv.k_e;
                st.vs[static_cast<size_t>(l)] = kv.v_e;
            }
            st.prefix_rows = k;
        }
    }
    return st;
}

Tensor ArTransformer::step_rows(DecoderState & st, const Tensor & rows, bool advance_pos) const {
    if (!initialized) throw Error(ErrorKind::state, "decoder not initialized");
    if (!rows.defined() || rows.rows() < 1) throw Error(ErrorKind::input, "decoder step needs rows");
    if (rows.cols() != cfg.d_model) throw Error(ErrorKind::shape, "decoder step width mismatch");
    const int tn = rows.rows();
    Tensor x = advance_pos ? add(rows, sinusoidal_positions(tn, cfg.d_model, st.pos)) : rows;
    for (int l = 0; l < cfg.layers; ++l) {
        const ArLayer & L = blocks[static_cast<size_t>(l)];
        Tensor h = L.ln1.forward(x);
        Tensor q = lora_active ? apply_lora(L.wq, lora_q[static_cast<size_t>(l)], h) : L.wq.forward(h);
        Tensor k = L.wk.forward(h);
        Tensor v = lora_active ? apply_lora(L.wv, lora_v[static_cast<size_t>(l)], h) : L.wv.forward(h);
        Tensor k_all = st.ks[static_cast<size_t>(l)].defined()
                           ? concat_rows(st.ks[static_cast<size_t>(l)], k)
                           : k;
        Tensor v_all = st.vs[static_cast<size_t>(l)].defined()
                           ? concat_rows(st.vs[static_cast<size_t>(l)], v)
                           : v;
        st.ks[static_cast<size_t>(l)] = k_all;
        st.vs[static_cast<size_t>(l)] = v_all;
        Tensor mixed = cached_attention(q, k_all, v_all, cfg.heads, st.prefix_rows, st.consumed);
        x = add(x, L.wo.forward(mixed));
        x = add(x, L.fc2.forward(gelu(L.fc1.forward(L.ln2.forward(x)))));
    }
    st.consumed += tn;
    if (advance_pos) st.pos += tn;
    return head.forward(final_ln.forward(x));
}

Tensor ArTransformer::step_tokens(DecoderState & st, const std::vector<int> & tokens) const {
    if (tokens.empty()) throw Error(ErrorKind::input, "decoder step needs tokens");
    for (int t : tokens)
        if (t < 0 || t >= cfg.input_vocab()) throw Error(ErrorKind::input, "token id out of range");
    return step_rows(st, embedding_rows(tok_emb.tensor, tokens), true);
}

Tensor ArTransformer::forward_logits(const ArInput & in, const Tensor & prefix_e,
                                     const PrefixProjections * proj, PrefixMode mode) const {
    std::vector<int> toks = build_tokens(cfg, in);
    std::vector<LayerKV> kvs;
    DecoderState st;
    if (mode == PrefixMode::deep_kv) {
        if (!prefix_e.defined() || !proj)
            throw Error(ErrorKind::config, "deep-prefix mode needs prefix rows and projections");
        kvs = project_prefix(prefix_e, *proj);
        st = begin(&kvs);
    } else {
        st = begin(nullptr);
    }
    if (mode == PrefixMode::input_prepend) {
        if (!prefix_e.defined()) throw Error(ErrorKind::config, "input-prepend mode needs prefix rows");
        if (prefix_e.cols() != cfg.d_model)
            throw Error(ErrorKind::config, "prefix width does not match decoder");
        if (prefix_e.rows() > 0) step_rows(st, prefix_e, false);
    }
    return step_tokens(st, toks);
}

void ArTransformer::attach_lora(std::mt19937_64 & rng) {
    if (lora_active) throw Error(ErrorKind::state, "adapters already attached");
    lora_q.clear();
    lora_v.clear();
    for (int l = 0; l < cfg.layers; ++l) {
        const std::string p = "decoder.l" + std::to_string(l);
        lora_q.emplace_back(p + ".wq", cfg.d_model, cfg.d_model, cfg.lora_rank, cfg.lora_alpha, rng);
        lora_v.emplace_back(p + ".wv", cfg.d_model, cfg.d_model, cfg.lora_rank, cfg.lora_alpha, rng);
    }
    lora_active = true;
}

void ArTransformer::merge_adapters() {
    if (!lora_active) throw Error(ErrorKind::state, "no adapters attached");
    for (int l = 0; l < cfg.layers; ++l) {
        merge_lora(blocks[static_cast<size_t>(l)].wq, lora_q[static_cast<size_t>(l)]);
        merge_lora(blocks[static_cast<size_t>(l)].wv, lora_v[static_cast<size_t>(l)]);
    }
    lora_q.clear();
    lora_v.clear();
    lora_active = false;
}

void ArTransformer::freeze_backbone() {
    tok_emb.frozen = true;
    tok_emb.tensor.set_requires_grad(false);
    for (ArLayer & L : blocks) {
        L.ln1.set_frozen(true);
        L.wq.set_frozen(true);
        L.wk.set_frozen(true);
        L.wv.set_frozen(true);
        L.wo.set_frozen(true);
        L.ln2.set_frozen(true);
        L.fc1.set_frozen(true);
        L.fc2.set_frozen(true);
    }
    final_ln.set_frozen(true);
    head.set_frozen(true);
    backbone_frozen_ = true;
}

void ArTransformer::collect_backbone(std::vector<Parameter *> & out) {
    out.push_back(&tok_emb);
    for (ArLayer & L : blocks) {
        L.ln1.collect(out);
        L.wq.collect(out);
        L.wk.collect(out);
        L.wv.collect(out);
        L.wo.collect(out);
        L.ln2.collect(out);
        L.fc1.collect(out);
        L.fc2.collect(out);
    }
    final_ln.collect(out);
    head.collect(out);
}

void ArTransformer::collect_adapters(std::vector<Parameter *> & out) {
    for (auto & ad : lora_q) ad.collect(out);
    for (auto & ad : lora_v) ad.collect(out);
}

void ArTransformer::collect(std::vector<Parameter *> & out) {
    collect_backbone(out);
    collect_adapters(out);
}

Tensor sequence_loss(const ArTransformer & m, const ArInput & in, const Tensor & prefix_e,
                     const PrefixProjections * proj, PrefixMode mode) {
    Tensor logits = m.forward_logits(in, prefix_e, proj, mode);
    const int p = prompt_rows(in);
    const int na = static_cast<int>(in.audio.size());
    Tensor rows = slice_rows(logits, p - 1, p + na);
    std::vector<int> targets(in.audio.begin(), in.audio.end());
    targets.push_back(m.cfg.end_id());
    return cross_entropy_rows(rows, targets);
}

double teacher_forced_accuracy(const ArTransformer & m, const std::vector<ArInput> & data) {
    if (data.empty()) throw Error(ErrorKind::input, "no examples");
    int64_t hit = 0, total = 0;
    for (const ArInput & in : data) {
        Tensor logits = m.forward_logits(in, Tensor{}, nullptr, PrefixMode::none);
        const int p = prompt_rows(in);
        const int na = static_cast<int>(in.audio.size());
        std::vector<int> targets(in.audio.begin(), in.audio.end());
        targets.push_back(m.cfg.end_id());
        for (int i = 0; i < na + 1; ++i) {
            const double * row = logits.data() + static_cast<size_t>(p - 1 + i) * m.cfg.out_vocab();
            int best = 0;
            for (int j = 1; j < m.cfg.out_vocab(); ++j)
                if (row[j] > row[best]) best = j;
            if (best == targets[static_cast<size_t>(i)]) ++hit;
            ++total;
        }
    }
    return static_cast<double>(hit) / static_cast<double>(total);
}

namespace {

// shuffled-epoch index stream over the training set
struct IndexStream {
    std::vector<size_t> order;
    size_t pos = 0;
    std::mt19937_64 * rng;

    IndexStream(size_t n, std::mt19937_64 & r) : order(n), rng(&r) {
        std::iota(order.begin(), order.end(), size_t{0});
        reshuffle();
    }
    void reshuffle() {
        for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[(*rng)() % i]);
        pos = 0;
    }
    size_t next() {
        if (pos >= order.size()) reshuffle();
        return order[pos++];
    }
};

} // namespace

TrainLog pretrain_backbone(ArTransformer & m, const std::vector<ArInput> & data, int steps,
                           int batch, double lr, uint64_t seed) {
    if (data.empty()) throw Error(ErrorKind::input, "no training examples");
    if (steps < 1 || batch < 1) throw Error(ErrorKind::config, "bad training schedule");
    std::vector<Parameter *> ps;
    m.collect(ps);
    AdamW opt(lr, 0.9, 0.999, 1e-8, 0.01);
    auto rng = make_rng(seed);
    IndexStream stream(data.size(), rng);
    TrainLog log;
    log.loss.reserve(static_cast<size_t>(steps));
    for (int s = 0; s < steps; ++s) {
        Tape tape;
        Tensor total;
        for (int bi = 0; bi < batch; ++bi) {
            Tensor li = sequence_loss(m, data[stream.next()], Tensor{}, nullptr, PrefixMode::none);
            total = total.defined() ? add(total, li) : li;
        }
        Tensor loss = scale(total, 1.0 / batch);
        if (!std::isfinite(loss.item())) throw Error(ErrorKind::numeric, "training diverged");
        tape.backward(loss);
        opt.step(ps);
        opt.zero_grad(ps);
        log.loss.push_back(loss.item());
    }
    return log;
}

std::vector<Parameter *> finetune_trainables(ArTransformer & m, PrefixProjections & proj,
                                             PrefixEncoder & enc) {
    std::vector<Parameter *> ps;
    m.collect_adapters(ps);
    proj.collect(ps);
    enc.collect(ps);
    return ps;
}

double finetune_loss(const ArTransformer & m, const PrefixProjections & proj,
                     const PrefixEncoder & enc, const FineTuneItem & item, PrefixMode mode) {
    Tensor e;
    if (mode != PrefixMode::none) e = enc.encode(item.ref_mel, item.emotion_emb, item.shuffle_seed);
    return sequence_loss(m, item.tokens, e, &proj, mode).item();
}

double finetune_step(ArTransformer & m, PrefixProjections & proj, PrefixEncoder & enc,
                     const std::vector<FineTuneItem> & batch, PrefixMode mode, AdamW & opt,
                     const std::vector<Parameter *> & trainables) {
    if (batch.empty()) throw Error(ErrorKind::input, "empty batch");
    if (mode == PrefixMode::none) throw Error(ErrorKind::config, "fine-tuning requires a prefix mode");
    if (!m.backbone_frozen()) throw Error(ErrorKind::state, "backbone must be frozen before fine-tuning");
    Tape tape;
    Tensor total;
    for (const FineTuneItem & item : batch) {
        Tensor e = enc.encode(item.ref_mel, item.emotion_emb, item.shuffle_seed);
        Tensor li = sequence_loss(m, item.tokens, e, &proj, mode);
        total = total.defined() ? add(total, li) : li;
    }
    Tensor loss = scale(total, 1.0 / static_cast<double>(batch.size()));
    if (!std::isfinite(loss.item())) throw Error(ErrorKind::numeric, "fine-tuning diverged");
    tape.backward(loss);
    std::vector<Parameter *> backbone;
    m.collect_backbone(backbone);
    for (Parameter * p : backbone)
        for (double g : p->tensor.grad_raw())
            if (g != 0.0) throw Error(ErrorKind::internal, "gradient reached frozen parameter " + p->name);
    opt.step(trainables);
    opt.zero_grad(trainables);
    return loss.item();
}

namespace {

int pick_token(const double * row, int n, double temperature, int top_k, std::mt19937_64 & rng) {
    if (temperature <= 0.0) {
        int best = 0;
        for (int j = 1; j < n; ++j)
            if (row[j] > row[best]) best = j;
        return best;
    }
    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return row[a] > row[b]; });
    const int keep = (top_k > 0 && top_k < n) ? top_k : n;
    const double mx = row[order[0]];
    std::vector<double> w(static_cast<size_t>(keep));
    double z = 0.0;
    for (int i = 0; i < keep; ++i) {
        w[static_cast<size_t>(i)] = std::exp((row[order[static_cast<size_t>(i)]] - mx) / temperature);
        z += w[static_cast<size_t>(i)];
    }
    const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng) * z;
    double acc = 0.0;
    for (int i = 0; i < keep; ++i) {
        acc += w[static_cast<size_t>(i)];
        if (u < acc) return order[static_cast<size_t>(i)];
    }
    return order[static_cast<size_t>(keep - 1)];
}

} // namespace

GenResult generate(const ArTransformer & m, const ArInput & prompt, const Tensor & prefix_e,
                   const PrefixProjections * proj, PrefixMode mode, double temperature, int top_k,
                   uint64_t seed, int max_len) {
    if (max_len < 1) throw Error(ErrorKind::config, "max_len must be positive");
    if (!prompt.audio.empty()) throw Error(ErrorKind::input, "generation prompt must not include target audio");
    std::vector<int> toks = build_tokens(m.cfg, prompt);
    std::vector<LayerKV> kvs;
    DecoderState st;
    if (mode == PrefixMode::deep_kv) {
        if (!prefix_e.defined() || !proj)
            throw Error(ErrorKind::config, "deep-prefix mode needs prefix rows and projections");
        kvs = project_prefix(prefix_e, *proj);
        st = m.begin(&kvs);
    } else {
        st = m.begin(nullptr);
    }
    if (mode == PrefixMode::input_prepend) {
        if (!prefix_e.defined()) throw Error(ErrorKind::config, "input-prepend mode needs prefix rows");
        if (prefix_e.rows() > 0) m.step_rows(st, prefix_e, false);
    }
    Tensor logits = m.step_tokens(st, toks);
    auto rng = make_rng(seed);
    GenResult res;
    const int v = m.cfg.out_vocab();
    for (int s = 0; s < max_len; ++s) {
        const double * last = logits.data() + static_cast<size_t>(logits.rows() - 1) * v;
        const int tok = pick_token(last, v, temperature, top_k, rng);
        if (tok == m.cfg.end_id()) return res;
        res.audio.push_back(tok);
        logits = m.step_tokens(st, {m.cfg.audio_base() + tok});
    }
    res.truncated = true;
    return res;
}

} // namespace prefixvc
