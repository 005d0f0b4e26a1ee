#include "prefixvc/nn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace prefixvc {

AdamW::AdamW(double lr, double beta1, double beta2, double eps, double weight_decay)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {
    if (lr <= 0.0) throw Error(ErrorKind::config, "AdamW: learning rate must be positive");
}

void AdamW::set_lr(double lr) {
    if (lr <= 0.0) throw Error(ErrorKind::config, "AdamW: learning rate must be positive");
    lr_ = lr;
}

void AdamW::step(const std::vector<Parameter *> & params) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (Parameter * p : params) {
        if (p->frozen) continue;
        Tensor & w = p->tensor;
        auto & mom = state_[w.node().get()];
        if (mom.m.size() != w.size()) {
            mom.m.assign(w.size(), 0.0);
            mom.v.assign(w.size(), 0.0);
        }
        const std::vector<double> & g = w.grad();
        double * pw = w.data();
        for (size_t i = 0; i < w.size(); ++i) {
            mom.m[i] = beta1_ * mom.m[i] + (1.0 - beta1_) * g[i];
            mom.v[i] = beta2_ * mom.v[i] + (1.0 - beta2_) * g[i] * g[i];
            const double mhat = mom.m[i] / bc1;
            const double vhat = mom.v[i] / bc2;
            pw[i] -= lr_ * (mhat / (std::sqrt(vhat) + eps_) + weight_decay_ * pw[i]);
        }
    }
}

void AdamW::zero_grad(const std::vector<Parameter *> & params) {
    for (Parameter * p : params) p->tensor.zero_grad();
}

double grad_check(const std::function<Tensor(const Tensor &)> & f, Tensor x, double eps) {
    std::vector<double> analytic(x.size());
    {
        Tape tape;
        x.set_requires_grad(true);
        x.zero_grad();
        Tensor y = f(x);
        if (!std::isfinite(y.item())) throw Error(ErrorKind::numeric, "grad_check: f(x) is not finite");
        tape.backward(y);
        analytic = x.grad();
        x.zero_grad();
        x.set_requires_grad(false);
    }
    double max_rel = 0.0;
    double * px = x.data();
    for (size_t i = 0; i < x.size(); ++i) {
        const double orig = px[i];
        px[i] = orig + eps;
        const double fp = f(x).item();
        px[i] = orig - eps;
        const double fm = f(x).item();
        px[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw Error(ErrorKind::numeric, "grad_check: perturbed f(x) is not finite");
        const double numeric = (fp - fm) / (2.0 * eps);
        const double rel = std::abs(analytic[i] - numeric) / (std::abs(numeric) + 1e-8);
        max_rel = std::max(max_rel, rel);
    }
    return max_rel;
}

double param_grad_check(const std::function<Tensor()> & loss, Tensor param, double eps) {
    const bool was = param.requires_grad();
    param.set_requires_grad(true);
    std::vector<double> analytic(param.size());
    {
        Tape tape;
        param.zero_grad();
        Tensor y = loss();
        if (!std::isfinite(y.item())) throw Error(ErrorKind::numeric, "param_grad_check: loss is not finite");
        tape.backward(y);
        analytic = param.grad();
        param.zero_grad();
    }
    param.set_requires_grad(false);
    double max_rel = 0.0;
    double * pw = param.data();
    for (size_t i = 0; i < param.size(); ++i) {
        const double orig = pw[i];
        pw[i] = orig + eps;
        const double fp = loss().item();
        pw[i] = orig - eps;
        const double fm = loss().item();
        pw[i] = orig;
        const double numeric = (fp - fm) / (2.0 * eps);
        const double rel = std::abs(analytic[i] - numeric) / (std::abs(numeric) + 1e-8);
        max_rel = std::max(max_rel, rel);
    }
    param.set_requires_grad(was);
    return max_rel;
}

// ---------------------------------------------------------------------------

Tensor sinusoidal_positions(int t, int d, int offset) {
    std::vector<double> data(static_cast<size_t>(t) * d);
    for (int i = 0; i < t; ++i) {
        const double pos = static_cast<double>(i + offset);
        for (int j = 0; j < d; j += 2) {
            const double freq = std::pow(10000.0, -static_cast<double>(j) / d);
            data[static_cast<size_t>(i) * d + j] = std::sin(pos * freq);
            if (j + 1 < d) data[static_cast<size_t>(i) * d + j + 1] = std::cos(pos * freq);
        }
    }
    return Tensor::from({t, d}, std::move(data));
}

Tensor sinusoidal_time_embedding(double t, int d) {
    std::vector<double> data(static_cast<size_t>(d));
    for (int j = 0; j < d; j += 2) {
        const double freq = std::pow(1000.0, -static_cast<double>(j) / d);
        data[static_cast<size_t>(j)] = std::sin(t * 100.0 * freq);
        if (j + 1 < d) data[static_cast<size_t>(j) + 1] = std::cos(t * 100.0 * freq);
    }
    return Tensor::from({1, d}, std::move(data));
}

Linear::Linear(const std::string & name, int in, int out, std::mt19937_64 & rng, bool bias)
    : has_bias(bias), in_dim(in), out_dim(out) {
    const double std_init = 1.0 / std::sqrt(static_cast<double>(in));
    w = Parameter{name + ".w", Tensor::randn({out, in}, rng, std_init), false};
    w.tensor.set_requires_grad(true);
    if (bias) {
        b = Parameter{name + ".b", Tensor::zeros({out}), false};
        b.tensor.set_requires_grad(true);
    }
}

Tensor Linear::forward(const Tensor & x) const {
    Tensor y = matmul_nt(x, w.tensor);
    if (has_bias) y = add_rowvec(y, b.tensor);
    return y;
}

void Linear::collect(std::vector<Parameter *> & out) {
    out.push_back(&w);
    if (has_bias) out.push_back(&b);
}

void Linear::set_frozen(bool frozen) {
    w.frozen = frozen;
    w.tensor.set_requires_grad(!frozen);
    if (has_bias) {
        b.frozen = frozen;
        b.tensor.set_requires_grad(!frozen);
    }
}

LayerNorm::LayerNorm(const std::string & name, int d) : dim(d) {
    gamma = Parameter{name + ".gamma", Tensor::full({d}, 1.0), false};
    beta = Parameter{name + ".beta", Tensor::zeros({d}), false};
    gamma.tensor.set_requires_grad(true);
    beta.tensor.set_requires_grad(true);
}

Tensor LayerNorm::forward(const Tensor & x) const {
    return layer_norm_rows(x, gamma.tensor, beta.tensor);
}

void LayerNorm::collect(std::vector<Parameter *> & out) {
    out.push_back(&gamma);
    out.push_back(&beta);
}

void LayerNorm::set_frozen(bool frozen) {
    gamma.frozen = frozen;
    gamma.tensor.set_requires_grad(!frozen);
    beta.frozen = frozen;
    beta.tensor.set_requires_grad(!frozen);
}

SelfAttention::SelfAttention(const std::string & name, int d, int h, std::mt19937_64 & rng)
    : d_model(d), heads(h) {
    if (d % h != 0) throw Error(ErrorKind::config, "attention: d_model must be divisible by heads");
    wq = Linear(name + ".wq", d, d, rng);
    wk = Linear(name + ".wk", d, d, rng);
    wv = Linear(name + ".wv", d, d, rng);
    wo = Linear(name + ".wo", d, d, rng);
}

Tensor SelfAttention::forward(const Tensor & x) const {
    const int dh = d_model / heads;
    Tensor q = wq.forward(x);
    Tensor k = wk.forward(x);
    Tensor v = wv.forward(x);
    std::vector<Tensor> outs;
    outs.reserve(static_cast<size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
        Tensor kh = slice_cols(k, h * dh, (h + 1) * dh);
        Tensor vh = slice_cols(v, h * dh, (h + 1) * dh);
        outs.push_back(attention(qh, kh, vh));
    }
    return wo.forward(heads == 1 ? outs[0] : concat_cols(outs));
}

void SelfAttention::collect(std::vector<Parameter *> & out) {
    wq.collect(out);
    wk.collect(out);
    wv.collect(out);
    wo.collect(out);
}

void SelfAttention::set_frozen(bool frozen) {
    wq.set_frozen(frozen);
    wk.set_frozen(frozen);
    wv.set_frozen(frozen);
    wo.set_frozen(frozen);
}

CrossAttention::CrossAttention(const std::string & name, int d, int h, std::mt19937_64 & rng)
    : d_model(d), heads(h) {
    if (d % h != 0) throw Error(ErrorKind::config, "attention: d_model must be divisible by heads");
    wq = Linear(name + ".wq", d, d, rng);
    wk = Linear(name + ".wk", d, d, rng);
    wv = Linear(name + ".wv", d, d, rng);
    wo = Linear(name + ".wo", d, d, rng);
}

Tensor CrossAttention::forward(const Tensor & q_in, const Tensor & kv_in) const {
    const int dh = d_model / heads;
    Tensor q = wq.forward(q_in);
    Tensor k = wk.forward(kv_in);
    Tensor v = wv.forward(kv_in);
    std::vector<Tensor> outs;
    outs.reserve(static_cast<size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
        Tensor kh = slice_cols(k, h * dh, (h + 1) * dh);
        Tensor vh = slice_cols(v, h * dh, (h + 1) * dh);
        outs.push_back(attention(qh, kh, vh));
    }
    return wo.forward(heads == 1 ? outs[0] : concat_cols(outs));
}

void CrossAttention::collect(std::vector<Parameter *> & out) {
    wq.collect(out);
    wk.collect(out);
    wv.collect(out);
    wo.collect(out);
}

void CrossAttention::set_frozen(bool frozen) {
    wq.set_frozen(frozen);
    wk.set_frozen(frozen);
    wv.set_frozen(frozen);
    wo.set_frozen(frozen);
}

EncoderBlock::EncoderBlock(const std::string & name, int d, int h, int ffn, std::mt19937_64 & rng) {
    ln1 = LayerNorm(name + ".ln1", d);
    ln2 = LayerNorm(name + ".ln2", d);
    attn = SelfAttention(name + ".attn", d, h, rng);
    fc1 = Linear(name + ".fc1", d, ffn, rng);
    fc2 = Linear(name + ".fc2", ffn, d, rng);
}

Tensor EncoderBlock::forward(const Tensor & x) const {
    Tensor h = add(x, attn.forward(ln1.forward(x)));
    Tensor m = fc2.forward(gelu(fc1.forward(ln2.forward(h))));
    return add(h, m);
}

void EncoderBlock::collect(std::vector<Parameter *> & out) {
    ln1.collect(out);
    attn.collect(out);
    ln2.collect(out);
    fc1.collect(out);
    fc2.collect(out);
}

void EncoderBlock::set_frozen(bool frozen) {
    ln1.set_frozen(frozen);
    attn.set_frozen(frozen);
    ln2.set_frozen(frozen);
    fc1.set_frozen(frozen);
    fc2.set_frozen(frozen);
}

// ---------------------------------------------------------------------------

PoolClassifier::PoolClassifier(const std::string & name, int in, int hidden, int emb, int cls,
                               std::mt19937_64 & rng)
    : in_dim(in), emb_dim(emb), classes(cls) {
    fc1 = Linear(name + ".fc1", in, hidden, rng);
    fc2 = Linear(name + ".fc2", hidden, emb, rng);
    head = Linear(name + ".head", emb, cls, rng);
}

Tensor PoolClassifier::embed(const Tensor & x) const {
    return tanh_t(fc2.forward(relu(fc1.forward(x))));
}

Tensor PoolClassifier::logits(const Tensor & x) const {
    return head.forward(embed(x));
}

int PoolClassifier::predict_row(const double * row) const {
    Tensor x = Tensor::from({1, in_dim}, std::vector<double>(row, row + in_dim));
    Tensor l = logits(x);
    const double * pl = l.data();
    int best = 0;
    for (int j = 1; j < classes; ++j)
        if (pl[j] > pl[best]) best = j; // ties keep the lowest index
    return best;
}

void PoolClassifier::collect(std::vector<Parameter *> & out) {
    fc1.collect(out);
    fc2.collect(out);
    head.collect(out);
}

void PoolClassifier::set_frozen(bool frozen) {
    fc1.set_frozen(frozen);
    fc2.set_frozen(frozen);
    head.set_frozen(frozen);
}

double PoolClassifier::train_classifier(const std::vector<std::vector<double>> & x,
                                        const std::vector<int> & y,
                                        const std::vector<std::vector<double>> & x_val,
                                        const std::vector<int> & y_val,
                                        int epochs, int batch, double lr, uint64_t seed) {
    if (x.empty() || x.size() != y.size())
        throw Error(ErrorKind::input, "train_classifier: bad training set");
    std::vector<Parameter *> params;
    collect(params);
    AdamW opt(lr, 0.9, 0.999, 1e-8, 1e-4);
    auto rng = make_rng(seed);
    std::vector<size_t> order(x.size());
    std::iota(order.begin(), order.end(), 0);
    for (int e = 0; e < epochs; ++e) {
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[rng() % i]);
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(batch)) {
            const size_t end = std::min(order.size(), start + static_cast<size_t>(batch));
            const int bs = static_cast<int>(end - start);
            std::vector<double> xb(static_cast<size_t>(bs) * in_dim);
            std::vector<int> yb(static_cast<size_t>(bs));
            for (int i = 0; i < bs; ++i) {
                const auto & row = x[order[start + static_cast<size_t>(i)]];
                std::copy(row.begin(), row.end(), xb.begin() + static_cast<size_t>(i) * in_dim);
                yb[static_cast<size_t>(i)] = y[order[start + static_cast<size_t>(i)]];
            }
            Tape tape;
            Tensor loss = cross_entropy_rows(logits(Tensor::from({bs, in_dim}, std::move(xb))), yb);
            opt.zero_grad(params);
            tape.backward(loss);
            opt.step(params);
        }
    }
    trained = true;
    return x_val.empty() ? accuracy(x, y) : accuracy(x_val, y_val);
}

double PoolClassifier::accuracy(const std::vector<std::vector<double>> & x, const std::vector<int> & y) const {
    if (x.empty()) throw Error(ErrorKind::input, "accuracy: empty evaluation set");
    int hit = 0;
    for (size_t i = 0; i < x.size(); ++i)
        if (predict_row(x[i].data()) == y[i]) ++hit;
    return static_cast<double>(hit) / static_cast<double>(x.size());
}

std::vector<double> mean_pool_rows(const std::vector<double> & data, int t, int d) {
    std::vector<double> out(static_cast<size_t>(d), 0.0);
    for (int i = 0; i < t; ++i)
        for (int j = 0; j < d; ++j) out[static_cast<size_t>(j)] += data[static_cast<size_t>(i) * d + j];
    for (double & v : out) v /= t;
    return out;
}

} // namespace prefixvc
