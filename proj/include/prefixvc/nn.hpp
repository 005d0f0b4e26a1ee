#pragma once

#include "prefixvc/optim.hpp"

namespace prefixvc {

Tensor sinusoidal_positions(int t, int d, int offset = 0);
Tensor sinusoidal_time_embedding(double t, int d);

class Linear {
  public:
    Linear() = default;
    Linear(const std::string & name, int in_dim, int out_dim, std::mt19937_64 & rng, bool bias = true);

    Tensor forward(const Tensor & x) const; // x: n x in -> n x out
    void collect(std::vector<Parameter *> & out);
    void set_frozen(bool frozen);

    Parameter w; // out x in
    Parameter b; // out
    bool has_bias = true;
    int in_dim = 0, out_dim = 0;
};

class LayerNorm {
  public:
    LayerNorm() = default;
    LayerNorm(const std::string & name, int dim);

    Tensor forward(const Tensor & x) const;
    void collect(std::vector<Parameter *> & out);
    void set_frozen(bool frozen);

    Parameter gamma, beta;
    int dim = 0;
};

// Bidirectional multi-head self-attention (no mask, no cache). Used by the
// style transformer and the flow transformer.
class SelfAttention {
  public:
    SelfAttention() = default;
    SelfAttention(const std::string & name, int d_model, int heads, std::mt19937_64 & rng);

    Tensor forward(const Tensor & x) const;
    void collect(std::vector<Parameter *> & out);
    void set_frozen(bool frozen);

    Linear wq, wk, wv, wo;
    int d_model = 0, heads = 0;
};

// Multi-head attention with queries from one sequence and keys/values from
// another. Used by the perceiver bottleneck.
class CrossAttention {
  public:
    CrossAttention() = default;
    CrossAttention(const std::string & name, int d_model, int heads, std::mt19937_64 & rng);

    Tensor forward(const Tensor & q_in, const Tensor & kv_in) const;
    void collect(std::vector<Parameter *> & out);
    void set_frozen(bool frozen);

    Linear wq, wk, wv, wo;
    int d_model = 0, heads = 0;
};

// Pre-LN encoder block: x += attn(ln1(x)); x += mlp(ln2(x)).
class EncoderBlock {
  public:
    EncoderBlock() = default;
    EncoderBlock(const std::string & name, int d_model, int heads, int ffn, std::mt19937_64 & rng);

    Tensor forward(const Tensor & x) const;
    void collect(std::vector<Parameter *> & out);
    void set_frozen(bool frozen);

    LayerNorm ln1, ln2;
    SelfAttention attn;
    Linear fc1, fc2;
};

// mean-pool -> hidden -> embedding (penultimate) -> class logits.
// Doubles as the emotion/speaker probes and the frozen emotion embedder.
class PoolClassifier {
  public:
    PoolClassifier() = default;
    PoolClassifier(const std::string & name, int in_dim, int hidden, int emb_dim, int classes,
                   std::mt19937_64 & rng);

    Tensor logits(const Tensor & x) const;    // x: n x in (already pooled)
    Tensor embed(const Tensor & x) const;     // penultimate, n x emb_dim
    int predict_row(const double * row) const;
    void collect(std::vector<Parameter *> & out);
    void set_frozen(bool frozen);

    // Full-batch label-shuffled minibatch training; returns final
    // held-out accuracy (or train accuracy if no held-out given).
    double train_classifier(const std::vector<std::vector<double>> & x,
                            const std::vector<int> & y,
                            const std::vector<std::vector<double>> & x_val,
                            const std::vector<int> & y_val,
                            int epochs, int batch, double lr, uint64_t seed);
    double accuracy(const std::vector<std::vector<double>> & x, const std::vector<int> & y) const;

    Linear fc1, fc2, head;
    int in_dim = 0, emb_dim = 0, classes = 0;
    bool trained = false;
};

std::vector<double> mean_pool_rows(const std::vector<double> & data, int t, int d);

} // namespace prefixvc
