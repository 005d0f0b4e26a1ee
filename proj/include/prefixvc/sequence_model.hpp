#pragma once

#include "prefixvc/prefix_encoder.hpp"

namespace prefixvc {

// How the emotion prefix reaches the decoder: extra key/value rows injected
// at every layer, rows prepended to the input embeddings, or absent.
enum class PrefixMode { none, deep_kv, input_prepend };

// Accepts "deep-prefix", "input-prepend", "none".
PrefixMode parse_prefix_mode(const std::string & s);
const char * prefix_mode_name(PrefixMode m);

struct ArConfig {
    int content_vocab = 24;
    int audio_vocab = 64;
    int d_model = 64;
    int layers = 4;
    int heads = 4;
    int ffn = 128;
    int lora_rank = 4;
    double lora_alpha = 8.0;

    // input ids: [0,content_vocab) content, then audio, then SEP and BOS
    int input_vocab() const { return content_vocab + audio_vocab + 2; }
    int audio_base() const { return content_vocab; }
    int sep_id() const { return content_vocab + audio_vocab; }
    int bos_id() const { return content_vocab + audio_vocab + 1; }
    // output ids: audio tokens plus the end marker
    int out_vocab() const { return audio_vocab + 1; }
    int end_id() const { return audio_vocab; }
    void validate() const;
};

// One utterance as the decoder sees it: audio tokens of a style reference,
// the content tokens, and the (possibly partial) target audio tokens.
struct ArInput {
    std::vector<int> ref_audio;
    std::vector<int> content;
    std::vector<int> audio;
};

// [ref audio][SEP][content][BOS][audio], all mapped into the input id space.
std::vector<int> build_tokens(const ArConfig & cfg, const ArInput & in);
// rows up to and including BOS; the BOS row scores the first audio token
int prompt_rows(const ArInput & in);

struct LayerKV {
    Tensor k_e, v_e; // k x d_model each
    int layer_index = 0;
};

// Per-layer key/value projections for the prefix. Bias-free: the injected
// rows are plain matrix products of the prefix.
class PrefixProjections {
  public:
    PrefixProjections() = default;
    PrefixProjections(int layers, int d_model, std::mt19937_64 & rng);

    void collect(std::vector<Parameter *> & out);
    void set_frozen(bool frozen);

    std::vector<Parameter> wk, wv; // d_model x d_model each
    int d_model = 0;
};

std::vector<LayerKV> project_prefix(const Tensor & e, const PrefixProjections & proj);

// Low-rank update on a base projection: delta(x) = (alpha/r) x A^T B^T.
// B starts at zero, so a freshly attached adapter changes nothing.
class LoraAdapter {
  public:
    LoraAdapter() = default;
    LoraAdapter(const std::string & target, int d_in, int d_out, int r, double alpha,
                std::mt19937_64 & rng);

    Tensor delta(const Tensor & x) const;
    Tensor materialize() const; // (alpha/r) B A, d_out x d_in
    void collect(std::vector<Parameter *> & out);
    void set_frozen(bool frozen);

    Parameter a; // r x d_in
    Parameter b; // d_out x r, zero-init
    double alpha = 0.0;
    int r = 0;
    std::string target;
};

Tensor apply_lora(const Linear & base, const LoraAdapter & ad, const Tensor & x);
// folds (alpha/r) B A into the base weight; outputs are unchanged
void merge_lora(Linear & base, const LoraAdapter & ad);

// Multi-head attention of q rows over cached keys/values. The first
// prefix_rows cache rows are attendable from every query; the rest are
// causal: query i reaches cached row j iff j < prefix_rows + past_rows + i + 1.
Tensor cached_attention(const Tensor & q, const Tensor & k_all, const Tensor & v_all,
                        int heads, int prefix_rows, int past_rows);

// Per-layer running keys/values; grows as rows are consumed.
struct DecoderState {
    std::vector<Tensor> ks, vs;
    int prefix_rows = 0; // injected rows at the front of each cache
    int consumed = 0;    // non-prefix rows already cached
    int pos = 0;         // next positional index (token rows only)
};

struct ArLayer {
    LayerNorm ln1, ln2;
    Linear wq, wk, wv, wo;
    Linear fc1, fc2;
};

struct GenResult {
    std::vector<int> audio; // raw audio token ids
    bool truncated = false;
};

// Causal decoder over the unified token space. The output head scores audio
// tokens plus the end marker and starts at zero, so the first-step loss on
// any data equals ln(out_vocab). Teacher forcing and incremental decode go
// through the same step path; full forward is one step with the whole
// sequence.
class ArTransformer {
  public:
    ArTransformer() = default;
    ArTransformer(const ArConfig & cfg, uint64_t seed);

    DecoderState begin(const std::vector<LayerKV> * prefix) const;
    Tensor step_rows(DecoderState & st, const Tensor & rows, bool advance_pos) const;
    Tensor step_tokens(DecoderState & st, const std::vector<int> & tokens) const;

    // Logits for every token row (prepended prefix rows are dropped).
    Tensor forward_logits(const ArInput & in, const Tensor & prefix_e,
                          const PrefixProjections * proj, PrefixMode mode) const;

    // adapters on the query and value projections of every layer
    void attach_lora(std::mt19937_64 & rng);
    void merge_adapters();
    void freeze_backbone();
    bool backbone_frozen() const { return backbone_frozen_; }

    void collect(std::vector<Parameter *> & out);          // backbone + adapters
    void collect_backbone(std::vector<Parameter *> & out);
    void collect_adapters(std::vector<Parameter *> & out);

    ArConfig cfg;
    Parameter tok_emb; // input_vocab x d_model
    std::vector<ArLayer> blocks;
    LayerNorm final_ln;
    Linear head;
    std::vector<LoraAdapter> lora_q, lora_v;
    bool lora_active = false;
    bool initialized = false;

  private:
    bool backbone_frozen_ = false;
};

// Mean next-token cross entropy over the rows that score audio tokens: the
// BOS row through the last audio row, with the end marker as final target.
Tensor sequence_loss(const ArTransformer & m, const ArInput & in, const Tensor & prefix_e,
                     const PrefixProjections * proj, PrefixMode mode);
double teacher_forced_accuracy(const ArTransformer & m, const std::vector<ArInput> & data);

struct TrainLog {
    std::vector<double> loss;
};

// Backbone training without any emotion prefix: the style pathway is the
// reference-token segment alone. Non-finite loss aborts.
TrainLog pretrain_backbone(ArTransformer & m, const std::vector<ArInput> & data,
                           int steps, int batch, double lr, uint64_t seed);

// One utterance of the prefix fine-tuning set. The emotion embedding comes
// from the frozen embedder; the prefix encoder sees the reference mel.
struct FineTuneItem {
    ArInput tokens;
    MelLike ref_mel;
    Tensor emotion_emb; // 1 x d_emo
    std::optional<uint64_t> shuffle_seed;
};

std::vector<Parameter *> finetune_trainables(ArTransformer & m, PrefixProjections & proj,
                                             PrefixEncoder & enc);

// One optimizer step on prefix encoder + projections + adapters. The backbone
// must be frozen; any gradient reaching it is a hard failure.
double finetune_step(ArTransformer & m, PrefixProjections & proj, PrefixEncoder & enc,
                     const std::vector<FineTuneItem> & batch, PrefixMode mode, AdamW & opt,
                     const std::vector<Parameter *> & trainables);

double finetune_loss(const ArTransformer & m, const PrefixProjections & proj,
                     const PrefixEncoder & enc, const FineTuneItem & item, PrefixMode mode);

GenResult generate(const ArTransformer & m, const ArInput & prompt, const Tensor & prefix_e,
                   const PrefixProjections * proj, PrefixMode mode, double temperature,
                   int top_k, uint64_t seed, int max_len);

} // namespace prefixvc
