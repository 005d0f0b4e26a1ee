#pragma once

#include "prefixvc/nn.hpp"
#include "prefixvc/toyspeech.hpp"

#include <optional>

namespace prefixvc {

// Stage 2: conditional flow matching from audio tokens back to mel frames.
// Non-causal transformer; the reference region is always visible.

struct FlowConfig {
    int audio_vocab = 64;
    int mel_channels = 16;
    int d_model = 64;
    int layers = 4;
    int heads = 4;
    int ffn = 128;

    // the embedding table holds one extra row: a mask id for dropped
    // reference tokens (training-time conditioning dropout)
    int mask_id() const { return audio_vocab; }

    void validate() const;
};

// Conditioning for one utterance: target tokens to realize, plus an optional
// reference segment whose mel frames are shown to the net verbatim.
struct ConditioningPack {
    std::vector<int> ref_tokens;
    std::vector<int> tgt_tokens;
    MelLike ref_mel; // rows == ref_tokens.size()

    int ref_len() const { return static_cast<int>(ref_tokens.size()); }
    int tgt_len() const { return static_cast<int>(tgt_tokens.size()); }
    int total() const { return ref_len() + tgt_len(); }
};

// Validates lengths and token kinds. An empty reference is allowed; an empty
// target is not.
ConditioningPack condition_pack(const TokenSeq & a, const TokenSeq & a_ref, const MelLike & m_ref);

// Training-time conditioning dropout: every reference token becomes the mask
// id, so the net must read the reference region's raw mel channels instead of
// re-deriving it from token identities.
ConditioningPack mask_ref_tokens(const ConditioningPack & pack, int mask_id);

// Adds one shared random offset per listed channel to both mels. Used during
// stage-2 training so absolute offsets on those channels are recoverable only
// from the reference region, never from token identities.
void apply_dc_jitter(MelLike & ref_mel, MelLike & target, const std::vector<int> & channels,
                     double sigma, std::mt19937_64 & rng);

Tensor mel_to_tensor(const MelLike & m);
MelLike tensor_to_mel(const Tensor & t);

// (1 - t) * x0 + t * x1. Endpoints return the input tensor unchanged so the
// path is exact at t = 0 and t = 1.
Tensor interpolate_path(const Tensor & x0, const Tensor & x1, double t);

// Mean squared residual against the straight-path velocity x1 - x0.
Tensor fm_objective(const Tensor & u, const Tensor & x0, const Tensor & x1);

class FlowDecoder {
  public:
    FlowDecoder() = default;
    FlowDecoder(const FlowConfig & cfg, uint64_t seed);

    // Raw per-row conditioning matrix, (ref + tgt) x (mel_channels + 2).
    // Reference rows carry their mel frame untouched; target rows carry x_t.
    // The last two columns tag the region.
    Tensor assemble(const ConditioningPack & pack, const Tensor & x_t) const;

    // Predicted velocity for every row / for the target region only.
    Tensor velocity_full(const ConditioningPack & pack, const Tensor & x_t, double t) const;
    Tensor velocity(const ConditioningPack & pack, const Tensor & x_t, double t) const;

    void collect(std::vector<Parameter *> & out);
    void set_frozen(bool frozen);

    FlowConfig cfg;
    Parameter tok_emb; // audio_vocab x d_model
    Linear in_proj;    // (mel_channels + 2) -> d_model
    std::vector<EncoderBlock> blocks;
    LayerNorm final_ln;
    Linear out_proj;   // d_model -> mel_channels
    bool initialized = false;
};

// One training example: noise draw, clean target and sampled path position.
struct FlowBatch {
    ConditioningPack cond;
    Tensor x0;
    Tensor x1;
    double t = 0.0;
};

FlowBatch make_flow_batch(const ConditioningPack & cond, const MelLike & target, std::mt19937_64 & rng);

// Differentiable loss for one example. Only target-region rows enter the
// objective; reference rows receive exactly zero output gradient.
Tensor fm_loss(const FlowDecoder & m, const FlowBatch & b);

double fm_train_step(FlowDecoder & m, const std::vector<FlowBatch> & batch, AdamW & opt,
                     const std::vector<Parameter *> & params);

// Euler integration from seeded unit noise; returns the target region as mel.
MelLike fm_sample(const FlowDecoder & m, const ConditioningPack & pack, int steps, uint64_t seed);

MelLike decode_utterance(const FlowDecoder & m, const TokenSeq & a, const TokenSeq & a_ref,
                         const MelLike & m_ref, int steps, uint64_t seed);

} // namespace prefixvc
