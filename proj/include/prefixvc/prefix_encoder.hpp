#pragma once

#include "prefixvc/nn.hpp"
#include "prefixvc/toyspeech.hpp"

#include <optional>

namespace prefixvc {

// Reference mel -> temporal shuffle -> style transformer -> perceiver
// bottleneck -> fusion with a frozen emotion embedding -> k x d_model prefix.

struct PrefixEncoderConfig {
    int mel_channels = 16;
    int d_style = 32;
    int style_layers = 2;
    int style_heads = 4;
    int style_ffn = 64;
    int latents = 8; // k
    int perceiver_blocks = 1;
    int d_emo = 16;
    int d_model = 64;
};

// Rows permuted by Fisher-Yates over make_rng(seed): for i = T..2,
// swap(perm[i-1], perm[rng() % i]). Columns untouched.
MelLike temporal_shuffle(const MelLike & mel, uint64_t seed);

class StyleEncoder {
  public:
    StyleEncoder() = default;
    StyleEncoder(const PrefixEncoderConfig & cfg, std::mt19937_64 & rng);

    // caller shuffles first; positions index the (shuffled) slots
    Tensor forward(const MelLike & mel) const;
    Tensor forward(const Tensor & frames) const;
    void collect(std::vector<Parameter *> & out);
    void set_frozen(bool frozen);

    Linear in_proj;
    std::vector<EncoderBlock> blocks;
    LayerNorm out_ln;
    bool initialized = false;
    int d_style = 0;
};

class Perceiver {
  public:
    Perceiver() = default;
    Perceiver(const PrefixEncoderConfig & cfg, std::mt19937_64 & rng);

    // k x d_style regardless of feature length
    Tensor forward(const Tensor & features) const;
    void collect(std::vector<Parameter *> & out);
    void set_frozen(bool frozen);

    struct Block {
        LayerNorm ln1, ln2;
        CrossAttention cross;
        Linear fc1, fc2;
    };

    Parameter latents; // k x d_style
    std::vector<Block> blocks;
    bool initialized = false;
};

// Frozen mean-pool MLP emotion classifier; the penultimate layer is the
// emotion embedding. Must clear 95% held-out accuracy before freezing.
class EmotionEmbedder {
  public:
    EmotionEmbedder() = default;
    EmotionEmbedder(int mel_channels, int d_emo, int emotions, uint64_t init_seed);

    double train(const std::vector<MelLike> & mels, const std::vector<int> & labels,
                 const std::vector<MelLike> & val_mels, const std::vector<int> & val_labels,
                 int epochs = 60, int batch = 32, double lr = 5e-3, uint64_t seed = 7);
    void freeze(); // state error below the accuracy floor

    Tensor embed(const MelLike & mel) const; // 1 x d_emo
    int predict(const MelLike & mel) const;

    PoolClassifier clf;
    double heldout_accuracy = 0.0;
    bool frozen = false;
    static constexpr double kAccuracyFloor = 0.95;
};

class PrefixEncoder {
  public:
    PrefixEncoder() = default;
    PrefixEncoder(const PrefixEncoderConfig & cfg, std::mt19937_64 & rng);

    // shuffle_seed: fresh seed per training step; nullopt = identity (inference)
    Tensor encode(const MelLike & mel_ref, const Tensor & emotion_emb,
                  std::optional<uint64_t> shuffle_seed) const;
    Tensor fuse(const Tensor & style, const Tensor & emotion_emb) const;
    void collect(std::vector<Parameter *> & out);
    void set_frozen(bool frozen);

    PrefixEncoderConfig cfg;
    StyleEncoder style;
    Perceiver perceiver;
    Linear fusion; // (d_style + d_emo) -> d_model
    bool initialized = false;
};

} // namespace prefixvc
