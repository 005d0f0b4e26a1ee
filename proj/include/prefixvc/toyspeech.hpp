#pragma once

#include "prefixvc/tensor.hpp"

#include <string>

namespace prefixvc {

// Synthetic parallel emotional corpus. Every utterance is a pure function of
// (spec, config): speaker base vector + per-content phoneme template sequence
// + emotion modulation (pitch-channel contour and offset, energy-channel
// gain, duration stretch) + seeded noise. Channels 0..3 are prosody
// channels; 4..D-1 carry timbre (speaker identity).

struct UtteranceSpec {
    int content_id = 0;
    int speaker_id = 0;
    int emotion_id = 0;
    uint64_t seed = 0;
};

struct MelLike {
    int t = 0, d = 0;
    std::vector<double> frames; // row-major t x d

    double & at(int i, int j) { return frames[static_cast<size_t>(i) * d + j]; }
    double at(int i, int j) const { return frames[static_cast<size_t>(i) * d + j]; }
};

enum class TokenKind { content, audio };

struct TokenSeq {
    std::vector<int> tokens;
    TokenKind kind = TokenKind::content;
    int vocab = 0;
};

struct GenConfig {
    int speakers = 4;
    int emotions = 4; // 0 = neutral
    int channels = 16;
    int contents = 48;
    int content_vocab = 24;
    int min_segments = 5, max_segments = 9;
    int min_seg_len = 9, max_seg_len = 12;
    double noise_sigma = 0.03;
    double speaker_margin = 2.0;
    double emotion_scale = 1.0; // scales every emotion offset/gain/contour
    uint64_t seed = 1;

    void validate() const;
};

struct EmotionParams {
    double pitch_offset0, pitch_offset1; // DC shift on channels 0,1
    double energy_gain0, energy_gain1;   // gain on channels 2,3 base levels
    double contour_amp, contour_freq;    // time contour on channels 0,1
    double stretch;                      // duration multiplier
};

EmotionParams emotion_params(int emotion_id, double scale);

// Segment plan for one content id: (phoneme id, base length) per segment.
std::vector<std::pair<int, int>> content_plan(const GenConfig & cfg, int content_id);
std::vector<double> phoneme_template(const GenConfig & cfg, int phoneme_id);
std::vector<double> speaker_base(const GenConfig & cfg, int speaker_id);

uint64_t utterance_seed(const GenConfig & cfg, int content_id, int speaker_id, int emotion_id);
UtteranceSpec make_spec(const GenConfig & cfg, int content_id, int speaker_id, int emotion_id);

MelLike gen_utterance(const UtteranceSpec & spec, const GenConfig & cfg);
// Segment boundaries after the emotion duration stretch (frame index where
// each segment starts, plus the total length as the last entry).
std::vector<int> segment_boundaries(const UtteranceSpec & spec, const GenConfig & cfg);

TokenSeq content_tokenize(const UtteranceSpec & spec, const GenConfig & cfg);

// Nearest-centroid vector quantizer trained with k-means on corpus frames.
struct Codebook {
    Tensor centroids; // Q x D
    double p95_error = 0.0;
    bool trained = false;

    int quantize_frame(const double * frame) const;
};

Codebook train_codebook(const std::vector<MelLike> & mels, int q, uint64_t seed, int iters = 30);
TokenSeq audio_tokenize(const MelLike & mel, const Codebook & cb);
MelLike decode_tokens(const TokenSeq & tokens, const Codebook & cb);

struct SplitSizes {
    int train = 0, reference = 0, test = 0;
};

struct CorpusSplit {
    std::vector<int> train_contents, reference_contents, test_contents;
    std::vector<UtteranceSpec> train, reference, test;
};

CorpusSplit make_split(const GenConfig & cfg, const SplitSizes & sizes);

// Binary mel file: u32 T, u32 D, u32 version, then T*D little-endian doubles.
void write_mel(const std::string & path, const MelLike & mel);
MelLike read_mel(const std::string & path);

void write_tokens(const std::string & path, const TokenSeq & seq);
TokenSeq read_tokens(const std::string & path);

std::vector<double> mean_frame(const MelLike & mel);

} // namespace prefixvc
