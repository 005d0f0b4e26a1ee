#include "prefixvc/toyspeech.hpp"

#include "prefixvc/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>

namespace prefixvc {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr int kProsodyChannels = 4;
constexpr uint32_t kMelVersion = 1;

double uniform_in(std::mt19937_64 & rng, double lo, double hi) {
    std::uniform_real_distribution<double> d(lo, hi);
    return d(rng);
}

int uniform_int(std::mt19937_64 & rng, int lo, int hi) {
    std::uniform_int_distribution<int> d(lo, hi);
    return d(rng);
}

} // namespace

void GenConfig::validate() const {
    if (speakers < 1 || speakers > 16) throw Error(ErrorKind::config, "speakers out of range [1,16]");
    if (emotions < 1 || emotions > 4) throw Error(ErrorKind::config, "emotions out of range [1,4]");
    if (channels < 6 || channels > 64) throw Error(ErrorKind::config, "channels out of range [6,64]");
    if (contents < 1) throw Error(ErrorKind::config, "contents must be positive");
    if (content_vocab < 1 || content_vocab > 32)
        throw Error(ErrorKind::config, "content vocab out of range [1,32]");
    if (min_segments < 1 || max_segments < min_segments)
        throw Error(ErrorKind::config, "bad segment count range");
    if (min_seg_len < 2 || max_seg_len < min_seg_len)
        throw Error(ErrorKind::config, "bad segment length range");
    if (noise_sigma < 0.0 || noise_sigma > 0.05)
        throw Error(ErrorKind::config, "noise sigma out of range [0,0.05]");
    if (emotion_scale < 0.0 || emotion_scale > 1.5)
        throw Error(ErrorKind::config, "emotion scale out of range [0,1.5]");
}

EmotionParams emotion_params(int emotion_id, double scale) {
    // Distinct DC offsets per emotion keep mean-pooled frames linearly
    // separable; contour frequency and duration stretch carry the
    // sequence-level signature. Offset magnitudes sit near the phoneme
    // spread so a Q=64 codebook keeps emotion partially resolved.
    static const EmotionParams table[4] = {
        {0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.00},
        {1.15, 0.60, 0.55, 0.25, 0.50, 2.0, 0.92},
        {-1.15, -0.60, -0.45, -0.22, 0.40, 1.0, 1.10},
        {0.60, -1.15, -0.25, 0.55, 0.70, 3.0, 0.96},
    };
    if (emotion_id < 0 || emotion_id > 3) throw Error(ErrorKind::config, "emotion id out of range");
    EmotionParams p = table[emotion_id];
    p.pitch_offset0 *= scale;
    p.pitch_offset1 *= scale;
    p.energy_gain0 *= scale;
    p.energy_gain1 *= scale;
    p.contour_amp *= scale;
    p.stretch = std::clamp(1.0 + (p.stretch - 1.0) * scale, 0.90, 1.10);
    return p;
}

std::vector<std::pair<int, int>> content_plan(const GenConfig & cfg, int content_id) {
    if (content_id < 0 || content_id >= cfg.contents)
        throw Error(ErrorKind::config, "content id out of range");
    auto rng = make_rng(mix_seed(cfg.seed, 0xC0DE0000ull + static_cast<uint64_t>(content_id)));
    const int segs = uniform_int(rng, cfg.min_segments, cfg.max_segments);
    std::vector<std::pair<int, int>> plan(static_cast<size_t>(segs));
    for (auto & s : plan) {
        s.first = uniform_int(rng, 0, cfg.content_vocab - 1);
        s.second = uniform_int(rng, cfg.min_seg_len, cfg.max_seg_len);
    }
    return plan;
}

std::vector<double> phoneme_template(const GenConfig & cfg, int phoneme_id) {
    // Content lives on channels 0..11; the top channels stay pure speaker so
    // phoneme variance does not drown the emotion offsets under quantization.
    auto rng = make_rng(mix_seed(cfg.seed, 0x9E0E0000ull + static_cast<uint64_t>(phoneme_id)));
    std::vector<double> tmpl(static_cast<size_t>(cfg.channels), 0.0);
    const int content_hi = std::max(6, cfg.channels - 4);
    for (int j = 0; j < content_hi; ++j) tmpl[static_cast<size_t>(j)] = uniform_in(rng, -0.9, 0.9);
    return tmpl;
}

std::vector<double> speaker_base(const GenConfig & cfg, int speaker_id) {
    if (speaker_id < 0 || speaker_id >= cfg.speakers)
        throw Error(ErrorKind::config, "speaker id out of range");
    // All bases come from one stream so the pairwise margin can be enforced;
    // prosody channels stay zero so emotion dominates them.
    for (uint64_t attempt = 0; attempt < 64; ++attempt) {
        auto rng = make_rng(mix_seed(cfg.seed, 0x5EA40000ull + attempt));
        std::vector<std::vector<double>> bases(static_cast<size_t>(cfg.speakers));
        for (auto & base : bases) {
            base.assign(static_cast<size_t>(cfg.channels), 0.0);
            for (int j = kProsodyChannels; j < cfg.channels; ++j) {
                const double mag = uniform_in(rng, 0.6, 1.6);
                base[static_cast<size_t>(j)] = (rng() & 1) ? mag : -mag;
            }
        }
        bool ok = true;
        for (size_t a = 0; a < bases.size() && ok; ++a)
            for (size_t b = a + 1; b < bases.size() && ok; ++b) {
                double d2 = 0.0;
                for (int j = 0; j < cfg.channels; ++j) {
                    const double dd = bases[a][static_cast<size_t>(j)] - bases[b][static_cast<size_t>(j)];
                    d2 += dd * dd;
                }
                if (std::sqrt(d2) < cfg.speaker_margin) ok = false;
            }
        if (ok) return bases[static_cast<size_t>(speaker_id)];
    }
    throw Error(ErrorKind::config, "speaker margin unreachable with this seed/config");
}

uint64_t utterance_seed(const GenConfig & cfg, int content_id, int speaker_id, int emotion_id) {
    uint64_t s = mix_seed(cfg.seed, 0xA11CEull);
    s = mix_seed(s, static_cast<uint64_t>(content_id));
    s = mix_seed(s, static_cast<uint64_t>(speaker_id));
    s = mix_seed(s, static_cast<uint64_t>(emotion_id));
    return s;
}

UtteranceSpec make_spec(const GenConfig & cfg, int content_id, int speaker_id, int emotion_id) {
    return {content_id, speaker_id, emotion_id, utterance_seed(cfg, content_id, speaker_id, emotion_id)};
}

std::vector<int> segment_boundaries(const UtteranceSpec & spec, const GenConfig & cfg) {
    const auto plan = content_plan(cfg, spec.content_id);
    const EmotionParams ep = emotion_params(spec.emotion_id, cfg.emotion_scale);
    std::vector<int> starts;
    starts.reserve(plan.size() + 1);
    int t = 0;
    for (const auto & seg : plan) {
        starts.push_back(t);
        t += std::max(2, static_cast<int>(std::llround(seg.second * ep.stretch)));
    }
    starts.push_back(t);
    return starts;
}

MelLike gen_utterance(const UtteranceSpec & spec, const GenConfig & cfg) {
    cfg.validate();
    if (spec.speaker_id < 0 || spec.speaker_id >= cfg.speakers)
        throw Error(ErrorKind::config, "speaker id out of range");
    if (spec.emotion_id < 0 || spec.emotion_id >= cfg.emotions)
        throw Error(ErrorKind::config, "emotion id out of range");
    const auto plan = content_plan(cfg, spec.content_id);
    const auto bounds = segment_boundaries(spec, cfg);
    const EmotionParams ep = emotion_params(spec.emotion_id, cfg.emotion_scale);
    const auto base = speaker_base(cfg, spec.speaker_id);
    const int total = bounds.back();

    MelLike mel;
    mel.t = total;
    mel.d = cfg.channels;
    mel.frames.assign(static_cast<size_t>(total) * cfg.channels, 0.0);

    auto noise_rng = make_rng(mix_seed(spec.seed, 0x17ull));
    std::normal_distribution<double> noise(0.0, cfg.noise_sigma);

    for (size_t s = 0; s < plan.size(); ++s) {
        const auto tmpl = phoneme_template(cfg, plan[s].first);
        for (int t = bounds[s]; t < bounds[s + 1]; ++t) {
            const double u = total > 1 ? static_cast<double>(t) / (total - 1) : 0.0;
            double * row = &mel.frames[static_cast<size_t>(t) * cfg.channels];
            row[0] = 0.3 * tmpl[0] + ep.pitch_offset0 + ep.contour_amp * std::sin(2.0 * kPi * ep.contour_freq * u);
            row[1] = 0.3 * tmpl[1] + ep.pitch_offset1 + ep.contour_amp * std::cos(2.0 * kPi * ep.contour_freq * u);
            row[2] = (1.0 + 0.3 * tmpl[2]) * (1.0 + ep.energy_gain0);
            row[3] = (0.8 + 0.3 * tmpl[3]) * (1.0 + ep.energy_gain1);
            for (int j = kProsodyChannels; j < cfg.channels; ++j) row[j] = base[static_cast<size_t>(j)] + tmpl[static_cast<size_t>(j)];
            for (int j = 0; j < cfg.channels; ++j) row[j] = std::clamp(row[j] + noise(noise_rng), -4.0, 4.0);
        }
    }
    return mel;
}

TokenSeq content_tokenize(const UtteranceSpec & spec, const GenConfig & cfg) {
    const auto plan = content_plan(cfg, spec.content_id);
    TokenSeq seq;
    seq.kind = TokenKind::content;
    seq.vocab = cfg.content_vocab;
    seq.tokens.reserve(plan.size());
    for (const auto & seg : plan) seq.tokens.push_back(seg.first);
    return seq;
}

int Codebook::quantize_frame(const double * frame) const {
    if (!trained) throw Error(ErrorKind::state, "codebook not trained");
    const int q = centroids.rows(), d = centroids.cols();
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (int i = 0; i < q; ++i) {
        double dist = 0.0;
        const double * c = centroids.data() + static_cast<size_t>(i) * d;
        for (int j = 0; j < d; ++j) {
            const double diff = frame[j] - c[j];
            dist += diff * diff;
        }
        if (dist < best_d) { // strict keeps the lowest index on ties
            best_d = dist;
            best = i;
        }
    }
    return best;
}

Codebook train_codebook(const std::vector<MelLike> & mels, int q, uint64_t seed, int iters) {
    if (mels.empty()) throw Error(ErrorKind::input, "train_codebook: no utterances");
    if (q < 1) throw Error(ErrorKind::config, "train_codebook: q must be positive");
    const int d = mels[0].d;
    std::vector<const double *> frames;
    for (const auto & m : mels) {
        if (m.d != d) throw Error(ErrorKind::shape, "train_codebook: channel mismatch");
        for (int t = 0; t < m.t; ++t) frames.push_back(&m.frames[static_cast<size_t>(t) * d]);
    }
    const size_t n = frames.size();
    if (n < static_cast<size_t>(q)) throw Error(ErrorKind::input, "train_codebook: fewer frames than centroids");

    auto rng = make_rng(mix_seed(seed, 0xCB00ull));
    std::vector<size_t> pick(n);
    std::iota(pick.begin(), pick.end(), 0);
    for (size_t i = n; i > 1; --i) std::swap(pick[i - 1], pick[rng() % i]);

    Codebook cb;
    cb.centroids = Tensor::zeros({q, d});
    for (int i = 0; i < q; ++i)
        std::memcpy(cb.centroids.data() + static_cast<size_t>(i) * d, frames[pick[static_cast<size_t>(i)]],
                    sizeof(double) * static_cast<size_t>(d));
    cb.trained = true;

    std::vector<int> assign(n, -1);
    for (int it = 0; it < iters; ++it) {
        bool changed = false;
        for (size_t i = 0; i < n; ++i) {
            const int a = cb.quantize_frame(frames[i]);
            if (a != assign[i]) {
                assign[i] = a;
                changed = true;
            }
        }
        if (!changed) break;
        std::vector<double> sums(static_cast<size_t>(q) * d, 0.0);
        std::vector<int> counts(static_cast<size_t>(q), 0);
        for (size_t i = 0; i < n; ++i) {
            ++counts[static_cast<size_t>(assign[i])];
            for (int j = 0; j < d; ++j) sums[static_cast<size_t>(assign[i]) * d + j] += frames[i][j];
        }
        for (int c = 0; c < q; ++c) {
            if (counts[static_cast<size_t>(c)] == 0) {
                // dead centroid: respawn on a random frame
                std::memcpy(cb.centroids.data() + static_cast<size_t>(c) * d, frames[rng() % n],
                            sizeof(double) * static_cast<size_t>(d));
                continue;
            }
            for (int j = 0; j < d; ++j)
                cb.centroids.data()[static_cast<size_t>(c) * d + j] =
                    sums[static_cast<size_t>(c) * d + j] / counts[static_cast<size_t>(c)];
        }
    }

    std::vector<double> errs(n);
    for (size_t i = 0; i < n; ++i) {
        const int a = cb.quantize_frame(frames[i]);
        double d2 = 0.0;
        const double * c = cb.centroids.data() + static_cast<size_t>(a) * d;
        for (int j = 0; j < d; ++j) {
            const double diff = frames[i][j] - c[j];
            d2 += diff * diff;
        }
        errs[i] = std::sqrt(d2);
    }
    std::sort(errs.begin(), errs.end());
    cb.p95_error = errs[std::min(n - 1, static_cast<size_t>(std::ceil(0.95 * static_cast<double>(n))))];
    return cb;
}

TokenSeq audio_tokenize(const MelLike & mel, const Codebook & cb) {
    if (!cb.trained) throw Error(ErrorKind::state, "audio_tokenize: codebook not trained");
    if (mel.d != cb.centroids.cols()) throw Error(ErrorKind::shape, "audio_tokenize: channel mismatch");
    TokenSeq seq;
    seq.kind = TokenKind::audio;
    seq.vocab = cb.centroids.rows();
    seq.tokens.reserve(static_cast<size_t>(mel.t));
    for (int t = 0; t < mel.t; ++t) seq.tokens.push_back(cb.quantize_frame(&mel.frames[static_cast<size_t>(t) * mel.d]));
    return seq;
}

MelLike decode_tokens(const TokenSeq & tokens, const Codebook & cb) {
    if (!cb.trained) throw Error(ErrorKind::state, "decode_tokens: codebook not trained");
    if (tokens.kind != TokenKind::audio) throw Error(ErrorKind::input, "decode_tokens: audio tokens required");
    MelLike mel;
    mel.t = static_cast<int>(tokens.tokens.size());
    mel.d = cb.centroids.cols();
    mel.frames.resize(static_cast<size_t>(mel.t) * mel.d);
    for (int t = 0; t < mel.t; ++t) {
        const int id = tokens.tokens[static_cast<size_t>(t)];
        if (id < 0 || id >= cb.centroids.rows()) throw Error(ErrorKind::input, "decode_tokens: token out of vocab");
        std::memcpy(&mel.frames[static_cast<size_t>(t) * mel.d], cb.centroids.data() + static_cast<size_t>(id) * mel.d,
                    sizeof(double) * static_cast<size_t>(mel.d));
    }
    return mel;
}

CorpusSplit make_split(const GenConfig & cfg, const SplitSizes & sizes) {
    cfg.validate();
    if (sizes.train < 1 || sizes.reference < 1 || sizes.test < 1)
        throw Error(ErrorKind::config, "make_split: every part needs at least one content id");
    if (sizes.train + sizes.reference + sizes.test != cfg.contents)
        throw Error(ErrorKind::config, "make_split: part sizes must sum to the content count");

    std::vector<int> ids(static_cast<size_t>(cfg.contents));
    std::iota(ids.begin(), ids.end(), 0);
    auto rng = make_rng(mix_seed(cfg.seed, 0x5417ull));
    for (size_t i = ids.size(); i > 1; --i) std::swap(ids[i - 1], ids[rng() % i]);

    CorpusSplit split;
    split.train_contents.assign(ids.begin(), ids.begin() + sizes.train);
    split.reference_contents.assign(ids.begin() + sizes.train, ids.begin() + sizes.train + sizes.reference);
    split.test_contents.assign(ids.begin() + sizes.train + sizes.reference, ids.end());
    std::sort(split.train_contents.begin(), split.train_contents.end());
    std::sort(split.reference_contents.begin(), split.reference_contents.end());
    std::sort(split.test_contents.begin(), split.test_contents.end());

    auto expand = [&cfg](const std::vector<int> & contents, std::vector<UtteranceSpec> & out) {
        for (int c : contents)
            for (int s = 0; s < cfg.speakers; ++s)
                for (int e = 0; e < cfg.emotions; ++e) out.push_back(make_spec(cfg, c, s, e));
    };
    expand(split.train_contents, split.train);
    expand(split.reference_contents, split.reference);
    expand(split.test_contents, split.test);
    return split;
}

void write_mel(const std::string & path, const MelLike & mel) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error(ErrorKind::data, "write_mel: cannot open " + path);
    const uint32_t hdr[3] = {static_cast<uint32_t>(mel.t), static_cast<uint32_t>(mel.d), kMelVersion};
    f.write(reinterpret_cast<const char *>(hdr), sizeof(hdr));
    f.write(reinterpret_cast<const char *>(mel.frames.data()),
            static_cast<std::streamsize>(mel.frames.size() * sizeof(double)));
    if (!f) throw Error(ErrorKind::data, "write_mel: short write on " + path);
}

MelLike read_mel(const std::string & path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error(ErrorKind::data, "read_mel: cannot open " + path);
    uint32_t hdr[3];
    f.read(reinterpret_cast<char *>(hdr), sizeof(hdr));
    if (!f || hdr[2] != kMelVersion) throw Error(ErrorKind::data, "read_mel: bad header in " + path);
    MelLike mel;
    mel.t = static_cast<int>(hdr[0]);
    mel.d = static_cast<int>(hdr[1]);
    if (mel.t < 2 || mel.d < 1 || mel.t > 1 << 20 || mel.d > 1 << 12)
        throw Error(ErrorKind::data, "read_mel: implausible dimensions in " + path);
    mel.frames.resize(static_cast<size_t>(mel.t) * mel.d);
    f.read(reinterpret_cast<char *>(mel.frames.data()),
           static_cast<std::streamsize>(mel.frames.size() * sizeof(double)));
    if (!f) throw Error(ErrorKind::data, "read_mel: truncated data in " + path);
    return mel;
}

void write_tokens(const std::string & path, const TokenSeq & seq) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error(ErrorKind::data, "write_tokens: cannot open " + path);
    const uint32_t hdr[3] = {seq.kind == TokenKind::audio ? 1u : 0u, static_cast<uint32_t>(seq.vocab),
                             static_cast<uint32_t>(seq.tokens.size())};
    f.write(reinterpret_cast<const char *>(hdr), sizeof(hdr));
    for (int t : seq.tokens) {
        const int32_t v = t;
        f.write(reinterpret_cast<const char *>(&v), sizeof(v));
    }
    if (!f) throw Error(ErrorKind::data, "write_tokens: short write on " + path);
}

TokenSeq read_tokens(const std::string & path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error(ErrorKind::data, "read_tokens: cannot open " + path);
    uint32_t hdr[3];
    f.read(reinterpret_cast<char *>(hdr), sizeof(hdr));
    if (!f || hdr[0] > 1 || hdr[2] > 1u << 24) throw Error(ErrorKind::data, "read_tokens: bad header in " + path);
    TokenSeq seq;
    seq.kind = hdr[0] ? TokenKind::audio : TokenKind::content;
    seq.vocab = static_cast<int>(hdr[1]);
    seq.tokens.resize(hdr[2]);
    for (auto & t : seq.tokens) {
        int32_t v;
        f.read(reinterpret_cast<char *>(&v), sizeof(v));
        t = v;
    }
    if (!f) throw Error(ErrorKind::data, "read_tokens: truncated data in " + path);
    return seq;
}

std::vector<double> mean_frame(const MelLike & mel) {
    if (mel.t < 1) throw Error(ErrorKind::input, "mean_frame: empty mel");
    return mean_pool_rows(mel.frames, mel.t, mel.d);
}

} // namespace prefixvc
