#include "prefixvc/evalkit.hpp"

#include "prefixvc/common.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

namespace prefixvc {

namespace {

double cosine(const std::vector<double> & a, const std::vector<double> & b) {
    if (a.size() != b.size())
        throw Error(ErrorKind::shape, "cosine over mismatched dimensions");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na <= 0.0 || nb <= 0.0)
        throw Error(ErrorKind::numeric, "cosine of a zero-norm vector");
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

void check_embedding_set(const EmbeddingSet & s) {
    if (s.vectors.empty())
        throw Error(ErrorKind::input, "embedding set is empty");
    if (s.speakers.size() != s.vectors.size() || s.emotions.size() != s.vectors.size())
        throw Error(ErrorKind::shape, "embedding set labels do not match vector count");
    const size_t d = s.vectors.front().size();
    for (const auto & v : s.vectors)
        if (v.size() != d)
            throw Error(ErrorKind::shape, "embedding set has ragged vectors");
}

std::vector<double> pool_mel(const MelLike & mel) {
    return mean_pool_rows(mel.frames, mel.t, mel.d);
}

} // namespace

SpeakerCentroids speaker_centroids(const EmbeddingSet & train, int speakers) {
    check_embedding_set(train);
    if (speakers <= 0)
        throw Error(ErrorKind::config, "speaker count must be positive");
    const size_t d = train.vectors.front().size();
    std::vector<std::vector<double>> sums(speakers, std::vector<double>(d, 0.0));
    std::vector<int> counts(speakers, 0);
    for (size_t i = 0; i < train.vectors.size(); ++i) {
        const int spk = train.speakers[i];
        if (spk < 0 || spk >= speakers)
            throw Error(ErrorKind::data, "embedding speaker label out of range");
        for (size_t j = 0; j < d; ++j)
            sums[spk][j] += train.vectors[i][j];
        ++counts[spk];
    }
    SpeakerCentroids out;
    out.centroids.resize(speakers);
    for (int s = 0; s < speakers; ++s) {
        if (counts[s] == 0)
            throw Error(ErrorKind::data,
                        "no training embeddings for speaker " + std::to_string(s));
        double norm = 0.0;
        for (size_t j = 0; j < d; ++j) {
            sums[s][j] /= counts[s];
            norm += sums[s][j] * sums[s][j];
        }
        norm = std::sqrt(norm);
        if (!(norm > 1e-12))
            throw Error(ErrorKind::numeric,
                        "degenerate centroid for speaker " + std::to_string(s));
        for (size_t j = 0; j < d; ++j)
            sums[s][j] /= norm;
        out.centroids[s] = std::move(sums[s]);
    }
    return out;
}

double spk_cent_sim(const EmbeddingSet & converted, const SpeakerCentroids & cents,
                    const std::vector<int> & target_speakers) {
    check_embedding_set(converted);
    if (target_speakers.size() != converted.vectors.size())
        throw Error(ErrorKind::input, "target speaker list does not match embedding count");
    double total = 0.0;
    for (size_t i = 0; i < converted.vectors.size(); ++i) {
        const int spk = target_speakers[i];
        if (spk < 0 || spk >= static_cast<int>(cents.centroids.size()))
            throw Error(ErrorKind::input, "target speaker id out of range");
        total += cosine(converted.vectors[i], cents.centroids[spk]);
    }
    return total / static_cast<double>(converted.vectors.size());
}

double emo_sim(const std::vector<std::vector<double>> & converted,
               const std::vector<std::vector<double>> & refs) {
    if (converted.empty())
        throw Error(ErrorKind::input, "emotion similarity over an empty list");
    if (converted.size() != refs.size())
        throw Error(ErrorKind::input, "emotion similarity lists are not paired");
    double total = 0.0;
    for (size_t i = 0; i < converted.size(); ++i)
        total += cosine(converted[i], refs[i]);
    return total / static_cast<double>(converted.size());
}

double eer(const std::vector<double> & genuine, const std::vector<double> & impostor) {
    if (genuine.empty() || impostor.empty())
        throw Error(ErrorKind::input, "equal-error rate needs both trial lists nonempty");

    std::vector<double> gen = genuine, imp = impostor;
    std::sort(gen.begin(), gen.end());
    std::sort(imp.begin(), imp.end());

    // accept when score >= threshold: FA falls and FR rises as the threshold
    // sweeps upward, so FA - FR crosses zero exactly once
    auto fa_at = [&](double t) {
        return static_cast<double>(imp.end() - std::lower_bound(imp.begin(), imp.end(), t)) /
               static_cast<double>(imp.size());
    };
    auto fr_at = [&](double t) {
        return static_cast<double>(std::lower_bound(gen.begin(), gen.end(), t) - gen.begin()) /
               static_cast<double>(gen.size());
    };

    std::vector<double> th;
    th.reserve(gen.size() + imp.size() + 2);
    th.insert(th.end(), gen.begin(), gen.end());
    th.insert(th.end(), imp.begin(), imp.end());
    std::sort(th.begin(), th.end());
    th.erase(std::unique(th.begin(), th.end()), th.end());
    th.insert(th.begin(), th.front() - 1.0); // below min: FA=1, FR=0
    th.push_back(th.back() + 1.0);           // above max: FA=0, FR=1

    double fa1 = 1.0, fr1 = 0.0;
    for (size_t k = 1; k < th.size(); ++k) {
        const double fa2 = fa_at(th[k]);
        const double fr2 = fr_at(th[k]);
        const double d1 = fa1 - fr1, d2 = fa2 - fr2;
        if (d1 >= 0.0 && d2 <= 0.0) {
            if (d1 == d2)
                return 0.5 * (fa1 + fr1);
            const double alpha = d1 / (d1 - d2);
            return fa1 + alpha * (fa2 - fa1);
        }
        fa1 = fa2;
        fr1 = fr2;
    }
    throw Error(ErrorKind::internal, "equal-error sweep found no crossing");
}

double eca(const std::vector<MelLike> & converted, const std::vector<int> & target_emotions,
           const PoolClassifier & probe) {
    if (!probe.trained)
        throw Error(ErrorKind::state, "emotion probe is untrained");
    if (converted.empty())
        throw Error(ErrorKind::input, "emotion classification over an empty list");
    if (converted.size() != target_emotions.size())
        throw Error(ErrorKind::input, "emotion target list does not match utterance count");
    int hits = 0;
    for (size_t i = 0; i < converted.size(); ++i) {
        const std::vector<double> pooled = pool_mel(converted[i]);
        if (probe.predict_row(pooled.data()) == target_emotions[i])
            ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(converted.size());
}

VerificationTrials verification_scores(const EmbeddingSet & converted, const EmbeddingSet & real,
                                       uint64_t seed) {
    check_embedding_set(converted);
    check_embedding_set(real);
    VerificationTrials out;
    for (size_t i = 0; i < converted.vectors.size(); ++i)
        for (size_t j = 0; j < real.vectors.size(); ++j) {
            const double s = cosine(converted.vectors[i], real.vectors[j]);
            if (converted.speakers[i] == real.speakers[j])
                out.genuine.push_back(s);
            else
                out.impostor.push_back(s);
        }
    if (out.genuine.empty() || out.impostor.empty())
        throw Error(ErrorKind::data, "verification trials need both same- and cross-speaker pairs");

    // balance the two sides so the sweep is not dominated by impostor mass
    auto rng = make_rng(mix_seed(seed, 0x7715ull));
    auto subsample = [&](std::vector<double> & v, size_t n) {
        std::shuffle(v.begin(), v.end(), rng);
        v.resize(n);
        std::sort(v.begin(), v.end());
    };
    const size_t n = std::min(out.genuine.size(), out.impostor.size());
    subsample(out.genuine, n);
    subsample(out.impostor, n);
    return out;
}

ControlSetting parse_setting(const std::string & name) {
    if (name == "joint")
        return {RefEmotion::target, RefEmotion::target};
    if (name == "control-sequence")
        return {RefEmotion::target, RefEmotion::source};
    if (name == "control-acoustic")
        return {RefEmotion::source, RefEmotion::target};
    if (name == "no-conversion")
        return {RefEmotion::source, RefEmotion::source};
    throw Error(ErrorKind::config, "unknown control setting: " + name);
}

std::string setting_name(const ControlSetting & s) {
    const bool s1 = s.stage1 == RefEmotion::target;
    const bool s2 = s.stage2 == RefEmotion::target;
    if (s1 && s2)
        return "joint";
    if (s1)
        return "control-sequence";
    if (s2)
        return "control-acoustic";
    return "no-conversion";
}

namespace {

std::string fmt6(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

} // namespace

std::string metric_csv_header() {
    return "count,spk_cent_sim,eer,eca,emo_sim,content_accuracy_proxy,fingerprint";
}

std::string metric_csv_row(const MetricReport & r) {
    std::ostringstream os;
    os << r.count << ',' << fmt6(r.spk_cent_sim) << ',' << fmt6(r.eer) << ',' << fmt6(r.eca)
       << ',' << fmt6(r.emo_sim) << ',' << fmt6(r.content_accuracy_proxy) << ",\""
       << r.fingerprint << '"';
    return os.str();
}

std::string metric_text(const MetricReport & r) {
    std::ostringstream os;
    os << "utterances            = " << r.count << '\n'
       << "speaker centroid sim  = " << fmt6(r.spk_cent_sim) << '\n'
       << "equal-error rate      = " << fmt6(r.eer) << '\n'
       << "emotion accuracy      = " << fmt6(r.eca) << '\n'
       << "emotion embedding sim = " << fmt6(r.emo_sim) << '\n'
       << "content proxy acc     = " << fmt6(r.content_accuracy_proxy)
       << " (pseudo-phoneme probe, not a word error rate)\n"
       << "fingerprint           = " << r.fingerprint << '\n';
    return os.str();
}

namespace {

struct PooledData {
    std::vector<std::vector<double>> x;
    std::vector<int> speakers, emotions;
};

PooledData pool_specs(const GenConfig & g, const std::vector<UtteranceSpec> & specs) {
    PooledData out;
    out.x.reserve(specs.size());
    for (const auto & s : specs) {
        const MelLike mel = gen_utterance(s, g);
        out.x.push_back(pool_mel(mel));
        out.speakers.push_back(s.speaker_id);
        out.emotions.push_back(s.emotion_id);
    }
    return out;
}

// segment mean minus utterance mean cancels the speaker base and most of the
// emotion DC, leaving the phoneme template as the dominant signal
void segment_features(const GenConfig & g, const UtteranceSpec & s,
                      std::vector<std::vector<double>> & x, std::vector<int> & y) {
    const MelLike mel = gen_utterance(s, g);
    const std::vector<double> utt_mean = pool_mel(mel);
    const std::vector<int> bounds = segment_boundaries(s, g);
    const auto plan = content_plan(g, s.content_id);
    for (size_t seg = 0; seg + 1 < bounds.size(); ++seg) {
        const int lo = bounds[seg], hi = bounds[seg + 1];
        if (hi <= lo)
            continue;
        std::vector<double> f(mel.d, 0.0);
        for (int i = lo; i < hi; ++i)
            for (int j = 0; j < mel.d; ++j)
                f[j] += mel.at(i, j);
        for (int j = 0; j < mel.d; ++j)
            f[j] = f[j] / (hi - lo) - utt_mean[j];
        x.push_back(std::move(f));
        y.push_back(plan[seg].first);
    }
}

} // namespace

ProbeKit train_probes(const GenConfig & g, const std::vector<UtteranceSpec> & train,
                      const std::vector<UtteranceSpec> & held, uint64_t seed, double floor) {
    g.validate();
    if (train.empty() || held.empty())
        throw Error(ErrorKind::input, "probe training needs train and held-out specs");

    const PooledData tr = pool_specs(g, train);
    const PooledData hv = pool_specs(g, held);

    ProbeKit kit;
    auto rng = make_rng(mix_seed(seed, 0x9e0bull));
    kit.speaker = PoolClassifier("probe.speaker", g.channels, 32, 16, g.speakers, rng);
    kit.emotion = PoolClassifier("probe.emotion", g.channels, 32, 16, g.emotions, rng);
    kit.content = PoolClassifier("probe.content", g.channels, 32, 16, g.content_vocab, rng);

    kit.speaker_acc = kit.speaker.train_classifier(tr.x, tr.speakers, hv.x, hv.speakers, 60, 16,
                                                   5e-3, mix_seed(seed, 1));
    kit.emotion_acc = kit.emotion.train_classifier(tr.x, tr.emotions, hv.x, hv.emotions, 60, 16,
                                                   5e-3, mix_seed(seed, 2));

    std::vector<std::vector<double>> cx, cx_val;
    std::vector<int> cy, cy_val;
    for (const auto & s : train)
        segment_features(g, s, cx, cy);
    for (const auto & s : held)
        segment_features(g, s, cx_val, cy_val);
    kit.content_acc =
        kit.content.train_classifier(cx, cy, cx_val, cy_val, 60, 32, 5e-3, mix_seed(seed, 3));

    auto gate = [&](const char * which, double acc) {
        if (acc < floor)
            throw Error(ErrorKind::data, std::string(which) + " probe held-out accuracy " +
                                             fmt6(acc) + " is below the evaluation floor " +
                                             fmt6(floor));
    };
    gate("speaker", kit.speaker_acc);
    gate("emotion", kit.emotion_acc);
    gate("content", kit.content_acc);

    kit.speaker.set_frozen(true);
    kit.emotion.set_frozen(true);
    kit.content.set_frozen(true);
    kit.ready = true;
    return kit;
}

double content_accuracy_proxy(const std::vector<MelLike> & converted,
                              const std::vector<UtteranceSpec> & sources, const GenConfig & g,
                              const PoolClassifier & probe) {
    if (!probe.trained)
        throw Error(ErrorKind::state, "content probe is untrained");
    if (converted.empty())
        throw Error(ErrorKind::input, "content proxy over an empty list");
    if (converted.size() != sources.size())
        throw Error(ErrorKind::input, "content proxy lists are not paired");

    int hits = 0, total = 0;
    for (size_t u = 0; u < converted.size(); ++u) {
        const MelLike & mel = converted[u];
        if (mel.t <= 0 || mel.d != g.channels)
            throw Error(ErrorKind::shape, "converted mel shape does not match the corpus config");
        const std::vector<int> bounds = segment_boundaries(sources[u], g);
        const auto plan = content_plan(g, sources[u].content_id);
        const double scale = static_cast<double>(mel.t) / bounds.back();
        const std::vector<double> utt_mean = pool_mel(mel);
        for (size_t seg = 0; seg + 1 < bounds.size(); ++seg) {
            int lo = static_cast<int>(std::lround(bounds[seg] * scale));
            int hi = static_cast<int>(std::lround(bounds[seg + 1] * scale));
            lo = std::clamp(lo, 0, mel.t);
            hi = std::clamp(hi, 0, mel.t);
            if (hi <= lo)
                continue;
            std::vector<double> f(mel.d, 0.0);
            for (int i = lo; i < hi; ++i)
                for (int j = 0; j < mel.d; ++j)
                    f[j] += mel.at(i, j);
            for (int j = 0; j < mel.d; ++j)
                f[j] = f[j] / (hi - lo) - utt_mean[j];
            if (probe.predict_row(f.data()) == plan[seg].first)
                ++hits;
            ++total;
        }
    }
    if (total == 0)
        throw Error(ErrorKind::data, "content proxy found no scorable segments");
    return static_cast<double>(hits) / total;
}

std::vector<double> embed_mel(const MelLike & mel, const PoolClassifier & probe) {
    if (!probe.trained)
        throw Error(ErrorKind::state, "embedding probe is untrained");
    const std::vector<double> pooled = pool_mel(mel);
    const Tensor row = Tensor::from({1, static_cast<int>(pooled.size())}, pooled);
    const Tensor emb = probe.embed(row);
    std::vector<double> out(emb.values().begin(), emb.values().end());
    return out;
}

} // namespace prefixvc
