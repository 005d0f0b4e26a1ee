#pragma once

#include "prefixvc/nn.hpp"
#include "prefixvc/toyspeech.hpp"

namespace prefixvc {

// Objective metric suite over probe embeddings and probe classifiers.
// Probes are desk-scale stand-ins for the large pretrained evaluators.

struct EmbeddingSet {
    std::vector<std::vector<double>> vectors;
    std::vector<int> speakers;
    std::vector<int> emotions;
    std::string source; // converted | reference | train
};

struct SpeakerCentroids {
    std::vector<std::vector<double>> centroids; // one per speaker, unit norm
};

// Per-speaker mean over all emotions, unit-normalized. Every speaker needs at
// least one embedding; a zero-norm mean is a degenerate centroid.
SpeakerCentroids speaker_centroids(const EmbeddingSet & train, int speakers);

double spk_cent_sim(const EmbeddingSet & converted, const SpeakerCentroids & cents,
                    const std::vector<int> & target_speakers);

double emo_sim(const std::vector<std::vector<double>> & converted,
               const std::vector<std::vector<double>> & refs);

// Equal-error rate by threshold sweep over all distinct scores with linear
// interpolation at the crossing. Accept when score >= threshold.
double eer(const std::vector<double> & genuine, const std::vector<double> & impostor);

// Fraction of utterances whose probe-predicted emotion matches the target
// label; argmax ties break toward the lowest index.
double eca(const std::vector<MelLike> & converted, const std::vector<int> & target_emotions,
           const PoolClassifier & probe);

// Speaker-verification trial construction: genuine pairs share the target
// speaker, impostor pairs do not; both sides subsampled to equal size with a
// fixed seed. Scores are embedding cosines.
struct VerificationTrials {
    std::vector<double> genuine, impostor;
};
VerificationTrials verification_scores(const EmbeddingSet & converted, const EmbeddingSet & real,
                                       uint64_t seed);

// Which stage sees the target-emotion reference. Joint = both; the two
// control settings isolate one stage each.
enum class RefEmotion { source, target };
struct ControlSetting {
    RefEmotion stage1 = RefEmotion::target;
    RefEmotion stage2 = RefEmotion::target;
};
std::string setting_name(const ControlSetting & s);
// accepts exactly the four setting_name outputs
ControlSetting parse_setting(const std::string & name);

struct MetricReport {
    double spk_cent_sim = 0.0;
    double eer = 0.0;
    double eca = 0.0;
    double emo_sim = 0.0;
    // intelligibility proxy (per-segment content-probe accuracy); this is NOT
    // a word error rate and is never reported as one
    double content_accuracy_proxy = 0.0;
    int count = 0;
    std::string fingerprint;
};

std::string metric_csv_header();
std::string metric_csv_row(const MetricReport & r);
std::string metric_text(const MetricReport & r);

// Frozen evaluation probes. Training aborts if any probe misses the held-out
// accuracy floor: metrics computed with a weak probe are meaningless.
struct ProbeKit {
    PoolClassifier speaker;
    PoolClassifier emotion;
    PoolClassifier content;
    double speaker_acc = 0.0, emotion_acc = 0.0, content_acc = 0.0;
    bool ready = false;
};

ProbeKit train_probes(const GenConfig & g, const std::vector<UtteranceSpec> & train,
                      const std::vector<UtteranceSpec> & held, uint64_t seed,
                      double floor = 0.95);

// Mean per-segment pseudo-phoneme accuracy on converted mels. Source segment
// boundaries are rescaled proportionally when the converted length differs.
double content_accuracy_proxy(const std::vector<MelLike> & converted,
                              const std::vector<UtteranceSpec> & sources, const GenConfig & g,
                              const PoolClassifier & probe);

std::vector<double> embed_mel(const MelLike & mel, const PoolClassifier & probe);

} // namespace prefixvc
