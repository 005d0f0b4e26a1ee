#pragma once

#include "prefixvc/checkpoint.hpp"
#include "prefixvc/evalkit.hpp"
#include "prefixvc/runconfig.hpp"

namespace prefixvc {

// Run-directory orchestration: corpus generation, the five training stages,
// conversion, evaluation, and the two-model ablation grid. Every command is
// a pure function of (config, disk state); checkpoints embed the checksums
// of the artifacts they were trained against, and loading re-verifies them.

struct RunPaths {
    std::string base;
    std::string corpus_dir() const { return base + "/corpus"; }
    std::string mel_dir() const { return base + "/corpus/mel"; }
    std::string manifest() const { return base + "/corpus/manifest.txt"; }
    std::string checkpoint_dir() const { return base + "/checkpoints"; }
    std::string checkpoint(const std::string & stage) const {
        return base + "/checkpoints/" + stage + ".pvcc";
    }
    std::string log_dir() const { return base + "/logs"; }
    std::string train_log(const std::string & stage) const {
        return base + "/logs/train_" + stage + ".csv";
    }
    std::string converted_root() const { return base + "/converted"; }
    std::string reports_dir() const { return base + "/reports"; }
};

RunPaths run_paths(const RunConfig & c);
std::string mel_filename(const UtteranceSpec & s);

enum class Stage { tokenizer, probes, backbone, stage2, prefix };
Stage parse_stage(const std::string & s);
const char * stage_name(Stage s);

// Writes every utterance mel plus a manifest; a second run with the same
// seed produces byte-identical files. Refuses to clobber without force.
std::string cmd_gen_data(const RunConfig & c, bool force);

// Trains one stage and writes checkpoint + (step, loss) CSV. Resume reloads
// the saved weights and continues step numbering up to the configured
// budget; optimizer moments restart.
std::string cmd_train(const RunConfig & c, Stage stage, bool resume = false);

// Everything needed to convert: corpus split, tokenizer, probes, models.
// Loads checkpoints and verifies the recorded upstream checksums.
struct ModelBundle {
    RunConfig cfg;
    CorpusSplit split;
    Codebook codebook;
    ProbeKit probes;
    EmotionEmbedder embedder;
    ArTransformer ar;
    PrefixProjections proj;
    PrefixEncoder enc;
    FlowDecoder flow;
    PrefixMode mode = PrefixMode::deep_kv;
    bool prefix_loaded = false;
    std::map<std::string, std::string> provenance; // checkpoint checksums
};

ModelBundle load_bundle(const RunConfig & c, bool need_prefix);

struct ConvertRequest {
    int content_id = 0;
    int speaker_id = 0;
    int source_emotion = 0;
    int target_emotion = 0;
    ControlSetting setting;
    PrefixMode mode = PrefixMode::deep_kv;
    uint64_t seed = 0;
};

struct ConvertResult {
    MelLike mel;
    TokenSeq tokens;
    bool truncated = false;
    std::map<std::string, std::string> metadata;
};

ConvertResult convert_one(const ModelBundle & b, const ConvertRequest & rq);

// CLI-facing conversion: resolves the source utterance by ids, honors the
// stage-reference flags, writes mel + tokens + metadata into
// converted/<run_name>/.
std::string cmd_convert(const RunConfig & c, int content_id, int speaker_id, int source_emotion,
                        int target_emotion, const std::string & run_name, PrefixMode mode,
                        const ControlSetting & setting);

// The full conversion set for one control setting: every test utterance to
// every other emotion. Metrics per the report contract; the setting and
// seeds are logged verbatim in the fingerprint.
MetricReport run_stage_isolation(const ModelBundle & b, const ControlSetting & setting);

// Reads converted/<dir>, writes per-utterance rows plus an aggregate report.
// The eca, speaker, and emotion columns of the aggregate are exact column
// means of the rows; the content proxy pools segments across utterances.
MetricReport cmd_eval(const RunConfig & c, const std::string & converted_dir);

// 2 models (prefix, no-prefix backbone) x 3 settings; exactly six rows.
std::string cmd_ablate(const RunConfig & c);

} // namespace prefixvc
