#pragma once

#include "prefixvc/acoustic_model.hpp"
#include "prefixvc/sequence_model.hpp"

namespace prefixvc {

// Everything a run needs, from one sectioned key/value file. Derived model
// dims (vocab sizes, channel counts) are mirrored from the corpus and
// tokenizer settings at parse time and are not independently settable.

struct RunConfig {
    GenConfig gen;
    int train_contents = 8;
    int reference_contents = 2;
    int test_contents = 2;

    int codebook_size = 48;
    int kmeans_iters = 30;

    ArConfig ar;
    PrefixEncoderConfig prefix;
    FlowConfig flow;
    PrefixMode mode = PrefixMode::deep_kv;

    int backbone_steps = 1500, backbone_batch = 8;
    double backbone_lr = 3e-3;
    int prefix_steps = 900, prefix_batch = 4;
    double prefix_lr = 3e-3;
    int stage2_steps = 3000, stage2_batch = 2;
    double stage2_lr = 3e-3;
    // stage-2 reference-dependence levers (0 / false = plain training)
    double stage2_jitter_sigma = 0.0;
    double stage2_ref_mask_prob = 0.0;

    double temperature = 0.8;
    int top_k = 8;
    int flow_steps = 32;
    int max_gen_len = 160;

    uint64_t corpus_seed = 0, tokenizer_seed = 0, probe_seed = 0, backbone_seed = 0,
             stage2_seed = 0, prefix_seed = 0, convert_seed = 0, eval_seed = 0;

    std::string base_dir;

    void validate() const;
    std::string fingerprint() const; // stable key=value summary for reports
};

// Sectioned key/value text: `[section]` headers, `key = value` lines, `#` or
// `;` comments. Unknown keys are config errors. Every [seeds] field is
// mandatory. Overrides are `section.key=value` strings applied after the
// file, before validation.
RunConfig parse_run_config_text(const std::string & text,
                                const std::vector<std::string> & overrides = {});
RunConfig load_run_config(const std::string & path,
                          const std::vector<std::string> & overrides = {});

// A complete config with desk-scale defaults and a seeded [seeds] section.
std::string default_config_text();

} // namespace prefixvc
