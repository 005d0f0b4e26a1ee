#include "prefixvc/runconfig.hpp"

#include "prefixvc/common.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace prefixvc {

namespace {

std::string trim(const std::string & s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos)
        return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

struct KeyTable {
    RunConfig & c;
    // seed keys must all appear in the parsed text
    std::vector<std::string> seeds_seen;

    bool set_int(const std::string & full, const std::string & raw, const char * key, int & out) {
        if (full != key)
            return false;
        size_t pos = 0;
        long v = 0;
        try {
            v = std::stol(raw, &pos);
        } catch (const std::exception &) {
            throw Error(ErrorKind::config, "bad integer for " + full + ": " + raw);
        }
        if (pos != raw.size())
            throw Error(ErrorKind::config, "bad integer for " + full + ": " + raw);
        out = static_cast<int>(v);
        return true;
    }

    bool set_u64(const std::string & full, const std::string & raw, const char * key,
                 uint64_t & out) {
        if (full != key)
            return false;
        size_t pos = 0;
        unsigned long long v = 0;
        try {
            v = std::stoull(raw, &pos);
        } catch (const std::exception &) {
            throw Error(ErrorKind::config, "bad seed for " + full + ": " + raw);
        }
        if (pos != raw.size())
            throw Error(ErrorKind::config, "bad seed for " + full + ": " + raw);
        out = v;
        seeds_seen.push_back(full);
        return true;
    }

    bool set_double(const std::string & full, const std::string & raw, const char * key,
                    double & out) {
        if (full != key)
            return false;
        size_t pos = 0;
        double v = 0;
        try {
            v = std::stod(raw, &pos);
        } catch (const std::exception &) {
            throw Error(ErrorKind::config, "bad number for " + full + ": " + raw);
        }
        if (pos != raw.size())
            throw Error(ErrorKind::config, "bad number for " + full + ": " + raw);
        out = v;
        return true;
    }

    void apply(const std::string & section, const std::string & key, const std::string & value) {
        const std::string full = section + "." + key;
        RunConfig & r = c;
        bool hit =
            set_int(full, value, "corpus.speakers", r.gen.speakers) ||
            set_int(full, value, "corpus.emotions", r.gen.emotions) ||
            set_int(full, value, "corpus.channels", r.gen.channels) ||
            set_int(full, value, "corpus.contents", r.gen.contents) ||
            set_int(full, value, "corpus.content_vocab", r.gen.content_vocab) ||
            set_int(full, value, "corpus.min_segments", r.gen.min_segments) ||
            set_int(full, value, "corpus.max_segments", r.gen.max_segments) ||
            set_int(full, value, "corpus.min_seg_len", r.gen.min_seg_len) ||
            set_int(full, value, "corpus.max_seg_len", r.gen.max_seg_len) ||
            set_double(full, value, "corpus.noise_sigma", r.gen.noise_sigma) ||
            set_double(full, value, "corpus.speaker_margin", r.gen.speaker_margin) ||
            set_double(full, value, "corpus.emotion_scale", r.gen.emotion_scale) ||
            set_int(full, value, "corpus.train_contents", r.train_contents) ||
            set_int(full, value, "corpus.reference_contents", r.reference_contents) ||
            set_int(full, value, "corpus.test_contents", r.test_contents) ||
            set_int(full, value, "tokenizer.codebook_size", r.codebook_size) ||
            set_int(full, value, "tokenizer.kmeans_iters", r.kmeans_iters) ||
            set_int(full, value, "model.d_model", r.ar.d_model) ||
            set_int(full, value, "model.layers", r.ar.layers) ||
            set_int(full, value, "model.heads", r.ar.heads) ||
            set_int(full, value, "model.ffn", r.ar.ffn) ||
            set_int(full, value, "model.lora_rank", r.ar.lora_rank) ||
            set_double(full, value, "model.lora_alpha", r.ar.lora_alpha) ||
            set_int(full, value, "model.d_style", r.prefix.d_style) ||
            set_int(full, value, "model.style_layers", r.prefix.style_layers) ||
            set_int(full, value, "model.style_heads", r.prefix.style_heads) ||
            set_int(full, value, "model.style_ffn", r.prefix.style_ffn) ||
            set_int(full, value, "model.prefix_latents", r.prefix.latents) ||
            set_int(full, value, "model.perceiver_blocks", r.prefix.perceiver_blocks) ||
            set_int(full, value, "model.d_emo", r.prefix.d_emo) ||
            set_int(full, value, "model.flow_d_model", r.flow.d_model) ||
            set_int(full, value, "model.flow_layers", r.flow.layers) ||
            set_int(full, value, "model.flow_heads", r.flow.heads) ||
            set_int(full, value, "model.flow_ffn", r.flow.ffn) ||
            set_int(full, value, "train.backbone_steps", r.backbone_steps) ||
            set_int(full, value, "train.backbone_batch", r.backbone_batch) ||
            set_double(full, value, "train.backbone_lr", r.backbone_lr) ||
            set_int(full, value, "train.prefix_steps", r.prefix_steps) ||
            set_int(full, value, "train.prefix_batch", r.prefix_batch) ||
            set_double(full, value, "train.prefix_lr", r.prefix_lr) ||
            set_int(full, value, "train.stage2_steps", r.stage2_steps) ||
            set_int(full, value, "train.stage2_batch", r.stage2_batch) ||
            set_double(full, value, "train.stage2_lr", r.stage2_lr) ||
            set_double(full, value, "train.stage2_jitter_sigma", r.stage2_jitter_sigma) ||
            set_double(full, value, "train.stage2_ref_mask_prob", r.stage2_ref_mask_prob) ||
            set_double(full, value, "sampling.temperature", r.temperature) ||
            set_int(full, value, "sampling.top_k", r.top_k) ||
            set_int(full, value, "sampling.flow_steps", r.flow_steps) ||
            set_int(full, value, "sampling.max_gen_len", r.max_gen_len) ||
            set_u64(full, value, "seeds.corpus", r.corpus_seed) ||
            set_u64(full, value, "seeds.tokenizer", r.tokenizer_seed) ||
            set_u64(full, value, "seeds.probes", r.probe_seed) ||
            set_u64(full, value, "seeds.backbone", r.backbone_seed) ||
            set_u64(full, value, "seeds.stage2", r.stage2_seed) ||
            set_u64(full, value, "seeds.prefix", r.prefix_seed) ||
            set_u64(full, value, "seeds.convert", r.convert_seed) ||
            set_u64(full, value, "seeds.eval", r.eval_seed);
        if (hit)
            return;
        if (full == "model.mode") {
            r.mode = parse_prefix_mode(value);
            return;
        }
        if (full == "paths.base_dir") {
            r.base_dir = value;
            return;
        }
        throw Error(ErrorKind::config, "unknown config key: " + full);
    }
};

const char * kSeedKeys[] = {"seeds.corpus", "seeds.tokenizer", "seeds.probes", "seeds.backbone",
                            "seeds.stage2", "seeds.prefix",    "seeds.convert", "seeds.eval"};

} // namespace

RunConfig parse_run_config_text(const std::string & text,
                                const std::vector<std::string> & overrides) {
    RunConfig c;
    KeyTable table{c};
    std::istringstream in(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const size_t hash = line.find_first_of("#;");
        if (hash != std::string::npos)
            line = line.substr(0, hash);
        line = trim(line);
        if (line.empty())
            continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw Error(ErrorKind::config,
                            "malformed section header at line " + std::to_string(lineno));
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw Error(ErrorKind::config, "expected key = value at line " + std::to_string(lineno));
        if (section.empty())
            throw Error(ErrorKind::config, "key outside any section at line " + std::to_string(lineno));
        table.apply(section, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }

    for (const std::string & ov : overrides) {
        const size_t eq = ov.find('=');
        const size_t dot = ov.find('.');
        if (eq == std::string::npos || dot == std::string::npos || dot > eq)
            throw Error(ErrorKind::config, "override must be section.key=value: " + ov);
        table.apply(trim(ov.substr(0, dot)), trim(ov.substr(dot + 1, eq - dot - 1)),
                    trim(ov.substr(eq + 1)));
    }

    for (const char * key : kSeedKeys)
        if (std::find(table.seeds_seen.begin(), table.seeds_seen.end(), key) ==
            table.seeds_seen.end())
            throw Error(ErrorKind::config, std::string("seed field is mandatory: ") + key);

    // derived dims follow the corpus and tokenizer; they are not keys
    c.gen.seed = c.corpus_seed;
    c.ar.content_vocab = c.gen.content_vocab;
    c.ar.audio_vocab = c.codebook_size;
    c.flow.audio_vocab = c.codebook_size;
    c.flow.mel_channels = c.gen.channels;
    c.prefix.mel_channels = c.gen.channels;
    c.prefix.d_model = c.ar.d_model;

    if (c.base_dir.empty()) {
        const char * env = std::getenv("PREFIXVC_HOME");
        c.base_dir = env && *env ? env : "runs";
    }

    c.validate();
    return c;
}

RunConfig load_run_config(const std::string & path, const std::vector<std::string> & overrides) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw Error(ErrorKind::config, "cannot open config file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_run_config_text(ss.str(), overrides);
}

void RunConfig::validate() const {
    gen.validate();
    ar.validate();
    flow.validate();
    if (train_contents < 1 || reference_contents < 1 || test_contents < 1)
        throw Error(ErrorKind::config, "every split needs at least one content");
    if (train_contents + reference_contents + test_contents != gen.contents)
        throw Error(ErrorKind::config, "splits must sum to the corpus content count");
    if (codebook_size < 2)
        throw Error(ErrorKind::config, "codebook needs at least two entries");
    if (kmeans_iters < 1)
        throw Error(ErrorKind::config, "tokenizer needs at least one k-means iteration");
    if (backbone_steps < 1 || prefix_steps < 1 || stage2_steps < 1)
        throw Error(ErrorKind::config, "training budgets must be positive");
    if (backbone_batch < 1 || prefix_batch < 1 || stage2_batch < 1)
        throw Error(ErrorKind::config, "batch sizes must be positive");
    if (!(backbone_lr > 0.0) || !(prefix_lr > 0.0) || !(stage2_lr > 0.0))
        throw Error(ErrorKind::config, "learning rates must be positive");
    if (stage2_jitter_sigma < 0.0)
        throw Error(ErrorKind::config, "jitter sigma cannot be negative");
    if (stage2_ref_mask_prob < 0.0 || stage2_ref_mask_prob > 1.0)
        throw Error(ErrorKind::config, "mask probability must sit in [0,1]");
    if (!(temperature > 0.0))
        throw Error(ErrorKind::config, "sampling temperature must be positive");
    if (top_k < 1)
        throw Error(ErrorKind::config, "top-k must be positive");
    if (flow_steps < 1)
        throw Error(ErrorKind::config, "flow sampling needs at least one step");
    if (max_gen_len < 1)
        throw Error(ErrorKind::config, "generation length cap must be positive");
    if (prefix.d_model != ar.d_model || prefix.mel_channels != gen.channels ||
        flow.mel_channels != gen.channels || ar.audio_vocab != codebook_size ||
        flow.audio_vocab != codebook_size || ar.content_vocab != gen.content_vocab)
        throw Error(ErrorKind::config, "derived model dims drifted from the corpus settings");
}

std::string RunConfig::fingerprint() const {
    std::ostringstream os;
    os << "spk=" << gen.speakers << ";emo=" << gen.emotions << ";ch=" << gen.channels
       << ";contents=" << gen.contents << ";cv=" << gen.content_vocab << ";split="
       << train_contents << "/" << reference_contents << "/" << test_contents << ";q="
       << codebook_size << ";d=" << ar.d_model << ";L=" << ar.layers << ";mode="
       << prefix_mode_name(mode) << ";k=" << prefix.latents << ";flow_d=" << flow.d_model
       << ";flow_L=" << flow.layers << ";steps=" << backbone_steps << "/" << prefix_steps << "/"
       << stage2_steps << ";seeds=" << corpus_seed << "/" << tokenizer_seed << "/" << probe_seed
       << "/" << backbone_seed << "/" << stage2_seed << "/" << prefix_seed << "/" << convert_seed
       << "/" << eval_seed;
    return os.str();
}

std::string default_config_text() {
    return R"(# Desk-scale run. The reference system fine-tunes for 46k steps at lr 2e-5
# on studio corpora; this synthetic corpus is four orders of magnitude
# smaller, so budgets here are a few thousand steps at lr around 3e-3.

[corpus]
speakers = 3
emotions = 3
channels = 16
contents = 12
content_vocab = 12
min_segments = 4
max_segments = 6
min_seg_len = 6
max_seg_len = 9
noise_sigma = 0.03
speaker_margin = 2.0
emotion_scale = 1.0
train_contents = 8
reference_contents = 2
test_contents = 2

[tokenizer]
codebook_size = 48
kmeans_iters = 30

[model]
d_model = 64
layers = 4
heads = 4
ffn = 128
lora_rank = 4
lora_alpha = 8.0
mode = deep-prefix
d_style = 32
style_layers = 2
style_heads = 4
style_ffn = 64
prefix_latents = 8
perceiver_blocks = 1
d_emo = 16
flow_d_model = 48
flow_layers = 3
flow_heads = 4
flow_ffn = 96

[train]
backbone_steps = 1500
backbone_batch = 8
backbone_lr = 3e-3
prefix_steps = 900
prefix_batch = 4
prefix_lr = 3e-3
stage2_steps = 3000
stage2_batch = 2
stage2_lr = 3e-3
stage2_jitter_sigma = 0.0
stage2_ref_mask_prob = 0.0

[sampling]
temperature = 0.8
top_k = 8
flow_steps = 32
max_gen_len = 160

[seeds]
corpus = 11
tokenizer = 12
probes = 13
backbone = 14
stage2 = 15
prefix = 16
convert = 17
eval = 18
)";
}

} // namespace prefixvc
