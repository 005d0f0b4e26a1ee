#include "prefixvc/pipeline.hpp"

#include "prefixvc/common.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;

namespace prefixvc {

namespace {

void ensure_dir(const std::string & path) {
    std::error_code ec;
    fs::create_directories(path, ec);
    if (ec)
        throw Error(ErrorKind::data, "cannot create directory " + path + ": " + ec.message());
}

std::string two(int v) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%02d", v);
    return buf;
}

void write_text(const std::string & path, const std::string & text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw Error(ErrorKind::data, "cannot open for writing: " + path);
    out << text;
    if (!out)
        throw Error(ErrorKind::data, "write failed: " + path);
}

std::string read_text(const std::string & path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw Error(ErrorKind::data, "cannot open: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void append_log_rows(const std::string & path, int first_step,
                     const std::vector<double> & losses, bool fresh) {
    std::ofstream out(path, std::ios::binary | (fresh ? std::ios::trunc : std::ios::app));
    if (!out)
        throw Error(ErrorKind::data, "cannot open training log: " + path);
    if (fresh)
        out << "step,loss\n";
    char buf[64];
    for (size_t i = 0; i < losses.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%d,%.9f\n", first_step + static_cast<int>(i), losses[i]);
        out << buf;
    }
    if (!out)
        throw Error(ErrorKind::data, "write failed: " + path);
}

// stage dependency helper: missing upstream names the stage that must run
Checkpoint need_checkpoint(const RunPaths & p, const std::string & stage) {
    const std::string path = p.checkpoint(stage);
    if (!fs::exists(path))
        throw Error(ErrorKind::state,
                    "missing dependency: train the " + stage + " stage first (" + path + ")");
    return load_checkpoint(path);
}

void verify_upstream(const Checkpoint & c, const RunPaths & p) {
    for (const auto & [key, want] : c.meta) {
        if (key.rfind("upstream.", 0) != 0)
            continue;
        const std::string name = key.substr(9);
        const std::string path =
            name == "manifest" ? p.manifest() : p.checkpoint(name);
        if (!fs::exists(path))
            throw Error(ErrorKind::state, "missing dependency: " + name + " (" + path + ")");
        if (checksum_hex(file_checksum(path)) != want)
            throw Error(ErrorKind::state, c.stage + " checkpoint was trained against a " +
                                              "different " + name + " artifact; retrain it");
    }
}

MelLike load_corpus_mel(const RunPaths & p, const UtteranceSpec & s) {
    return read_mel(p.mel_dir() + "/" + mel_filename(s));
}

std::vector<UtteranceSpec> all_specs(const CorpusSplit & split) {
    std::vector<UtteranceSpec> out;
    out.insert(out.end(), split.train.begin(), split.train.end());
    out.insert(out.end(), split.reference.begin(), split.reference.end());
    out.insert(out.end(), split.test.begin(), split.test.end());
    return out;
}

CorpusSplit split_of(const RunConfig & c) {
    return make_split(c.gen, SplitSizes{c.train_contents, c.reference_contents, c.test_contents});
}

// cyclic next content inside one split list
int next_content(const std::vector<int> & contents, int content_id) {
    auto it = std::find(contents.begin(), contents.end(), content_id);
    if (it == contents.end())
        throw Error(ErrorKind::internal, "content id not in its split");
    ++it;
    return it == contents.end() ? contents.front() : *it;
}

Codebook codebook_from(const Checkpoint & ck) {
    Codebook cb;
    for (const auto & [name, t] : ck.params)
        if (name == "tokenizer.centroids")
            cb.centroids = t;
    if (!cb.centroids.defined())
        throw Error(ErrorKind::data, "tokenizer checkpoint lacks centroids");
    cb.p95_error = std::stod(ck.meta.at("p95_error"));
    cb.trained = true;
    return cb;
}

struct ProbesOnDisk {
    ProbeKit kit;
    EmotionEmbedder embedder;
};

ProbesOnDisk probes_from(const Checkpoint & ck, const RunConfig & c) {
    ProbesOnDisk out;
    auto rng = make_rng(1); // weights are overwritten by the checkpoint
    out.kit.speaker = PoolClassifier("probe.speaker", c.gen.channels, 32, 16, c.gen.speakers, rng);
    out.kit.emotion = PoolClassifier("probe.emotion", c.gen.channels, 32, 16, c.gen.emotions, rng);
    out.kit.content =
        PoolClassifier("probe.content", c.gen.channels, 32, 16, c.gen.content_vocab, rng);
    out.embedder = EmotionEmbedder(c.gen.channels, c.prefix.d_emo, c.gen.emotions, 1);

    std::vector<Parameter *> params;
    out.kit.speaker.collect(params);
    out.kit.emotion.collect(params);
    out.kit.content.collect(params);
    out.embedder.clf.collect(params);
    restore_params(ck, params);

    out.kit.speaker.trained = out.kit.emotion.trained = out.kit.content.trained = true;
    out.kit.speaker.set_frozen(true);
    out.kit.emotion.set_frozen(true);
    out.kit.content.set_frozen(true);
    out.kit.speaker_acc = std::stod(ck.meta.at("speaker_acc"));
    out.kit.emotion_acc = std::stod(ck.meta.at("emotion_acc"));
    out.kit.content_acc = std::stod(ck.meta.at("content_acc"));
    out.kit.ready = true;

    out.embedder.clf.trained = true;
    out.embedder.clf.set_frozen(true);
    out.embedder.heldout_accuracy = std::stod(ck.meta.at("embedder_acc"));
    out.embedder.frozen = true;
    return out;
}

TokenSeq audio_tokens_of(const RunPaths & p, const Codebook & cb, const UtteranceSpec & s) {
    return audio_tokenize(load_corpus_mel(p, s), cb);
}

uint64_t parse_u64_meta(const Checkpoint & ck, const std::string & key) {
    auto it = ck.meta.find(key);
    if (it == ck.meta.end())
        throw Error(ErrorKind::data, "checkpoint lacks meta key " + key);
    return std::stoull(it->second);
}

} // namespace

RunPaths run_paths(const RunConfig & c) { return RunPaths{c.base_dir}; }

std::string mel_filename(const UtteranceSpec & s) {
    return "c" + two(s.content_id) + "_s" + two(s.speaker_id) + "_e" + two(s.emotion_id) + ".bin";
}

Stage parse_stage(const std::string & s) {
    if (s == "tokenizer")
        return Stage::tokenizer;
    if (s == "probes")
        return Stage::probes;
    if (s == "backbone")
        return Stage::backbone;
    if (s == "stage2")
        return Stage::stage2;
    if (s == "prefix")
        return Stage::prefix;
    throw Error(ErrorKind::config, "unknown training stage: " + s);
}

const char * stage_name(Stage s) {
    switch (s) {
    case Stage::tokenizer: return "tokenizer";
    case Stage::probes: return "probes";
    case Stage::backbone: return "backbone";
    case Stage::stage2: return "stage2";
    case Stage::prefix: return "prefix";
    }
    throw Error(ErrorKind::internal, "bad stage enum");
}

std::string cmd_gen_data(const RunConfig & c, bool force) {
    const RunPaths p = run_paths(c);
    if (fs::exists(p.manifest()) && !force)
        throw Error(ErrorKind::state,
                    "corpus already present at " + p.corpus_dir() + "; pass --force to regenerate");
    ensure_dir(p.mel_dir());

    const CorpusSplit split = split_of(c);
    auto split_label = [&](int content) {
        const auto & tr = split.train_contents;
        const auto & rf = split.reference_contents;
        if (std::find(tr.begin(), tr.end(), content) != tr.end())
            return "train";
        if (std::find(rf.begin(), rf.end(), content) != rf.end())
            return "reference";
        return "test";
    };

    std::ostringstream manifest;
    manifest << "# corpus manifest\n";
    manifest << "config " << c.fingerprint() << "\n";
    manifest << "content,speaker,emotion,split,seed,mel\n";
    for (const UtteranceSpec & s : all_specs(split)) {
        const MelLike mel = gen_utterance(s, c.gen);
        const std::string name = mel_filename(s);
        write_mel(p.mel_dir() + "/" + name, mel);
        manifest << s.content_id << ',' << s.speaker_id << ',' << s.emotion_id << ','
                 << split_label(s.content_id) << ',' << s.seed << ",mel/" << name << "\n";
    }
    write_text(p.manifest(), manifest.str());
    return p.manifest();
}

namespace {

std::string train_tokenizer(const RunConfig & c, const RunPaths & p) {
    if (!fs::exists(p.manifest()))
        throw Error(ErrorKind::state, "missing dependency: run gen-data first");
    const CorpusSplit split = split_of(c);
    std::vector<MelLike> mels;
    for (const auto & s : split.train)
        mels.push_back(load_corpus_mel(p, s));
    Codebook cb = train_codebook(mels, c.codebook_size, c.tokenizer_seed, c.kmeans_iters);

    Checkpoint ck;
    ck.stage = "tokenizer";
    ck.meta["config"] = c.fingerprint();
    ck.meta["p95_error"] = std::to_string(cb.p95_error);
    ck.meta["codebook_size"] = std::to_string(c.codebook_size);
    ck.meta["seed"] = std::to_string(c.tokenizer_seed);
    ck.meta["upstream.manifest"] = checksum_hex(file_checksum(p.manifest()));
    ck.params.emplace_back("tokenizer.centroids", cb.centroids);
    save_checkpoint(p.checkpoint("tokenizer"), ck);
    append_log_rows(p.train_log("tokenizer"), 1, {cb.p95_error}, true);
    return p.checkpoint("tokenizer");
}

std::string train_probes_stage(const RunConfig & c, const RunPaths & p) {
    (void)need_checkpoint(p, "tokenizer");
    const CorpusSplit split = split_of(c);

    ProbeKit kit = train_probes(c.gen, split.train, split.test, c.probe_seed);

    // the model-side emotion embedder is a separate instance so the metric
    // probe never doubles as the conditioning signal
    EmotionEmbedder embedder(c.gen.channels, c.prefix.d_emo, c.gen.emotions,
                             mix_seed(c.probe_seed, 0xE0Bull));
    std::vector<MelLike> tr_mels, te_mels;
    std::vector<int> tr_emo, te_emo;
    for (const auto & s : split.train) {
        tr_mels.push_back(load_corpus_mel(p, s));
        tr_emo.push_back(s.emotion_id);
    }
    for (const auto & s : split.test) {
        te_mels.push_back(load_corpus_mel(p, s));
        te_emo.push_back(s.emotion_id);
    }
    embedder.train(tr_mels, tr_emo, te_mels, te_emo, 60, 32, 5e-3, mix_seed(c.probe_seed, 4));
    embedder.freeze();

    Checkpoint ck;
    ck.stage = "probes";
    ck.meta["config"] = c.fingerprint();
    ck.meta["speaker_acc"] = std::to_string(kit.speaker_acc);
    ck.meta["emotion_acc"] = std::to_string(kit.emotion_acc);
    ck.meta["content_acc"] = std::to_string(kit.content_acc);
    ck.meta["embedder_acc"] = std::to_string(embedder.heldout_accuracy);
    ck.meta["upstream.manifest"] = checksum_hex(file_checksum(p.manifest()));
    ck.meta["upstream.tokenizer"] = checksum_hex(file_checksum(p.checkpoint("tokenizer")));
    std::vector<Parameter *> params;
    kit.speaker.collect(params);
    kit.emotion.collect(params);
    kit.content.collect(params);
    embedder.clf.collect(params);
    capture_params(ck, params);
    save_checkpoint(p.checkpoint("probes"), ck);

    append_log_rows(p.train_log("probes"), 1,
                    {kit.speaker_acc, kit.emotion_acc, kit.content_acc,
                     embedder.heldout_accuracy},
                    true);
    return p.checkpoint("probes");
}

// training pairs for the decoder: reference audio from the same speaker but
// a seeded random emotion and another train content, so emotion never leaks
// through the token prompt and must come from the prefix pathway
std::vector<ArInput> backbone_data(const RunConfig & c, const RunPaths & p, const Codebook & cb,
                                   const CorpusSplit & split) {
    auto rng = make_rng(mix_seed(c.backbone_seed, 0xDA7Aull));
    std::vector<ArInput> data;
    for (const auto & u : split.train) {
        const int ref_content = next_content(split.train_contents, u.content_id);
        const int ref_emotion = static_cast<int>(rng() % c.gen.emotions);
        const auto ref = make_spec(c.gen, ref_content, u.speaker_id, ref_emotion);
        ArInput in;
        in.ref_audio = audio_tokens_of(p, cb, ref).tokens;
        in.content = content_tokenize(u, c.gen).tokens;
        in.audio = audio_tokens_of(p, cb, u).tokens;
        data.push_back(std::move(in));
    }
    return data;
}

std::string train_backbone(const RunConfig & c, const RunPaths & p, bool resume) {
    const Checkpoint tok = need_checkpoint(p, "tokenizer");
    verify_upstream(tok, p);
    const Codebook cb = codebook_from(tok);
    const CorpusSplit split = split_of(c);
    const std::vector<ArInput> data = backbone_data(c, p, cb, split);

    ArTransformer m(c.ar, c.backbone_seed);
    int done = 0;
    if (resume) {
        const Checkpoint prev = need_checkpoint(p, "backbone");
        verify_upstream(prev, p);
        std::vector<Parameter *> params;
        m.collect_backbone(params);
        restore_params(prev, params);
        done = static_cast<int>(parse_u64_meta(prev, "steps_done"));
    }
    if (done > c.backbone_steps)
        throw Error(ErrorKind::config, "checkpoint already has more steps than the budget");

    const int todo = c.backbone_steps - done;
    if (todo > 0) {
        TrainLog log = pretrain_backbone(m, data, todo, c.backbone_batch, c.backbone_lr,
                                         mix_seed(c.backbone_seed, static_cast<uint64_t>(done)));
        append_log_rows(p.train_log("backbone"), done + 1, log.loss, done == 0);
    }

    Checkpoint ck;
    ck.stage = "backbone";
    ck.meta["config"] = c.fingerprint();
    ck.meta["steps_done"] = std::to_string(c.backbone_steps);
    ck.meta["seed"] = std::to_string(c.backbone_seed);
    ck.meta["upstream.tokenizer"] = checksum_hex(file_checksum(p.checkpoint("tokenizer")));
    std::vector<Parameter *> params;
    m.collect_backbone(params);
    capture_params(ck, params);
    save_checkpoint(p.checkpoint("backbone"), ck);
    return p.checkpoint("backbone");
}

struct Stage2Data {
    std::vector<ConditioningPack> packs;
    std::vector<MelLike> targets;
};

// same-speaker same-emotion cross-content reference: the geometry conversion
// sees at inference
Stage2Data stage2_data(const RunConfig & c, const RunPaths & p, const Codebook & cb,
                       const CorpusSplit & split) {
    Stage2Data out;
    for (const auto & u : split.train) {
        const auto ref =
            make_spec(c.gen, next_content(split.train_contents, u.content_id), u.speaker_id,
                      u.emotion_id);
        const MelLike target = load_corpus_mel(p, u);
        const MelLike ref_mel = load_corpus_mel(p, ref);
        out.packs.push_back(condition_pack(audio_tokenize(target, cb), audio_tokenize(ref_mel, cb),
                                           ref_mel));
        out.targets.push_back(target);
    }
    return out;
}

std::string train_stage2(const RunConfig & c, const RunPaths & p, bool resume) {
    const Checkpoint tok = need_checkpoint(p, "tokenizer");
    verify_upstream(tok, p);
    const Codebook cb = codebook_from(tok);
    const CorpusSplit split = split_of(c);
    Stage2Data data = stage2_data(c, p, cb, split);

    FlowDecoder m(c.flow, mix_seed(c.stage2_seed, 0xF10Dull));
    int done = 0;
    if (resume) {
        const Checkpoint prev = need_checkpoint(p, "stage2");
        verify_upstream(prev, p);
        std::vector<Parameter *> params;
        m.collect(params);
        restore_params(prev, params);
        done = static_cast<int>(parse_u64_meta(prev, "steps_done"));
    }
    if (done > c.stage2_steps)
        throw Error(ErrorKind::config, "checkpoint already has more steps than the budget");

    std::vector<Parameter *> params;
    m.collect(params);
    AdamW opt(c.stage2_lr);
    auto rng = make_rng(mix_seed(c.stage2_seed, static_cast<uint64_t>(done)));
    std::uniform_int_distribution<size_t> pick(0, data.packs.size() - 1);
    const std::vector<int> jitter_channels = {0, 1};

    std::vector<double> losses;
    for (int step = done; step < c.stage2_steps; ++step) {
        // two-drop schedule mirrors the module-scale calibration
        if (step == (c.stage2_steps * 3) / 5)
            opt.set_lr(c.stage2_lr / 3.0);
        if (step == (c.stage2_steps * 17) / 20)
            opt.set_lr(c.stage2_lr / 10.0);
        std::vector<FlowBatch> batch;
        for (int b = 0; b < c.stage2_batch; ++b) {
            const size_t i = pick(rng);
            ConditioningPack pack = data.packs[i];
            MelLike target = data.targets[i];
            if (c.stage2_jitter_sigma > 0.0)
                apply_dc_jitter(pack.ref_mel, target, jitter_channels, c.stage2_jitter_sigma,
                                rng);
            if (c.stage2_ref_mask_prob > 0.0 &&
                std::uniform_real_distribution<double>(0.0, 1.0)(rng) < c.stage2_ref_mask_prob)
                pack = mask_ref_tokens(pack, c.flow.mask_id());
            batch.push_back(make_flow_batch(pack, target, rng));
        }
        losses.push_back(fm_train_step(m, batch, opt, params));
    }
    if (!losses.empty())
        append_log_rows(p.train_log("stage2"), done + 1, losses, done == 0);

    Checkpoint ck;
    ck.stage = "stage2";
    ck.meta["config"] = c.fingerprint();
    ck.meta["steps_done"] = std::to_string(c.stage2_steps);
    ck.meta["seed"] = std::to_string(c.stage2_seed);
    ck.meta["upstream.tokenizer"] = checksum_hex(file_checksum(p.checkpoint("tokenizer")));
    std::vector<Parameter *> save_params;
    m.collect(save_params);
    capture_params(ck, save_params);
    save_checkpoint(p.checkpoint("stage2"), ck);
    return p.checkpoint("stage2");
}

struct PrefixTrainSet {
    std::vector<FineTuneItem> items;
};

// fine-tuning pairs carry the target emotion in the reference: the prefix
// pathway is the only place the model can read it from
PrefixTrainSet prefix_data(const RunConfig & c, const RunPaths & p, const Codebook & cb,
                           const CorpusSplit & split, const EmotionEmbedder & embedder) {
    PrefixTrainSet out;
    for (const auto & u : split.train) {
        const auto ref =
            make_spec(c.gen, next_content(split.train_contents, u.content_id), u.speaker_id,
                      u.emotion_id);
        const MelLike ref_mel = load_corpus_mel(p, ref);
        FineTuneItem item;
        item.tokens.ref_audio = audio_tokenize(ref_mel, cb).tokens;
        item.tokens.content = content_tokenize(u, c.gen).tokens;
        item.tokens.audio = audio_tokens_of(p, cb, u).tokens;
        item.ref_mel = ref_mel;
        item.emotion_emb = embedder.embed(ref_mel);
        out.items.push_back(std::move(item));
    }
    return out;
}

std::string train_prefix(const RunConfig & c, const RunPaths & p, bool resume) {
    const Checkpoint tok = need_checkpoint(p, "tokenizer");
    const Checkpoint bb = need_checkpoint(p, "backbone");
    const Checkpoint pr = need_checkpoint(p, "probes");
    const Checkpoint s2 = need_checkpoint(p, "stage2");
    verify_upstream(bb, p);
    verify_upstream(pr, p);
    verify_upstream(s2, p);

    const Codebook cb = codebook_from(tok);
    const CorpusSplit split = split_of(c);
    ProbesOnDisk probes = probes_from(pr, c);
    const PrefixTrainSet data = prefix_data(c, p, cb, split, probes.embedder);

    ArTransformer m(c.ar, c.backbone_seed);
    {
        std::vector<Parameter *> params;
        m.collect_backbone(params);
        restore_params(bb, params);
    }
    auto rng = make_rng(mix_seed(c.prefix_seed, 0xF1BEull));
    m.attach_lora(rng);
    m.freeze_backbone();
    PrefixProjections proj(c.ar.layers, c.ar.d_model, rng);
    PrefixEncoder enc(c.prefix, rng);

    int done = 0;
    if (resume) {
        const Checkpoint prev = need_checkpoint(p, "prefix");
        verify_upstream(prev, p);
        std::vector<Parameter *> params;
        m.collect_adapters(params);
        proj.collect(params);
        enc.collect(params);
        restore_params(prev, params);
        done = static_cast<int>(parse_u64_meta(prev, "steps_done"));
    }
    if (done > c.prefix_steps)
        throw Error(ErrorKind::config, "checkpoint already has more steps than the budget");

    std::vector<Parameter *> bb_params;
    m.collect_backbone(bb_params);
    const uint64_t backbone_before = params_checksum(bb_params);

    const std::vector<Parameter *> trainables = finetune_trainables(m, proj, enc);
    AdamW opt(c.prefix_lr);
    auto step_rng = make_rng(mix_seed(c.prefix_seed, static_cast<uint64_t>(done)));
    std::uniform_int_distribution<size_t> pick(0, data.items.size() - 1);

    std::vector<double> losses;
    for (int step = done; step < c.prefix_steps; ++step) {
        if (step == (c.prefix_steps * 3) / 5)
            opt.set_lr(c.prefix_lr / 3.0);
        std::vector<FineTuneItem> batch;
        for (int b = 0; b < c.prefix_batch; ++b) {
            FineTuneItem item = data.items[pick(step_rng)];
            item.shuffle_seed = step_rng();
            batch.push_back(std::move(item));
        }
        losses.push_back(finetune_step(m, proj, enc, batch, c.mode, opt, trainables));
    }
    if (!losses.empty())
        append_log_rows(p.train_log("prefix"), done + 1, losses, done == 0);

    if (params_checksum(bb_params) != backbone_before)
        throw Error(ErrorKind::internal, "frozen backbone drifted during fine-tuning");

    Checkpoint ck;
    ck.stage = "prefix";
    ck.meta["config"] = c.fingerprint();
    ck.meta["mode"] = prefix_mode_name(c.mode);
    ck.meta["steps_done"] = std::to_string(c.prefix_steps);
    ck.meta["seed"] = std::to_string(c.prefix_seed);
    ck.meta["backbone_params"] = checksum_hex(backbone_before);
    ck.meta["upstream.tokenizer"] = checksum_hex(file_checksum(p.checkpoint("tokenizer")));
    ck.meta["upstream.backbone"] = checksum_hex(file_checksum(p.checkpoint("backbone")));
    ck.meta["upstream.probes"] = checksum_hex(file_checksum(p.checkpoint("probes")));
    ck.meta["upstream.stage2"] = checksum_hex(file_checksum(p.checkpoint("stage2")));
    std::vector<Parameter *> save_params;
    m.collect_adapters(save_params);
    proj.collect(save_params);
    enc.collect(save_params);
    capture_params(ck, save_params);
    save_checkpoint(p.checkpoint("prefix"), ck);
    return p.checkpoint("prefix");
}

} // namespace

std::string cmd_train(const RunConfig & c, Stage stage, bool resume) {
    const RunPaths p = run_paths(c);
    ensure_dir(p.checkpoint_dir());
    ensure_dir(p.log_dir());
    switch (stage) {
    case Stage::tokenizer: return train_tokenizer(c, p);
    case Stage::probes: return train_probes_stage(c, p);
    case Stage::backbone: return train_backbone(c, p, resume);
    case Stage::stage2: return train_stage2(c, p, resume);
    case Stage::prefix: return train_prefix(c, p, resume);
    }
    throw Error(ErrorKind::internal, "bad stage enum");
}

ModelBundle load_bundle(const RunConfig & c, bool need_prefix) {
    const RunPaths p = run_paths(c);
    ModelBundle b;
    b.cfg = c;
    b.split = split_of(c);

    const Checkpoint tok = need_checkpoint(p, "tokenizer");
    verify_upstream(tok, p);
    b.codebook = codebook_from(tok);
    b.provenance["tokenizer"] = checksum_hex(file_checksum(p.checkpoint("tokenizer")));

    const Checkpoint pr = need_checkpoint(p, "probes");
    verify_upstream(pr, p);
    ProbesOnDisk probes = probes_from(pr, c);
    b.probes = std::move(probes.kit);
    b.embedder = std::move(probes.embedder);
    b.provenance["probes"] = checksum_hex(file_checksum(p.checkpoint("probes")));

    const Checkpoint bb = need_checkpoint(p, "backbone");
    verify_upstream(bb, p);
    b.ar = ArTransformer(c.ar, c.backbone_seed);
    {
        std::vector<Parameter *> params;
        b.ar.collect_backbone(params);
        restore_params(bb, params);
    }
    b.provenance["backbone"] = checksum_hex(file_checksum(p.checkpoint("backbone")));

    const Checkpoint s2 = need_checkpoint(p, "stage2");
    verify_upstream(s2, p);
    b.flow = FlowDecoder(c.flow, mix_seed(c.stage2_seed, 0xF10Dull));
    {
        std::vector<Parameter *> params;
        b.flow.collect(params);
        restore_params(s2, params);
    }
    b.provenance["stage2"] = checksum_hex(file_checksum(p.checkpoint("stage2")));

    b.mode = PrefixMode::none;
    if (need_prefix) {
        const Checkpoint pf = need_checkpoint(p, "prefix");
        verify_upstream(pf, p);
        auto rng = make_rng(mix_seed(c.prefix_seed, 0xF1BEull));
        b.ar.attach_lora(rng);
        b.ar.freeze_backbone();
        b.proj = PrefixProjections(c.ar.layers, c.ar.d_model, rng);
        b.enc = PrefixEncoder(c.prefix, rng);
        std::vector<Parameter *> params;
        b.ar.collect_adapters(params);
        b.proj.collect(params);
        b.enc.collect(params);
        restore_params(pf, params);
        b.mode = parse_prefix_mode(pf.meta.at("mode"));
        b.prefix_loaded = true;
        b.provenance["prefix"] = checksum_hex(file_checksum(p.checkpoint("prefix")));
    }
    return b;
}

ConvertResult convert_one(const ModelBundle & b, const ConvertRequest & rq) {
    const RunConfig & c = b.cfg;
    const RunPaths p = run_paths(c);
    if (rq.target_emotion < 0 || rq.target_emotion >= c.gen.emotions ||
        rq.source_emotion < 0 || rq.source_emotion >= c.gen.emotions)
        throw Error(ErrorKind::input, "emotion id out of range");
    if (rq.speaker_id < 0 || rq.speaker_id >= c.gen.speakers)
        throw Error(ErrorKind::input, "speaker id out of range");
    if (rq.mode != PrefixMode::none && !b.prefix_loaded)
        throw Error(ErrorKind::state, "prefix checkpoint not loaded; convert with --mode none");

    const UtteranceSpec source = make_spec(c.gen, rq.content_id, rq.speaker_id, rq.source_emotion);

    // references come from the held-out reference contents, same speaker
    const auto & refs = b.split.reference_contents;
    const int ref_content = refs[(rq.content_id + rq.speaker_id) % refs.size()];
    const int e1 = rq.setting.stage1 == RefEmotion::target ? rq.target_emotion : rq.source_emotion;
    const int e2 = rq.setting.stage2 == RefEmotion::target ? rq.target_emotion : rq.source_emotion;
    const auto ref1 = make_spec(c.gen, ref_content, rq.speaker_id, e1);
    const auto ref2 = make_spec(c.gen, ref_content, rq.speaker_id, e2);
    const MelLike ref1_mel = load_corpus_mel(p, ref1);
    const MelLike ref2_mel = load_corpus_mel(p, ref2);

    ArInput prompt;
    prompt.ref_audio = audio_tokenize(ref1_mel, b.codebook).tokens;
    prompt.content = content_tokenize(source, c.gen).tokens;

    Tensor prefix_e;
    const PrefixProjections * proj = nullptr;
    if (rq.mode != PrefixMode::none) {
        prefix_e = b.enc.encode(ref1_mel, b.embedder.embed(ref1_mel), std::nullopt);
        if (rq.mode == PrefixMode::deep_kv)
            proj = &b.proj;
    }

    // an immediate end marker leaves nothing to decode; retry on fixed salts
    // so the output stays a pure function of the request
    GenResult gen;
    for (uint64_t attempt = 0; attempt < 8; ++attempt) {
        gen = generate(b.ar, prompt, prefix_e, proj, rq.mode, c.temperature, c.top_k,
                       mix_seed(rq.seed, 0x6E6Eull + attempt), c.max_gen_len);
        if (!gen.audio.empty())
            break;
    }
    if (gen.audio.empty())
        throw Error(ErrorKind::numeric, "conversion produced no audio tokens");

    TokenSeq out_tokens;
    out_tokens.tokens = gen.audio;
    out_tokens.kind = TokenKind::audio;
    out_tokens.vocab = c.codebook_size;

    const TokenSeq ref2_tokens = audio_tokenize(ref2_mel, b.codebook);
    ConvertResult res;
    res.tokens = out_tokens;
    res.truncated = gen.truncated;
    res.mel = decode_utterance(b.flow, out_tokens, ref2_tokens, ref2_mel, c.flow_steps,
                               mix_seed(rq.seed, 0xF10ull));

    auto & md = res.metadata;
    md["content"] = std::to_string(rq.content_id);
    md["speaker"] = std::to_string(rq.speaker_id);
    md["source_emotion"] = std::to_string(rq.source_emotion);
    md["target_emotion"] = std::to_string(rq.target_emotion);
    md["setting"] = setting_name(rq.setting);
    md["stage1_ref_emotion"] = rq.setting.stage1 == RefEmotion::target ? "target" : "source";
    md["stage2_ref_emotion"] = rq.setting.stage2 == RefEmotion::target ? "target" : "source";
    md["ref_content"] = std::to_string(ref_content);
    md["mode"] = prefix_mode_name(rq.mode);
    md["seed"] = std::to_string(rq.seed);
    md["temperature"] = std::to_string(c.temperature);
    md["top_k"] = std::to_string(c.top_k);
    md["flow_steps"] = std::to_string(c.flow_steps);
    md["truncated"] = gen.truncated ? "1" : "0";
    md["config"] = c.fingerprint();
    for (const auto & [k, v] : b.provenance)
        md["checkpoint." + k] = v;
    return res;
}

std::string cmd_convert(const RunConfig & c, int content_id, int speaker_id, int source_emotion,
                        int target_emotion, const std::string & run_name, PrefixMode mode,
                        const ControlSetting & setting) {
    const ModelBundle b = load_bundle(c, mode != PrefixMode::none);
    ConvertRequest rq;
    rq.content_id = content_id;
    rq.speaker_id = speaker_id;
    rq.source_emotion = source_emotion;
    rq.target_emotion = target_emotion;
    rq.setting = setting;
    rq.mode = mode;
    rq.seed = c.convert_seed;
    const ConvertResult res = convert_one(b, rq);

    const RunPaths p = run_paths(c);
    const std::string dir = p.converted_root() + "/" + run_name;
    ensure_dir(dir);
    const std::string stem = dir + "/c" + two(content_id) + "_s" + two(speaker_id) + "_e" +
                             two(source_emotion) + "_to_e" + two(target_emotion);
    write_mel(stem + ".mel", res.mel);
    write_tokens(stem + ".tok", res.tokens);
    std::ostringstream meta;
    for (const auto & [k, v] : res.metadata)
        meta << k << "=" << v << "\n";
    write_text(stem + ".meta", meta.str());
    return stem + ".mel";
}

namespace {

struct EvalRow {
    std::string name;
    int speaker = 0, target_emotion = 0;
    double eca_hit = 0, spk_sim = 0, emo_sim_item = 0, content_acc = 0;
};

struct EvalInputs {
    std::vector<MelLike> mels;
    std::vector<UtteranceSpec> sources;
    std::vector<int> target_speakers, target_emotions;
    std::vector<std::string> names;
};

MetricReport evaluate_set(const ModelBundle & b, const EvalInputs & in, const std::string & tag,
                          std::vector<EvalRow> * rows_out) {
    const RunConfig & c = b.cfg;
    const RunPaths p = run_paths(c);
    if (in.mels.empty())
        throw Error(ErrorKind::input, "nothing to evaluate");

    // speaker centroids come from training-split embeddings across emotions
    EmbeddingSet train_emb;
    train_emb.source = "train";
    for (const auto & s : b.split.train) {
        train_emb.vectors.push_back(embed_mel(load_corpus_mel(p, s), b.probes.speaker));
        train_emb.speakers.push_back(s.speaker_id);
        train_emb.emotions.push_back(s.emotion_id);
    }
    const SpeakerCentroids cents = speaker_centroids(train_emb, c.gen.speakers);

    EmbeddingSet conv_emb;
    conv_emb.source = "converted";
    std::vector<std::vector<double>> conv_emo, ref_emo;
    std::vector<EvalRow> rows;
    for (size_t i = 0; i < in.mels.size(); ++i) {
        conv_emb.vectors.push_back(embed_mel(in.mels[i], b.probes.speaker));
        conv_emb.speakers.push_back(in.target_speakers[i]);
        conv_emb.emotions.push_back(in.target_emotions[i]);

        conv_emo.push_back(embed_mel(in.mels[i], b.probes.emotion));
        // emotion reference: a real target-emotion utterance of the same
        // speaker from the reference contents
        const int rc = b.split.reference_contents[(in.sources[i].content_id +
                                                   in.target_speakers[i]) %
                                                  b.split.reference_contents.size()];
        const auto ref = make_spec(c.gen, rc, in.target_speakers[i], in.target_emotions[i]);
        ref_emo.push_back(embed_mel(load_corpus_mel(p, ref), b.probes.emotion));

        EvalRow row;
        row.name = in.names[i];
        row.speaker = in.target_speakers[i];
        row.target_emotion = in.target_emotions[i];
        const std::vector<double> pooled =
            mean_pool_rows(in.mels[i].frames, in.mels[i].t, in.mels[i].d);
        row.eca_hit =
            b.probes.emotion.predict_row(pooled.data()) == in.target_emotions[i] ? 1.0 : 0.0;
        row.spk_sim = spk_cent_sim(
            EmbeddingSet{{conv_emb.vectors.back()}, {in.target_speakers[i]}, {0}, "converted"},
            cents, {in.target_speakers[i]});
        row.emo_sim_item = emo_sim({conv_emo.back()}, {ref_emo.back()});
        row.content_acc =
            content_accuracy_proxy({in.mels[i]}, {in.sources[i]}, c.gen, b.probes.content);
        rows.push_back(row);
    }

    MetricReport r;
    r.count = static_cast<int>(in.mels.size());
    r.eca = eca(in.mels, in.target_emotions, b.probes.emotion);
    r.spk_cent_sim = spk_cent_sim(conv_emb, cents, in.target_speakers);
    r.emo_sim = emo_sim(conv_emo, ref_emo);
    r.content_accuracy_proxy =
        content_accuracy_proxy(in.mels, in.sources, c.gen, b.probes.content);

    // genuine vs impostor pairs against real training-split embeddings
    const VerificationTrials trials =
        verification_scores(conv_emb, train_emb, mix_seed(c.eval_seed, 0xEE2ull));
    r.eer = eer(trials.genuine, trials.impostor);

    std::ostringstream fp;
    fp << tag << ";eval_seed=" << c.eval_seed << ";" << c.fingerprint();
    for (const auto & [k, v] : b.provenance)
        fp << ";ck_" << k << "=" << v;
    r.fingerprint = fp.str();

    if (rows_out)
        *rows_out = std::move(rows);
    return r;
}

EvalInputs conversion_set(const ModelBundle & b, const ControlSetting & setting,
                          PrefixMode mode) {
    const RunConfig & c = b.cfg;
    EvalInputs in;
    for (const auto & u : b.split.test)
        for (int target = 0; target < c.gen.emotions; ++target) {
            if (target == u.emotion_id)
                continue;
            ConvertRequest rq;
            rq.content_id = u.content_id;
            rq.speaker_id = u.speaker_id;
            rq.source_emotion = u.emotion_id;
            rq.target_emotion = target;
            rq.setting = setting;
            rq.mode = mode;
            rq.seed = mix_seed(c.convert_seed,
                               static_cast<uint64_t>(((u.content_id * 37 + u.speaker_id) * 11 +
                                                      u.emotion_id) *
                                                         7 +
                                                     target));
            ConvertResult res = convert_one(b, rq);
            in.mels.push_back(std::move(res.mel));
            in.sources.push_back(u);
            in.target_speakers.push_back(u.speaker_id);
            in.target_emotions.push_back(target);
            in.names.push_back("c" + two(u.content_id) + "_s" + two(u.speaker_id) + "_e" +
                               two(u.emotion_id) + "_to_e" + two(target));
        }
    return in;
}

} // namespace

MetricReport run_stage_isolation(const ModelBundle & b, const ControlSetting & setting) {
    const PrefixMode mode = b.prefix_loaded ? b.mode : PrefixMode::none;
    const EvalInputs in = conversion_set(b, setting, mode);
    return evaluate_set(b, in,
                        std::string("setting=") + setting_name(setting) +
                            ";mode=" + prefix_mode_name(mode),
                        nullptr);
}

MetricReport cmd_eval(const RunConfig & c, const std::string & converted_dir) {
    const RunPaths p = run_paths(c);
    const std::string dir = converted_dir.find('/') == std::string::npos
                                ? p.converted_root() + "/" + converted_dir
                                : converted_dir;
    if (!fs::exists(dir))
        throw Error(ErrorKind::input, "converted directory does not exist: " + dir);

    // probes must exist before anything is scored
    const ModelBundle b = load_bundle(c, fs::exists(p.checkpoint("prefix")));

    EvalInputs in;
    std::vector<std::string> stems;
    for (const auto & entry : fs::directory_iterator(dir))
        if (entry.path().extension() == ".mel")
            stems.push_back(entry.path().stem().string());
    std::sort(stems.begin(), stems.end());
    if (stems.empty())
        throw Error(ErrorKind::input, "no converted mels in " + dir);

    for (const std::string & stem : stems) {
        const std::string meta_text = read_text(dir + "/" + stem + ".meta");
        std::map<std::string, std::string> md;
        std::istringstream ms(meta_text);
        std::string line;
        while (std::getline(ms, line)) {
            const size_t eq = line.find('=');
            if (eq != std::string::npos)
                md[line.substr(0, eq)] = line.substr(eq + 1);
        }
        const int content = std::stoi(md.at("content"));
        const int speaker = std::stoi(md.at("speaker"));
        const int src_emo = std::stoi(md.at("source_emotion"));
        in.mels.push_back(read_mel(dir + "/" + stem + ".mel"));
        in.sources.push_back(make_spec(c.gen, content, speaker, src_emo));
        in.target_speakers.push_back(speaker);
        in.target_emotions.push_back(std::stoi(md.at("target_emotion")));
        in.names.push_back(stem);
    }

    std::vector<EvalRow> rows;
    const MetricReport report = evaluate_set(b, in, "eval_dir=" + dir, &rows);

    ensure_dir(p.reports_dir());
    std::ostringstream per;
    per << "name,speaker,target_emotion,eca_hit,spk_cent_sim,emo_sim,content_accuracy_proxy\n";
    char buf[160];
    for (const EvalRow & row : rows) {
        std::snprintf(buf, sizeof buf, "%s,%d,%d,%.6f,%.6f,%.6f,%.6f\n", row.name.c_str(),
                      row.speaker, row.target_emotion, row.eca_hit, row.spk_sim,
                      row.emo_sim_item, row.content_acc);
        per << buf;
    }
    write_text(p.reports_dir() + "/per_utterance.csv", per.str());
    write_text(p.reports_dir() + "/aggregate.csv",
               metric_csv_header() + "\n" + metric_csv_row(report) + "\n");
    write_text(p.reports_dir() + "/aggregate.txt", metric_text(report));
    return report;
}

std::string cmd_ablate(const RunConfig & c) {
    const RunPaths p = run_paths(c);
    const ModelBundle with_prefix = load_bundle(c, true);
    const ModelBundle no_prefix = load_bundle(c, false);

    const ControlSetting settings[3] = {
        {RefEmotion::target, RefEmotion::target},
        {RefEmotion::target, RefEmotion::source},
        {RefEmotion::source, RefEmotion::target},
    };

    std::ostringstream csv;
    csv << "model,setting,eca,emo_sim,spk_cent_sim,eer,fingerprint\n";
    for (const ModelBundle * b : {&with_prefix, &no_prefix}) {
        const char * model = b->prefix_loaded ? "prefix" : "backbone";
        for (const ControlSetting & s : settings) {
            const MetricReport r = run_stage_isolation(*b, s);
            char buf[96];
            std::snprintf(buf, sizeof buf, "%s,%s,%.6f,%.6f,%.6f,%.6f,", model,
                          setting_name(s).c_str(), r.eca, r.emo_sim, r.spk_cent_sim, r.eer);
            csv << buf << '"' << r.fingerprint << "\"\n";
        }
    }
    ensure_dir(p.reports_dir());
    const std::string path = p.reports_dir() + "/ablation.csv";
    write_text(path, csv.str());
    return path;
}

} // namespace prefixvc
