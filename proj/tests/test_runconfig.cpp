#include "prefixvc/runconfig.hpp"

#include "prefixvc/common.hpp"

#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>

using namespace prefixvc;

namespace {

template <class F> ErrorKind kind_of(F && f) {
    try {
        f();
    } catch (const Error & e) {
        return e.kind();
    }
    FAIL("expected an Error");
    return ErrorKind::internal;
}

RunConfig parse_default(const std::vector<std::string> & overrides = {}) {
    return parse_run_config_text(default_config_text(), overrides);
}

std::string without_line(const std::string & text, const std::string & needle) {
    const size_t at = text.find(needle);
    REQUIRE(at != std::string::npos);
    const size_t end = text.find('\n', at);
    std::string out = text;
    out.erase(at, end - at + 1);
    return out;
}

} // namespace

TEST_CASE("the default config parses and pins the desk-scale shape") {
    const RunConfig c = parse_default();
    CHECK(c.gen.speakers == 3);
    CHECK(c.gen.emotions == 3);
    CHECK(c.gen.channels == 16);
    CHECK(c.gen.contents == 12);
    CHECK(c.train_contents == 8);
    CHECK(c.reference_contents == 2);
    CHECK(c.test_contents == 2);
    CHECK(c.codebook_size == 48);
    CHECK(c.mode == PrefixMode::deep_kv);
    CHECK(c.ar.d_model == 64);
    CHECK(c.ar.layers == 4);
    CHECK(c.flow.d_model == 48);
    CHECK(c.backbone_steps == 1500);
    CHECK(c.prefix_steps == 900);
    CHECK(c.stage2_steps == 3000);
    CHECK(c.temperature == doctest::Approx(0.8));
    CHECK(c.corpus_seed == 11);
    CHECK(c.eval_seed == 18);
}

TEST_CASE("derived model dims mirror the corpus and tokenizer settings") {
    const RunConfig c = parse_default();
    CHECK(c.gen.seed == c.corpus_seed);
    CHECK(c.ar.content_vocab == c.gen.content_vocab);
    CHECK(c.ar.audio_vocab == c.codebook_size);
    CHECK(c.flow.audio_vocab == c.codebook_size);
    CHECK(c.flow.mel_channels == c.gen.channels);
    CHECK(c.prefix.mel_channels == c.gen.channels);
    CHECK(c.prefix.d_model == c.ar.d_model);

    // the mirror follows overridden values too
    const RunConfig o = parse_default({"tokenizer.codebook_size=32", "seeds.corpus=999"});
    CHECK(o.ar.audio_vocab == 32);
    CHECK(o.flow.audio_vocab == 32);
    CHECK(o.gen.seed == 999);
}

TEST_CASE("overrides apply after the file and win") {
    const RunConfig c = parse_default(
        {"train.backbone_steps=7", "model.mode=input-prepend", "sampling.top_k=3"});
    CHECK(c.backbone_steps == 7);
    CHECK(c.mode == PrefixMode::input_prepend);
    CHECK(c.top_k == 3);

    CHECK(kind_of([] { parse_default({"no_dot_here"}); }) == ErrorKind::config);
    CHECK(kind_of([] { parse_default({"corpus.speakers"}); }) == ErrorKind::config);
    CHECK(kind_of([] { parse_default({"corpus.bogus=1"}); }) == ErrorKind::config);
}

TEST_CASE("malformed values and structure are config errors") {
    CHECK(kind_of([] { parse_default({"corpus.speakers=x3"}); }) == ErrorKind::config);
    CHECK(kind_of([] { parse_default({"corpus.speakers=3x"}); }) == ErrorKind::config);
    CHECK(kind_of([] { parse_default({"corpus.noise_sigma=0..1"}); }) == ErrorKind::config);
    CHECK(kind_of([] { parse_default({"seeds.corpus=banana"}); }) == ErrorKind::config);
    CHECK(kind_of([] { parse_default({"model.mode=sideways"}); }) == ErrorKind::config);

    CHECK(kind_of([] { parse_run_config_text("[corpus\nspeakers = 3\n"); }) ==
          ErrorKind::config);
    CHECK(kind_of([] { parse_run_config_text("speakers = 3\n"); }) == ErrorKind::config);
    CHECK(kind_of([] { parse_run_config_text("[corpus]\nspeakers 3\n"); }) == ErrorKind::config);
}

TEST_CASE("every seed field is mandatory") {
    const std::string text = default_config_text();
    for (const char * line : {"corpus = 11", "tokenizer = 12", "probes = 13", "backbone = 14",
                              "stage2 = 15", "prefix = 16", "convert = 17", "eval = 18"}) {
        const std::string cut = without_line(text, line);
        CHECK(kind_of([&] { parse_run_config_text(cut); }) == ErrorKind::config);
    }
}

TEST_CASE("validation rejects inconsistent settings") {
    // splits must cover the corpus exactly
    CHECK(kind_of([] { parse_default({"corpus.test_contents=3"}); }) == ErrorKind::config);
    CHECK(kind_of([] { parse_default({"corpus.contents=13"}); }) == ErrorKind::config);
    CHECK(kind_of([] { parse_default({"train.backbone_steps=0"}); }) == ErrorKind::config);
    CHECK(kind_of([] { parse_default({"train.stage2_ref_mask_prob=1.5"}); }) ==
          ErrorKind::config);
    CHECK(kind_of([] { parse_default({"sampling.temperature=0"}); }) == ErrorKind::config);
    CHECK(kind_of([] { parse_default({"tokenizer.codebook_size=1"}); }) == ErrorKind::config);
}

TEST_CASE("base dir comes from the key, then the environment, then a default") {
    unsetenv("PREFIXVC_HOME");
    CHECK(parse_default().base_dir == "runs");

    setenv("PREFIXVC_HOME", "env_home", 1);
    CHECK(parse_default().base_dir == "env_home");
    CHECK(parse_default({"paths.base_dir=explicit"}).base_dir == "explicit");
    unsetenv("PREFIXVC_HOME");
}

TEST_CASE("fingerprint is deterministic and tracks the settings") {
    const std::string a = parse_default().fingerprint();
    const std::string b = parse_default().fingerprint();
    CHECK(a == b);
    CHECK(a != parse_default({"seeds.backbone=77"}).fingerprint());
    CHECK(a != parse_default({"model.mode=none"}).fingerprint());
    CHECK(a.find("mode=deep-prefix") != std::string::npos);
}

TEST_CASE("config files load from disk; a missing file is a config error") {
    std::filesystem::create_directories("runconfig_test");
    const std::string path = "runconfig_test/run.cfg";
    {
        std::ofstream out(path, std::ios::trunc);
        out << default_config_text();
    }
    const RunConfig c = load_run_config(path, {"train.prefix_steps=5"});
    CHECK(c.prefix_steps == 5);
    CHECK(kind_of([] { load_run_config("runconfig_test/absent.cfg"); }) == ErrorKind::config);
}
