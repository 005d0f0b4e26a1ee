#include "prefixvc/pipeline.hpp"

#include "prefixvc/common.hpp"

#include "CLI11.hpp"

#include <cstdio>

using namespace prefixvc;

namespace {

RefEmotion parse_ref_emotion(const std::string & s) {
    if (s == "source")
        return RefEmotion::source;
    if (s == "target")
        return RefEmotion::target;
    throw Error(ErrorKind::config, "stage reference must be 'source' or 'target': " + s);
}

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> overrides;

    RunConfig load() const {
        if (config_path.empty())
            return parse_run_config_text(default_config_text(), overrides);
        return load_run_config(config_path, overrides);
    }
};

void add_common(CLI::App * sub, CommonArgs & args) {
    sub->add_option("--config", args.config_path,
                    "run config file (omit to use the built-in defaults)");
    sub->add_option("--set", args.overrides, "override a config value, section.key=value")
        ->type_name("KEY=VALUE");
}

} // namespace

int main(int argc, char ** argv) {
    CLI::App app{"two-stage emotion-controllable sequence conversion"};
    app.require_subcommand(1);

    CommonArgs common;

    auto * gen = app.add_subcommand("gen-data", "generate the synthetic parallel corpus");
    bool force = false;
    gen->add_flag("--force", force, "regenerate even if a corpus is already present");

    auto * train = app.add_subcommand("train", "train one stage");
    std::string stage_arg;
    bool resume = false;
    train->add_option("--stage", stage_arg, "tokenizer | probes | backbone | stage2 | prefix")
        ->required();
    train->add_flag("--resume", resume, "continue a finished or interrupted run of this stage");

    auto * convert = app.add_subcommand("convert", "convert one utterance");
    int content = 0, speaker = 0, source_emotion = 0, target_emotion = 0;
    std::string run_name = "manual", mode_arg, setting_arg, s1_arg, s2_arg;
    convert->add_option("--content", content, "content id of the source utterance")->required();
    convert->add_option("--speaker", speaker, "speaker id")->required();
    convert->add_option("--source-emotion", source_emotion, "emotion of the source utterance")
        ->required();
    convert->add_option("--target-emotion", target_emotion, "emotion to convert into")
        ->required();
    convert->add_option("--run", run_name, "output directory name under converted/");
    convert->add_option("--mode", mode_arg, "deep-prefix | input-prepend | none");
    convert->add_option("--setting", setting_arg,
                        "joint | control-sequence | control-acoustic | no-conversion");
    convert->add_option("--stage1-ref", s1_arg, "emotion of the stage-1 reference");
    convert->add_option("--stage2-ref", s2_arg, "emotion of the stage-2 reference");

    auto * eval = app.add_subcommand("eval", "score a converted directory");
    std::string eval_run;
    eval->add_option("--run", eval_run, "converted directory name (or path)")->required();

    auto * ablate =
        app.add_subcommand("ablate", "metric grid: {prefix, backbone} x control settings");

    for (CLI::App * sub : {gen, train, convert, eval, ablate})
        add_common(sub, common);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError & e) {
        return app.exit(e);
    }

    try {
        if (gen->parsed()) {
            std::printf("%s\n", cmd_gen_data(common.load(), force).c_str());
        } else if (train->parsed()) {
            std::printf("%s\n",
                        cmd_train(common.load(), parse_stage(stage_arg), resume).c_str());
        } else if (convert->parsed()) {
            if (!setting_arg.empty() && (!s1_arg.empty() || !s2_arg.empty()))
                throw Error(ErrorKind::config,
                            "--setting conflicts with --stage1-ref/--stage2-ref; "
                            "pick one way to name the references");
            ControlSetting setting =
                setting_arg.empty() ? ControlSetting{} : parse_setting(setting_arg);
            if (!s1_arg.empty())
                setting.stage1 = parse_ref_emotion(s1_arg);
            if (!s2_arg.empty())
                setting.stage2 = parse_ref_emotion(s2_arg);
            const RunConfig cfg = common.load();
            const PrefixMode mode = mode_arg.empty() ? cfg.mode : parse_prefix_mode(mode_arg);
            std::printf("%s\n", cmd_convert(cfg, content, speaker, source_emotion,
                                            target_emotion, run_name, mode, setting)
                                    .c_str());
        } else if (eval->parsed()) {
            const MetricReport r = cmd_eval(common.load(), eval_run);
            std::printf("%s", metric_text(r).c_str());
        } else if (ablate->parsed()) {
            std::printf("%s\n", cmd_ablate(common.load()).c_str());
        }
    } catch (const Error & e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return exit_code(e.kind());
    } catch (const std::exception & e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
