#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "prefixvc/common.hpp"
#include "prefixvc/pipeline.hpp"

namespace py = pybind11;
using namespace prefixvc;

namespace {

py::dict report_dict(const MetricReport & r) {
    py::dict d;
    d["count"] = r.count;
    d["spk_cent_sim"] = r.spk_cent_sim;
    d["eer"] = r.eer;
    d["eca"] = r.eca;
    d["emo_sim"] = r.emo_sim;
    d["content_accuracy_proxy"] = r.content_accuracy_proxy;
    d["fingerprint"] = r.fingerprint;
    return d;
}

} // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Emotion-controllable two-stage sequence conversion core";
    m.attr("__version__") = "0.1.0";

    // map the library's typed failures onto builtin python exceptions
    py::register_exception_translator([](std::exception_ptr p) {
        try {
            if (p)
                std::rethrow_exception(p);
        } catch (const Error & e) {
            switch (e.kind()) {
            case ErrorKind::config:
            case ErrorKind::input:
            case ErrorKind::shape: throw py::value_error(e.what());
            case ErrorKind::data: throw py::key_error(e.what()); // missing artifacts
            default: throw std::runtime_error(e.what());
            }
        }
    });

    py::class_<RunConfig>(m, "Config")
        .def_readonly("base_dir", &RunConfig::base_dir)
        .def_readonly("train_contents", &RunConfig::train_contents)
        .def_readonly("reference_contents", &RunConfig::reference_contents)
        .def_readonly("test_contents", &RunConfig::test_contents)
        .def_readonly("codebook_size", &RunConfig::codebook_size)
        .def_readonly("backbone_steps", &RunConfig::backbone_steps)
        .def_readonly("prefix_steps", &RunConfig::prefix_steps)
        .def_readonly("stage2_steps", &RunConfig::stage2_steps)
        .def_property_readonly("speakers", [](const RunConfig & c) { return c.gen.speakers; })
        .def_property_readonly("emotions", [](const RunConfig & c) { return c.gen.emotions; })
        .def_property_readonly("contents", [](const RunConfig & c) { return c.gen.contents; })
        .def_property_readonly("mode", [](const RunConfig & c) { return prefix_mode_name(c.mode); })
        .def("fingerprint", &RunConfig::fingerprint)
        .def("__repr__",
             [](const RunConfig & c) { return "<prefixvc.Config " + c.fingerprint() + ">"; });

    m.def("default_config_text", &default_config_text,
          "complete config text with desk-scale defaults");
    m.def("parse_config", &parse_run_config_text, py::arg("text"),
          py::arg("overrides") = std::vector<std::string>{},
          "parse sectioned key=value config text");
    m.def("load_config", &load_run_config, py::arg("path"),
          py::arg("overrides") = std::vector<std::string>{}, "read and parse a config file");

    m.def("gen_data", &cmd_gen_data, py::arg("config"), py::arg("force") = false,
          "write the synthetic corpus; returns the manifest path");
    m.def(
        "train",
        [](const RunConfig & c, const std::string & stage, bool resume) {
            return cmd_train(c, parse_stage(stage), resume);
        },
        py::arg("config"), py::arg("stage"), py::arg("resume") = false,
        "train one stage (tokenizer | probes | backbone | stage2 | prefix); returns the "
        "checkpoint path");
    m.def(
        "convert",
        [](const RunConfig & c, int content, int speaker, int source_emotion, int target_emotion,
           const std::string & run_name, const std::string & mode, const std::string & setting) {
            return cmd_convert(c, content, speaker, source_emotion, target_emotion, run_name,
                               parse_prefix_mode(mode), parse_setting(setting));
        },
        py::arg("config"), py::arg("content"), py::arg("speaker"), py::arg("source_emotion"),
        py::arg("target_emotion"), py::arg("run_name") = "manual", py::arg("mode") = "deep-prefix",
        py::arg("setting") = "joint", "convert one utterance; returns the mel path");
    m.def(
        "evaluate",
        [](const RunConfig & c, const std::string & run) { return report_dict(cmd_eval(c, run)); },
        py::arg("config"), py::arg("run"),
        "score a converted directory; returns the metric report as a dict");
    m.def("ablate", &cmd_ablate, py::arg("config"),
          "run the {prefix, backbone} x control-setting grid; returns the csv path");

    m.def("eer", &eer, py::arg("genuine"), py::arg("impostor"),
          "equal-error rate of two score lists");
    m.def(
        "load_mel",
        [](const std::string & path) {
            const MelLike mel = read_mel(path);
            return py::make_tuple(mel.t, mel.d, mel.frames);
        },
        py::arg("path"), "read a mel file; returns (frames, channels, row-major values)");
}
