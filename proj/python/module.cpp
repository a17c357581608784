// Python bindings: the pipeline stages plus the handful of primitives a
// notebook needs to poke at results (phantom generation, sampling, rewards,
// and the evaluation metrics). Heavy calls release the GIL.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <algorithm>
#include <string>
#include <vector>

#include "cxrl/cli.hpp"
#include "cxrl/config.hpp"
#include "cxrl/evalkit.hpp"
#include "cxrl/ioutil.hpp"
#include "cxrl/pipeline.hpp"
#include "cxrl/textcond.hpp"

namespace py = pybind11;
using namespace cxrl;

namespace {

num::Tensor to_tensor(const py::array_t<float, py::array::c_style | py::array::forcecast>& arr) {
    const py::buffer_info info = arr.request();
    if (info.ndim != 2) throw std::invalid_argument("expected a 2-D float array");
    num::Tensor t({static_cast<int64_t>(info.shape[0]), static_cast<int64_t>(info.shape[1])});
    const float* src = static_cast<const float*>(info.ptr);
    std::copy(src, src + t.numel(), t.data.begin());
    return t;
}

py::array_t<float> to_numpy(const num::Tensor& t) {
    if (t.shape.size() != 2) throw std::invalid_argument("expected a 2-D tensor");
    py::array_t<float> out({t.shape[0], t.shape[1]});
    std::copy(t.data.begin(), t.data.end(), out.mutable_data());
    return out;
}

cfg::Config parse(const std::string& text) { return cfg::parse_config(text); }

std::vector<int> capped_tokens(const std::string& report, int m_max) {
    auto tokens = text::tokenize(report);
    if (static_cast<int>(tokens.size()) > m_max) tokens.resize(static_cast<size_t>(m_max));
    return tokens;
}

// Mirrors the CLI: every stage runs under the output-directory lock.
template <typename Fn>
void locked_stage(const cfg::Config& c, Fn&& fn) {
    pipe::RunLock lock(c);
    fn();
}

}  // namespace

PYBIND11_MODULE(cxrl_py, m) {
    m.doc() = "conditional-diffusion RLCF testbed on procedural chest phantoms";

    py::register_exception<cfg::ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<ckpt::CheckpointError>(m, "CheckpointError", PyExc_RuntimeError);
    py::register_exception<pipe::DivergenceError>(m, "DivergenceError", PyExc_RuntimeError);

    m.attr("VOCAB_SIZE") = text::kVocabSize;
    m.attr("MAX_TOKENS") = text::kMaxTokens;
    m.attr("NUM_LABELS") = phantom::kNumLabels;

    // ---- config ----
    m.def("default_config_text", [] { return cfg::to_text(cfg::Config{}); },
          "canonical key=value text of the default configuration");
    m.def("config_hash_hex",
          [](const std::string& text) { return io::hash_hex(cfg::config_hash(parse(text))); },
          py::arg("config_text"));

    // ---- pipeline stages (same artifacts as the CLI subcommands) ----
    m.def("phantom_gen",
          [](const std::string& text) {
              const auto c = parse(text);
              locked_stage(c, [&] { pipe::run_phantom_gen(c); });
          },
          py::arg("config_text"), py::call_guard<py::gil_scoped_release>());
    m.def("pretrain",
          [](const std::string& text) {
              const auto c = parse(text);
              locked_stage(c, [&] { pipe::run_pretrain(c); });
          },
          py::arg("config_text"), py::call_guard<py::gil_scoped_release>());
    m.def("fit_rewards",
          [](const std::string& text) {
              const auto c = parse(text);
              locked_stage(c, [&] { pipe::run_fit_rewards(c); });
          },
          py::arg("config_text"), py::call_guard<py::gil_scoped_release>());
    m.def("finetune",
          [](const std::string& text, bool force) {
              const auto c = parse(text);
              locked_stage(c, [&] { pipe::run_finetune(c, force); });
          },
          py::arg("config_text"), py::arg("force") = false,
          py::call_guard<py::gil_scoped_release>());
    m.def("sample",
          [](const std::string& text, const std::string& ckpt, const std::string& reports,
             int count, bool plain) {
              const auto c = parse(text);
              pipe::SampleOptions so;
              so.ckpt = ckpt;
              so.reports_path = reports;
              so.count = count;
              so.plain = plain;
              locked_stage(c, [&] { pipe::run_sample(c, so); });
          },
          py::arg("config_text"), py::arg("ckpt") = "", py::arg("reports") = "",
          py::arg("count") = 16, py::arg("plain") = false,
          py::call_guard<py::gil_scoped_release>());
    m.def("score",
          [](const std::string& text, bool force) {
              const auto c = parse(text);
              locked_stage(c, [&] { pipe::run_score(c, force); });
          },
          py::arg("config_text"), py::arg("force") = false,
          py::call_guard<py::gil_scoped_release>());
    m.def("evaluate",
          [](const std::string& text, bool force) {
              const auto c = parse(text);
              locked_stage(c, [&] { pipe::run_eval(c, force); });
          },
          py::arg("config_text"), py::arg("force") = false,
          py::call_guard<py::gil_scoped_release>());
    m.def("ablate",
          [](const std::string& text, bool force) {
              const auto c = parse(text);
              locked_stage(c, [&] { pipe::run_ablate(c, force); });
          },
          py::arg("config_text"), py::arg("force") = false,
          py::call_guard<py::gil_scoped_release>());

    // ---- primitives ----
    m.def("tokenize", &text::tokenize, py::arg("report"));
    m.def("make_phantom",
          [](uint64_t seed, int image_size) {
              const auto s = phantom::generate_sample(num::rng_stream(seed, "phantom"), image_size);
              py::dict psi;
              psi["s_x"] = s.psi_true.s_x;
              psi["s_y"] = s.psi_true.s_y;
              psi["t_x"] = s.psi_true.t_x;
              psi["t_y"] = s.psi_true.t_y;
              psi["theta"] = s.psi_true.theta;
              py::dict out;
              out["image"] = to_numpy(s.image);
              out["report"] = s.report;
              out["labels"] = std::vector<int>(s.labels.begin(), s.labels.end());
              out["posture"] = psi;
              return out;
          },
          py::arg("seed"), py::arg("image_size") = phantom::kDefaultImageSize);
    m.def("generate_image",
          [](const std::string& text_cfg, const std::string& ckpt_path, const std::string& report,
             const std::string& sample_label, bool with_ace) {
              const auto c = parse(text_cfg);
              const auto pol = pipe::load_policy(ckpt_path);
              const auto tokens = capped_tokens(report, c.m_max);
              const auto traj = diff::sample_trajectory<float>(
                  pol.params, pipe::denoiser_config(c), pipe::schedule(c), tokens, with_ace,
                  num::rng_stream(c.seed, "pysample/" + sample_label),
                  pol.params.content_hash());
              num::Tensor img({c.image_size, c.image_size});
              img.data = traj.final_image().data;
              return to_numpy(img);
          },
          py::arg("config_text"), py::arg("ckpt"), py::arg("report"),
          py::arg("sample_label") = "0", py::arg("with_ace") = true);
    m.def("reward_breakdown",
          [](const std::string& text_cfg, const std::string& rewards_path,
             const py::array_t<float, py::array::c_style | py::array::forcecast>& x,
             const py::array_t<float, py::array::c_style | py::array::forcecast>& x_anchor,
             const std::string& report, const std::vector<int>& labels) {
              const auto c = parse(text_cfg);
              if (labels.size() != static_cast<size_t>(phantom::kNumLabels))
                  throw std::invalid_argument("labels must have exactly 4 entries");
              std::array<int, phantom::kNumLabels> lab{};
              std::copy(labels.begin(), labels.end(), lab.begin());
              const auto rc = pipe::load_rewards(rewards_path);
              const reward::LambdaTriple lam{c.lambda_align, c.lambda_diag, c.lambda_consist};
              const auto rb = reward::total_reward(to_tensor(x), to_tensor(x_anchor),
                                                   capped_tokens(report, c.m_max), lab, rc.models,
                                                   lam, c.diag_soft);
              py::dict out;
              out["r_align"] = rb.r_align;
              out["r_diag"] = rb.r_diag;
              out["r_consist"] = rb.r_consist;
              out["total"] = rb.total;
              return out;
          },
          py::arg("config_text"), py::arg("rewards_ckpt"), py::arg("x"), py::arg("x_anchor"),
          py::arg("report"), py::arg("labels"));

    // ---- metrics ----
    m.def("ssim",
          [](const py::array_t<float, py::array::c_style | py::array::forcecast>& a,
             const py::array_t<float, py::array::c_style | py::array::forcecast>& b) {
              return eval::ssim(to_tensor(a), to_tensor(b));
          },
          py::arg("a"), py::arg("b"));
    m.def("auroc", &eval::auroc, py::arg("scores"), py::arg("labels"));
}
