#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ucr/eval.hpp"
#include "ucr/model.hpp"
#include "ucr/synthdata.hpp"

// Run artifacts: checkpoint, per-epoch trace (JSONL), recall reports
// (JSON + CSV) and the run manifest. Every writer here is deterministic
// byte-for-byte given the same values, which is what makes reruns comparable
// with cmp(1). Checkpoints store hexfloats so reloads are bit-exact.

namespace ucr::artifacts {

using nlohmann::json;

// ---------------------------------------------------------------------------
// checkpoint

inline constexpr const char* kCheckpointMagic = "ucr-checkpoint v1";

inline void save_checkpoint(const model::ModelParams& params, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open for write: " + path);
    os << kCheckpointMagic << '\n';
    os << "activation " << model::activation_name(params.activation) << '\n';
    {
        char sbuf[40];
        std::snprintf(sbuf, sizeof sbuf, "%a", params.feature_scale);
        os << "feature_scale " << sbuf << '\n';
    }
    const auto& names = model::ModelParams::tensor_names();
    auto tensors = params.tensors();
    char buf[40];
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        const Matrix& m = *tensors[i];
        os << "tensor " << names[i] << ' ' << m.rows << ' ' << m.cols << '\n';
        for (std::size_t r = 0; r < m.rows; ++r) {
            for (std::size_t c = 0; c < m.cols; ++c) {
                std::snprintf(buf, sizeof buf, "%a", m(r, c));
                os << buf << (c + 1 == m.cols ? "" : " ");
            }
            os << '\n';
        }
    }
    if (!os) throw std::runtime_error("write failed: " + path);
}

inline model::ModelParams load_checkpoint(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
    std::string line;
    if (!std::getline(is, line) || line != kCheckpointMagic)
        throw std::runtime_error("not a ucr checkpoint: " + path);
    std::string word, act;
    is >> word >> act;
    if (word != "activation") throw std::runtime_error("malformed checkpoint header");
    model::ModelParams params;
    params.activation = model::activation_from_name(act);
    is >> word;
    if (word != "feature_scale") throw std::runtime_error("malformed checkpoint header");
    is >> word;
    params.feature_scale = std::strtod(word.c_str(), nullptr);
    const auto& names = model::ModelParams::tensor_names();
    auto tensors = params.tensors();
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        std::string tag, name;
        std::size_t r = 0, c = 0;
        is >> tag >> name >> r >> c;
        if (tag != "tensor" || name != names[i])
            throw std::runtime_error("malformed checkpoint: expected tensor " + names[i]);
        Matrix m(r, c);
        for (double& v : m.data) {
            is >> word;
            v = std::strtod(word.c_str(), nullptr);
        }
        if (!is) throw std::runtime_error("checkpoint truncated: " + path);
        *tensors[i] = std::move(m);
    }
    return params;
}

// ---------------------------------------------------------------------------
// trace

inline json loss_to_json(const LossBreakdown& l) {
    return {{"info", l.info},     {"u", l.u},
            {"total", l.total},   {"unified", l.unified},
            {"gamma", l.gamma},   {"sigma_scalar", l.sigma_scalar}};
}

inline json trace_line(const model::EpochTrace& t) {
    json recalls = json::object();
    for (auto [k, r] : t.recall_at) recalls[std::to_string(k)] = r;
    return {{"epoch", t.epoch},
            {"gamma", t.gamma},
            {"lr", t.lr},
            {"loss", loss_to_json(t.loss)},
            {"recall", recalls}};
}

inline void save_trace(const std::vector<model::EpochTrace>& trace,
                       const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open for write: " + path);
    for (const auto& t : trace) os << trace_line(t).dump() << '\n';
    if (!os) throw std::runtime_error("write failed: " + path);
}

// ---------------------------------------------------------------------------
// recall reports

inline json report_to_json(const eval::RecallReport& r) {
    json per_k = json::object();
    for (auto [k, v] : r.per_k) per_k[std::to_string(k)] = v;
    json out = {{"stratum", eval::stratum_name(r.stratum)},
                {"n_queries", r.n_queries},
                {"recall", per_k}};
    if (r.per_k_any) {
        json any = json::object();
        for (auto [k, v] : *r.per_k_any) any[std::to_string(k)] = v;
        out["recall_any_valid"] = any;  // supplementary one-to-many diagnostic
    }
    return out;
}

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

// rows: stratum,K,recall,n — the any-valid diagnostic rides along as a
// separate stratum label
inline void append_report_csv_rows(std::ostream& os, const eval::RecallReport& r) {
    for (auto [k, v] : r.per_k)
        os << eval::stratum_name(r.stratum) << ',' << k << ',' << format_double(v)
           << ',' << r.n_queries << '\n';
    if (r.per_k_any)
        for (auto [k, v] : *r.per_k_any)
            os << eval::stratum_name(r.stratum) << "_any_valid," << k << ','
               << format_double(v) << ',' << r.n_queries << '\n';
}

inline void save_reports_csv(const std::vector<eval::RecallReport>& reports,
                             const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open for write: " + path);
    os << "stratum,K,recall,n\n";
    for (const auto& r : reports) append_report_csv_rows(os, r);
    if (!os) throw std::runtime_error("write failed: " + path);
}

inline void save_reports_json(const std::vector<eval::RecallReport>& reports,
                              const std::string& path) {
    json arr = json::array();
    for (const auto& r : reports) arr.push_back(report_to_json(r));
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open for write: " + path);
    os << arr.dump(2) << '\n';
    if (!os) throw std::runtime_error("write failed: " + path);
}

// ---------------------------------------------------------------------------
// train config <-> json

inline json train_config_to_json(const model::TrainConfig& c) {
    json schedule;
    if (c.schedule.mode == GammaSchedule::Mode::FixedConstant)
        schedule = {{"mode", "fixed"}, {"value", c.schedule.fixed_value}};
    else if (c.schedule.is_baseline())
        schedule = {{"mode", "exponential"}, {"gamma0", "inf"}};
    else
        schedule = {{"mode", "exponential"}, {"gamma0", c.schedule.gamma0}};
    json out = {{"epochs", c.epochs},
                {"batch_size", c.batch_size},
                {"lr", c.lr},
                {"lr_decay_epoch", c.lr_decay_epoch},
                {"lr_decay_factor", c.lr_decay_factor},
                {"momentum", c.momentum},
                {"temperature", c.temperature},
                {"embed_dim", c.embed_dim},
                {"activation", model::activation_name(c.activation)},
                {"feature_scale", c.feature_scale},
                {"noise",
                 {{"w1", c.noise.w1},
                  {"w2", c.noise.w2},
                  {"target", c.noise.target == AugmentTarget::TargetFeature
                                 ? "target_feature"
                                 : "source_image_feature"},
                  {"seed", c.noise.seed}}},
                {"schedule", schedule},
                {"stop_grad_sigma", c.stop_grad_sigma},
                {"seed", c.seed},
                {"eval_ks", c.eval_ks}};
    if (c.dropout_rate)
        out["dropout_rate"] = *c.dropout_rate;
    return out;
}

inline double parse_gamma0(const json& v) {
    if (v.is_string()) {
        const std::string s = v.get<std::string>();
        if (s == "inf" || s == "+inf" || s == "infinity")
            return std::numeric_limits<double>::infinity();
        throw std::invalid_argument("invalid config field 'schedule.gamma0': " + s);
    }
    return v.get<double>();
}

inline model::TrainConfig train_config_from_json(const json& j) {
    model::TrainConfig c;
    for (const auto& [key, value] : j.items()) {
        if (key == "epochs") c.epochs = value;
        else if (key == "batch_size") c.batch_size = value;
        else if (key == "lr") c.lr = value;
        else if (key == "lr_decay_epoch") c.lr_decay_epoch = value;
        else if (key == "lr_decay_factor") c.lr_decay_factor = value;
        else if (key == "momentum") c.momentum = value;
        else if (key == "temperature") c.temperature = value;
        else if (key == "embed_dim") c.embed_dim = value;
        else if (key == "activation")
            c.activation = model::activation_from_name(value.get<std::string>());
        else if (key == "feature_scale") c.feature_scale = value;
        else if (key == "noise") {
            for (const auto& [nk, nv] : value.items()) {
                if (nk == "w1") c.noise.w1 = nv;
                else if (nk == "w2") c.noise.w2 = nv;
                else if (nk == "seed") c.noise.seed = nv;
                else if (nk == "target") {
                    const std::string t = nv.get<std::string>();
                    if (t == "target_feature")
                        c.noise.target = AugmentTarget::TargetFeature;
                    else if (t == "source_image_feature")
                        c.noise.target = AugmentTarget::SourceImageFeature;
                    else
                        throw std::invalid_argument(
                            "invalid config field 'noise.target': " + t);
                } else
                    throw std::invalid_argument("invalid config field 'noise." + nk +
                                                "': unknown key");
            }
        } else if (key == "schedule") {
            const std::string mode = value.value("mode", "exponential");
            if (mode == "fixed")
                c.schedule = GammaSchedule::fixed(value.at("value").get<double>());
            else if (mode == "exponential") {
                const double g0 = parse_gamma0(value.at("gamma0"));
                c.schedule = std::isinf(g0) ? GammaSchedule::baseline()
                                            : GammaSchedule::exponential(g0);
            } else
                throw std::invalid_argument("invalid config field 'schedule.mode': " +
                                            mode);
        } else if (key == "stop_grad_sigma")
            c.stop_grad_sigma = value;
        else if (key == "dropout_rate") {
            if (value.is_null())
                c.dropout_rate.reset();
            else
                c.dropout_rate = value.get<double>();
        } else if (key == "seed")
            c.seed = value;
        else if (key == "eval_ks")
            c.eval_ks = value.get<std::vector<int>>();
        else
            throw std::invalid_argument("invalid config field '" + key +
                                        "': unknown key");
    }
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// run manifest

inline constexpr const char* kVersion = "ucr 0.1.0";

struct RunManifest {
    std::string command;  // "train", "sweep", ...
    json config;          // full resolved TrainConfig
    json synth_spec;      // spec of the dataset used
    std::string dataset_path;
    std::string mode;  // "baseline" | "anneal" | "fixed"
    json outputs;      // artifact name -> path
    double wall_clock_sec = 0.0;
    std::string version = kVersion;
};

inline std::string schedule_mode_name(const GammaSchedule& s) {
    if (s.mode == GammaSchedule::Mode::FixedConstant) return "fixed";
    return s.is_baseline() ? "baseline" : "anneal";
}

inline json manifest_to_json(const RunManifest& m) {
    return {{"version", m.version},
            {"command", m.command},
            {"mode", m.mode},
            {"config", m.config},
            {"synth_spec", m.synth_spec},
            {"dataset", m.dataset_path},
            {"outputs", m.outputs},
            {"wall_clock_sec", m.wall_clock_sec}};
}

// write to a temp file in the same directory, then rename into place
inline void save_manifest(const RunManifest& m, const std::string& path) {
    namespace fs = std::filesystem;
    const fs::path target(path);
    const fs::path tmp = target.parent_path() / (target.filename().string() + ".tmp");
    {
        std::ofstream os(tmp, std::ios::trunc);
        if (!os) throw std::runtime_error("cannot open for write: " + tmp.string());
        os << manifest_to_json(m).dump(2) << '\n';
        if (!os) throw std::runtime_error("write failed: " + tmp.string());
    }
    fs::rename(tmp, target);
}

inline RunManifest load_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open manifest: " + path);
    json j = json::parse(is);
    RunManifest m;
    m.version = j.value("version", "");
    m.command = j.value("command", "");
    m.mode = j.value("mode", "");
    m.config = j.at("config");
    m.synth_spec = j.value("synth_spec", json::object());
    m.dataset_path = j.value("dataset", "");
    m.outputs = j.value("outputs", json::object());
    m.wall_clock_sec = j.value("wall_clock_sec", 0.0);
    return m;
}

}  // namespace ucr::artifacts
