#pragma once

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "mosaic/diffusion/diffusion.hpp"
#include "mosaic/error.hpp"
#include "mosaic/model/model.hpp"
#include "mosaic/train/train.hpp"

namespace mosaic::cli {

using json = nlohmann::ordered_json;

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct DatasetSection {
    std::size_t n = 2048;
    std::uint64_t seed = 0;
};

struct EvalSection {
    std::size_t samples_per_run = 10000;
    std::size_t runs = 10;
    std::uint64_t seed = 0;
    /// Sample from the EMA weights when the checkpoint carries them.
    bool use_ema = true;
    /// Images denoised together; does not change results.
    std::size_t batch = 500;
    std::size_t grid_images = 64;
};

struct ExperimentConfig {
    DatasetSection dataset;
    diffusion::DiffusionConfig diffusion;
    model::ModelConfig model;
    train::TrainConfig train;
    EvalSection eval;
    std::filesystem::path out_dir = "runs/default";

    diffusion::SamplerOptions sampler() const { return {diffusion.sigma, eval.batch, 0}; }
};

namespace detail {

/// Reads the keys of one JSON object, remembering which were consumed so the
/// leftovers can be reported.
class Section {
public:
    Section(const json& doc, std::string name) : name_(std::move(name)) {
        if (!doc.contains(name_)) return;
        obj_ = &doc.at(name_);
        if (!obj_->is_object()) throw ConfigError("config: '" + name_ + "' must be an object");
    }
    Section(const json* obj, std::string name) : obj_(obj), name_(std::move(name)) {
        if (obj_ && !obj_->is_object()) throw ConfigError("config: '" + name_ + "' must be an object");
    }

    template <typename T>
    void get(const std::string& key, T& out) {
        seen_.insert(key);
        if (!obj_ || !obj_->contains(key)) return;
        if constexpr (std::is_unsigned_v<T> && !std::is_same_v<T, bool>) {
            const json& v = obj_->at(key);
            if (!v.is_number_unsigned())
                throw ConfigError("config: " + name_ + "." + key + " must be a non-negative integer");
        }
        try {
            out = obj_->at(key).template get<T>();
        } catch (const json::exception& e) {
            throw ConfigError("config: " + name_ + "." + key + ": " + e.what());
        }
    }

    template <typename T>
    void get(const std::string& key, std::optional<T>& out) {
        seen_.insert(key);
        if (!obj_ || !obj_->contains(key)) return;
        if (obj_->at(key).is_null()) {
            out.reset();
            return;
        }
        T v{};
        get(key, v);
        out = v;
    }

    const json* child(const std::string& key) {
        seen_.insert(key);
        return obj_ && obj_->contains(key) ? &obj_->at(key) : nullptr;
    }

    void finish() const {
        if (!obj_) return;
        for (const auto& [k, v] : obj_->items())
            if (!seen_.count(k)) throw ConfigError("config: unknown key '" + name_ + "." + k + "'");
    }

private:
    const json* obj_ = nullptr;
    std::string name_;
    std::set<std::string> seen_;
};

inline diffusion::SigmaRule parse_sigma(const std::string& s) {
    if (s == "beta") return diffusion::SigmaRule::beta;
    if (s == "posterior") return diffusion::SigmaRule::posterior;
    throw ConfigError("config: diffusion.sigma must be 'beta' or 'posterior', got '" + s + "'");
}

inline std::string sigma_name(diffusion::SigmaRule r) { return r == diffusion::SigmaRule::beta ? "beta" : "posterior"; }

template <typename T>
json opt_json(const std::optional<T>& v) {
    return v ? json(*v) : json(nullptr);
}

}  // namespace detail

/// Missing keys keep their defaults; any key not listed here is an error.
inline ExperimentConfig parse_config(const json& doc) {
    if (!doc.is_object()) throw ConfigError("config: top level must be an object");
    ExperimentConfig cfg;
    const std::set<std::string> sections{"dataset", "diffusion", "model", "train", "eval", "paths"};
    for (const auto& [k, v] : doc.items())
        if (!sections.count(k)) throw ConfigError("config: unknown section '" + k + "'");

    detail::Section ds(doc, "dataset");
    ds.get("n", cfg.dataset.n);
    ds.get("seed", cfg.dataset.seed);
    ds.finish();

    detail::Section df(doc, "diffusion");
    df.get("T", cfg.diffusion.timesteps);
    df.get("beta_start", cfg.diffusion.beta_start);
    df.get("beta_end", cfg.diffusion.beta_end);
    std::string sigma = detail::sigma_name(cfg.diffusion.sigma);
    df.get("sigma", sigma);
    cfg.diffusion.sigma = detail::parse_sigma(sigma);
    df.finish();

    detail::Section md(doc, "model");
    std::string kind(model::kind_name(cfg.model.kind));
    md.get("kind", kind);
    try {
        cfg.model.kind = model::parse_kind(kind);
    } catch (const ContractViolation& e) {
        throw ConfigError(std::string("config: model.kind: ") + e.what());
    }
    md.get("time_bias", cfg.model.time_bias);
    detail::Section at(md.child("attention"), "model.attention");
    auto& a = cfg.model.attention;
    at.get("scale", a.scale);
    at.get("residual", a.residual);
    at.get("gumbel_temperature", a.gumbel_temperature);
    at.get("gumbel_hard", a.gumbel_hard);
    at.get("gumbel_noise_at_sampling", a.gumbel_noise_at_sampling);
    at.finish();
    md.finish();
    cfg.model.timesteps = cfg.diffusion.timesteps;

    detail::Section tr(doc, "train");
    auto& t = cfg.train;
    tr.get("epochs", t.epochs);
    tr.get("batch_size", t.batch_size);
    tr.get("max_lr", t.max_lr);
    tr.get("weight_decay", t.weight_decay);
    tr.get("ema_decay", t.ema_decay);
    tr.get("warmup_fraction", t.warmup_fraction);
    tr.get("div_factor", t.div_factor);
    tr.get("final_div_factor", t.final_div_factor);
    tr.get("adam_beta1", t.adam_beta1);
    tr.get("adam_beta2", t.adam_beta2);
    tr.get("adam_eps", t.adam_eps);
    tr.get("checkpoint_every_epochs", t.checkpoint_every_epochs);
    tr.get("seed", t.seed);
    tr.finish();

    detail::Section ev(doc, "eval");
    ev.get("samples_per_run", cfg.eval.samples_per_run);
    ev.get("runs", cfg.eval.runs);
    ev.get("seed", cfg.eval.seed);
    ev.get("use_ema", cfg.eval.use_ema);
    ev.get("batch", cfg.eval.batch);
    ev.get("grid_images", cfg.eval.grid_images);
    ev.finish();

    detail::Section pa(doc, "paths");
    std::string out = cfg.out_dir.string();
    pa.get("out_dir", out);
    cfg.out_dir = out;
    pa.finish();

    if (cfg.dataset.n < 1) throw ConfigError("config: dataset.n must be >= 1");
    if (cfg.diffusion.timesteps < 1) throw ConfigError("config: diffusion.T must be >= 1");
    if (!(cfg.diffusion.beta_start > 0 && cfg.diffusion.beta_end < 1 && cfg.diffusion.beta_start <= cfg.diffusion.beta_end))
        throw ConfigError("config: need 0 < beta_start <= beta_end < 1");
    if (t.batch_size < 1) throw ConfigError("config: train.batch_size must be >= 1");
    if (cfg.eval.samples_per_run < 1 || cfg.eval.runs < 1) throw ConfigError("config: eval counts must be >= 1");
    return cfg;
}

inline json to_json(const ExperimentConfig& cfg) {
    const auto& a = cfg.model.attention;
    const auto& t = cfg.train;
    json j;
    j["dataset"] = {{"n", cfg.dataset.n}, {"seed", cfg.dataset.seed}};
    j["diffusion"] = {{"T", cfg.diffusion.timesteps},
                      {"beta_start", cfg.diffusion.beta_start},
                      {"beta_end", cfg.diffusion.beta_end},
                      {"sigma", detail::sigma_name(cfg.diffusion.sigma)}};
    j["model"] = {{"kind", std::string(model::kind_name(cfg.model.kind))},
                  {"time_bias", cfg.model.time_bias},
                  {"attention",
                   {{"scale", detail::opt_json(a.scale)},
                    {"residual", a.residual},
                    {"gumbel_temperature", a.gumbel_temperature},
                    {"gumbel_hard", a.gumbel_hard},
                    {"gumbel_noise_at_sampling", a.gumbel_noise_at_sampling}}}};
    j["train"] = {{"epochs", detail::opt_json(t.epochs)},
                  {"batch_size", t.batch_size},
                  {"max_lr", t.max_lr},
                  {"weight_decay", t.weight_decay},
                  {"ema_decay", t.ema_decay},
                  {"warmup_fraction", t.warmup_fraction},
                  {"div_factor", t.div_factor},
                  {"final_div_factor", t.final_div_factor},
                  {"adam_beta1", t.adam_beta1},
                  {"adam_beta2", t.adam_beta2},
                  {"adam_eps", t.adam_eps},
                  {"checkpoint_every_epochs", t.checkpoint_every_epochs},
                  {"seed", t.seed}};
    j["eval"] = {{"samples_per_run", cfg.eval.samples_per_run}, {"runs", cfg.eval.runs},
                 {"seed", cfg.eval.seed},       {"use_ema", cfg.eval.use_ema},
                 {"batch", cfg.eval.batch},     {"grid_images", cfg.eval.grid_images}};
    j["paths"] = {{"out_dir", cfg.out_dir.string()}};
    return j;
}

/// Dotted keys with their values, e.g. "train.batch_size = 64".
inline std::vector<std::string> describe_keys(const ExperimentConfig& cfg = {}) {
    std::vector<std::string> out;
    const auto walk = [&](auto&& self, const json& node, const std::string& prefix) -> void {
        for (const auto& [k, v] : node.items()) {
            const std::string key = prefix.empty() ? k : prefix + "." + k;
            if (v.is_object())
                self(self, v, key);
            else
                out.push_back(key + " = " + v.dump());
        }
    };
    walk(walk, to_json(cfg), "");
    return out;
}

/// Parses `path` (empty: all defaults), then applies MOSAIC_OUT.
inline ExperimentConfig load_config(const std::filesystem::path& path) {
    ExperimentConfig cfg;
    if (!path.empty()) {
        std::ifstream is(path);
        if (!is) throw ConfigError("cannot open config " + path.string());
        json doc;
        try {
            doc = json::parse(is);
        } catch (const json::parse_error& e) {
            throw ConfigError(path.string() + ": " + e.what());
        }
        cfg = parse_config(doc);
    }
    if (const char* env = std::getenv("MOSAIC_OUT"); env && *env) cfg.out_dir = env;
    return cfg;
}

/// Creates out_dir and writes config.resolved.json there.
inline std::filesystem::path write_resolved(const ExperimentConfig& cfg) {
    std::filesystem::create_directories(cfg.out_dir);
    const auto path = cfg.out_dir / "config.resolved.json";
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
    os << to_json(cfg).dump(2) << '\n';
    return path;
}

}  // namespace mosaic::cli
