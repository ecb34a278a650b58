#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "mosaic/cli/config.hpp"
#include "mosaic/dataset/dataset.hpp"
#include "mosaic/io/ppm.hpp"
#include "mosaic/model/checkpoint.hpp"
#include "mosaic/numerics/gradcheck.hpp"
#include "mosaic/theory/analytic.hpp"
#include "mosaic/theory/verify.hpp"
#include "mosaic/train/train.hpp"

namespace mosaic::cli {

enum ExitCode : int { kOk = 0, kAssertionFailed = 1, kUsage = 2 };

/// Bad arguments or a referenced file that does not exist (exit 2).
class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Layout {
    std::filesystem::path root;
    std::filesystem::path dataset() const { return root / "dataset.mosd"; }
    std::filesystem::path preview() const { return root / "dataset_preview.ppm"; }
    std::filesystem::path run(model::BackboneKind k) const { return root / std::string(model::kind_name(k)); }
    std::filesystem::path checkpoint(model::BackboneKind k) const { return run(k) / "checkpoint.mosc"; }
    std::filesystem::path ema(model::BackboneKind k) const { return run(k) / "ema.mosc"; }
    std::filesystem::path metrics(model::BackboneKind k) const { return run(k) / "metrics.csv"; }
};

namespace detail {

inline void require_file(const std::filesystem::path& p, const std::string& what) {
    if (!std::filesystem::exists(p)) throw UsageError(what + " not found: " + p.string());
}

inline std::string pct(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f%%", 100.0 * v);
    return buf;
}

inline void write_report(const std::filesystem::path& path, const dataset::ConsistencyReport& r) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
    r.write_csv(os);
}

inline void write_checks(const std::filesystem::path& path, const std::vector<CheckRow>& rows) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
    write_check_csv(os, rows);
}

/// Weights and model config for sampling from a checkpoint file. The kind
/// and the presence of a time-bias table come from the file.
inline std::pair<model::ModelParams<float>, model::ModelConfig> load_for_sampling(const ExperimentConfig& cfg,
                                                                                  const std::filesystem::path& p) {
    require_file(p, "checkpoint");
    const auto ckpt = model::load_checkpoint(p);
    model::ModelConfig mc = cfg.model;
    mc.kind = ckpt.kind;
    auto params = cfg.eval.use_ema && ckpt.has_ema() ? ckpt.params(model::kEmaPrefix) : ckpt.params();
    mc.time_bias = params.time_bias.defined();
    if (mc.time_bias) mc.timesteps = params.time_bias.dim(0);
    return {std::move(params), mc};
}

}  // namespace detail

/// Writes the dataset file and a preview grid of its first 64 images.
inline int cmd_gen_data(const ExperimentConfig& cfg, std::ostream& log) {
    write_resolved(cfg);
    const Layout out{cfg.out_dir};
    const auto data = dataset::generate_dataset(cfg.dataset.n, cfg.dataset.seed);
    dataset::save_dataset(out.dataset(), data);
    io::write_ppm(out.preview(), io::SampleGrid::of(data));
    log << "wrote " << data.size() << " images to " << out.dataset().string() << " (preview "
        << out.preview().string() << ")\n";
    return kOk;
}

/// Trains one backbone on the dataset written by gen-data. With `resume`, an
/// existing checkpoint in the run directory is continued.
inline int cmd_train(ExperimentConfig cfg, std::optional<model::BackboneKind> kind, bool resume, std::ostream& log) {
    if (kind) cfg.model.kind = *kind;
    write_resolved(cfg);
    const Layout out{cfg.out_dir};
    detail::require_file(out.dataset(), "dataset (run gen-data first)");
    const auto data = dataset::load_dataset(out.dataset());
    const auto k = cfg.model.kind;
    std::filesystem::create_directories(out.run(k));

    std::optional<train::TrainState> state;
    if (resume && std::filesystem::exists(out.checkpoint(k)))
        state = train::TrainState::from_checkpoint(model::load_checkpoint(out.checkpoint(k)), cfg.train.ema_decay);

    const std::size_t epochs = cfg.train.resolved_epochs(k);
    const std::size_t steps_per_epoch = (data.size() + cfg.train.batch_size - 1) / cfg.train.batch_size;
    const std::size_t report_every = std::max<std::size_t>(1, epochs / 20) * steps_per_epoch;
    log << "training " << model::kind_name(k) << " for " << epochs << " epochs (" << epochs * steps_per_epoch
        << " steps)\n";
    const train::TrainOutputs outputs{out.checkpoint(k), out.ema(k), out.metrics(k)};
    try {
        train::train_model(cfg.model, cfg.train, cfg.diffusion, data, outputs, std::move(state),
                           [&](const train::MetricsRow& r) {
                               if ((r.step + 1) % report_every == 0)
                                   log << "  epoch " << r.epoch + 1 << " loss " << r.loss << " lr " << r.lr << " ("
                                       << static_cast<long>(r.wall_ms / 1000) << " s)\n";
                           });
    } catch (const train::TrainingDiverged& e) {
        log << "error: " << e.what() << '\n';
        return kAssertionFailed;
    }
    log << "checkpoint " << out.checkpoint(k).string() << ", EMA weights " << out.ema(k).string() << '\n';
    return kOk;
}

/// Consistency of eval.runs x eval.samples_per_run samples. With `compare`,
/// a second checkpoint is evaluated too and a summary row per model is
/// written. `min_mean` turns the mean into an assertion.
inline int cmd_eval(const ExperimentConfig& cfg, const std::filesystem::path& checkpoint,
                    const std::optional<std::filesystem::path>& compare, std::optional<double> min_mean,
                    std::ostream& log) {
    detail::require_file(checkpoint, "checkpoint");
    if (compare) detail::require_file(*compare, "checkpoint");
    write_resolved(cfg);
    const auto dir = cfg.out_dir / "eval";
    std::filesystem::create_directories(dir);
    const auto sched = diffusion::linear_schedule(cfg.diffusion);

    std::ofstream summary(dir / "summary.csv");
    summary << "checkpoint,kind,samples_per_run,runs,mean,std\n";
    double first_mean = 0.0;
    std::vector<std::filesystem::path> paths{checkpoint};
    if (compare) paths.push_back(*compare);
    for (std::size_t i = 0; i < paths.size(); ++i) {
        const auto [params, mc] = detail::load_for_sampling(cfg, paths[i]);
        const auto rep = train::evaluate(params, mc, sched, cfg.eval.samples_per_run, cfg.eval.runs, cfg.eval.seed,
                                         cfg.sampler());
        const std::string stem = paths[i].parent_path().filename().string() + "_" + paths[i].stem().string();
        detail::write_report(dir / (stem + ".csv"), rep);
        const auto grid = diffusion::ddpm_sample(params, mc, sched, cfg.eval.grid_images, cfg.eval.seed, cfg.sampler());
        io::write_ppm(dir / (stem + "_samples.ppm"), io::SampleGrid::of(grid));
        summary << paths[i].string() << ',' << model::kind_name(mc.kind) << ',' << rep.samples_per_run << ','
                << rep.runs << ',' << rep.mean << ',' << rep.std << '\n';
        log << model::kind_name(mc.kind) << " (" << paths[i].string() << "): consistency " << detail::pct(rep.mean)
            << " +- " << detail::pct(rep.std) << " over " << rep.runs << " x " << rep.samples_per_run << '\n';
        if (i == 0) first_mean = rep.mean;
    }
    if (min_mean && first_mean < *min_mean) {
        log << "FAILED: mean consistency " << detail::pct(first_mean) << " below " << detail::pct(*min_mean) << '\n';
        return kAssertionFailed;
    }
    return kOk;
}

/// Random-pair baseline against exact enumeration; fails outside 4 sigma.
inline int cmd_baseline(const ExperimentConfig& cfg, std::size_t samples, std::size_t runs, std::ostream& log) {
    write_resolved(cfg);
    const auto rep = dataset::baseline_consistency(samples, runs, cfg.eval.seed);
    detail::write_report(cfg.out_dir / "baseline.csv", rep);
    const auto exact = dataset::exact_baseline_probability();
    const double p = exact.value();
    const double n = static_cast<double>(samples * runs);
    const double sigma = std::sqrt(p * (1 - p) / n);
    const double z = (rep.mean - p) / sigma;
    log << "baseline consistency " << detail::pct(rep.mean) << " over " << runs << " x " << samples << "; exact "
        << exact.numerator << "/" << exact.denominator << " = " << detail::pct(p) << "; z = " << z << '\n';
    if (std::abs(z) > 4.0) {
        log << "FAILED: baseline differs from enumeration by more than 4 sigma\n";
        return kAssertionFailed;
    }
    return kOk;
}

/// Finite-difference checks of every op, the conv/deconv adjoint identity and
/// the attention/score identities; CSV to `out` and out_dir/grad_check.csv.
inline int cmd_grad_check(const ExperimentConfig& cfg, std::size_t instances, std::ostream& out, std::ostream& log) {
    write_resolved(cfg);
    auto rows = op_gradient_suite(instances, cfg.train.seed);
    rows.push_back(conv_adjoint_check(instances, cfg.train.seed));
    for (auto& r : theory::verification_suite({.seed = cfg.train.seed})) rows.push_back(std::move(r));
    write_check_csv(out, rows);
    detail::write_checks(cfg.out_dir / "grad_check.csv", rows);
    int code = kOk;
    for (const auto& r : rows)
        if (!r.pass) {
            log << "FAILED: " << r.check << " (max_rel_err " << r.max_rel_err << ", tolerance " << r.tolerance << ")\n";
            code = kAssertionFailed;
        }
    return code;
}

/// Training-free sampling from the analytic score of the configured dataset.
/// With `against`, the one-sided test that `mode` beats it must give p < alpha;
/// the second mode samples from eval.seed + 1 so the two sets are independent.
inline int cmd_analytic(const ExperimentConfig& cfg, theory::AnalyticMode mode,
                        std::optional<theory::AnalyticMode> against, std::size_t samples, std::size_t runs,
                        double alpha, std::ostream& log) {
    write_resolved(cfg);
    const auto data = dataset::generate_dataset(cfg.dataset.n, cfg.dataset.seed);
    const auto sched = diffusion::linear_schedule(cfg.diffusion);
    auto run = [&](theory::AnalyticMode m, std::uint64_t seed) {
        auto res = theory::analytic_sample(m, data, sched, samples, seed, runs, cfg.sampler());
        const std::string name = "analytic_" + theory::to_string(m);
        detail::write_report(cfg.out_dir / (name + ".csv"), res.report);
        io::write_ppm(cfg.out_dir / (name + "_samples.ppm"), io::SampleGrid::of(res.images, 8, cfg.eval.grid_images));
        log << theory::to_string(m) << ": consistency " << detail::pct(res.report.mean) << " over " << samples
            << " samples\n";
        return res.report;
    };
    const auto a = run(mode, cfg.eval.seed);
    if (!against) return kOk;
    const auto b = run(*against, cfg.eval.seed + 1);
    const double p = theory::one_sided_p_value(a.total_consistent(), samples, b.total_consistent(), samples);
    log << theory::to_string(mode) << " > " << theory::to_string(*against) << ": one-sided p = " << p << '\n';
    if (!(p < alpha)) {
        log << "FAILED: " << theory::to_string(mode) << " does not exceed " << theory::to_string(*against)
            << " at p < " << alpha << '\n';
        return kAssertionFailed;
    }
    return kOk;
}

}  // namespace mosaic::cli
