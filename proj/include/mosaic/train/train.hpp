#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "mosaic/dataset/dataset.hpp"
#include "mosaic/diffusion/diffusion.hpp"
#include "mosaic/error.hpp"
#include "mosaic/model/checkpoint.hpp"
#include "mosaic/model/model.hpp"
#include "mosaic/train/optim.hpp"

namespace mosaic::train {

struct TrainConfig {
    /// nullopt: 10000 for the top-1 backbone, 5000 otherwise.
    std::optional<std::size_t> epochs;
    std::size_t batch_size = 64;
    double max_lr = 1e-3;
    double weight_decay = 1e-5;
    double ema_decay = 0.9999;
    double warmup_fraction = 0.3;
    double div_factor = 25.0;
    double final_div_factor = 1e4;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    std::size_t checkpoint_every_epochs = 500;
    std::uint64_t seed = 0;

    std::size_t resolved_epochs(model::BackboneKind kind) const {
        if (epochs) return *epochs;
        return kind == model::BackboneKind::cnn_top1_attn ? 10000 : 5000;
    }

    OneCycleConfig onecycle() const { return {max_lr, warmup_fraction, div_factor, final_div_factor}; }
    AdamWOptions adamw() const { return {adam_beta1, adam_beta2, adam_eps, weight_decay}; }
};

struct MetricsRow {
    std::size_t step;
    std::size_t epoch;
    double lr;
    double loss;
    double wall_ms;
};

inline void write_metrics_header(std::ostream& os) { os << "step,epoch,lr,loss,wall_ms\n"; }

inline void write_metrics_row(std::ostream& os, const MetricsRow& r) {
    os << r.step << ',' << r.epoch << ',' << r.lr << ',' << r.loss << ',' << r.wall_ms << '\n';
}

/// Thrown when the loss turns non-finite. The last periodic checkpoint (if
/// any) is left on disk untouched.
class TrainingDiverged : public NumericError {
public:
    using NumericError::NumericError;
};

/// Everything needed to continue a run: live weights, EMA, optimizer state.
struct TrainState {
    model::ModelParams<float> params;
    EmaState<float> ema;
    AdamWState<float> adam;
    std::size_t skipped_steps = 0;

    std::size_t step() const { return adam.step + skipped_steps; }

    model::Checkpoint to_checkpoint() const {
        model::Checkpoint ckpt;
        ckpt.kind = params.kind;
        ckpt.add_params(params);
        ckpt.add_params(ema.shadow, model::kEmaPrefix);
        const auto named = params.named();
        for (std::size_t k = 0; k < adam.m.size(); ++k) {
            ckpt.tensors.push_back({"opt.m." + named[k].first, named[k].second.shape(), adam.m[k]});
            ckpt.tensors.push_back({"opt.v." + named[k].first, named[k].second.shape(), adam.v[k]});
        }
        ckpt.tensors.push_back({"opt.step", {2}, {static_cast<float>(adam.step), static_cast<float>(skipped_steps)}});
        return ckpt;
    }

    static TrainState from_checkpoint(const model::Checkpoint& ckpt, double ema_decay) {
        TrainState s;
        s.params = ckpt.params();
        s.ema = EmaState<float>(ckpt.has_ema() ? ckpt.params(model::kEmaPrefix) : s.params, ema_decay);
        if (const auto* step = ckpt.find("opt.step")) {
            s.adam.step = static_cast<std::size_t>(step->data.at(0));
            s.skipped_steps = static_cast<std::size_t>(step->data.at(1));
            for (const auto& [name, t] : s.params.named()) {
                const auto* m = ckpt.find("opt.m." + name);
                const auto* v = ckpt.find("opt.v." + name);
                if (!m || !v) throw FormatError("checkpoint lacks optimizer state for " + name);
                s.adam.m.push_back(m->data);
                s.adam.v.push_back(v->data);
            }
        }
        return s;
    }
};

struct TrainOutputs {
    /// Periodic and final checkpoint (raw + EMA + optimizer state).
    std::optional<std::filesystem::path> checkpoint;
    /// EMA weights alone, stored as plain parameters, written at the end.
    std::optional<std::filesystem::path> ema_checkpoint;
    std::optional<std::filesystem::path> metrics_csv;
};

struct TrainResult {
    TrainState state;
    std::vector<MetricsRow> metrics;
};

/// Stream layout under the run seed: init = derive_seed(seed, 1); epoch e
/// shuffle = derive_seed(derive_seed(seed, 2), e); step s noise =
/// derive_seed(derive_seed(seed, 3), s). A run is therefore a pure function of
/// its configs and dataset, and resuming from a checkpoint replays the same
/// streams.
struct StreamSeeds {
    std::uint64_t init, shuffle, noise;
    explicit StreamSeeds(std::uint64_t seed)
        : init(derive_seed(seed, 1)), shuffle(derive_seed(seed, 2)), noise(derive_seed(seed, 3)) {}
};

inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t shuffle_seed, std::size_t epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Prng rng(derive_seed(shuffle_seed, epoch));
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.uniform_int(i)]);
    return order;
}

using ProgressFn = std::function<void(const MetricsRow&)>;

/// Mini-batch training: per step loss, backward, AdamW at the OneCycle rate,
/// EMA update. `resume` continues a previous run of the same configuration.
inline TrainResult train_model(const model::ModelConfig& model_cfg, const TrainConfig& cfg,
                               const diffusion::DiffusionConfig& diff_cfg,
                               std::span<const dataset::ImageSample> data, const TrainOutputs& outputs = {},
                               std::optional<TrainState> resume = std::nullopt, const ProgressFn& progress = {}) {
    require(!data.empty(), "train_model: empty dataset");
    require(cfg.batch_size >= 1, "train_model: batch_size must be >= 1");
    const auto sched = diffusion::linear_schedule(diff_cfg);
    const StreamSeeds seeds(cfg.seed);
    const std::size_t epochs = cfg.resolved_epochs(model_cfg.kind);
    const std::size_t steps_per_epoch = (data.size() + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t total = epochs * steps_per_epoch;
    require(total >= 1, "train_model: no optimizer steps");

    TrainResult result;
    if (resume) {
        require(resume->params.kind == model_cfg.kind, "train_model: resume checkpoint has a different kind");
        result.state = std::move(*resume);
        result.state.ema.decay = cfg.ema_decay;
    } else {
        result.state.params = model::init_model<float>(model_cfg, seeds.init);
        result.state.ema = EmaState<float>(result.state.params, cfg.ema_decay);
    }
    TrainState& st = result.state;
    auto params = st.params.tensors();

    const Tensor<float> all = diffusion::to_tensor<float>(data);
    constexpr std::size_t per = dataset::kImageValues;

    std::optional<std::ofstream> metrics_os;
    if (outputs.metrics_csv) {
        const bool append = st.step() > 0 && std::filesystem::exists(*outputs.metrics_csv);
        metrics_os.emplace(*outputs.metrics_csv, append ? std::ios::app : std::ios::trunc);
        if (!*metrics_os) throw std::runtime_error("cannot open " + outputs.metrics_csv->string());
        if (!append) write_metrics_header(*metrics_os);
    }
    auto save = [&] {
        if (outputs.checkpoint) model::save_checkpoint(*outputs.checkpoint, st.to_checkpoint());
    };

    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::size_t> order;
    std::size_t order_epoch = static_cast<std::size_t>(-1);
    for (std::size_t step = st.step(); step < total; ++step) {
        const std::size_t epoch = step / steps_per_epoch;
        const std::size_t within = step % steps_per_epoch;
        if (epoch != order_epoch) {
            order = epoch_order(data.size(), seeds.shuffle, epoch);
            order_epoch = epoch;
        }
        const std::size_t lo = within * cfg.batch_size;
        const std::size_t B = std::min(cfg.batch_size, data.size() - lo);
        Tensor<float> batch({B, dataset::kChannels, dataset::kSide, dataset::kSide});
        for (std::size_t b = 0; b < B; ++b)
            std::copy_n(all.data().begin() + static_cast<std::ptrdiff_t>(order[lo + b] * per), per,
                        batch.data().begin() + static_cast<std::ptrdiff_t>(b * per));

        Prng rng(derive_seed(seeds.noise, step));
        Tensor<float> loss = diffusion::training_loss(st.params, model_cfg, batch, sched, rng);
        const double loss_value = loss.item();
        if (!std::isfinite(loss_value)) {
            throw TrainingDiverged("training diverged at step " + std::to_string(step) +
                                   (outputs.checkpoint ? "; last good checkpoint kept at " + outputs.checkpoint->string()
                                                       : std::string()));
        }
        grad(loss);
        const double lr = onecycle_lr(step, total, cfg.onecycle());
        if (adamw_step<float>(params, st.adam, lr, cfg.adamw()) == StepStatus::skipped_nonfinite_grad)
            ++st.skipped_steps;
        else
            ema_update(st.ema, st.params);

        const MetricsRow row{step, epoch, lr, loss_value,
                             std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count()};
        result.metrics.push_back(row);
        if (metrics_os) write_metrics_row(*metrics_os, row);
        if (progress) progress(row);

        const bool epoch_done = within + 1 == steps_per_epoch;
        if (epoch_done && cfg.checkpoint_every_epochs > 0 && (epoch + 1) % cfg.checkpoint_every_epochs == 0 &&
            step + 1 < total)
            save();
    }
    save();
    if (outputs.ema_checkpoint) {
        model::Checkpoint ema;
        ema.kind = st.params.kind;
        ema.add_params(st.ema.shadow);
        model::save_checkpoint(*outputs.ema_checkpoint, ema);
    }
    return result;
}

/// Consistency of `samples_per_run` images per run; run r samples with seed
/// derive_seed(seed, r).
inline dataset::ConsistencyReport evaluate(const model::ModelParams<float>& params, const model::ModelConfig& cfg,
                                           const diffusion::NoiseSchedule& sched, std::size_t samples_per_run,
                                           std::size_t runs, std::uint64_t seed,
                                           const diffusion::SamplerOptions& opt = {}) {
    require(samples_per_run >= 1 && runs >= 1, "evaluate: counts must be >= 1");
    dataset::ConsistencyReport report;
    report.samples_per_run = samples_per_run;
    for (std::size_t r = 0; r < runs; ++r) {
        const auto images = diffusion::ddpm_sample(params, cfg, sched, samples_per_run, derive_seed(seed, r), opt);
        std::size_t hits = 0;
        for (const auto& img : images) hits += dataset::is_consistent(img) ? 1 : 0;
        report.add_run(hits);
    }
    return report;
}

}  // namespace mosaic::train
