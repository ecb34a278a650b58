// mosaic: dataset generation, training, evaluation and theory checks for the
// key-value mosaic diffusion experiments.
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "mosaic/cli/commands.hpp"

using namespace mosaic;

namespace {

std::string config_help() {
    std::string s = "\nConfig keys (JSON sections; omitted keys take these defaults):\n";
    for (const auto& line : cli::describe_keys()) s += "  " + line + "\n";
    s += "\ntrain.epochs null: 10000 for cnn_top1_attn, 5000 otherwise. model.attention.scale null: 1/sqrt(32)\n"
         "for learnable projections, 1 for identity attention.\n";
    s += "MOSAIC_OUT overrides paths.out_dir. Exit codes: 0 success, 1 failed assertion, 2 usage or missing input.\n";
    return s;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Diffusion on 4x4 key-value mosaics: data, training, evaluation and theory checks"};
    app.footer(config_help());
    app.require_subcommand(1);

    std::string config_path;
    auto add_config = [&](CLI::App* sub) { sub->add_option("--config,-c", config_path, "JSON experiment config"); };

    auto* gen = app.add_subcommand("gen-data", "write the dataset file and a 64-image preview grid");
    add_config(gen);

    auto* tr = app.add_subcommand("train", "train one backbone on the generated dataset");
    add_config(tr);
    std::string kind_str;
    bool resume = false;
    tr->add_option("--kind,-k", kind_str, "cnn | cnn_full_attn | cnn_identity_attn | cnn_top1_attn (default: model.kind)");
    tr->add_flag("--resume", resume, "continue from the run directory's checkpoint");

    auto* ev = app.add_subcommand("eval", "sample from a checkpoint and report consistency");
    add_config(ev);
    std::string ckpt, compare;
    std::optional<double> min_mean;
    ev->add_option("--checkpoint", ckpt, "checkpoint file (EMA weights used when present)")->required();
    ev->add_option("--compare", compare, "second checkpoint reported in the summary");
    ev->add_option("--min-mean", min_mean, "fail unless mean consistency reaches this fraction");

    auto* bl = app.add_subcommand("baseline", "random-pair baseline against exact enumeration");
    add_config(bl);
    std::size_t bl_samples = 10000, bl_runs = 100;
    bl->add_option("--samples", bl_samples, "samples per run")->capture_default_str();
    bl->add_option("--runs", bl_runs, "runs")->capture_default_str();

    auto* gc = app.add_subcommand("grad-check", "finite-difference and identity checks, CSV on stdout");
    add_config(gc);
    std::size_t gc_instances = 100;
    gc->add_option("--instances", gc_instances, "random instances per op")->capture_default_str();

    auto* an = app.add_subcommand("analytic-sample", "training-free sampling from an analytic score");
    add_config(an);
    std::string mode_str, against_str;
    std::size_t an_samples = 10000, an_runs = 1;
    double alpha = 0.01;
    an->add_option("--mode,-m", mode_str, "LOCAL | TOP1 | TOP1_MIXTURE | DATASET")->required();
    an->add_option("--against", against_str, "second mode; assert --mode beats it (one-sided test)");
    an->add_option("--samples", an_samples, "number of samples")->capture_default_str();
    an->add_option("--runs", an_runs, "runs the samples are split into")->capture_default_str();
    an->add_option("--alpha", alpha, "significance level for --against")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return cli::kUsage;
    }

    try {
        const auto cfg = cli::load_config(config_path);
        if (gen->parsed()) return cli::cmd_gen_data(cfg, std::cout);
        if (tr->parsed()) {
            std::optional<model::BackboneKind> kind;
            if (!kind_str.empty()) kind = model::parse_kind(kind_str);
            return cli::cmd_train(cfg, kind, resume, std::cout);
        }
        if (ev->parsed()) {
            std::optional<std::filesystem::path> cmp;
            if (!compare.empty()) cmp = compare;
            return cli::cmd_eval(cfg, ckpt, cmp, min_mean, std::cout);
        }
        if (bl->parsed()) return cli::cmd_baseline(cfg, bl_samples, bl_runs, std::cout);
        if (gc->parsed()) return cli::cmd_grad_check(cfg, gc_instances, std::cout, std::cerr);
        if (an->parsed()) {
            std::optional<theory::AnalyticMode> against;
            if (!against_str.empty()) against = theory::parse_mode(against_str);
            return cli::cmd_analytic(cfg, theory::parse_mode(mode_str), against, an_samples, an_runs, alpha, std::cout);
        }
    } catch (const cli::ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return cli::kUsage;
    } catch (const cli::UsageError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return cli::kUsage;
    } catch (const ContractViolation& e) {
        std::cerr << "error: " << e.what() << '\n';
        return cli::kUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return cli::kAssertionFailed;
    }
    return cli::kUsage;
}
