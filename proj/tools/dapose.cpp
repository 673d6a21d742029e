// Command-line entry point. Verb dispatch lives in include/dapose/runner.hpp
// so tests can run the same code paths in-process.

#include <cstdio>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "dapose/runner.hpp"

namespace {

struct CommonOpts {
    std::string config;
    std::string out;
    int64_t seed = 0;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
    cmd->add_option("--config", o.config, "JSON config file (strict schema)");
    cmd->add_option("--seed", o.seed, "master seed (overrides the config file)");
    cmd->add_option("--out", o.out, "output directory (overrides the config file)");
}

// File values first, then flags last-wins; each override is logged.
dapose::cfg::RunConfig resolve(const CLI::App* cmd, const CommonOpts& o) {
    dapose::cfg::RunConfig rc =
        o.config.empty() ? dapose::cfg::RunConfig{} : dapose::cfg::load_config(o.config);
    if (cmd->count("--seed") > 0) {
        rc.seed = static_cast<uint64_t>(o.seed);
        std::fprintf(stderr, "override: seed=%lld (flag)\n", static_cast<long long>(o.seed));
    }
    if (cmd->count("--out") > 0) {
        rc.out_dir = o.out;
        std::fprintf(stderr, "override: out=%s (flag)\n", o.out.c_str());
    }
    rc.validate();
    return rc;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Domain-adaptive keypoint estimation: data generation, training, "
                 "evaluation, ablation, and reporting"};
    app.require_subcommand(1);

    CommonOpts gen_o, pre_o, ada_o, eva_o, abl_o, rep_o;
    bool force = false;
    std::string from, eval_ckpt, eval_model = "teacher", eval_split = "target_eval";

    CLI::App* gen = app.add_subcommand("generate", "materialize the toy domain pair");
    add_common(gen, gen_o);
    gen->add_flag("--force", force, "overwrite an existing non-empty dataset directory");

    CLI::App* pre = app.add_subcommand("pretrain", "source-supervised pretraining");
    add_common(pre, pre_o);

    CLI::App* ada = app.add_subcommand("adapt", "unsupervised adaptation to the target domain");
    add_common(ada, ada_o);
    ada->add_option("--from", from, "starting checkpoint (default: <out>/pretrain.ckpt)");

    CLI::App* eva = app.add_subcommand("eval", "evaluate a checkpoint with PCK@0.05");
    add_common(eva, eva_o);
    eva->add_option("--checkpoint", eval_ckpt, "checkpoint file (default: <out>/checkpoint.ckpt)");
    eva->add_option("--model", eval_model, "teacher|student (default teacher)");
    eva->add_option("--split", eval_split, "target_eval|source (default target_eval)");

    CLI::App* abl = app.add_subcommand("ablate", "loss-term ablation sweep over seeds");
    add_common(abl, abl_o);

    CLI::App* rep = app.add_subcommand("report", "render markdown report for a run directory");
    add_common(rep, rep_o);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (gen->parsed()) {
            const auto rc = resolve(gen, gen_o);
            const std::string hash = dapose::run::cmd_generate(rc, force);
            std::printf("generated %s (config %s)\n", rc.data_dir.c_str(), hash.c_str());
        } else if (pre->parsed()) {
            const auto rc = resolve(pre, pre_o);
            std::cout << dapose::run::cmd_pretrain(rc).dump(2) << "\n";
        } else if (ada->parsed()) {
            const auto rc = resolve(ada, ada_o);
            std::cout << dapose::run::cmd_adapt(rc, from).dump(2) << "\n";
        } else if (eva->parsed()) {
            const auto rc = resolve(eva, eva_o);
            std::cout << dapose::run::cmd_eval(rc, eval_ckpt, eval_model, eval_split).dump(2)
                      << "\n";
        } else if (abl->parsed()) {
            const auto rc = resolve(abl, abl_o);
            std::printf("%s\n", dapose::run::cmd_ablate(rc).string().c_str());
        } else if (rep->parsed()) {
            std::string run_dir = rep_o.out;
            if (run_dir.empty() && !rep_o.config.empty())
                run_dir = dapose::cfg::load_config(rep_o.config).out_dir;
            dapose::check_config(!run_dir.empty(),
                                 "report: pass --out RUN_DIR or a config with out_dir");
            std::printf("%s\n", dapose::run::cmd_report(run_dir).string().c_str());
        }
    } catch (const dapose::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const dapose::DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 3;
    } catch (const dapose::NumericError& e) {
        std::fprintf(stderr, "numeric abort: %s\n", e.what());
        return 4;
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
