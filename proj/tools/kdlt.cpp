// kdlt: dataset generation, teacher training, student distillation,
// evaluation, robustness sweeps and the sequence-label oracle.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "kdlt/checkpoint.hpp"
#include "kdlt/harness.hpp"
#include "kdlt/oracle.hpp"
#include "kdlt/run_config.hpp"
#include "kdlt/synthdata.hpp"

namespace fs = std::filesystem;
using namespace kdlt;

namespace {

struct ConfigArgs {
    std::string file;
    std::vector<std::string> overrides;

    void attach(CLI::App* sub) {
        sub->add_option("--config", file, "key = value run configuration");
        sub->add_option("--set", overrides, "override one key (key=value), repeatable");
    }

    // Defaults, then the file, then --set; echoed to stdout.
    cli::RunConfig resolve() const {
        cli::RunConfig c;
        if (!file.empty()) c = cli::parse_config_file(file, c);
        cli::apply_overrides(c, overrides);
        c.train.validate();
        std::cout << "# effective config\n" << cli::format_config(c) << std::flush;
        return c;
    }
};

void refuse_overwrite(const std::vector<std::string>& outputs, bool force) {
    if (force) return;
    for (const auto& p : outputs)
        if (!p.empty() && fs::exists(p)) throw IoError(p + " exists (use --force to overwrite)");
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path);
    out << text;
    if (!out) throw IoError("failed writing " + path);
}

std::vector<data::SamplePair> load_split(const std::string& dir, const char* what) {
    if (dir.empty()) throw ConfigError(std::string("no ") + what + " dataset given");
    return data::load_samples(data::load_manifest(fs::path(dir) / "manifest.tsv"));
}

harness::Resolution resolution_of(const rec::Recognizer& model) {
    return model.config().input_height == data::kHrHeight ? harness::Resolution::hr : harness::Resolution::lr;
}

std::string or_default(const std::string& flag, const std::string& fallback) { return flag.empty() ? fallback : flag; }

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Knowledge distillation for low-resolution text recognition"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "Render a synthetic HR/LR dataset");
    std::string gen_out;
    int gen_n = 2000;
    std::uint64_t gen_seed = 1;
    std::vector<double> gen_ratios{1.0, 1.0, 1.0};
    bool gen_force = false;
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("--n", gen_n, "number of samples");
    gen->add_option("--seed", gen_seed, "dataset seed");
    gen->add_option("--ratios", gen_ratios, "easy,medium,hard proportions")->delimiter(',')->expected(3);
    gen->add_flag("--force", gen_force, "overwrite an existing dataset");

    // train-teacher
    auto* teach = app.add_subcommand("train-teacher", "Train the HR teacher with cross-entropy");
    ConfigArgs teach_cfg;
    std::string teach_data, teach_out, teach_metrics;
    bool teach_force = false;
    teach_cfg.attach(teach);
    teach->add_option("--data", teach_data, "training dataset directory (overrides train_data)");
    teach->add_option("--out", teach_out, "teacher checkpoint")->required();
    teach->add_option("--metrics", teach_metrics, "per-epoch CSV (default <out>.metrics.csv)");
    teach->add_flag("--force", teach_force, "overwrite outputs");

    // distill-student
    auto* dist = app.add_subcommand("distill-student", "Distill an LR student from a frozen teacher");
    ConfigArgs dist_cfg;
    std::string dist_data, dist_teacher, dist_out, dist_metrics;
    bool dist_force = false;
    dist_cfg.attach(dist);
    dist->add_option("--data", dist_data, "training dataset directory (overrides train_data)");
    dist->add_option("--teacher", dist_teacher, "teacher checkpoint (overrides teacher)");
    dist->add_option("--out", dist_out, "student checkpoint")->required();
    dist->add_option("--metrics", dist_metrics, "per-epoch CSV (default <out>.metrics.csv)");
    dist->add_flag("--force", dist_force, "overwrite outputs");

    // eval
    auto* ev = app.add_subcommand("eval", "Word accuracy per subset");
    std::string ev_ckpt, ev_data, ev_report;
    bool ev_force = false;
    ev->add_option("--ckpt", ev_ckpt, "checkpoint")->required();
    ev->add_option("--data", ev_data, "dataset directory")->required();
    ev->add_option("--report", ev_report, "also write the report to this file");
    ev->add_flag("--force", ev_force, "overwrite the report");

    // oracle-check
    auto* orc = app.add_subcommand("oracle-check", "Check beam search and revision against brute force");
    int orc_trials = 500;
    std::uint64_t orc_seed = 1;
    orc->add_option("--trials", orc_trials, "random instances per check")->check(CLI::PositiveNumber);
    orc->add_option("--seed", orc_seed, "instance seed");

    // sweep
    auto* sw = app.add_subcommand("sweep", "Accuracy under increasing blur and noise");
    std::string sw_ckpt, sw_data, sw_out;
    std::vector<double> sw_blur{0.0, 0.5, 1.0, 1.5, 2.0};
    std::vector<double> sw_noise{0.0, 0.025, 0.05, 0.075, 0.1};
    std::uint64_t sw_seed = 1;
    bool sw_force = false;
    sw->add_option("--ckpt", sw_ckpt, "LR checkpoint")->required();
    sw->add_option("--data", sw_data, "held-out dataset directory")->required();
    sw->add_option("--blur", sw_blur, "blur sigma grid")->delimiter(',');
    sw->add_option("--noise", sw_noise, "noise std grid")->delimiter(',');
    sw->add_option("--seed", sw_seed, "degradation seed");
    sw->add_option("--out", sw_out, "CSV output (default stdout)");
    sw->add_flag("--force", sw_force, "overwrite the CSV");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        if (argc > 1 && argv[1][0] != '-' && app.get_subcommand_no_throw(argv[1]) == nullptr) {
            std::cerr << "error: unknown subcommand '" << argv[1] << "'\n\n" << app.help();
            return 2;
        }
        std::cerr << "error: " << e.what() << "\n\n" << app.help();
        return 2;
    }

    try {
        if (gen->parsed()) {
            const auto m = data::generate_dataset(gen_out, gen_n, {gen_ratios[0], gen_ratios[1], gen_ratios[2]},
                                                  gen_seed, gen_force);
            std::cout << "wrote " << m.records.size() << " samples to " << gen_out << '\n';
        } else if (teach->parsed()) {
            cli::RunConfig c = teach_cfg.resolve();
            const std::string data_dir = or_default(teach_data, c.train_data);
            const std::string metrics = or_default(teach_metrics, teach_out + ".metrics.csv");
            refuse_overwrite({teach_out, metrics}, teach_force);
            const auto train = load_split(data_dir, "training");
            auto result = harness::train_teacher(train, rec::RecognizerConfig::teacher(), c.train, &std::cerr);
            io::save_checkpoint(teach_out, result.model);
            write_text(metrics, harness::metrics_csv(result.history));
            std::cout << "teacher saved to " << teach_out << '\n';
        } else if (dist->parsed()) {
            cli::RunConfig c = dist_cfg.resolve();
            const std::string data_dir = or_default(dist_data, c.train_data);
            const std::string teacher_path = or_default(dist_teacher, c.teacher);
            if (teacher_path.empty()) throw ConfigError("no teacher checkpoint given");
            const std::string metrics = or_default(dist_metrics, dist_out + ".metrics.csv");
            refuse_overwrite({dist_out, metrics}, dist_force);
            const rec::Recognizer teacher = io::load_recognizer(teacher_path);
            const auto train = load_split(data_dir, "training");
            auto result =
                harness::distill_student(train, teacher, rec::RecognizerConfig::student(), c.train, &std::cerr);
            io::save_checkpoint(dist_out, result.model);
            write_text(metrics, harness::metrics_csv(result.history));
            std::cout << "student saved to " << dist_out << '\n';
        } else if (ev->parsed()) {
            refuse_overwrite({ev_report}, ev_force);
            const rec::Recognizer model = io::load_recognizer(ev_ckpt);
            const auto samples = load_split(ev_data, "evaluation");
            const std::string report = harness::report_text(harness::evaluate(model, samples, resolution_of(model)));
            std::cout << report;
            if (!ev_report.empty()) write_text(ev_report, report);
        } else if (orc->parsed()) {
            bool ok = true;
            for (const auto& r : {seq::check_exhaustive_identity(orc_trials, orc_seed),
                                  seq::check_beam_topk(orc_trials, orc_seed),
                                  seq::check_threshold_fallback(orc_trials, orc_seed)}) {
                std::printf("%-28s trials %d  failures %d  max deviation %.3g\n", r.name.c_str(), r.trials,
                            r.failures, r.max_deviation);
                ok = ok && r.passed();
            }
            return ok ? 0 : 1;
        } else if (sw->parsed()) {
            refuse_overwrite({sw_out}, sw_force);
            const rec::Recognizer model = io::load_recognizer(sw_ckpt);
            const auto heldout = load_split(sw_data, "held-out");
            const std::string csv =
                harness::sweep_csv(harness::robustness_sweep(model, heldout, sw_blur, sw_noise, sw_seed));
            if (sw_out.empty()) std::cout << csv;
            else write_text(sw_out, csv);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
