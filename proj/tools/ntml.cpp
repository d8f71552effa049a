// Command-line front end: dataset generation, poisoning, the two-step
// training, the mutual-learning defense, evaluation, feature export and the
// alpha/beta sweep. Exit codes: 0 success, 1 usage/config error, 2 runtime
// error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "ntml/error.hpp"
#include "ntml/harness.hpp"

namespace fs = std::filesystem;
using namespace ntml;

namespace {

struct CommonOpts {
    std::string config_path;
    std::uint64_t seed = 0;
    bool seed_set = false;
    std::string out;
};

void add_common(CLI::App* cmd, CommonOpts& c) {
    cmd->add_option("--config", c.config_path, "experiment config JSON");
    cmd->add_option("--seed", c.seed, "master seed override")
        ->each([&c](const std::string&) { c.seed_set = true; });
    cmd->add_option("--out", c.out, "output directory")->required();
}

ExperimentConfig make_config(const CommonOpts& c) {
    ExperimentConfig cfg;
    if (!c.config_path.empty()) cfg = load_config_file(c.config_path);
    if (c.seed_set) cfg.seed = c.seed;
    if (!c.out.empty()) cfg.output_dir = c.out;
    cfg.validate();
    return cfg;
}

void gen_benign_splits(const ExperimentConfig& cfg, const fs::path& root) {
    const int k = cfg.data.num_classes;
    const int train_total = cfg.data.train_per_class * k;
    const int clean_per_class = std::max(
        1, static_cast<int>(std::llround(cfg.defense.clean_ratio * train_total / k)));
    Rng rng_train(stage_seed(cfg.seed, "gen-train"));
    Rng rng_test(stage_seed(cfg.seed, "gen-test"));
    Rng rng_clean(stage_seed(cfg.seed, "gen-clean"));
    write_idx(gen_synthetic(k, cfg.data.train_per_class, cfg.data.channels, cfg.data.side,
                            rng_train),
              (root / "train").string());
    write_idx(gen_synthetic(k, cfg.data.test_per_class, cfg.data.channels, cfg.data.side,
                            rng_test),
              (root / "test").string());
    write_idx(gen_synthetic(k, clean_per_class, cfg.data.channels, cfg.data.side, rng_clean),
              (root / "clean").string());
}

std::vector<int> parse_ks(const std::string& csv) {
    std::vector<int> ks;
    std::size_t pos = 0;
    while (pos < csv.size()) {
        std::size_t next = csv.find(',', pos);
        if (next == std::string::npos) next = csv.size();
        ks.push_back(std::stoi(csv.substr(pos, next - pos)));
        pos = next + 1;
    }
    if (ks.empty()) throw UsageError("eval: empty top-k list");
    return ks;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"NT-ML backdoor lab"};
    app.require_subcommand(1);

    CommonOpts gen_c, poison_c, tt_c, nt_c, ml_c, ft_c, sweep_c, run_c;
    std::string data_dir, val_dir, teacher_path, student_path, model_path, clean_dir;
    std::string test_dir, poisoned_dir, ks_csv = "1,2", features_out, report_out;
    int target_override = -1;
    int sweep_trials = 0;
    std::string sweep_strategy;

    auto* gen = app.add_subcommand("gen-data", "generate benign train/test/clean IDX datasets");
    add_common(gen, gen_c);

    auto* poison = app.add_subcommand("poison", "poison a training set and build the triggered test set");
    add_common(poison, poison_c);
    poison->add_option("--data", data_dir, "dataset root containing train/ and test/")->required();

    auto* tt = app.add_subcommand("train-tt", "target training on the poisoned set");
    add_common(tt, tt_c);
    tt->add_option("--data", data_dir, "poisoned training IDX dir")->required();
    tt->add_option("--val", val_dir, "validation IDX dir for early stopping");

    auto* nt = app.add_subcommand("train-nt", "non-target training against a TT checkpoint");
    add_common(nt, nt_c);
    nt->add_option("--data", data_dir, "poisoned training IDX dir")->required();
    nt->add_option("--teacher", teacher_path, "TT checkpoint")->required();

    auto* ml = app.add_subcommand("defend-ml", "mutual-learning purification");
    add_common(ml, ml_c);
    ml->add_option("--teacher", teacher_path, "TT checkpoint")->required();
    ml->add_option("--student", student_path, "NT checkpoint")->required();
    ml->add_option("--clean", clean_dir, "clean IDX dir")->required();

    auto* ft = app.add_subcommand("defend-ft", "fine-tuning baseline defense");
    add_common(ft, ft_c);
    ft->add_option("--model", model_path, "checkpoint to fine-tune")->required();
    ft->add_option("--clean", clean_dir, "clean IDX dir")->required();

    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint (ASR/BA/PA/top-k)");
    std::string ev_config;
    ev->add_option("--model", model_path, "checkpoint")->required();
    ev->add_option("--test", test_dir, "benign test IDX dir")->required();
    ev->add_option("--poisoned", poisoned_dir, "poisoned test IDX dir")->required();
    ev->add_option("--target", target_override, "target class (default: from config/trigger)");
    ev->add_option("--topk", ks_csv, "comma-separated k list (default 1,2)");
    ev->add_option("--config", ev_config, "experiment config JSON");
    ev->add_option("--out", report_out, "report JSON path");

    auto* sw = app.add_subcommand("sweep", "alpha/beta sweep over the ML stage");
    add_common(sw, sweep_c);
    sw->add_option("--trials", sweep_trials, "trial count for the random strategy");
    sw->add_option("--strategy", sweep_strategy, "grid or random (default grid)");

    auto* exp = app.add_subcommand("export-features", "dump penultimate activations to CSV");
    exp->add_option("--model", model_path, "checkpoint")->required();
    exp->add_option("--data", data_dir, "IDX dir")->required();
    exp->add_option("--out", features_out, "CSV path")->required();

    auto* run = app.add_subcommand("run", "full experiment: gen, poison, TT, NT, ML, eval");
    add_common(run, run_c);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (*gen) {
            auto cfg = make_config(gen_c);
            gen_benign_splits(cfg, fs::path(cfg.output_dir) / "data");
            std::cout << "wrote " << cfg.output_dir << "/data/{train,test,clean}\n";
        } else if (*poison) {
            auto cfg = make_config(poison_c);
            Dataset train = read_idx((fs::path(data_dir) / "train").string());
            Dataset test = read_idx((fs::path(data_dir) / "test").string());
            Rng rng(stage_seed(cfg.seed, "poison"));
            Dataset d1 = cfg.poison.mode == PoisonMode::poisoned_label
                             ? poison_poisoned_label(train, cfg.trigger, cfg.poison.gamma, rng)
                             : poison_clean_label(train, cfg.trigger,
                                                  cfg.poison.frac_of_target, rng);
            Dataset ptest = build_poisoned_testset(test, cfg.trigger);
            const fs::path out(cfg.output_dir);
            write_idx(d1, (out / "data" / "train_poisoned").string());
            write_idx(ptest, (out / "data" / "test_poisoned").string());
            std::cout << "wrote " << cfg.output_dir
                      << "/data/{train_poisoned,test_poisoned}\n";
        } else if (*tt) {
            auto cfg = make_config(tt_c);
            Dataset d1 = read_idx(data_dir);
            Dataset val;
            if (!val_dir.empty()) val = read_idx(val_dir);
            TrainConfig tcfg = cfg.train_tt;
            tcfg.seed = stage_seed(cfg.seed, "tt");
            TrainResult res = train_tt(cfg.arch_spec(), d1, val, tcfg);
            fs::create_directories(fs::path(cfg.output_dir) / "checkpoints");
            const auto path = fs::path(cfg.output_dir) / "checkpoints" / "tt.ckpt";
            save_checkpoint(res.model, path.string());
            std::cout << "wrote " << path.string() << " (epochs " << res.model.epoch << ")\n";
        } else if (*nt) {
            auto cfg = make_config(nt_c);
            Dataset d1 = read_idx(data_dir);
            ModelCheckpoint teacher = load_checkpoint(teacher_path);
            SoftDataset d2 = build_soft_dataset(teacher, d1);
            TrainConfig tcfg = cfg.train_nt;
            tcfg.seed = stage_seed(cfg.seed, "nt");
            TrainResult res = train_nt(cfg.arch_spec(), d2, tcfg);
            fs::create_directories(fs::path(cfg.output_dir) / "checkpoints");
            const auto path = fs::path(cfg.output_dir) / "checkpoints" / "nt.ckpt";
            save_checkpoint(res.model, path.string());
            std::cout << "wrote " << path.string() << "\n";
        } else if (*ml) {
            auto cfg = make_config(ml_c);
            ModelCheckpoint teacher = load_checkpoint(teacher_path);
            ModelCheckpoint student = load_checkpoint(student_path);
            Dataset clean = read_idx(clean_dir);
            TrainConfig tcfg = cfg.train_ml;
            tcfg.seed = stage_seed(cfg.seed, "ml");
            MlResult res = mutual_learning(teacher, student, clean, cfg.defense.alpha,
                                           cfg.defense.beta, cfg.defense.temperature, tcfg,
                                           MlStructure::ml,
                                           cfg.defense.kl_temperature_compensation);
            fs::create_directories(fs::path(cfg.output_dir) / "checkpoints");
            const auto tpath = fs::path(cfg.output_dir) / "checkpoints" / "ml-teacher.ckpt";
            const auto spath = fs::path(cfg.output_dir) / "checkpoints" / "ml-student.ckpt";
            save_checkpoint(res.teacher, tpath.string());
            save_checkpoint(res.student, spath.string());
            std::cout << "wrote " << tpath.string() << " and " << spath.string() << "\n";
        } else if (*ft) {
            auto cfg = make_config(ft_c);
            ModelCheckpoint model = load_checkpoint(model_path);
            Dataset clean = read_idx(clean_dir);
            TrainConfig tcfg = cfg.train_ft;
            tcfg.seed = stage_seed(cfg.seed, "ft");
            TrainResult res = fine_tune(model, clean, tcfg);
            fs::create_directories(fs::path(cfg.output_dir) / "checkpoints");
            const auto path = fs::path(cfg.output_dir) / "checkpoints" / "ft.ckpt";
            save_checkpoint(res.model, path.string());
            std::cout << "wrote " << path.string() << "\n";
        } else if (*ev) {
            ExperimentConfig cfg;
            if (!ev_config.empty()) cfg = load_config_file(ev_config);
            ModelCheckpoint model = load_checkpoint(model_path);
            Dataset test = read_idx(test_dir);
            Dataset ptest = read_idx(poisoned_dir);
            const int target =
                target_override >= 0 ? target_override : cfg.trigger.target_class;
            MetricsReport rep = evaluate(model, test, ptest, target, parse_ks(ks_csv));
            const std::string text = report_to_json(rep, stage_name(model.stage), cfg);
            std::cout << text << "\n";
            if (!report_out.empty()) {
                std::ofstream os(report_out);
                if (!os) throw IoError("eval: cannot open " + report_out);
                os << text;
            }
        } else if (*sw) {
            auto cfg = make_config(sweep_c);
            SweepSpec spec;
            if (sweep_trials > 0) spec.trials = sweep_trials;
            if (!sweep_strategy.empty()) {
                if (sweep_strategy == "grid")
                    spec.strategy = SweepStrategy::grid;
                else if (sweep_strategy == "random")
                    spec.strategy = SweepStrategy::random;
                else
                    throw UsageError("sweep: strategy must be grid or random");
            }
            SweepResult res = sweep(cfg, spec);
            std::printf("best trial %d: alpha=%.3f beta=%.3f der=%.5f (asr=%.4f ba=%.4f)\n",
                        res.best.trial, res.best.alpha, res.best.beta, res.best.der,
                        res.best.asr, res.best.ba);
            std::cout << "wrote " << cfg.output_dir << "/sweep/trials.csv\n";
        } else if (*exp) {
            ModelCheckpoint model = load_checkpoint(model_path);
            Dataset ds = read_idx(data_dir);
            export_penultimate_features(model, ds, features_out);
            std::cout << "wrote " << features_out << "\n";
        } else if (*run) {
            auto cfg = make_config(run_c);
            auto reports = run_experiment(cfg);
            for (const auto& [stage, rep] : reports) {
                std::printf("%-11s asr=%.4f ba=%.4f pa=%.4f", stage.c_str(), rep.asr, rep.ba,
                            rep.pa);
                if (rep.der) std::printf(" der=%.5f", *rep.der);
                std::printf("\n");
            }
        }
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
