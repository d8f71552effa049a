#include "ntml/harness.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ntml/error.hpp"

namespace ntml {

using nlohmann::json;

ArchSpec ExperimentConfig::arch_spec() const {
    ArchSpec a;
    a.input_channels = data.channels;
    a.input_size = data.side;
    a.conv_filters = arch.conv_filters;
    a.hidden_dense = arch.hidden_dense;
    a.num_classes = data.num_classes;
    return a;
}

void ExperimentConfig::validate() const {
    arch_spec().validate();
    if (data.train_per_class < 1 || data.test_per_class < 1)
        throw ConfigError("config: per-class sample counts must be positive");
    if (!(defense.clean_ratio > 0.0 && defense.clean_ratio <= 0.5))
        throw ConfigError("config: clean_ratio must lie in (0, 0.5]");
    trigger.validate(data.side);
    if (trigger.target_class >= data.num_classes)
        throw ConfigError("config: trigger target class beyond num_classes");
    if (poison.mode == PoisonMode::poisoned_label) {
        if (poison.gamma < 0.0 || poison.gamma >= 1.0)
            throw ConfigError("config: gamma must lie in [0,1)");
    } else {
        if (poison.frac_of_target < 0.0 || poison.frac_of_target > 1.0)
            throw ConfigError("config: frac_of_target must lie in [0,1]");
    }
    if (!(val_fraction > 0.0 && val_fraction <= 0.5))
        throw ConfigError("config: val_fraction must lie in (0, 0.5]");
    train_tt.validate();
    train_nt.validate();
    train_ml.validate();
    train_ft.validate();
    if (defense.alpha < 0.0 || defense.alpha > 1.0)
        throw ConfigError("config: alpha must lie in [0,1]");
    if (defense.beta < 0.0) throw ConfigError("config: beta must be nonnegative");
    if (!(defense.temperature > 0.0))
        throw ConfigError("config: temperature must be positive");
}

namespace {

json trigger_to_json(const TriggerSpec& t) {
    return json{{"family", trigger_family_name(t.family)},
                {"target_class", t.target_class},
                {"patch",
                 {{"size", t.patch_size},
                  {"corner", corner_name(t.patch_corner)},
                  {"intensity", t.patch_intensity}}},
                {"blend", {{"pattern_seed", t.blend_pattern_seed}, {"opacity", t.blend_opacity}}},
                {"sinusoid", {{"amplitude", t.sin_amplitude}, {"frequency", t.sin_frequency}}},
                {"warp",
                 {{"grid", t.warp_grid},
                  {"max_displacement", t.warp_max_disp},
                  {"seed", t.warp_seed}}}};
}

TriggerSpec trigger_from_json(const json& j) {
    TriggerSpec t;
    t.family = trigger_family_from_name(j.value("family", "patch"));
    t.target_class = j.value("target_class", t.target_class);
    if (j.contains("patch")) {
        const auto& p = j.at("patch");
        t.patch_size = p.value("size", t.patch_size);
        t.patch_corner = corner_from_name(p.value("corner", corner_name(t.patch_corner)));
        t.patch_intensity = p.value("intensity", t.patch_intensity);
    }
    if (j.contains("blend")) {
        const auto& b = j.at("blend");
        t.blend_pattern_seed = b.value("pattern_seed", t.blend_pattern_seed);
        t.blend_opacity = b.value("opacity", t.blend_opacity);
    }
    if (j.contains("sinusoid")) {
        const auto& s = j.at("sinusoid");
        t.sin_amplitude = s.value("amplitude", t.sin_amplitude);
        t.sin_frequency = s.value("frequency", t.sin_frequency);
    }
    if (j.contains("warp")) {
        const auto& w = j.at("warp");
        t.warp_grid = w.value("grid", t.warp_grid);
        t.warp_max_disp = w.value("max_displacement", t.warp_max_disp);
        t.warp_seed = w.value("seed", t.warp_seed);
    }
    return t;
}

json train_to_json(const TrainConfig& c) {
    json j{{"epochs", c.epochs},
           {"batch_size", c.batch_size},
           {"lr", c.lr},
           {"momentum", c.momentum},
           {"seed", c.seed}};
    if (c.early_stop_patience)
        j["early_stop_patience"] = *c.early_stop_patience;
    else
        j["early_stop_patience"] = nullptr;
    return j;
}

TrainConfig train_from_json(const json& j, const TrainConfig& defaults) {
    TrainConfig c = defaults;
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr = j.value("lr", c.lr);
    c.momentum = j.value("momentum", c.momentum);
    c.seed = j.value("seed", c.seed);
    if (j.contains("early_stop_patience")) {
        if (j.at("early_stop_patience").is_null())
            c.early_stop_patience = std::nullopt;
        else
            c.early_stop_patience = j.at("early_stop_patience").get<int>();
    }
    return c;
}

}  // namespace

std::string serialize_config(const ExperimentConfig& cfg) {
    json j;
    j["schema_version"] = kSchemaVersion;
    j["seed"] = cfg.seed;
    j["data"] = {{"num_classes", cfg.data.num_classes},
                 {"channels", cfg.data.channels},
                 {"side", cfg.data.side},
                 {"train_per_class", cfg.data.train_per_class},
                 {"test_per_class", cfg.data.test_per_class}};
    j["arch"] = {{"conv_filters", cfg.arch.conv_filters},
                 {"hidden_dense", cfg.arch.hidden_dense}};
    j["trigger"] = trigger_to_json(cfg.trigger);
    j["poison"] = {
        {"mode", cfg.poison.mode == PoisonMode::poisoned_label ? "poisoned-label" : "clean-label"},
        {"gamma", cfg.poison.gamma},
        {"frac_of_target", cfg.poison.frac_of_target}};
    j["train"] = {{"tt", train_to_json(cfg.train_tt)},
                  {"nt", train_to_json(cfg.train_nt)},
                  {"ml", train_to_json(cfg.train_ml)},
                  {"ft", train_to_json(cfg.train_ft)}};
    j["defense"] = {{"alpha", cfg.defense.alpha},
                    {"beta", cfg.defense.beta},
                    {"temperature", cfg.defense.temperature},
                    {"clean_ratio", cfg.defense.clean_ratio},
                    {"kl_temperature_compensation", cfg.defense.kl_temperature_compensation}};
    j["val_fraction"] = cfg.val_fraction;
    j["run_ft"] = cfg.run_ft;
    j["output_dir"] = cfg.output_dir;
    return j.dump(2);
}

ExperimentConfig parse_config(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw FormatError(std::string("config: invalid JSON: ") + e.what());
    }
    ExperimentConfig cfg;
    try {
        if (j.contains("schema_version") && j.at("schema_version").get<int>() != kSchemaVersion)
            throw ConfigError("config: unsupported schema_version");
        cfg.seed = j.value("seed", cfg.seed);
        if (j.contains("data")) {
            const auto& d = j.at("data");
            cfg.data.num_classes = d.value("num_classes", cfg.data.num_classes);
            cfg.data.channels = d.value("channels", cfg.data.channels);
            cfg.data.side = d.value("side", cfg.data.side);
            cfg.data.train_per_class = d.value("train_per_class", cfg.data.train_per_class);
            cfg.data.test_per_class = d.value("test_per_class", cfg.data.test_per_class);
        }
        if (j.contains("arch")) {
            const auto& a = j.at("arch");
            if (a.contains("conv_filters"))
                cfg.arch.conv_filters = a.at("conv_filters").get<std::vector<int>>();
            cfg.arch.hidden_dense = a.value("hidden_dense", cfg.arch.hidden_dense);
        }
        if (j.contains("trigger")) cfg.trigger = trigger_from_json(j.at("trigger"));
        if (j.contains("poison")) {
            const auto& p = j.at("poison");
            const std::string mode = p.value("mode", "poisoned-label");
            if (mode == "poisoned-label")
                cfg.poison.mode = PoisonMode::poisoned_label;
            else if (mode == "clean-label")
                cfg.poison.mode = PoisonMode::clean_label;
            else
                throw ConfigError("config: poison mode must be poisoned-label or clean-label");
            cfg.poison.gamma = p.value("gamma", cfg.poison.gamma);
            cfg.poison.frac_of_target = p.value("frac_of_target", cfg.poison.frac_of_target);
        }
        if (j.contains("train")) {
            const auto& t = j.at("train");
            if (t.contains("tt")) cfg.train_tt = train_from_json(t.at("tt"), cfg.train_tt);
            if (t.contains("nt")) cfg.train_nt = train_from_json(t.at("nt"), cfg.train_nt);
            if (t.contains("ml")) cfg.train_ml = train_from_json(t.at("ml"), cfg.train_ml);
            if (t.contains("ft")) cfg.train_ft = train_from_json(t.at("ft"), cfg.train_ft);
        }
        if (j.contains("defense")) {
            const auto& d = j.at("defense");
            cfg.defense.alpha = d.value("alpha", cfg.defense.alpha);
            cfg.defense.beta = d.value("beta", cfg.defense.beta);
            cfg.defense.temperature = d.value("temperature", cfg.defense.temperature);
            cfg.defense.clean_ratio = d.value("clean_ratio", cfg.defense.clean_ratio);
            cfg.defense.kl_temperature_compensation =
                d.value("kl_temperature_compensation", cfg.defense.kl_temperature_compensation);
        }
        cfg.val_fraction = j.value("val_fraction", cfg.val_fraction);
        cfg.run_ft = j.value("run_ft", cfg.run_ft);
        cfg.output_dir = j.value("output_dir", cfg.output_dir);
    } catch (const json::exception& e) {
        throw FormatError(std::string("config: ") + e.what());
    }
    return cfg;
}

ExperimentConfig load_config_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("config: cannot open " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_config(ss.str());
}

void SweepSpec::validate() const {
    if (trials < 1) throw ConfigError("sweep: trials must be at least 1");
    if (alpha_range.first > alpha_range.second || beta_range.first > beta_range.second)
        throw ConfigError("sweep: ranges must be ordered");
    if (strategy == SweepStrategy::grid && (alpha_values.empty() || beta_values.empty()))
        throw ConfigError("sweep: grid strategy needs grid points");
}

namespace {

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

}  // namespace

std::uint64_t stage_seed(std::uint64_t base_seed, const std::string& stage) {
    Rng r = Rng::derive(base_seed, fnv1a(stage));
    return r.next_u64();
}

std::uint64_t trial_seed(std::uint64_t base_seed, int trial_index) {
    Rng r = Rng::derive(stage_seed(base_seed, "sweep-trial"),
                        static_cast<std::uint64_t>(trial_index));
    return r.next_u64();
}

namespace {

std::string iso_timestamp() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

// Rethrows any library error with a stage prefix, preserving the type.
template <typename Fn>
auto run_stage(const std::string& stage, Fn&& fn) {
    try {
        return fn();
    } catch (const DimensionError& e) {
        throw DimensionError("stage " + stage + ": " + e.what());
    } catch (const UsageError& e) {
        throw UsageError("stage " + stage + ": " + e.what());
    } catch (const ConfigError& e) {
        throw ConfigError("stage " + stage + ": " + e.what());
    } catch (const FormatError& e) {
        throw FormatError("stage " + stage + ": " + e.what());
    } catch (const NumericError& e) {
        throw NumericError("stage " + stage + ": " + e.what());
    } catch (const TrainingError& e) {
        throw TrainingError("stage " + stage + ": " + e.what());
    } catch (const IoError& e) {
        throw IoError("stage " + stage + ": " + e.what());
    }
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open for writing: " + path);
    os << text;
    if (!os) throw IoError("write failed: " + path);
}

}  // namespace

std::string report_to_json(const MetricsReport& rep, const std::string& stage,
                           const ExperimentConfig& cfg) {
    json j;
    j["schema_version"] = kSchemaVersion;
    j["run_id"] = stage + "-seed" + std::to_string(cfg.seed);
    j["timestamp"] = iso_timestamp();
    j["stage"] = stage;
    j["seed"] = cfg.seed;
    json topk = json::object();
    for (const auto& [k, v] : rep.topk) topk[std::to_string(k)] = v;
    j["metrics"] = {{"asr", rep.asr}, {"ba", rep.ba}, {"pa", rep.pa}, {"topk", topk}};
    if (rep.der)
        j["metrics"]["der"] = *rep.der;
    else
        j["metrics"]["der"] = nullptr;
    j["loss_curve"] = rep.loss_curve;
    j["config"] = json::parse(serialize_config(cfg));
    return j.dump(2);
}

std::map<std::string, MetricsReport> run_experiment(const ExperimentConfig& cfg) {
    cfg.validate();
    namespace fs = std::filesystem;
    const fs::path out(cfg.output_dir);
    fs::create_directories(out / "data");
    fs::create_directories(out / "checkpoints");
    fs::create_directories(out / "reports");

    const ArchSpec arch = cfg.arch_spec();
    const int k = cfg.data.num_classes;

    // Benign splits; the clean split is freshly generated and disjoint.
    const int train_total = cfg.data.train_per_class * k;
    const int clean_per_class = std::max(
        1, static_cast<int>(std::llround(cfg.defense.clean_ratio * train_total / k)));

    Dataset train = run_stage("gen-data", [&] {
        Rng rng(stage_seed(cfg.seed, "gen-train"));
        return gen_synthetic(k, cfg.data.train_per_class, cfg.data.channels, cfg.data.side, rng);
    });
    Dataset test = run_stage("gen-data", [&] {
        Rng rng(stage_seed(cfg.seed, "gen-test"));
        return gen_synthetic(k, cfg.data.test_per_class, cfg.data.channels, cfg.data.side, rng);
    });
    Dataset clean = run_stage("gen-data", [&] {
        Rng rng(stage_seed(cfg.seed, "gen-clean"));
        return gen_synthetic(k, clean_per_class, cfg.data.channels, cfg.data.side, rng);
    });

    Dataset d1 = run_stage("poison", [&] {
        Rng rng(stage_seed(cfg.seed, "poison"));
        return cfg.poison.mode == PoisonMode::poisoned_label
                   ? poison_poisoned_label(train, cfg.trigger, cfg.poison.gamma, rng)
                   : poison_clean_label(train, cfg.trigger, cfg.poison.frac_of_target, rng);
    });
    Dataset poisoned_test =
        run_stage("poison", [&] { return build_poisoned_testset(test, cfg.trigger); });

    run_stage("write-data", [&] {
        write_idx(train, (out / "data" / "train").string());
        write_idx(test, (out / "data" / "test").string());
        write_idx(clean, (out / "data" / "clean").string());
        write_idx(d1, (out / "data" / "train_poisoned").string());
        write_idx(poisoned_test, (out / "data" / "test_poisoned").string());
        return 0;
    });

    const std::vector<int> ks{1, 2};
    std::map<std::string, MetricsReport> reports;

    TrainConfig tt_cfg = cfg.train_tt;
    tt_cfg.seed = stage_seed(cfg.seed, "tt");
    Dataset tt_train = d1, tt_val;
    if (tt_cfg.early_stop_patience) {
        run_stage("val-split", [&] {
            split_validation(d1, cfg.val_fraction, stage_seed(cfg.seed, "val-split"), tt_train,
                             tt_val);
            return 0;
        });
    }
    TrainResult tt = run_stage("tt", [&] { return train_tt(arch, tt_train, tt_val, tt_cfg); });
    MetricsReport tt_rep = run_stage(
        "eval-tt", [&] { return evaluate(tt.model, test, poisoned_test, cfg.trigger.target_class, ks); });
    tt_rep.loss_curve = tt.loss_curve;
    reports["tt"] = tt_rep;

    TrainConfig nt_cfg = cfg.train_nt;
    nt_cfg.seed = stage_seed(cfg.seed, "nt");
    SoftDataset d2 = run_stage("nt", [&] { return build_soft_dataset(tt.model, d1); });
    TrainResult nt = run_stage("nt", [&] { return train_nt(arch, d2, nt_cfg); });
    MetricsReport nt_rep = run_stage(
        "eval-nt", [&] { return evaluate(nt.model, test, poisoned_test, cfg.trigger.target_class, ks); });
    nt_rep.loss_curve = nt.loss_curve;
    nt_rep.der = der(tt_rep.asr, nt_rep.asr, tt_rep.ba, nt_rep.ba);
    reports["nt"] = nt_rep;

    TrainConfig ml_cfg = cfg.train_ml;
    ml_cfg.seed = stage_seed(cfg.seed, "ml");
    MlResult ml = run_stage("ml", [&] {
        return mutual_learning(tt.model, nt.model, clean, cfg.defense.alpha, cfg.defense.beta,
                               cfg.defense.temperature, ml_cfg, MlStructure::ml,
                               cfg.defense.kl_temperature_compensation);
    });
    MetricsReport mls_rep = run_stage("eval-ml", [&] {
        return evaluate(ml.student, test, poisoned_test, cfg.trigger.target_class, ks);
    });
    mls_rep.loss_curve = ml.student_loss_curve;
    mls_rep.der = der(tt_rep.asr, mls_rep.asr, tt_rep.ba, mls_rep.ba);
    reports["ml-student"] = mls_rep;

    MetricsReport mlt_rep = run_stage("eval-ml", [&] {
        return evaluate(ml.teacher, test, poisoned_test, cfg.trigger.target_class, ks);
    });
    mlt_rep.loss_curve = ml.teacher_loss_curve;
    mlt_rep.der = der(tt_rep.asr, mlt_rep.asr, tt_rep.ba, mlt_rep.ba);
    reports["ml-teacher"] = mlt_rep;

    run_stage("write-checkpoints", [&] {
        save_checkpoint(tt.model, (out / "checkpoints" / "tt.ckpt").string());
        save_checkpoint(nt.model, (out / "checkpoints" / "nt.ckpt").string());
        save_checkpoint(ml.teacher, (out / "checkpoints" / "ml-teacher.ckpt").string());
        save_checkpoint(ml.student, (out / "checkpoints" / "ml-student.ckpt").string());
        return 0;
    });

    if (cfg.run_ft) {
        TrainConfig ft_cfg = cfg.train_ft;
        ft_cfg.seed = stage_seed(cfg.seed, "ft");
        TrainResult ft = run_stage("ft", [&] { return fine_tune(tt.model, clean, ft_cfg); });
        MetricsReport ft_rep = run_stage("eval-ft", [&] {
            return evaluate(ft.model, test, poisoned_test, cfg.trigger.target_class, ks);
        });
        ft_rep.loss_curve = ft.loss_curve;
        ft_rep.der = der(tt_rep.asr, ft_rep.asr, tt_rep.ba, ft_rep.ba);
        reports["ft"] = ft_rep;
        run_stage("write-checkpoints",
                  [&] { save_checkpoint(ft.model, (out / "checkpoints" / "ft.ckpt").string()); return 0; });
    }

    run_stage("write-reports", [&] {
        for (const auto& [stage, rep] : reports)
            write_text((out / "reports" / (stage + ".json")).string(),
                       report_to_json(rep, stage, cfg));
        return 0;
    });
    return reports;
}

SweepResult sweep(const ExperimentConfig& cfg, const SweepSpec& spec) {
    cfg.validate();
    spec.validate();
    namespace fs = std::filesystem;
    const fs::path out(cfg.output_dir);

    const fs::path tt_path = out / "checkpoints" / "tt.ckpt";
    const fs::path nt_path = out / "checkpoints" / "nt.ckpt";
    if (!fs::exists(tt_path) || !fs::exists(nt_path))
        throw UsageError("sweep: frozen tt/nt checkpoints missing under " + out.string());
    ModelCheckpoint tt = load_checkpoint(tt_path.string());
    ModelCheckpoint nt = load_checkpoint(nt_path.string());

    Dataset clean, test, poisoned_test;
    try {
        clean = read_idx((out / "data" / "clean").string());
        test = read_idx((out / "data" / "test").string());
        poisoned_test = read_idx((out / "data" / "test_poisoned").string());
    } catch (const IoError& e) {
        throw UsageError(std::string("sweep: experiment datasets missing: ") + e.what());
    }

    const std::vector<int> ks{1};
    const MetricsReport before =
        evaluate(tt, test, poisoned_test, cfg.trigger.target_class, ks);

    std::vector<std::pair<double, double>> points;
    if (spec.strategy == SweepStrategy::grid) {
        for (double a : spec.alpha_values)
            for (double b : spec.beta_values) points.emplace_back(a, b);
    } else {
        Rng rng(stage_seed(cfg.seed, "sweep-draw"));
        for (int i = 0; i < spec.trials; ++i)
            points.emplace_back(rng.uniform(spec.alpha_range.first, spec.alpha_range.second),
                                rng.uniform(spec.beta_range.first, spec.beta_range.second));
    }

    SweepResult result;
    for (std::size_t i = 0; i < points.size(); ++i) {
        TrainConfig ml_cfg = cfg.train_ml;
        ml_cfg.seed = trial_seed(cfg.seed, static_cast<int>(i));
        MlResult ml = mutual_learning(tt, nt, clean, points[i].first, points[i].second,
                                      cfg.defense.temperature, ml_cfg, MlStructure::ml,
                                      cfg.defense.kl_temperature_compensation);
        const MetricsReport after =
            evaluate(ml.student, test, poisoned_test, cfg.trigger.target_class, ks);
        SweepTrial trial;
        trial.trial = static_cast<int>(i);
        trial.alpha = points[i].first;
        trial.beta = points[i].second;
        trial.asr = after.asr;
        trial.ba = after.ba;
        trial.pa = after.pa;
        trial.der = der(before.asr, after.asr, before.ba, after.ba);
        result.trials.push_back(trial);
    }

    result.best = result.trials.front();
    for (const auto& t : result.trials)
        if (t.der > result.best.der) result.best = t;

    fs::create_directories(out / "sweep");
    std::ostringstream csv;
    csv << "trial,alpha,beta,asr,ba,pa,der\n";
    char buf[32];
    auto put = [&](double v) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        csv << buf;
    };
    for (const auto& t : result.trials) {
        csv << t.trial << ",";
        put(t.alpha); csv << ",";
        put(t.beta); csv << ",";
        put(t.asr); csv << ",";
        put(t.ba); csv << ",";
        put(t.pa); csv << ",";
        put(t.der); csv << "\n";
    }
    write_text((out / "sweep" / "trials.csv").string(), csv.str());

    json best{{"trial", result.best.trial}, {"alpha", result.best.alpha},
              {"beta", result.best.beta},   {"asr", result.best.asr},
              {"ba", result.best.ba},       {"pa", result.best.pa},
              {"der", result.best.der}};
    write_text((out / "sweep" / "best.json").string(), best.dump(2));
    return result;
}

}  // namespace ntml
