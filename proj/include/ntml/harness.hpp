#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ntml/pipeline.hpp"
#include "ntml/trigger.hpp"

namespace ntml {

constexpr int kSchemaVersion = 1;

struct DataConfig {
    int num_classes = 4;
    int channels = 1;
    int side = 16;
    int train_per_class = 500;
    int test_per_class = 100;

    bool operator==(const DataConfig&) const = default;
};

struct ArchConfig {
    std::vector<int> conv_filters = {8, 16};
    int hidden_dense = 32;

    bool operator==(const ArchConfig&) const = default;
};

enum class PoisonMode { poisoned_label, clean_label };

struct PoisonConfig {
    PoisonMode mode = PoisonMode::poisoned_label;
    double gamma = 0.1;
    double frac_of_target = 0.8;

    bool operator==(const PoisonConfig&) const = default;
};

struct DefenseConfig {
    double alpha = 0.6;
    double beta = 2.0;
    double temperature = 2.0;
    double clean_ratio = 0.05;
    // Multiply the Eq-style KL term by T^2 (standard distillation practice);
    // off by default, the formula is used as written.
    bool kl_temperature_compensation = false;

    bool operator==(const DefenseConfig&) const = default;
};

struct ExperimentConfig {
    std::uint64_t seed = 0;
    DataConfig data;
    ArchConfig arch;
    TriggerSpec trigger;
    PoisonConfig poison;
    // TT stops early once validation accuracy stalls for 5 epochs; 30 is the
    // cap. The validation split is carved from the (poisoned) training pool.
    TrainConfig train_tt{30, 32, 0.01, 0.9, 0, 5};
    double val_fraction = 0.1;
    TrainConfig train_nt{20, 32, 0.01, 0.9, 0, std::nullopt};
    TrainConfig train_ml{20, 32, 0.02, 0.9, 0, std::nullopt};
    TrainConfig train_ft{20, 32, 0.005, 0.9, 0, std::nullopt};
    DefenseConfig defense;
    bool run_ft = false;
    std::string output_dir = "out";

    ArchSpec arch_spec() const;
    void validate() const;

    bool operator==(const ExperimentConfig&) const = default;
};

std::string serialize_config(const ExperimentConfig& cfg);
ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config_file(const std::string& path);

enum class SweepStrategy { grid, random };

struct SweepSpec {
    std::pair<double, double> alpha_range = {0.1, 0.9};
    std::pair<double, double> beta_range = {1.0, 5.0};
    SweepStrategy strategy = SweepStrategy::grid;
    int trials = 50;  // used by the random strategy
    // Grid points; the grid strategy evaluates the full cross product.
    std::vector<double> alpha_values = {0.2, 0.4, 0.6, 0.8};
    std::vector<double> beta_values = {1.0, 2.0, 3.0};

    void validate() const;
};

struct SweepTrial {
    int trial = 0;
    double alpha = 0.0;
    double beta = 0.0;
    double asr = 0.0;
    double ba = 0.0;
    double pa = 0.0;
    double der = 0.0;
};

struct SweepResult {
    std::vector<SweepTrial> trials;
    SweepTrial best;
};

// Seed stream for one pipeline stage of an experiment, derived from the
// config's master seed. Stage names: gen-train, gen-test, gen-clean, poison,
// tt, nt, ml, ft, sweep; trial streams add the trial index.
std::uint64_t stage_seed(std::uint64_t base_seed, const std::string& stage);
std::uint64_t trial_seed(std::uint64_t base_seed, int trial_index);

// Full pipeline: generate, poison, TT, D2, NT, ML (and optionally FT), with
// every artifact written under cfg.output_dir. Returns per-stage reports with
// DER filled in relative to the TT model.
std::map<std::string, MetricsReport> run_experiment(const ExperimentConfig& cfg);

// Re-runs the ML stage from the frozen TT/NT checkpoints under
// cfg.output_dir for each (alpha, beta) trial, maximizing DER. Persists the
// trial table as CSV under <output_dir>/sweep/.
SweepResult sweep(const ExperimentConfig& cfg, const SweepSpec& spec);

// Report JSON for one stage (metrics, loss curve, config echo).
std::string report_to_json(const MetricsReport& rep, const std::string& stage,
                           const ExperimentConfig& cfg);

}  // namespace ntml
