#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ntml/dataset.hpp"
#include "ntml/losses.hpp"
#include "ntml/model.hpp"

namespace ntml {

struct TrainConfig {
    int epochs = 30;
    int batch_size = 32;
    double lr = 0.01;
    double momentum = 0.9;
    std::uint64_t seed = 0;
    // Early stop on validation accuracy; disabled when unset.
    std::optional<int> early_stop_patience;

    void validate() const;

    bool operator==(const TrainConfig&) const = default;
};

struct MetricsReport {
    double asr = 0.0;
    double ba = 0.0;
    double pa = 0.0;
    std::map<int, double> topk;
    std::vector<double> loss_curve;
    std::optional<double> der;
};

// D2: the TT model's raw logits per training sample, alongside the images.
struct SoftDataset {
    Dataset base;
    int num_classes = 0;
    std::vector<double> logits;  // size() * num_classes, row-major

    std::size_t size() const { return base.size(); }
    SoftLabel record(std::size_t i) const {
        return {{logits.begin() + i * num_classes, logits.begin() + (i + 1) * num_classes},
                base.labels[i]};
    }
};

struct TrainResult {
    ModelCheckpoint model;
    std::vector<double> loss_curve;
};

// Teacher-student wiring of the purification stage. ml updates both networks
// per batch; ts freezes the teacher, st freezes the student (the updated
// teacher is the evaluated model in that variant).
enum class MlStructure { ml, ts, st };

struct MlResult {
    ModelCheckpoint teacher;  // tagged ml-teacher
    ModelCheckpoint student;  // tagged ml-student
    std::vector<double> teacher_loss_curve;
    std::vector<double> student_loss_curve;
};

// Target training: mini-batch SGD with momentum on cross-entropy. With a
// patience and a nonempty validation set, returns the best-validation
// checkpoint once accuracy stalls.
TrainResult train_tt(const ArchSpec& arch, const Dataset& d1, const Dataset& val,
                     const TrainConfig& cfg);

SoftDataset build_soft_dataset(const ModelCheckpoint& f_tt, const Dataset& d1);

// Non-target training of a freshly initialized model on the soft dataset.
TrainResult train_nt(const ArchSpec& arch, const SoftDataset& d2, const TrainConfig& cfg);

// One SGD step per network per shared batch, each against the other's
// pre-step detached outputs; clean must be fully benign.
MlResult mutual_learning(const ModelCheckpoint& f_tt, const ModelCheckpoint& f_nt,
                         const Dataset& clean, double alpha, double beta, double temperature,
                         const TrainConfig& cfg, MlStructure structure = MlStructure::ml,
                         bool kl_t2_scale = false);

// Plain cross-entropy fine-tuning on clean data (FT baseline).
TrainResult fine_tune(const ModelCheckpoint& f, const Dataset& clean, const TrainConfig& cfg);

// ASR/BA/PA and top-k accuracies; poisoned_test must come from
// build_poisoned_testset.
MetricsReport evaluate(const ModelCheckpoint& model, const Dataset& benign_test,
                       const Dataset& poisoned_test, int target_class,
                       const std::vector<int>& ks);

// CSV with one row per sample: penultimate activations, label,
// original_label, poisoned flag.
void export_penultimate_features(const ModelCheckpoint& model, const Dataset& ds,
                                 const std::string& path);

// Fraction of samples whose argmax logit matches the label.
double dataset_accuracy(const ModelCheckpoint& model, const Dataset& ds);

}  // namespace ntml
