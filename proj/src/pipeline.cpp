#include "ntml/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>

#include "ntml/error.hpp"

namespace ntml {

void TrainConfig::validate() const {
    if (epochs < 0) throw ConfigError("train: epochs must be nonnegative");
    if (batch_size < 1) throw ConfigError("train: batch_size must be positive");
    if (!(lr > 0.0)) throw ConfigError("train: lr must be positive");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("train: momentum must lie in [0,1)");
    if (early_stop_patience && *early_stop_patience < 1)
        throw ConfigError("train: patience must be positive when set");
}

namespace {

// Seed-stream tags so init, shuffling and stage variants never share a stream.
constexpr std::uint64_t kTagInit = 0x1a17;
constexpr std::uint64_t kTagShuffle = 0x5a5f;

Tensor batch_images(const Dataset& ds, const std::vector<std::size_t>& order, std::size_t begin,
                    std::size_t end) {
    const std::size_t bytes = ds.sample_bytes();
    std::vector<double> vals((end - begin) * bytes);
    for (std::size_t b = begin; b < end; ++b) {
        const std::uint8_t* src = ds.sample(order[b]);
        double* dst = vals.data() + (b - begin) * bytes;
        for (std::size_t i = 0; i < bytes; ++i) dst[i] = src[i] / 255.0;
    }
    return Tensor::from_data({end - begin, static_cast<std::size_t>(ds.channels),
                              static_cast<std::size_t>(ds.side),
                              static_cast<std::size_t>(ds.side)},
                             std::move(vals));
}

struct Sgd {
    double lr;
    double momentum;
    std::vector<std::vector<double>> velocity;

    void step(std::vector<Tensor*>& params) {
        if (velocity.empty()) {
            velocity.resize(params.size());
            for (std::size_t i = 0; i < params.size(); ++i)
                velocity[i].assign(params[i]->numel(), 0.0);
        }
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& v = velocity[i];
            auto& data = params[i]->mutable_values();
            const auto& g = params[i]->grad();
            if (g.size() != data.size()) continue;  // parameter untouched by this loss
            for (std::size_t j = 0; j < data.size(); ++j) {
                v[j] = momentum * v[j] + g[j];
                data[j] -= lr * v[j];
            }
        }
    }
};

std::vector<int> gather_labels(const Dataset& ds, const std::vector<std::size_t>& order,
                               std::size_t begin, std::size_t end) {
    std::vector<int> out;
    out.reserve(end - begin);
    for (std::size_t b = begin; b < end; ++b) out.push_back(ds.labels[order[b]]);
    return out;
}

struct EvalStats {
    double accuracy = 0.0;
    double ce_loss = 0.0;
};

EvalStats eval_stats(const ModelParams& params, const Dataset& ds) {
    EvalStats st;
    if (ds.size() == 0) return st;
    std::vector<std::size_t> order(ds.size());
    std::iota(order.begin(), order.end(), 0);
    std::size_t hits = 0;
    const std::size_t chunk = 64;
    for (std::size_t begin = 0; begin < ds.size(); begin += chunk) {
        const std::size_t end = std::min(ds.size(), begin + chunk);
        auto fwd = forward_with_taps(params, batch_images(ds, order, begin, end));
        const std::size_t k = fwd.logits.dim(1);
        st.ce_loss += cross_entropy_batch(fwd.logits, gather_labels(ds, order, begin, end)).item() *
                      static_cast<double>(end - begin);
        for (std::size_t r = 0; r < end - begin; ++r) {
            const double* z = fwd.logits.values().data() + r * k;
            std::size_t best = 0;
            for (std::size_t i = 1; i < k; ++i)
                if (z[i] > z[best]) best = i;
            if (static_cast<int>(best) == ds.labels[order[begin + r]]) ++hits;
        }
    }
    st.accuracy = static_cast<double>(hits) / static_cast<double>(ds.size());
    st.ce_loss /= static_cast<double>(ds.size());
    return st;
}

double accuracy_on(const ModelParams& params, const Dataset& ds) {
    return eval_stats(params, ds).accuracy;
}

void check_finite_loss(double v, const char* stage) {
    if (!std::isfinite(v))
        throw TrainingError(std::string(stage) + ": loss diverged to a non-finite value");
}

}  // namespace

TrainResult train_tt(const ArchSpec& arch, const Dataset& d1, const Dataset& val,
                     const TrainConfig& cfg) {
    cfg.validate();
    arch.validate();
    if (d1.size() == 0) throw UsageError("train_tt: empty training set");

    Rng rng_init = Rng::derive(cfg.seed, kTagInit);
    ModelCheckpoint ckpt = init_model(arch, rng_init);
    ckpt.seed = cfg.seed;
    ckpt.stage = Stage::tt;
    TrainResult result{ckpt, {}};
    if (cfg.epochs == 0) return result;

    ModelParams params = ModelParams::from_checkpoint(ckpt, true);
    auto plist = params.all();
    Sgd sgd{cfg.lr, cfg.momentum, {}};
    Rng rng_shuffle = Rng::derive(cfg.seed, kTagShuffle);
    std::vector<std::size_t> order(d1.size());
    std::iota(order.begin(), order.end(), 0);

    const bool use_early_stop = cfg.early_stop_patience.has_value() && val.size() > 0;
    double best_acc = -1.0;
    double best_loss = std::numeric_limits<double>::infinity();
    std::vector<double> best_params;
    std::uint32_t best_epoch = 0;
    int stall = 0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng_shuffle.shuffle(order);
        double epoch_loss = 0.0;
        for (std::size_t begin = 0; begin < d1.size();
             begin += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end =
                std::min(d1.size(), begin + static_cast<std::size_t>(cfg.batch_size));
            auto fwd = forward_with_taps(params, batch_images(d1, order, begin, end));
            Tensor loss = cross_entropy_batch(fwd.logits, gather_labels(d1, order, begin, end));
            check_finite_loss(loss.item(), "train_tt");
            epoch_loss += loss.item() * static_cast<double>(end - begin);
            backward(loss);
            sgd.step(plist);
        }
        result.loss_curve.push_back(epoch_loss / static_cast<double>(d1.size()));

        if (use_early_stop) {
            // Validation-accuracy ties are broken by validation loss, so a
            // run keeps improving within an accuracy plateau.
            const EvalStats st = eval_stats(params, val);
            const bool improved =
                st.accuracy > best_acc ||
                (st.accuracy == best_acc && st.ce_loss < best_loss - 1e-12);
            if (improved) {
                best_acc = st.accuracy;
                best_loss = st.ce_loss;
                best_params = params.to_flat();
                best_epoch = static_cast<std::uint32_t>(epoch + 1);
                stall = 0;
            } else if (++stall >= *cfg.early_stop_patience) {
                break;
            }
        }
    }

    if (use_early_stop && !best_params.empty()) {
        result.model.params = std::move(best_params);
        result.model.epoch = best_epoch;
    } else {
        result.model.params = params.to_flat();
        result.model.epoch = static_cast<std::uint32_t>(cfg.epochs);
    }
    return result;
}

SoftDataset build_soft_dataset(const ModelCheckpoint& f_tt, const Dataset& d1) {
    if (d1.size() == 0) throw UsageError("build_soft_dataset: empty dataset");
    SoftDataset soft;
    soft.base = d1;
    soft.num_classes = f_tt.arch.num_classes;
    soft.logits.resize(d1.size() * soft.num_classes);

    ModelParams params = ModelParams::from_checkpoint(f_tt, false);
    std::vector<std::size_t> order(d1.size());
    std::iota(order.begin(), order.end(), 0);
    const std::size_t chunk = 64;
    for (std::size_t begin = 0; begin < d1.size(); begin += chunk) {
        const std::size_t end = std::min(d1.size(), begin + chunk);
        auto fwd = forward_with_taps(params, batch_images(d1, order, begin, end));
        std::copy(fwd.logits.values().begin(), fwd.logits.values().end(),
                  soft.logits.begin() + begin * soft.num_classes);
    }
    return soft;
}

TrainResult train_nt(const ArchSpec& arch, const SoftDataset& d2, const TrainConfig& cfg) {
    cfg.validate();
    arch.validate();
    if (d2.size() == 0) throw UsageError("train_nt: empty soft dataset");
    if (d2.num_classes != arch.num_classes)
        throw UsageError("train_nt: soft dataset class count does not match architecture");

    Rng rng_init = Rng::derive(cfg.seed, kTagInit);
    ModelCheckpoint ckpt = init_model(arch, rng_init);
    ckpt.seed = cfg.seed;
    ckpt.stage = Stage::nt;
    TrainResult result{ckpt, {}};
    if (cfg.epochs == 0) return result;

    ModelParams params = ModelParams::from_checkpoint(ckpt, true);
    auto plist = params.all();
    Sgd sgd{cfg.lr, cfg.momentum, {}};
    Rng rng_shuffle = Rng::derive(cfg.seed, kTagShuffle);
    std::vector<std::size_t> order(d2.size());
    std::iota(order.begin(), order.end(), 0);
    const std::size_t k = static_cast<std::size_t>(d2.num_classes);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng_shuffle.shuffle(order);
        double epoch_loss = 0.0;
        for (std::size_t begin = 0; begin < d2.size();
             begin += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end =
                std::min(d2.size(), begin + static_cast<std::size_t>(cfg.batch_size));
            auto fwd = forward_with_taps(params, batch_images(d2.base, order, begin, end));
            std::vector<double> teacher((end - begin) * k);
            for (std::size_t b = begin; b < end; ++b)
                std::copy(d2.logits.begin() + order[b] * k, d2.logits.begin() + (order[b] + 1) * k,
                          teacher.begin() + (b - begin) * k);
            Tensor loss =
                nt_loss_batch(fwd.logits, teacher, gather_labels(d2.base, order, begin, end));
            check_finite_loss(loss.item(), "train_nt");
            epoch_loss += loss.item() * static_cast<double>(end - begin);
            backward(loss);
            sgd.step(plist);
        }
        result.loss_curve.push_back(epoch_loss / static_cast<double>(d2.size()));
    }
    result.model.params = params.to_flat();
    result.model.epoch = static_cast<std::uint32_t>(cfg.epochs);
    return result;
}

MlResult mutual_learning(const ModelCheckpoint& f_tt, const ModelCheckpoint& f_nt,
                         const Dataset& clean, double alpha, double beta, double temperature,
                         const TrainConfig& cfg, MlStructure structure, bool kl_t2_scale) {
    cfg.validate();
    if (clean.size() == 0) throw UsageError("mutual_learning: empty clean set");
    for (std::uint8_t f : clean.poisoned)
        if (f) throw UsageError("mutual_learning: clean set contains poisoned samples");
    if (!(f_tt.arch == f_nt.arch))
        throw UsageError("mutual_learning: teacher and student architectures differ");
    if (alpha < 0.0 || alpha > 1.0) throw ConfigError("mutual_learning: alpha must lie in [0,1]");
    if (beta < 0.0) throw ConfigError("mutual_learning: beta must be nonnegative");
    if (!(temperature > 0.0))
        throw ConfigError("mutual_learning: temperature must be positive");

    MlResult result;
    result.teacher = f_tt;
    result.teacher.stage = Stage::ml_teacher;
    result.teacher.seed = cfg.seed;
    result.student = f_nt;
    result.student.stage = Stage::ml_student;
    result.student.seed = cfg.seed;
    if (cfg.epochs == 0) return result;

    ModelParams teacher = ModelParams::from_checkpoint(f_tt, true);
    ModelParams student = ModelParams::from_checkpoint(f_nt, true);
    auto tlist = teacher.all();
    auto slist = student.all();
    Sgd tsgd{cfg.lr, cfg.momentum, {}};
    Sgd ssgd{cfg.lr, cfg.momentum, {}};
    Rng rng_shuffle = Rng::derive(cfg.seed, kTagShuffle);
    std::vector<std::size_t> order(clean.size());
    std::iota(order.begin(), order.end(), 0);
    const std::size_t n_conv_taps = f_tt.arch.conv_filters.size();

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng_shuffle.shuffle(order);
        double t_epoch = 0.0, s_epoch = 0.0;
        for (std::size_t begin = 0; begin < clean.size();
             begin += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end =
                std::min(clean.size(), begin + static_cast<std::size_t>(cfg.batch_size));
            Tensor x = batch_images(clean, order, begin, end);
            auto labels = gather_labels(clean, order, begin, end);

            // Both forwards happen before either step, so each loss sees the
            // other network's pre-step outputs.
            auto tfwd = forward_with_taps(teacher, x);
            auto sfwd = forward_with_taps(student, x);

            Tensor student_loss = ml_student_loss_batch(
                sfwd.logits, tfwd.logits.values(), labels, alpha, temperature, kl_t2_scale);
            std::vector<Tensor> t_taps(tfwd.taps.begin(), tfwd.taps.begin() + n_conv_taps);
            std::vector<Tensor> s_taps(sfwd.taps.begin(), sfwd.taps.begin() + n_conv_taps);
            Tensor teacher_loss =
                ml_teacher_loss_batch(t_taps, s_taps, tfwd.logits, labels, beta);

            check_finite_loss(student_loss.item(), "mutual_learning");
            check_finite_loss(teacher_loss.item(), "mutual_learning");
            s_epoch += student_loss.item() * static_cast<double>(end - begin);
            t_epoch += teacher_loss.item() * static_cast<double>(end - begin);

            if (structure != MlStructure::st) {
                backward(student_loss);
                ssgd.step(slist);
            }
            if (structure != MlStructure::ts) {
                backward(teacher_loss);
                tsgd.step(tlist);
            }
        }
        result.student_loss_curve.push_back(s_epoch / static_cast<double>(clean.size()));
        result.teacher_loss_curve.push_back(t_epoch / static_cast<double>(clean.size()));
    }

    result.teacher.params = teacher.to_flat();
    result.teacher.epoch = static_cast<std::uint32_t>(cfg.epochs);
    result.student.params = student.to_flat();
    result.student.epoch = static_cast<std::uint32_t>(cfg.epochs);
    return result;
}

TrainResult fine_tune(const ModelCheckpoint& f, const Dataset& clean, const TrainConfig& cfg) {
    cfg.validate();
    if (clean.size() == 0) throw UsageError("fine_tune: empty clean set");
    for (std::uint8_t flag : clean.poisoned)
        if (flag) throw UsageError("fine_tune: clean set contains poisoned samples");

    TrainResult result{f, {}};
    result.model.stage = Stage::ft;
    result.model.seed = cfg.seed;
    if (cfg.epochs == 0) return result;

    ModelParams params = ModelParams::from_checkpoint(f, true);
    auto plist = params.all();
    Sgd sgd{cfg.lr, cfg.momentum, {}};
    Rng rng_shuffle = Rng::derive(cfg.seed, kTagShuffle);
    std::vector<std::size_t> order(clean.size());
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng_shuffle.shuffle(order);
        double epoch_loss = 0.0;
        for (std::size_t begin = 0; begin < clean.size();
             begin += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end =
                std::min(clean.size(), begin + static_cast<std::size_t>(cfg.batch_size));
            auto fwd = forward_with_taps(params, batch_images(clean, order, begin, end));
            Tensor loss =
                cross_entropy_batch(fwd.logits, gather_labels(clean, order, begin, end));
            check_finite_loss(loss.item(), "fine_tune");
            epoch_loss += loss.item() * static_cast<double>(end - begin);
            backward(loss);
            sgd.step(plist);
        }
        result.loss_curve.push_back(epoch_loss / static_cast<double>(clean.size()));
    }
    result.model.params = params.to_flat();
    result.model.epoch = f.epoch + static_cast<std::uint32_t>(cfg.epochs);
    return result;
}

MetricsReport evaluate(const ModelCheckpoint& model, const Dataset& benign_test,
                       const Dataset& poisoned_test, int target_class,
                       const std::vector<int>& ks) {
    if (benign_test.size() == 0 || poisoned_test.size() == 0)
        throw UsageError("evaluate: empty test set");
    for (std::uint8_t f : benign_test.poisoned)
        if (f) throw UsageError("evaluate: benign test set contains poisoned samples");
    for (std::size_t i = 0; i < poisoned_test.size(); ++i) {
        if (!poisoned_test.poisoned[i] || poisoned_test.original_labels[i] == target_class)
            throw UsageError("evaluate: poisoned test set was not built by build_poisoned_testset");
    }
    const int k_classes = model.arch.num_classes;
    for (int k : ks)
        if (k < 1 || k > k_classes) throw UsageError("evaluate: top-k out of range");

    MetricsReport rep;
    ModelParams params = ModelParams::from_checkpoint(model, false);

    // Benign accuracy.
    {
        std::vector<std::size_t> order(benign_test.size());
        std::iota(order.begin(), order.end(), 0);
        std::size_t hits = 0;
        const std::size_t chunk = 64;
        for (std::size_t begin = 0; begin < benign_test.size(); begin += chunk) {
            const std::size_t end = std::min(benign_test.size(), begin + chunk);
            auto fwd = forward_with_taps(params, batch_images(benign_test, order, begin, end));
            for (std::size_t r = 0; r < end - begin; ++r) {
                const double* z = fwd.logits.values().data() + r * k_classes;
                int best = 0;
                for (int i = 1; i < k_classes; ++i)
                    if (z[i] > z[best]) best = i;
                if (best == benign_test.labels[order[begin + r]]) ++hits;
            }
        }
        rep.ba = static_cast<double>(hits) / static_cast<double>(benign_test.size());
    }

    // ASR, PA and top-k on the poisoned set.
    {
        std::vector<std::size_t> order(poisoned_test.size());
        std::iota(order.begin(), order.end(), 0);
        std::size_t asr_hits = 0, pa_hits = 0;
        std::map<int, std::size_t> topk_hits;
        for (int k : ks) topk_hits[k] = 0;
        std::vector<int> rank(k_classes);
        const std::size_t chunk = 64;
        for (std::size_t begin = 0; begin < poisoned_test.size(); begin += chunk) {
            const std::size_t end = std::min(poisoned_test.size(), begin + chunk);
            auto fwd = forward_with_taps(params, batch_images(poisoned_test, order, begin, end));
            for (std::size_t r = 0; r < end - begin; ++r) {
                const double* z = fwd.logits.values().data() + r * k_classes;
                const int orig = poisoned_test.original_labels[order[begin + r]];
                std::iota(rank.begin(), rank.end(), 0);
                std::stable_sort(rank.begin(), rank.end(),
                                 [&](int a, int b) { return z[a] > z[b]; });
                if (rank[0] == target_class) ++asr_hits;
                if (rank[0] == orig) ++pa_hits;
                for (int k : ks) {
                    const auto it = std::find(rank.begin(), rank.begin() + k, orig);
                    if (it != rank.begin() + k) ++topk_hits[k];
                }
            }
        }
        const double n = static_cast<double>(poisoned_test.size());
        rep.asr = static_cast<double>(asr_hits) / n;
        rep.pa = static_cast<double>(pa_hits) / n;
        for (int k : ks) rep.topk[k] = static_cast<double>(topk_hits[k]) / n;
    }
    return rep;
}

void export_penultimate_features(const ModelCheckpoint& model, const Dataset& ds,
                                 const std::string& path) {
    if (ds.size() == 0) throw UsageError("export_features: empty dataset");
    std::ofstream os(path);
    if (!os) throw IoError("export_features: cannot open for writing: " + path);

    ModelParams params = ModelParams::from_checkpoint(model, false);
    const std::size_t width = static_cast<std::size_t>(model.arch.hidden_dense);
    for (std::size_t i = 0; i < width; ++i) os << "f" << i << ",";
    os << "label,original_label,poisoned\n";

    std::vector<std::size_t> order(ds.size());
    std::iota(order.begin(), order.end(), 0);
    char buf[40];
    const std::size_t chunk = 64;
    for (std::size_t begin = 0; begin < ds.size(); begin += chunk) {
        const std::size_t end = std::min(ds.size(), begin + chunk);
        auto fwd = forward_with_taps(params, batch_images(ds, order, begin, end));
        const Tensor& penult = fwd.taps.back();
        for (std::size_t r = 0; r < end - begin; ++r) {
            const std::size_t idx = begin + r;
            for (std::size_t c = 0; c < width; ++c) {
                std::snprintf(buf, sizeof buf, "%.9g", penult.values()[r * width + c]);
                os << buf << ",";
            }
            os << ds.labels[idx] << "," << ds.original_labels[idx] << ","
               << static_cast<int>(ds.poisoned[idx]) << "\n";
        }
    }
    if (!os) throw IoError("export_features: write failed: " + path);
}

double dataset_accuracy(const ModelCheckpoint& model, const Dataset& ds) {
    return accuracy_on(ModelParams::from_checkpoint(model, false), ds);
}

}  // namespace ntml
