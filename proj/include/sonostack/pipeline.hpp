#pragma once

#include <memory>
#include <string>
#include <vector>

#include "sonostack/checkpoint.hpp"
#include "sonostack/dataset.hpp"
#include "sonostack/features.hpp"
#include "sonostack/models.hpp"

namespace sonostack::pipeline {

enum class OptimizerKind { adam, adamw };
enum class ScheduleKind { constant, cosine };
enum class FreezePolicy { all_layers_trainable, last_layer_only, last_two_layers };

OptimizerKind optimizer_from_name(const std::string& name);
ScheduleKind schedule_from_name(const std::string& name);
FreezePolicy freeze_from_name(const std::string& name);

struct TrainConfig {
    int epochs = 150;
    int batch_size = 32;
    double learning_rate = 1e-3;
    OptimizerKind optimizer = OptimizerKind::adam;
    ScheduleKind schedule = ScheduleKind::constant;
    uint64_t seed = 42;
    std::string feature_config = "LM"; // '+'-separated extractor names
    FreezePolicy freeze = FreezePolicy::all_layers_trainable;
    double weight_decay = 1e-4; // adamw only
    double clip_seconds = 3.0;  // preprocessing duration target
    // When > 0, stop as soon as epoch train accuracy reaches this value;
    // History then ends at the stopping epoch.
    double early_stop_train_acc = 0.0;
};

struct Metrics {
    double accuracy = 0.0;
    double macro_precision = 0.0;
    double macro_recall = 0.0;
    double macro_f1 = 0.0;
    std::vector<int64_t> confusion; // [n_classes][n_classes], rows = true class
    int n_classes = 0;

    int64_t confusion_at(int truth, int predicted) const {
        return confusion[static_cast<size_t>(truth) * n_classes + predicted];
    }
};

struct EpochRecord {
    int epoch = 0; // 1-based
    double train_loss = 0.0;
    double train_acc = 0.0;
    double val_loss = 0.0;
    double val_acc = 0.0;
};

using History = std::vector<EpochRecord>;

// Preprocess one item (decode, resample, duration-fix) and extract the
// stacked feature tensor, unnormalized.
features::StackedTensor prepare_features(const DatasetItem& item,
                                         const std::vector<features::FeatureKind>& kinds,
                                         const features::FeatureConfig& fcfg, double seconds);

// Train in place on folds_train, validating each epoch on fold_val.
// Normalization statistics come from the training folds only and are
// stored on the model together with labels and provenance.
History train(models::Model<float>& model, const Dataset& dataset,
              const std::vector<int>& folds_train, int fold_val, const TrainConfig& tcfg,
              const features::FeatureConfig& fcfg);

// Load a checkpoint, swap the head for new_dataset's classes, freeze the
// body and train the head only (the stored feature configuration is
// reused; a conflicting request is a ConfigError).
struct FinetuneResult {
    std::unique_ptr<models::Model<float>> model;
    History history;
};
FinetuneResult transfer_finetune(const std::string& checkpoint_path, const Dataset& new_dataset,
                                 TrainConfig tcfg, const features::FeatureConfig& fcfg);

Metrics evaluate(models::Model<float>& model, const Dataset& dataset,
                 const std::vector<int>& fold_set, const features::FeatureConfig& fcfg,
                 double clip_seconds = 3.0);

struct CrossValResult {
    std::vector<Metrics> per_fold;  // fold 1..k
    std::vector<History> histories; // one per fold
    double mean_accuracy = 0.0;
};

// For each fold i in 1..k: train a fresh model on the other folds,
// evaluate on fold i. jobs > 1 runs folds in parallel with per-fold
// seeds derived from the run seed; results are identical for any jobs.
CrossValResult cross_validate(const models::ModelSpec& spec, const Dataset& dataset, int k,
                              const TrainConfig& tcfg, const features::FeatureConfig& fcfg,
                              int jobs = 1);

struct BenchResult {
    double mean_ms = 0.0;
    double std_ms = 0.0;
    int iterations = 0;
};

// Wall-clock per single-sample eval-mode forward pass: 5 untimed warm-up
// passes, then `iterations` timed ones; reports mean and sample standard
// deviation in milliseconds.
BenchResult benchmark_inference(models::Model<float>& model, const features::StackedTensor& sample,
                                int iterations = 50, int warmup = 5);

// CSV emission (stable formatting so seeded runs are byte-reproducible).
std::string history_csv(const History& history);
std::string crossval_csv(const std::string& model_name, const std::string& features_name,
                         const CrossValResult& result);
std::string metrics_csv(const Metrics& metrics);

// Helpers shared with tests and the CLI.
std::vector<int> all_folds_except(const Dataset& dataset, int excluded);
nn::TensorPtr<float> batch_to_tensor(const std::vector<features::StackedTensor>& batch);

} // namespace sonostack::pipeline
