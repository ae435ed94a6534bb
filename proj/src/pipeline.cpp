#include "sonostack/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>
#include <thread>

#include "sonostack/errors.hpp"

namespace sonostack::pipeline {

namespace {

using models::Model;
using nn::Mode;
using nn::TensorPtr;

struct Prepared {
    std::vector<features::StackedTensor> tensors;
    std::vector<int> labels;
};

Prepared prepare_split(const Dataset& dataset, const std::vector<size_t>& indices,
                       const std::vector<features::FeatureKind>& kinds,
                       const features::FeatureConfig& fcfg, double seconds) {
    Prepared out;
    out.tensors.reserve(indices.size());
    out.labels.reserve(indices.size());
    for (size_t idx : indices) {
        out.tensors.push_back(prepare_features(dataset.items[idx], kinds, fcfg, seconds));
        out.labels.push_back(dataset.items[idx].label);
    }
    return out;
}

std::vector<size_t> fold_indices(const Dataset& dataset, const std::vector<int>& folds) {
    std::vector<size_t> out;
    for (size_t i = 0; i < dataset.items.size(); ++i) {
        if (std::find(folds.begin(), folds.end(), dataset.items[i].fold) != folds.end()) {
            out.push_back(i);
        }
    }
    return out;
}

// Population mean/std per channel over every pixel of the given tensors.
void compute_normalization(const std::vector<features::StackedTensor>& tensors,
                           std::vector<double>& mean, std::vector<double>& stddev) {
    if (tensors.empty()) throw PipelineError("normalization: empty training split");
    const int channels = tensors[0].channels;
    mean.assign(channels, 0.0);
    stddev.assign(channels, 0.0);
    std::vector<double> sumsq(channels, 0.0);
    int64_t count = 0;
    for (const auto& t : tensors) {
        for (size_t i = 0; i < t.data.size(); i += channels) {
            for (int c = 0; c < channels; ++c) {
                mean[c] += t.data[i + c];
                sumsq[c] += t.data[i + c] * t.data[i + c];
            }
        }
        count += static_cast<int64_t>(t.height) * t.width;
    }
    for (int c = 0; c < channels; ++c) {
        mean[c] /= static_cast<double>(count);
        const double var = sumsq[c] / static_cast<double>(count) - mean[c] * mean[c];
        stddev[c] = var > 1e-24 ? std::sqrt(var) : 1.0;
    }
}

void apply_normalization(features::StackedTensor& t, const std::vector<double>& mean,
                         const std::vector<double>& stddev) {
    for (size_t i = 0; i < t.data.size(); i += t.channels) {
        for (int c = 0; c < t.channels; ++c) t.data[i + c] = (t.data[i + c] - mean[c]) / stddev[c];
    }
    t.norm_mean = mean;
    t.norm_std = stddev;
    t.normalized = true;
}

int argmax_row(const float* row, int k) {
    int best = 0;
    for (int j = 1; j < k; ++j) {
        if (row[j] > row[best]) best = j; // ties resolve to the lowest index
    }
    return best;
}

struct PassStats {
    double loss_sum = 0.0; // summed over samples
    int64_t correct = 0;
    int64_t count = 0;

    double mean_loss() const { return count ? loss_sum / static_cast<double>(count) : 0.0; }
    double accuracy() const { return count ? static_cast<double>(correct) / count : 0.0; }
};

// Eval-mode loss/accuracy over a prepared split without touching any state.
PassStats evaluate_pass(Model<float>& model, const Prepared& split, int batch_size) {
    nn::NoGrad guard;
    PassStats stats;
    const size_t n = split.tensors.size();
    for (size_t start = 0; start < n; start += batch_size) {
        const size_t end = std::min(n, start + batch_size);
        std::vector<features::StackedTensor> batch(split.tensors.begin() + start,
                                                   split.tensors.begin() + end);
        std::vector<int> labels(split.labels.begin() + start, split.labels.begin() + end);
        auto logits = model.forward(batch_to_tensor(batch), Mode::eval);
        const int k = logits->shape[1];
        auto loss = nn::softmax_cross_entropy(logits, labels);
        stats.loss_sum += static_cast<double>(loss->v[0]) * static_cast<double>(labels.size());
        for (size_t i = 0; i < labels.size(); ++i) {
            if (argmax_row(logits->v.data() + i * k, k) == labels[i]) ++stats.correct;
        }
        stats.count += static_cast<int64_t>(labels.size());
    }
    return stats;
}

// A frozen body maps each input to a fixed penultimate vector, so
// last-layer training runs against features computed once. Gives the
// exact same updates and History as the uncached path.
std::vector<std::vector<float>> cache_penultimate(Model<float>& model, const Prepared& split,
                                                  int batch_size) {
    nn::NoGrad guard;
    std::vector<std::vector<float>> feats;
    feats.reserve(split.tensors.size());
    const size_t n = split.tensors.size();
    for (size_t start = 0; start < n; start += batch_size) {
        const size_t end = std::min(n, start + batch_size);
        std::vector<features::StackedTensor> batch(split.tensors.begin() + start,
                                                   split.tensors.begin() + end);
        auto out = model.penultimate(batch_to_tensor(batch), Mode::eval, nullptr);
        const int f = out->shape[1];
        for (size_t i = 0; i < end - start; ++i) {
            feats.emplace_back(out->v.begin() + static_cast<int64_t>(i) * f,
                               out->v.begin() + static_cast<int64_t>(i + 1) * f);
        }
    }
    return feats;
}

nn::TensorPtr<float> feats_to_tensor(const std::vector<std::vector<float>>& feats,
                                     const std::vector<size_t>& pick) {
    const int f = static_cast<int>(feats.front().size());
    auto x = nn::Tensor<float>::make({static_cast<int>(pick.size()), f});
    size_t pos = 0;
    for (size_t idx : pick) {
        std::copy(feats[idx].begin(), feats[idx].end(), x->v.begin() + pos);
        pos += f;
    }
    return x;
}

PassStats head_pass(Model<float>& model, const std::vector<std::vector<float>>& feats,
                    const std::vector<int>& labels, int batch_size) {
    nn::NoGrad guard;
    PassStats stats;
    const size_t n = feats.size();
    for (size_t start = 0; start < n; start += batch_size) {
        const size_t end = std::min(n, start + batch_size);
        std::vector<size_t> pick(end - start);
        std::iota(pick.begin(), pick.end(), start);
        auto logits = model.head().forward(feats_to_tensor(feats, pick));
        std::vector<int> batch_labels(labels.begin() + start, labels.begin() + end);
        auto loss = nn::softmax_cross_entropy(logits, batch_labels);
        const int k = logits->shape[1];
        stats.loss_sum += static_cast<double>(loss->v[0]) * static_cast<double>(batch_labels.size());
        for (size_t i = 0; i < batch_labels.size(); ++i) {
            if (argmax_row(logits->v.data() + i * k, k) == batch_labels[i]) ++stats.correct;
        }
        stats.count += static_cast<int64_t>(batch_labels.size());
    }
    return stats;
}

} // namespace

OptimizerKind optimizer_from_name(const std::string& name) {
    if (name == "adam") return OptimizerKind::adam;
    if (name == "adamw") return OptimizerKind::adamw;
    throw ConfigError("unknown optimizer " + name);
}

ScheduleKind schedule_from_name(const std::string& name) {
    if (name == "const" || name == "constant") return ScheduleKind::constant;
    if (name == "cosine") return ScheduleKind::cosine;
    throw ConfigError("unknown schedule " + name);
}

FreezePolicy freeze_from_name(const std::string& name) {
    if (name == "all" || name == "all_layers_trainable") return FreezePolicy::all_layers_trainable;
    if (name == "last" || name == "last_layer_only") return FreezePolicy::last_layer_only;
    if (name == "last_two" || name == "last_two_layers") return FreezePolicy::last_two_layers;
    throw ConfigError("unknown freeze policy " + name);
}

features::StackedTensor prepare_features(const DatasetItem& item,
                                         const std::vector<features::FeatureKind>& kinds,
                                         const features::FeatureConfig& fcfg, double seconds) {
    audio::AudioClip clip = load_clip(item);
    clip = audio::resample(clip, fcfg.sample_rate);
    clip = audio::fix_duration(clip, seconds);
    return features::extract_stack(clip, kinds, fcfg);
}

nn::TensorPtr<float> batch_to_tensor(const std::vector<features::StackedTensor>& batch) {
    if (batch.empty()) throw PipelineError("batch_to_tensor: empty batch");
    const int h = batch[0].height, w = batch[0].width, c = batch[0].channels;
    auto x = nn::Tensor<float>::make({static_cast<int>(batch.size()), h, w, c});
    size_t pos = 0;
    for (const auto& t : batch) {
        if (t.height != h || t.width != w || t.channels != c) {
            throw PipelineError("batch_to_tensor: inconsistent tensor shapes");
        }
        for (double v : t.data) x->v[pos++] = static_cast<float>(v);
    }
    return x;
}

History train(Model<float>& model, const Dataset& dataset, const std::vector<int>& folds_train,
              int fold_val, const TrainConfig& tcfg, const features::FeatureConfig& fcfg) {
    if (tcfg.epochs < 1 || tcfg.batch_size < 1) throw PipelineError("train: bad epoch/batch config");
    for (int f : folds_train) {
        if (f == fold_val) throw PipelineError("train: validation fold appears in training folds");
    }
    if (model.spec().n_classes != static_cast<int>(dataset.labels.size())) {
        throw PipelineError("train: model class count does not match dataset");
    }

    const auto kinds = features::config_from_name(tcfg.feature_config);
    const auto train_idx = fold_indices(dataset, folds_train);
    const auto val_idx = fold_indices(dataset, {fold_val});
    if (train_idx.empty()) throw PipelineError("train: empty training split");

    auto train_split = prepare_split(dataset, train_idx, kinds, fcfg, tcfg.clip_seconds);
    auto val_split = prepare_split(dataset, val_idx, kinds, fcfg, tcfg.clip_seconds);

    std::vector<double> mean, stddev;
    compute_normalization(train_split.tensors, mean, stddev);
    for (auto& t : train_split.tensors) apply_normalization(t, mean, stddev);
    for (auto& t : val_split.tensors) apply_normalization(t, mean, stddev);

    model.norm_mean = mean;
    model.norm_std = stddev;
    model.labels = dataset.labels;
    model.provenance.dataset = origin_name(dataset.origin);
    model.provenance.feature_config = features::config_to_name(kinds);

    switch (tcfg.freeze) {
        case FreezePolicy::all_layers_trainable:
            model.set_body_trainable(true);
            break;
        case FreezePolicy::last_layer_only:
            model.set_body_trainable(false);
            break;
        case FreezePolicy::last_two_layers: {
            model.set_body_trainable(false);
            for (auto& p : model.named_params()) {
                if (p.name.rfind("fc.", 0) == 0 || p.name.rfind("ln_final.", 0) == 0) {
                    p.tensor->requires_grad = true;
                }
            }
            break;
        }
    }

    nn::AdamConfig opt_cfg;
    opt_cfg.lr = tcfg.learning_rate;
    opt_cfg.weight_decay = tcfg.optimizer == OptimizerKind::adamw ? tcfg.weight_decay : 0.0;
    nn::Adam<float> optimizer(model.param_tensors(), opt_cfg);

    const size_t n_train = train_split.tensors.size();
    const int batches_per_epoch = static_cast<int>((n_train + tcfg.batch_size - 1) / tcfg.batch_size);
    const int total_steps = tcfg.epochs * batches_per_epoch;

    nn::Rng dropout_rng(nn::Rng::derive(tcfg.seed, 0x6472u)); // one stream for all masks
    History history;
    int step = 0;

    // With everything outside the head frozen, the penultimate outputs are
    // constants: compute them once and train the head against the cache.
    // last_two_layers re-enables fc/ln_final, so it must take the slow path.
    bool any_body_trainable = false;
    for (const auto& p : model.named_params()) {
        if (p.name.rfind("head.", 0) != 0 && p.tensor->requires_grad) any_body_trainable = true;
    }
    const bool cached = model.body_frozen() && !any_body_trainable;
    std::vector<std::vector<float>> train_feats, val_feats;
    if (cached) {
        train_feats = cache_penultimate(model, train_split, tcfg.batch_size);
        val_feats = cache_penultimate(model, val_split, tcfg.batch_size);
    }

    for (int epoch = 1; epoch <= tcfg.epochs; ++epoch) {
        // per-epoch shuffle: run seed advanced by epoch index
        std::vector<size_t> order(n_train);
        std::iota(order.begin(), order.end(), size_t{0});
        nn::Rng shuffle_rng(nn::Rng::derive(tcfg.seed, static_cast<uint64_t>(epoch)));
        for (size_t i = n_train; i > 1; --i) {
            std::swap(order[i - 1], order[shuffle_rng.uniform_int(i)]);
        }

        for (size_t start = 0; start < n_train; start += tcfg.batch_size) {
            const size_t end = std::min(n_train, start + tcfg.batch_size);
            std::vector<size_t> pick(order.begin() + start, order.begin() + end);
            std::vector<int> labels;
            for (size_t i : pick) labels.push_back(train_split.labels[i]);

            if (tcfg.schedule == ScheduleKind::cosine) {
                optimizer.set_lr(nn::cosine_schedule(step, total_steps, tcfg.learning_rate));
            }
            nn::TensorPtr<float> logits;
            if (cached) {
                logits = model.head().forward(feats_to_tensor(train_feats, pick));
            } else {
                std::vector<features::StackedTensor> batch;
                for (size_t i : pick) batch.push_back(train_split.tensors[i]);
                logits = model.forward(batch_to_tensor(batch), Mode::train, &dropout_rng);
            }
            auto loss = nn::softmax_cross_entropy(logits, labels);
            nn::backward(loss);
            optimizer.step();
            ++step;
        }

        // end-of-epoch measurement: History describes the model state the
        // epoch actually produced, not mid-update snapshots
        const auto train_stats =
            cached ? head_pass(model, train_feats, train_split.labels, tcfg.batch_size)
                   : evaluate_pass(model, train_split, tcfg.batch_size);

        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = train_stats.mean_loss();
        rec.train_acc = train_stats.accuracy();
        if (!val_split.tensors.empty()) {
            const auto val_stats =
                cached ? head_pass(model, val_feats, val_split.labels, tcfg.batch_size)
                       : evaluate_pass(model, val_split, tcfg.batch_size);
            rec.val_loss = val_stats.mean_loss();
            rec.val_acc = val_stats.accuracy();
        }
        history.push_back(rec);
        model.provenance.epochs = epoch;

        if (tcfg.early_stop_train_acc > 0.0 && rec.train_acc >= tcfg.early_stop_train_acc) break;
    }
    return history;
}

FinetuneResult transfer_finetune(const std::string& checkpoint_path, const Dataset& new_dataset,
                                 TrainConfig tcfg, const features::FeatureConfig& fcfg) {
    auto model = models::load_checkpoint(checkpoint_path);

    const std::string stored = model->provenance.feature_config;
    if (!stored.empty()) {
        if (tcfg.feature_config.empty()) {
            tcfg.feature_config = stored;
        } else {
            const auto requested = features::config_from_name(tcfg.feature_config);
            if (features::config_to_name(requested) != stored) {
                throw ConfigError("finetune: feature configuration " + tcfg.feature_config +
                                  " conflicts with checkpoint (" + stored + ")");
            }
        }
    }

    nn::Rng rng(nn::Rng::derive(tcfg.seed, 0x68656164u));
    model->replace_head(static_cast<int>(new_dataset.labels.size()), rng);
    tcfg.freeze = FreezePolicy::last_layer_only;

    const int k = new_dataset.n_folds();
    const int fold_val = k; // last fold held out for validation
    FinetuneResult result;
    result.history =
        train(*model, new_dataset, all_folds_except(new_dataset, fold_val), fold_val, tcfg, fcfg);
    result.model = std::move(model);
    return result;
}

Metrics evaluate(Model<float>& model, const Dataset& dataset, const std::vector<int>& fold_set,
                 const features::FeatureConfig& fcfg, double clip_seconds) {
    const auto idx = fold_indices(dataset, fold_set);
    if (idx.empty()) throw PipelineError("evaluate: empty split");
    const auto kinds = features::config_from_name(model.provenance.feature_config.empty()
                                                      ? "LM"
                                                      : model.provenance.feature_config);
    auto split = prepare_split(dataset, idx, kinds, fcfg, clip_seconds);
    if (!model.norm_mean.empty()) {
        for (auto& t : split.tensors) apply_normalization(t, model.norm_mean, model.norm_std);
    }

    const int k = model.spec().n_classes;
    Metrics metrics;
    metrics.n_classes = k;
    metrics.confusion.assign(static_cast<size_t>(k) * k, 0);

    nn::NoGrad guard;
    constexpr size_t kBatch = 32;
    for (size_t start = 0; start < split.tensors.size(); start += kBatch) {
        const size_t end = std::min(split.tensors.size(), start + kBatch);
        std::vector<features::StackedTensor> batch(split.tensors.begin() + start,
                                                   split.tensors.begin() + end);
        auto logits = model.forward(batch_to_tensor(batch), Mode::eval);
        for (size_t i = start; i < end; ++i) {
            const int pred = argmax_row(logits->v.data() + (i - start) * k, k);
            ++metrics.confusion[static_cast<size_t>(split.labels[i]) * k + pred];
        }
    }

    int64_t correct = 0, total = 0;
    double prec_sum = 0.0, rec_sum = 0.0, f1_sum = 0.0;
    for (int c = 0; c < k; ++c) {
        const int64_t tp = metrics.confusion_at(c, c);
        int64_t fp = 0, fn = 0;
        for (int o = 0; o < k; ++o) {
            if (o == c) continue;
            fp += metrics.confusion_at(o, c);
            fn += metrics.confusion_at(c, o);
        }
        correct += tp;
        total += tp + fn;
        // zero-division counts as zero
        const double prec = tp + fp > 0 ? static_cast<double>(tp) / (tp + fp) : 0.0;
        const double rec = tp + fn > 0 ? static_cast<double>(tp) / (tp + fn) : 0.0;
        prec_sum += prec;
        rec_sum += rec;
        f1_sum += prec + rec > 0 ? 2.0 * prec * rec / (prec + rec) : 0.0;
    }
    metrics.accuracy = total ? static_cast<double>(correct) / total : 0.0;
    metrics.macro_precision = prec_sum / k;
    metrics.macro_recall = rec_sum / k;
    metrics.macro_f1 = f1_sum / k;
    return metrics;
}

std::vector<int> all_folds_except(const Dataset& dataset, int excluded) {
    std::vector<int> folds;
    for (int f = 1; f <= dataset.n_folds(); ++f) {
        if (f != excluded) folds.push_back(f);
    }
    return folds;
}

CrossValResult cross_validate(const models::ModelSpec& spec, const Dataset& dataset, int k,
                              const TrainConfig& tcfg, const features::FeatureConfig& fcfg,
                              int jobs) {
    if (k < 2) throw PipelineError("cross_validate: need k >= 2");
    if (dataset.n_folds() < k) throw PipelineError("cross_validate: dataset folds do not cover 1..k");

    CrossValResult result;
    result.per_fold.resize(k);
    result.histories.resize(k);
    std::vector<std::exception_ptr> errors(k);

    auto run_fold = [&](int fold) {
        try {
            TrainConfig fold_cfg = tcfg;
            fold_cfg.seed = nn::Rng::derive(tcfg.seed, static_cast<uint64_t>(fold));
            nn::Rng init_rng(fold_cfg.seed);
            auto model = models::build_model<float>(spec, init_rng);
            std::vector<int> train_folds;
            for (int f = 1; f <= k; ++f) {
                if (f != fold) train_folds.push_back(f);
            }
            result.histories[fold - 1] =
                train(*model, dataset, train_folds, fold, fold_cfg, fcfg);
            result.per_fold[fold - 1] =
                evaluate(*model, dataset, {fold}, fcfg, fold_cfg.clip_seconds);
        } catch (...) {
            errors[fold - 1] = std::current_exception();
        }
    };

    if (jobs <= 1) {
        for (int fold = 1; fold <= k; ++fold) run_fold(fold);
    } else {
        std::vector<std::thread> workers;
        std::atomic<int> next{1};
        const int n_workers = std::min(jobs, k);
        for (int w = 0; w < n_workers; ++w) {
            workers.emplace_back([&] {
                for (int fold = next.fetch_add(1); fold <= k; fold = next.fetch_add(1)) {
                    run_fold(fold);
                }
            });
        }
        for (auto& t : workers) t.join();
    }
    for (auto& err : errors) {
        if (err) std::rethrow_exception(err);
    }

    double sum = 0.0;
    for (const auto& m : result.per_fold) sum += m.accuracy;
    result.mean_accuracy = sum / k;
    return result;
}

BenchResult benchmark_inference(Model<float>& model, const features::StackedTensor& sample,
                                int iterations, int warmup) {
    if (iterations < 2) throw PipelineError("benchmark_inference: need at least 2 iterations");
    nn::NoGrad guard;
    auto input = batch_to_tensor({sample});

    for (int i = 0; i < warmup; ++i) model.forward(input, Mode::eval);

    std::vector<double> times_ms(iterations);
    for (int i = 0; i < iterations; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        auto out = model.forward(input, Mode::eval);
        const auto t1 = std::chrono::steady_clock::now();
        (void)out;
        times_ms[i] = std::chrono::duration<double, std::milli>(t1 - t0).count();
    }

    BenchResult result;
    result.iterations = iterations;
    for (double t : times_ms) result.mean_ms += t;
    result.mean_ms /= iterations;
    double ss = 0.0;
    for (double t : times_ms) ss += (t - result.mean_ms) * (t - result.mean_ms);
    result.std_ms = std::sqrt(ss / (iterations - 1));
    return result;
}

namespace {

std::string format_double(double v) {
    std::ostringstream out;
    out.precision(10);
    out << v;
    return out.str();
}

} // namespace

std::string history_csv(const History& history) {
    std::ostringstream out;
    out << "epoch,train_loss,train_acc,val_loss,val_acc\n";
    for (const auto& rec : history) {
        out << rec.epoch << ',' << format_double(rec.train_loss) << ','
            << format_double(rec.train_acc) << ',' << format_double(rec.val_loss) << ','
            << format_double(rec.val_acc) << '\n';
    }
    return out.str();
}

std::string crossval_csv(const std::string& model_name, const std::string& features_name,
                         const CrossValResult& result) {
    std::ostringstream out;
    out << "model,features";
    for (size_t i = 1; i <= result.per_fold.size(); ++i) out << ",fold_" << i;
    out << ",average_accuracy\n";
    out << model_name << ',' << features_name;
    for (const auto& m : result.per_fold) out << ',' << format_double(m.accuracy);
    out << ',' << format_double(result.mean_accuracy) << '\n';
    return out.str();
}

std::string metrics_csv(const Metrics& metrics) {
    std::ostringstream out;
    out << "accuracy,macro_precision,macro_recall,macro_f1\n";
    out << format_double(metrics.accuracy) << ',' << format_double(metrics.macro_precision) << ','
        << format_double(metrics.macro_recall) << ',' << format_double(metrics.macro_f1) << '\n';
    return out.str();
}

} // namespace sonostack::pipeline
