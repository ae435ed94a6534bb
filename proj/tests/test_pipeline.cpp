#include "sonostack/pipeline.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "sonostack/errors.hpp"
#include "test_support.hpp"

using namespace sonostack;
using models::Architecture;
using models::ModelSpec;
using pipeline::Dataset;
using pipeline::FreezePolicy;
using pipeline::TrainConfig;

namespace {

ModelSpec cnn1_spec(int channels, int classes) {
    ModelSpec spec;
    spec.arch = Architecture::CNN1;
    spec.in_channels = channels;
    spec.n_classes = classes;
    return spec;
}

features::FeatureConfig fast_features() {
    features::FeatureConfig cfg;
    cfg.n_mels = 64;
    cfg.n_mfcc = 13;
    cfg.n_gtcc = 13;
    return cfg;
}

TrainConfig quick_train(uint64_t seed = 7) {
    TrainConfig cfg;
    cfg.epochs = 40;
    cfg.batch_size = 32;
    cfg.learning_rate = 1e-3;
    cfg.seed = seed;
    cfg.feature_config = "LM";
    cfg.early_stop_train_acc = 1.0;
    return cfg;
}

} // namespace

TEST_CASE("synth_dataset is reproducible bit for bit") {
    const auto a = pipeline::synth_dataset(2, 8, 7);
    const auto b = pipeline::synth_dataset(2, 8, 7);
    REQUIRE(a.items.size() == 16);
    REQUIRE(a.labels.size() == 2);
    CHECK(a.n_folds() == 4);
    for (size_t i = 0; i < a.items.size(); ++i) {
        CHECK(a.items[i].label == b.items[i].label);
        CHECK(a.items[i].fold == b.items[i].fold);
        CHECK(a.items[i].clip->samples == b.items[i].clip->samples);
    }

    const auto empty = pipeline::synth_dataset(2, 0, 7);
    CHECK(empty.items.empty());
}

TEST_CASE("synthetic classes occupy disjoint log-mel bands") {
    const auto ds = pipeline::synth_dataset(2, 4, 11);
    const auto cfg = fast_features();
    const auto bank = dsp::mel_filterbank(cfg.n_mels, cfg.n_fft, cfg.sample_rate, 20.0,
                                          cfg.sample_rate / 2.0);

    std::vector<std::vector<int>> argmax_rows(2);
    for (const auto& item : ds.items) {
        const auto lm = features::log_mel(*item.clip, cfg);
        std::vector<double> row_mean(lm.rows, 0.0);
        for (int m = 0; m < lm.rows; ++m) {
            for (int t = 0; t < lm.cols; ++t) row_mean[m] += lm.at(m, t);
        }
        argmax_rows[item.label].push_back(static_cast<int>(
            std::max_element(row_mean.begin(), row_mean.end()) - row_mean.begin()));
    }
    // oracle: the band whose center is nearest the generator frequency
    for (int cls = 0; cls < 2; ++cls) {
        const double freq = pipeline::synth_class_frequency(cls);
        int nearest = 0;
        for (int m = 1; m < bank.n_filters; ++m) {
            if (std::abs(bank.centers_hz[m] - freq) < std::abs(bank.centers_hz[nearest] - freq)) {
                nearest = m;
            }
        }
        for (int row : argmax_rows[cls]) CHECK(std::abs(row - nearest) <= 1);
    }
    for (int r0 : argmax_rows[0]) {
        for (int r1 : argmax_rows[1]) CHECK(r0 != r1);
    }
}

TEST_CASE("write_dataset and load_dataset round-trip the synthetic corpus") {
    test_support::TempDir dir("ds_roundtrip");
    const auto ds = pipeline::synth_dataset(2, 8, 3);
    pipeline::write_dataset(ds, dir.str());

    const auto loaded = pipeline::load_dataset(dir.str(), pipeline::DatasetOrigin::SYNTH);
    REQUIRE(loaded.items.size() == 16);
    CHECK(loaded.labels == std::vector<std::string>{"tone_0", "tone_1"});
    CHECK(loaded.n_folds() == 4);

    // decoded audio matches the generated audio to PCM16 resolution
    const auto original = *ds.items[0].clip;
    const auto decoded = pipeline::load_clip(loaded.items[0]);
    REQUIRE(decoded.samples.size() == original.samples.size());
    for (size_t i = 0; i < decoded.samples.size(); i += 997) {
        CHECK(std::abs(decoded.samples[i] - original.samples[i]) <= 1.0 / 32768.0);
    }
}

TEST_CASE("load_dataset reports the offending metadata row") {
    test_support::TempDir dir("ds_bad");
    pipeline::write_dataset(pipeline::synth_dataset(2, 4, 3), dir.str());

    // append a row that references a missing file (row 10: header + 8 items + 1)
    {
        std::ofstream meta(dir / "meta.csv", std::ios::app);
        meta << "missing.wav,1,0,tone_0\n";
    }
    CHECK_THROWS_WITH_AS(pipeline::load_dataset(dir.str(), pipeline::DatasetOrigin::SYNTH),
                         doctest::Contains("row 10"), DatasetError);
}

TEST_CASE("load_dataset rejects malformed numbers and bad folds") {
    test_support::TempDir dir("ds_bad2");
    pipeline::write_dataset(pipeline::synth_dataset(2, 2, 3), dir.str());
    {
        std::ofstream meta(dir / "meta.csv");
        meta << "filename,fold,target,category\nclip_0000.wav,abc,0,x\n";
    }
    CHECK_THROWS_AS(pipeline::load_dataset(dir.str(), pipeline::DatasetOrigin::SYNTH),
                    DatasetError);
    {
        std::ofstream meta(dir / "meta.csv");
        meta << "filename,fold,target,category\nclip_0000.wav,1,-2,x\n";
    }
    CHECK_THROWS_AS(pipeline::load_dataset(dir.str(), pipeline::DatasetOrigin::SYNTH),
                    DatasetError);
    {
        std::ofstream meta(dir / "meta.csv");
        meta << "filename,fold,target,category\nclip_0000.wav,9,0,x\n";
    }
    // synth corpora accept any positive fold
    CHECK_NOTHROW(pipeline::load_dataset(dir.str(), pipeline::DatasetOrigin::SYNTH));
    // but the ESC-50 layout caps folds at 5
    CHECK_THROWS_AS(pipeline::load_dataset(dir.str(), pipeline::DatasetOrigin::ESC50),
                    DatasetError);
}

TEST_CASE("esc50-style layouts resolve meta/esc50.csv and audio/") {
    test_support::TempDir dir("ds_esc50");
    const auto ds = pipeline::synth_dataset(2, 4, 13, 4);
    std::filesystem::create_directories(dir / "meta");
    std::filesystem::create_directories(dir / "audio");
    std::ofstream meta(dir / "meta" / "esc50.csv");
    meta << "filename,fold,target,category,esc10,src_file,take\n";
    for (size_t i = 0; i < ds.items.size(); ++i) {
        const auto& item = ds.items[i];
        const std::string name = "1-100032-A-" + std::to_string(i) + ".wav";
        audio::save_wav_pcm16(*item.clip, (dir / "audio" / name).string());
        meta << name << ',' << item.fold << ',' << item.label << ','
             << ds.labels[item.label] << ",True,100032,A\n";
    }
    meta.close();

    const auto loaded = pipeline::load_dataset(dir.str(), pipeline::DatasetOrigin::ESC50);
    CHECK(loaded.items.size() == 8);
    CHECK(loaded.labels == ds.labels);
    CHECK(loaded.n_folds() == 4);
    for (const auto& item : loaded.items) {
        CHECK(item.path.find("audio") != std::string::npos);
    }
}

TEST_CASE("us8k-style headers map through column aliases") {
    test_support::TempDir dir("ds_us8k");
    const auto ds = pipeline::synth_dataset(2, 2, 5);
    std::filesystem::create_directories(dir / "fold1");
    std::filesystem::create_directories(dir / "fold2");
    std::ofstream meta(dir / "meta.csv");
    meta << "slice_file_name,fsID,start,end,salience,fold,classID,class\n";
    for (size_t i = 0; i < ds.items.size(); ++i) {
        const auto& item = ds.items[i];
        const std::string name = "s" + std::to_string(i) + ".wav";
        const int fold = item.fold > 2 ? 1 : item.fold;
        audio::save_wav_pcm16(*item.clip,
                              (dir / ("fold" + std::to_string(fold)) / name).string());
        meta << name << ",0,0,0,1," << fold << ',' << item.label << ','
             << ds.labels[item.label] << '\n';
    }
    meta.close();

    const auto loaded = pipeline::load_dataset(dir.str(), pipeline::DatasetOrigin::US8K);
    CHECK(loaded.items.size() == 4);
    CHECK(loaded.labels == ds.labels);
}

TEST_CASE("training on the separable corpus reaches full training accuracy") {
    const auto ds = pipeline::synth_dataset(2, 8, 7);
    auto model = models::build_model<float>(cnn1_spec(1, 2), 7);
    const auto history =
        pipeline::train(*model, ds, {1, 2, 3}, 4, quick_train(), fast_features());

    REQUIRE(!history.empty());
    CHECK(history.back().train_acc == 1.0);
    CHECK(static_cast<int>(history.size()) == history.back().epoch);
    CHECK(model->norm_mean.size() == 1);
    CHECK(model->labels == ds.labels);
    CHECK(model->provenance.feature_config == "LM");
}

TEST_CASE("training is deterministic for a fixed seed") {
    const auto ds = pipeline::synth_dataset(2, 4, 9);
    auto tcfg = quick_train(13);
    tcfg.epochs = 3;
    tcfg.early_stop_train_acc = 0.0;

    auto run = [&] {
        auto model = models::build_model<float>(cnn1_spec(1, 2), tcfg.seed);
        return pipeline::train(*model, ds, {1, 2, 3}, 4, tcfg, fast_features());
    };
    const auto h1 = run();
    const auto h2 = run();
    REQUIRE(h1.size() == h2.size());
    for (size_t i = 0; i < h1.size(); ++i) {
        CHECK(h1[i].train_loss == h2[i].train_loss);
        CHECK(h1[i].train_acc == h2[i].train_acc);
        CHECK(h1[i].val_loss == h2[i].val_loss);
        CHECK(h1[i].val_acc == h2[i].val_acc);
    }
}

TEST_CASE("last_layer_only training leaves every body blob bit-identical") {
    const auto ds = pipeline::synth_dataset(2, 4, 21);
    auto model = models::build_model<float>(cnn1_spec(1, 2), 21);

    std::vector<std::vector<float>> before;
    for (const auto& p : model->named_params()) {
        if (p.name.rfind("head.", 0) != 0) before.push_back(p.tensor->v);
    }

    auto tcfg = quick_train(21);
    tcfg.epochs = 3;
    tcfg.early_stop_train_acc = 0.0;
    tcfg.freeze = FreezePolicy::last_layer_only;
    pipeline::train(*model, ds, {1, 2, 3}, 4, tcfg, fast_features());

    size_t i = 0;
    for (const auto& p : model->named_params()) {
        if (p.name.rfind("head.", 0) != 0) CHECK(p.tensor->v == before[i++]);
    }
}

TEST_CASE("last_two_layers trains the pre-head dense while convolutions stay frozen") {
    const auto ds = pipeline::synth_dataset(2, 4, 57);
    auto model = models::build_model<float>(cnn1_spec(1, 2), 57);

    std::vector<float> conv_before, fc_before, head_before;
    for (const auto& p : model->named_params()) {
        if (p.name.rfind("conv", 0) == 0) {
            conv_before.insert(conv_before.end(), p.tensor->v.begin(), p.tensor->v.end());
        } else if (p.name.rfind("fc.", 0) == 0) {
            fc_before.insert(fc_before.end(), p.tensor->v.begin(), p.tensor->v.end());
        } else if (p.name.rfind("head.", 0) == 0) {
            head_before.insert(head_before.end(), p.tensor->v.begin(), p.tensor->v.end());
        }
    }

    auto tcfg = quick_train(57);
    tcfg.epochs = 3;
    tcfg.early_stop_train_acc = 0.0;
    tcfg.freeze = FreezePolicy::last_two_layers;
    pipeline::train(*model, ds, {1, 2, 3}, 4, tcfg, fast_features());

    std::vector<float> conv_after, fc_after, head_after;
    for (const auto& p : model->named_params()) {
        if (p.name.rfind("conv", 0) == 0) {
            conv_after.insert(conv_after.end(), p.tensor->v.begin(), p.tensor->v.end());
        } else if (p.name.rfind("fc.", 0) == 0) {
            fc_after.insert(fc_after.end(), p.tensor->v.begin(), p.tensor->v.end());
        } else if (p.name.rfind("head.", 0) == 0) {
            head_after.insert(head_after.end(), p.tensor->v.begin(), p.tensor->v.end());
        }
    }
    CHECK(conv_after == conv_before);
    CHECK(fc_after != fc_before);
    CHECK(head_after != head_before);
}

TEST_CASE("train rejects overlapping folds and empty splits") {
    const auto ds = pipeline::synth_dataset(2, 4, 5);
    auto model = models::build_model<float>(cnn1_spec(1, 2), 5);
    auto tcfg = quick_train();
    CHECK_THROWS_AS(pipeline::train(*model, ds, {1, 2}, 2, tcfg, fast_features()),
                    PipelineError);
    CHECK_THROWS_AS(pipeline::train(*model, ds, {17}, 4, tcfg, fast_features()), PipelineError);
}

TEST_CASE("normalization statistics depend only on the training folds") {
    const auto ds = pipeline::synth_dataset(2, 8, 31);
    auto tcfg = quick_train(31);
    tcfg.epochs = 1;
    tcfg.early_stop_train_acc = 0.0;

    auto model_a = models::build_model<float>(cnn1_spec(1, 2), 31);
    auto model_b = models::build_model<float>(cnn1_spec(1, 2), 31);
    pipeline::train(*model_a, ds, {1, 2}, 3, tcfg, fast_features());
    pipeline::train(*model_b, ds, {1, 2}, 4, tcfg, fast_features());
    CHECK(model_a->norm_mean == model_b->norm_mean);
    CHECK(model_a->norm_std == model_b->norm_std);
}

TEST_CASE("evaluate: trained model on its training folds is a perfect predictor") {
    const auto ds = pipeline::synth_dataset(2, 8, 7);
    auto model = models::build_model<float>(cnn1_spec(1, 2), 7);
    pipeline::train(*model, ds, {1, 2, 3}, 4, quick_train(), fast_features());

    const auto metrics = pipeline::evaluate(*model, ds, {1, 2, 3}, fast_features());
    CHECK(metrics.accuracy == 1.0);
    CHECK(metrics.macro_precision == 1.0);
    CHECK(metrics.macro_recall == 1.0);
    CHECK(metrics.macro_f1 == 1.0);
    for (int t = 0; t < 2; ++t) {
        for (int p = 0; p < 2; ++p) {
            if (t != p) CHECK(metrics.confusion_at(t, p) == 0);
        }
    }
}

TEST_CASE("evaluate: a constant predictor shows the zero-division rule") {
    const auto ds = pipeline::synth_dataset(2, 8, 7);
    auto model = models::build_model<float>(cnn1_spec(1, 2), 7);
    // force constant predictions of class 0
    auto& head = model->head();
    std::fill(head.w->v.begin(), head.w->v.end(), 0.0f);
    head.b->v = {1.0f, 0.0f};
    model->provenance.feature_config = "LM";

    const auto metrics = pipeline::evaluate(*model, ds, {1, 2, 3, 4}, fast_features());
    CHECK(metrics.accuracy == doctest::Approx(0.5));
    CHECK(metrics.macro_recall == doctest::Approx(0.5));
    CHECK(metrics.macro_precision == doctest::Approx(0.25));
    // confusion rows sum to the class support
    CHECK(metrics.confusion_at(0, 0) + metrics.confusion_at(0, 1) == 8);
    CHECK(metrics.confusion_at(1, 0) + metrics.confusion_at(1, 1) == 8);
}

TEST_CASE("evaluate: single correctly predicted sample scores accuracy 1") {
    const auto ds = pipeline::synth_dataset(2, 8, 7);
    auto model = models::build_model<float>(cnn1_spec(1, 2), 7);
    pipeline::train(*model, ds, {1, 2, 3}, 4, quick_train(), fast_features());

    Dataset single;
    single.labels = ds.labels;
    single.origin = ds.origin;
    single.items.push_back(ds.items[0]);
    const auto metrics = pipeline::evaluate(*model, single, {ds.items[0].fold}, fast_features());
    CHECK(metrics.accuracy == 1.0);
}

TEST_CASE("evaluate is invariant under item permutation") {
    const auto ds = pipeline::synth_dataset(2, 6, 17);
    auto model = models::build_model<float>(cnn1_spec(1, 2), 17);
    auto tcfg = quick_train(17);
    tcfg.epochs = 4;
    pipeline::train(*model, ds, {1, 2}, 3, tcfg, fast_features());

    Dataset shuffled = ds;
    std::reverse(shuffled.items.begin(), shuffled.items.end());
    const auto a = pipeline::evaluate(*model, ds, {1, 2, 3}, fast_features());
    const auto b = pipeline::evaluate(*model, shuffled, {1, 2, 3}, fast_features());
    CHECK(a.accuracy == b.accuracy);
    CHECK(a.macro_f1 == b.macro_f1);
    CHECK(a.confusion == b.confusion);
}

TEST_CASE("cross_validate produces one metrics row per fold plus the exact mean") {
    const auto ds = pipeline::synth_dataset(2, 8, 7);
    auto tcfg = quick_train(7);
    const auto result =
        pipeline::cross_validate(cnn1_spec(1, 2), ds, 4, tcfg, fast_features());

    REQUIRE(result.per_fold.size() == 4);
    REQUIRE(result.histories.size() == 4);
    double sum = 0.0;
    for (const auto& m : result.per_fold) sum += m.accuracy;
    CHECK(result.mean_accuracy == doctest::Approx(sum / 4.0).epsilon(1e-12));
}

TEST_CASE("cross_validate results are identical across job counts") {
    const auto ds = pipeline::synth_dataset(2, 4, 29);
    auto tcfg = quick_train(29);
    tcfg.epochs = 2;
    tcfg.early_stop_train_acc = 0.0;

    const auto serial = pipeline::cross_validate(cnn1_spec(1, 2), ds, 4, tcfg, fast_features(), 1);
    const auto parallel =
        pipeline::cross_validate(cnn1_spec(1, 2), ds, 4, tcfg, fast_features(), 2);
    for (int f = 0; f < 4; ++f) {
        CHECK(serial.per_fold[f].accuracy == parallel.per_fold[f].accuracy);
        CHECK(serial.histories[f].back().train_loss == parallel.histories[f].back().train_loss);
    }
    CHECK(serial.mean_accuracy == parallel.mean_accuracy);
}

TEST_CASE("transfer_finetune trains only the head and validates the feature config") {
    test_support::TempDir dir("finetune");
    // a body pretrained across four tone classes separates any subset of
    // them, which is what makes the head-only trajectory well behaved
    const auto pretrain_ds = pipeline::synth_dataset(4, 8, 7);
    auto model = models::build_model<float>(cnn1_spec(1, 4), 7);
    auto pre_cfg = quick_train(7);
    pre_cfg.epochs = 60;
    pipeline::train(*model, pretrain_ds, {1, 2, 3}, 4, pre_cfg, fast_features());
    const auto ckpt = (dir / "pre.ssck").string();
    models::save_checkpoint(*model, ckpt);

    std::vector<std::vector<float>> body_before;
    for (const auto& p : model->named_params()) {
        if (p.name.rfind("head.", 0) != 0) body_before.push_back(p.tensor->v);
    }

    const auto target_ds = pipeline::synth_dataset(3, 8, 142);
    auto tcfg = quick_train(43);
    tcfg.epochs = 16;
    tcfg.batch_size = 4;
    tcfg.early_stop_train_acc = 0.0;
    auto result = pipeline::transfer_finetune(ckpt, target_ds, tcfg, fast_features());

    REQUIRE(result.model != nullptr);
    CHECK(result.model->spec().n_classes == 3);
    CHECK(result.history.size() == 16);
    CHECK(result.history.back().train_acc == 1.0);

    size_t i = 0;
    for (const auto& p : result.model->named_params()) {
        if (p.name.rfind("head.", 0) != 0) CHECK(p.tensor->v == body_before[i++]);
    }

    // train accuracy of the head-only finetune is monotone under 2-epoch smoothing
    const auto& h = result.history;
    for (size_t e = 2; e + 1 < h.size(); ++e) {
        const double prev = (h[e - 2].train_acc + h[e - 1].train_acc) / 2.0;
        const double cur = (h[e].train_acc + h[e + 1].train_acc) / 2.0;
        CHECK(cur >= prev - 1e-9);
    }

    auto bad_cfg = tcfg;
    bad_cfg.feature_config = "MFCC+TZ";
    CHECK_THROWS_AS(pipeline::transfer_finetune(ckpt, target_ds, bad_cfg, fast_features()),
                    ConfigError);
    CHECK_THROWS_AS(
        pipeline::transfer_finetune((dir / "nope.ssck").string(), target_ds, tcfg,
                                    fast_features()),
        CheckpointError);
}

TEST_CASE("stacked multi-channel features train with per-channel normalization") {
    const auto ds = pipeline::synth_dataset(2, 6, 3, 3);
    auto model = models::build_model<float>(cnn1_spec(4, 2), 3);
    auto tcfg = quick_train(3);
    tcfg.epochs = 20;
    tcfg.feature_config = "MFCC+GTCC+CH+LM";
    const auto history = pipeline::train(*model, ds, {1, 2}, 3, tcfg, fast_features());

    REQUIRE(model->norm_mean.size() == 4);
    REQUIRE(model->norm_std.size() == 4);
    for (double s : model->norm_std) CHECK(s > 0.0);
    // the four channels live on very different scales pre-normalization
    CHECK(model->norm_mean[0] != model->norm_mean[3]);
    CHECK(history.back().train_acc == 1.0);
    CHECK(model->provenance.feature_config == "MFCC+GTCC+CH+LM");
}

TEST_CASE("the toy transformer trains through the pipeline with its published knobs") {
    const auto ds = pipeline::synth_dataset(2, 4, 77);
    ModelSpec spec;
    spec.arch = Architecture::AST;
    spec.in_channels = 1;
    spec.n_classes = 2;
    spec.ast = {1, 2, 16, 32, 16, 0.1};

    TrainConfig tcfg;
    tcfg.epochs = 10;
    tcfg.batch_size = 8;
    tcfg.learning_rate = 5e-5;
    tcfg.optimizer = pipeline::OptimizerKind::adamw;
    tcfg.schedule = pipeline::ScheduleKind::cosine;
    tcfg.weight_decay = 1e-4;
    tcfg.seed = 5;
    tcfg.feature_config = "LM";

    auto model = models::build_model<float>(spec, 5);
    const auto history = pipeline::train(*model, ds, {1, 2, 3}, 4, tcfg, fast_features());
    REQUIRE(history.size() == 10);
    for (const auto& rec : history) {
        CHECK(std::isfinite(rec.train_loss));
        CHECK(std::isfinite(rec.val_loss));
    }
    CHECK(history.back().train_loss < history.front().train_loss);
}

TEST_CASE("benchmark_inference reports mean and std over the requested iterations") {
    auto model = models::build_model<float>(cnn1_spec(1, 2), 3);
    features::StackedTensor sample;
    sample.height = 32;
    sample.width = 32;
    sample.channels = 1;
    sample.data.assign(32 * 32, 0.1);

    const auto result = pipeline::benchmark_inference(*model, sample, 50, 5);
    CHECK(result.iterations == 50);
    CHECK(result.mean_ms > 0.0);
    CHECK(std::isfinite(result.std_ms));
    CHECK(result.std_ms >= 0.0);

    CHECK_THROWS_AS(pipeline::benchmark_inference(*model, sample, 1, 0), PipelineError);
}

TEST_CASE("csv emission formats are stable") {
    pipeline::History history{{1, 0.5, 0.25, 0.75, 0.5}, {2, 0.25, 0.75, 0.5, 0.75}};
    const auto csv = pipeline::history_csv(history);
    CHECK(csv == "epoch,train_loss,train_acc,val_loss,val_acc\n"
                 "1,0.5,0.25,0.75,0.5\n"
                 "2,0.25,0.75,0.5,0.75\n");

    pipeline::CrossValResult cv;
    cv.per_fold.resize(2);
    cv.per_fold[0].accuracy = 0.5;
    cv.per_fold[1].accuracy = 1.0;
    cv.mean_accuracy = 0.75;
    CHECK(pipeline::crossval_csv("cnn1", "LM", cv) ==
          "model,features,fold_1,fold_2,average_accuracy\ncnn1,LM,0.5,1,0.75\n");
}
