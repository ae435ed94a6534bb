#include "sonostack/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

#include "sonostack/errors.hpp"
#include "sonostack/rng.hpp"

namespace fs = std::filesystem;

namespace sonostack::pipeline {

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string field;
    std::istringstream in(line);
    while (std::getline(in, field, ',')) fields.push_back(field);
    if (!line.empty() && line.back() == ',') fields.emplace_back();
    return fields;
}

int find_column(const std::vector<std::string>& header, std::initializer_list<const char*> aliases) {
    for (size_t i = 0; i < header.size(); ++i) {
        for (const char* alias : aliases) {
            if (header[i] == alias) return static_cast<int>(i);
        }
    }
    return -1;
}

std::string resolve_audio_path(const std::string& root, const std::string& filename, int fold) {
    const fs::path candidates[] = {
        fs::path(root) / filename,
        fs::path(root) / "audio" / filename,
        fs::path(root) / ("fold" + std::to_string(fold)) / filename,
    };
    for (const auto& p : candidates) {
        if (fs::exists(p)) return p.string();
    }
    return {};
}

std::string metadata_path(const std::string& root, DatasetOrigin origin) {
    std::vector<fs::path> candidates;
    switch (origin) {
        case DatasetOrigin::ESC50:
            candidates = {fs::path(root) / "meta" / "esc50.csv", fs::path(root) / "esc50.csv",
                          fs::path(root) / "meta.csv"};
            break;
        case DatasetOrigin::US8K:
            candidates = {fs::path(root) / "metadata" / "UrbanSound8K.csv",
                          fs::path(root) / "meta.csv"};
            break;
        case DatasetOrigin::SYNTH:
            candidates = {fs::path(root) / "meta.csv"};
            break;
    }
    for (const auto& p : candidates) {
        if (fs::exists(p)) return p.string();
    }
    throw DatasetError("load_dataset: no metadata CSV found under " + root);
}

} // namespace

const char* origin_name(DatasetOrigin origin) {
    switch (origin) {
        case DatasetOrigin::ESC50: return "esc50";
        case DatasetOrigin::US8K: return "us8k";
        case DatasetOrigin::SYNTH: return "synth";
    }
    return "?";
}

DatasetOrigin origin_from_name(const std::string& name) {
    if (name == "esc50") return DatasetOrigin::ESC50;
    if (name == "us8k") return DatasetOrigin::US8K;
    if (name == "synth") return DatasetOrigin::SYNTH;
    throw ConfigError("unknown dataset origin " + name);
}

int Dataset::n_folds() const {
    int k = 0;
    for (const auto& item : items) k = std::max(k, item.fold);
    return k;
}

Dataset load_dataset(const std::string& root, DatasetOrigin origin) {
    const std::string meta = metadata_path(root, origin);
    std::ifstream in(meta);
    if (!in) throw DatasetError("load_dataset: cannot open " + meta);

    std::string line;
    if (!std::getline(in, line)) throw DatasetError("load_dataset: empty metadata file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto header = split_csv_line(line);
    const int col_file = find_column(header, {"filename", "slice_file_name"});
    const int col_fold = find_column(header, {"fold"});
    const int col_target = find_column(header, {"target", "classID"});
    const int col_name = find_column(header, {"category", "class"});
    if (col_file < 0 || col_fold < 0 || col_target < 0) {
        throw DatasetError("load_dataset: metadata header lacks filename/fold/target columns");
    }

    const int max_fold = origin == DatasetOrigin::ESC50 ? 5
                         : origin == DatasetOrigin::US8K ? 10
                                                         : 0; // synth: any positive fold

    Dataset ds;
    ds.origin = origin;
    std::vector<std::string> names;
    int row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto fields = split_csv_line(line);
        const auto need = static_cast<size_t>(std::max({col_file, col_fold, col_target}) + 1);
        if (fields.size() < need) {
            throw DatasetError("load_dataset: row " + std::to_string(row) + ": too few columns");
        }

        DatasetItem item;
        try {
            item.fold = std::stoi(fields[col_fold]);
            item.label = std::stoi(fields[col_target]);
        } catch (const std::exception&) {
            throw DatasetError("load_dataset: row " + std::to_string(row) + ": malformed number");
        }
        if (item.fold < 1 || (max_fold > 0 && item.fold > max_fold)) {
            throw DatasetError("load_dataset: row " + std::to_string(row) + ": fold out of range");
        }
        if (item.label < 0) {
            throw DatasetError("load_dataset: row " + std::to_string(row) + ": negative target");
        }

        item.path = resolve_audio_path(root, fields[col_file], item.fold);
        if (item.path.empty()) {
            throw DatasetError("load_dataset: row " + std::to_string(row) + ": missing file " +
                               fields[col_file]);
        }

        if (static_cast<size_t>(item.label) >= names.size()) names.resize(item.label + 1);
        if (col_name >= 0 && static_cast<size_t>(col_name) < fields.size()) {
            const std::string& name = fields[col_name];
            if (names[item.label].empty()) {
                names[item.label] = name;
            } else if (names[item.label] != name) {
                throw DatasetError("load_dataset: row " + std::to_string(row) +
                                   ": conflicting label name for target " +
                                   std::to_string(item.label));
            }
        }
        ds.items.push_back(std::move(item));
    }

    for (size_t i = 0; i < names.size(); ++i) {
        ds.labels.push_back(names[i].empty() ? "class_" + std::to_string(i) : names[i]);
    }
    if (ds.items.empty()) throw DatasetError("load_dataset: no items in " + meta);
    return ds;
}

audio::AudioClip load_clip(const DatasetItem& item) {
    if (item.clip) return *item.clip;
    return audio::load_wav(item.path);
}

double synth_class_frequency(int cls) { return 400.0 + 650.0 * cls; }

Dataset synth_dataset(int n_classes, int per_class, uint64_t seed, int n_folds) {
    if (n_classes < 2) throw ConfigError("synth_dataset: need at least 2 classes");
    if (per_class < 0) throw ConfigError("synth_dataset: per_class must be >= 0");
    if (n_folds < 1) throw ConfigError("synth_dataset: n_folds must be >= 1");

    constexpr int kRate = 22050;
    constexpr double kSeconds = 3.0;
    const auto n_samples = static_cast<size_t>(kRate * kSeconds);

    Dataset ds;
    ds.origin = DatasetOrigin::SYNTH;
    for (int c = 0; c < n_classes; ++c) ds.labels.push_back("tone_" + std::to_string(c));

    nn::Rng rng(seed);
    for (int c = 0; c < n_classes; ++c) {
        const double base = synth_class_frequency(c);
        for (int i = 0; i < per_class; ++i) {
            const double freq = base * (1.0 + 0.02 * (2.0 * rng.uniform() - 1.0));
            const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
            const double amp = 0.55 + 0.1 * rng.uniform();

            auto clip = std::make_shared<audio::AudioClip>();
            clip->sample_rate = kRate;
            clip->source_id = "synth/tone_" + std::to_string(c) + "/" + std::to_string(i);
            clip->samples.resize(n_samples);
            for (size_t t = 0; t < n_samples; ++t) {
                const double time = static_cast<double>(t) / kRate;
                const double noise = 0.05 * (2.0 * rng.uniform() - 1.0);
                clip->samples[t] = amp * std::sin(2.0 * std::numbers::pi * freq * time + phase) + noise;
            }

            DatasetItem item;
            item.clip = clip;
            item.label = c;
            item.fold = i % n_folds + 1;
            ds.items.push_back(std::move(item));
        }
    }
    return ds;
}

void write_dataset(const Dataset& dataset, const std::string& dir) {
    fs::create_directories(dir);
    std::ofstream meta(fs::path(dir) / "meta.csv");
    if (!meta) throw DatasetError("write_dataset: cannot write meta.csv under " + dir);
    meta << "filename,fold,target,category\n";
    for (size_t i = 0; i < dataset.items.size(); ++i) {
        const auto& item = dataset.items[i];
        std::ostringstream name;
        name << "clip_" << std::setw(4) << std::setfill('0') << i << ".wav";
        const auto path = fs::path(dir) / name.str();
        audio::save_wav_pcm16(load_clip(item), path.string());
        meta << name.str() << ',' << item.fold << ',' << item.label << ','
             << dataset.labels[item.label] << '\n';
    }
}

} // namespace sonostack::pipeline
