#pragma once

#include <memory>
#include <string>
#include <vector>

#include "sonostack/audio_io.hpp"

namespace sonostack::pipeline {

enum class DatasetOrigin { ESC50, US8K, SYNTH };

const char* origin_name(DatasetOrigin origin);
DatasetOrigin origin_from_name(const std::string& name); // throws ConfigError

// One labeled clip: either a file on disk or an in-memory buffer from
// the synthetic generator.
struct DatasetItem {
    std::string path;
    std::shared_ptr<const audio::AudioClip> clip;
    int label = 0;
    int fold = 1;
};

struct Dataset {
    std::vector<DatasetItem> items;
    std::vector<std::string> labels; // ordered by target index
    DatasetOrigin origin = DatasetOrigin::SYNTH;

    int n_folds() const;
};

// Load a corpus laid out as audio files plus a metadata CSV. The header
// must provide filename/fold/target columns; ESC-50's native
// (filename,fold,target,category,...) and UrbanSound8K's
// (slice_file_name,fold,classID,...) headers are mapped by alias. Files
// are resolved against root/, root/audio/ and root/fold<N>/.
// Throws DatasetError naming the offending row on any inconsistency.
Dataset load_dataset(const std::string& root, DatasetOrigin origin);

audio::AudioClip load_clip(const DatasetItem& item);

// Deterministic desk-scale corpus: class c is a sinusoid at a
// class-specific frequency (plus per-clip jitter, phase and noise), so
// classes are separable in log-mel space by construction. Folds are
// assigned round-robin within each class.
Dataset synth_dataset(int n_classes, int per_class, uint64_t seed, int n_folds = 4);

// Frequency the generator assigns to a class; exposed for oracle tests.
double synth_class_frequency(int cls);

// Materialize a dataset as PCM16 WAV files plus meta.csv under dir.
void write_dataset(const Dataset& dataset, const std::string& dir);

} // namespace sonostack::pipeline
