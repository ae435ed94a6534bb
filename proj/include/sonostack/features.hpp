#pragma once

#include <string>
#include <vector>

#include "sonostack/audio_io.hpp"
#include "sonostack/dsp.hpp"

namespace sonostack::features {

enum class FeatureKind : uint8_t { LM = 0, MFCC = 1, GTCC = 2, CH = 3, SPC = 4, TZ = 5 };

const char* kind_name(FeatureKind kind);
FeatureKind kind_from_name(const std::string& token); // throws ConfigError

struct FeatureConfig {
    int sample_rate = 22050;
    int n_fft = 1024;
    int hop = 512;
    int n_mels = 128;   // also the gammatone bank size
    int n_mfcc = 40;
    int n_gtcc = 40;
    int n_contrast_bands = 6;
    double contrast_fmin = 200.0;
    double tuning_hz = 440.0;
    double epsilon = 1e-10;

    void validate() const; // throws ConfigError
};

// One extractor's output: values is row-major [n_bins][n_frames].
struct FeatureMap {
    std::vector<double> values;
    int rows = 0;
    int cols = 0;
    FeatureKind kind = FeatureKind::LM;
    FeatureConfig meta; // echo of the configuration that produced the map

    double at(int r, int c) const { return values[static_cast<size_t>(r) * cols + c]; }
    double& at(int r, int c) { return values[static_cast<size_t>(r) * cols + c]; }
};

// H x W x C stack of resized feature maps, channel-last.
struct StackedTensor {
    std::vector<double> data; // [h][w][c]
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<FeatureKind> channel_kinds;
    // Per-channel normalization; identity (mean 0, std 1) until applied.
    std::vector<double> norm_mean;
    std::vector<double> norm_std;
    bool normalized = false;

    double at(int y, int x, int c) const {
        return data[(static_cast<size_t>(y) * width + x) * channels + c];
    }
    double& at(int y, int x, int c) {
        return data[(static_cast<size_t>(y) * width + x) * channels + c];
    }
};

constexpr int kStackSize = 128; // common grid every map is resized onto

// Log mel-filterbank energies: log(sum_k power * H_m(k) + eps).
FeatureMap log_mel(const audio::AudioClip& clip, const FeatureConfig& cfg);

// DCT-II of the log mel energies, first n_mfcc coefficients per frame.
FeatureMap mfcc(const audio::AudioClip& clip, const FeatureConfig& cfg);

// Same cepstral pipeline with the gammatone bank substituted.
FeatureMap gtcc(const audio::AudioClip& clip, const FeatureConfig& cfg);

// Per-frame pitch-class energy ratios (12 rows).
FeatureMap chroma(const audio::AudioClip& clip, const FeatureConfig& cfg);

// Per-band peak-to-valley contrast of spectral magnitudes (values in [0,1)).
FeatureMap spectral_contrast(const audio::AudioClip& clip, const FeatureConfig& cfg);

// 6-D tonal centroid projection of the chroma vector per frame.
FeatureMap tonnetz(const audio::AudioClip& clip, const FeatureConfig& cfg);

FeatureMap extract(FeatureKind kind, const audio::AudioClip& clip, const FeatureConfig& cfg);

// Shared cepstral stage: per-frame DCT-II of log(filterbank energies + eps).
// mfcc and gtcc are thin wrappers over this; exposed so the two can be
// cross-checked against each other with swapped banks.
FeatureMap cepstral_map(const audio::AudioClip& clip, const FeatureConfig& cfg,
                        const dsp::Filterbank& bank, int n_out, FeatureKind kind);

// One frame of that stage: dct_ii(log(energies + eps))[0..n_out).
std::vector<double> cepstra_from_energies(const std::vector<double>& energies, int n_out,
                                          double epsilon);

// The fixed 6x12 tonal-centroid matrix (fifths r=1, minor thirds r=1,
// major thirds r=0.5), row-major.
std::vector<double> tonal_centroid_matrix();

// Per axis: zero-pad at the high end when source <= target, 1-D linear
// interpolation onto the target grid when larger.
FeatureMap resize_map(const FeatureMap& map, int h = kStackSize, int w = kStackSize);

// Concatenate equally-sized maps along a new channel axis.
// Throws StackError on size mismatch.
StackedTensor stack(const std::vector<FeatureMap>& maps);

// Parse a '+'-separated Table-style configuration name ("LM+SPC+CH").
// Case-insensitive; throws ConfigError naming any unknown token.
std::vector<FeatureKind> config_from_name(const std::string& name);

std::string config_to_name(const std::vector<FeatureKind>& kinds);

// Extract, resize and stack every feature named by kinds.
StackedTensor extract_stack(const audio::AudioClip& clip, const std::vector<FeatureKind>& kinds,
                            const FeatureConfig& cfg);

// Flat binary record per map: magic "FMAP", u32 version, u32 rows,
// u32 cols, u8 kind code, row-major f64 little-endian. A stacked tensor
// is written as one record per channel.
void write_fmap(std::ostream& out, const FeatureMap& map);
FeatureMap read_fmap(std::istream& in); // throws DecodeError
void write_fmap_file(const std::string& path, const std::vector<FeatureMap>& maps);
std::vector<FeatureMap> read_fmap_file(const std::string& path);

} // namespace sonostack::features
