#pragma once

#include <complex>
#include <vector>

#include "sonostack/audio_io.hpp"

namespace sonostack::dsp {

// One-sided power spectrogram. power is row-major [n_frames][n_bins]
// with n_bins = n_fft/2 + 1.
struct Spectrogram {
    std::vector<double> power;
    int n_frames = 0;
    int n_bins = 0;
    int n_fft = 0;
    int hop = 0;
    int sample_rate = 0;

    double at(int frame, int bin) const { return power[static_cast<size_t>(frame) * n_bins + bin]; }
};

enum class FilterbankKind { mel, gammatone, chroma_map, octave_bands };

// Row-major [n_filters][n_bins] weight matrix over one-sided FFT bins.
// Immutable after construction, shareable across threads.
struct Filterbank {
    std::vector<double> weights;
    int n_filters = 0;
    int n_bins = 0;
    FilterbankKind kind = FilterbankKind::mel;
    int sample_rate = 0;
    int n_fft = 0;
    std::vector<double> centers_hz; // one per filter where meaningful

    double at(int filter, int bin) const { return weights[static_cast<size_t>(filter) * n_bins + bin]; }
    const double* row(int filter) const { return weights.data() + static_cast<size_t>(filter) * n_bins; }
};

// Symmetric Hamming window: w[i] = 0.54 - 0.46 cos(2*pi*i/(n-1)); [1] for n=1.
std::vector<double> hamming_window(int n);

std::vector<double> rectangular_window(int n);

// Radix-2 iterative FFT of a real frame; returns one-sided bins 0..n/2.
// Throws InvalidLength unless the frame length is a power of two.
std::vector<std::complex<double>> fft_real(const std::vector<double>& frame);

// Sliding-window power spectrum. Frame t covers samples
// [t*hop, t*hop + n_fft), zero-padded past the end of the clip;
// n_frames = ceil(len / hop). An empty clip yields zero frames.
Spectrogram stft(const audio::AudioClip& clip, int n_fft, int hop, const std::vector<double>& window);

// Unnormalized DCT-II: out[n] = sum_m input[m] * cos(n*(m+0.5)*pi/M),
// n in [0, n_out).
std::vector<double> dct_ii(const std::vector<double>& input, int n_out);

// Triangular filters with centers equally spaced on the HTK mel scale
// mel(f) = 2595*log10(1 + f/700).
Filterbank mel_filterbank(int n_mels, int n_fft, int sample_rate, double fmin, double fmax);

// 4th-order gammatone magnitude responses sampled at FFT bins, centers
// equally spaced on the ERB-rate scale, each row peak-normalized to 1.
// Bandwidth b = 1.019 * (24.7 + 0.108*fc) per Glasberg-Moore.
Filterbank gammatone_filterbank(int n_filters, int n_fft, int sample_rate, double fmin, double fmax);

// 12 x n_bins 0/1 matrix assigning bin k >= 1 to pitch class
// round(12*log2(f_k / tuning_hz)) mod 12, class 0 = A. DC is unassigned.
Filterbank chroma_map(int n_fft, int sample_rate, double tuning_hz = 440.0);

// n_bands 0/1 rows partitioning bins into octave-wide bands
// [fmin*2^m, fmin*2^(m+1)); band 0 also absorbs bins below fmin and the
// last band extends to Nyquist.
Filterbank octave_subbands(int n_bands, int n_fft, int sample_rate, double fmin = 200.0);

// Scale helpers, exposed for oracle tests.
double hz_to_mel(double f);
double mel_to_hz(double mel);
double hz_to_erb_rate(double f);
double erb_rate_to_hz(double erb);

} // namespace sonostack::dsp
