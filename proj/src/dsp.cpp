#include "sonostack/dsp.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "sonostack/errors.hpp"

namespace sonostack::dsp {

namespace {

constexpr double kPi = std::numbers::pi;

bool is_power_of_two(size_t n) { return n != 0 && (n & (n - 1)) == 0; }

// In-place iterative radix-2 Cooley-Tukey.
void fft_inplace(std::vector<std::complex<double>>& a) {
    const size_t n = a.size();
    for (size_t i = 1, j = 0; i < n; ++i) {
        size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (size_t len = 2; len <= n; len <<= 1) {
        const double ang = -2.0 * kPi / static_cast<double>(len);
        const std::complex<double> wlen(std::cos(ang), std::sin(ang));
        for (size_t i = 0; i < n; i += len) {
            std::complex<double> w(1.0, 0.0);
            for (size_t j = 0; j < len / 2; ++j) {
                const std::complex<double> u = a[i + j];
                const std::complex<double> v = a[i + j + len / 2] * w;
                a[i + j] = u + v;
                a[i + j + len / 2] = u - v;
                w *= wlen;
            }
        }
    }
}

} // namespace

std::vector<double> hamming_window(int n) {
    if (n < 1) throw InvalidLength("hamming_window: n must be >= 1");
    if (n == 1) return {1.0};
    std::vector<double> w(n);
    for (int i = 0; i < n; ++i) {
        w[i] = 0.54 - 0.46 * std::cos(2.0 * kPi * i / (n - 1));
    }
    return w;
}

std::vector<double> rectangular_window(int n) {
    if (n < 1) throw InvalidLength("rectangular_window: n must be >= 1");
    return std::vector<double>(n, 1.0);
}

std::vector<std::complex<double>> fft_real(const std::vector<double>& frame) {
    if (!is_power_of_two(frame.size())) {
        throw InvalidLength("fft_real: frame length must be a power of two");
    }
    std::vector<std::complex<double>> a(frame.begin(), frame.end());
    fft_inplace(a);
    a.resize(frame.size() / 2 + 1);
    return a;
}

Spectrogram stft(const audio::AudioClip& clip, int n_fft, int hop, const std::vector<double>& window) {
    if (!is_power_of_two(static_cast<size_t>(n_fft))) {
        throw InvalidLength("stft: n_fft must be a power of two");
    }
    if (hop <= 0 || hop > n_fft) throw InvalidLength("stft: need 0 < hop <= n_fft");
    if (static_cast<int>(window.size()) != n_fft) {
        throw InvalidLength("stft: window length must equal n_fft");
    }

    const size_t len = clip.samples.size();
    const int n_frames = static_cast<int>((len + hop - 1) / hop);
    const int n_bins = n_fft / 2 + 1;

    Spectrogram spec;
    spec.n_frames = n_frames;
    spec.n_bins = n_bins;
    spec.n_fft = n_fft;
    spec.hop = hop;
    spec.sample_rate = clip.sample_rate;
    spec.power.assign(static_cast<size_t>(n_frames) * n_bins, 0.0);

    std::vector<double> frame(n_fft);
    for (int t = 0; t < n_frames; ++t) {
        const size_t start = static_cast<size_t>(t) * hop;
        for (int i = 0; i < n_fft; ++i) {
            const size_t idx = start + i;
            frame[i] = idx < len ? clip.samples[idx] * window[i] : 0.0;
        }
        const auto bins = fft_real(frame);
        for (int k = 0; k < n_bins; ++k) {
            spec.power[static_cast<size_t>(t) * n_bins + k] = std::norm(bins[k]);
        }
    }
    return spec;
}

std::vector<double> dct_ii(const std::vector<double>& input, int n_out) {
    const int m_total = static_cast<int>(input.size());
    if (m_total < 1) throw InvalidLength("dct_ii: input must be non-empty");
    if (n_out < 1 || n_out > m_total) throw InvalidLength("dct_ii: need 1 <= n_out <= input size");
    std::vector<double> out(n_out, 0.0);
    for (int n = 0; n < n_out; ++n) {
        double acc = 0.0;
        for (int m = 0; m < m_total; ++m) {
            acc += input[m] * std::cos(n * (m + 0.5) * kPi / m_total);
        }
        out[n] = acc;
    }
    return out;
}

double hz_to_mel(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }

double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

// ERB-rate scale (Glasberg & Moore 1990).
double hz_to_erb_rate(double f) { return 21.4 * std::log10(1.0 + 0.00437 * f); }

double erb_rate_to_hz(double erb) { return (std::pow(10.0, erb / 21.4) - 1.0) / 0.00437; }

Filterbank mel_filterbank(int n_mels, int n_fft, int sample_rate, double fmin, double fmax) {
    if (n_mels < 1) throw FilterbankError("mel_filterbank: n_mels must be >= 1");
    if (!(fmin >= 0.0 && fmin < fmax && fmax <= sample_rate / 2.0)) {
        throw FilterbankError("mel_filterbank: need 0 <= fmin < fmax <= Nyquist");
    }

    const int n_bins = n_fft / 2 + 1;
    // n_mels + 2 edge points equally spaced in mel between fmin and fmax.
    std::vector<double> edges_hz(n_mels + 2);
    const double mel_lo = hz_to_mel(fmin);
    const double mel_hi = hz_to_mel(fmax);
    for (int i = 0; i < n_mels + 2; ++i) {
        edges_hz[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * i / (n_mels + 1));
    }
    for (int i = 0; i + 1 < n_mels + 2; ++i) {
        if (!(edges_hz[i] < edges_hz[i + 1])) {
            throw FilterbankError("mel_filterbank: band too narrow for distinct filter edges");
        }
    }

    Filterbank fb;
    fb.kind = FilterbankKind::mel;
    fb.n_filters = n_mels;
    fb.n_bins = n_bins;
    fb.sample_rate = sample_rate;
    fb.n_fft = n_fft;
    fb.weights.assign(static_cast<size_t>(n_mels) * n_bins, 0.0);
    fb.centers_hz.resize(n_mels);

    for (int m = 0; m < n_mels; ++m) {
        const double left = edges_hz[m];
        const double center = edges_hz[m + 1];
        const double right = edges_hz[m + 2];
        fb.centers_hz[m] = center;
        double rowsum = 0.0;
        for (int k = 0; k < n_bins; ++k) {
            const double f = static_cast<double>(k) * sample_rate / n_fft;
            double w = 0.0;
            if (f > left && f < right) {
                w = f <= center ? (f - left) / (center - left) : (right - f) / (right - center);
            }
            fb.weights[static_cast<size_t>(m) * n_bins + k] = w;
            rowsum += w;
        }
        if (rowsum == 0.0) {
            // a triangle narrower than the bin spacing captures nothing
            throw FilterbankError("mel_filterbank: band too narrow, filter " + std::to_string(m) +
                                  " covers no FFT bin");
        }
    }
    return fb;
}

Filterbank gammatone_filterbank(int n_filters, int n_fft, int sample_rate, double fmin, double fmax) {
    if (n_filters < 1) throw FilterbankError("gammatone_filterbank: n_filters must be >= 1");
    if (!(fmin >= 0.0 && fmin < fmax && fmax <= sample_rate / 2.0)) {
        throw FilterbankError("gammatone_filterbank: need 0 <= fmin < fmax <= Nyquist");
    }

    const int n_bins = n_fft / 2 + 1;
    std::vector<double> centers(n_filters);
    const double erb_lo = hz_to_erb_rate(fmin);
    const double erb_hi = hz_to_erb_rate(fmax);
    // Centers at interior points so the first and last filters stay inside
    // [fmin, fmax], mirroring the mel edge layout.
    for (int m = 0; m < n_filters; ++m) {
        centers[m] = erb_rate_to_hz(erb_lo + (erb_hi - erb_lo) * (m + 1) / (n_filters + 1));
    }
    for (int m = 0; m + 1 < n_filters; ++m) {
        if (!(centers[m] < centers[m + 1])) {
            throw FilterbankError("gammatone_filterbank: band too narrow for distinct centers");
        }
    }

    Filterbank fb;
    fb.kind = FilterbankKind::gammatone;
    fb.n_filters = n_filters;
    fb.n_bins = n_bins;
    fb.sample_rate = sample_rate;
    fb.n_fft = n_fft;
    fb.weights.assign(static_cast<size_t>(n_filters) * n_bins, 0.0);
    fb.centers_hz = centers;

    for (int m = 0; m < n_filters; ++m) {
        const double fc = centers[m];
        const double b = 1.019 * (24.7 + 0.108 * fc);
        double peak = 0.0;
        for (int k = 0; k < n_bins; ++k) {
            const double f = static_cast<double>(k) * sample_rate / n_fft;
            const double d = (f - fc) / b;
            // |1 / (1 + j(f-fc)/b)|^4 for a 4th-order filter.
            const double mag = 1.0 / ((1.0 + d * d) * (1.0 + d * d));
            fb.weights[static_cast<size_t>(m) * n_bins + k] = mag;
            peak = std::max(peak, mag);
        }
        for (int k = 0; k < n_bins; ++k) {
            fb.weights[static_cast<size_t>(m) * n_bins + k] /= peak;
        }
    }
    return fb;
}

Filterbank chroma_map(int n_fft, int sample_rate, double tuning_hz) {
    if (n_fft < 2 || sample_rate <= 0 || tuning_hz <= 0) {
        throw FilterbankError("chroma_map: invalid parameters");
    }
    const int n_bins = n_fft / 2 + 1;

    Filterbank fb;
    fb.kind = FilterbankKind::chroma_map;
    fb.n_filters = 12;
    fb.n_bins = n_bins;
    fb.sample_rate = sample_rate;
    fb.n_fft = n_fft;
    fb.weights.assign(static_cast<size_t>(12) * n_bins, 0.0);

    for (int k = 1; k < n_bins; ++k) {
        const double f = static_cast<double>(k) * sample_rate / n_fft;
        const auto semis = static_cast<long>(std::lround(12.0 * std::log2(f / tuning_hz)));
        const int pc = static_cast<int>(((semis % 12) + 12) % 12);
        fb.weights[static_cast<size_t>(pc) * n_bins + k] = 1.0;
    }
    return fb;
}

Filterbank octave_subbands(int n_bands, int n_fft, int sample_rate, double fmin) {
    if (n_bands < 1) throw FilterbankError("octave_subbands: n_bands must be >= 1");
    if (!(fmin > 0.0 && fmin < sample_rate / 2.0)) {
        throw FilterbankError("octave_subbands: need 0 < fmin < Nyquist");
    }
    const int n_bins = n_fft / 2 + 1;

    Filterbank fb;
    fb.kind = FilterbankKind::octave_bands;
    fb.n_filters = n_bands;
    fb.n_bins = n_bins;
    fb.sample_rate = sample_rate;
    fb.n_fft = n_fft;
    fb.weights.assign(static_cast<size_t>(n_bands) * n_bins, 0.0);

    for (int k = 0; k < n_bins; ++k) {
        const double f = static_cast<double>(k) * sample_rate / n_fft;
        int band;
        if (f < fmin * 2.0) {
            band = 0; // includes everything below fmin
        } else {
            band = static_cast<int>(std::floor(std::log2(f / fmin)));
            band = std::min(band, n_bands - 1); // last band runs to Nyquist
        }
        fb.weights[static_cast<size_t>(band) * n_bins + k] = 1.0;
    }
    return fb;
}

} // namespace sonostack::dsp
