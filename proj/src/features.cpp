#include "sonostack/features.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <ostream>
#include <sstream>

#include "sonostack/errors.hpp"

namespace sonostack::features {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr uint32_t kFmapVersion = 1;

dsp::Spectrogram power_spectrogram(const audio::AudioClip& clip, const FeatureConfig& cfg) {
    return dsp::stft(clip, cfg.n_fft, cfg.hop, dsp::hamming_window(cfg.n_fft));
}

// energies[m][t] = sum_k power[t][k] * bank[m][k]
FeatureMap bank_energies(const dsp::Spectrogram& spec, const dsp::Filterbank& bank, FeatureKind kind) {
    FeatureMap map;
    map.kind = kind;
    map.rows = bank.n_filters;
    map.cols = spec.n_frames;
    map.values.assign(static_cast<size_t>(map.rows) * map.cols, 0.0);
    for (int t = 0; t < spec.n_frames; ++t) {
        const double* p = spec.power.data() + static_cast<size_t>(t) * spec.n_bins;
        for (int m = 0; m < bank.n_filters; ++m) {
            const double* w = bank.row(m);
            double acc = 0.0;
            for (int k = 0; k < spec.n_bins; ++k) acc += p[k] * w[k];
            map.at(m, t) = acc;
        }
    }
    return map;
}

void check_finite(const FeatureMap& map, const char* what) {
    for (double v : map.values) {
        if (!std::isfinite(v)) throw ConfigError(std::string(what) + ": non-finite feature value");
    }
}

void write_u32le(std::ostream& out, uint32_t v) {
    const uint8_t b[4] = {static_cast<uint8_t>(v & 0xff), static_cast<uint8_t>(v >> 8 & 0xff),
                          static_cast<uint8_t>(v >> 16 & 0xff), static_cast<uint8_t>(v >> 24 & 0xff)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t read_u32le(std::istream& in) {
    uint8_t b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw DecodeError("fmap: truncated header");
    return static_cast<uint32_t>(b[0]) | static_cast<uint32_t>(b[1]) << 8 |
           static_cast<uint32_t>(b[2]) << 16 | static_cast<uint32_t>(b[3]) << 24;
}

} // namespace

const char* kind_name(FeatureKind kind) {
    switch (kind) {
        case FeatureKind::LM: return "LM";
        case FeatureKind::MFCC: return "MFCC";
        case FeatureKind::GTCC: return "GTCC";
        case FeatureKind::CH: return "CH";
        case FeatureKind::SPC: return "SPC";
        case FeatureKind::TZ: return "TZ";
    }
    return "?";
}

FeatureKind kind_from_name(const std::string& token) {
    std::string up;
    up.reserve(token.size());
    for (char c : token) up.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
    if (up == "LM") return FeatureKind::LM;
    if (up == "MFCC") return FeatureKind::MFCC;
    if (up == "GTCC") return FeatureKind::GTCC;
    if (up == "CH") return FeatureKind::CH;
    if (up == "SPC") return FeatureKind::SPC;
    if (up == "TZ") return FeatureKind::TZ;
    throw ConfigError("unknown feature token " + token);
}

void FeatureConfig::validate() const {
    if (sample_rate < 1 || n_fft < 2 || hop < 1 || hop > n_fft) {
        throw ConfigError("FeatureConfig: invalid analysis parameters");
    }
    if (n_mels < 1 || n_mfcc < 1 || n_gtcc < 1 || n_contrast_bands < 1) {
        throw ConfigError("FeatureConfig: counts must be >= 1");
    }
    if (n_mfcc > n_mels) throw ConfigError("FeatureConfig: n_mfcc must be <= n_mels");
    if (n_gtcc > n_mels) throw ConfigError("FeatureConfig: n_gtcc must be <= n_mels");
    if (!(epsilon > 0.0)) throw ConfigError("FeatureConfig: epsilon must be > 0");
}

FeatureMap log_mel(const audio::AudioClip& clip, const FeatureConfig& cfg) {
    cfg.validate();
    const auto spec = power_spectrogram(clip, cfg);
    const auto bank = dsp::mel_filterbank(cfg.n_mels, cfg.n_fft, cfg.sample_rate, 20.0,
                                          cfg.sample_rate / 2.0);
    FeatureMap map = bank_energies(spec, bank, FeatureKind::LM);
    for (double& v : map.values) v = std::log(v + cfg.epsilon);
    map.meta = cfg;
    check_finite(map, "log_mel");
    return map;
}

std::vector<double> cepstra_from_energies(const std::vector<double>& energies, int n_out,
                                          double epsilon) {
    std::vector<double> log_en(energies.size());
    for (size_t m = 0; m < energies.size(); ++m) log_en[m] = std::log(energies[m] + epsilon);
    return dsp::dct_ii(log_en, n_out);
}

FeatureMap cepstral_map(const audio::AudioClip& clip, const FeatureConfig& cfg,
                        const dsp::Filterbank& bank, int n_out, FeatureKind kind) {
    cfg.validate();
    if (n_out > bank.n_filters) throw ConfigError("cepstral_map: n_out exceeds filter count");
    const auto spec = power_spectrogram(clip, cfg);
    FeatureMap energies = bank_energies(spec, bank, kind);

    FeatureMap map;
    map.kind = kind;
    map.rows = n_out;
    map.cols = energies.cols;
    map.values.assign(static_cast<size_t>(n_out) * energies.cols, 0.0);

    std::vector<double> frame(bank.n_filters);
    for (int t = 0; t < energies.cols; ++t) {
        for (int m = 0; m < bank.n_filters; ++m) frame[m] = energies.at(m, t);
        const auto coeffs = cepstra_from_energies(frame, n_out, cfg.epsilon);
        for (int n = 0; n < n_out; ++n) map.at(n, t) = coeffs[n];
    }
    map.meta = cfg;
    check_finite(map, "cepstral_map");
    return map;
}

FeatureMap mfcc(const audio::AudioClip& clip, const FeatureConfig& cfg) {
    const auto bank = dsp::mel_filterbank(cfg.n_mels, cfg.n_fft, cfg.sample_rate, 20.0,
                                          cfg.sample_rate / 2.0);
    return cepstral_map(clip, cfg, bank, cfg.n_mfcc, FeatureKind::MFCC);
}

FeatureMap gtcc(const audio::AudioClip& clip, const FeatureConfig& cfg) {
    const auto bank = dsp::gammatone_filterbank(cfg.n_mels, cfg.n_fft, cfg.sample_rate, 20.0,
                                                cfg.sample_rate / 2.0);
    return cepstral_map(clip, cfg, bank, cfg.n_gtcc, FeatureKind::GTCC);
}

FeatureMap chroma(const audio::AudioClip& clip, const FeatureConfig& cfg) {
    cfg.validate();
    const auto spec = power_spectrogram(clip, cfg);
    const auto map12 = dsp::chroma_map(cfg.n_fft, cfg.sample_rate, cfg.tuning_hz);

    FeatureMap map;
    map.kind = FeatureKind::CH;
    map.rows = 12;
    map.cols = spec.n_frames;
    map.values.assign(static_cast<size_t>(12) * spec.n_frames, 0.0);

    for (int t = 0; t < spec.n_frames; ++t) {
        const double* p = spec.power.data() + static_cast<size_t>(t) * spec.n_bins;
        double total = 0.0;
        for (int k = 0; k < spec.n_bins; ++k) total += p[k];
        const double denom = total + cfg.epsilon;
        for (int n = 0; n < 12; ++n) {
            const double* w = map12.row(n);
            double acc = 0.0;
            for (int k = 0; k < spec.n_bins; ++k) acc += p[k] * w[k];
            map.at(n, t) = acc / denom;
        }
    }
    map.meta = cfg;
    check_finite(map, "chroma");
    return map;
}

FeatureMap spectral_contrast(const audio::AudioClip& clip, const FeatureConfig& cfg) {
    cfg.validate();
    const auto spec = power_spectrogram(clip, cfg);
    const auto bands = dsp::octave_subbands(cfg.n_contrast_bands, cfg.n_fft, cfg.sample_rate,
                                            cfg.contrast_fmin);

    FeatureMap map;
    map.kind = FeatureKind::SPC;
    map.rows = cfg.n_contrast_bands;
    map.cols = spec.n_frames;
    map.values.assign(static_cast<size_t>(map.rows) * map.cols, 0.0);

    for (int t = 0; t < spec.n_frames; ++t) {
        const double* p = spec.power.data() + static_cast<size_t>(t) * spec.n_bins;
        for (int m = 0; m < cfg.n_contrast_bands; ++m) {
            const double* w = bands.row(m);
            double lo = 0.0, hi = 0.0;
            bool any = false;
            for (int k = 0; k < spec.n_bins; ++k) {
                if (w[k] == 0.0) continue;
                const double mag = std::sqrt(p[k]); // contrast works on amplitudes
                if (!any) {
                    lo = hi = mag;
                    any = true;
                } else {
                    lo = std::min(lo, mag);
                    hi = std::max(hi, mag);
                }
            }
            map.at(m, t) = any ? (hi - lo) / (hi + lo + cfg.epsilon) : 0.0;
        }
    }
    map.meta = cfg;
    check_finite(map, "spectral_contrast");
    return map;
}

std::vector<double> tonal_centroid_matrix() {
    // Rows: sin/cos pairs on the circles of fifths (step 7, r=1), minor
    // thirds (step 3, r=1) and major thirds (step 2, r=0.5).
    std::vector<double> u(6 * 12);
    const double radii[3] = {1.0, 1.0, 0.5};
    const int steps[3] = {7, 3, 2};
    for (int c = 0; c < 3; ++c) {
        for (int n = 0; n < 12; ++n) {
            const double angle = steps[c] * kPi * n / 6.0;
            u[static_cast<size_t>(2 * c) * 12 + n] = radii[c] * std::sin(angle);
            u[static_cast<size_t>(2 * c + 1) * 12 + n] = radii[c] * std::cos(angle);
        }
    }
    return u;
}

FeatureMap tonnetz(const audio::AudioClip& clip, const FeatureConfig& cfg) {
    const FeatureMap ch = chroma(clip, cfg);
    const auto u = tonal_centroid_matrix();

    FeatureMap map;
    map.kind = FeatureKind::TZ;
    map.rows = 6;
    map.cols = ch.cols;
    map.values.assign(static_cast<size_t>(6) * ch.cols, 0.0);
    for (int t = 0; t < ch.cols; ++t) {
        for (int r = 0; r < 6; ++r) {
            double acc = 0.0;
            for (int n = 0; n < 12; ++n) acc += u[static_cast<size_t>(r) * 12 + n] * ch.at(n, t);
            map.at(r, t) = acc;
        }
    }
    map.meta = cfg;
    check_finite(map, "tonnetz");
    return map;
}

FeatureMap extract(FeatureKind kind, const audio::AudioClip& clip, const FeatureConfig& cfg) {
    switch (kind) {
        case FeatureKind::LM: return log_mel(clip, cfg);
        case FeatureKind::MFCC: return mfcc(clip, cfg);
        case FeatureKind::GTCC: return gtcc(clip, cfg);
        case FeatureKind::CH: return chroma(clip, cfg);
        case FeatureKind::SPC: return spectral_contrast(clip, cfg);
        case FeatureKind::TZ: return tonnetz(clip, cfg);
    }
    throw ConfigError("extract: unknown feature kind");
}

namespace {

// One axis of resize_map: pad with zeros when src <= target, otherwise
// linear interpolation with endpoints aligned.
void resize_axis(const std::vector<double>& src, int src_n, int dst_n, int stride, int count,
                 std::vector<double>& dst, int dst_stride) {
    for (int j = 0; j < count; ++j) {
        if (src_n <= dst_n) {
            for (int i = 0; i < src_n; ++i) {
                dst[static_cast<size_t>(i) * dst_stride + j] = src[static_cast<size_t>(i) * stride + j];
            }
        } else {
            for (int i = 0; i < dst_n; ++i) {
                const double pos = dst_n == 1 ? 0.0
                                              : static_cast<double>(i) * (src_n - 1) / (dst_n - 1);
                const int lo = std::min(static_cast<int>(pos), src_n - 2);
                const double frac = pos - lo;
                dst[static_cast<size_t>(i) * dst_stride + j] =
                    src[static_cast<size_t>(lo) * stride + j] * (1.0 - frac) +
                    src[static_cast<size_t>(lo + 1) * stride + j] * frac;
            }
        }
    }
}

} // namespace

FeatureMap resize_map(const FeatureMap& map, int h, int w) {
    if (map.rows < 1 || map.cols < 1) throw ShapeError("resize_map: empty map");
    if (h < 1 || w < 1) throw ShapeError("resize_map: bad target size");

    // Rows first, then columns; the two axes are independent.
    FeatureMap mid;
    mid.kind = map.kind;
    mid.meta = map.meta;
    mid.rows = h;
    mid.cols = map.cols;
    mid.values.assign(static_cast<size_t>(h) * map.cols, 0.0);
    resize_axis(map.values, map.rows, h, map.cols, map.cols, mid.values, map.cols);

    FeatureMap out;
    out.kind = map.kind;
    out.meta = map.meta;
    out.rows = h;
    out.cols = w;
    out.values.assign(static_cast<size_t>(h) * w, 0.0);
    for (int r = 0; r < h; ++r) {
        const std::vector<double> row(mid.values.begin() + static_cast<size_t>(r) * map.cols,
                                      mid.values.begin() + static_cast<size_t>(r + 1) * map.cols);
        std::vector<double> dst_row(w, 0.0);
        resize_axis(row, map.cols, w, 1, 1, dst_row, 1);
        std::copy(dst_row.begin(), dst_row.end(), out.values.begin() + static_cast<size_t>(r) * w);
    }
    return out;
}

StackedTensor stack(const std::vector<FeatureMap>& maps) {
    if (maps.empty()) throw StackError("stack: no maps");
    const int h = maps[0].rows;
    const int w = maps[0].cols;
    for (const auto& m : maps) {
        if (m.rows != h || m.cols != w) {
            throw StackError("stack: size mismatch between feature maps");
        }
    }
    StackedTensor t;
    t.height = h;
    t.width = w;
    t.channels = static_cast<int>(maps.size());
    t.data.assign(static_cast<size_t>(h) * w * t.channels, 0.0);
    t.norm_mean.assign(t.channels, 0.0);
    t.norm_std.assign(t.channels, 1.0);
    for (int c = 0; c < t.channels; ++c) {
        t.channel_kinds.push_back(maps[c].kind);
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) t.at(y, x, c) = maps[c].at(y, x);
        }
    }
    return t;
}

std::vector<FeatureKind> config_from_name(const std::string& name) {
    std::vector<FeatureKind> kinds;
    std::string token;
    std::istringstream in(name);
    while (std::getline(in, token, '+')) {
        // allow surrounding whitespace, as in "LM + TZ"
        const auto b = token.find_first_not_of(" \t");
        const auto e = token.find_last_not_of(" \t");
        if (b == std::string::npos) throw ConfigError("unknown feature token " + token);
        kinds.push_back(kind_from_name(token.substr(b, e - b + 1)));
    }
    if (kinds.empty()) throw ConfigError("empty feature configuration");
    return kinds;
}

std::string config_to_name(const std::vector<FeatureKind>& kinds) {
    std::string out;
    for (size_t i = 0; i < kinds.size(); ++i) {
        if (i) out += '+';
        out += kind_name(kinds[i]);
    }
    return out;
}

StackedTensor extract_stack(const audio::AudioClip& clip, const std::vector<FeatureKind>& kinds,
                            const FeatureConfig& cfg) {
    std::vector<FeatureMap> maps;
    maps.reserve(kinds.size());
    for (FeatureKind k : kinds) maps.push_back(resize_map(extract(k, clip, cfg)));
    return stack(maps);
}

void write_fmap(std::ostream& out, const FeatureMap& map) {
    out.write("FMAP", 4);
    write_u32le(out, kFmapVersion);
    write_u32le(out, static_cast<uint32_t>(map.rows));
    write_u32le(out, static_cast<uint32_t>(map.cols));
    const auto kind = static_cast<uint8_t>(map.kind);
    out.write(reinterpret_cast<const char*>(&kind), 1);
    for (double v : map.values) {
        uint64_t bits;
        std::memcpy(&bits, &v, 8);
        uint8_t b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<uint8_t>(bits >> (8 * i) & 0xff);
        out.write(reinterpret_cast<const char*>(b), 8);
    }
}

FeatureMap read_fmap(std::istream& in) {
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "FMAP", 4) != 0) throw DecodeError("fmap: bad magic");
    const uint32_t version = read_u32le(in);
    if (version != kFmapVersion) throw DecodeError("fmap: unsupported version");
    FeatureMap map;
    map.rows = static_cast<int>(read_u32le(in));
    map.cols = static_cast<int>(read_u32le(in));
    uint8_t kind;
    in.read(reinterpret_cast<char*>(&kind), 1);
    if (!in || kind > 5) throw DecodeError("fmap: bad kind code");
    map.kind = static_cast<FeatureKind>(kind);
    map.values.resize(static_cast<size_t>(map.rows) * map.cols);
    for (double& v : map.values) {
        uint8_t b[8];
        in.read(reinterpret_cast<char*>(b), 8);
        if (!in) throw DecodeError("fmap: truncated payload");
        uint64_t bits = 0;
        for (int i = 0; i < 8; ++i) bits |= static_cast<uint64_t>(b[i]) << (8 * i);
        std::memcpy(&v, &bits, 8);
    }
    return map;
}

void write_fmap_file(const std::string& path, const std::vector<FeatureMap>& maps) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DecodeError("write_fmap_file: cannot open " + path);
    for (const auto& m : maps) write_fmap(out, m);
}

std::vector<FeatureMap> read_fmap_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DecodeError("read_fmap_file: cannot open " + path);
    std::vector<FeatureMap> maps;
    while (in.peek() != std::char_traits<char>::eof()) maps.push_back(read_fmap(in));
    return maps;
}

} // namespace sonostack::features
