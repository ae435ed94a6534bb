#include "sonostack/features.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "sonostack/errors.hpp"
#include "test_support.hpp"

using namespace sonostack;
using features::FeatureConfig;
using features::FeatureKind;
using test_support::noise_clip;
using test_support::sine_clip;

namespace {

FeatureConfig small_cfg() {
    FeatureConfig cfg;
    cfg.n_mels = 40;
    cfg.n_mfcc = 13;
    cfg.n_gtcc = 13;
    return cfg;
}

audio::AudioClip silence(double seconds = 0.3, int rate = 22050) {
    audio::AudioClip clip;
    clip.sample_rate = rate;
    clip.samples.assign(static_cast<size_t>(seconds * rate), 0.0);
    return clip;
}

} // namespace

TEST_CASE("log_mel of silence is log(epsilon) everywhere") {
    const auto cfg = small_cfg();
    const auto map = features::log_mel(silence(), cfg);
    CHECK(map.rows == cfg.n_mels);
    for (double v : map.values) CHECK(v == doctest::Approx(std::log(cfg.epsilon)).epsilon(1e-12));
}

TEST_CASE("log_mel shifts by log 4 when the clip is doubled") {
    const auto cfg = small_cfg();
    auto clip = noise_clip(0.3, 22050, 21, 0.45);
    auto louder = clip;
    for (auto& s : louder.samples) s *= 2.0;

    const auto base = features::log_mel(clip, cfg);
    const auto shifted = features::log_mel(louder, cfg);
    for (size_t i = 0; i < base.values.size(); ++i) {
        if (base.values[i] > std::log(cfg.epsilon) + 8.0) { // energy well above the guard
            CHECK(shifted.values[i] - base.values[i] ==
                  doctest::Approx(std::log(4.0)).epsilon(1e-6));
        }
    }
}

TEST_CASE("log_mel of a 1 kHz tone peaks at the filter nearest 1 kHz") {
    const auto cfg = small_cfg();
    const auto map = features::log_mel(sine_clip(1000.0, 0.4, 22050), cfg);
    const auto bank = dsp::mel_filterbank(cfg.n_mels, cfg.n_fft, cfg.sample_rate, 20.0,
                                          cfg.sample_rate / 2.0);

    std::vector<double> row_mean(map.rows, 0.0);
    for (int m = 0; m < map.rows; ++m) {
        for (int t = 0; t < map.cols; ++t) row_mean[m] += map.at(m, t);
    }
    const int argmax = static_cast<int>(std::max_element(row_mean.begin(), row_mean.end()) -
                                        row_mean.begin());
    int nearest = 0;
    for (int m = 1; m < bank.n_filters; ++m) {
        if (std::abs(bank.centers_hz[m] - 1000.0) < std::abs(bank.centers_hz[nearest] - 1000.0)) {
            nearest = m;
        }
    }
    CHECK(argmax == nearest);
}

TEST_CASE("cepstral stage: unit energies give zero coefficients") {
    const auto coeffs = features::cepstra_from_energies(std::vector<double>(128, 1.0), 40, 1e-10);
    for (double c : coeffs) CHECK(std::abs(c) < 1e-6);
}

TEST_CASE("cepstral stage with one filter: C_0 = log(S_0 + eps)") {
    const auto coeffs = features::cepstra_from_energies({2.5}, 1, 1e-10);
    CHECK(coeffs[0] == doctest::Approx(std::log(2.5 + 1e-10)).epsilon(1e-12));
}

TEST_CASE("mfcc equals the direct cepstrum oracle on the module's own energies") {
    const auto cfg = small_cfg();
    const auto clip = noise_clip(0.2, 22050, 31);
    const auto map = features::mfcc(clip, cfg);
    REQUIRE(map.rows == cfg.n_mfcc);

    // independent route: spectrogram -> filter energies -> log -> DCT loop
    const auto spec = dsp::stft(clip, cfg.n_fft, cfg.hop, dsp::hamming_window(cfg.n_fft));
    const auto bank = dsp::mel_filterbank(cfg.n_mels, cfg.n_fft, cfg.sample_rate, 20.0,
                                          cfg.sample_rate / 2.0);
    for (int t = 0; t < map.cols; ++t) {
        std::vector<double> log_en(cfg.n_mels);
        for (int m = 0; m < cfg.n_mels; ++m) {
            double acc = 0.0;
            for (int k = 0; k < spec.n_bins; ++k) acc += spec.at(t, k) * bank.at(m, k);
            log_en[m] = std::log(acc + cfg.epsilon);
        }
        for (int n = 0; n < cfg.n_mfcc; ++n) {
            double expected = 0.0;
            for (int m = 0; m < cfg.n_mels; ++m) {
                expected += log_en[m] * std::cos(n * (m + 0.5) * M_PI / cfg.n_mels);
            }
            CHECK(std::abs(map.at(n, t) - expected) < 1e-10);
        }
    }
}

TEST_CASE("gtcc matches the direct oracle and shares the mfcc code path") {
    const auto cfg = small_cfg();
    const auto clip = noise_clip(0.2, 22050, 32);

    const auto map = features::gtcc(clip, cfg);
    REQUIRE(map.rows == cfg.n_gtcc);

    const auto spec = dsp::stft(clip, cfg.n_fft, cfg.hop, dsp::hamming_window(cfg.n_fft));
    const auto bank = dsp::gammatone_filterbank(cfg.n_mels, cfg.n_fft, cfg.sample_rate, 20.0,
                                                cfg.sample_rate / 2.0);
    for (int t = 0; t < map.cols; ++t) {
        std::vector<double> log_en(cfg.n_mels);
        for (int m = 0; m < cfg.n_mels; ++m) {
            double acc = 0.0;
            for (int k = 0; k < spec.n_bins; ++k) acc += spec.at(t, k) * bank.at(m, k);
            log_en[m] = std::log(acc + cfg.epsilon);
        }
        for (int n = 0; n < cfg.n_gtcc; ++n) {
            double expected = 0.0;
            for (int m = 0; m < cfg.n_mels; ++m) {
                expected += log_en[m] * std::cos(n * (m + 0.5) * M_PI / cfg.n_mels);
            }
            CHECK(std::abs(map.at(n, t) - expected) < 1e-10);
        }
    }

    // swapping the mel bank into the shared stage reproduces mfcc bit-for-bit
    const auto mel_bank = dsp::mel_filterbank(cfg.n_mels, cfg.n_fft, cfg.sample_rate, 20.0,
                                              cfg.sample_rate / 2.0);
    const auto via_stage =
        features::cepstral_map(clip, cfg, mel_bank, cfg.n_mfcc, FeatureKind::MFCC);
    CHECK(via_stage.values == features::mfcc(clip, cfg).values);
}

TEST_CASE("chroma of silence is near zero; 440 Hz lands in class A") {
    const auto cfg = small_cfg();
    const auto quiet = features::chroma(silence(), cfg);
    REQUIRE(quiet.rows == 12);
    for (double v : quiet.values) CHECK(std::abs(v) < 1e-9);

    const auto tone = features::chroma(sine_clip(440.0, 0.4, 22050), cfg);
    for (int t = 1; t + 1 < tone.cols; ++t) { // skip edge frames with partial windows
        int argmax = 0;
        for (int n = 1; n < 12; ++n) {
            if (tone.at(n, t) > tone.at(argmax, t)) argmax = n;
        }
        CHECK(argmax == 0);
    }
}

TEST_CASE("chroma row sums stay within [0, 1] and reach 1 for voiced frames") {
    const auto cfg = small_cfg();
    // a tone far above DC keeps the unassigned DC-bin leakage below 1e-6
    const auto tone = features::chroma(sine_clip(4186.0, 0.4, 22050, 0.6), cfg);
    for (int t = 0; t < tone.cols; ++t) {
        double sum = 0.0;
        for (int n = 0; n < 12; ++n) sum += tone.at(n, t);
        CHECK(sum <= 1.0 + 1e-12);
        if (t > 0 && t + 1 < tone.cols) CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("spectral contrast of an impulse clip is zero in every band") {
    const auto cfg = small_cfg();
    audio::AudioClip clip = silence(0.2);
    clip.samples[0] = 0.9; // flat magnitude spectrum in frame 0
    const auto map = features::spectral_contrast(clip, cfg);
    REQUIRE(map.rows == cfg.n_contrast_bands);
    for (double v : map.values) CHECK(std::abs(v) < 1e-12);
}

TEST_CASE("spectral contrast is invariant under amplitude scaling") {
    const auto cfg = small_cfg();
    auto clip = noise_clip(0.3, 22050, 41, 0.4);
    auto louder = clip;
    for (auto& s : louder.samples) s *= 3.7;
    const auto a = features::spectral_contrast(clip, cfg);
    const auto b = features::spectral_contrast(louder, cfg);
    for (size_t i = 0; i < a.values.size(); ++i) {
        CHECK(std::abs(a.values[i] - b.values[i]) < 1e-6);
    }
}

TEST_CASE("spectral contrast matches a direct band scan") {
    const auto cfg = small_cfg();
    const auto clip = noise_clip(0.2, 22050, 42);
    const auto map = features::spectral_contrast(clip, cfg);

    const auto spec = dsp::stft(clip, cfg.n_fft, cfg.hop, dsp::hamming_window(cfg.n_fft));
    const auto bands = dsp::octave_subbands(cfg.n_contrast_bands, cfg.n_fft, cfg.sample_rate,
                                            cfg.contrast_fmin);
    for (int t = 0; t < map.cols; ++t) {
        for (int m = 0; m < cfg.n_contrast_bands; ++m) {
            double lo = 1e300, hi = -1.0;
            for (int k = 0; k < spec.n_bins; ++k) {
                if (bands.at(m, k) == 0.0) continue;
                const double mag = std::sqrt(spec.at(t, k));
                lo = std::min(lo, mag);
                hi = std::max(hi, mag);
            }
            const double expected = (hi - lo) / (hi + lo + cfg.epsilon);
            CHECK(map.at(m, t) == doctest::Approx(expected).epsilon(1e-12));
            CHECK(map.at(m, t) >= 0.0);
            CHECK(map.at(m, t) < 1.0);
        }
    }
}

TEST_CASE("tonal centroid matrix: uniform chroma cancels, one-hot selects a column") {
    const auto u = features::tonal_centroid_matrix();
    REQUIRE(u.size() == 72);
    for (int r = 0; r < 6; ++r) {
        double rowsum = 0.0;
        for (int n = 0; n < 12; ++n) rowsum += u[r * 12 + n];
        CHECK(std::abs(rowsum) < 1e-12); // uniform chroma maps to the origin
    }
    // one-hot class 0 picks out column 0: all angles are zero there
    CHECK(u[0 * 12 + 0] == doctest::Approx(0.0)); // sin fifths
    CHECK(u[1 * 12 + 0] == doctest::Approx(1.0)); // cos fifths
    CHECK(u[2 * 12 + 0] == doctest::Approx(0.0)); // sin minor thirds
    CHECK(u[3 * 12 + 0] == doctest::Approx(1.0)); // cos minor thirds
    CHECK(u[4 * 12 + 0] == doctest::Approx(0.0)); // sin major thirds
    CHECK(u[5 * 12 + 0] == doctest::Approx(0.5)); // cos major thirds, r = 0.5
}

TEST_CASE("tonnetz equals U times chroma frame-wise") {
    const auto cfg = small_cfg();
    const auto clip = noise_clip(0.25, 22050, 51);
    const auto tz = features::tonnetz(clip, cfg);
    const auto ch = features::chroma(clip, cfg);
    const auto u = features::tonal_centroid_matrix();

    REQUIRE(tz.rows == 6);
    REQUIRE(tz.cols == ch.cols);
    for (int t = 0; t < tz.cols; ++t) {
        for (int r = 0; r < 6; ++r) {
            double expected = 0.0;
            for (int n = 0; n < 12; ++n) expected += u[r * 12 + n] * ch.at(n, t);
            CHECK(std::abs(tz.at(r, t) - expected) < 1e-12);
        }
    }
}

TEST_CASE("resize_map: identity, padding, and constant interpolation") {
    features::FeatureMap id;
    id.rows = 128;
    id.cols = 128;
    id.values.resize(128 * 128);
    nn::Rng rng(3);
    for (auto& v : id.values) v = rng.uniform(-1, 1);
    const auto same = features::resize_map(id);
    CHECK(same.values == id.values);

    features::FeatureMap chroma_like;
    chroma_like.rows = 12;
    chroma_like.cols = 128;
    chroma_like.kind = FeatureKind::CH;
    chroma_like.values.resize(12 * 128);
    for (auto& v : chroma_like.values) v = rng.uniform(-1, 1);
    const auto padded = features::resize_map(chroma_like);
    REQUIRE(padded.rows == 128);
    for (int r = 0; r < 12; ++r) {
        for (int c = 0; c < 128; ++c) CHECK(padded.at(r, c) == chroma_like.at(r, c));
    }
    for (int r = 12; r < 128; ++r) {
        for (int c = 0; c < 128; ++c) CHECK(padded.at(r, c) == 0.0);
    }

    features::FeatureMap big;
    big.rows = 256;
    big.cols = 256;
    big.values.assign(256 * 256, 0.77);
    const auto shrunk = features::resize_map(big);
    REQUIRE(shrunk.rows == 128);
    for (double v : shrunk.values) CHECK(v == doctest::Approx(0.77).epsilon(1e-12));
}

TEST_CASE("stack shapes follow the channel count") {
    auto map_of = [](FeatureKind kind) {
        features::FeatureMap m;
        m.kind = kind;
        m.rows = 128;
        m.cols = 128;
        m.values.assign(128 * 128, 0.5);
        return m;
    };

    const auto three = features::stack(
        {map_of(FeatureKind::MFCC), map_of(FeatureKind::GTCC), map_of(FeatureKind::LM)});
    CHECK(three.height == 128);
    CHECK(three.width == 128);
    CHECK(three.channels == 3);

    const auto four = features::stack({map_of(FeatureKind::MFCC), map_of(FeatureKind::GTCC),
                                       map_of(FeatureKind::CH), map_of(FeatureKind::LM)});
    CHECK(four.channels == 4);
    CHECK(four.channel_kinds == std::vector<FeatureKind>{FeatureKind::MFCC, FeatureKind::GTCC,
                                                         FeatureKind::CH, FeatureKind::LM});

    const auto one = features::stack({map_of(FeatureKind::LM)});
    CHECK(one.channels == 1);

    auto mismatched = map_of(FeatureKind::TZ);
    mismatched.rows = 64;
    mismatched.values.resize(64 * 128);
    CHECK_THROWS_AS(features::stack({map_of(FeatureKind::LM), mismatched}), StackError);
}

TEST_CASE("config_from_name handles the published configurations") {
    using K = FeatureKind;
    const std::vector<std::pair<std::string, std::vector<K>>> table = {
        {"LM", {K::LM}},
        {"LM+TZ", {K::LM, K::TZ}},
        {"LM+MFCC", {K::LM, K::MFCC}},
        {"MFCC+TZ", {K::MFCC, K::TZ}},
        {"LM+SPC+CH", {K::LM, K::SPC, K::CH}},
        {"MFCC+GTCC+CH+LM", {K::MFCC, K::GTCC, K::CH, K::LM}},
    };
    for (const auto& [name, expected] : table) {
        CHECK(features::config_from_name(name) == expected);
    }
    CHECK(features::config_from_name("lm") == std::vector<K>{K::LM});
    CHECK_THROWS_WITH_AS(features::config_from_name("LM+XYZ"), doctest::Contains("XYZ"),
                         ConfigError);
}

TEST_CASE("extractors are deterministic") {
    const auto cfg = small_cfg();
    const auto clip = noise_clip(0.2, 22050, 61);
    for (auto kind : {FeatureKind::LM, FeatureKind::MFCC, FeatureKind::GTCC, FeatureKind::CH,
                      FeatureKind::SPC, FeatureKind::TZ}) {
        const auto a = features::extract(kind, clip, cfg);
        const auto b = features::extract(kind, clip, cfg);
        CHECK(a.values == b.values);
    }
}

TEST_CASE("chroma and contrast bounds hold across many random clips") {
    const auto cfg = small_cfg();
    for (int i = 0; i < 1000; ++i) {
        const auto clip = noise_clip(0.06, 22050, 1000 + i);
        const auto ch = features::chroma(clip, cfg);
        for (int t = 0; t < ch.cols; ++t) {
            double sum = 0.0;
            for (int n = 0; n < 12; ++n) sum += ch.at(n, t);
            CHECK(sum <= 1.0 + 1e-9);
        }
        const auto sc = features::spectral_contrast(clip, cfg);
        for (double v : sc.values) {
            CHECK(v >= 0.0);
            CHECK(v < 1.0);
        }
    }
}

TEST_CASE("scale invariance of chroma and tonnetz") {
    const auto cfg = small_cfg();
    const auto clip = noise_clip(0.2, 22050, 71, 0.5);
    auto louder = clip;
    for (auto& s : louder.samples) s *= 2.9;

    const auto ch_a = features::chroma(clip, cfg);
    const auto ch_b = features::chroma(louder, cfg);
    for (size_t i = 0; i < ch_a.values.size(); ++i) {
        CHECK(std::abs(ch_a.values[i] - ch_b.values[i]) < 1e-6);
    }
    const auto tz_a = features::tonnetz(clip, cfg);
    const auto tz_b = features::tonnetz(louder, cfg);
    for (size_t i = 0; i < tz_a.values.size(); ++i) {
        CHECK(std::abs(tz_a.values[i] - tz_b.values[i]) < 1e-6);
    }
}

TEST_CASE("extract_stack resizes every Table configuration to 128x128xC") {
    const auto cfg = small_cfg();
    const auto clip = sine_clip(700.0, 0.5, 22050);
    for (const char* name : {"LM", "LM+TZ", "LM+MFCC", "MFCC+TZ", "LM+SPC+CH",
                             "MFCC+GTCC+CH+LM"}) {
        const auto kinds = features::config_from_name(name);
        const auto stacked = features::extract_stack(clip, kinds, cfg);
        CHECK(stacked.height == 128);
        CHECK(stacked.width == 128);
        CHECK(stacked.channels == static_cast<int>(kinds.size()));
        CHECK(stacked.channel_kinds == kinds);
    }
}

TEST_CASE("degenerate inputs are rejected with typed errors") {
    CHECK_THROWS_AS(features::stack({}), StackError);

    features::FeatureMap empty;
    CHECK_THROWS_AS(features::resize_map(empty), ShapeError);

    features::FeatureConfig bad;
    bad.n_mfcc = bad.n_mels + 1;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = features::FeatureConfig{};
    bad.epsilon = 0.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = features::FeatureConfig{};
    bad.hop = bad.n_fft + 1;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("fmap byte layout is pinned") {
    features::FeatureMap map;
    map.kind = FeatureKind::TZ;
    map.rows = 1;
    map.cols = 2;
    map.values = {1.0, -2.0};

    std::ostringstream out(std::ios::binary);
    features::write_fmap(out, map);
    const std::string bytes = out.str();

    const std::string expected =
        std::string("FMAP") +                                  // magic
        std::string("\x01\x00\x00\x00", 4) +                   // version 1, u32 LE
        std::string("\x01\x00\x00\x00", 4) +                   // rows
        std::string("\x02\x00\x00\x00", 4) +                   // cols
        std::string("\x05", 1) +                                // kind code TZ=5
        std::string("\x00\x00\x00\x00\x00\x00\xf0\x3f", 8) +   // 1.0 as f64 LE
        std::string("\x00\x00\x00\x00\x00\x00\x00\xc0", 8);    // -2.0 as f64 LE
    CHECK(bytes == expected);
}

TEST_CASE("fmap records round-trip through a file") {
    test_support::TempDir dir("fmap");
    const auto cfg = small_cfg();
    const auto clip = noise_clip(0.2, 22050, 81);
    const auto maps = std::vector<features::FeatureMap>{
        features::resize_map(features::log_mel(clip, cfg)),
        features::resize_map(features::chroma(clip, cfg)),
    };
    const auto path = (dir / "test.fmap").string();
    features::write_fmap_file(path, maps);

    const auto loaded = features::read_fmap_file(path);
    REQUIRE(loaded.size() == 2);
    for (size_t i = 0; i < maps.size(); ++i) {
        CHECK(loaded[i].kind == maps[i].kind);
        CHECK(loaded[i].rows == maps[i].rows);
        CHECK(loaded[i].cols == maps[i].cols);
        CHECK(loaded[i].values == maps[i].values);
    }

    // truncation mid-record is rejected
    std::filesystem::resize_file(path, std::filesystem::file_size(path) / 2 + 100);
    CHECK_THROWS_AS(features::read_fmap_file(path), DecodeError);
}
