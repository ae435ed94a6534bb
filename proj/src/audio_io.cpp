#include "sonostack/audio_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "sonostack/errors.hpp"

namespace sonostack::audio {

namespace {

uint32_t read_u32le(const uint8_t* p) {
    return static_cast<uint32_t>(p[0]) | static_cast<uint32_t>(p[1]) << 8 |
           static_cast<uint32_t>(p[2]) << 16 | static_cast<uint32_t>(p[3]) << 24;
}

uint16_t read_u16le(const uint8_t* p) {
    return static_cast<uint16_t>(p[0] | p[1] << 8);
}

void write_u32le(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(static_cast<uint8_t>(v & 0xff));
    out.push_back(static_cast<uint8_t>(v >> 8 & 0xff));
    out.push_back(static_cast<uint8_t>(v >> 16 & 0xff));
    out.push_back(static_cast<uint8_t>(v >> 24 & 0xff));
}

void write_u16le(std::vector<uint8_t>& out, uint16_t v) {
    out.push_back(static_cast<uint8_t>(v & 0xff));
    out.push_back(static_cast<uint8_t>(v >> 8 & 0xff));
}

constexpr uint16_t kFormatPcm = 1;
constexpr uint16_t kFormatIeeeFloat = 3;

} // namespace

AudioClip decode_wav(const std::vector<uint8_t>& bytes, const std::string& source_id) {
    if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
        std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
        throw DecodeError("decode_wav: not a RIFF/WAVE container");
    }

    uint16_t format = 0, channels = 0, bits = 0;
    uint32_t rate = 0;
    bool have_fmt = false;
    const uint8_t* data = nullptr;
    size_t data_len = 0;

    size_t pos = 12;
    while (pos + 8 <= bytes.size()) {
        const char* id = reinterpret_cast<const char*>(bytes.data() + pos);
        const uint32_t len = read_u32le(bytes.data() + pos + 4);
        pos += 8;
        if (len > bytes.size() - pos) {
            throw DecodeError("decode_wav: chunk length exceeds byte count");
        }
        if (std::memcmp(id, "fmt ", 4) == 0) {
            if (len < 16) throw DecodeError("decode_wav: fmt chunk too short");
            format = read_u16le(bytes.data() + pos);
            channels = read_u16le(bytes.data() + pos + 2);
            rate = read_u32le(bytes.data() + pos + 4);
            bits = read_u16le(bytes.data() + pos + 14);
            have_fmt = true;
        } else if (std::memcmp(id, "data", 4) == 0) {
            data = bytes.data() + pos;
            data_len = len;
        }
        pos += len + (len & 1); // chunks are word-aligned
    }

    if (!have_fmt || data == nullptr) throw DecodeError("decode_wav: missing fmt or data chunk");
    if (rate == 0) throw DecodeError("decode_wav: zero sample rate");
    if (channels < 1 || channels > 2) {
        throw UnsupportedFormat("decode_wav: only mono and stereo are supported");
    }

    size_t bytes_per_sample;
    if (format == kFormatPcm && bits == 16) {
        bytes_per_sample = 2;
    } else if (format == kFormatIeeeFloat && bits == 32) {
        bytes_per_sample = 4;
    } else {
        throw UnsupportedFormat("decode_wav: only PCM16 and float32 are supported");
    }

    const size_t frame_size = bytes_per_sample * channels;
    const size_t n_frames = data_len / frame_size;

    AudioClip clip;
    clip.sample_rate = static_cast<int>(rate);
    clip.source_id = source_id;
    clip.samples.resize(n_frames);
    for (size_t f = 0; f < n_frames; ++f) {
        double acc = 0.0;
        for (uint16_t c = 0; c < channels; ++c) {
            const uint8_t* p = data + f * frame_size + c * bytes_per_sample;
            if (bytes_per_sample == 2) {
                const auto raw = static_cast<int16_t>(read_u16le(p));
                acc += raw / 32768.0;
            } else {
                uint32_t u = read_u32le(p);
                float v;
                std::memcpy(&v, &u, 4);
                acc += v;
            }
        }
        clip.samples[f] = acc / channels;
    }
    return clip;
}

AudioClip load_wav(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DecodeError("load_wav: cannot open " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_wav(bytes, path);
}

AudioClip resample(const AudioClip& clip, int target_rate) {
    if (target_rate <= 0) throw InvalidLength("resample: target_rate must be positive");
    if (target_rate == clip.sample_rate) return clip;

    AudioClip out;
    out.sample_rate = target_rate;
    out.source_id = clip.source_id;
    const size_t n = clip.samples.size();
    const auto out_len = static_cast<size_t>(
        std::llround(static_cast<double>(n) * target_rate / clip.sample_rate));
    out.samples.resize(out_len);
    if (n == 0) return out;

    const double step = static_cast<double>(clip.sample_rate) / target_rate;
    for (size_t i = 0; i < out_len; ++i) {
        const double t = i * step;
        auto lo = static_cast<size_t>(t);
        if (lo >= n - 1) {
            out.samples[i] = clip.samples[n - 1];
            continue;
        }
        const double frac = t - lo;
        out.samples[i] = clip.samples[lo] * (1.0 - frac) + clip.samples[lo + 1] * frac;
    }
    return out;
}

AudioClip fix_duration(const AudioClip& clip, double seconds) {
    if (seconds <= 0) throw InvalidLength("fix_duration: seconds must be positive");
    const auto target = static_cast<size_t>(std::llround(seconds * clip.sample_rate));
    AudioClip out;
    out.sample_rate = clip.sample_rate;
    out.source_id = clip.source_id;
    out.samples.assign(target, 0.0);
    const size_t keep = std::min(target, clip.samples.size());
    std::copy_n(clip.samples.begin(), keep, out.samples.begin());
    return out;
}

std::vector<uint8_t> encode_wav_pcm16(const AudioClip& clip) {
    const auto n = static_cast<uint32_t>(clip.samples.size());
    const uint32_t data_size = n * 2;

    std::vector<uint8_t> out;
    out.reserve(44 + data_size);
    out.insert(out.end(), {'R', 'I', 'F', 'F'});
    write_u32le(out, 36 + data_size);
    out.insert(out.end(), {'W', 'A', 'V', 'E'});
    out.insert(out.end(), {'f', 'm', 't', ' '});
    write_u32le(out, 16);
    write_u16le(out, kFormatPcm);
    write_u16le(out, 1); // mono
    write_u32le(out, static_cast<uint32_t>(clip.sample_rate));
    write_u32le(out, static_cast<uint32_t>(clip.sample_rate) * 2);
    write_u16le(out, 2);
    write_u16le(out, 16);
    out.insert(out.end(), {'d', 'a', 't', 'a'});
    write_u32le(out, data_size);
    for (double s : clip.samples) {
        const double clamped = std::clamp(s, -1.0, 1.0);
        auto q = static_cast<int32_t>(std::lrint(clamped * 32768.0));
        q = std::clamp(q, -32768, 32767);
        write_u16le(out, static_cast<uint16_t>(static_cast<int16_t>(q)));
    }
    return out;
}

void save_wav_pcm16(const AudioClip& clip, const std::string& path) {
    const auto bytes = encode_wav_pcm16(clip);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DecodeError("save_wav_pcm16: cannot open " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

} // namespace sonostack::audio
