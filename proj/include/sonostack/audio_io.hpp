#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace sonostack::audio {

// Mono sample buffer plus its rate. Everything downstream consumes this.
struct AudioClip {
    std::vector<double> samples; // amplitudes in [-1, 1]
    int sample_rate = 0;         // Hz, > 0
    std::string source_id;

    double duration_seconds() const {
        return sample_rate > 0 ? static_cast<double>(samples.size()) / sample_rate : 0.0;
    }
};

// Decode a RIFF/WAVE container (PCM 16-bit or IEEE float 32-bit, 1-2
// channels) into a mono clip. 16-bit samples are scaled by 1/32768,
// stereo frames averaged.
// Throws DecodeError on malformed input, UnsupportedFormat on other codecs.
AudioClip decode_wav(const std::vector<uint8_t>& bytes, const std::string& source_id = "");

// Convenience: read a whole file and decode it.
AudioClip load_wav(const std::string& path);

// Linear-interpolation resampler. Output length = round(len * target/source).
// A windowed-sinc kernel would be a drop-in replacement here; linear is
// adequate for the classification features this library computes.
AudioClip resample(const AudioClip& clip, int target_rate);

// Trim (keep the head) or zero-pad (at the tail) to exactly
// round(seconds * sample_rate) samples.
AudioClip fix_duration(const AudioClip& clip, double seconds);

// Encode a clip as PCM 16-bit mono WAV. Used by the synthetic-dataset
// writer and test fixtures.
std::vector<uint8_t> encode_wav_pcm16(const AudioClip& clip);
void save_wav_pcm16(const AudioClip& clip, const std::string& path);

} // namespace sonostack::audio
