#include "sonostack/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <unordered_map>

#include "sonostack/errors.hpp"

namespace sonostack::models {

namespace {

constexpr uint32_t kVersion = 1;
constexpr uint8_t kDtypeF32 = 0;

uint64_t fnv1a64(const uint8_t* data, size_t len) {
    uint64_t h = 14695981039346656037ULL;
    for (size_t i = 0; i < len; ++i) {
        h ^= data[i];
        h *= 1099511628211ULL;
    }
    return h;
}

class Writer {
public:
    void u8(uint8_t v) { bytes.push_back(v); }
    void u32(uint32_t v) {
        for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<uint8_t>(v >> (8 * i) & 0xff));
    }
    void u64(uint64_t v) {
        for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<uint8_t>(v >> (8 * i) & 0xff));
    }
    void f32(float v) {
        uint32_t bits;
        std::memcpy(&bits, &v, 4);
        u32(bits);
    }
    void f64(double v) {
        uint64_t bits;
        std::memcpy(&bits, &v, 8);
        u64(bits);
    }
    void str(const std::string& s) {
        u32(static_cast<uint32_t>(s.size()));
        bytes.insert(bytes.end(), s.begin(), s.end());
    }

    std::vector<uint8_t> bytes;
};

class Reader {
public:
    Reader(const uint8_t* data, size_t len) : data_(data), len_(len) {}

    uint8_t u8() {
        need(1);
        return data_[pos_++];
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(data_[pos_++]) << (8 * i);
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(data_[pos_++]) << (8 * i);
        return v;
    }
    float f32() {
        const uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    double f64() {
        const uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    std::string str() {
        const uint32_t n = u32();
        need(n);
        std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
        pos_ += n;
        return s;
    }
    size_t remaining() const { return len_ - pos_; }

private:
    void need(size_t n) const {
        if (pos_ + n > len_) throw CheckpointError("checkpoint: truncated file");
    }

    const uint8_t* data_;
    size_t len_;
    size_t pos_ = 0;
};

void write_tensor(Writer& w, const std::string& name, const std::vector<int>& dims,
                  const float* data, size_t count) {
    w.str(name);
    w.u8(kDtypeF32);
    w.u8(static_cast<uint8_t>(dims.size()));
    for (int d : dims) w.u64(static_cast<uint64_t>(d));
    for (size_t i = 0; i < count; ++i) w.f32(data[i]);
}

struct RawTensor {
    std::vector<int> dims;
    std::vector<float> data;
};

RawTensor read_tensor(Reader& r, std::string& name) {
    name = r.str();
    if (r.u8() != kDtypeF32) throw CheckpointError("checkpoint: unsupported dtype");
    const uint8_t rank = r.u8();
    RawTensor t;
    size_t count = 1;
    for (int i = 0; i < rank; ++i) {
        const uint64_t d = r.u64();
        if (d == 0 || d > (1u << 30)) throw CheckpointError("checkpoint: implausible dimension");
        t.dims.push_back(static_cast<int>(d));
        count *= d;
    }
    t.data.resize(count);
    for (auto& v : t.data) v = r.f32();
    return t;
}

} // namespace

void save_checkpoint(Model<float>& model, const std::string& path) {
    Writer w;
    w.bytes.insert(w.bytes.end(), {'S', 'S', 'C', 'K'});
    w.u32(kVersion);
    w.str(model.spec().to_text());

    const auto params = model.named_params();
    const auto buffers = model.named_buffers();
    w.u32(static_cast<uint32_t>(params.size() + buffers.size()));
    for (const auto& p : params) {
        write_tensor(w, p.name, p.tensor->shape, p.tensor->v.data(), p.tensor->v.size());
    }
    for (const auto& b : buffers) {
        write_tensor(w, "buf:" + b.name, {static_cast<int>(b.data->size())}, b.data->data(),
                     b.data->size());
    }

    if (model.norm_mean.size() != model.norm_std.size()) {
        throw CheckpointError("checkpoint: inconsistent normalization statistics");
    }
    w.u32(static_cast<uint32_t>(model.norm_mean.size()));
    for (double m : model.norm_mean) w.f64(m);
    for (double s : model.norm_std) w.f64(s);

    w.u32(static_cast<uint32_t>(model.labels.size()));
    for (const auto& label : model.labels) w.str(label);

    w.str(model.provenance.dataset);
    w.u32(static_cast<uint32_t>(model.provenance.epochs));
    w.str(model.provenance.feature_config);

    w.u64(fnv1a64(w.bytes.data(), w.bytes.size()));

    std::ofstream out(path, std::ios::binary);
    if (!out) throw CheckpointError("checkpoint: cannot open " + path + " for writing");
    out.write(reinterpret_cast<const char*>(w.bytes.data()),
              static_cast<std::streamsize>(w.bytes.size()));
    if (!out) throw CheckpointError("checkpoint: write failed for " + path);
}

std::unique_ptr<Model<float>> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("checkpoint: cannot open " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                               std::istreambuf_iterator<char>());

    if (bytes.size() < 12 || std::memcmp(bytes.data(), "SSCK", 4) != 0) {
        throw CheckpointError("checkpoint: bad magic");
    }
    const uint64_t stored_digest =
        Reader(bytes.data() + bytes.size() - 8, 8).u64();
    if (fnv1a64(bytes.data(), bytes.size() - 8) != stored_digest) {
        throw CheckpointError("checkpoint: digest mismatch");
    }

    Reader r(bytes.data() + 4, bytes.size() - 12);
    if (r.u32() != kVersion) throw CheckpointError("checkpoint: unsupported version");
    const ModelSpec spec = ModelSpec::from_text(r.str());
    spec.validate();

    const uint32_t n_tensors = r.u32();
    std::unordered_map<std::string, RawTensor> tensors;
    for (uint32_t i = 0; i < n_tensors; ++i) {
        std::string name;
        RawTensor t = read_tensor(r, name);
        if (!tensors.emplace(std::move(name), std::move(t)).second) {
            throw CheckpointError("checkpoint: duplicate tensor");
        }
    }

    Rng rng(0);
    auto model = build_model<float>(spec, rng);

    for (auto& p : model->named_params()) {
        auto it = tensors.find(p.name);
        if (it == tensors.end()) throw CheckpointError("checkpoint: missing tensor " + p.name);
        if (it->second.dims != p.tensor->shape) {
            throw CheckpointError("checkpoint: shape mismatch for " + p.name);
        }
        p.tensor->v = std::move(it->second.data);
        tensors.erase(it);
    }
    for (auto& b : model->named_buffers()) {
        auto it = tensors.find("buf:" + b.name);
        if (it == tensors.end()) throw CheckpointError("checkpoint: missing buffer " + b.name);
        if (it->second.data.size() != b.data->size()) {
            throw CheckpointError("checkpoint: size mismatch for buffer " + b.name);
        }
        *b.data = std::move(it->second.data);
        tensors.erase(it);
    }
    if (!tensors.empty()) {
        throw CheckpointError("checkpoint: unexpected tensor " + tensors.begin()->first);
    }

    const uint32_t n_channels = r.u32();
    model->norm_mean.resize(n_channels);
    model->norm_std.resize(n_channels);
    for (auto& m : model->norm_mean) m = r.f64();
    for (auto& s : model->norm_std) s = r.f64();

    const uint32_t n_labels = r.u32();
    if (n_labels != 0 && static_cast<int>(n_labels) != spec.n_classes) {
        throw CheckpointError("checkpoint: label count does not match n_classes");
    }
    model->labels.resize(n_labels);
    for (auto& label : model->labels) label = r.str();

    model->provenance.dataset = r.str();
    model->provenance.epochs = static_cast<int>(r.u32());
    model->provenance.feature_config = r.str();

    if (r.remaining() != 0) throw CheckpointError("checkpoint: trailing bytes");
    return model;
}

} // namespace sonostack::models
