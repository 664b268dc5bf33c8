#include "pocketnet/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <unordered_map>
#include <unordered_set>

#include "pocketnet/errors.hpp"

namespace pocketnet {

namespace fs = std::filesystem;

namespace {

constexpr uint32_t kCheckpointVersion = 1;

// little-endian primitives over an in-memory buffer
void put_u16(std::string& out, uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
}
void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_f32(std::string& out, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

struct Reader {
    std::string buf;
    size_t at = 0;
    fs::path path;

    void need(size_t n, const char* what) {
        if (at + n > buf.size())
            throw DataError("truncated file " + path.string() + ": needed " +
                            std::to_string(n) + " bytes for " + what + " at offset " +
                            std::to_string(at));
    }
    uint8_t u8(const char* what) {
        need(1, what);
        return static_cast<uint8_t>(buf[at++]);
    }
    uint16_t u16(const char* what) {
        need(2, what);
        uint16_t v = 0;
        for (int i = 0; i < 2; ++i) v |= static_cast<uint16_t>(static_cast<uint8_t>(buf[at + i])) << (8 * i);
        at += 2;
        return v;
    }
    uint32_t u32(const char* what) {
        need(4, what);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<uint8_t>(buf[at + i])) << (8 * i);
        at += 4;
        return v;
    }
    float f32(const char* what) {
        const uint32_t bits = u32(what);
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    std::string bytes(size_t n, const char* what) {
        need(n, what);
        std::string s = buf.substr(at, n);
        at += n;
        return s;
    }
};

Reader read_file(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open file: " + path.string());
    Reader r;
    r.path = path;
    std::ostringstream os;
    os << f.rdbuf();
    r.buf = os.str();
    return r;
}

void atomic_write_bytes(const fs::path& path, const std::string& contents) {
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw DataError("cannot write file: " + tmp.string());
        f.write(contents.data(), static_cast<std::streamsize>(contents.size()));
        if (!f) throw DataError("write failed: " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw DataError("rename failed for " + path.string() + ": " + ec.message());
}

}  // namespace

void atomic_write(const fs::path& path, const std::string& contents) {
    atomic_write_bytes(path, contents);
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

void save_checkpoint(const std::vector<NamedArray>& arrays, const fs::path& path) {
    std::unordered_set<std::string> names;
    for (const auto& a : arrays) {
        if (!names.insert(a.name).second)
            throw DataError("duplicate array name in checkpoint: " + a.name);
        if (a.shape.empty() || a.shape.size() > 4)
            throw DataError("array rank must be 1..4: " + a.name);
        long n = 1;
        for (int d : a.shape) n *= d;
        if (n != static_cast<long>(a.data.size()))
            throw DataError("array shape does not match data length: " + a.name);
        if (a.name.size() > 0xffff) throw DataError("array name too long: " + a.name);
    }
    std::string out;
    out += "PKTN";
    put_u32(out, kCheckpointVersion);
    put_u32(out, static_cast<uint32_t>(arrays.size()));
    for (const auto& a : arrays) {
        put_u16(out, static_cast<uint16_t>(a.name.size()));
        out += a.name;
        out.push_back(static_cast<char>(a.shape.size()));
        for (int d : a.shape) put_u32(out, static_cast<uint32_t>(d));
        for (float v : a.data) put_f32(out, v);
    }
    atomic_write_bytes(path, out);
}

std::vector<NamedArray> load_checkpoint(const fs::path& path) {
    Reader r = read_file(path);
    if (r.bytes(4, "magic") != "PKTN")
        throw DataError("bad checkpoint magic in " + path.string());
    const uint32_t version = r.u32("version");
    if (version != kCheckpointVersion)
        throw DataError("unsupported checkpoint version " + std::to_string(version) + " in " +
                        path.string());
    const uint32_t count = r.u32("array count");
    std::vector<NamedArray> arrays;
    std::unordered_set<std::string> names;
    for (uint32_t i = 0; i < count; ++i) {
        NamedArray a;
        const uint16_t name_len = r.u16("name length");
        a.name = r.bytes(name_len, "name");
        if (!names.insert(a.name).second)
            throw DataError("duplicate array name in checkpoint: " + a.name);
        const uint8_t rank = r.u8("rank");
        if (rank < 1 || rank > 4)
            throw DataError("bad array rank " + std::to_string(rank) + " for " + a.name);
        long n = 1;
        for (int d = 0; d < rank; ++d) {
            const uint32_t dim = r.u32("dim");
            if (dim == 0) throw DataError("zero extent in array " + a.name);
            a.shape.push_back(static_cast<int>(dim));
            n *= dim;
        }
        a.data.resize(n);
        r.need(static_cast<size_t>(n) * 4, "array data");
        for (long j = 0; j < n; ++j) a.data[j] = r.f32("array data");
        arrays.push_back(std::move(a));
    }
    if (r.at != r.buf.size())
        throw DataError("trailing bytes in checkpoint " + path.string() + " at offset " +
                        std::to_string(r.at));
    return arrays;
}

std::vector<NamedArray> snapshot_state(const std::vector<NamedTensorRef>& state) {
    std::vector<NamedArray> arrays;
    arrays.reserve(state.size());
    for (const auto& ref : state)
        arrays.push_back({ref.name, ref.shape, *ref.values});
    return arrays;
}

void load_into_state(const std::vector<NamedArray>& arrays,
                     const std::vector<NamedTensorRef>& state) {
    std::unordered_map<std::string, const NamedArray*> by_name;
    for (const auto& a : arrays) by_name[a.name] = &a;
    for (const auto& ref : state) {
        auto it = by_name.find(ref.name);
        if (it == by_name.end())
            throw DataError("checkpoint is missing array: " + ref.name);
        const NamedArray& a = *it->second;
        if (a.data.size() != ref.values->size())
            throw DataError("checkpoint array " + ref.name + " has " +
                            std::to_string(a.data.size()) + " values, expected " +
                            std::to_string(ref.values->size()));
        *ref.values = a.data;
    }
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

void Dataset::validate() const {
    if (count() == 0 || channels == 0 || height == 0 || width == 0 || classes == 0)
        throw DataError("dataset has empty dimensions");
    if (pixels.size() != static_cast<size_t>(count()) * sample_size())
        throw DataError("dataset pixel buffer does not match count*C*H*W");
    for (uint32_t l : labels)
        if (l >= classes)
            throw DataError("dataset label " + std::to_string(l) + " >= class count " +
                            std::to_string(classes));
    for (float p : pixels)
        if (!(p >= -1.0f && p <= 1.0f))
            throw DataError("dataset pixel out of [-1, 1]");
}

void save_dataset(const Dataset& ds, const fs::path& path) {
    ds.validate();
    std::string out;
    out += "PKDS";
    put_u32(out, ds.count());
    put_u32(out, ds.channels);
    put_u32(out, ds.height);
    put_u32(out, ds.width);
    put_u32(out, ds.classes);
    for (float v : ds.pixels) put_f32(out, v);
    for (uint32_t l : ds.labels) put_u32(out, l);
    atomic_write_bytes(path, out);
}

Dataset load_dataset(const fs::path& path) {
    Reader r = read_file(path);
    if (r.bytes(4, "magic") != "PKDS")
        throw DataError("bad dataset magic in " + path.string());
    Dataset ds;
    const uint32_t count = r.u32("sample count");
    ds.channels = r.u32("channels");
    ds.height = r.u32("height");
    ds.width = r.u32("width");
    ds.classes = r.u32("class count");
    const size_t n = static_cast<size_t>(count) * ds.channels * ds.height * ds.width;
    ds.pixels.resize(n);
    r.need(n * 4, "pixel data");
    for (size_t i = 0; i < n; ++i) ds.pixels[i] = r.f32("pixel data");
    ds.labels.resize(count);
    for (uint32_t i = 0; i < count; ++i) ds.labels[i] = r.u32("label");
    if (r.at != r.buf.size())
        throw DataError("trailing bytes in dataset " + path.string());
    ds.validate();
    return ds;
}

// ---------------------------------------------------------------------------
// Synthetic identities
// ---------------------------------------------------------------------------

Dataset synth_identities(int n_ids, int per_id, int size, uint32_t seed, float noise_sigma) {
    if (n_ids < 2) throw UsageError("synth_identities needs at least 2 identities");
    if (size < 16) throw UsageError("synth_identities needs size >= 16");
    if (per_id < 1) throw UsageError("synth_identities needs per_id >= 1");

    Dataset ds;
    ds.channels = 3;
    ds.height = ds.width = static_cast<uint32_t>(size);
    ds.classes = static_cast<uint32_t>(n_ids);
    ds.pixels.reserve(static_cast<size_t>(n_ids) * per_id * 3 * size * size);

    Rng rng(seed);
    struct IdentityParams {
        float cx, cy, rx, ry, base, lm1x, lm1y, lm2x, lm2y, tint_r, tint_b;
    };
    std::vector<IdentityParams> ids;
    for (int k = 0; k < n_ids; ++k) {
        IdentityParams p;
        p.cx = rng.uniform(0.35f, 0.65f);
        p.cy = rng.uniform(0.35f, 0.65f);
        p.rx = rng.uniform(0.18f, 0.42f);  // ellipse eccentricity via rx != ry
        p.ry = rng.uniform(0.18f, 0.42f);
        p.base = rng.uniform(-0.5f, 0.5f);
        p.lm1x = rng.uniform(-0.25f, 0.25f);
        p.lm1y = rng.uniform(-0.25f, 0.25f);
        p.lm2x = rng.uniform(-0.25f, 0.25f);
        p.lm2y = rng.uniform(-0.25f, 0.25f);
        p.tint_r = rng.uniform(-0.3f, 0.3f);
        p.tint_b = rng.uniform(-0.3f, 0.3f);
        ids.push_back(p);
    }

    std::vector<float> img(3 * static_cast<size_t>(size) * size);
    for (int k = 0; k < n_ids; ++k) {
        const auto& p = ids[k];
        for (int s = 0; s < per_id; ++s) {
            const bool flip = rng.bernoulli(0.5f);
            for (int y = 0; y < size; ++y)
                for (int x = 0; x < size; ++x) {
                    const float fx = (static_cast<float>(x) + 0.5f) / size;
                    const float fy = (static_cast<float>(y) + 0.5f) / size;
                    const float dx = (fx - p.cx) / p.rx;
                    const float dy = (fy - p.cy) / p.ry;
                    float v = p.base * 0.3f;
                    if (dx * dx + dy * dy <= 1.0f) v = p.base;
                    auto landmark = [&](float lx, float ly, float val) {
                        const float ddx = fx - (p.cx + lx * p.rx);
                        const float ddy = fy - (p.cy + ly * p.ry);
                        if (ddx * ddx + ddy * ddy < 0.004f) v = val;
                    };
                    landmark(p.lm1x, p.lm1y, std::min(1.0f, p.base + 0.6f));
                    landmark(p.lm2x, p.lm2y, std::max(-1.0f, p.base - 0.6f));
                    for (int c = 0; c < 3; ++c) {
                        float tinted = v;
                        if (c == 0) tinted += p.tint_r * 0.2f;
                        if (c == 2) tinted += p.tint_b * 0.2f;
                        img[(static_cast<size_t>(c) * size + y) * size + x] = tinted;
                    }
                }
            for (int c = 0; c < 3; ++c)
                for (int y = 0; y < size; ++y)
                    for (int x = 0; x < size; ++x) {
                        const int sx = flip ? size - 1 - x : x;
                        float v = img[(static_cast<size_t>(c) * size + y) * size + sx];
                        if (noise_sigma > 0.0f) v += rng.gaussian(0.0f, noise_sigma);
                        ds.pixels.push_back(std::clamp(v, -1.0f, 1.0f));
                    }
            ds.labels.push_back(static_cast<uint32_t>(k));
        }
    }
    ds.validate();
    return ds;
}

// ---------------------------------------------------------------------------
// IDX ingestion
// ---------------------------------------------------------------------------

namespace {

uint32_t read_be_u32(Reader& r, const char* what) {
    r.need(4, what);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
        v = (v << 8) | static_cast<uint8_t>(r.buf[r.at + i]);
    r.at += 4;
    return v;
}

}  // namespace

Dataset load_idx(const fs::path& images, const fs::path& labels) {
    Reader ri = read_file(images);
    if (read_be_u32(ri, "image magic") != 0x00000803u)
        throw DataError("bad IDX image magic in " + images.string());
    const uint32_t count = read_be_u32(ri, "image count");
    const uint32_t rows = read_be_u32(ri, "rows");
    const uint32_t cols = read_be_u32(ri, "cols");

    Reader rl = read_file(labels);
    if (read_be_u32(rl, "label magic") != 0x00000801u)
        throw DataError("bad IDX label magic in " + labels.string());
    const uint32_t lcount = read_be_u32(rl, "label count");
    if (lcount != count)
        throw DataError("IDX image count " + std::to_string(count) + " != label count " +
                        std::to_string(lcount));

    Dataset ds;
    ds.channels = 3;
    ds.height = rows;
    ds.width = cols;
    ds.pixels.reserve(static_cast<size_t>(count) * 3 * rows * cols);
    ri.need(static_cast<size_t>(count) * rows * cols, "pixel bytes");
    rl.need(count, "label bytes");
    uint32_t max_label = 0;
    for (uint32_t i = 0; i < count; ++i) {
        const size_t base = ri.at + static_cast<size_t>(i) * rows * cols;
        for (int c = 0; c < 3; ++c)
            for (uint32_t px = 0; px < rows * cols; ++px) {
                const uint8_t raw = static_cast<uint8_t>(ri.buf[base + px]);
                ds.pixels.push_back(2.0f * raw / 255.0f - 1.0f);
            }
        const uint8_t lab = static_cast<uint8_t>(rl.buf[rl.at + i]);
        max_label = std::max(max_label, static_cast<uint32_t>(lab));
        ds.labels.push_back(lab);
    }
    ds.classes = max_label + 1;
    ds.validate();
    return ds;
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

Tensor make_batch(const Dataset& ds, const std::vector<int>& indices, Rng* flip_rng,
                  std::vector<int>& labels_out) {
    if (indices.empty()) throw UsageError("empty batch");
    const int c = static_cast<int>(ds.channels);
    const int h = static_cast<int>(ds.height);
    const int w = static_cast<int>(ds.width);
    std::vector<float> out;
    out.reserve(indices.size() * ds.sample_size());
    labels_out.clear();
    for (int idx : indices) {
        if (idx < 0 || idx >= static_cast<int>(ds.count()))
            throw DataError("batch index out of range");
        const float* src = &ds.pixels[static_cast<size_t>(idx) * ds.sample_size()];
        const bool flip = flip_rng && flip_rng->bernoulli(0.5f);
        for (int ch = 0; ch < c; ++ch)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    const int sx = flip ? w - 1 - x : x;
                    out.push_back(src[(static_cast<size_t>(ch) * h + y) * w + sx]);
                }
        labels_out.push_back(static_cast<int>(ds.labels[idx]));
    }
    return Tensor::from_data({static_cast<int>(indices.size()), c, h, w}, std::move(out));
}

}  // namespace pocketnet
