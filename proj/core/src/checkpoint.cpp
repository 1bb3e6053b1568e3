#include "rstm/checkpoint.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>
#include <vector>

namespace rstm {

namespace {

constexpr char kMagic[4] = {'R', 'S', 'T', 'M'};
constexpr std::uint8_t kVersion = 1;

void put_bytes(std::vector<std::uint8_t>& buf, const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf.insert(buf.end(), b, b + n);
}

template <typename T>
void put_le(std::vector<std::uint8_t>& buf, T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i)
        buf.push_back(static_cast<std::uint8_t>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
}

struct Reader {
    const std::uint8_t* p;
    std::size_t n, pos = 0;
    const std::string& path;

    void need(std::size_t k) {
        if (pos + k > n)
            throw CheckpointError("truncated checkpoint " + path + " at byte " +
                                  std::to_string(pos));
    }
    template <typename T>
    T get_le() {
        need(sizeof(T));
        std::uint64_t v = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i)
            v |= static_cast<std::uint64_t>(p[pos + i]) << (8 * i);
        pos += sizeof(T);
        return static_cast<T>(v);
    }
    void get_bytes(void* out, std::size_t k) {
        need(k);
        std::memcpy(out, p + pos, k);
        pos += k;
    }
};

}  // namespace

void save_checkpoint(const std::string& path, const TensorMap& tensors) {
    std::vector<std::uint8_t> buf;
    put_bytes(buf, kMagic, 4);
    buf.push_back(kVersion);
    put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        put_le<std::uint16_t>(buf, static_cast<std::uint16_t>(name.size()));
        put_bytes(buf, name.data(), name.size());
        buf.push_back(static_cast<std::uint8_t>(t.dims.size()));
        for (int d : t.dims) put_le<std::uint64_t>(buf, static_cast<std::uint64_t>(d));
        static_assert(sizeof(float) == 4);
        put_bytes(buf, t.data.data(), t.data.size() * 4);
    }
    std::uint32_t crc =
        static_cast<std::uint32_t>(crc32(0, buf.data(), static_cast<uInt>(buf.size())));
    put_le<std::uint32_t>(buf, crc);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open " + path + " for writing");
    f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!f) throw CheckpointError("write failed for " + path);
}

TensorMap load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open " + path);
    std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
    if (buf.size() < 13) throw CheckpointError("checkpoint too short: " + path);
    std::uint32_t stored = 0;
    for (int i = 0; i < 4; ++i)
        stored |= static_cast<std::uint32_t>(buf[buf.size() - 4 + static_cast<std::size_t>(i)])
                  << (8 * i);
    std::uint32_t actual = static_cast<std::uint32_t>(
        crc32(0, buf.data(), static_cast<uInt>(buf.size() - 4)));
    if (stored != actual)
        throw CheckpointError("CRC mismatch in " + path + " (stored " + std::to_string(stored) +
                              ", computed " + std::to_string(actual) + ")");
    Reader r{buf.data(), buf.size() - 4, 0, path};
    char magic[4];
    r.get_bytes(magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0) throw CheckpointError("bad magic in " + path);
    std::uint8_t ver = r.get_le<std::uint8_t>();
    if (ver != kVersion)
        throw CheckpointError("unsupported checkpoint version " + std::to_string(ver) + " in " +
                              path);
    std::uint32_t count = r.get_le<std::uint32_t>();
    TensorMap out;
    for (std::uint32_t i = 0; i < count; ++i) {
        std::uint16_t nl = r.get_le<std::uint16_t>();
        std::string name(nl, '\0');
        r.get_bytes(name.data(), nl);
        std::uint8_t nd = r.get_le<std::uint8_t>();
        std::vector<int> dims(nd);
        for (auto& d : dims) d = static_cast<int>(r.get_le<std::uint64_t>());
        TensorF t(dims);
        r.get_bytes(t.data.data(), t.data.size() * 4);
        out.emplace(std::move(name), std::move(t));
    }
    if (r.pos != r.n)
        throw CheckpointError("trailing bytes in " + path + " at byte " + std::to_string(r.pos));
    return out;
}

TensorMap snapshot(const ParamStore<float>& ps) {
    TensorMap out;
    for (const auto& [name, e] : ps.entries()) {
        out.emplace(name, e.value);
        if (!e.m.data.empty()) {
            out.emplace(name + ".adam_m", e.m);
            out.emplace(name + ".adam_v", e.v);
            TensorF t({1});
            t.data[0] = static_cast<float>(e.step);
            out.emplace(name + ".adam_t", std::move(t));
        }
    }
    return out;
}

void restore(ParamStore<float>& ps, const TensorMap& tensors) {
    for (auto& [name, e] : ps.entries()) {
        auto it = tensors.find(name);
        if (it == tensors.end()) continue;
        if (it->second.dims != e.value.dims)
            throw CheckpointError("shape mismatch for " + name + ": expected " +
                                  shape_str(e.value.dims) + " got " + shape_str(it->second.dims));
        e.value = it->second;
        auto im = tensors.find(name + ".adam_m");
        auto iv = tensors.find(name + ".adam_v");
        auto is = tensors.find(name + ".adam_t");
        if (im != tensors.end() && iv != tensors.end() && is != tensors.end()) {
            e.m = im->second;
            e.v = iv->second;
            e.step = static_cast<std::int64_t>(is->second.data[0]);
        }
    }
}

}  // namespace rstm
