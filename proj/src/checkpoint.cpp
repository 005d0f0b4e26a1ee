#include "prefixvc/checkpoint.hpp"

#include "prefixvc/common.hpp"

#include <cstdio>
#include <cstring>

namespace prefixvc {

namespace {

constexpr char kMagic[4] = {'P', 'V', 'C', 'C'};
constexpr uint32_t kVersion = 1;

struct Writer {
    FILE * f;
    void u32(uint32_t v) {
        unsigned char b[4];
        for (int i = 0; i < 4; ++i)
            b[i] = static_cast<unsigned char>(v >> (8 * i));
        if (std::fwrite(b, 1, 4, f) != 4)
            throw Error(ErrorKind::data, "checkpoint write failed");
    }
    void str(const std::string & s) {
        u32(static_cast<uint32_t>(s.size()));
        if (!s.empty() && std::fwrite(s.data(), 1, s.size(), f) != s.size())
            throw Error(ErrorKind::data, "checkpoint write failed");
    }
    void doubles(const std::vector<double> & v) {
        if (!v.empty() && std::fwrite(v.data(), sizeof(double), v.size(), f) != v.size())
            throw Error(ErrorKind::data, "checkpoint write failed");
    }
};

struct Reader {
    FILE * f;
    std::string path;
    void fail() const { throw Error(ErrorKind::data, "truncated checkpoint: " + path); }
    uint32_t u32() {
        unsigned char b[4];
        if (std::fread(b, 1, 4, f) != 4)
            fail();
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<uint32_t>(b[i]) << (8 * i);
        return v;
    }
    std::string str() {
        const uint32_t n = u32();
        if (n > (1u << 24))
            throw Error(ErrorKind::data, "implausible string length in checkpoint: " + path);
        std::string s(n, '\0');
        if (n && std::fread(s.data(), 1, n, f) != n)
            fail();
        return s;
    }
    std::vector<double> doubles(size_t n) {
        std::vector<double> v(n);
        if (n && std::fread(v.data(), sizeof(double), n, f) != n)
            fail();
        return v;
    }
};

} // namespace

void save_checkpoint(const std::string & path, const Checkpoint & c) {
    FILE * f = std::fopen(path.c_str(), "wb");
    if (!f)
        throw Error(ErrorKind::data, "cannot open checkpoint for writing: " + path);
    try {
        Writer w{f};
        if (std::fwrite(kMagic, 1, 4, f) != 4)
            throw Error(ErrorKind::data, "checkpoint write failed");
        w.u32(kVersion);
        w.str(c.stage);
        w.u32(static_cast<uint32_t>(c.meta.size()));
        for (const auto & [k, v] : c.meta) {
            w.str(k);
            w.str(v);
        }
        w.u32(static_cast<uint32_t>(c.params.size()));
        for (const auto & [name, t] : c.params) {
            w.str(name);
            const auto & shape = t.shape();
            w.u32(static_cast<uint32_t>(shape.size()));
            for (int d : shape)
                w.u32(static_cast<uint32_t>(d));
            w.doubles(t.values());
        }
    } catch (...) {
        std::fclose(f);
        throw;
    }
    if (std::fclose(f) != 0)
        throw Error(ErrorKind::data, "checkpoint close failed: " + path);
}

Checkpoint load_checkpoint(const std::string & path) {
    FILE * f = std::fopen(path.c_str(), "rb");
    if (!f)
        throw Error(ErrorKind::data, "missing checkpoint: " + path);
    Checkpoint c;
    try {
        Reader r{f, path};
        char magic[4];
        if (std::fread(magic, 1, 4, f) != 4 || std::memcmp(magic, kMagic, 4) != 0)
            throw Error(ErrorKind::data, "not a checkpoint file: " + path);
        if (r.u32() != kVersion)
            throw Error(ErrorKind::data, "unsupported checkpoint version: " + path);
        c.stage = r.str();
        const uint32_t meta_n = r.u32();
        for (uint32_t i = 0; i < meta_n; ++i) {
            std::string k = r.str();
            c.meta[k] = r.str();
        }
        const uint32_t param_n = r.u32();
        for (uint32_t i = 0; i < param_n; ++i) {
            std::string name = r.str();
            const uint32_t rank = r.u32();
            if (rank > 4)
                throw Error(ErrorKind::data, "implausible tensor rank in checkpoint: " + path);
            std::vector<int> shape;
            size_t numel = 1;
            for (uint32_t d = 0; d < rank; ++d) {
                shape.push_back(static_cast<int>(r.u32()));
                numel *= static_cast<size_t>(shape.back());
            }
            if (numel > (1u << 28))
                throw Error(ErrorKind::data, "implausible tensor size in checkpoint: " + path);
            c.params.emplace_back(std::move(name), Tensor::from(shape, r.doubles(numel)));
        }
    } catch (...) {
        std::fclose(f);
        throw;
    }
    std::fclose(f);
    return c;
}

uint64_t bytes_checksum(const void * data, size_t n, uint64_t h) {
    const unsigned char * p = static_cast<const unsigned char *>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

uint64_t file_checksum(const std::string & path) {
    FILE * f = std::fopen(path.c_str(), "rb");
    if (!f)
        throw Error(ErrorKind::data, "cannot hash missing file: " + path);
    uint64_t h = 14695981039346656037ull;
    unsigned char buf[1 << 16];
    size_t n;
    while ((n = std::fread(buf, 1, sizeof buf, f)) > 0)
        h = bytes_checksum(buf, n, h);
    const bool bad = std::ferror(f) != 0;
    std::fclose(f);
    if (bad)
        throw Error(ErrorKind::data, "read error while hashing: " + path);
    return h;
}

std::string checksum_hex(uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

uint64_t params_checksum(const std::vector<Parameter *> & params) {
    uint64_t h = 14695981039346656037ull;
    for (const Parameter * p : params) {
        h = bytes_checksum(p->name.data(), p->name.size(), h);
        const auto & v = p->tensor.values();
        h = bytes_checksum(v.data(), v.size() * sizeof(double), h);
    }
    return h;
}

void capture_params(Checkpoint & c, const std::vector<Parameter *> & params) {
    // deep copy: a captured tensor must not follow later weight updates
    for (const Parameter * p : params)
        c.params.emplace_back(p->name, Tensor::from(p->tensor.shape(), p->tensor.values()));
}

void restore_params(const Checkpoint & c, const std::vector<Parameter *> & params) {
    std::map<std::string, const Tensor *> by_name;
    for (const auto & [name, t] : c.params)
        if (!by_name.emplace(name, &t).second)
            throw Error(ErrorKind::data, "duplicate parameter in checkpoint: " + name);
    size_t used = 0;
    for (Parameter * p : params) {
        auto it = by_name.find(p->name);
        if (it == by_name.end())
            throw Error(ErrorKind::data,
                        "checkpoint is missing parameter " + p->name + " (stage " + c.stage + ")");
        if (it->second->shape() != p->tensor.shape())
            throw Error(ErrorKind::data, "checkpoint shape mismatch for " + p->name);
        p->tensor.values() = it->second->values();
        ++used;
    }
    if (used != by_name.size())
        throw Error(ErrorKind::data, "checkpoint carries parameters unknown to this architecture");
}

} // namespace prefixvc
