#include "cnerf/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>

namespace cnerf {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

constexpr char kMagic[4] = {'C', 'N', 'R', 'F'};

template <typename T>
void put(std::vector<std::uint8_t>& out, T value) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
    out.insert(out.end(), p, p + sizeof(T));
}

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    template <typename T>
    T get(const char* what) {
        T v;
        std::memcpy(&v, take(sizeof(T), what), sizeof(T));
        return v;
    }

    const std::uint8_t* take(std::size_t n, const char* what) {
        if (n > bytes_.size() - pos_) throw CheckpointError(std::string("checkpoint truncated while reading ") + what);
        const auto* p = bytes_.data() + pos_;
        pos_ += n;
        return p;
    }

    std::size_t remaining() const { return bytes_.size() - pos_; }

private:
    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

std::uint32_t crc(std::span<const std::uint8_t> bytes) {
    uLong c = crc32(0L, Z_NULL, 0);
    std::size_t done = 0;
    while (done < bytes.size()) {
        const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - done, 1u << 30));
        c = crc32(c, bytes.data() + done, chunk);
        done += chunk;
    }
    return static_cast<std::uint32_t>(c);
}

}  // namespace

void Checkpoint::add(const std::string& name, std::span<const double> values) {
    if (find(name) != nullptr) throw CheckpointError("checkpoint: duplicate blob '" + name + "'");
    blobs.emplace_back(name, std::vector<double>(values.begin(), values.end()));
}

const std::vector<double>* Checkpoint::find(const std::string& name) const {
    for (const auto& [n, v] : blobs)
        if (n == name) return &v;
    return nullptr;
}

const std::vector<double>& Checkpoint::get(const std::string& name, std::size_t expected) const {
    const auto* v = find(name);
    if (v == nullptr) throw CheckpointError("checkpoint: missing blob '" + name + "'");
    if (v->size() != expected)
        throw CheckpointError("checkpoint: blob '" + name + "' has " + std::to_string(v->size()) + " values, expected " +
                              std::to_string(expected));
    return *v;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c) {
    std::vector<std::uint8_t> out(kMagic, kMagic + 4);
    put<std::uint32_t>(out, Checkpoint::kVersion);
    const std::string header = c.header.dump();
    put<std::uint64_t>(out, header.size());
    out.insert(out.end(), header.begin(), header.end());
    put<std::uint32_t>(out, static_cast<std::uint32_t>(c.blobs.size()));
    for (const auto& [name, values] : c.blobs) {
        put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        out.insert(out.end(), name.begin(), name.end());
        put<std::uint64_t>(out, values.size());
        const auto* p = reinterpret_cast<const std::uint8_t*>(values.data());
        out.insert(out.end(), p, p + values.size() * sizeof(double));
    }
    put<std::uint32_t>(out, crc(out));
    return out;
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0)
        throw CheckpointError("not a checkpoint file (bad magic)");
    if (bytes.size() < 4 + 4 + 4) throw CheckpointError("checkpoint truncated");
    Reader r(bytes.subspan(4));
    const auto version = r.get<std::uint32_t>("version");
    if (version != Checkpoint::kVersion)
        throw CheckpointError("checkpoint version " + std::to_string(version) + " not supported (expected " +
                              std::to_string(Checkpoint::kVersion) + ")");

    const auto body = bytes.subspan(0, bytes.size() - 4);
    std::uint32_t stored;
    std::memcpy(&stored, bytes.data() + bytes.size() - 4, 4);

    Checkpoint c;
    Reader b(body.subspan(8));
    const auto header_len = b.get<std::uint64_t>("header length");
    const auto* hp = b.take(header_len, "header");
    const auto count = b.get<std::uint32_t>("blob count");
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_len = b.get<std::uint32_t>("blob name length");
        const auto* np = b.take(name_len, "blob name");
        const auto n = b.get<std::uint64_t>("blob length");
        if (n > b.remaining() / sizeof(double)) throw CheckpointError("checkpoint truncated while reading blob data");
        std::vector<double> values(n);
        std::memcpy(values.data(), b.take(n * sizeof(double), "blob data"), n * sizeof(double));
        c.blobs.emplace_back(std::string(reinterpret_cast<const char*>(np), name_len), std::move(values));
    }
    if (b.remaining() != 0) throw CheckpointError("checkpoint has trailing bytes before the checksum");
    if (crc(body) != stored) throw CheckpointError("checkpoint checksum mismatch");
    try {
        c.header = nlohmann::json::parse(reinterpret_cast<const char*>(hp), reinterpret_cast<const char*>(hp) + header_len);
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("checkpoint header is not valid JSON: ") + e.what());
    }
    return c;
}

void save_checkpoint(const std::string& path, const Checkpoint& c) {
    const auto bytes = encode_checkpoint(c);
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw CheckpointError("cannot open " + tmp + " for writing");
        f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!f) throw CheckpointError("write failed: " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open checkpoint " + path);
    const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return decode_checkpoint(bytes);
}

void add_parameters(Checkpoint& c, const std::string& prefix, const ad::ParameterList& params) {
    for (const auto* p : params) c.add(prefix + p->name(), p->value().data());
}

void restore_parameters(const Checkpoint& c, const std::string& prefix, const ad::ParameterList& params) {
    std::vector<const std::vector<double>*> found;
    for (const auto* p : params) found.push_back(&c.get(prefix + p->name(), p->size()));
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->assign(*found[i]);
}

void add_optimizer(Checkpoint& c, const std::string& prefix, const ad::Adam& opt) {
    const auto& cfg = opt.config();
    c.header["optimizers"][prefix] = {{"steps", opt.steps()},
                                      {"lr", cfg.lr},
                                      {"beta1", cfg.beta1},
                                      {"beta2", cfg.beta2},
                                      {"epsilon", cfg.epsilon}};
    const auto& params = opt.params();
    for (std::size_t i = 0; i < params.size(); ++i) {
        c.add(prefix + "/m/" + params[i]->name(), opt.first_moments()[i]);
        c.add(prefix + "/v/" + params[i]->name(), opt.second_moments()[i]);
    }
}

void restore_optimizer(const Checkpoint& c, const std::string& prefix, ad::Adam& opt) {
    if (!c.header.contains("optimizers") || !c.header["optimizers"].contains(prefix))
        throw CheckpointError("checkpoint: no optimizer state '" + prefix + "'");
    const auto& h = c.header["optimizers"][prefix];
    const auto& params = opt.params();
    std::vector<const std::vector<double>*> m, v;
    for (const auto* p : params) {
        m.push_back(&c.get(prefix + "/m/" + p->name(), p->size()));
        v.push_back(&c.get(prefix + "/v/" + p->name(), p->size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        opt.first_moments()[i] = *m[i];
        opt.second_moments()[i] = *v[i];
    }
    opt.set_steps(h.at("steps").get<std::int64_t>());
    opt.set_lr(h.at("lr").get<double>());
}

}  // namespace cnerf
