#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dapose/common.hpp"
#include "dapose/nn.hpp"
#include "dapose/rng.hpp"
#include "dapose/tensor.hpp"

namespace dapose::ckpt {

// On-disk layout (all integers little-endian):
//   magic "DAPOSECK" (8 bytes)
//   u64 manifest length, manifest JSON bytes
//   u64 blob count
//   per blob: u32 name length, name bytes, u8 dtype, u32 rank,
//             u64 dims[rank], u64 payload length, payload bytes
//   u32 CRC-32 of everything above
// Blobs are stored in insertion order and the manifest is serialized with
// sorted keys, so identical state always produces byte-identical files.

inline constexpr char kMagic[8] = {'D', 'A', 'P', 'O', 'S', 'E', 'C', 'K'};

enum class BlobType : uint8_t { f32 = 0, f64 = 1, u64 = 2 };

inline uint32_t crc32(const unsigned char* data, size_t n) {
    static const std::array<uint32_t, 256> table = [] {
        std::array<uint32_t, 256> t{};
        for (uint32_t i = 0; i < 256; ++i) {
            uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1u) ? 0xedb88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    uint32_t c = 0xffffffffu;
    for (size_t i = 0; i < n; ++i) c = table[(c ^ data[i]) & 0xffu] ^ (c >> 8);
    return c ^ 0xffffffffu;
}

struct Blob {
    std::string name;
    BlobType dtype = BlobType::f32;
    std::vector<int64_t> shape;
    std::vector<unsigned char> data;

    int64_t count() const {
        int64_t n = 1;
        for (int64_t d : shape) n *= d;
        return n;
    }
};

class Container {
  public:
    nlohmann::json manifest;

    const std::vector<Blob>& blobs() const { return blobs_; }

    bool has(const std::string& name) const { return index_.count(name) > 0; }

    template <typename S>
    void add_tensor(const std::string& name, const Tensor<S>& t) {
        static_assert(std::is_same_v<S, float> || std::is_same_v<S, double>);
        Blob b;
        b.name = name;
        b.dtype = std::is_same_v<S, float> ? BlobType::f32 : BlobType::f64;
        b.shape = t.shape();
        b.data.resize(static_cast<size_t>(t.numel()) * sizeof(S));
        std::memcpy(b.data.data(), t.data(), b.data.size());
        push(std::move(b));
    }

    void add_u64s(const std::string& name, const std::vector<uint64_t>& v) {
        Blob b;
        b.name = name;
        b.dtype = BlobType::u64;
        b.shape = {static_cast<int64_t>(v.size())};
        b.data.resize(v.size() * sizeof(uint64_t));
        std::memcpy(b.data.data(), v.data(), b.data.size());
        push(std::move(b));
    }

    void add_rng(const std::string& name, const RngStream& rng) {
        const auto s = rng.state();
        add_u64s(name, {s[0], s[1], s[2], s[3]});
    }

    template <typename S>
    Tensor<S> tensor(const std::string& name) const {
        const Blob& b = blob(name);
        const BlobType want = std::is_same_v<S, float> ? BlobType::f32 : BlobType::f64;
        check_data(b.dtype == want, detail::cat("checkpoint blob '", name, "' has dtype ",
                                                static_cast<int>(b.dtype), ", expected ",
                                                static_cast<int>(want)));
        Tensor<S> t(b.shape);
        std::memcpy(t.data(), b.data.data(), b.data.size());
        return t;
    }

    std::vector<uint64_t> u64s(const std::string& name) const {
        const Blob& b = blob(name);
        check_data(b.dtype == BlobType::u64,
                   detail::cat("checkpoint blob '", name, "' is not a u64 blob"));
        std::vector<uint64_t> v(b.data.size() / sizeof(uint64_t));
        std::memcpy(v.data(), b.data.data(), b.data.size());
        return v;
    }

    RngStream rng(const std::string& name) const {
        const auto v = u64s(name);
        check_data(v.size() == 4, detail::cat("checkpoint blob '", name,
                                              "' has ", v.size(), " words, expected 4"));
        RngStream s;
        s.set_state({v[0], v[1], v[2], v[3]});
        return s;
    }

    /// All parameter tensors of `params` under `prefix/name`.
    template <typename S>
    void add_params(const std::string& prefix, const nn::ParamSet<S>& params) {
        for (const auto& [name, var] : params.items) add_tensor(prefix + "/" + name, var.val());
    }

    /// Loads blobs back into the (already constructed) parameters in place.
    template <typename S>
    void load_params(const std::string& prefix, nn::ParamSet<S>& params) const {
        for (auto& [name, var] : params.items) {
            const std::string key = prefix + "/" + name;
            Tensor<S> t = tensor<S>(key);
            check_data(t.shape() == var.val().shape(),
                       detail::cat("checkpoint blob '", key, "' shape mismatch"));
            var.node()->value = std::move(t);
        }
    }

    std::vector<unsigned char> serialize() const {
        std::vector<unsigned char> out;
        auto put_bytes = [&out](const void* p, size_t n) {
            const auto* b = static_cast<const unsigned char*>(p);
            out.insert(out.end(), b, b + n);
        };
        auto put_u32 = [&](uint32_t v) { put_bytes(&v, 4); };
        auto put_u64 = [&](uint64_t v) { put_bytes(&v, 8); };

        put_bytes(kMagic, 8);
        // Compact dump; object keys are stored sorted, so equal manifests
        // serialize to equal bytes.
        const std::string m = manifest.dump(-1, ' ', false,
                                            nlohmann::json::error_handler_t::strict);
        put_u64(m.size());
        put_bytes(m.data(), m.size());
        put_u64(blobs_.size());
        for (const Blob& b : blobs_) {
            put_u32(static_cast<uint32_t>(b.name.size()));
            put_bytes(b.name.data(), b.name.size());
            const uint8_t dt = static_cast<uint8_t>(b.dtype);
            put_bytes(&dt, 1);
            put_u32(static_cast<uint32_t>(b.shape.size()));
            for (int64_t d : b.shape) put_u64(static_cast<uint64_t>(d));
            put_u64(b.data.size());
            put_bytes(b.data.data(), b.data.size());
        }
        put_u32(crc32(out.data(), out.size()));
        return out;
    }

    void save(const std::filesystem::path& path) const {
        const auto bytes = serialize();
        if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
        // Write to a sibling temp file and rename so a crash mid-write never
        // leaves a truncated checkpoint behind.
        const std::filesystem::path tmp = path.string() + ".tmp";
        {
            std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
            check_data(os.good(), detail::cat("cannot open '", tmp.string(), "' for writing"));
            os.write(reinterpret_cast<const char*>(bytes.data()),
                     static_cast<std::streamsize>(bytes.size()));
            check_data(os.good(), detail::cat("short write to '", tmp.string(), "'"));
        }
        std::filesystem::rename(tmp, path);
    }

    static Container deserialize(const std::vector<unsigned char>& bytes) {
        check_data(bytes.size() >= 8 + 8 + 8 + 4, "checkpoint file too small");
        check_data(std::memcmp(bytes.data(), kMagic, 8) == 0,
                   "not a checkpoint file (bad magic)");
        const uint32_t stored = read_scalar<uint32_t>(bytes, bytes.size() - 4);
        const uint32_t actual = crc32(bytes.data(), bytes.size() - 4);
        check_data(stored == actual,
                   detail::cat("checkpoint checksum mismatch (stored ", stored, ", computed ",
                               actual, "); file is corrupt"));

        Container c;
        size_t pos = 8;
        const size_t end = bytes.size() - 4;
        auto need = [&](size_t n) {
            check_data(pos + n <= end, "checkpoint truncated (structure overruns payload)");
        };
        auto get_u32 = [&] {
            need(4);
            const uint32_t v = read_scalar<uint32_t>(bytes, pos);
            pos += 4;
            return v;
        };
        auto get_u64 = [&] {
            need(8);
            const uint64_t v = read_scalar<uint64_t>(bytes, pos);
            pos += 8;
            return v;
        };

        const uint64_t mlen = get_u64();
        need(mlen);
        const std::string mtxt(reinterpret_cast<const char*>(bytes.data() + pos), mlen);
        pos += mlen;
        c.manifest = nlohmann::json::parse(mtxt, nullptr, false);
        check_data(!c.manifest.is_discarded(), "checkpoint manifest is not valid JSON");

        const uint64_t nblobs = get_u64();
        for (uint64_t i = 0; i < nblobs; ++i) {
            Blob b;
            const uint32_t nlen = get_u32();
            need(nlen);
            b.name.assign(reinterpret_cast<const char*>(bytes.data() + pos), nlen);
            pos += nlen;
            need(1);
            const uint8_t dt = bytes[pos++];
            check_data(dt <= 2, detail::cat("checkpoint blob '", b.name, "' has unknown dtype"));
            b.dtype = static_cast<BlobType>(dt);
            const uint32_t rank = get_u32();
            for (uint32_t r = 0; r < rank; ++r) b.shape.push_back(static_cast<int64_t>(get_u64()));
            const uint64_t plen = get_u64();
            need(plen);
            const size_t width = b.dtype == BlobType::f32 ? 4 : 8;
            check_data(plen == static_cast<uint64_t>(b.count()) * width,
                       detail::cat("checkpoint blob '", b.name, "' payload size mismatch"));
            b.data.assign(bytes.begin() + static_cast<int64_t>(pos),
                          bytes.begin() + static_cast<int64_t>(pos + plen));
            pos += plen;
            c.push(std::move(b));
        }
        check_data(pos == end, "checkpoint has trailing bytes");
        return c;
    }

    static Container load(const std::filesystem::path& path) {
        std::ifstream is(path, std::ios::binary);
        check_data(is.good(), detail::cat("cannot open checkpoint '", path.string(), "'"));
        std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)),
                                         std::istreambuf_iterator<char>());
        Container c = deserialize(bytes);
        const int version = c.manifest.value("format_version", -1);
        if (version != kFormatVersion) {
            nlohmann::json expected = {{"format_version", kFormatVersion}};
            throw DataError(detail::cat("checkpoint format mismatch in '", path.string(),
                                        "': expected manifest ", expected.dump(),
                                        ", found ", c.manifest.dump()));
        }
        return c;
    }

  private:
    template <typename T>
    static T read_scalar(const std::vector<unsigned char>& bytes, size_t pos) {
        T v;
        std::memcpy(&v, bytes.data() + pos, sizeof(T));
        return v;
    }

    void push(Blob b) {
        check_arg(index_.count(b.name) == 0,
                  detail::cat("duplicate checkpoint blob '", b.name, "'"));
        index_[b.name] = blobs_.size();
        blobs_.push_back(std::move(b));
    }

    const Blob& blob(const std::string& name) const {
        auto it = index_.find(name);
        check_data(it != index_.end(), detail::cat("checkpoint blob '", name, "' not found"));
        return blobs_[it->second];
    }

    std::vector<Blob> blobs_;
    std::map<std::string, size_t> index_;
};

} // namespace dapose::ckpt
