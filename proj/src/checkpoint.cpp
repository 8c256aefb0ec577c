#include "gpsmtm/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "gpsmtm/error.hpp"

namespace gpsmtm {

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
    return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 | static_cast<std::uint32_t>(p[2]) << 16 |
           static_cast<std::uint32_t>(p[3]) << 24;
}

constexpr std::size_t kPreambleBytes = 12;
constexpr std::size_t kTrailerBytes = 8;

std::uint64_t fnv1a(const std::uint8_t* p, std::size_t n) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::uint64_t get_u64(const std::uint8_t* p) { return static_cast<std::uint64_t>(get_u32(p)) | static_cast<std::uint64_t>(get_u32(p + 4)) << 32; }

struct Framing {
    nlohmann::json header;
    std::size_t payload_begin = 0;
    std::size_t payload_end = 0;
};

Framing read_framing(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < kPreambleBytes + kTrailerBytes) throw FormatError("file too short for a checkpoint");
    if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) throw FormatError("bad magic bytes");
    const std::uint32_t version = get_u32(bytes.data() + 4);
    if (version != kCheckpointVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")");
    const std::size_t body = bytes.size() - kTrailerBytes;
    if (fnv1a(bytes.data(), body) != get_u64(bytes.data() + body)) throw FormatError("checksum mismatch (corrupt or truncated file)");
    const std::uint32_t header_len = get_u32(bytes.data() + 8);
    if (body - kPreambleBytes < header_len) throw FormatError("truncated header");
    Framing f;
    try {
        f.header = nlohmann::json::parse(bytes.begin() + kPreambleBytes, bytes.begin() + kPreambleBytes + header_len);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("corrupt header: ") + e.what());
    }
    if (!f.header.is_object()) throw FormatError("corrupt header: not a JSON object");
    f.payload_begin = kPreambleBytes + header_len;
    f.payload_end = body;
    return f;
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
    nlohmann::ordered_json header;
    header["model"] = ckpt.config.to_json();
    header["vocab"] = ckpt.vocab.categories();
    header["norm_stats"] = ckpt.stats.to_json();
    nlohmann::ordered_json tensors = nlohmann::ordered_json::array();
    std::size_t offset = 0;
    for (const auto& t : ckpt.params) {
        tensors.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset}});
        offset += t.data.size() * sizeof(float);
    }
    header["tensors"] = std::move(tensors);
    header["payload_bytes"] = offset;
    const std::string text = header.dump();

    std::vector<std::uint8_t> out;
    out.reserve(kPreambleBytes + text.size() + offset + kTrailerBytes);
    out.insert(out.end(), std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
    put_u32(out, kCheckpointVersion);
    put_u32(out, static_cast<std::uint32_t>(text.size()));
    out.insert(out.end(), text.begin(), text.end());
    for (const auto& t : ckpt.params)
        for (float v : t.data) put_u32(out, std::bit_cast<std::uint32_t>(v));
    const std::uint64_t sum = fnv1a(out.data(), out.size());
    put_u32(out, static_cast<std::uint32_t>(sum));
    put_u32(out, static_cast<std::uint32_t>(sum >> 32));
    return out;
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
    const Framing f = read_framing(bytes);
    const auto& h = f.header;
    Checkpoint ckpt;
    std::vector<std::pair<std::string, Shape>> manifest;
    std::vector<std::size_t> offsets;
    try {
        ckpt.config = ModelConfig::from_json(h.at("model"));
        ckpt.vocab = PoiVocab(h.at("vocab").get<std::vector<std::string>>());
        ckpt.stats = NormStats::from_json(h.at("norm_stats"));
        for (const auto& t : h.at("tensors")) {
            manifest.emplace_back(t.at("name").get<std::string>(), t.at("shape").get<Shape>());
            offsets.push_back(t.at("offset").get<std::size_t>());
        }
    } catch (const Error& e) {
        throw FormatError(std::string("invalid header: ") + e.what());
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("invalid header: ") + e.what());
    }
    if (ckpt.vocab.size() != ckpt.config.vocab_size)
        throw FormatError("header vocabulary has " + std::to_string(ckpt.vocab.size()) + " entries but the model declares " +
                          std::to_string(ckpt.config.vocab_size));

    const auto expected = param_manifest(ckpt.config);
    if (manifest.size() != expected.size())
        throw FormatError("tensor manifest lists " + std::to_string(manifest.size()) + " tensors, expected " +
                          std::to_string(expected.size()));
    std::size_t offset = 0;
    for (std::size_t i = 0; i < expected.size(); ++i) {
        const auto& [name, shape] = manifest[i];
        if (name != expected[i].first) throw FormatError("tensor " + std::to_string(i) + " is '" + name + "', expected '" + expected[i].first + "'");
        if (shape != expected[i].second)
            throw FormatError("tensor '" + name + "' has shape " + shape_string(shape) + " but the header implies " +
                              shape_string(expected[i].second));
        if (offsets[i] != offset) throw FormatError("tensor '" + name + "' has a non-contiguous payload offset");
        offset += shape_size(shape) * sizeof(float);
    }
    const std::size_t payload = f.payload_end - f.payload_begin;
    if (payload < offset) throw FormatError("truncated payload: " + std::to_string(payload) + " of " + std::to_string(offset) + " bytes");
    if (payload > offset) throw FormatError("trailing bytes after payload");

    ckpt.params = make_param_set<float>(ckpt.config);
    const std::uint8_t* p = bytes.data() + f.payload_begin;
    for (auto& t : ckpt.params) {
        for (auto& v : t.data) {
            v = std::bit_cast<float>(get_u32(p));
            p += 4;
        }
    }
    return ckpt;
}

namespace {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

nlohmann::json read_checkpoint_header(const std::filesystem::path& path) { return read_framing(read_file(path)).header; }

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    const auto bytes = encode_checkpoint(ckpt);
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write '" + tmp.string() + "'");
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("write failed for '" + tmp.string() + "'");
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

}  // namespace gpsmtm
