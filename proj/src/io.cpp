#include "unitscope/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include <zlib.h>

namespace unitscope {

namespace {

constexpr char kMagic[4] = {'U', 'T', 'S', 'R'};
constexpr std::uint8_t kVersion = 1;
constexpr std::uint8_t kDtypeF32 = 1;

static_assert(std::endian::native == std::endian::little, "serialization assumes a little-endian host");

void put_u16(std::vector<std::uint8_t>& b, std::uint16_t v)
{
    b.push_back(static_cast<std::uint8_t>(v));
    b.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& b, std::uint32_t v)
{
    for (int i = 0; i < 4; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u32_be(std::vector<std::uint8_t>& b, std::uint32_t v)
{
    for (int i = 3; i >= 0; --i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint16_t get_u16(const std::vector<std::uint8_t>& b, std::size_t at)
{
    if (at + 2 > b.size()) throw FormatError("truncated archive");
    return static_cast<std::uint16_t>(b[at] | (b[at + 1] << 8));
}

std::uint32_t get_u32(const std::vector<std::uint8_t>& b, std::size_t at)
{
    if (at + 4 > b.size()) throw FormatError("truncated payload");
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | b[at + static_cast<std::size_t>(i)];
    return v;
}

std::uint32_t crc_of(const std::uint8_t* data, std::size_t n)
{
    return static_cast<std::uint32_t>(crc32(crc32(0L, Z_NULL, 0), data, static_cast<uInt>(n)));
}

} // namespace

std::vector<std::uint8_t> encode_tensor(const Tensor& t)
{
    if (t.ndim() > 255) throw FormatError("too many dimensions");
    std::vector<std::uint8_t> b(kMagic, kMagic + 4);
    b.push_back(kVersion);
    b.push_back(kDtypeF32);
    b.push_back(static_cast<std::uint8_t>(t.ndim()));
    for (int d : t.shape()) put_u32(b, static_cast<std::uint32_t>(d));
    const std::size_t off = b.size();
    b.resize(off + t.size() * sizeof(float));
    std::memcpy(b.data() + off, t.storage().data(), t.size() * sizeof(float));
    return b;
}

Tensor decode_tensor(const std::vector<std::uint8_t>& b)
{
    if (b.size() < 7 || std::memcmp(b.data(), kMagic, 4) != 0) throw FormatError("bad magic bytes: not a tensor file");
    if (b[4] != kVersion) throw FormatError("unsupported tensor format version " + std::to_string(b[4]));
    if (b[5] != kDtypeF32) throw FormatError("unsupported dtype code " + std::to_string(b[5]));
    const std::size_t ndim = b[6];
    if (b.size() < 7 + 4 * ndim) throw FormatError("truncated tensor header");
    Shape shape(ndim);
    std::size_t count = 1;
    for (std::size_t i = 0; i < ndim; ++i) {
        const std::uint32_t d = get_u32(b, 7 + 4 * i);
        if (d == 0 || d > 0x7fffffffu) throw FormatError("invalid dimension in tensor header");
        shape[i] = static_cast<int>(d);
        count *= d;
    }
    const std::size_t off = 7 + 4 * ndim;
    const std::size_t expect = off + count * sizeof(float);
    if (b.size() < expect) throw FormatError("truncated tensor payload");
    if (b.size() > expect) throw FormatError("tensor payload length does not match shape " + shape_str(shape));
    FloatBuffer data(count);
    std::memcpy(data.data(), b.data() + off, count * sizeof(float));
    return Tensor(std::move(shape), std::move(data));
}

void save_tensor(const std::filesystem::path& path, const Tensor& t)
{
    write_file(path, encode_tensor(t));
}

Tensor load_tensor(const std::filesystem::path& path)
{
    return decode_tensor(read_file(path));
}

std::vector<std::uint8_t> encode_zip(const Archive& entries)
{
    std::vector<std::uint8_t> out, central;
    std::uint16_t count = 0;
    for (const auto& [name, data] : entries) {
        const auto offset = static_cast<std::uint32_t>(out.size());
        const std::uint32_t crc = crc_of(data.data(), data.size());
        const auto size = static_cast<std::uint32_t>(data.size());
        put_u32(out, 0x04034b50);
        put_u16(out, 20);
        put_u16(out, 0);
        put_u16(out, 0); // stored
        put_u16(out, 0);
        put_u16(out, 0x21); // fixed DOS date 1980-01-01 keeps archives byte-identical
        put_u32(out, crc);
        put_u32(out, size);
        put_u32(out, size);
        put_u16(out, static_cast<std::uint16_t>(name.size()));
        put_u16(out, 0);
        out.insert(out.end(), name.begin(), name.end());
        out.insert(out.end(), data.begin(), data.end());

        put_u32(central, 0x02014b50);
        put_u16(central, 20);
        put_u16(central, 20);
        put_u16(central, 0);
        put_u16(central, 0);
        put_u16(central, 0);
        put_u16(central, 0x21);
        put_u32(central, crc);
        put_u32(central, size);
        put_u32(central, size);
        put_u16(central, static_cast<std::uint16_t>(name.size()));
        put_u16(central, 0);
        put_u16(central, 0);
        put_u16(central, 0);
        put_u16(central, 0);
        put_u32(central, 0);
        put_u32(central, offset);
        central.insert(central.end(), name.begin(), name.end());
        ++count;
    }
    const auto cd_offset = static_cast<std::uint32_t>(out.size());
    out.insert(out.end(), central.begin(), central.end());
    put_u32(out, 0x06054b50);
    put_u16(out, 0);
    put_u16(out, 0);
    put_u16(out, count);
    put_u16(out, count);
    put_u32(out, static_cast<std::uint32_t>(central.size()));
    put_u32(out, cd_offset);
    put_u16(out, 0);
    return out;
}

Archive decode_zip(const std::vector<std::uint8_t>& b)
{
    if (b.size() < 22) throw FormatError("not a zip archive");
    std::size_t eocd = b.size() - 22;
    while (get_u32(b, eocd) != 0x06054b50) {
        if (eocd == 0) throw FormatError("zip end-of-directory record not found");
        --eocd;
    }
    const std::uint16_t count = get_u16(b, eocd + 10);
    std::size_t at = get_u32(b, eocd + 16);
    Archive entries;
    for (std::uint16_t i = 0; i < count; ++i) {
        if (get_u32(b, at) != 0x02014b50) throw FormatError("corrupt zip central directory");
        const std::uint16_t method = get_u16(b, at + 10);
        const std::uint32_t crc = get_u32(b, at + 16);
        const std::uint32_t size = get_u32(b, at + 20);
        const std::uint16_t name_len = get_u16(b, at + 28);
        const std::uint16_t extra_len = get_u16(b, at + 30);
        const std::uint16_t comment_len = get_u16(b, at + 32);
        const std::uint32_t local = get_u32(b, at + 42);
        if (at + 46 + name_len > b.size()) throw FormatError("truncated zip directory");
        std::string name(b.begin() + static_cast<std::ptrdiff_t>(at + 46),
                         b.begin() + static_cast<std::ptrdiff_t>(at + 46 + name_len));
        if (method != 0) throw FormatError("zip entry '" + name + "' is compressed; only stored entries supported");
        if (get_u32(b, local) != 0x04034b50) throw FormatError("corrupt zip local header");
        const std::size_t data_at = local + 30 + get_u16(b, local + 26) + get_u16(b, local + 28);
        if (data_at + size > b.size()) throw FormatError("truncated zip entry '" + name + "'");
        std::vector<std::uint8_t> data(b.begin() + static_cast<std::ptrdiff_t>(data_at),
                                       b.begin() + static_cast<std::ptrdiff_t>(data_at + size));
        if (crc_of(data.data(), data.size()) != crc) throw FormatError("crc mismatch in zip entry '" + name + "'");
        entries.emplace(std::move(name), std::move(data));
        at += 46 + name_len + extra_len + comment_len;
    }
    return entries;
}

void save_model(const std::filesystem::path& path, const ModelSpec& model, const ParameterStore& params)
{
    model.validate();
    params.check_against(model);
    Archive a;
    const std::string js = to_json(model).dump(2);
    a["model.json"] = std::vector<std::uint8_t>(js.begin(), js.end());
    for (const auto& [name, p] : params.layers()) {
        a[name + ".weight"] = encode_tensor(p.weight);
        a[name + ".bias"] = encode_tensor(p.bias);
    }
    write_file(path, encode_zip(a));
}

std::pair<ModelSpec, ParameterStore> load_model(const std::filesystem::path& path)
{
    const Archive a = decode_zip(read_file(path));
    auto it = a.find("model.json");
    if (it == a.end()) throw FormatError("model archive lacks model.json");
    ModelSpec model;
    try {
        model = model_from_json(nlohmann::json::parse(it->second.begin(), it->second.end()));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("bad model.json: ") + e.what());
    }
    ParameterStore params;
    for (const auto& l : model.layers) {
        if (!l.has_params()) continue;
        auto w = a.find(l.name + ".weight");
        auto b = a.find(l.name + ".bias");
        if (w == a.end() || b == a.end()) throw FormatError("model archive lacks parameters for '" + l.name + "'");
        params[l.name] = {decode_tensor(w->second), decode_tensor(b->second)};
    }
    try {
        params.check_against(model);
    } catch (const ModelError& e) {
        throw FormatError(e.what());
    }
    return {std::move(model), std::move(params)};
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes)
{
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void write_text(const std::filesystem::path& path, const std::string& text)
{
    write_file(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

std::string read_text(const std::filesystem::path& path)
{
    const auto b = read_file(path);
    return std::string(b.begin(), b.end());
}

std::vector<std::uint8_t> encode_png(const Tensor& chw)
{
    if (chw.ndim() != 3 || (chw.dim(0) != 3 && chw.dim(0) != 1))
        throw std::invalid_argument("png expects a (3,H,W) or (1,H,W) tensor, got " + shape_str(chw.shape()));
    const int C = chw.dim(0), H = chw.dim(1), W = chw.dim(2);
    std::vector<std::uint8_t> raw;
    raw.reserve(static_cast<std::size_t>(H) * (1 + 3 * W));
    for (int y = 0; y < H; ++y) {
        raw.push_back(0);
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < 3; ++c) {
                const float v = chw[(static_cast<std::size_t>(C == 1 ? 0 : c) * H + y) * W + x];
                const float clamped = std::isfinite(v) ? std::clamp(v, 0.0f, 1.0f) : 0.0f;
                raw.push_back(static_cast<std::uint8_t>(std::lround(clamped * 255.0f)));
            }
    }
    uLongf zsize = compressBound(static_cast<uLong>(raw.size()));
    std::vector<std::uint8_t> z(zsize);
    if (compress2(z.data(), &zsize, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
        throw std::runtime_error("png compression failed");
    z.resize(zsize);

    std::vector<std::uint8_t> png = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    auto chunk = [&](const char* type, const std::vector<std::uint8_t>& data) {
        put_u32_be(png, static_cast<std::uint32_t>(data.size()));
        const std::size_t start = png.size();
        png.insert(png.end(), type, type + 4);
        png.insert(png.end(), data.begin(), data.end());
        put_u32_be(png, crc_of(png.data() + start, png.size() - start));
    };
    std::vector<std::uint8_t> ihdr;
    put_u32_be(ihdr, static_cast<std::uint32_t>(W));
    put_u32_be(ihdr, static_cast<std::uint32_t>(H));
    ihdr.insert(ihdr.end(), {8, 2, 0, 0, 0});
    chunk("IHDR", ihdr);
    chunk("IDAT", z);
    chunk("IEND", {});
    return png;
}

void save_png(const std::filesystem::path& path, const Tensor& chw)
{
    write_file(path, encode_png(chw));
}

std::string base64_encode(const std::vector<std::uint8_t>& bytes)
{
    static constexpr char table[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    std::string out;
    out.reserve((bytes.size() + 2) / 3 * 4);
    std::size_t i = 0;
    for (; i + 2 < bytes.size(); i += 3) {
        const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
        out += table[(v >> 18) & 63];
        out += table[(v >> 12) & 63];
        out += table[(v >> 6) & 63];
        out += table[v & 63];
    }
    if (i + 1 == bytes.size()) {
        const std::uint32_t v = bytes[i] << 16;
        out += table[(v >> 18) & 63];
        out += table[(v >> 12) & 63];
        out += "==";
    } else if (i + 2 == bytes.size()) {
        const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8);
        out += table[(v >> 18) & 63];
        out += table[(v >> 12) & 63];
        out += table[(v >> 6) & 63];
        out += '=';
    }
    return out;
}

} // namespace unitscope
