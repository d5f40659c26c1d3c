#include "deepatlas/npy.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

static_assert(std::endian::native == std::endian::little, "NPY I/O assumes a little-endian host");

namespace deepatlas {

namespace {

const char kMagic[] = "\x93NUMPY";

const char* descr_of(DType t) {
    switch (t) {
        case DType::float64: return "<f8";
        case DType::float32: return "<f4";
        case DType::int64: return "<i8";
        case DType::int32: return "<i4";
        case DType::uint8: return "|u1";
    }
    return "";
}

std::size_t size_of(DType t) {
    switch (t) {
        case DType::float64: return 8;
        case DType::float32: return 4;
        case DType::int64: return 8;
        case DType::int32: return 4;
        case DType::uint8: return 1;
    }
    return 0;
}

DType dtype_from(const std::string& descr) {
    if (descr == "<f8") return DType::float64;
    if (descr == "<f4") return DType::float32;
    if (descr == "<i8") return DType::int64;
    if (descr == "<i4") return DType::int32;
    if (descr == "|u1" || descr == "<u1") return DType::uint8;
    throw IoError("unsupported npy dtype " + descr);
}

std::string encode(DType dtype, const Shape& shape, const void* data, std::size_t nbytes) {
    std::ostringstream dict;
    dict << "{'descr': '" << descr_of(dtype) << "', 'fortran_order': False, 'shape': (";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        dict << shape[i];
        if (shape.size() == 1 || i + 1 < shape.size()) dict << ',';
        if (i + 1 < shape.size()) dict << ' ';
    }
    dict << "), }";
    std::string header = dict.str();
    const std::size_t preamble = 10;
    const std::size_t total = ((preamble + header.size() + 1 + 63) / 64) * 64;
    header.append(total - preamble - header.size() - 1, ' ');
    header.push_back('\n');

    std::string out(kMagic, 6);
    out.push_back('\x01');
    out.push_back('\x00');
    const auto hlen = static_cast<std::uint16_t>(header.size());
    out.push_back(static_cast<char>(hlen & 0xff));
    out.push_back(static_cast<char>(hlen >> 8));
    out += header;
    out.append(static_cast<const char*>(data), nbytes);
    return out;
}

std::string dict_value(const std::string& header, const std::string& key) {
    const auto k = header.find("'" + key + "'");
    if (k == std::string::npos) throw IoError("npy header lacks '" + key + "'");
    auto colon = header.find(':', k);
    if (colon == std::string::npos) throw IoError("malformed npy header");
    ++colon;
    while (colon < header.size() && header[colon] == ' ') ++colon;
    if (header[colon] == '\'') {
        const auto end = header.find('\'', colon + 1);
        return header.substr(colon + 1, end - colon - 1);
    }
    if (header[colon] == '(') {
        const auto end = header.find(')', colon);
        return header.substr(colon + 1, end - colon - 1);
    }
    auto end = header.find_first_of(",}", colon);
    return header.substr(colon, end - colon);
}

template <class T>
T read_le(const std::string& s, std::size_t off) {
    if (off + sizeof(T) > s.size()) throw IoError("archive truncated");
    T v;
    std::memcpy(&v, s.data() + off, sizeof(T));
    return v;
}

template <class T>
void put_le(std::string& s, T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    s.append(buf, sizeof(T));
}

}  // namespace

std::string encode_npy(const Tensor& t) {
    return encode(DType::float64, t.shape(), t.data().data(), t.data().size() * sizeof(Scalar));
}

std::string encode_npy(const LabelMap& labels) {
    return encode(DType::uint8, labels.shape, labels.values.data(), labels.values.size());
}

NpyArray decode_npy(std::string_view bytes) {
    if (bytes.size() < 10 || std::memcmp(bytes.data(), kMagic, 6) != 0) throw IoError("not an npy payload");
    const auto major = static_cast<unsigned char>(bytes[6]);
    std::size_t header_len = 0;
    std::size_t preamble = 0;
    if (major == 1) {
        header_len = static_cast<unsigned char>(bytes[8]) | (static_cast<unsigned char>(bytes[9]) << 8);
        preamble = 10;
    } else if (major == 2 || major == 3) {
        if (bytes.size() < 12) throw IoError("npy header truncated");
        std::uint32_t len;
        std::memcpy(&len, bytes.data() + 8, 4);
        header_len = len;
        preamble = 12;
    } else {
        throw IoError("unsupported npy version " + std::to_string(major));
    }
    if (bytes.size() < preamble + header_len) throw IoError("npy header truncated");
    const std::string header(bytes.substr(preamble, header_len));
    NpyArray arr;
    arr.dtype = dtype_from(dict_value(header, "descr"));
    if (dict_value(header, "fortran_order").find("True") != std::string::npos) {
        throw IoError("fortran-ordered npy arrays are not supported");
    }
    std::stringstream shape_text(dict_value(header, "shape"));
    std::string item;
    while (std::getline(shape_text, item, ',')) {
        if (item.find_first_not_of(' ') == std::string::npos) continue;
        arr.shape.push_back(std::stoll(item));
    }
    if (arr.shape.empty()) arr.shape = {1};
    const auto expected = static_cast<std::size_t>(numel(arr.shape)) * size_of(arr.dtype);
    const auto payload = bytes.substr(preamble + header_len);
    if (payload.size() != expected) throw IoError("npy payload size does not match its header");
    arr.bytes.assign(payload.begin(), payload.end());
    return arr;
}

Tensor NpyArray::to_tensor() const {
    const auto n = static_cast<std::size_t>(numel(shape));
    std::vector<Scalar> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        switch (dtype) {
            case DType::float64: {
                double v;
                std::memcpy(&v, bytes.data() + 8 * i, 8);
                out[i] = v;
                break;
            }
            case DType::float32: {
                float v;
                std::memcpy(&v, bytes.data() + 4 * i, 4);
                out[i] = v;
                break;
            }
            case DType::int64: {
                std::int64_t v;
                std::memcpy(&v, bytes.data() + 8 * i, 8);
                out[i] = static_cast<Scalar>(v);
                break;
            }
            case DType::int32: {
                std::int32_t v;
                std::memcpy(&v, bytes.data() + 4 * i, 4);
                out[i] = v;
                break;
            }
            case DType::uint8: out[i] = bytes[i]; break;
        }
    }
    return Tensor(shape, std::move(out));
}

LabelMap NpyArray::to_labels() const {
    if (dtype == DType::float64 || dtype == DType::float32) throw IoError("label arrays must have an integer dtype");
    const Tensor t = to_tensor();
    LabelMap m{shape, {}};
    m.values.reserve(static_cast<std::size_t>(t.numel()));
    for (auto v : t.data()) {
        if (v < 0 || v > 255) throw IoError("label value out of range");
        m.values.push_back(static_cast<std::uint8_t>(v));
    }
    return m;
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    if (in.bad()) throw IoError("failed reading " + path.string());
    return ss.str();
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing " + path.string());
}

Tensor load_npy_tensor(const std::filesystem::path& path) { return decode_npy(read_file(path)).to_tensor(); }

void save_npy(const std::filesystem::path& path, const Tensor& t) { write_file(path, encode_npy(t)); }

LabelMap load_npy_labels(const std::filesystem::path& path) { return decode_npy(read_file(path)).to_labels(); }

void save_npy(const std::filesystem::path& path, const LabelMap& labels) { write_file(path, encode_npy(labels)); }

void write_archive(const std::filesystem::path& path, const ArchiveEntries& entries) {
    constexpr std::uint16_t kDosDate = (0 << 9) | (1 << 5) | 1;  // 1980-01-01
    std::string out;
    std::string central;
    for (const auto& [name, data] : entries) {
        const auto crc = static_cast<std::uint32_t>(
            crc32(0L, reinterpret_cast<const Bytef*>(data.data()), static_cast<uInt>(data.size())));
        const auto size = static_cast<std::uint32_t>(data.size());
        const auto offset = static_cast<std::uint32_t>(out.size());
        put_le<std::uint32_t>(out, 0x04034b50);
        put_le<std::uint16_t>(out, 20);
        put_le<std::uint16_t>(out, 0);
        put_le<std::uint16_t>(out, 0);  // stored
        put_le<std::uint16_t>(out, 0);
        put_le<std::uint16_t>(out, kDosDate);
        put_le<std::uint32_t>(out, crc);
        put_le<std::uint32_t>(out, size);
        put_le<std::uint32_t>(out, size);
        put_le<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
        put_le<std::uint16_t>(out, 0);
        out += name;
        out += data;

        put_le<std::uint32_t>(central, 0x02014b50);
        put_le<std::uint16_t>(central, 20);
        put_le<std::uint16_t>(central, 20);
        put_le<std::uint16_t>(central, 0);
        put_le<std::uint16_t>(central, 0);
        put_le<std::uint16_t>(central, 0);
        put_le<std::uint16_t>(central, kDosDate);
        put_le<std::uint32_t>(central, crc);
        put_le<std::uint32_t>(central, size);
        put_le<std::uint32_t>(central, size);
        put_le<std::uint16_t>(central, static_cast<std::uint16_t>(name.size()));
        put_le<std::uint16_t>(central, 0);
        put_le<std::uint16_t>(central, 0);
        put_le<std::uint16_t>(central, 0);
        put_le<std::uint16_t>(central, 0);
        put_le<std::uint32_t>(central, 0);
        put_le<std::uint32_t>(central, offset);
        central += name;
    }
    const auto central_offset = static_cast<std::uint32_t>(out.size());
    out += central;
    put_le<std::uint32_t>(out, 0x06054b50);
    put_le<std::uint16_t>(out, 0);
    put_le<std::uint16_t>(out, 0);
    put_le<std::uint16_t>(out, static_cast<std::uint16_t>(entries.size()));
    put_le<std::uint16_t>(out, static_cast<std::uint16_t>(entries.size()));
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(central.size()));
    put_le<std::uint32_t>(out, central_offset);
    put_le<std::uint16_t>(out, 0);
    write_file(path, out);
}

ArchiveEntries read_archive(const std::filesystem::path& path) {
    const std::string s = read_file(path);
    if (s.size() < 22) throw IoError(path.string() + " is not a zip archive");
    std::size_t eocd = std::string::npos;
    for (std::size_t i = s.size() - 22 + 1; i-- > 0;) {
        if (read_le<std::uint32_t>(s, i) == 0x06054b50) {
            eocd = i;
            break;
        }
    }
    if (eocd == std::string::npos) throw IoError(path.string() + " is not a zip archive");
    const auto count = read_le<std::uint16_t>(s, eocd + 10);
    std::size_t pos = read_le<std::uint32_t>(s, eocd + 16);
    ArchiveEntries entries;
    for (std::uint16_t e = 0; e < count; ++e) {
        if (read_le<std::uint32_t>(s, pos) != 0x02014b50) throw IoError("corrupt zip central directory");
        const auto method = read_le<std::uint16_t>(s, pos + 10);
        const auto crc = read_le<std::uint32_t>(s, pos + 16);
        const auto csize = read_le<std::uint32_t>(s, pos + 20);
        const auto name_len = read_le<std::uint16_t>(s, pos + 28);
        const auto extra_len = read_le<std::uint16_t>(s, pos + 30);
        const auto comment_len = read_le<std::uint16_t>(s, pos + 32);
        const auto local = read_le<std::uint32_t>(s, pos + 42);
        std::string name = s.substr(pos + 46, name_len);
        pos += 46 + name_len + extra_len + comment_len;
        if (method != 0) throw IoError("compressed zip entries are not supported: " + name);
        if (read_le<std::uint32_t>(s, local) != 0x04034b50) throw IoError("corrupt zip local header");
        const auto lname = read_le<std::uint16_t>(s, local + 26);
        const auto lextra = read_le<std::uint16_t>(s, local + 28);
        const auto start = local + 30 + lname + lextra;
        if (start + csize > s.size()) throw IoError("zip entry truncated: " + name);
        std::string data = s.substr(start, csize);
        const auto actual = static_cast<std::uint32_t>(
            crc32(0L, reinterpret_cast<const Bytef*>(data.data()), static_cast<uInt>(data.size())));
        if (actual != crc) throw IoError("crc mismatch in zip entry " + name);
        entries.emplace_back(std::move(name), std::move(data));
    }
    return entries;
}

}  // namespace deepatlas
