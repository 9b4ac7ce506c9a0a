#pragma once

#include <array>
#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <type_traits>
#include <utility>
#include <vector>

#include <unistd.h>

#include "flowage/error.hpp"
#include "flowage/field.hpp"

// Self-describing tensor file:
//
//   "FLOWAGE1"                 8-byte magic
//   u32 little-endian          header length in bytes
//   header                     UTF-8 "key:value" lines
//   payload                    raw little-endian f32/f64, x-fastest
//
// Required header keys: dtype (f32|f64), shape (comma separated), order (x-fastest),
// role (velocity|deformation|volume|matrix|vector). Fields and volumes also carry
// spacing. Vector-valued roles store 3 interleaved components per element of shape.
// Any other keys are kept verbatim, in order. A file may hold several records back
// to back; checkpoints use this with a `name` key per record.

namespace flowage {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

inline constexpr std::string_view container_magic = "FLOWAGE1";

struct TensorContainer {
    std::string dtype = "f64";
    std::vector<std::size_t> shape;
    std::string order = "x-fastest";
    std::optional<std::array<double, 3>> spacing;
    std::string role = "vector";
    std::vector<std::pair<std::string, std::string>> extra;
    std::vector<double> values;

    std::size_t components() const noexcept { return (role == "velocity" || role == "deformation") ? 3 : 1; }

    std::size_t element_count() const noexcept
    {
        std::size_t n = 1;
        for (auto s : shape) n *= s;
        return n * components();
    }

    std::optional<std::string> get(std::string_view key) const
    {
        for (const auto& [k, v] : extra)
            if (k == key) return v;
        return std::nullopt;
    }

    std::string require_key(std::string_view key) const
    {
        auto v = get(key);
        if (!v) throw ValidationError("container record is missing header key '" + std::string(key) + "'");
        return *v;
    }

    void set(std::string key, std::string value)
    {
        for (auto& [k, v] : extra) {
            if (k == key) {
                v = std::move(value);
                return;
            }
        }
        extra.emplace_back(std::move(key), std::move(value));
    }

    friend bool operator==(const TensorContainer&, const TensorContainer&) = default;
};

// ---------------------------------------------------------------------------
// Text helpers shared by headers, configs and reports.

/// Shortest decimal string that parses back to the same double.
inline std::string format_double(double v)
{
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    if (ec != std::errc{}) throw ValidationError("cannot format number");
    return std::string(buf, end);
}

inline std::optional<double> parse_double(std::string_view s)
{
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    if (!s.empty() && s.front() == '+') s.remove_prefix(1);
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || ptr != s.data() + s.size() || s.empty()) return std::nullopt;
    return v;
}

inline std::optional<std::uint64_t> parse_uint(std::string_view s)
{
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    std::uint64_t v = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || ptr != s.data() + s.size() || s.empty()) return std::nullopt;
    return v;
}

inline std::vector<std::string> split(std::string_view s, char sep)
{
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = s.find(sep, start);
        out.emplace_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

inline std::string join_doubles(const double* v, std::size_t n)
{
    std::string s;
    for (std::size_t i = 0; i < n; ++i) {
        if (i) s += ',';
        s += format_double(v[i]);
    }
    return s;
}

// ---------------------------------------------------------------------------
// Atomic file output

/// Writes `bytes` to a sibling temp file and renames it over `path`.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes)
{
    namespace fs = std::filesystem;
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp." + std::to_string(::getpid());
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw ValidationError("cannot open '" + tmp.string() + "' for writing");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) {
            out.close();
            fs::remove(tmp);
            throw ValidationError("failed writing '" + tmp.string() + "'");
        }
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) {
        fs::remove(tmp);
        throw ValidationError("cannot rename '" + tmp.string() + "' to '" + path.string() + "': " + ec.message());
    }
}

inline std::string read_file(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// ---------------------------------------------------------------------------
// Encoding

inline void append_record(std::string& out, const TensorContainer& t)
{
    detail::require(t.dtype == "f32" || t.dtype == "f64", "container: dtype must be f32 or f64");
    detail::require(t.values.size() == t.element_count(),
                    "container: payload has " + std::to_string(t.values.size()) + " values, shape implies " +
                        std::to_string(t.element_count()));

    std::string header = "dtype:" + t.dtype + "\nshape:";
    for (std::size_t i = 0; i < t.shape.size(); ++i) {
        if (i) header += ',';
        header += std::to_string(t.shape[i]);
    }
    header += "\norder:" + t.order + "\n";
    if (t.spacing) header += "spacing:" + join_doubles(t.spacing->data(), 3) + "\n";
    header += "role:" + t.role + "\n";
    for (const auto& [k, v] : t.extra) {
        detail::require(k.find_first_of(":\n") == std::string::npos && v.find('\n') == std::string::npos,
                        "container: header key/value may not contain ':' or newlines (" + k + ")");
        header += k + ":" + v + "\n";
    }

    out += container_magic;
    const auto len = static_cast<std::uint32_t>(header.size());
    char len_bytes[4];
    std::memcpy(len_bytes, &len, 4);
    out.append(len_bytes, 4);
    out += header;

    if (t.dtype == "f64") {
        out.append(reinterpret_cast<const char*>(t.values.data()), t.values.size() * sizeof(double));
    } else {
        std::vector<float> f(t.values.begin(), t.values.end());
        out.append(reinterpret_cast<const char*>(f.data()), f.size() * sizeof(float));
    }
}

inline std::string encode_containers(const std::vector<TensorContainer>& records)
{
    std::string out;
    for (const auto& r : records) append_record(out, r);
    return out;
}

/// Decodes all records in `bytes`; `source` names the file in error messages.
inline std::vector<TensorContainer> decode_containers(std::string_view bytes, const std::string& source = "<memory>")
{
    std::vector<TensorContainer> records;
    std::size_t pos = 0;
    auto fail = [&](const std::string& what) {
        throw ValidationError(source + ": record " + std::to_string(records.size()) + " at byte " +
                              std::to_string(pos) + ": " + what);
    };
    while (pos < bytes.size()) {
        if (bytes.size() - pos < 12 || bytes.substr(pos, 8) != container_magic) fail("expected magic 'FLOWAGE1'");
        std::uint32_t len = 0;
        std::memcpy(&len, bytes.data() + pos + 8, 4);
        if (bytes.size() - pos - 12 < len) fail("truncated header");
        const std::string_view header = bytes.substr(pos + 12, len);

        TensorContainer t;
        t.extra.clear();
        bool have_dtype = false, have_shape = false, have_order = false, have_role = false;
        std::size_t line_no = 0;
        for (const auto& line : split(header, '\n')) {
            ++line_no;
            if (line.empty()) continue;
            const auto colon = line.find(':');
            if (colon == std::string::npos) fail("header line " + std::to_string(line_no) + " has no ':'");
            const std::string key = line.substr(0, colon);
            const std::string value = line.substr(colon + 1);
            if (key == "dtype") {
                if (value != "f32" && value != "f64") fail("dtype must be f32 or f64, got '" + value + "'");
                t.dtype = value;
                have_dtype = true;
            } else if (key == "shape") {
                t.shape.clear();
                if (!value.empty()) {
                    for (const auto& s : split(value, ',')) {
                        auto n = parse_uint(s);
                        if (!n) fail("bad shape entry '" + s + "'");
                        t.shape.push_back(static_cast<std::size_t>(*n));
                    }
                }
                have_shape = true;
            } else if (key == "order") {
                if (value != "x-fastest") fail("unsupported order '" + value + "' (expected x-fastest)");
                t.order = value;
                have_order = true;
            } else if (key == "spacing") {
                const auto parts = split(value, ',');
                if (parts.size() != 3) fail("spacing needs 3 comma-separated values");
                std::array<double, 3> sp{};
                for (int a = 0; a < 3; ++a) {
                    auto d = parse_double(parts[static_cast<std::size_t>(a)]);
                    if (!d) fail("bad spacing value '" + parts[static_cast<std::size_t>(a)] + "'");
                    sp[static_cast<std::size_t>(a)] = *d;
                }
                t.spacing = sp;
            } else if (key == "role") {
                if (value != "velocity" && value != "deformation" && value != "volume" && value != "matrix" &&
                    value != "vector")
                    fail("unknown role '" + value + "'");
                t.role = value;
                have_role = true;
            } else {
                t.extra.emplace_back(key, value);
            }
        }
        if (!have_dtype || !have_shape || !have_order || !have_role)
            fail("header must define dtype, shape, order and role");

        pos += 12 + len;
        const std::size_t n = t.element_count();
        const std::size_t width = t.dtype == "f64" ? 8 : 4;
        if (bytes.size() - pos < n * width) fail("payload shorter than shape implies");
        t.values.resize(n);
        if (t.dtype == "f64") {
            std::memcpy(t.values.data(), bytes.data() + pos, n * 8);
        } else {
            std::vector<float> f(n);
            std::memcpy(f.data(), bytes.data() + pos, n * 4);
            for (std::size_t i = 0; i < n; ++i) t.values[i] = f[i];
        }
        pos += n * width;
        records.push_back(std::move(t));
    }
    return records;
}

inline void write_containers(const std::filesystem::path& path, const std::vector<TensorContainer>& records)
{
    write_file_atomic(path, encode_containers(records));
}

inline std::vector<TensorContainer> read_containers(const std::filesystem::path& path)
{
    return decode_containers(read_file(path), path.string());
}

inline TensorContainer read_container(const std::filesystem::path& path)
{
    auto records = read_containers(path);
    if (records.empty()) throw ValidationError(path.string() + ": no records");
    return std::move(records.front());
}

// ---------------------------------------------------------------------------
// Typed conversions

template <class Tag>
TensorContainer to_container(const VectorField<Tag>& f)
{
    TensorContainer t;
    t.shape = {f.grid.dims[0], f.grid.dims[1], f.grid.dims[2]};
    t.spacing = f.grid.spacing;
    t.role = std::is_same_v<Tag, VelocityTag> ? "velocity" : "deformation";
    t.values = f.data;
    return t;
}

inline TensorContainer to_container(const Volume& v)
{
    TensorContainer t;
    t.shape = {v.grid.dims[0], v.grid.dims[1], v.grid.dims[2]};
    t.spacing = v.grid.spacing;
    t.role = "volume";
    if (v.interpolation == Interpolation::nearest) t.set("interpolation", "nearest");
    t.values = v.data;
    return t;
}

namespace detail {

inline Grid grid_of(const TensorContainer& t, const std::string& source)
{
    if (t.shape.size() != 3) throw ValidationError(source + ": expected a 3-d shape");
    Grid g;
    g.dims = {t.shape[0], t.shape[1], t.shape[2]};
    g.spacing = t.spacing.value_or(std::array<double, 3>{1.0, 1.0, 1.0});
    g.validate();
    return g;
}

} // namespace detail

/// Accepts velocity and deformation records alike (both are displacement-like fields).
template <class Field>
Field field_from_container(const TensorContainer& t, const std::string& source = "<container>")
{
    if (t.role != "velocity" && t.role != "deformation") {
        throw ValidationError(source + ": expected a velocity or deformation record, got role '" + t.role + "'");
    }
    Field f{detail::grid_of(t, source), t.values};
    f.validate(source.c_str());
    return f;
}

inline Volume volume_from_container(const TensorContainer& t, const std::string& source = "<container>")
{
    if (t.role != "volume") throw ValidationError(source + ": expected a volume record, got role '" + t.role + "'");
    Volume v{detail::grid_of(t, source), t.values, Interpolation::trilinear};
    if (auto interp = t.get("interpolation"); interp && *interp == "nearest") v.interpolation = Interpolation::nearest;
    v.validate(source.c_str());
    return v;
}

inline VelocityField read_velocity(const std::filesystem::path& p)
{
    return field_from_container<VelocityField>(read_container(p), p.string());
}

inline DeformationField read_deformation(const std::filesystem::path& p)
{
    return field_from_container<DeformationField>(read_container(p), p.string());
}

inline Volume read_volume(const std::filesystem::path& p) { return volume_from_container(read_container(p), p.string()); }

} // namespace flowage
