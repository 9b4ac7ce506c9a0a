#pragma once

#include <cmath>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "flowage/container.hpp"
#include "flowage/error.hpp"

namespace flowage {

/// One subject of a cohort CSV: subject_id,age_years,velocity_path[,split].
struct ManifestEntry {
    std::string subject_id;
    double age_years = 0.0;
    std::filesystem::path velocity_path; // resolved against the manifest's directory
    std::optional<std::string> split;
};

struct CohortManifest {
    std::vector<ManifestEntry> entries;
    bool has_split = false;

    /// Entries of the requested split; all entries when the manifest has no split column.
    std::vector<ManifestEntry> select(const std::string& split) const
    {
        if (!has_split) return entries;
        std::vector<ManifestEntry> out;
        for (const auto& e : entries)
            if (e.split && *e.split == split) out.push_back(e);
        return out;
    }
};

inline CohortManifest parse_manifest(const std::string& text, const std::string& source,
                                     const std::filesystem::path& base_dir, bool check_paths = true)
{
    CohortManifest m;
    const auto lines = split(text, '\n');
    std::size_t line_no = 0;
    std::vector<std::string> header;
    std::set<std::string> ids;
    int col_id = -1, col_age = -1, col_path = -1, col_split = -1;

    for (auto line : lines) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        auto cells = split(line, ',');
        for (auto& c : cells) {
            const auto b = c.find_first_not_of(" \t");
            const auto e = c.find_last_not_of(" \t");
            c = b == std::string::npos ? std::string{} : c.substr(b, e - b + 1);
        }
        const std::string where = source + ":" + std::to_string(line_no);
        if (header.empty()) {
            header = cells;
            for (std::size_t i = 0; i < header.size(); ++i) {
                const auto& h = header[i];
                if (h == "subject_id") col_id = static_cast<int>(i);
                else if (h == "age_years") col_age = static_cast<int>(i);
                else if (h == "velocity_path") col_path = static_cast<int>(i);
                else if (h == "split") col_split = static_cast<int>(i);
                else throw ValidationError(where + ": unknown column '" + h +
                                           "' (expected subject_id, age_years, velocity_path, split)");
            }
            if (col_id < 0 || col_age < 0 || col_path < 0)
                throw ValidationError(where + ": header must contain subject_id, age_years and velocity_path");
            m.has_split = col_split >= 0;
            continue;
        }
        if (cells.size() != header.size()) {
            throw ValidationError(where + ": expected " + std::to_string(header.size()) + " columns, got " +
                                  std::to_string(cells.size()));
        }
        ManifestEntry e;
        e.subject_id = cells[static_cast<std::size_t>(col_id)];
        if (e.subject_id.empty()) throw ValidationError(where + ": empty subject_id");
        if (!ids.insert(e.subject_id).second) throw ValidationError(where + ": duplicate subject_id '" + e.subject_id + "'");
        auto age = parse_double(cells[static_cast<std::size_t>(col_age)]);
        if (!age || !std::isfinite(*age))
            throw ValidationError(where + ": age_years must be a finite number, got '" +
                                  cells[static_cast<std::size_t>(col_age)] + "'");
        e.age_years = *age;
        std::filesystem::path p = cells[static_cast<std::size_t>(col_path)];
        e.velocity_path = p.is_absolute() ? p : base_dir / p;
        if (check_paths && !std::filesystem::exists(e.velocity_path))
            throw ValidationError(where + ": velocity_path '" + e.velocity_path.string() + "' does not exist");
        if (col_split >= 0) {
            const auto& s = cells[static_cast<std::size_t>(col_split)];
            if (s != "train" && s != "test") throw ValidationError(where + ": split must be train or test, got '" + s + "'");
            e.split = s;
        }
        m.entries.push_back(std::move(e));
    }
    if (header.empty()) throw ValidationError(source + ": empty manifest");
    return m;
}

inline CohortManifest read_manifest(const std::filesystem::path& path, bool check_paths = true)
{
    return parse_manifest(read_file(path), path.string(), path.parent_path(), check_paths);
}

/// Writes entries with paths relative to the manifest's directory where possible.
inline void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries)
{
    const bool with_split = !entries.empty() && entries.front().split.has_value();
    std::string out = with_split ? "subject_id,age_years,velocity_path,split\n" : "subject_id,age_years,velocity_path\n";
    const auto base = path.parent_path();
    for (const auto& e : entries) {
        auto p = e.velocity_path;
        if (!base.empty()) {
            auto rel = p.lexically_relative(base);
            if (!rel.empty() && *rel.begin() != "..") p = rel;
        }
        out += e.subject_id + "," + format_double(e.age_years) + "," + p.generic_string();
        if (with_split) out += "," + e.split.value_or("train");
        out += "\n";
    }
    write_file_atomic(path, out);
}

} // namespace flowage
