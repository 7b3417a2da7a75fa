#pragma once

// Plain-text artifacts: affine matrices, case manifests, atomic file writes,
// and the configuration hash stamped on every output.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "atlasreg/nifti.hpp"
#include "atlasreg/nn.hpp"

namespace atlasreg {

inline constexpr const char* kVersion = "1.0.0";

/// Writes `content` to a temporary sibling and renames it over `path`.
inline void atomic_write(const std::filesystem::path& path, const std::string& content)
{
    if (path.has_parent_path())
        std::filesystem::create_directories(path.parent_path());
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f)
            throw IoError("cannot write " + tmp.string());
        f.write(content.data(), std::streamsize(content.size()));
        f.flush();
        if (!f)
            throw IoError("write failed: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline void atomic_write(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes)
{
    atomic_write(path, std::string(bytes.begin(), bytes.end()));
}

inline std::string read_text(const std::filesystem::path& path)
{
    std::ifstream f(path, std::ios::binary);
    if (!f)
        throw IoError("file not found: " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path)
{
    const auto s = read_text(path);
    return {s.begin(), s.end()};
}

inline nlohmann::json read_json(const std::filesystem::path& path)
{
    try {
        return nlohmann::json::parse(read_text(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw IoError(path.string() + ": invalid JSON: " + e.what());
    }
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j)
{
    atomic_write(path, j.dump(2) + "\n");
}

/// 16 hex digits of FNV-1a over the canonical (sorted-key, compact) JSON dump.
inline std::string config_hash(const nlohmann::json& cfg)
{
    const auto s = cfg.dump();
    std::ostringstream o;
    o << std::hex << std::setw(16) << std::setfill('0') << nn::fnv1a(s.data(), s.size());
    return o.str();
}

// ---------------------------------------------------------------------------
// Affine matrices: 4 lines of 4 whitespace-separated numbers, row-major.

inline AffineTransform parse_affine(const std::string& text, const std::string& what = "affine")
{
    std::istringstream in(text);
    std::vector<double> vals;
    std::string line;
    int rows = 0;
    while (std::getline(in, line)) {
        const auto hash = line.find('#');
        if (hash != std::string::npos)
            line.erase(hash);
        std::istringstream ls(line);
        std::vector<double> row;
        std::string tok;
        while (ls >> tok) {
            try {
                std::size_t used = 0;
                row.push_back(std::stod(tok, &used));
                if (used != tok.size())
                    throw std::invalid_argument(tok);
            } catch (const std::exception&) {
                throw IoError(what + ": not a number: '" + tok + "'");
            }
        }
        if (row.empty())
            continue;
        if (row.size() != 4)
            throw IoError(what + ": each row needs 4 values, got " + std::to_string(row.size()));
        vals.insert(vals.end(), row.begin(), row.end());
        ++rows;
    }
    if (rows != 4)
        throw IoError(what + ": expected 4 rows, got " + std::to_string(rows));
    Mat4 m;
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c)
            m(r, c) = vals[std::size_t(4 * r + c)];
    try {
        return AffineTransform(m);
    } catch (const GeometryError& e) {
        throw IoError(what + ": " + e.what());
    }
}

inline AffineTransform load_affine(const std::filesystem::path& path)
{
    return parse_affine(read_text(path), path.string());
}

inline std::string format_affine(const AffineTransform& a)
{
    std::ostringstream o;
    o << std::setprecision(17);
    for (int r = 0; r < 4; ++r) {
        for (int c = 0; c < 4; ++c)
            o << (c ? " " : "") << a.matrix()(r, c);
        o << "\n";
    }
    return o.str();
}

inline void save_affine(const std::filesystem::path& path, const AffineTransform& a)
{
    atomic_write(path, format_affine(a));
}

// ---------------------------------------------------------------------------
// Case manifest: tab-separated with a header row
//   case_id  image  labels  tumour  affine
// Empty tumour/affine cells mean "absent". Several candidate affine files may
// be listed in one cell separated by ';'. Relative paths resolve against the
// manifest's directory.

struct ManifestEntry {
    std::string case_id;
    std::filesystem::path image;
    std::filesystem::path labels;
    std::optional<std::filesystem::path> tumour;
    std::vector<std::filesystem::path> affines;
};

namespace detail {

inline std::vector<std::string> split(const std::string& s, char sep)
{
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

inline std::string trim(const std::string& s)
{
    const auto a = s.find_first_not_of(" \t");
    if (a == std::string::npos)
        return {};
    return s.substr(a, s.find_last_not_of(" \t") - a + 1);
}

} // namespace detail

inline std::vector<ManifestEntry> parse_manifest(const std::string& text, const std::filesystem::path& base = {})
{
    std::istringstream in(text);
    std::string line;
    std::vector<std::string> header;
    std::vector<ManifestEntry> out;
    int lineno = 0;
    auto resolve = [&](const std::string& p) {
        std::filesystem::path q(p);
        return q.is_absolute() || base.empty() ? q : base / q;
    };
    while (std::getline(in, line)) {
        ++lineno;
        if (detail::trim(line).empty() || detail::trim(line)[0] == '#')
            continue;
        auto cells = detail::split(line, '\t');
        for (auto& c : cells)
            c = detail::trim(c);
        if (header.empty()) {
            header = cells;
            const std::vector<std::string> want{"case_id", "image", "labels", "tumour", "affine"};
            if (header != want)
                throw IoError("manifest header must be: case_id\timage\tlabels\ttumour\taffine");
            continue;
        }
        if (cells.size() != header.size())
            throw IoError("manifest line " + std::to_string(lineno) + ": expected " + std::to_string(header.size()) +
                          " columns, got " + std::to_string(cells.size()));
        ManifestEntry e;
        e.case_id = cells[0];
        if (e.case_id.empty() || cells[1].empty() || cells[2].empty())
            throw IoError("manifest line " + std::to_string(lineno) + ": case_id, image, and labels are required");
        for (const auto& o : out)
            if (o.case_id == e.case_id)
                throw IoError("manifest: duplicate case id " + e.case_id);
        e.image = resolve(cells[1]);
        e.labels = resolve(cells[2]);
        if (!cells[3].empty())
            e.tumour = resolve(cells[3]);
        if (!cells[4].empty())
            for (const auto& p : detail::split(cells[4], ';'))
                if (!detail::trim(p).empty())
                    e.affines.push_back(resolve(detail::trim(p)));
        out.push_back(std::move(e));
    }
    if (header.empty())
        throw IoError("manifest is empty");
    return out;
}

inline std::vector<ManifestEntry> load_manifest(const std::filesystem::path& path)
{
    return parse_manifest(read_text(path), path.parent_path());
}

inline std::string format_manifest(const std::vector<ManifestEntry>& entries, const std::filesystem::path& base = {})
{
    auto rel = [&](const std::filesystem::path& p) {
        return base.empty() ? p.generic_string() : p.lexically_relative(base).generic_string();
    };
    std::ostringstream o;
    o << "case_id\timage\tlabels\ttumour\taffine\n";
    for (const auto& e : entries) {
        o << e.case_id << '\t' << rel(e.image) << '\t' << rel(e.labels) << '\t' << (e.tumour ? rel(*e.tumour) : "")
          << '\t';
        for (std::size_t i = 0; i < e.affines.size(); ++i)
            o << (i ? ";" : "") << rel(e.affines[i]);
        o << '\n';
    }
    return o.str();
}

} // namespace atlasreg
