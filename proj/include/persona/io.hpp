#pragma once

// File helpers shared by the pipeline stages: JSONL, CSV, hashing, atomic writes.

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>
#include <openssl/evp.h>

#include "persona/common.hpp"

namespace persona::io {

using json = nlohmann::json;
namespace fs = std::filesystem;

class IoError : public Error {
public:
    using Error::Error;
};

inline std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

/// Writes through a temporary sibling and renames, so readers never see a
/// half-written file.
inline void write_file_atomic(const fs::path& path, std::string_view content) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp.string());
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        if (!out) throw IoError("short write to " + tmp.string());
    }
    fs::rename(tmp, path);
}

inline std::string sha256_hex(std::string_view data) {
    std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
    unsigned int len = 0;
    if (EVP_Digest(data.data(), data.size(), digest.data(), &len, EVP_sha256(), nullptr) != 1)
        throw IoError("sha256 failed");
    std::ostringstream ss;
    for (unsigned int i = 0; i < len; ++i)
        ss << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
    return ss.str();
}

inline std::string sha256_file(const fs::path& path) { return sha256_hex(read_file(path)); }

// ---------------------------------------------------------------------------
// JSONL

/// Calls `fn(record, line_number)` for every non-blank line. Lines that fail
/// to parse are reported through `on_bad` (if given) and skipped; without a
/// handler they throw.
inline void for_each_jsonl(const fs::path& path, const std::function<void(const json&, std::size_t)>& fn,
                           const std::function<void(std::size_t, const std::string&)>& on_bad = {}) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        json record;
        try {
            record = json::parse(line);
        } catch (const json::exception& e) {
            if (on_bad) {
                on_bad(lineno, e.what());
                continue;
            }
            throw IoError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
        fn(record, lineno);
    }
}

inline std::vector<json> read_jsonl(const fs::path& path) {
    std::vector<json> out;
    for_each_jsonl(path, [&](const json& j, std::size_t) { out.push_back(j); });
    return out;
}

inline std::string to_jsonl(const std::vector<json>& records) {
    std::string out;
    for (const auto& r : records) {
        out += r.dump();
        out += '\n';
    }
    return out;
}

/// Appends one record and flushes; used for resumable stages.
class JsonlAppender {
public:
    explicit JsonlAppender(const fs::path& path) {
        if (path.has_parent_path()) fs::create_directories(path.parent_path());
        out_.open(path, std::ios::app);
        if (!out_) throw IoError("cannot append to " + path.string());
    }
    void append(const json& record) {
        out_ << record.dump() << '\n';
        out_.flush();
    }

private:
    std::ofstream out_;
};

// ---------------------------------------------------------------------------
// CSV (RFC 4180 quoting, no embedded newlines needed by our files)

inline std::vector<std::string> parse_csv_line(std::string_view line) {
    std::vector<std::string> fields;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    cur += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                cur += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            fields.push_back(std::move(cur));
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    if (quoted) throw IoError("unterminated quote in CSV line");
    fields.push_back(std::move(cur));
    return fields;
}

inline std::string csv_field(std::string_view s) {
    if (s.find_first_of(",\"\n") == std::string_view::npos) return std::string(s);
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    out += '"';
    return out;
}

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    std::size_t column(std::string_view name) const {
        for (std::size_t i = 0; i < header.size(); ++i)
            if (header[i] == name) return i;
        throw IoError("missing CSV column '" + std::string(name) + "'");
    }
};

inline CsvTable read_csv(const fs::path& path) {
    CsvTable t;
    const auto lines = split_lines(read_file(path));
    bool first = true;
    for (const auto& raw : lines) {
        if (trim(raw).empty()) continue;
        auto fields = parse_csv_line(raw);
        for (auto& f : fields) f = trim(f);
        if (first) {
            t.header = std::move(fields);
            first = false;
            continue;
        }
        if (fields.size() != t.header.size())
            throw IoError(path.string() + ": row has " + std::to_string(fields.size()) +
                          " fields, header has " + std::to_string(t.header.size()));
        t.rows.push_back(std::move(fields));
    }
    if (first) throw IoError(path.string() + ": empty CSV");
    return t;
}

/// Shortest decimal that round-trips a double.
inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string format_fixed(double v, int digits) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    std::string s = buf;
    if (s.find_first_not_of("-0.") == std::string::npos && s.front() == '-') s.erase(0, 1);
    return s;
}

}  // namespace persona::io
