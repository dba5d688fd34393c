#pragma once

// Exact n-gram counting over document corpora with bounded memory: per-shard
// hash tables spill sorted runs to disk and a k-way merge sums them.

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <fstream>
#include <functional>
#include <queue>
#include <unistd.h>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>
#include <spdlog/spdlog.h>

#include "persona/common.hpp"
#include "persona/io.hpp"
#include "persona/parallel.hpp"

namespace persona::ngram {

namespace fs = std::filesystem;
using json = nlohmann::json;

struct NgramSpec {
    int n = 5;
    bool lowercase = false;
    bool operator==(const NgramSpec&) const = default;
};

enum class CorpusFormat { automatic, jsonl, txt };

inline CorpusFormat parse_format(std::string_view s) {
    if (s == "jsonl") return CorpusFormat::jsonl;
    if (s == "txt") return CorpusFormat::txt;
    if (s == "auto") return CorpusFormat::automatic;
    throw InvalidArgument("unknown corpus format '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// Tokenizer

namespace detail {

inline bool word_byte(unsigned char c) { return std::isalnum(c) || c >= 0x80; }

}  // namespace detail

/// Whitespace split, then punctuation separated into single-character
/// tokens. Apostrophes, hyphens and periods stay inside a word when a word
/// character follows; a word with an internal period keeps one trailing
/// period ("U.S.").
inline std::vector<std::string> tokenize(std::string_view text, bool lowercase = false) {
    std::vector<std::string> out;
    std::size_t i = 0;
    const std::size_t n = text.size();
    while (i < n) {
        const auto c = static_cast<unsigned char>(text[i]);
        if (std::isspace(c)) {
            ++i;
            continue;
        }
        if (!detail::word_byte(c)) {
            out.emplace_back(1, text[i]);
            ++i;
            continue;
        }
        std::size_t j = i;
        bool inner_period = false;
        while (j < n) {
            const auto d = static_cast<unsigned char>(text[j]);
            if (detail::word_byte(d)) {
                ++j;
            } else if ((d == '\'' || d == '-' || d == '.') && j + 1 < n &&
                       detail::word_byte(static_cast<unsigned char>(text[j + 1]))) {
                inner_period = inner_period || d == '.';
                ++j;
            } else {
                break;
            }
        }
        if (inner_period && j < n && text[j] == '.') ++j;
        std::string tok(text.substr(i, j - i));
        if (lowercase)
            for (auto& ch : tok)
                if (static_cast<unsigned char>(ch) < 0x80) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
        out.push_back(std::move(tok));
        i = j;
    }
    return out;
}

inline std::string join_tokens(const std::vector<std::string>& toks, std::size_t begin, std::size_t count) {
    std::string out;
    for (std::size_t k = 0; k < count; ++k) {
        if (k) out += ' ';
        out += toks[begin + k];
    }
    return out;
}

// ---------------------------------------------------------------------------
// Corpus reading

struct Corpus {
    std::vector<std::string> documents;
    std::size_t skipped = 0;
};

/// Calls `fn(doc)` for every document. JSONL records use the "text" field;
/// records without one are skipped and counted.
inline std::size_t for_each_document(const fs::path& path, CorpusFormat format,
                                     const std::function<void(std::string&&)>& fn) {
    if (format == CorpusFormat::automatic)
        format = path.extension() == ".jsonl" || path.extension() == ".json" ? CorpusFormat::jsonl : CorpusFormat::txt;
    std::ifstream in(path);
    if (!in) throw io::IoError("cannot read corpus " + path.string(), "ngram");
    std::size_t skipped = 0;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (format == CorpusFormat::txt) {
            fn(std::move(line));
            continue;
        }
        if (trim(line).empty()) continue;
        json j = json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object() || !j.contains("text") || !j["text"].is_string()) {
            ++skipped;
            continue;
        }
        fn(j["text"].get<std::string>());
    }
    if (skipped) spdlog::warn("{}: skipped {} malformed records", path.string(), skipped);
    return skipped;
}

// ---------------------------------------------------------------------------
// Counting

struct NgramTable {
    NgramSpec spec;
    std::vector<std::pair<std::string, std::uint64_t>> entries;  // sorted by key
    std::uint64_t total_tokens = 0;
    std::uint64_t doc_count = 0;
    std::size_t skipped_records = 0;

    std::uint64_t count(const std::string& key) const {
        auto it = std::lower_bound(entries.begin(), entries.end(), key,
                                   [](const auto& e, const std::string& k) { return e.first < k; });
        return it != entries.end() && it->first == key ? it->second : 0;
    }
    std::uint64_t total_count() const {
        std::uint64_t s = 0;
        for (const auto& e : entries) s += e.second;
        return s;
    }
};

struct CountOptions {
    std::size_t workers = 1;
    std::size_t spill_threshold = 1 << 20;  // distinct keys per shard before spilling
    std::size_t batch_documents = 4096;
    fs::path scratch_dir;                   // defaults to a temp directory
    CorpusFormat format = CorpusFormat::automatic;
};

namespace detail {

using Counts = std::unordered_map<std::string, std::uint64_t>;

inline void write_run(const fs::path& path, const Counts& counts) {
    std::vector<const Counts::value_type*> sorted;
    sorted.reserve(counts.size());
    for (const auto& kv : counts) sorted.push_back(&kv);
    std::sort(sorted.begin(), sorted.end(), [](auto a, auto b) { return a->first < b->first; });
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw io::IoError("cannot write spill file " + path.string(), "ngram");
    for (auto kv : sorted) out << kv->first << '\t' << kv->second << '\n';
    if (!out) throw io::IoError("short write to spill file " + path.string(), "ngram");
}

struct RunReader {
    std::ifstream in;
    std::string key;
    std::uint64_t count = 0;
    bool next() {
        std::string line;
        if (!std::getline(in, line)) return false;
        const auto tab = line.rfind('\t');
        if (tab == std::string::npos) throw io::IoError("corrupt spill file", "ngram");
        key = line.substr(0, tab);
        count = std::stoull(line.substr(tab + 1));
        return true;
    }
};

/// k-way merge of sorted runs, summing equal keys.
inline std::vector<std::pair<std::string, std::uint64_t>> merge_runs(const std::vector<fs::path>& runs) {
    std::vector<RunReader> readers(runs.size());
    using Item = std::pair<std::string, std::size_t>;
    auto cmp = [](const Item& a, const Item& b) { return a.first > b.first || (a.first == b.first && a.second > b.second); };
    std::priority_queue<Item, std::vector<Item>, decltype(cmp)> heap(cmp);
    for (std::size_t r = 0; r < runs.size(); ++r) {
        readers[r].in.open(runs[r], std::ios::binary);
        if (!readers[r].in) throw io::IoError("cannot read spill file " + runs[r].string(), "ngram");
        if (readers[r].next()) heap.emplace(readers[r].key, r);
    }
    std::vector<std::pair<std::string, std::uint64_t>> out;
    while (!heap.empty()) {
        auto [key, r] = heap.top();
        heap.pop();
        if (!out.empty() && out.back().first == key) out.back().second += readers[r].count;
        else out.emplace_back(key, readers[r].count);
        if (readers[r].next()) heap.emplace(readers[r].key, r);
    }
    return out;
}

}  // namespace detail

using NgramFilter = std::function<bool(const std::vector<std::string>& toks, std::size_t begin)>;

/// Exact counts of all n-grams (optionally only those passing `keep`).
/// Documents are dealt round-robin to shards in fixed-size batches; each
/// shard spills a sorted run whenever its table exceeds the threshold.
inline NgramTable count_documents(const std::function<void(const std::function<void(std::string&&)>&)>& source,
                                  const NgramSpec& spec, const CountOptions& opt, const NgramFilter& keep = {}) {
    if (spec.n < 1) throw InvalidArgument("n must be >= 1", "ngram");
    const std::size_t shards = std::max<std::size_t>(1, opt.workers);
    fs::path scratch = opt.scratch_dir;
    bool own_scratch = false;
    if (scratch.empty()) {
        static std::atomic<unsigned> counter{0};
        scratch = fs::temp_directory_path() /
                  ("persona-ngram-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        own_scratch = true;
    }
    fs::create_directories(scratch);

    std::vector<detail::Counts> tables(shards);
    std::vector<std::vector<fs::path>> runs(shards);
    std::vector<std::uint64_t> tokens(shards, 0);
    NgramTable table;
    table.spec = spec;
    const std::size_t n = static_cast<std::size_t>(spec.n);

    auto spill = [&](std::size_t s) {
        if (tables[s].empty()) return;
        fs::path p = scratch / ("run-" + std::to_string(s) + "-" + std::to_string(runs[s].size()) + ".tsv");
        detail::write_run(p, tables[s]);
        runs[s].push_back(std::move(p));
        tables[s].clear();
    };

    std::vector<std::string> batch;
    auto flush = [&] {
        parallel_for(shards, shards, [&](std::size_t s) {
            for (std::size_t d = s; d < batch.size(); d += shards) {
                const auto toks = tokenize(batch[d], spec.lowercase);
                tokens[s] += toks.size();
                for (std::size_t b = 0; b + n <= toks.size(); ++b) {
                    if (keep && !keep(toks, b)) continue;
                    ++tables[s][join_tokens(toks, b, n)];
                }
                if (tables[s].size() > opt.spill_threshold) spill(s);
            }
        });
        table.doc_count += batch.size();
        batch.clear();
    };

    try {
        source([&](std::string&& doc) {
            batch.push_back(std::move(doc));
            if (batch.size() >= opt.batch_documents) flush();
        });
        flush();
        for (std::size_t s = 0; s < shards; ++s) spill(s);
        std::vector<fs::path> all;
        for (const auto& r : runs) all.insert(all.end(), r.begin(), r.end());
        table.entries = detail::merge_runs(all);
    } catch (...) {
        if (own_scratch) fs::remove_all(scratch);
        throw;
    }
    for (auto t : tokens) table.total_tokens += t;
    if (own_scratch) fs::remove_all(scratch);
    else
        for (const auto& r : runs)
            for (const auto& p : r) fs::remove(p);
    return table;
}

inline NgramTable count_ngrams(const fs::path& corpus, const NgramSpec& spec, const CountOptions& opt = {},
                               const NgramFilter& keep = {}) {
    std::size_t skipped = 0;
    auto table = count_documents(
        [&](const std::function<void(std::string&&)>& emit) { skipped = for_each_document(corpus, opt.format, emit); },
        spec, opt, keep);
    table.skipped_records = skipped;
    return table;
}

// ---------------------------------------------------------------------------
// Queries

using Ranked = std::vector<std::pair<std::string, std::uint64_t>>;

/// Count descending, ties by n-gram.
inline Ranked top_k(const NgramTable& table, std::size_t k) {
    if (k < 1) throw InvalidArgument("k must be >= 1", "ngram");
    Ranked out(table.entries.begin(), table.entries.end());
    auto by_rank = [](const auto& a, const auto& b) { return a.second != b.second ? a.second > b.second : a.first < b.first; };
    if (k < out.size()) {
        std::partial_sort(out.begin(), out.begin() + static_cast<std::ptrdiff_t>(k), out.end(), by_rank);
        out.resize(k);
    } else {
        std::sort(out.begin(), out.end(), by_rank);
    }
    return out;
}

inline bool contains_at(const std::vector<std::string>& toks, std::size_t begin, std::size_t n,
                        const std::vector<std::string>& phrase) {
    for (std::size_t off = 0; off + phrase.size() <= n; ++off)
        if (std::equal(phrase.begin(), phrase.end(), toks.begin() + static_cast<std::ptrdiff_t>(begin + off)))
            return true;
    return false;
}

/// All n-grams that contain `phrase` as a contiguous token run, ranked.
inline Ranked containing_phrase(const fs::path& corpus, const std::string& phrase, const NgramSpec& spec,
                                const CountOptions& opt = {}) {
    const auto p = tokenize(phrase, spec.lowercase);
    if (p.empty()) throw InvalidArgument("phrase has no tokens", "ngram");
    if (p.size() > static_cast<std::size_t>(spec.n))
        throw InvalidArgument("phrase has " + std::to_string(p.size()) + " tokens, more than n=" + std::to_string(spec.n),
                              "ngram");
    const auto n = static_cast<std::size_t>(spec.n);
    const auto table = count_ngrams(corpus, spec, opt, [&](const auto& toks, std::size_t b) {
        return contains_at(toks, b, n, p);
    });
    return top_k(table, std::max<std::size_t>(1, table.entries.size()));
}

struct Comparison {
    Ranked top_a;
    Ranked top_b;
    std::vector<std::uint64_t> a_in_b;  // count in b of each top_a entry
};

inline Comparison compare_corpora(const NgramTable& a, const NgramTable& b, std::size_t k) {
    if (!(a.spec == b.spec)) throw InvalidArgument("cannot compare tables built with different specs", "ngram");
    Comparison c{top_k(a, k), top_k(b, k), {}};
    for (const auto& e : c.top_a) c.a_in_b.push_back(b.count(e.first));
    return c;
}

inline std::string render_ranked(const Ranked& r) {
    std::size_t w = 5;
    for (const auto& e : r) w = std::max(w, e.first.size());
    std::string out = "ngram" + std::string(w - 5, ' ') + "  count\n";
    for (const auto& e : r) out += e.first + std::string(w - e.first.size(), ' ') + "  " + std::to_string(e.second) + "\n";
    return out;
}

inline std::string render_ranked_csv(const Ranked& r) {
    std::string out = "ngram,count\n";
    for (const auto& e : r) out += io::csv_field(e.first) + "," + std::to_string(e.second) + "\n";
    return out;
}

inline std::string render_comparison(const Comparison& c, const std::string& name_a, const std::string& name_b) {
    std::size_t wa = name_a.size(), wb = name_b.size();
    for (const auto& e : c.top_a) wa = std::max(wa, e.first.size() + 2 + std::to_string(e.second).size());
    for (const auto& e : c.top_b) wb = std::max(wb, e.first.size() + 2 + std::to_string(e.second).size());
    const std::string in_b = "count in " + name_b;
    auto pad = [](const std::string& s, std::size_t w) { return s + std::string(w - s.size(), ' '); };
    std::string out = pad("rank", 4) + "  " + pad(name_a, wa) + "  " + pad(name_b, wb) + "  " + in_b + "\n";
    const std::size_t rows = std::max(c.top_a.size(), c.top_b.size());
    for (std::size_t i = 0; i < rows; ++i) {
        std::string ca = i < c.top_a.size() ? c.top_a[i].first + " (" + std::to_string(c.top_a[i].second) + ")" : "";
        std::string cb = i < c.top_b.size() ? c.top_b[i].first + " (" + std::to_string(c.top_b[i].second) + ")" : "";
        std::string line = pad(std::to_string(i + 1), 4) + "  " + pad(ca, wa + 2) + pad(cb, wb + 2) +
                           (i < c.a_in_b.size() ? std::to_string(c.a_in_b[i]) : "");
        while (!line.empty() && line.back() == ' ') line.pop_back();
        out += line + "\n";
    }
    return out;
}

}  // namespace persona::ngram
