#pragma once

// Shared vocabulary: error types, seed mixing, a portable RNG, small string helpers.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace persona {

/// Base class for every error raised by the library. `stage()` names the
/// pipeline stage that failed so CLI messages can point at it.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what, std::string stage = {})
        : std::runtime_error(what), stage_(std::move(stage)) {}
    const std::string& stage() const noexcept { return stage_; }

private:
    std::string stage_;
};

class InvalidArgument : public Error {
public:
    using Error::Error;
};

enum class Party { democrat, republican, independent, other, none };

inline std::string_view party_name(Party p) {
    switch (p) {
    case Party::democrat: return "democrat";
    case Party::republican: return "republican";
    case Party::independent: return "independent";
    case Party::other: return "other";
    case Party::none: return "none";
    }
    return "none";
}

inline Party opposing(Party p) {
    if (p == Party::democrat) return Party::republican;
    if (p == Party::republican) return Party::democrat;
    throw InvalidArgument("only democrat/republican have an opposing party");
}

inline Party parse_party(std::string_view s) {
    if (s == "democrat") return Party::democrat;
    if (s == "republican") return Party::republican;
    if (s == "independent") return Party::independent;
    if (s == "other") return Party::other;
    if (s == "none") return Party::none;
    throw InvalidArgument("unknown party '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// Seeds

/// splitmix64 finalizer.
constexpr std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Derives a child seed from a parent seed and a stream index.
constexpr std::uint64_t mix_seed(std::uint64_t parent, std::uint64_t stream) {
    return splitmix64(parent ^ splitmix64(stream + 0x632be59bd9b4e019ULL));
}

inline std::uint64_t mix_seed(std::uint64_t parent, std::string_view label) {
    std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    for (unsigned char c : label) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return mix_seed(parent, h);
}

/// Deterministic RNG whose output does not depend on the standard library's
/// distribution implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) throw InvalidArgument("Rng::below(0)");
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                    std::numeric_limits<std::uint64_t>::max() % n;
        std::uint64_t x;
        do {
            x = engine_();
        } while (x >= limit);
        return x % n;
    }

    /// Index drawn from a probability vector (need not be normalized).
    std::size_t categorical(const std::vector<double>& weights) {
        double total = 0;
        for (double w : weights) total += w;
        if (!(total > 0)) throw InvalidArgument("categorical draw from zero-mass vector");
        const double u = uniform() * total;
        double acc = 0;
        std::size_t last = 0;
        for (std::size_t i = 0; i < weights.size(); ++i) {
            if (weights[i] <= 0) continue;
            acc += weights[i];
            last = i;
            if (u < acc) return i;
        }
        return last;
    }

    /// Fisher-Yates with `below`, so the permutation is portable.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
    }

private:
    std::mt19937_64 engine_;
};

// ---------------------------------------------------------------------------
// Strings

inline std::string trim(std::string_view s) {
    auto is_space = [](unsigned char c) { return std::isspace(c) != 0; };
    std::size_t b = 0, e = s.size();
    while (b < e && is_space(s[b])) ++b;
    while (e > b && is_space(s[e - 1])) --e;
    return std::string(s.substr(b, e - b));
}

inline std::string to_lower(std::string_view s) {
    std::string out(s);
    for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

inline std::vector<std::string> split_lines(std::string_view s) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (start <= s.size()) {
        auto nl = s.find('\n', start);
        if (nl == std::string_view::npos) {
            out.emplace_back(s.substr(start));
            break;
        }
        std::string_view line = s.substr(start, nl - start);
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        out.emplace_back(line);
        start = nl + 1;
    }
    return out;
}

inline std::size_t count_words(std::string_view s) {
    std::size_t n = 0;
    bool in_word = false;
    for (unsigned char c : s) {
        const bool space = std::isspace(c) != 0;
        if (!space && !in_word) ++n;
        in_word = !space;
    }
    return n;
}

inline std::string replace_all(std::string s, std::string_view from, std::string_view to) {
    if (from.empty()) return s;
    std::size_t pos = 0;
    while ((pos = s.find(from, pos)) != std::string::npos) {
        s.replace(pos, from.size(), to);
        pos += to.size();
    }
    return s;
}

}  // namespace persona
