#pragma once

// One-to-one assignment of human respondents to annotated personas by maximum
// total weight, where a weight is the product of per-trait match probabilities.

#include <array>
#include <deque>
#include <filesystem>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <spdlog/spdlog.h>

#include "persona/common.hpp"
#include "persona/demographics.hpp"
#include "persona/io.hpp"
#include "persona/parallel.hpp"

namespace persona::matching {

using demographics::TraitKind;
using demographics::PersonaProfile;

struct HumanRespondent {
    std::string id;
    std::array<char, 6> traits{};  // option letters of the survey option sets

    char trait(TraitKind k) const { return traits[demographics::trait_index(k)]; }
    Party party() const {
        switch (trait(TraitKind::party)) {
        case 'A': return Party::democrat;
        case 'B': return Party::republican;
        case 'C': return Party::independent;
        case 'D': return Party::other;
        default: return Party::none;
        }
    }
    bool operator==(const HumanRespondent&) const = default;
};

class MatchingError : public Error {
public:
    explicit MatchingError(const std::string& what) : Error(what, "match") {}
};

/// Roster CSV: id plus one column per trait holding a letter or a label.
inline std::vector<HumanRespondent> load_roster(const std::filesystem::path& path) {
    const auto table = io::read_csv(path);
    const std::size_t id_col = table.column("id");
    std::array<std::size_t, 6> cols{};
    for (auto k : demographics::all_traits) cols[demographics::trait_index(k)] = table.column(demographics::trait_name(k));
    std::vector<HumanRespondent> humans;
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
        const auto& row = table.rows[r];
        HumanRespondent h;
        h.id = row[id_col];
        if (h.id.empty()) throw MatchingError(path.string() + ": row " + std::to_string(r + 2) + " has an empty id");
        for (auto k : demographics::all_traits) {
            const auto& value = row[cols[demographics::trait_index(k)]];
            auto letter = demographics::option_set(k).resolve(value);
            if (!letter)
                throw MatchingError(path.string() + ": row " + std::to_string(r + 2) + ": '" + value +
                                    "' is not a valid " + std::string(demographics::trait_name(k)) + " option");
            h.traits[demographics::trait_index(k)] = *letter;
        }
        humans.push_back(std::move(h));
    }
    return humans;
}

/// Product over traits of the persona's probability of the human's option.
/// A human refusal contributes a factor of 1.
inline double edge_weight(const HumanRespondent& human, const PersonaProfile& profile) {
    double w = 1.0;
    for (auto k : demographics::all_traits) {
        const char letter = human.trait(k);
        if (demographics::option_set(k).is_refusal(letter)) continue;
        const auto& dist = profile.at(k);
        if (dist.trait != k || dist.probabilities.empty())
            throw MatchingError("profile " + profile.backstory_id + " lacks a " +
                                std::string(demographics::trait_name(k)) + " distribution");
        w *= dist.probability(letter);
    }
    return w;
}

struct WeightMatrix {
    std::size_t rows = 0;  // humans
    std::size_t cols = 0;  // personas
    std::vector<double> w;

    WeightMatrix() = default;
    WeightMatrix(std::size_t n, std::size_t m, double fill = 0.0) : rows(n), cols(m), w(n * m, fill) {}
    double& operator()(std::size_t i, std::size_t j) { return w[i * cols + j]; }
    double operator()(std::size_t i, std::size_t j) const { return w[i * cols + j]; }
};

inline WeightMatrix build_weight_matrix(const std::vector<HumanRespondent>& humans,
                                        const std::vector<PersonaProfile>& profiles, std::size_t workers = 1) {
    if (profiles.size() < humans.size())
        throw MatchingError("need at least as many personas as humans (" + std::to_string(profiles.size()) + " < " +
                            std::to_string(humans.size()) + ")");
    if (!humans.empty() && profiles.size() == humans.size())
        spdlog::warn("persona pool is the same size as the roster; every persona will be used");
    WeightMatrix m(humans.size(), profiles.size());
    parallel_for(humans.size(), workers, [&](std::size_t i) {
        for (std::size_t j = 0; j < profiles.size(); ++j) m(i, j) = edge_weight(humans[i], profiles[j]);
    });
    return m;
}

struct MatchResult {
    std::vector<std::size_t> assignment;  // human index -> persona index
    double total_weight = 0.0;
};

inline double assignment_total(const WeightMatrix& m, const std::vector<std::size_t>& assignment) {
    double total = 0.0;
    for (std::size_t i = 0; i < assignment.size(); ++i) total += m(i, assignment[i]);
    return total;
}

namespace detail {

struct HungarianSolution {
    std::vector<std::size_t> col_of_row;
    std::vector<double> u, v;  // duals on cost = -weight
};

/// Shortest-augmenting-path Hungarian method on cost -w, n rows <= m cols.
inline HungarianSolution hungarian_min_cost(const WeightMatrix& m) {
    const std::size_t n = m.rows, mc = m.cols;
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(mc + 1, 0.0);
    std::vector<std::size_t> p(mc + 1, 0), way(mc + 1, 0);
    for (std::size_t i = 1; i <= n; ++i) {
        p[0] = i;
        std::size_t j0 = 0;
        std::vector<double> minv(mc + 1, inf);
        std::vector<char> used(mc + 1, 0);
        do {
            used[j0] = 1;
            const std::size_t i0 = p[j0];
            double delta = inf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= mc; ++j) {
                if (used[j]) continue;
                const double cur = -m(i0 - 1, j - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= mc; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0);
    }
    HungarianSolution s;
    s.col_of_row.assign(n, 0);
    for (std::size_t j = 1; j <= mc; ++j)
        if (p[j]) s.col_of_row[p[j] - 1] = j - 1;
    s.u.assign(u.begin() + 1, u.end());
    s.v.assign(v.begin() + 1, v.end());
    return s;
}

/// Among optimal assignments, moves each row (in order) to its smallest
/// column that still admits an optimal completion. Optimal assignments are
/// exactly the perfect matchings on tight edges of an optimal dual, with
/// unused columns absorbed by implicit zero-cost rows where v is zero.
inline std::vector<std::size_t> lexicographic_refine(const WeightMatrix& m, const HungarianSolution& s) {
    constexpr double eps = 1e-9;
    const std::size_t n = m.rows, mc = m.cols;
    constexpr long dummy = -1;
    auto tight = [&](std::size_t i, std::size_t j) { return std::abs(-m(i, j) - s.u[i] - s.v[j]) <= eps; };
    auto dummy_tight = [&](std::size_t j) { return std::abs(s.v[j]) <= eps; };

    std::vector<std::size_t> col_of_row = s.col_of_row;
    std::vector<long> row_of_col(mc, dummy);
    for (std::size_t i = 0; i < n; ++i) row_of_col[col_of_row[i]] = static_cast<long>(i);

    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < col_of_row[i]; ++j) {
            if (!tight(i, j)) continue;
            const long holder = row_of_col[j];
            if (holder != dummy && static_cast<std::size_t>(holder) < i) continue;  // fixed row
            const std::size_t freed = col_of_row[i];

            // BFS over rows (real unfixed rows or the dummy pool) for an
            // alternating path from j's holder to the freed column.
            // Row nodes: 0..n-1 real, n = dummy pool.
            const std::size_t pool = n;
            std::vector<long> prev_col_of_row(n + 1, -2);  // column through which the row node was reached
            std::vector<long> prev_row_of_col(mc, -2);     // row node that moves into the column
            std::deque<std::size_t> queue;
            const std::size_t start = holder == dummy ? pool : static_cast<std::size_t>(holder);
            prev_col_of_row[start] = -1;
            queue.push_back(start);
            bool found = false;
            while (!queue.empty() && !found) {
                const std::size_t x = queue.front();
                queue.pop_front();
                for (std::size_t c = 0; c < mc && !found; ++c) {
                    if (c == j || prev_row_of_col[c] != -2) continue;
                    if (x == pool ? !dummy_tight(c) : !tight(x, c)) continue;
                    const long owner = row_of_col[c];
                    if (c != freed && owner != dummy && static_cast<std::size_t>(owner) <= i) continue;
                    prev_row_of_col[c] = static_cast<long>(x);
                    if (c == freed) {
                        found = true;
                        break;
                    }
                    const std::size_t next = owner == dummy ? pool : static_cast<std::size_t>(owner);
                    if (prev_col_of_row[next] != -2) continue;
                    prev_col_of_row[next] = static_cast<long>(c);
                    queue.push_back(next);
                }
            }
            if (!found) continue;

            // Shift every row node on the path into the column it reached.
            std::size_t c = freed;
            for (;;) {
                const std::size_t x = static_cast<std::size_t>(prev_row_of_col[c]);
                const long via = prev_col_of_row[x];
                if (x == pool) row_of_col[c] = dummy;
                else {
                    row_of_col[c] = static_cast<long>(x);
                    col_of_row[x] = c;
                }
                if (via < 0) break;
                c = static_cast<std::size_t>(via);
            }
            col_of_row[i] = j;
            row_of_col[j] = static_cast<long>(i);
            break;
        }
    }
    return col_of_row;
}

}  // namespace detail

/// Maximum-weight injective assignment of rows to columns. Among optimal
/// assignments the lexicographically smallest (row order, column order) wins.
inline MatchResult hungarian_match(const WeightMatrix& m) {
    if (m.cols < m.rows) throw MatchingError("weight matrix has fewer personas than humans");
    MatchResult r;
    if (m.rows == 0) return r;
    for (double x : m.w)
        if (!(x >= 0.0) || !std::isfinite(x)) throw MatchingError("weights must be finite and non-negative");
    const auto sol = detail::hungarian_min_cost(m);
    const double base = assignment_total(m, sol.col_of_row);
    auto refined = detail::lexicographic_refine(m, sol);
    const double refined_total = assignment_total(m, refined);
    if (refined_total < base) {
        spdlog::debug("tie-break refinement lost weight ({} < {}); keeping solver assignment", refined_total, base);
        refined = sol.col_of_row;
    }
    r.assignment = std::move(refined);
    r.total_weight = assignment_total(m, r.assignment);
    return r;
}

// ---------------------------------------------------------------------------
// Cohort assignment

struct MatchedPair {
    std::size_t human_index;
    std::size_t profile_index;
    double weight;
};

struct PartyFeasibility {
    Party party;
    std::size_t humans = 0;
    std::size_t personas_with_support = 0;
    bool feasible() const { return personas_with_support >= humans; }
};

struct CohortAssignment {
    std::vector<MatchedPair> pairs;
    double total_weight = 0.0;
    double min_weight = 0.0;
    double mean_weight = 0.0;
    std::vector<PartyFeasibility> feasibility;
};

inline std::vector<PartyFeasibility> party_feasibility(const std::vector<HumanRespondent>& humans,
                                                       const std::vector<PersonaProfile>& profiles) {
    std::vector<PartyFeasibility> out;
    for (Party p : {Party::democrat, Party::republican, Party::independent, Party::other, Party::none}) {
        PartyFeasibility f{p};
        for (const auto& h : humans) f.humans += h.party() == p;
        if (f.humans == 0) continue;
        const char letter = static_cast<char>('A' + static_cast<int>(p));
        for (const auto& prof : profiles)
            if (p == Party::none || prof.at(TraitKind::party).probability(letter) > 0) ++f.personas_with_support;
        out.push_back(f);
    }
    return out;
}

inline CohortAssignment assign_cohort(const std::vector<HumanRespondent>& humans,
                                      const std::vector<PersonaProfile>& profiles, std::size_t workers = 1) {
    CohortAssignment out;
    out.feasibility = party_feasibility(humans, profiles);
    for (const auto& f : out.feasibility)
        if (!f.feasible())
            spdlog::warn("party {}: {} humans but only {} personas with any support", party_name(f.party), f.humans,
                         f.personas_with_support);
    const auto matrix = build_weight_matrix(humans, profiles, workers);
    const auto result = hungarian_match(matrix);
    for (std::size_t i = 0; i < humans.size(); ++i)
        out.pairs.push_back({i, result.assignment[i], matrix(i, result.assignment[i])});
    out.total_weight = result.total_weight;
    if (!out.pairs.empty()) {
        out.min_weight = out.pairs.front().weight;
        for (const auto& p : out.pairs) out.min_weight = std::min(out.min_weight, p.weight);
        out.mean_weight = out.total_weight / static_cast<double>(out.pairs.size());
    }
    if (!humans.empty() && out.total_weight == 0.0)
        spdlog::warn("every matched pair has zero weight; the assignment is arbitrary");
    return out;
}

inline std::string matches_csv(const CohortAssignment& a, const std::vector<HumanRespondent>& humans,
                               const std::vector<PersonaProfile>& profiles) {
    std::string out = "id,backstory_id,weight\n";
    for (const auto& p : a.pairs)
        out += io::csv_field(humans[p.human_index].id) + "," + io::csv_field(profiles[p.profile_index].backstory_id) +
               "," + io::format_double(p.weight) + "\n";
    return out;
}

struct MatchRow {
    std::string human_id;
    std::string backstory_id;
    double weight;
};

inline std::vector<MatchRow> load_matches(const std::filesystem::path& path) {
    const auto t = io::read_csv(path);
    const auto ci = t.column("id"), cb = t.column("backstory_id"), cw = t.column("weight");
    std::vector<MatchRow> out;
    for (const auto& row : t.rows) {
        try {
            out.push_back({row[ci], row[cb], std::stod(row[cw])});
        } catch (const std::exception&) {
            throw MatchingError(path.string() + ": bad weight '" + row[cw] + "'");
        }
    }
    return out;
}

}  // namespace persona::matching
