#pragma once

// Perception gaps, effect sizes, distributional distances and the report
// tables built from them.

#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <boost/math/distributions/students_t.hpp>
#include <json.hpp>

#include "persona/common.hpp"
#include "persona/io.hpp"
#include "persona/surveys.hpp"

namespace persona::metrics {

using json = nlohmann::json;
using surveys::Study;

class MetricsError : public Error {
public:
    explicit MetricsError(const std::string& what) : Error(what, "evaluate") {}
};

// ---------------------------------------------------------------------------
// Encodings and per-respondent scores

/// Numeric position of each option letter, in letter order.
inline std::vector<double> default_positions(Study s) {
    switch (s) {
    case Study::atp_w110: return {2, 1, 0, -1, -2};
    case Study::subversion: return {1, 2, 3, 4};
    case Study::meta_prejudice: return {1, 2, 3, 4, 5};
    }
    return {};
}

inline void check_positions(const std::vector<double>& pos) {
    if (pos.size() < 2) throw MetricsError("an encoding needs at least two positions");
    const bool up = pos[1] > pos[0];
    for (std::size_t i = 1; i < pos.size(); ++i)
        if (up ? !(pos[i] > pos[i - 1]) : !(pos[i] < pos[i - 1]))
            throw MetricsError("encoding positions must be strictly monotone");
}

struct Encodings {
    std::map<Study, std::vector<double>> positions;

    static Encodings defaults() {
        Encodings e;
        for (auto s : surveys::all_studies) e.positions[s] = default_positions(s);
        return e;
    }
    const std::vector<double>& at(Study s) const { return positions.at(s); }
};

enum class ScoreMode { expected, sampled, argmax };

inline std::string_view score_mode_name(ScoreMode m) {
    switch (m) {
    case ScoreMode::expected: return "expected";
    case ScoreMode::sampled: return "sampled";
    case ScoreMode::argmax: return "argmax";
    }
    return "sampled";
}

inline ScoreMode parse_score_mode(std::string_view s) {
    if (s == "expected") return ScoreMode::expected;
    if (s == "sampled") return ScoreMode::sampled;
    if (s == "argmax") return ScoreMode::argmax;
    throw InvalidArgument("unknown score mode '" + std::string(s) + "'");
}

/// Probabilities in letter order A, B, ... for a distribution over `k` options.
inline std::vector<double> ordered_probabilities(const std::map<char, double>& probs, std::size_t k) {
    if (probs.size() != k) throw MetricsError("distribution has " + std::to_string(probs.size()) +
                                              " options, encoding has " + std::to_string(k));
    std::vector<double> out;
    for (std::size_t i = 0; i < k; ++i) {
        auto it = probs.find(static_cast<char>('A' + i));
        if (it == probs.end()) throw MetricsError(std::string("distribution lacks option ") + static_cast<char>('A' + i));
        out.push_back(it->second);
    }
    return out;
}

inline double respondent_score(const std::vector<double>& probs, const std::vector<double>& positions, ScoreMode mode,
                               std::uint64_t seed = 0) {
    if (probs.size() != positions.size()) throw MetricsError("encoding does not cover the question's options");
    switch (mode) {
    case ScoreMode::expected: {
        double s = 0;
        for (std::size_t i = 0; i < probs.size(); ++i) s += probs[i] * positions[i];
        return s;
    }
    case ScoreMode::sampled: {
        Rng rng(seed);
        return positions[rng.categorical(probs)];
    }
    case ScoreMode::argmax: {
        std::size_t best = 0;
        for (std::size_t i = 1; i < probs.size(); ++i)
            if (probs[i] > probs[best]) best = i;
        return positions[best];
    }
    }
    return 0;
}

// ---------------------------------------------------------------------------
// Distances and statistics

/// Earth mover's distance on an ordered support. With `normalize`, positions
/// are rescaled to span [0, 1].
inline double wasserstein_1d(const std::vector<double>& p, const std::vector<double>& q,
                             const std::vector<double>& positions, bool normalize = true) {
    if (p.size() != q.size() || p.size() != positions.size()) throw MetricsError("mismatched supports");
    if (p.empty()) return 0.0;
    double span = 1.0;
    if (normalize) {
        span = std::abs(positions.back() - positions.front());
        if (!(span > 0)) throw MetricsError("degenerate position span");
    }
    double cp = 0, cq = 0, total = 0;
    for (std::size_t k = 0; k + 1 < p.size(); ++k) {
        cp += p[k];
        cq += q[k];
        total += std::abs(cp - cq) * std::abs(positions[k + 1] - positions[k]) / span;
    }
    return total;
}

struct Moments {
    std::size_t n = 0;
    double mean = 0;
    double m2 = 0;
    double variance() const { return n > 1 ? m2 / static_cast<double>(n - 1) : 0.0; }
};

/// Welford's running mean and sum of squared deviations.
inline Moments moments(const std::vector<double>& xs) {
    Moments m;
    for (double x : xs) {
        ++m.n;
        const double d = x - m.mean;
        m.mean += d / static_cast<double>(m.n);
        m.m2 += d * (x - m.mean);
    }
    return m;
}

inline double cohens_d(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() < 2 || b.size() < 2) throw MetricsError("Cohen's d needs at least two scores per group");
    const auto ma = moments(a), mb = moments(b);
    const double pooled = std::sqrt((ma.m2 + mb.m2) / static_cast<double>(ma.n + mb.n - 2));
    const double diff = ma.mean - mb.mean;
    if (pooled == 0.0) {
        if (diff == 0.0) return 0.0;
        throw MetricsError("Cohen's d undefined: zero pooled deviation with different means");
    }
    return diff / pooled;
}

struct TTest {
    double t = 0;
    double df = 0;
    double p = 1;
    std::string stars;
};

inline std::string significance_stars(double p) {
    if (p < 0.001) return "***";
    if (p < 0.01) return "**";
    if (p < 0.05) return "*";
    return "";
}

/// Welch's unequal-variance t-test, two-sided.
inline TTest welch_t(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() < 2 || b.size() < 2) throw MetricsError("t-test needs at least two scores per group");
    const auto ma = moments(a), mb = moments(b);
    const double va = ma.variance() / static_cast<double>(ma.n);
    const double vb = mb.variance() / static_cast<double>(mb.n);
    if (va == 0.0 && vb == 0.0) throw MetricsError("t-test undefined: both groups have zero variance");
    TTest r;
    r.t = (ma.mean - mb.mean) / std::sqrt(va + vb);
    r.df = (va + vb) * (va + vb) /
           (va * va / static_cast<double>(ma.n - 1) + vb * vb / static_cast<double>(mb.n - 1));
    const boost::math::students_t dist(r.df);
    r.p = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t)));
    r.stars = significance_stars(r.p);
    return r;
}

// ---------------------------------------------------------------------------
// Study scores and gaps

struct RespondentScores {
    Party party = Party::none;
    std::map<std::string, double> by_question;
};

struct StudyScores {
    Study study;
    std::vector<std::string> order;  // respondent ids in cohort order
    std::map<std::string, RespondentScores> respondents;
};

inline std::uint64_t score_seed(std::uint64_t seed, const std::string& respondent, const std::string& question) {
    return mix_seed(mix_seed(seed, "score:" + respondent), question);
}

/// Scores every cell of a run. `party_of` maps respondent id to party.
inline StudyScores score_study(Study study, const std::vector<surveys::ResponseDistribution>& cells,
                               const std::map<std::string, Party>& party_of, const Encodings& enc, ScoreMode mode,
                               std::uint64_t seed) {
    StudyScores s{study, {}, {}};
    const auto& pos = enc.at(study);
    check_positions(pos);
    for (const auto& c : cells) {
        auto pit = party_of.find(c.respondent_id);
        if (pit == party_of.end()) throw MetricsError("no party for respondent " + c.respondent_id);
        auto [it, fresh] = s.respondents.try_emplace(c.respondent_id);
        if (fresh) {
            s.order.push_back(c.respondent_id);
            it->second.party = pit->second;
        }
        const auto probs = ordered_probabilities(c.probabilities, pos.size());
        it->second.by_question[c.question_id] =
            respondent_score(probs, pos, mode, score_seed(seed, c.respondent_id, c.question_id));
    }
    return s;
}

struct GapReport {
    Study study;
    Party party;
    std::optional<double> delta;
    std::optional<double> cohens_d;
    std::optional<double> wd;
    std::optional<double> t;
    std::string stars;
    std::size_t n_a = 0;
    std::size_t n_b = 0;
};

/// Per-respondent mean over `questions`, for respondents of `party` that
/// answered at least one of them.
inline std::vector<double> group_means(const StudyScores& s, Party party, const std::vector<std::string>& questions) {
    std::vector<double> out;
    for (const auto& id : s.order) {
        const auto& r = s.respondents.at(id);
        if (r.party != party) continue;
        double sum = 0;
        int n = 0;
        for (const auto& q : questions) {
            if (auto it = r.by_question.find(q); it != r.by_question.end()) {
                sum += it->second;
                ++n;
            }
        }
        if (n) out.push_back(sum / n);
    }
    return out;
}

inline GapReport gap_between(Study study, Party label, const std::vector<double>& a, const std::vector<double>& b) {
    GapReport g{study, label, {}, {}, {}, {}, "", a.size(), b.size()};
    if (a.empty() || b.empty()) return g;
    g.delta = moments(a).mean - moments(b).mean;
    if (a.size() >= 2 && b.size() >= 2) {
        try {
            g.cohens_d = cohens_d(a, b);
        } catch (const MetricsError&) {
        }
        try {
            const auto t = welch_t(a, b);
            g.t = t.t;
            g.stars = t.stars;
        } catch (const MetricsError&) {
        }
    }
    return g;
}

inline std::vector<std::string> question_ids(Study study, const std::function<bool(const surveys::SurveyQuestion&)>& keep) {
    std::vector<std::string> out;
    for (const auto& q : surveys::load_study(study))
        if (keep(q)) out.push_back(q.id);
    return out;
}

/// Ingroup minus outgroup mean evaluation of `target` on the trait items.
inline GapReport hostility_gap(const StudyScores& s, Party target) {
    if (s.study != Study::atp_w110) throw MetricsError("hostility gap needs atp_w110 scores");
    const auto qs = question_ids(Study::atp_w110, [&](const auto& q) { return q.target_party == target; });
    return gap_between(s.study, target, group_means(s, target, qs), group_means(s, opposing(target), qs));
}

/// Perceivers' belief about the other party's willingness to subvert, minus
/// that party's own reported willingness.
inline GapReport subversion_gap(const StudyScores& s, Party perceiver) {
    if (s.study != Study::subversion) throw MetricsError("subversion gap needs subversion scores");
    const Party other = opposing(perceiver);
    const auto meta = question_ids(Study::subversion, [&](const auto& q) {
        return q.perspective == surveys::Perspective::meta_perception && surveys::addressed_to(q.asked_to, perceiver);
    });
    const auto self = question_ids(Study::subversion, [&](const auto& q) {
        return q.perspective == surveys::Perspective::self_action && surveys::addressed_to(q.asked_to, other);
    });
    return gap_between(s.study, perceiver, group_means(s, perceiver, meta), group_means(s, other, self));
}

/// `party`'s actual warmth toward the other party, minus the other party's
/// belief about that warmth. Positive means the belief is colder than reality.
inline GapReport meta_perception_gap(const StudyScores& s, Party party) {
    if (s.study != Study::meta_prejudice) throw MetricsError("meta-perception gap needs meta_prejudice scores");
    const Party other = opposing(party);
    const auto actual = question_ids(Study::meta_prejudice, [&](const auto& q) {
        return q.perspective == surveys::Perspective::self_opinion && q.target_party == other;
    });
    const auto believed = question_ids(Study::meta_prejudice, [&](const auto& q) {
        return q.perspective == surveys::Perspective::meta_perception && q.target_party == other &&
               surveys::addressed_to(q.asked_to, other);
    });
    return gap_between(s.study, party, group_means(s, party, actual), group_means(s, other, believed));
}

inline GapReport study_gap(const StudyScores& s, Party party) {
    switch (s.study) {
    case Study::atp_w110: return hostility_gap(s, party);
    case Study::subversion: return subversion_gap(s, party);
    case Study::meta_prejudice: return meta_perception_gap(s, party);
    }
    return hostility_gap(s, party);
}

// ---------------------------------------------------------------------------
// Human reference data

struct HumanReference {
    Study study;
    Party party;
    double delta;
    double cohens_d;
    double t;
    std::string stars;
};

inline const std::vector<HumanReference>& human_reference() {
    static const std::vector<HumanReference> rows = {
        {Study::atp_w110, Party::democrat, 1.630, 2.208, 25.875, "***"},
        {Study::atp_w110, Party::republican, 1.606, 2.263, 26.514, "***"},
        {Study::subversion, Party::democrat, 0.445, 1.887, 35.879, "***"},
        {Study::subversion, Party::republican, 0.398, 1.951, 39.329, "***"},
        {Study::meta_prejudice, Party::democrat, 1.091, 0.761, 12.266, "***"},
        {Study::meta_prejudice, Party::republican, 1.182, 0.768, 12.4, "***"},
    };
    return rows;
}

inline const HumanReference& human_reference(Study s, Party p) {
    for (const auto& r : human_reference())
        if (r.study == s && r.party == p) return r;
    throw MetricsError("no human reference row");
}

inline json human_reference_json() {
    json arr = json::array();
    for (const auto& r : human_reference())
        arr.push_back({{"study", surveys::study_name(r.study)},
                       {"party", party_name(r.party)},
                       {"delta", r.delta},
                       {"cohens_d", r.cohens_d},
                       {"t", r.t},
                       {"stars", r.stars}});
    return arr;
}

/// Human microdata: one categorical answer per (respondent, question).
struct HumanAnswer {
    std::string respondent_id;
    Party party;
    std::string question_id;
    char answer;
};

inline std::vector<HumanAnswer> load_human_microdata(const std::filesystem::path& path) {
    const auto t = io::read_csv(path);
    const auto ci = t.column("respondent_id"), cp = t.column("party"), cq = t.column("question_id"),
               ca = t.column("answer");
    std::vector<HumanAnswer> out;
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        const auto& row = t.rows[r];
        if (row[ca].size() != 1 || row[ca][0] < 'A' || row[ca][0] > 'E')
            throw MetricsError(path.string() + ": row " + std::to_string(r + 2) + ": bad answer '" + row[ca] + "'");
        out.push_back({row[ci], parse_party(row[cp]), row[cq], row[ca][0]});
    }
    return out;
}

/// Mean over the study's questions of the WD between the party's human
/// answer shares and the uniform mixture of its personas' distributions.
inline std::optional<double> party_wd(Study study, Party party, const std::vector<surveys::ResponseDistribution>& cells,
                                      const std::map<std::string, Party>& party_of,
                                      const std::vector<HumanAnswer>& humans, const Encodings& enc) {
    const auto& pos = enc.at(study);
    double sum = 0;
    int n = 0;
    for (const auto& q : surveys::load_study(study)) {
        std::vector<double> human(pos.size(), 0.0), model(pos.size(), 0.0);
        int nh = 0, nm = 0;
        for (const auto& h : humans) {
            if (h.party != party || h.question_id != q.id) continue;
            const std::size_t idx = static_cast<std::size_t>(h.answer - 'A');
            if (idx >= pos.size()) throw MetricsError("human answer outside options of " + q.id);
            human[idx] += 1;
            ++nh;
        }
        for (const auto& c : cells) {
            if (c.question_id != q.id) continue;
            auto it = party_of.find(c.respondent_id);
            if (it == party_of.end() || it->second != party) continue;
            const auto probs = ordered_probabilities(c.probabilities, pos.size());
            for (std::size_t i = 0; i < pos.size(); ++i) model[i] += probs[i];
            ++nm;
        }
        if (!nh || !nm) continue;
        for (auto& x : human) x /= nh;
        for (auto& x : model) x /= nm;
        sum += wasserstein_1d(human, model, pos);
        ++n;
    }
    if (!n) return std::nullopt;
    return sum / n;
}

// ---------------------------------------------------------------------------
// Reports

struct ReportRow {
    std::string source;
    GapReport gap;
    bool reference = false;  // n is not applicable
};

inline std::vector<ReportRow> human_rows(Study s) {
    std::vector<ReportRow> out;
    for (Party p : {Party::democrat, Party::republican}) {
        const auto& h = human_reference(s, p);
        GapReport g{s, p, h.delta, h.cohens_d, std::nullopt, h.t, h.stars, 0, 0};
        out.push_back({"human", g, true});
    }
    return out;
}

inline std::string fmt_opt(const std::optional<double>& v, int digits = 3) {
    return v ? io::format_fixed(*v, digits) : "---";
}

inline std::string party_label(Party p) { return p == Party::democrat ? "Democrat" : "Republican"; }

inline std::vector<std::vector<std::string>> report_cells(const std::vector<ReportRow>& rows) {
    std::vector<std::vector<std::string>> out;
    out.push_back({"source", "study", "party", "delta", "cohens_d", "wd", "t", "stars", "n"});
    for (const auto& r : rows) {
        const auto& g = r.gap;
        out.push_back({r.source, std::string(surveys::study_name(g.study)), party_label(g.party), fmt_opt(g.delta),
                       fmt_opt(g.cohens_d), fmt_opt(g.wd), fmt_opt(g.t), g.stars.empty() ? "---" : g.stars,
                       r.reference ? "---" : std::to_string(g.n_a) + "/" + std::to_string(g.n_b)});
    }
    return out;
}

inline std::string render_csv(const std::vector<ReportRow>& rows) {
    std::string out;
    for (const auto& line : report_cells(rows)) {
        for (std::size_t i = 0; i < line.size(); ++i) {
            if (i) out += ",";
            out += io::csv_field(line[i]);
        }
        out += "\n";
    }
    return out;
}

inline std::string render_text(const std::vector<ReportRow>& rows) {
    const auto cells = report_cells(rows);
    std::vector<std::size_t> width(cells.front().size(), 0);
    for (const auto& line : cells)
        for (std::size_t i = 0; i < line.size(); ++i) width[i] = std::max(width[i], line[i].size());
    std::string out;
    for (std::size_t r = 0; r < cells.size(); ++r) {
        std::string line;
        for (std::size_t i = 0; i < cells[r].size(); ++i) {
            const auto& c = cells[r][i];
            const std::string pad(width[i] - c.size(), ' ');
            if (i) line += "  ";
            line += i < 3 ? c + pad : pad + c;  // text columns left, numbers right
        }
        while (!line.empty() && line.back() == ' ') line.pop_back();
        out += line + "\n";
        if (r == 0) {
            std::size_t total = 0;
            for (auto w : width) total += w;
            out += std::string(total + 2 * (width.size() - 1), '-') + "\n";
        }
    }
    return out;
}

}  // namespace persona::metrics
