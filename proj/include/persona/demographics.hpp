#pragma once

// Two-stage trait annotation of backstories: an explicit-evidence pass at
// temperature 0, then sampled multiple-choice answers for traits that were
// not stated outright.

#include <array>
#include <map>
#include <optional>
#include <regex>
#include <string>
#include <vector>

#include <json.hpp>
#include <spdlog/spdlog.h>

#include "persona/backstory.hpp"
#include "persona/common.hpp"
#include "persona/llm_backend.hpp"

namespace persona::demographics {

using json = nlohmann::json;

enum class TraitKind { age, gender, education, income, race_ethnicity, party };

inline constexpr std::array<TraitKind, 6> all_traits = {TraitKind::age,    TraitKind::gender,
                                                        TraitKind::education, TraitKind::income,
                                                        TraitKind::race_ethnicity, TraitKind::party};

inline std::string_view trait_name(TraitKind k) {
    switch (k) {
    case TraitKind::age: return "age";
    case TraitKind::gender: return "gender";
    case TraitKind::education: return "education";
    case TraitKind::income: return "income";
    case TraitKind::race_ethnicity: return "race_ethnicity";
    case TraitKind::party: return "party";
    }
    return "age";
}

inline TraitKind parse_trait(std::string_view s) {
    for (auto k : all_traits)
        if (trait_name(k) == s) return k;
    throw InvalidArgument("unknown trait '" + std::string(s) + "'");
}

inline std::size_t trait_index(TraitKind k) { return static_cast<std::size_t>(k); }

struct TraitOption {
    char letter;
    std::string label;
};

struct TraitOptionSet {
    TraitKind kind;
    std::vector<TraitOption> options;
    std::vector<char> refusal_letters;

    bool has_letter(char c) const {
        return std::any_of(options.begin(), options.end(), [c](const auto& o) { return o.letter == c; });
    }
    bool is_refusal(char c) const {
        return std::find(refusal_letters.begin(), refusal_letters.end(), c) != refusal_letters.end();
    }
    const std::string& label_of(char c) const {
        for (const auto& o : options)
            if (o.letter == c) return o.label;
        throw InvalidArgument(std::string("option letter '") + c + "' not in " + std::string(trait_name(kind)));
    }
    std::vector<char> substantive_letters() const {
        std::vector<char> out;
        for (const auto& o : options)
            if (!is_refusal(o.letter)) out.push_back(o.letter);
        return out;
    }
    /// Letter for a letter or a label (case-insensitive), if any.
    std::optional<char> resolve(std::string_view value) const {
        const std::string v = trim(value);
        if (v.size() == 1 && has_letter(static_cast<char>(std::toupper(static_cast<unsigned char>(v[0])))))
            return static_cast<char>(std::toupper(static_cast<unsigned char>(v[0])));
        const std::string lv = to_lower(v);
        for (const auto& o : options)
            if (to_lower(o.label) == lv) return o.letter;
        return std::nullopt;
    }
};

struct TraitQuestionnaire {
    TraitOptionSet survey;       // asked to the persona (stage 2)
    TraitOptionSet extraction;   // asked about the transcript (stage 1)
    std::string survey_question;
    std::string extraction_question;
    std::string extraction_instruction;
};

namespace detail {

inline std::vector<TraitOption> with_tail(std::vector<std::string> labels, const std::string& tail) {
    std::vector<TraitOption> out;
    labels.push_back(tail);
    for (std::size_t i = 0; i < labels.size(); ++i) out.push_back({static_cast<char>('A' + i), labels[i]});
    return out;
}

inline TraitQuestionnaire make(TraitKind kind, std::vector<std::string> labels, std::string survey_refusal,
                               std::string survey_question, std::string extraction_question,
                               std::string extraction_instruction) {
    const char refusal = static_cast<char>('A' + labels.size());
    TraitQuestionnaire q;
    q.survey = {kind, with_tail(labels, survey_refusal), {refusal}};
    q.extraction = {kind, with_tail(labels, "Was not mentioned"), {refusal}};
    q.survey_question = std::move(survey_question);
    q.extraction_question = std::move(extraction_question);
    q.extraction_instruction = std::move(extraction_instruction);
    return q;
}

}  // namespace detail

inline const std::array<TraitQuestionnaire, 6>& questionnaires() {
    static const std::array<TraitQuestionnaire, 6> q = {
        detail::make(TraitKind::age, {"18-24", "25-34", "35-44", "45-54", "55-64", "65+"}, "Prefer not to answer",
                     "What is your age?",
                     "What does the person’s essay above mention about the age of the person?",
                     "First, provide evidence that is mentioned in the text. If the age was not mentioned, select "
                     "‘Was not mentioned’. Next, answer with (A), (B), (C), (D), (E), (G)."),
        detail::make(TraitKind::gender, {"Male", "Female", "Other (e.g., non-binary, trans)"}, "Prefer not to answer",
                     "What is your gender?",
                     "What does the person's essay above mention about the gender of the person?",
                     "First, provide evidence that is mentioned in the text. If the gender was not mentioned, select "
                     "‘Was not mentioned’. Next, answer with (A), (B), (C), (D)."),
        detail::make(TraitKind::education,
                     {"Less than high school", "High school graduate or equivalent (e.g., GED)",
                      "Some college, but no degree", "Associate degree", "Bachelor's degree",
                      "Professional degree (e.g., JD, MD)", "Master's degree", "Doctoral degree"},
                     "Prefer not to answer", "What is the highest level of education you have completed?",
                     "What does the person’s essay above mention about the highest level of education the "
                     "person has completed?",
                     "First, provide evidence that is mentioned in the text. If the highest level of education was "
                     "not mentioned, select ‘Was not mentioned’. Next, answer with (A), (B), (C), (D), (E), "
                     "(F), (G), (H), (I)."),
        detail::make(TraitKind::income,
                     {"Less than $10,000", "$10,000 to $19,999", "$20,000 to $29,999", "$30,000 to $39,999",
                      "$40,000 to $49,999", "$50,000 to $59,999", "$60,000 to $69,999", "$70,000 to $79,999",
                      "$80,000 to $89,999", "$90,000 to $99,999", "$100,000 to $149,999", "$150,000 to $199,999",
                      "$200,000 or more"},
                     "Prefer not to answer", "What is your annual household income?",
                     "What does the person’s essay above mention about the annual household income the person "
                     "makes?",
                     "First, provide evidence that is mentioned in the text. If the annual household income was not "
                     "mentioned, select ‘Was not mentioned’. Next, answer with (A), (B), (C), (D), (E), "
                     "(F), (G), (H), (I), (J), (K), (L), (M), (N)."),
        detail::make(TraitKind::race_ethnicity,
                     {"American Indian or Alaska Native", "Asian or Asian American", "Black or African American",
                      "Hispanic or Latino/a", "Middle Eastern or North African",
                      "Native Hawaiian or Other Pacific Islander", "White or European", "Other"},
                     "Prefer not to answer", "Which of the following racial or ethnic groups do you identify with?",
                     "What does the person’s essay above mention about racial or ethnic groups the person "
                     "identifies with?",
                     "First, provide evidence that is mentioned in the text. If the racial or ethnic groups was not "
                     "mentioned, select ‘Was not mentioned’. Next, answer with (A), (B), (C), (D), (E), "
                     "(F), (G), (H), (I)."),
        detail::make(TraitKind::party, {"Democrat", "Republican", "Independent", "Other"}, "No preference",
                     "Generally speaking, do you usually think of yourself as ...?",
                     "What does the person’s essay above mention about political party the person identifies "
                     "with?",
                     "First, provide evidence that is mentioned in the text. If the affiliation of the political "
                     "party was not mentioned, select ‘Was not mentioned’. Next, answer with (A), (B), "
                     "(C), (D), (E)."),
    };
    return q;
}

inline const TraitQuestionnaire& questionnaire(TraitKind k) { return questionnaires()[trait_index(k)]; }

/// Option set used for distributions and the human roster.
inline const TraitOptionSet& option_set(TraitKind k) { return questionnaire(k).survey; }

inline std::string render_options(const TraitOptionSet& set) {
    std::string out;
    for (const auto& o : set.options) out += std::string("(") + o.letter + ") " + o.label + "\n";
    return out;
}

inline std::string extraction_prompt(const std::string& transcript, TraitKind k) {
    const auto& q = questionnaire(k);
    return transcript + "\n\nQuestion: " + q.extraction_question + "\n" + render_options(q.extraction) +
           q.extraction_instruction + "\nAnswer:";
}

inline std::string survey_prompt(const std::string& transcript, TraitKind k) {
    const auto& q = questionnaire(k);
    return transcript + "\n\nQuestion: " + q.survey_question + "\n" + render_options(q.survey) + "Answer:";
}

/// Age bracket letter for an integer age, if the age is 18 or over.
inline std::optional<char> age_bracket(int age) {
    if (age < 18) return std::nullopt;
    if (age <= 24) return 'A';
    if (age <= 34) return 'B';
    if (age <= 44) return 'C';
    if (age <= 54) return 'D';
    if (age <= 64) return 'E';
    return 'F';
}

// ---------------------------------------------------------------------------
// Free-text choice parser

namespace detail {

inline bool is_word_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; }

inline bool boundary_before(std::string_view s, std::size_t pos) { return pos == 0 || !is_word_char(s[pos - 1]); }
inline bool boundary_after(std::string_view s, std::size_t end) { return end >= s.size() || !is_word_char(s[end]); }

inline bool starts_with_ci(std::string_view s, std::size_t pos, std::string_view prefix) {
    if (pos + prefix.size() > s.size()) return false;
    for (std::size_t i = 0; i < prefix.size(); ++i)
        if (std::tolower(static_cast<unsigned char>(s[pos + i])) != std::tolower(static_cast<unsigned char>(prefix[i])))
            return false;
    return true;
}

}  // namespace detail

/// Maps a free-text answer to an option letter. Rules, first hit wins:
/// "(X)", then "X)", then a bare letter followed by its label (or a reply that
/// is only the letter), then label text (earliest, longest on ties), then for
/// the age set an integer age mapped to its bracket.
inline std::optional<char> parse_choice(std::string_view text, const std::vector<TraitOption>& options,
                                        bool age_fallback = false) {
    using detail::boundary_after;
    using detail::boundary_before;
    auto has_letter = [&](char c) {
        return std::any_of(options.begin(), options.end(), [c](const auto& o) { return o.letter == c; });
    };
    auto label_of = [&](char c) -> const std::string& {
        return std::find_if(options.begin(), options.end(), [c](const auto& o) { return o.letter == c; })->label;
    };

    for (std::size_t i = 0; i + 2 < text.size(); ++i)
        if (text[i] == '(' && text[i + 2] == ')' && has_letter(text[i + 1])) return text[i + 1];

    for (std::size_t i = 0; i + 1 < text.size(); ++i)
        if (text[i + 1] == ')' && has_letter(text[i]) && boundary_before(text, i)) return text[i];

    const std::string whole = trim(text);
    if (whole.size() == 1 && has_letter(whole[0])) return whole[0];
    if (whole.size() == 2 && whole[1] == '.' && has_letter(whole[0])) return whole[0];
    for (std::size_t i = 0; i < text.size(); ++i) {
        if (!has_letter(text[i]) || !boundary_before(text, i) || !boundary_after(text, i + 1)) continue;
        std::size_t j = i + 1;
        while (j < text.size() && (text[j] == '.' || text[j] == ':' || text[j] == '-' || text[j] == ' ')) ++j;
        if (j == i + 1) continue;
        if (detail::starts_with_ci(text, j, label_of(text[i]))) return text[i];
    }

    std::optional<char> best;
    std::size_t best_pos = std::string_view::npos, best_len = 0;
    for (const auto& o : options) {
        for (std::size_t pos = 0; pos + o.label.size() <= text.size(); ++pos) {
            if (pos > best_pos) break;
            if (!detail::starts_with_ci(text, pos, o.label)) continue;
            if (!boundary_before(text, pos) || !boundary_after(text, pos + o.label.size())) continue;
            if (pos < best_pos || o.label.size() > best_len) {
                best = o.letter;
                best_pos = pos;
                best_len = o.label.size();
            }
            break;
        }
    }
    if (best) return best;

    if (age_fallback) {
        for (std::size_t i = 0; i < text.size();) {
            if (!std::isdigit(static_cast<unsigned char>(text[i]))) {
                ++i;
                continue;
            }
            std::size_t j = i;
            while (j < text.size() && std::isdigit(static_cast<unsigned char>(text[j]))) ++j;
            if (j - i <= 3 && boundary_before(text, i)) {
                const int v = std::stoi(std::string(text.substr(i, j - i)));
                if (v >= 18 && v <= 120) return age_bracket(v);
            }
            i = j;
        }
    }
    return std::nullopt;
}

inline std::optional<char> parse_choice(std::string_view text, const TraitOptionSet& set) {
    return parse_choice(text, set.options, set.kind == TraitKind::age);
}

// ---------------------------------------------------------------------------
// Distributions

enum class Method { explicit_evidence, sampled };

inline std::string_view method_name(Method m) { return m == Method::explicit_evidence ? "explicit" : "sampled"; }

struct EvidenceFinding {
    TraitKind trait;
    std::optional<char> option;  // nullopt = not mentioned
    std::optional<std::string> evidence_quote;
};

struct TraitDistribution {
    TraitKind trait = TraitKind::age;
    Method method = Method::sampled;
    std::map<char, double> probabilities;  // substantive letters only
    int support_count = 0;
    std::optional<std::string> evidence_quote;

    double probability(char letter) const {
        auto it = probabilities.find(letter);
        return it == probabilities.end() ? 0.0 : it->second;
    }
    bool operator==(const TraitDistribution&) const = default;
};

struct PersonaProfile {
    std::string backstory_id;
    std::array<TraitDistribution, 6> distributions;

    const TraitDistribution& at(TraitKind k) const { return distributions[trait_index(k)]; }
    bool operator==(const PersonaProfile&) const = default;
};

class AnnotationError : public Error {
public:
    AnnotationError(const std::string& backstory_id, TraitKind trait, const std::string& why)
        : Error(backstory_id + " / " + std::string(trait_name(trait)) + ": " + why, "annotate") {}
};

inline TraitDistribution one_hot(TraitKind k, char letter, std::optional<std::string> quote) {
    TraitDistribution d;
    d.trait = k;
    d.method = Method::explicit_evidence;
    for (char c : option_set(k).substantive_letters()) d.probabilities[c] = c == letter ? 1.0 : 0.0;
    d.evidence_quote = std::move(quote);
    return d;
}

/// First double-quoted span, straight or curly.
inline std::optional<std::string> first_quote(std::string_view reply) {
    static const std::regex re("\"([^\"]+)\"|“([^”]+)”");
    std::cmatch m;
    if (!std::regex_search(reply.begin(), reply.end(), m, re)) return std::nullopt;
    return trim(m[1].matched ? m[1].str() : m[2].str());
}

/// Interprets an extractor reply: the last "(X)" is the answer; a quote
/// that is not found in the transcript voids the finding.
inline EvidenceFinding parse_extraction(std::string_view reply, TraitKind k, std::string_view transcript) {
    const auto& set = questionnaire(k).extraction;
    EvidenceFinding f{k, std::nullopt, std::nullopt};
    std::optional<char> letter;
    for (std::size_t i = 0; i + 2 < reply.size(); ++i)
        if (reply[i] == '(' && reply[i + 2] == ')' && set.has_letter(reply[i + 1])) letter = reply[i + 1];
    if (!letter) {
        spdlog::warn("{}: extractor reply has no option letter; treating as not mentioned", trait_name(k));
        return f;
    }
    if (set.is_refusal(*letter)) return f;
    auto quote = first_quote(reply);
    if (!quote || quote->empty()) {
        spdlog::warn("{}: extractor cited ({}) without a quote; treating as not mentioned", trait_name(k), *letter);
        return f;
    }
    if (transcript.find(*quote) == std::string_view::npos) {
        spdlog::warn("{}: extractor quote not found in transcript; treating as not mentioned", trait_name(k));
        return f;
    }
    f.option = letter;
    f.evidence_quote = std::move(quote);
    return f;
}

inline EvidenceFinding extract_explicit(const backstory::Backstory& b, TraitKind k, llm::Client& extractor) {
    if (b.turns.empty()) throw InvalidArgument("backstory " + b.id + " has no turns", "annotate");
    const std::string transcript = backstory::transcript(b);
    llm::CompletionRequest req;
    req.prompt = extraction_prompt(transcript, k);
    req.max_tokens = 256;
    req.temperature = 0.0;
    req.top_p = 1.0;
    req.seed = mix_seed(b.seed, "extract:" + std::string(trait_name(k)));
    req.stop_sequences = {"\nQuestion:"};
    return parse_extraction(extractor.complete(req).text, k, transcript);
}

struct SamplingConfig {
    int n_samples = 40;
    double temperature = 1.0;
    double top_p = 1.0;
    int max_tokens = 32;
};

inline TraitDistribution sample_trait_distribution(const backstory::Backstory& b, TraitKind k, llm::Client& sampler,
                                                   const SamplingConfig& config = {}) {
    if (config.n_samples < 1) throw InvalidArgument("n_samples must be >= 1", "annotate");
    const auto& set = option_set(k);
    const std::string prompt = survey_prompt(backstory::transcript(b), k);
    const std::uint64_t base = mix_seed(b.seed, trait_name(k));
    std::map<char, int> counts;
    for (char c : set.substantive_letters()) counts[c] = 0;
    int support = 0;
    for (int i = 0; i < config.n_samples; ++i) {
        llm::CompletionRequest req;
        req.prompt = prompt;
        req.max_tokens = config.max_tokens;
        req.temperature = config.temperature;
        req.top_p = config.top_p;
        req.seed = base + static_cast<std::uint64_t>(i);
        req.stop_sequences = {"\n"};
        const auto choice = parse_choice(sampler.complete(req).text, set);
        if (!choice || set.is_refusal(*choice)) continue;
        ++counts[*choice];
        ++support;
    }
    if (support == 0) throw AnnotationError(b.id, k, "no sample parsed to a substantive option");
    TraitDistribution d;
    d.trait = k;
    d.method = Method::sampled;
    d.support_count = support;
    for (const auto& [c, n] : counts) d.probabilities[c] = static_cast<double>(n) / support;
    return d;
}

struct AnnotationBackends {
    llm::Client& extractor;
    llm::Client& sampler;
};

inline PersonaProfile annotate(const backstory::Backstory& b, AnnotationBackends backends,
                               const SamplingConfig& config = {}) {
    PersonaProfile p;
    p.backstory_id = b.id;
    for (auto k : all_traits) {
        const auto finding = extract_explicit(b, k, backends.extractor);
        p.distributions[trait_index(k)] = finding.option ? one_hot(k, *finding.option, finding.evidence_quote)
                                                         : sample_trait_distribution(b, k, backends.sampler, config);
    }
    return p;
}

// ---------------------------------------------------------------------------
// JSON

inline json to_json(const std::string& backstory_id, const TraitDistribution& d) {
    json probs = json::object();
    for (const auto& [c, p] : d.probabilities) probs[std::string(1, c)] = p;
    json j{{"backstory_id", backstory_id},
           {"trait", trait_name(d.trait)},
           {"method", method_name(d.method)},
           {"probabilities", probs},
           {"support_count", d.support_count}};
    if (d.evidence_quote) j["evidence_quote"] = *d.evidence_quote;
    return j;
}

inline std::vector<json> to_json_records(const PersonaProfile& p) {
    std::vector<json> out;
    for (const auto& d : p.distributions) out.push_back(to_json(p.backstory_id, d));
    return out;
}

/// Groups per-trait records into profiles, in first-seen order. Profiles that
/// lack a trait are dropped with a warning.
inline std::vector<PersonaProfile> profiles_from_records(const std::vector<json>& records) {
    std::vector<std::string> order;
    std::map<std::string, std::pair<PersonaProfile, std::array<bool, 6>>> by_id;
    for (const auto& r : records) {
        TraitDistribution d;
        std::string id;
        try {
            id = r.at("backstory_id").get<std::string>();
            d.trait = parse_trait(r.at("trait").get<std::string>());
            const auto method = r.at("method").get<std::string>();
            if (method != "explicit" && method != "sampled") throw InvalidArgument("unknown method " + method);
            d.method = method == "explicit" ? Method::explicit_evidence : Method::sampled;
            d.support_count = r.at("support_count").get<int>();
            for (auto it = r.at("probabilities").begin(); it != r.at("probabilities").end(); ++it) {
                if (it.key().size() != 1 || !option_set(d.trait).has_letter(it.key()[0]))
                    throw InvalidArgument("bad option letter '" + it.key() + "'");
                d.probabilities[it.key()[0]] = it.value().get<double>();
            }
            if (r.contains("evidence_quote")) d.evidence_quote = r["evidence_quote"].get<std::string>();
        } catch (const json::exception& e) {
            throw InvalidArgument(std::string("malformed profile record: ") + e.what(), "annotate");
        }
        auto [it, fresh] = by_id.try_emplace(id);
        if (fresh) {
            order.push_back(id);
            it->second.first.backstory_id = id;
            it->second.second.fill(false);
        }
        const auto slot = trait_index(d.trait);
        it->second.second[slot] = true;
        it->second.first.distributions[slot] = std::move(d);
    }
    std::vector<PersonaProfile> out;
    for (const auto& id : order) {
        const auto& [profile, seen] = by_id.at(id);
        if (std::all_of(seen.begin(), seen.end(), [](bool s) { return s; })) out.push_back(profile);
        else spdlog::warn("profile {} is missing traits; skipped", id);
    }
    return out;
}

inline json option_sets_json() {
    json out = json::object();
    for (const auto& q : questionnaires()) {
        json opts = json::array();
        for (const auto& o : q.survey.options) opts.push_back({{"letter", std::string(1, o.letter)}, {"label", o.label}});
        json refusals = json::array();
        for (char c : q.survey.refusal_letters) refusals.push_back(std::string(1, c));
        out[std::string(trait_name(q.survey.kind))] = {{"question", q.survey_question},
                                                       {"extraction_question", q.extraction_question},
                                                       {"extraction_instruction", q.extraction_instruction},
                                                       {"options", opts},
                                                       {"refusal_letters", refusals}};
    }
    return out;
}

}  // namespace persona::demographics
