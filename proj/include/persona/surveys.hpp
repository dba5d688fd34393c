#pragma once

// Survey instruments, persona conditioning and administration.

#include <map>
#include <mutex>
#include <optional>
#include <regex>
#include <string>
#include <vector>

#include <json.hpp>
#include <spdlog/spdlog.h>

#include "persona/backstory.hpp"
#include "persona/common.hpp"
#include "persona/demographics.hpp"
#include "persona/io.hpp"
#include "persona/llm_backend.hpp"
#include "persona/matching.hpp"
#include "persona/parallel.hpp"

namespace persona::surveys {

using json = nlohmann::json;
using demographics::TraitKind;
using demographics::TraitOption;

enum class Study { atp_w110, subversion, meta_prejudice };
enum class Perspective { self_opinion, self_action, ingroup_meta, meta_perception };
enum class TraitDim { moral, hard_working, open_minded, intelligent, honest };
enum class AskedTo { all, democrats, republicans };

inline constexpr std::array<Study, 3> all_studies = {Study::atp_w110, Study::subversion, Study::meta_prejudice};

inline std::string_view study_name(Study s) {
    switch (s) {
    case Study::atp_w110: return "atp_w110";
    case Study::subversion: return "subversion";
    case Study::meta_prejudice: return "meta_prejudice";
    }
    return "atp_w110";
}

inline Study parse_study(std::string_view s) {
    for (auto st : all_studies)
        if (study_name(st) == s) return st;
    throw InvalidArgument("unknown study '" + std::string(s) + "'");
}

inline std::string_view perspective_name(Perspective p) {
    switch (p) {
    case Perspective::self_opinion: return "self_opinion";
    case Perspective::self_action: return "self_action";
    case Perspective::ingroup_meta: return "ingroup_meta";
    case Perspective::meta_perception: return "meta_perception";
    }
    return "self_opinion";
}

inline std::string_view dim_name(TraitDim d) {
    switch (d) {
    case TraitDim::moral: return "moral";
    case TraitDim::hard_working: return "hard_working";
    case TraitDim::open_minded: return "open_minded";
    case TraitDim::intelligent: return "intelligent";
    case TraitDim::honest: return "honest";
    }
    return "moral";
}

inline std::string_view asked_to_name(AskedTo a) {
    switch (a) {
    case AskedTo::all: return "all";
    case AskedTo::democrats: return "democrats";
    case AskedTo::republicans: return "republicans";
    }
    return "all";
}

inline bool addressed_to(AskedTo a, Party p) {
    if (a == AskedTo::all) return true;
    if (a == AskedTo::democrats) return p == Party::democrat;
    return p == Party::republican;
}

struct SurveyQuestion {
    std::string id;
    Study study;
    std::string text;
    std::vector<TraitOption> options;
    Party target_party;
    Perspective perspective;
    std::optional<TraitDim> trait_dim;
    AskedTo asked_to;

    std::vector<std::string> letters() const {
        std::vector<std::string> out;
        for (const auto& o : options) out.emplace_back(1, o.letter);
        return out;
    }
};

namespace detail {

inline std::vector<TraitOption> lettered(std::initializer_list<const char*> labels) {
    std::vector<TraitOption> out;
    char c = 'A';
    for (const char* l : labels) out.push_back({c++, l});
    return out;
}

inline std::string swap_parties(const std::string& s) {
    static const std::regex re(R"(\b(DEMOCRATS|REPUBLICANS|DEMOCRAT|REPUBLICAN)\b)");
    std::string out;
    auto it = std::sregex_iterator(s.begin(), s.end(), re);
    std::size_t last = 0;
    for (; it != std::sregex_iterator(); ++it) {
        const auto& m = *it;
        out.append(s, last, static_cast<std::size_t>(m.position()) - last);
        const std::string w = m.str();
        out += w == "DEMOCRATS" ? "REPUBLICANS" : w == "REPUBLICANS" ? "DEMOCRATS" : w == "DEMOCRAT" ? "REPUBLICAN" : "DEMOCRAT";
        last = static_cast<std::size_t>(m.position() + m.length());
    }
    out.append(s, last);
    return out;
}

inline std::vector<SurveyQuestion> atp_w110() {
    struct Dim {
        TraitDim dim;
        std::vector<TraitOption> options;
    };
    const std::vector<Dim> dims = {
        {TraitDim::moral, lettered({"A lot more moral", "Somewhat more moral", "About the same",
                                    "Somewhat more immoral", "A lot more immoral"})},
        {TraitDim::hard_working, lettered({"A lot more hard-working", "Somewhat more hard-working", "About the same",
                                           "Somewhat more lazy", "A lot more lazy"})},
        {TraitDim::open_minded, lettered({"A lot more open-minded", "Somewhat more open-minded", "About the same",
                                          "Somewhat more close-minded", "A lot more close-minded"})},
        {TraitDim::intelligent, lettered({"A lot more intelligent", "Somewhat more intelligent", "About the same",
                                          "Somewhat more unintelligent", "A lot more unintelligent"})},
        {TraitDim::honest, lettered({"A lot more honest", "Somewhat more honest", "About the same",
                                     "Somewhat more dishonest", "A lot more dishonest"})},
    };
    std::vector<SurveyQuestion> out;
    for (Party target : {Party::democrat, Party::republican}) {
        const std::string noun = target == Party::democrat ? "Democrats" : "Republicans";
        for (const auto& d : dims)
            out.push_back({"atp_" + std::string(target == Party::democrat ? "dem_" : "rep_") + std::string(dim_name(d.dim)),
                           Study::atp_w110, "Compared to other Americans, would you say " + noun + " are...", d.options,
                           target, Perspective::self_opinion, d.dim, AskedTo::all});
    }
    return out;
}

inline std::vector<SurveyQuestion> subversion() {
    const auto options = lettered({"Never", "Probably Not", "Probably", "Definitely"});
    // Items addressed to Republicans; the Democrat set swaps the party words.
    const std::vector<std::pair<std::string, std::string>> meta = {
        {"court", "Would MOST DEMOCRATS support ignoring controversial court rulings by REPUBLICAN JUDGES?"},
        {"social_media", "Would MOST DEMOCRATS support freezing the social media accounts of REPUBLICAN JOURNALISTS?"},
        {"voting_stations", "Would MOST DEMOCRATS support reducing the number of voting stations in towns that "
                            "support REPUBLICANS?"},
        {"election_laws", "Would MOST DEMOCRATS support laws that would make it easier for DEMOCRATS (and harder for "
                          "REPUBLICANS) to get elected?"},
        {"violence", "Would MOST DEMOCRATS support using violence to block major REPUBLICAN laws?"},
        {"constitution", "Would MOST DEMOCRATS support significantly reinterpreting the Constitution in order to "
                         "block REPUBLICAN policies?"},
    };
    const std::vector<std::pair<std::string, std::string>> self = {
        {"court", "Would YOU support ignoring controversial court rulings by DEMOCRAT JUDGES?"},
        {"social_media", "Would YOU support freezing the social media accounts of DEMOCRAT JOURNALISTS?"},
        {"voting_stations", "Would YOU support reducing the number of voting stations in towns that support "
                            "DEMOCRATS?"},
        {"election_laws", "Would YOU support laws that would make it easier for REPUBLICANS (and harder for "
                          "DEMOCRATS) to get elected?"},
        {"violence", "Would YOU support using violence to block major DEMOCRAT laws?"},
        {"constitution", "Would YOU support significantly reinterpreting the Constitution in order to block "
                         "DEMOCRAT policies?"},
    };
    std::vector<SurveyQuestion> out;
    for (Party asked : {Party::republican, Party::democrat}) {
        const bool rep = asked == Party::republican;
        const std::string prefix = rep ? "sub_rep_" : "sub_dem_";
        const AskedTo to = rep ? AskedTo::republicans : AskedTo::democrats;
        for (const auto& [key, text] : meta)
            out.push_back({prefix + "meta_" + key, Study::subversion, rep ? text : swap_parties(text), options,
                           opposing(asked), Perspective::meta_perception, std::nullopt, to});
        for (const auto& [key, text] : self)
            out.push_back({prefix + "self_" + key, Study::subversion, rep ? text : swap_parties(text), options, asked,
                           Perspective::self_action, std::nullopt, to});
    }
    return out;
}

inline std::vector<SurveyQuestion> meta_prejudice() {
    const auto options = lettered({"Very cold", "Cold", "Neutral", "Warm", "Very warm"});
    return {
        {"meta_feel_dem", Study::meta_prejudice, "How warm or cold do you feel towards DEMOCRATS?", options,
         Party::democrat, Perspective::self_opinion, std::nullopt, AskedTo::all},
        {"meta_feel_rep", Study::meta_prejudice, "How warm or cold do you feel towards REPUBLICANS?", options,
         Party::republican, Perspective::self_opinion, std::nullopt, AskedTo::all},
        {"meta_rep_feel_dem", Study::meta_prejudice, "How warm or cold do you think REPUBLICANS feel towards DEMOCRATS?",
         options, Party::democrat, Perspective::meta_perception, std::nullopt, AskedTo::democrats},
        // Printed without a question mark; kept as printed.
        {"meta_rep_feel_rep", Study::meta_prejudice, "How warm or cold do you think REPUBLICANS feel towards REPUBLICANS",
         options, Party::republican, Perspective::ingroup_meta, std::nullopt, AskedTo::democrats},
        {"meta_dem_feel_dem", Study::meta_prejudice, "How warm or cold do you think DEMOCRATS feel towards DEMOCRATS?",
         options, Party::democrat, Perspective::ingroup_meta, std::nullopt, AskedTo::republicans},
        {"meta_dem_feel_rep", Study::meta_prejudice, "How warm or cold do you think DEMOCRATS feel towards REPUBLICANS?",
         options, Party::republican, Perspective::meta_perception, std::nullopt, AskedTo::republicans},
    };
}

}  // namespace detail

inline const std::vector<SurveyQuestion>& load_study(Study s) {
    static const std::vector<SurveyQuestion> atp = detail::atp_w110();
    static const std::vector<SurveyQuestion> sub = detail::subversion();
    static const std::vector<SurveyQuestion> meta = detail::meta_prejudice();
    switch (s) {
    case Study::atp_w110: return atp;
    case Study::subversion: return sub;
    case Study::meta_prejudice: return meta;
    }
    return atp;
}

inline const SurveyQuestion& find_question(Study s, std::string_view id) {
    for (const auto& q : load_study(s))
        if (q.id == id) return q;
    throw InvalidArgument("no question '" + std::string(id) + "' in " + std::string(study_name(s)));
}

inline json question_json(const SurveyQuestion& q) {
    json opts = json::array();
    for (const auto& o : q.options) opts.push_back({{"letter", std::string(1, o.letter)}, {"label", o.label}});
    json j{{"id", q.id},
           {"study", study_name(q.study)},
           {"text", q.text},
           {"options", opts},
           {"target_party", party_name(q.target_party)},
           {"perspective", perspective_name(q.perspective)},
           {"asked_to", asked_to_name(q.asked_to)}};
    j["trait_dim"] = q.trait_dim ? json(dim_name(*q.trait_dim)) : json(nullptr);
    return j;
}

inline json study_json(Study s) {
    json arr = json::array();
    for (const auto& q : load_study(s)) arr.push_back(question_json(q));
    return arr;
}

/// SHA-256 of the canonical JSON form of a study bank.
inline std::string study_checksum(Study s) { return io::sha256_hex(study_json(s).dump()); }

inline std::string_view pinned_checksum(Study s) {
    switch (s) {
    case Study::atp_w110: return "28f55be8a4a3edaf430c50dbcd4dac5faa8f2b1d1dff8be7292ca89374073e2e";
    case Study::subversion: return "58835397c435e0884d936463129a267602ee56f49b70ef67c4428bc6ad7a2265";
    case Study::meta_prejudice: return "50b3f548f2f93bec6d1b7f618893253b512fc23d7477cb75cd8db2ab0238d3be";
    }
    return "";
}

inline void verify_study_banks() {
    for (auto s : all_studies)
        if (study_checksum(s) != pinned_checksum(s))
            throw Error("study bank " + std::string(study_name(s)) + " does not match its pinned checksum", "survey");
}

inline std::string render_question(const SurveyQuestion& q) {
    std::string out = "Question: " + q.text + "\n";
    for (const auto& o : q.options) out += std::string("(") + o.letter + ") " + o.label + "\n";
    out += "Answer:";
    return out;
}

// ---------------------------------------------------------------------------
// Conditioning

enum class ConditioningMethod { backstory, qa, bio, portray, generative_agent };

inline constexpr std::array<ConditioningMethod, 5> all_methods = {
    ConditioningMethod::backstory, ConditioningMethod::qa, ConditioningMethod::bio, ConditioningMethod::portray,
    ConditioningMethod::generative_agent};

inline std::string_view method_name(ConditioningMethod m) {
    switch (m) {
    case ConditioningMethod::backstory: return "backstory";
    case ConditioningMethod::qa: return "qa";
    case ConditioningMethod::bio: return "bio";
    case ConditioningMethod::portray: return "portray";
    case ConditioningMethod::generative_agent: return "generative_agent";
    }
    return "backstory";
}

inline ConditioningMethod parse_method(std::string_view s) {
    for (auto m : all_methods)
        if (method_name(m) == s) return m;
    throw InvalidArgument("unknown conditioning method '" + std::string(s) + "'");
}

inline bool needs_backstory(ConditioningMethod m) {
    return m == ConditioningMethod::backstory || m == ConditioningMethod::generative_agent;
}

namespace detail {

inline std::string qa_question(TraitKind k) {
    switch (k) {
    case TraitKind::age: return "What is your age?";
    case TraitKind::gender: return "What is your gender?";
    case TraitKind::education: return "What is the highest level of education you have completed?";
    case TraitKind::income: return "What is your annual household income?";
    case TraitKind::race_ethnicity: return "What is your race or ethnicity?";
    case TraitKind::party: return "What is your political affiliation?";
    }
    return {};
}

/// Rule-based biography sentence. `second` selects the "You ..." form.
inline std::string bio_sentence(TraitKind k, char letter, bool second) {
    const std::string be = second ? "You are" : "I am";
    const std::string have = second ? "You have" : "I have";
    const std::string poss = second ? "Your" : "My";
    const std::string subj = second ? "You" : "I";
    const std::string& label = demographics::option_set(k).label_of(letter);
    switch (k) {
    case TraitKind::age:
        if (letter == 'F') return be + " 65 years old or older.";
        return be + " " + label + " years old.";
    case TraitKind::gender:
        if (letter == 'A') return be + " a man.";
        if (letter == 'B') return be + " a woman.";
        return be + " non-binary or transgender.";
    case TraitKind::education:
        switch (letter) {
        case 'A': return subj + " did not finish high school.";
        case 'B': return subj + " graduated from high school.";
        case 'C': return subj + " attended some college but did not earn a degree.";
        case 'D': return have + " an associate degree.";
        case 'E': return have + " a bachelor's degree.";
        case 'F': return have + " a professional degree.";
        case 'G': return have + " a master's degree.";
        default: return have + " a doctoral degree.";
        }
    case TraitKind::income:
        if (letter == 'A') return poss + " annual household income is less than $10,000.";
        if (letter == 'M') return poss + " annual household income is $200,000 or more.";
        return poss + " annual household income is between " + replace_all(label, " to ", " and ") + ".";
    case TraitKind::race_ethnicity:
        if (letter == 'H') return subj + " identify with a racial or ethnic group not listed here.";
        return be + " " + label + ".";
    case TraitKind::party:
        if (letter == 'A') return be + " a Democrat.";
        if (letter == 'B') return be + " a Republican.";
        if (letter == 'C') return be + " an Independent.";
        return subj + " identify with a political party other than the Democrats and the Republicans.";
    }
    return {};
}

}  // namespace detail

inline std::string render_qa(const matching::HumanRespondent& h) {
    std::string out;
    for (auto k : demographics::all_traits) {
        const char letter = h.trait(k);
        const auto& set = demographics::option_set(k);
        if (set.is_refusal(letter)) continue;
        if (!out.empty()) out += "\n";
        out += "Q: " + detail::qa_question(k) + "\nA: " + set.label_of(letter);
    }
    return out;
}

inline std::string render_bio(const matching::HumanRespondent& h, bool second_person) {
    std::string out;
    for (auto k : demographics::all_traits) {
        const char letter = h.trait(k);
        if (demographics::option_set(k).is_refusal(letter)) continue;
        if (!out.empty()) out += " ";
        out += detail::bio_sentence(k, letter, second_person);
    }
    return out;
}

inline const std::string& reflection_instruction() {
    static const std::string text =
        "Imagine you are an expert political scientist (with a PhD) taking notes while observing this interview. "
        "Write observations/reflections about the interviewee’s political views, affiliation with political parties, "
        "and stances about key societal issues. (You should make more than 5 observations and fewer than 20. Choose "
        "the number that makes sense given the depth of the interview content above.)";
    return text;
}

inline std::string reflection_prompt(const std::string& transcript) {
    return transcript + "\n\n" + reflection_instruction() + "\n";
}

/// One observation per non-empty line, list markers stripped, at most 20.
inline std::vector<std::string> parse_reflections(const std::string& reply) {
    static const std::regex marker(R"(^\s*(?:\d+[.)]|[-*•])\s*)");
    std::vector<std::string> out;
    for (const auto& line : split_lines(reply)) {
        std::string t = trim(std::regex_replace(line, marker, "", std::regex_constants::format_first_only));
        if (t.empty()) continue;
        out.push_back(std::move(t));
    }
    if (out.size() > 20) out.resize(20);
    if (out.size() < 5) spdlog::warn("expert reflection produced {} observations (expected at least 5)", out.size());
    return out;
}

inline std::vector<std::string> expert_reflection(const backstory::Backstory& b, llm::Client& client) {
    if (b.turns.empty()) throw InvalidArgument("backstory " + b.id + " is empty", "survey");
    llm::CompletionRequest req;
    req.prompt = reflection_prompt(backstory::transcript(b));
    req.max_tokens = 1024;
    req.temperature = 0.0;
    req.top_p = 1.0;
    req.seed = mix_seed(b.seed, "reflection");
    return parse_reflections(client.complete(req).text);
}

inline std::string generative_agent_prompt(const std::string& transcript, const std::vector<std::string>& reflections,
                                           const SurveyQuestion& q) {
    std::string refl;
    for (std::size_t i = 0; i < reflections.size(); ++i)
        refl += std::to_string(i + 1) + ". " + reflections[i] + "\n";
    std::string question = "1. " + q.text + "\n";
    for (const auto& o : q.options) question += std::string("(") + o.letter + ") " + o.label + "\n";
    return "Participant's interview transcript:\n\n" + transcript +
           "\n\nExpert political scientist's observations/reflections:\n\n" + refl +
           "\n=====\n\n"
           "Task: What you see above is an interview transcript. Based on the interview transcript, I want you to "
           "predict the participant's survey responses. All questions are multiple choice where you must guess from "
           "one of the options presented.\n\n"
           "As you answer, I want you to take the following steps:\n"
           "Step 1) Describe in a few sentences the kind of person that would choose each of the response options. "
           "(\"Option Interpretation\")\n"
           "Step 2) For each response options, reason about why the Participant might answer with the particular "
           "option. (\"Option Choice\")\n"
           "Step 3) Write a few sentences reasoning on which of the option best predicts the participant's response "
           "(\"Reasoning\")\n"
           "Step 4) Predict how the participant will actually respond in the survey. Predict based on the interview "
           "and your thoughts, but ultimately, DON'T over think it. Use your system 1 (fast, intuitive) thinking. "
           "(\"Response\")\n\n"
           "Here are the questions:\n\n" +
           question +
           "\n-----\n\n"
           "Output format -- output your response in json, where you provide the following:\n\n"
           "{\"1\": {\"Q\": \"<repeat the question you are answering>\",\n"
           "    \"Option Interpretation\": {\n"
           "        \"<option 1>\": \"a few sentences the kind of person that would choose each of the response "
           "options\",\n"
           "        \"<option 2>\": \"...\"},\n"
           "    \"Option Choice\": {\n"
           "        \"<option 1>\": \"reasoning about why the participant might choose each of the options\",\n"
           "        \"<option 2>\": \"...\"},\n"
           "    \"Reasoning\": \"<reasoning on which of the option best predicts the participant's response>\",\n"
           "    \"Response\": \"<your prediction on how the participant will answer the question>\"},\n"
           "\"2\": {...},\n"
           "...}\n";
}

/// Input for render_condition: the matched human and, when needed, the
/// persona's backstory and reflections.
struct ConditionInput {
    const matching::HumanRespondent* human = nullptr;
    const backstory::Backstory* backstory = nullptr;
    const std::vector<std::string>* reflections = nullptr;
};

inline std::string render_condition(ConditioningMethod m, const ConditionInput& in) {
    if (needs_backstory(m) && !in.backstory)
        throw InvalidArgument(std::string(method_name(m)) + " conditioning needs a backstory", "survey");
    if (!needs_backstory(m) && !in.human)
        throw InvalidArgument(std::string(method_name(m)) + " conditioning needs the human's traits", "survey");
    switch (m) {
    case ConditioningMethod::backstory: return backstory::transcript(*in.backstory);
    case ConditioningMethod::qa: return render_qa(*in.human);
    case ConditioningMethod::bio: return render_bio(*in.human, false);
    case ConditioningMethod::portray: return render_bio(*in.human, true);
    case ConditioningMethod::generative_agent: {
        std::string out = backstory::transcript(*in.backstory);
        if (in.reflections && !in.reflections->empty()) {
            out += "\n\nExpert political scientist's observations/reflections:\n";
            for (std::size_t i = 0; i < in.reflections->size(); ++i)
                out += std::to_string(i + 1) + ". " + (*in.reflections)[i] + "\n";
        }
        return out;
    }
    }
    return {};
}

// ---------------------------------------------------------------------------
// Administration

struct ResponseDistribution {
    std::string respondent_id;
    std::string question_id;
    std::map<char, double> probabilities;
    llm::ScoringMode mode = llm::ScoringMode::token_scores;
    int n_samples = 0;

    bool operator==(const ResponseDistribution&) const = default;
};

class CellFailure : public Error {
public:
    explicit CellFailure(const std::string& what) : Error(what, "survey") {}
};

struct AdministerConfig {
    llm::ScoringMode mode = llm::ScoringMode::token_scores;
    bool sampling_fallback = true;
    int n_samples = 40;
    std::uint64_t seed = 0;
};

inline std::string survey_prompt(const SurveyQuestion& q, const std::string& conditioning) {
    return conditioning + "\n\n" + render_question(q);
}

inline ResponseDistribution administer(const SurveyQuestion& q, const std::string& conditioning, llm::Client& client,
                                       const AdministerConfig& config) {
    if (trim(conditioning).empty()) throw InvalidArgument("conditioning text is empty", "survey");
    llm::OptionScoringConfig sc;
    sc.mode = config.mode;
    sc.sampling_fallback = config.sampling_fallback;
    sc.n_samples = config.n_samples;
    sc.seed = config.seed;
    sc.parser = [&q](const std::string& text) -> std::optional<std::size_t> {
        auto c = demographics::parse_choice(text, q.options);
        if (!c) return std::nullopt;
        return static_cast<std::size_t>(*c - 'A');
    };
    const auto dist = llm::option_distribution(client, survey_prompt(q, conditioning), q.letters(), sc);
    ResponseDistribution r;
    r.question_id = q.id;
    r.mode = dist.mode;
    r.n_samples = dist.mode == llm::ScoringMode::sampled ? dist.n_parsed : 0;
    for (std::size_t i = 0; i < q.options.size(); ++i) r.probabilities[q.options[i].letter] = dist.probabilities[i];
    return r;
}

/// Extracts the "Response" field of answer "1" from a JSON reply and parses
/// it to an option letter.
inline std::optional<char> parse_generative_agent_reply(const std::string& reply, const SurveyQuestion& q) {
    const auto open = reply.find('{');
    const auto close = reply.rfind('}');
    if (open == std::string::npos || close == std::string::npos || close < open) return std::nullopt;
    json j = json::parse(reply.substr(open, close - open + 1), nullptr, false);
    if (j.is_discarded() || !j.is_object()) return std::nullopt;
    const json* answer = &j;
    if (j.contains("1") && j["1"].is_object()) answer = &j["1"];
    if (!answer->contains("Response") || !(*answer)["Response"].is_string()) return std::nullopt;
    return demographics::parse_choice((*answer)["Response"].get<std::string>(), q.options);
}

inline ResponseDistribution administer_generative_agent(const SurveyQuestion& q, const backstory::Backstory& b,
                                                        const std::vector<std::string>& reflections,
                                                        llm::Client& client, std::uint64_t seed) {
    llm::CompletionRequest req;
    req.prompt = generative_agent_prompt(backstory::transcript(b), reflections, q);
    req.max_tokens = 1024;
    req.temperature = 0.0;
    req.top_p = 1.0;
    req.seed = seed;
    const auto letter = parse_generative_agent_reply(client.complete(req).text, q);
    if (!letter) throw CellFailure("generative-agent reply for " + q.id + " has no parseable Response field");
    ResponseDistribution r;
    r.question_id = q.id;
    r.mode = llm::ScoringMode::sampled;
    r.n_samples = 1;
    for (const auto& o : q.options) r.probabilities[o.letter] = o.letter == *letter ? 1.0 : 0.0;
    return r;
}

// ---------------------------------------------------------------------------
// Study runs

struct CohortMember {
    std::string respondent_id;
    matching::HumanRespondent human;
    const backstory::Backstory* backstory = nullptr;
    std::vector<std::string> reflections;
};

struct FailedCell {
    std::string respondent_id;
    std::string question_id;
    std::string error;
};

struct StudyRun {
    Study study;
    ConditioningMethod method;
    std::vector<ResponseDistribution> cells;  // cohort order, then question order
    std::vector<FailedCell> failures;
};

inline std::uint64_t cell_seed(std::uint64_t seed, const std::string& respondent_id, const std::string& question_id) {
    return mix_seed(mix_seed(seed, respondent_id), question_id);
}

inline StudyRun run_study(Study study, const std::vector<CohortMember>& cohort, ConditioningMethod method,
                          llm::Client& client, const AdministerConfig& config, std::size_t workers = 1) {
    if (cohort.empty()) throw InvalidArgument("survey cohort is empty", "survey");
    const auto& questions = load_study(study);
    struct Cell {
        std::size_t member;
        std::size_t question;
    };
    std::vector<Cell> grid;
    for (std::size_t m = 0; m < cohort.size(); ++m)
        for (std::size_t q = 0; q < questions.size(); ++q)
            if (addressed_to(questions[q].asked_to, cohort[m].human.party())) grid.push_back({m, q});

    std::vector<std::string> conditioning(cohort.size());
    for (std::size_t m = 0; m < cohort.size(); ++m) {
        if (method == ConditioningMethod::generative_agent) continue;
        conditioning[m] = render_condition(method, {&cohort[m].human, cohort[m].backstory, &cohort[m].reflections});
    }

    std::vector<std::optional<ResponseDistribution>> results(grid.size());
    std::vector<std::optional<std::string>> errors(grid.size());
    parallel_for(grid.size(), workers, [&](std::size_t c) {
        const auto& member = cohort[grid[c].member];
        const auto& q = questions[grid[c].question];
        AdministerConfig cfg = config;
        cfg.seed = cell_seed(config.seed, member.respondent_id, q.id);
        try {
            ResponseDistribution r;
            if (method == ConditioningMethod::generative_agent) {
                if (!member.backstory) throw InvalidArgument("generative_agent conditioning needs a backstory");
                r = administer_generative_agent(q, *member.backstory, member.reflections, client, cfg.seed);
            } else {
                r = administer(q, conditioning[grid[c].member], client, cfg);
            }
            r.respondent_id = member.respondent_id;
            results[c] = std::move(r);
        } catch (const Error& e) {
            errors[c] = e.what();
        }
    });

    StudyRun run{study, method, {}, {}};
    for (std::size_t c = 0; c < grid.size(); ++c) {
        if (results[c]) run.cells.push_back(std::move(*results[c]));
        else {
            const auto& member = cohort[grid[c].member];
            const auto& q = questions[grid[c].question];
            spdlog::warn("survey cell {} / {} failed: {}", member.respondent_id, q.id, *errors[c]);
            run.failures.push_back({member.respondent_id, q.id, *errors[c]});
        }
    }
    return run;
}

// ---------------------------------------------------------------------------
// JSON

inline json to_json(const ResponseDistribution& r, Study study, ConditioningMethod method) {
    json probs = json::object();
    for (const auto& [c, p] : r.probabilities) probs[std::string(1, c)] = p;
    json j{{"respondent_id", r.respondent_id}, {"question_id", r.question_id}, {"study", study_name(study)},
           {"method", method_name(method)},    {"mode", llm::scoring_mode_name(r.mode)}, {"probabilities", probs}};
    if (r.mode == llm::ScoringMode::sampled) j["n_samples"] = r.n_samples;
    return j;
}

inline ResponseDistribution response_from_json(const json& j) {
    ResponseDistribution r;
    try {
        r.respondent_id = j.at("respondent_id").get<std::string>();
        r.question_id = j.at("question_id").get<std::string>();
        r.mode = llm::parse_scoring_mode(j.at("mode").get<std::string>());
        r.n_samples = j.value("n_samples", 0);
        for (auto it = j.at("probabilities").begin(); it != j.at("probabilities").end(); ++it) {
            if (it.key().size() != 1) throw InvalidArgument("bad option key '" + it.key() + "'");
            r.probabilities[it.key()[0]] = it.value().get<double>();
        }
    } catch (const json::exception& e) {
        throw InvalidArgument(std::string("malformed response record: ") + e.what(), "survey");
    }
    return r;
}

}  // namespace persona::surveys
