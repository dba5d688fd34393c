#pragma once

// Interview-style backstories: question bank, transcript format, critic-vetted
// generation with per-question resampling.

#include <filesystem>
#include <optional>
#include <regex>
#include <string>
#include <vector>

#include <json.hpp>
#include <spdlog/spdlog.h>

#include "persona/common.hpp"
#include "persona/io.hpp"
#include "persona/llm_backend.hpp"

namespace persona::backstory {

using json = nlohmann::json;

struct InterviewQuestion {
    int id = 0;
    std::string text;
    bool operator==(const InterviewQuestion&) const = default;
};

struct InterviewTurn {
    InterviewQuestion question;
    std::string answer;
    int attempts = 1;
    bool operator==(const InterviewTurn&) const = default;
};

enum class RejectReason {
    none,
    factual_inconsistency,
    role_reversal,
    question_repetition,
    metadata_or_code,
    other_incoherence,
};

inline std::string_view reason_name(RejectReason r) {
    switch (r) {
    case RejectReason::none: return "none";
    case RejectReason::factual_inconsistency: return "factual_inconsistency";
    case RejectReason::role_reversal: return "role_reversal";
    case RejectReason::question_repetition: return "question_repetition";
    case RejectReason::metadata_or_code: return "metadata_or_code";
    case RejectReason::other_incoherence: return "other_incoherence";
    }
    return "none";
}

inline std::optional<RejectReason> parse_reason(std::string_view s) {
    for (auto r : {RejectReason::none, RejectReason::factual_inconsistency, RejectReason::role_reversal,
                   RejectReason::question_repetition, RejectReason::metadata_or_code,
                   RejectReason::other_incoherence})
        if (reason_name(r) == s) return r;
    return std::nullopt;
}

struct CritiqueVerdict {
    bool accept = true;
    RejectReason reason = RejectReason::none;
    bool operator==(const CritiqueVerdict&) const = default;
};

struct Rejection {
    int question_id = 0;
    int attempt = 0;
    RejectReason reason = RejectReason::other_incoherence;
    bool operator==(const Rejection&) const = default;
};

struct Backstory {
    std::string id;
    std::vector<InterviewTurn> turns;
    std::string generator_model;
    std::uint64_t seed = 0;
    std::size_t token_count = 0;
    bool critic_enabled = true;
    std::vector<Rejection> rejections;
    bool operator==(const Backstory&) const = default;
};

class RetryExhausted : public Error {
public:
    RetryExhausted(int question_id, int attempts)
        : Error("question " + std::to_string(question_id) + " rejected on all " + std::to_string(attempts) +
                    " attempts",
                "generate"),
          question_id_(question_id) {}
    int question_id() const noexcept { return question_id_; }

private:
    int question_id_;
};

// ---------------------------------------------------------------------------
// Question bank

inline const std::vector<InterviewQuestion>& default_question_bank() {
    static const std::vector<InterviewQuestion> bank = {
        {1, "To start, I would like to begin with a big question: tell me the story of your life. Start from the "
            "beginning--from your childhood, to education, to family and relationships, and to any major life "
            "events you may have had."},
        {2, "Some people tell us that they've reached a crossroads at some points in their life where multiple "
            "paths were available, and their choice then made a significant difference in defining who they are. "
            "What about you? Was there a moment like that for you, and if so, could you tell me the whole story "
            "about that from start to finish?"},
        {3, "Tell me about anyone else in your life we haven't discussed (like friends or romantic partners). Are "
            "there people outside of your family who are important to you?"},
        {4, "Now let's talk about your current neighborhood. Tell me all about the neighborhood and area in which "
            "you are living now."},
        {5, "Tell me about any recent changes to your daily routine."},
        {6, "How would you describe your political views?"},
        {7, "How have you been thinking about race in the U.S. recently?"},
        {8, "For you, what makes it easy or hard to stay healthy?"},
        {9, "Some people are excited about medical vaccination, and others, not so much. How about you?"},
        {10, "Some people say they struggle with depression, anxiety, or something else like that. How about for "
             "you?"},
    };
    return bank;
}

/// One question per non-blank line; ids are assigned 1..n in file order.
inline std::vector<InterviewQuestion> parse_question_bank(std::string_view text) {
    std::vector<InterviewQuestion> bank;
    for (const auto& line : split_lines(text)) {
        std::string q = trim(line);
        if (q.empty()) continue;
        if (q.find("Answer:") != std::string::npos)
            throw InvalidArgument("question bank line " + std::to_string(bank.size() + 1) + " contains 'Answer:'");
        bank.push_back({static_cast<int>(bank.size()) + 1, std::move(q)});
    }
    if (bank.empty()) throw InvalidArgument("question bank is empty");
    return bank;
}

inline std::vector<InterviewQuestion> load_question_bank(const std::optional<std::filesystem::path>& source = {}) {
    if (!source) return default_question_bank();
    try {
        return parse_question_bank(io::read_file(*source));
    } catch (const InvalidArgument& e) {
        throw InvalidArgument(source->string() + ": " + e.what(), "generate");
    }
}

inline std::vector<InterviewQuestion> ablation_bank(int n_questions) {
    const auto& bank = default_question_bank();
    if (n_questions < 1 || n_questions > static_cast<int>(bank.size()))
        throw InvalidArgument("ablation bank size must be in 1..10, got " + std::to_string(n_questions));
    return {bank.begin(), bank.begin() + n_questions};
}

// ---------------------------------------------------------------------------
// Transcript format

inline std::string render_turn(const std::string& question, const std::string& answer) {
    return "Question: " + question + "\nAnswer: " + answer;
}

/// Completed blocks joined by blank lines.
inline std::string serialize_transcript(const std::vector<InterviewTurn>& turns) {
    std::string out;
    for (std::size_t i = 0; i < turns.size(); ++i) {
        if (i) out += "\n\n";
        out += render_turn(turns[i].question.text, turns[i].answer);
    }
    return out;
}

inline std::string render_interview_prompt(const std::vector<InterviewTurn>& turns_so_far,
                                           const InterviewQuestion& next_question) {
    std::string out = serialize_transcript(turns_so_far);
    if (!out.empty()) out += "\n\n";
    out += "Question: " + next_question.text + "\nAnswer:";
    return out;
}

struct ParsedTranscript {
    std::vector<std::pair<std::string, std::string>> turns;  // (question, answer)
    std::optional<std::string> open_question;
};

/// Inverse of serialize_transcript / render_interview_prompt.
inline ParsedTranscript parse_transcript(std::string_view text) {
    static constexpr std::string_view q_tag = "Question: ";
    static constexpr std::string_view a_tag = "\nAnswer:";
    static constexpr std::string_view sep = "\n\nQuestion: ";
    ParsedTranscript out;
    if (text.empty()) return out;
    if (text.substr(0, q_tag.size()) != q_tag) throw InvalidArgument("transcript does not start with 'Question: '");
    std::size_t pos = 0;
    while (pos < text.size()) {
        pos += q_tag.size();
        const std::size_t a = text.find(a_tag, pos);
        if (a == std::string_view::npos) throw InvalidArgument("question without 'Answer:' in transcript");
        std::string question(text.substr(pos, a - pos));
        std::size_t body = a + a_tag.size();
        if (body == text.size()) {
            out.open_question = std::move(question);
            break;
        }
        if (text[body] != ' ') throw InvalidArgument("malformed answer line in transcript");
        ++body;
        const std::size_t next = text.find(sep, body);
        const std::size_t end = next == std::string_view::npos ? text.size() : next;
        out.turns.emplace_back(std::move(question), std::string(text.substr(body, end - body)));
        if (next == std::string_view::npos) break;
        pos = next + 2;
    }
    return out;
}

inline std::size_t transcript_token_count(const std::vector<InterviewTurn>& turns) {
    return count_words(serialize_transcript(turns));
}

// ---------------------------------------------------------------------------
// Critic

inline std::string critic_prompt(const std::string& candidate, const std::string& transcript_context) {
    return "You are checking one answer from a synthetic interview transcript for consistency.\n"
           "Reject the answer only for one of these problems:\n"
           "- factual_inconsistency: it contradicts a fact the interviewee stated in an earlier answer\n"
           "- role_reversal: the interviewee speaks as the interviewer or asks the questions\n"
           "- question_repetition: it repeats the interview question instead of answering it\n"
           "- metadata_or_code: it contains markup, code, URLs, file metadata or similar artifacts\n"
           "- other_incoherence: it is empty, truncated mid-word or otherwise unreadable\n"
           "Opinions, tone, style and topic choice are never reasons to reject.\n\n"
           "<<<TRANSCRIPT\n" +
           transcript_context + "\nTRANSCRIPT>>>\n\n<<<ANSWER\n" + candidate +
           "\nANSWER>>>\n\n"
           "Reply with exactly one line, either\n"
           "VERDICT: ACCEPT\n"
           "or\n"
           "VERDICT: REJECT <reason>\n";
}

/// Finds the first verdict line. No verdict line means accept.
inline CritiqueVerdict parse_verdict(const std::string& reply) {
    static const std::regex re(R"(VERDICT:\s*(ACCEPT|REJECT)(?:[ \t]+([A-Za-z_]+))?)", std::regex::icase);
    std::smatch m;
    if (!std::regex_search(reply, m, re)) {
        spdlog::warn("critic reply has no verdict line; accepting");
        return {};
    }
    if (to_lower(m[1].str()) == "accept") return {};
    CritiqueVerdict v{false, RejectReason::other_incoherence};
    if (m[2].matched) {
        if (auto r = parse_reason(to_lower(m[2].str())); r && *r != RejectReason::none) v.reason = *r;
    }
    return v;
}

inline CritiqueVerdict critique_answer(const std::string& candidate, const std::string& transcript_context,
                                       llm::Client& critic, std::uint64_t seed = 0) {
    if (trim(candidate).empty()) throw InvalidArgument("critic called with an empty candidate");
    llm::CompletionRequest req;
    req.prompt = critic_prompt(candidate, transcript_context);
    req.max_tokens = 32;
    req.temperature = 0.0;
    req.top_p = 1.0;
    req.seed = seed;
    return parse_verdict(critic.complete(req).text);
}

// ---------------------------------------------------------------------------
// Generation

struct GenerationConfig {
    double temperature = 1.0;
    double top_p = 1.0;
    int max_tokens = 512;
    std::vector<std::string> stop_sequences{"\nQuestion:"};
    int retry_bound = 5;
    bool critic_enabled = true;
};

/// Seed of one generation attempt. Attempts of the same question use
/// consecutive seeds.
inline std::uint64_t interview_seed(std::uint64_t backstory_seed, int question_id, int attempt) {
    return mix_seed(backstory_seed, static_cast<std::uint64_t>(question_id)) + static_cast<std::uint64_t>(attempt - 1);
}

inline Backstory generate_backstory(const std::vector<InterviewQuestion>& bank, const GenerationConfig& config,
                                    llm::Client& generator, llm::Client* critic, std::string id,
                                    std::uint64_t seed) {
    if (config.retry_bound < 1) throw InvalidArgument("retry bound must be >= 1");
    if (bank.empty()) throw InvalidArgument("question bank is empty");
    if (config.critic_enabled && !critic) throw InvalidArgument("critic enabled but no critic backend configured");

    Backstory b;
    b.id = std::move(id);
    b.seed = seed;
    b.generator_model = generator.backend().model();
    b.critic_enabled = config.critic_enabled;

    for (const auto& q : bank) {
        const std::string prompt = render_interview_prompt(b.turns, q);
        bool accepted = false;
        for (int attempt = 1; attempt <= config.retry_bound; ++attempt) {
            llm::CompletionRequest req;
            req.prompt = prompt;
            req.max_tokens = config.max_tokens;
            req.temperature = config.temperature;
            req.top_p = config.top_p;
            req.stop_sequences = config.stop_sequences;
            req.seed = interview_seed(seed, q.id, attempt);
            std::string answer = trim(generator.complete(req).text);

            CritiqueVerdict verdict;
            if (answer.empty()) verdict = {false, RejectReason::other_incoherence};
            else if (config.critic_enabled) verdict = critique_answer(answer, prompt, *critic, *req.seed);

            if (verdict.accept) {
                b.turns.push_back({q, std::move(answer), attempt});
                accepted = true;
                break;
            }
            b.rejections.push_back({q.id, attempt, verdict.reason});
            spdlog::debug("{}: question {} attempt {} rejected ({})", b.id, q.id, attempt, reason_name(verdict.reason));
        }
        if (!accepted) throw RetryExhausted(q.id, config.retry_bound);
    }
    b.token_count = transcript_token_count(b.turns);
    return b;
}

inline std::string backstory_id(std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "b%05zu", index);
    return buf;
}

// ---------------------------------------------------------------------------
// JSON

inline json to_json(const Backstory& b) {
    json turns = json::array();
    for (const auto& t : b.turns)
        turns.push_back({{"question_id", t.question.id}, {"question", t.question.text}, {"answer", t.answer},
                         {"attempts", t.attempts}});
    json rejections = json::array();
    for (const auto& r : b.rejections)
        rejections.push_back({{"question_id", r.question_id}, {"attempt", r.attempt}, {"reason", reason_name(r.reason)}});
    return {{"id", b.id},
            {"seed", b.seed},
            {"generator_model", b.generator_model},
            {"token_count", b.token_count},
            {"critic_enabled", b.critic_enabled},
            {"turns", turns},
            {"rejections", rejections}};
}

inline Backstory backstory_from_json(const json& j) {
    Backstory b;
    try {
        b.id = j.at("id").get<std::string>();
        b.seed = j.at("seed").get<std::uint64_t>();
        b.generator_model = j.value("generator_model", std::string());
        b.critic_enabled = j.value("critic_enabled", true);
        for (const auto& t : j.at("turns")) {
            InterviewTurn turn;
            turn.question = {t.at("question_id").get<int>(), t.at("question").get<std::string>()};
            turn.answer = t.at("answer").get<std::string>();
            turn.attempts = t.value("attempts", 1);
            if (turn.answer.empty()) throw InvalidArgument("empty answer in backstory " + b.id);
            b.turns.push_back(std::move(turn));
        }
        for (const auto& r : j.value("rejections", json::array())) {
            auto reason = parse_reason(r.at("reason").get<std::string>());
            if (!reason) throw InvalidArgument("unknown rejection reason in backstory " + b.id);
            b.rejections.push_back({r.at("question_id").get<int>(), r.at("attempt").get<int>(), *reason});
        }
    } catch (const json::exception& e) {
        throw InvalidArgument(std::string("malformed backstory record: ") + e.what());
    }
    b.token_count = transcript_token_count(b.turns);
    return b;
}

inline std::string transcript(const Backstory& b) { return serialize_transcript(b.turns); }

}  // namespace persona::backstory
