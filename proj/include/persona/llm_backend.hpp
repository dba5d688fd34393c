#pragma once

// Uniform text-completion client. Two backend kinds: a remote HTTP endpoint
// speaking the common completions wire shape, and an in-process scripted stub
// whose replies depend only on (prompt, seed).

#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <regex>
#include <semaphore>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>
#include <spdlog/spdlog.h>

#include "persona/common.hpp"

namespace persona::llm {

using json = nlohmann::json;

struct CompletionRequest {
    std::string prompt;
    int max_tokens = 512;
    double temperature = 1.0;
    double top_p = 1.0;
    std::vector<std::string> stop_sequences;
    std::optional<std::uint64_t> seed;
    bool want_token_scores = false;
    /// Fixed option set to score when `want_token_scores` is set.
    std::vector<std::string> candidate_tokens;
};

enum class FinishReason { stop, length, error };

inline std::string_view finish_reason_name(FinishReason r) {
    switch (r) {
    case FinishReason::stop: return "stop";
    case FinishReason::length: return "length";
    case FinishReason::error: return "error";
    }
    return "error";
}

struct CompletionResponse {
    std::string text;
    /// candidate token -> probability (not renormalized).
    std::optional<std::map<std::string, double>> token_scores;
    FinishReason finish_reason = FinishReason::stop;

    bool operator==(const CompletionResponse&) const = default;
};

enum class BackendErrorKind {
    transport,         // connection failure, 429, 5xx: retried
    malformed_reply,   // reply could not be interpreted
    context_overflow,  // prompt exceeds the model's context window
    rejected,          // other 4xx
    unsupported,       // capability missing (e.g. token scores)
};

class BackendError : public Error {
public:
    BackendError(BackendErrorKind kind, const std::string& what) : Error(what, "llm"), kind_(kind) {}
    BackendErrorKind kind() const noexcept { return kind_; }
    bool transient() const noexcept { return kind_ == BackendErrorKind::transport; }

private:
    BackendErrorKind kind_;
};

/// Cuts `text` at the earliest occurrence of any stop sequence.
inline std::string apply_stop_sequences(std::string text, const std::vector<std::string>& stops) {
    std::size_t cut = text.size();
    for (const auto& s : stops) {
        if (s.empty()) continue;
        if (auto pos = text.find(s); pos != std::string::npos) cut = std::min(cut, pos);
    }
    text.resize(cut);
    return text;
}

class Backend {
public:
    virtual ~Backend() = default;
    virtual CompletionResponse complete(const CompletionRequest& request) = 0;
    virtual bool supports_token_scores() const = 0;
    virtual std::string model() const = 0;
};

// ---------------------------------------------------------------------------
// Scripted stub

/// One scripted rule. A rule applies when every `match` regex is found in the
/// prompt and no `exclude` regex is. The reply is `responses[seed % size]`.
struct StubRule {
    std::vector<std::string> match;
    std::vector<std::string> exclude;
    std::vector<std::string> responses;
    std::optional<std::map<std::string, double>> token_scores;
};

struct StubScript {
    std::string model = "stub";
    bool token_scores_supported = true;
    std::vector<StubRule> rules;
    /// Used when no rule applies; an empty default makes that case an error.
    std::optional<StubRule> fallback;

    static StubScript from_json(const json& j) {
        StubScript s;
        s.model = j.value("model", std::string("stub"));
        s.token_scores_supported = j.value("token_scores", true);
        auto parse_rule = [](const json& r) {
            StubRule rule;
            auto strings = [&](const char* key) {
                std::vector<std::string> out;
                if (!r.contains(key)) return out;
                if (r[key].is_string()) out.push_back(r[key].get<std::string>());
                else out = r[key].get<std::vector<std::string>>();
                return out;
            };
            rule.match = strings("match");
            rule.exclude = strings("exclude");
            rule.responses = strings("responses");
            if (r.contains("response")) rule.responses.push_back(r["response"].get<std::string>());
            if (r.contains("token_scores"))
                rule.token_scores = r["token_scores"].get<std::map<std::string, double>>();
            if (rule.responses.empty() && !rule.token_scores)
                throw InvalidArgument("stub rule needs responses or token_scores");
            return rule;
        };
        for (const auto& r : j.value("rules", json::array())) s.rules.push_back(parse_rule(r));
        if (j.contains("default")) s.fallback = parse_rule(j["default"]);
        return s;
    }
};

class StubBackend final : public Backend {
public:
    using Handler = std::function<CompletionResponse(const CompletionRequest&)>;

    /// Handler-driven stub; the handler must be a pure function of the request.
    explicit StubBackend(Handler handler, std::string model = "stub", bool token_scores = true)
        : handler_(std::move(handler)), model_(std::move(model)), token_scores_(token_scores) {}

    explicit StubBackend(const StubScript& script)
        : model_(script.model), token_scores_(script.token_scores_supported) {
        for (const auto& rule : script.rules) compiled_.push_back(compile(rule));
        if (script.fallback) fallback_ = compile(*script.fallback);
    }

    /// Stub that answers every prompt with the same text.
    static std::shared_ptr<StubBackend> constant(std::string text, std::string model = "stub") {
        return std::make_shared<StubBackend>(
            [text = std::move(text)](const CompletionRequest&) { return CompletionResponse{text, std::nullopt}; },
            std::move(model));
    }

    CompletionResponse complete(const CompletionRequest& request) override {
        {
            std::lock_guard lock(mu_);
            ++calls_;
        }
        CompletionResponse resp = handler_ ? handler_(request) : scripted(request);
        return truncate_to_max_tokens(std::move(resp), request.max_tokens);
    }

    bool supports_token_scores() const override { return token_scores_; }
    std::string model() const override { return model_; }

    std::size_t calls() const {
        std::lock_guard lock(mu_);
        return calls_;
    }

private:
    struct CompiledRule {
        std::vector<std::regex> match;
        std::vector<std::regex> exclude;
        StubRule rule;
    };

    static CompiledRule compile(const StubRule& rule) {
        CompiledRule c{{}, {}, rule};
        for (const auto& m : rule.match) c.match.emplace_back(m, std::regex::ECMAScript);
        for (const auto& m : rule.exclude) c.exclude.emplace_back(m, std::regex::ECMAScript);
        return c;
    }

    static bool applies(const CompiledRule& c, const std::string& prompt) {
        for (const auto& re : c.match)
            if (!std::regex_search(prompt, re)) return false;
        for (const auto& re : c.exclude)
            if (std::regex_search(prompt, re)) return false;
        return true;
    }

    static CompletionResponse reply(const CompiledRule& c, const CompletionRequest& request) {
        CompletionResponse resp;
        if (!c.rule.responses.empty()) {
            const std::uint64_t seed = request.seed.value_or(0);
            resp.text = c.rule.responses[seed % c.rule.responses.size()];
        }
        if (request.want_token_scores && c.rule.token_scores) resp.token_scores = c.rule.token_scores;
        return resp;
    }

    CompletionResponse scripted(const CompletionRequest& request) const {
        for (const auto& c : compiled_)
            if (applies(c, request.prompt)) return reply(c, request);
        if (fallback_) return reply(*fallback_, request);
        throw BackendError(BackendErrorKind::malformed_reply, "no stub rule matches the prompt");
    }

    static CompletionResponse truncate_to_max_tokens(CompletionResponse resp, int max_tokens) {
        // Whitespace tokens stand in for model tokens.
        int seen = 0;
        bool in_word = false;
        for (std::size_t i = 0; i < resp.text.size(); ++i) {
            const bool space = std::isspace(static_cast<unsigned char>(resp.text[i])) != 0;
            if (!space && !in_word && ++seen > max_tokens) {
                resp.text.resize(i);
                resp.finish_reason = FinishReason::length;
                break;
            }
            in_word = !space;
        }
        return resp;
    }

    Handler handler_;
    std::vector<CompiledRule> compiled_;
    std::optional<CompiledRule> fallback_;
    std::string model_;
    bool token_scores_;
    mutable std::mutex mu_;
    std::size_t calls_ = 0;
};

// ---------------------------------------------------------------------------
// HTTP completions endpoint

struct HttpConfig {
    std::string url;  // e.g. http://localhost:8000/v1/completions
    std::string model;
    std::string api_key;  // resolved from the environment by the caller
    int timeout_seconds = 120;
    int top_logprobs = 20;
};

/// Strips whitespace and a leading "(" so " (A" and "A" score the same option.
inline std::string normalize_option_token(std::string_view token) {
    std::string t = trim(token);
    if (!t.empty() && t.front() == '(') t.erase(0, 1);
    if (!t.empty() && (t.back() == ')' || t.back() == '.')) t.pop_back();
    return t;
}

class HttpBackend final : public Backend {
public:
    explicit HttpBackend(HttpConfig config) : config_(std::move(config)) {
        static const std::regex url_re(R"(^(https?://[^/]+)(/.*)?$)");
        std::smatch m;
        if (!std::regex_match(config_.url, m, url_re))
            throw InvalidArgument("bad endpoint url '" + config_.url + "'");
        origin_ = m[1];
        path_ = m[2].matched ? std::string(m[2]) : "/v1/completions";
    }

    static json request_body(const CompletionRequest& r, const std::string& model, int top_logprobs) {
        json body{{"model", model},
                  {"prompt", r.prompt},
                  {"max_tokens", r.max_tokens},
                  {"temperature", r.temperature},
                  {"top_p", r.top_p},
                  {"stop", r.stop_sequences}};
        if (r.seed) body["seed"] = *r.seed;
        if (r.want_token_scores) body["logprobs"] = top_logprobs;
        return body;
    }

    static CompletionResponse parse_reply(const std::string& body, const CompletionRequest& r) {
        json j;
        try {
            j = json::parse(body);
        } catch (const json::exception& e) {
            throw BackendError(BackendErrorKind::malformed_reply, std::string("reply is not JSON: ") + e.what());
        }
        if (!j.contains("choices") || !j["choices"].is_array() || j["choices"].empty())
            throw BackendError(BackendErrorKind::malformed_reply, "reply has no choices");
        const auto& choice = j["choices"][0];
        if (!choice.contains("text") || !choice["text"].is_string())
            throw BackendError(BackendErrorKind::malformed_reply, "choice has no text");
        CompletionResponse resp;
        resp.text = choice["text"].get<std::string>();
        const std::string finish = choice.value("finish_reason", std::string("stop"));
        resp.finish_reason = finish == "length" ? FinishReason::length : FinishReason::stop;

        if (r.want_token_scores) {
            const json* top = nullptr;
            if (choice.contains("logprobs") && choice["logprobs"].is_object()) {
                const auto& lp = choice["logprobs"];
                if (lp.contains("top_logprobs") && lp["top_logprobs"].is_array() && !lp["top_logprobs"].empty())
                    top = &lp["top_logprobs"][0];
            }
            if (top && top->is_object()) {
                std::map<std::string, double> scores;
                for (const auto& cand : r.candidate_tokens) scores[cand] = 0.0;
                for (auto it = top->begin(); it != top->end(); ++it) {
                    const std::string norm = normalize_option_token(it.key());
                    if (auto s = scores.find(norm); s != scores.end()) s->second += std::exp(it.value().get<double>());
                }
                resp.token_scores = std::move(scores);
            }
        }
        return resp;
    }

    CompletionResponse complete(const CompletionRequest& request) override {
        httplib::Client client(origin_);
        client.set_connection_timeout(config_.timeout_seconds);
        client.set_read_timeout(config_.timeout_seconds);
        httplib::Headers headers;
        if (!config_.api_key.empty()) headers.emplace("Authorization", "Bearer " + config_.api_key);
        const std::string body = request_body(request, config_.model, config_.top_logprobs).dump();
        auto res = client.Post(path_, headers, body, "application/json");
        if (!res)
            throw BackendError(BackendErrorKind::transport,
                               "POST " + config_.url + " failed: " + httplib::to_string(res.error()));
        if (res->status == 429 || res->status >= 500)
            throw BackendError(BackendErrorKind::transport, "endpoint returned HTTP " + std::to_string(res->status));
        if (res->status >= 400) {
            const std::string lower = to_lower(res->body);
            if (lower.find("context") != std::string::npos &&
                (lower.find("length") != std::string::npos || lower.find("maximum") != std::string::npos ||
                 lower.find("window") != std::string::npos))
                throw BackendError(BackendErrorKind::context_overflow, "prompt exceeds context window: " + res->body);
            throw BackendError(BackendErrorKind::rejected,
                               "endpoint returned HTTP " + std::to_string(res->status) + ": " + res->body);
        }
        return parse_reply(res->body, request);
    }

    bool supports_token_scores() const override { return true; }
    std::string model() const override { return config_.model; }

private:
    HttpConfig config_;
    std::string origin_;
    std::string path_;
};

// ---------------------------------------------------------------------------
// Client: validation, bounded concurrency, retries

struct RetryPolicy {
    int max_attempts = 4;
    std::chrono::milliseconds initial_backoff{200};
    double multiplier = 2.0;
    std::chrono::milliseconds max_backoff{10'000};

    std::chrono::milliseconds delay_before(int attempt) const {  // attempt >= 2
        double ms = static_cast<double>(initial_backoff.count()) * std::pow(multiplier, attempt - 2);
        ms = std::min(ms, static_cast<double>(max_backoff.count()));
        return std::chrono::milliseconds(static_cast<long long>(ms));
    }
};

inline void validate(const CompletionRequest& r) {
    if (r.prompt.empty()) throw InvalidArgument("completion prompt is empty");
    if (r.max_tokens <= 0) throw InvalidArgument("max_tokens must be positive");
    if (!(r.temperature >= 0)) throw InvalidArgument("temperature must be >= 0");
    if (!(r.top_p > 0 && r.top_p <= 1)) throw InvalidArgument("top_p must be in (0, 1]");
    if (r.want_token_scores && r.candidate_tokens.empty())
        throw InvalidArgument("token scoring requires candidate tokens");
}

class Client {
public:
    using Sleeper = std::function<void(std::chrono::milliseconds)>;

    explicit Client(std::shared_ptr<Backend> backend, RetryPolicy retry = {}, std::ptrdiff_t max_in_flight = 8,
                    Sleeper sleeper = {})
        : backend_(std::move(backend)),
          retry_(retry),
          slots_(std::max<std::ptrdiff_t>(1, std::min<std::ptrdiff_t>(max_in_flight, 1024))),
          sleeper_(sleeper ? std::move(sleeper) : [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); }) {
        if (!backend_) throw InvalidArgument("client needs a backend");
    }

    CompletionResponse complete(const CompletionRequest& request) {
        validate(request);
        for (int attempt = 1;; ++attempt) {
            if (attempt > 1) sleeper_(retry_.delay_before(attempt));
            try {
                slots_.acquire();
                CompletionResponse resp;
                try {
                    resp = backend_->complete(request);
                } catch (...) {
                    slots_.release();
                    throw;
                }
                slots_.release();
                return postprocess(std::move(resp), request);
            } catch (const BackendError& e) {
                if (!e.transient() || attempt >= retry_.max_attempts) {
                    if (e.transient())
                        throw BackendError(BackendErrorKind::transport, std::string(e.what()) + " (after " +
                                                                            std::to_string(attempt) + " attempts)");
                    throw;
                }
                spdlog::warn("transient backend failure (attempt {}/{}): {}", attempt, retry_.max_attempts, e.what());
            }
        }
    }

    Backend& backend() { return *backend_; }
    const Backend& backend() const { return *backend_; }

private:
    static CompletionResponse postprocess(CompletionResponse resp, const CompletionRequest& request) {
        resp.text = apply_stop_sequences(std::move(resp.text), request.stop_sequences);
        if (resp.token_scores) {
            double sum = 0;
            for (const auto& [tok, p] : *resp.token_scores) {
                if (!(p >= 0) || !std::isfinite(p))
                    throw BackendError(BackendErrorKind::malformed_reply, "negative or non-finite token score");
                sum += p;
            }
            if (sum > 1 + 1e-6) throw BackendError(BackendErrorKind::malformed_reply, "token scores sum above 1");
        }
        return resp;
    }

    std::shared_ptr<Backend> backend_;
    RetryPolicy retry_;
    std::counting_semaphore<1024> slots_;
    Sleeper sleeper_;
};

// ---------------------------------------------------------------------------
// Option scoring

enum class ScoringMode { token_scores, sampled };

inline std::string_view scoring_mode_name(ScoringMode m) {
    return m == ScoringMode::token_scores ? "token_scores" : "sampled";
}

inline ScoringMode parse_scoring_mode(std::string_view s) {
    if (s == "token_scores") return ScoringMode::token_scores;
    if (s == "sampled") return ScoringMode::sampled;
    throw InvalidArgument("unknown measurement mode '" + std::string(s) + "'");
}

struct OptionDistribution {
    std::vector<std::string> options;
    std::vector<double> probabilities;
    ScoringMode mode = ScoringMode::token_scores;
    int n_samples = 0;    // draws requested (sampled mode)
    int n_parsed = 0;     // draws that parsed to an option (sampled mode)
};

/// Maps a free-text completion to an option index, or nullopt.
using OptionParser = std::function<std::optional<std::size_t>(const std::string&)>;

/// Leading option letter: optional "(", the letter, then ")" / "." / space / end.
inline std::optional<std::size_t> parse_leading_option(const std::string& text, const std::vector<std::string>& options) {
    std::string t = trim(text);
    if (!t.empty() && t.front() == '(') t.erase(0, 1);
    for (std::size_t i = 0; i < options.size(); ++i) {
        const auto& o = options[i];
        if (t.compare(0, o.size(), o) != 0) continue;
        if (t.size() == o.size()) return i;
        const unsigned char next = static_cast<unsigned char>(t[o.size()]);
        if (!std::isalnum(next)) return i;
    }
    return std::nullopt;
}

struct OptionScoringConfig {
    ScoringMode mode = ScoringMode::token_scores;
    bool sampling_fallback = true;
    int n_samples = 40;
    std::uint64_t seed = 0;
    double temperature = 1.0;
    double top_p = 1.0;
    int max_tokens = 16;
    OptionParser parser;  // defaults to parse_leading_option
};

inline OptionDistribution normalize_scores(const std::vector<std::string>& options,
                                           const std::map<std::string, double>& scores) {
    OptionDistribution d;
    d.options = options;
    d.mode = ScoringMode::token_scores;
    double sum = 0;
    for (const auto& o : options) {
        auto it = scores.find(o);
        const double p = it == scores.end() ? 0.0 : it->second;
        d.probabilities.push_back(p);
        sum += p;
    }
    if (!(sum > 0)) throw BackendError(BackendErrorKind::malformed_reply, "no score mass on the option tokens");
    for (auto& p : d.probabilities) p /= sum;
    return d;
}

/// Categorical distribution over `options` for the completion of `prompt`.
/// Token-score mode renormalizes the backend's scores over the option tokens;
/// sampled mode (or the fallback) draws `n_samples` completions and counts
/// the parsed options.
inline OptionDistribution option_distribution(Client& client, const std::string& prompt,
                                              const std::vector<std::string>& options,
                                              const OptionScoringConfig& config = {}) {
    if (options.size() < 2) throw InvalidArgument("option scoring needs at least two options");

    bool sample = config.mode == ScoringMode::sampled;
    if (!sample) {
        if (client.backend().supports_token_scores()) {
            CompletionRequest req;
            req.prompt = prompt;
            req.max_tokens = 1;
            req.temperature = 0.0;
            req.top_p = 1.0;
            req.seed = config.seed;
            req.want_token_scores = true;
            req.candidate_tokens = options;
            auto resp = client.complete(req);
            if (resp.token_scores) {
                double mass = 0;
                for (const auto& o : options)
                    if (auto it = resp.token_scores->find(o); it != resp.token_scores->end()) mass += it->second;
                if (mass > 0) return normalize_scores(options, *resp.token_scores);
            }
        }
        if (!config.sampling_fallback)
            throw BackendError(BackendErrorKind::unsupported,
                               "backend returned no option scores and sampling fallback is disabled");
        sample = true;
    }

    OptionParser parser = config.parser ? config.parser
                                        : OptionParser([&options](const std::string& t) {
                                              return parse_leading_option(t, options);
                                          });
    if (config.n_samples < 1) throw InvalidArgument("n_samples must be >= 1");
    OptionDistribution d;
    d.options = options;
    d.mode = ScoringMode::sampled;
    d.n_samples = config.n_samples;
    std::vector<int> counts(options.size(), 0);
    for (int i = 0; i < config.n_samples; ++i) {
        CompletionRequest req;
        req.prompt = prompt;
        req.max_tokens = config.max_tokens;
        req.temperature = config.temperature;
        req.top_p = config.top_p;
        req.seed = config.seed + static_cast<std::uint64_t>(i);
        req.stop_sequences = {"\n"};
        auto resp = client.complete(req);
        if (auto idx = parser(resp.text); idx && *idx < options.size()) {
            ++counts[*idx];
            ++d.n_parsed;
        }
    }
    if (d.n_parsed == 0) throw BackendError(BackendErrorKind::malformed_reply, "no sampled completion parsed to an option");
    for (int c : counts) d.probabilities.push_back(static_cast<double>(c) / d.n_parsed);
    return d;
}

}  // namespace persona::llm
