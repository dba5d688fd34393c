#pragma once

// Stage orchestration over a directory of JSONL/CSV artifacts plus a
// manifest of content hashes.

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <regex>
#include <set>
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
#include "persona/metrics.hpp"
#include "persona/parallel.hpp"
#include "persona/surveys.hpp"

namespace persona::pipeline {

namespace fs = std::filesystem;
using json = nlohmann::json;
using surveys::Study;

/// Error raised by a stage; the message carries the stage and artifact path.
class StageError : public Error {
public:
    StageError(const std::string& stage, const fs::path& artifact, const std::string& what)
        : Error("[" + stage + "] " + artifact.string() + ": " + what, stage), artifact_(artifact) {}
    const fs::path& artifact() const noexcept { return artifact_; }

private:
    fs::path artifact_;
};

inline const std::vector<std::string>& stage_order() {
    static const std::vector<std::string> order = {"generate", "annotate", "match", "survey", "evaluate"};
    return order;
}

// ---------------------------------------------------------------------------
// Configuration

using EnvLookup = std::function<std::optional<std::string>(const std::string&)>;

inline std::optional<std::string> process_env(const std::string& name) {
    if (const char* v = std::getenv(name.c_str())) return std::string(v);
    return std::nullopt;
}

/// Replaces ${NAME} in every string value.
inline json interpolate(const json& j, const EnvLookup& env) {
    static const std::regex var(R"(\$\{([A-Za-z_][A-Za-z0-9_]*)\})");
    if (j.is_string()) {
        const std::string s = j.get<std::string>();
        std::string out;
        std::size_t last = 0;
        for (auto it = std::sregex_iterator(s.begin(), s.end(), var); it != std::sregex_iterator(); ++it) {
            const auto& m = *it;
            auto value = env(m[1].str());
            if (!value) throw InvalidArgument("config: environment variable " + m[1].str() + " is not set", "config");
            out.append(s, last, static_cast<std::size_t>(m.position()) - last);
            out += *value;
            last = static_cast<std::size_t>(m.position() + m.length());
        }
        out.append(s, last);
        return out;
    }
    if (j.is_object()) {
        json out = json::object();
        for (auto it = j.begin(); it != j.end(); ++it) out[it.key()] = interpolate(it.value(), env);
        return out;
    }
    if (j.is_array()) {
        json out = json::array();
        for (const auto& v : j) out.push_back(interpolate(v, env));
        return out;
    }
    return j;
}

struct BackendSpec {
    std::string type = "stub";  // stub | http
    fs::path script;
    std::string url;
    std::string model;
    std::string api_key_env;
    int timeout_seconds = 120;
    int top_logprobs = 20;
};

inline const std::vector<std::string>& backend_roles() {
    static const std::vector<std::string> roles = {"generator", "critic", "annotator", "sampler", "survey", "reflection"};
    return roles;
}

struct PipelineConfig {
    fs::path base_dir;  // relative paths resolve against this
    json raw;           // as written, before interpolation; stored in manifests
    fs::path storage_root;
    std::uint64_t seed = 0;
    std::size_t workers = 1;
    std::ptrdiff_t max_in_flight = 8;
    llm::RetryPolicy retry;
    std::map<std::string, BackendSpec> backends;  // every role resolved

    std::size_t count = 0;
    backstory::GenerationConfig generation;
    std::optional<fs::path> question_bank;
    int bank_prefix = 0;  // 0 = whole bank

    demographics::SamplingConfig annotation;

    std::optional<fs::path> roster;

    std::vector<Study> studies{surveys::all_studies.begin(), surveys::all_studies.end()};
    surveys::ConditioningMethod method = surveys::ConditioningMethod::backstory;
    surveys::AdministerConfig administer;

    metrics::ScoreMode score_mode = metrics::ScoreMode::sampled;
    std::optional<fs::path> human_microdata;
    metrics::Encodings encodings = metrics::Encodings::defaults();
};

namespace detail {

inline fs::path resolve(const fs::path& base, const std::string& p) {
    fs::path path(p);
    return path.is_absolute() ? path : base / path;
}

inline BackendSpec parse_backend(const json& j, const fs::path& base) {
    BackendSpec b;
    b.type = j.value("type", std::string("stub"));
    if (b.type == "stub") {
        if (!j.contains("script")) throw InvalidArgument("config: stub backend needs 'script'", "config");
        b.script = resolve(base, j["script"].get<std::string>());
    } else if (b.type == "http") {
        b.url = j.at("url").get<std::string>();
        b.model = j.at("model").get<std::string>();
        if (j.contains("api_key")) throw InvalidArgument("config: API keys are read from the environment; use 'api_key_env'", "config");
        b.api_key_env = j.value("api_key_env", std::string());
        b.timeout_seconds = j.value("timeout_seconds", 120);
        b.top_logprobs = j.value("top_logprobs", 20);
    } else {
        throw InvalidArgument("config: unknown backend type '" + b.type + "'", "config");
    }
    return b;
}

}  // namespace detail

inline PipelineConfig parse_config(const json& raw, const fs::path& base_dir, const EnvLookup& env = process_env) {
    PipelineConfig c;
    c.raw = raw;
    c.base_dir = base_dir;
    const json j = interpolate(raw, env);
    try {
        if (!j.contains("seed")) throw InvalidArgument("config: 'seed' is required (all randomness is seeded)", "config");
        c.seed = j["seed"].get<std::uint64_t>();
        c.storage_root = detail::resolve(base_dir, j.value("storage_root", std::string("run")));
        c.workers = j.value("workers", std::size_t{1});
        if (c.workers < 1) throw InvalidArgument("config: workers must be >= 1", "config");
        c.max_in_flight = j.value("max_in_flight", std::ptrdiff_t{8});
        if (c.max_in_flight < 1) throw InvalidArgument("config: max_in_flight must be >= 1", "config");

        if (j.contains("retry")) {
            const auto& r = j["retry"];
            c.retry.max_attempts = r.value("max_attempts", c.retry.max_attempts);
            c.retry.initial_backoff = std::chrono::milliseconds(r.value("initial_backoff_ms", 200));
            c.retry.multiplier = r.value("multiplier", 2.0);
            c.retry.max_backoff = std::chrono::milliseconds(r.value("max_backoff_ms", 10000));
            if (c.retry.max_attempts < 1) throw InvalidArgument("config: retry.max_attempts must be >= 1", "config");
        }

        const json backends = j.value("backends", json::object());
        std::map<std::string, BackendSpec> given;
        for (auto it = backends.begin(); it != backends.end(); ++it) {
            const bool known = it.key() == "default" || std::find(backend_roles().begin(), backend_roles().end(),
                                                                  it.key()) != backend_roles().end();
            if (!known) throw InvalidArgument("config: unknown backend role '" + it.key() + "'", "config");
            given[it.key()] = detail::parse_backend(it.value(), base_dir);
        }
        for (const auto& role : backend_roles()) {
            if (given.count(role)) c.backends[role] = given[role];
            else if (role == "sampler" && given.count("generator")) c.backends[role] = given["generator"];
            else if (given.count("default")) c.backends[role] = given["default"];
            else throw InvalidArgument("config: no backend for role '" + role + "' and no default", "config");
        }

        const json gen = j.value("generation", json::object());
        c.count = gen.value("count", std::size_t{0});
        c.generation.temperature = gen.value("temperature", 1.0);
        c.generation.top_p = gen.value("top_p", 1.0);
        c.generation.max_tokens = gen.value("max_tokens", 512);
        c.generation.retry_bound = gen.value("retry_bound", 5);
        c.generation.critic_enabled = gen.value("critic", true);
        if (gen.contains("question_bank")) c.question_bank = detail::resolve(base_dir, gen["question_bank"].get<std::string>());
        c.bank_prefix = gen.value("bank_prefix", 0);

        const json ann = j.value("annotation", json::object());
        c.annotation.n_samples = ann.value("n_samples", 40);
        c.annotation.temperature = ann.value("temperature", 1.0);
        c.annotation.top_p = ann.value("top_p", 1.0);
        c.annotation.max_tokens = ann.value("max_tokens", 32);

        const json match = j.value("matching", json::object());
        if (match.contains("roster")) c.roster = detail::resolve(base_dir, match["roster"].get<std::string>());

        const json survey = j.value("survey", json::object());
        if (survey.contains("studies")) {
            c.studies.clear();
            for (const auto& s : survey["studies"]) c.studies.push_back(surveys::parse_study(s.get<std::string>()));
        }
        c.method = surveys::parse_method(survey.value("method", std::string("backstory")));
        c.administer.mode = llm::parse_scoring_mode(survey.value("mode", std::string("token_scores")));
        c.administer.sampling_fallback = survey.value("sampling_fallback", true);
        c.administer.n_samples = survey.value("n_samples", 40);

        const json eval = j.value("evaluate", json::object());
        c.score_mode = metrics::parse_score_mode(eval.value("score_mode", std::string("sampled")));
        if (eval.contains("human_microdata"))
            c.human_microdata = detail::resolve(base_dir, eval["human_microdata"].get<std::string>());
        if (eval.contains("encodings")) {
            for (auto it = eval["encodings"].begin(); it != eval["encodings"].end(); ++it) {
                const Study s = surveys::parse_study(it.key());
                auto pos = it.value().get<std::vector<double>>();
                metrics::check_positions(pos);
                if (pos.size() != metrics::default_positions(s).size())
                    throw InvalidArgument("config: encoding for " + it.key() + " has the wrong number of positions", "config");
                c.encodings.positions[s] = std::move(pos);
            }
        }
    } catch (const json::exception& e) {
        throw InvalidArgument(std::string("config: ") + e.what(), "config");
    }
    return c;
}

inline PipelineConfig load_config(const fs::path& path, const EnvLookup& env = process_env) {
    json raw;
    try {
        raw = json::parse(io::read_file(path));
    } catch (const json::exception& e) {
        throw InvalidArgument("config " + path.string() + ": " + e.what(), "config");
    } catch (const Error& e) {
        throw InvalidArgument(std::string("config: ") + e.what(), "config");
    }
    return parse_config(raw, fs::absolute(path).parent_path(), env);
}

inline std::shared_ptr<llm::Backend> make_backend(const BackendSpec& spec, const EnvLookup& env = process_env) {
    if (spec.type == "stub") {
        json script;
        try {
            script = json::parse(io::read_file(spec.script));
        } catch (const json::exception& e) {
            throw InvalidArgument("stub script " + spec.script.string() + ": " + e.what(), "config");
        }
        return std::make_shared<llm::StubBackend>(llm::StubScript::from_json(script));
    }
    llm::HttpConfig h;
    h.url = spec.url;
    h.model = spec.model;
    h.timeout_seconds = spec.timeout_seconds;
    h.top_logprobs = spec.top_logprobs;
    if (!spec.api_key_env.empty()) {
        auto key = env(spec.api_key_env);
        if (!key) throw InvalidArgument("environment variable " + spec.api_key_env + " (API key) is not set", "config");
        h.api_key = *key;
    }
    return std::make_shared<llm::HttpBackend>(h);
}

// ---------------------------------------------------------------------------
// Manifest

struct ArtifactEntry {
    std::string path;  // relative to the storage root
    std::string sha256;
};

struct StageRecord {
    std::string completed_at;
    std::vector<ArtifactEntry> inputs;  // external files (roster, microdata)
    std::vector<ArtifactEntry> outputs;
    json summary = json::object();
};

inline std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

class RunManifest {
public:
    json config = json::object();
    std::map<std::string, StageRecord> stages;

    static fs::path path(const fs::path& root) { return root / "manifest.json"; }

    static RunManifest load(const fs::path& root) {
        RunManifest m;
        const auto p = path(root);
        if (!fs::exists(p)) return m;
        try {
            const json j = json::parse(io::read_file(p));
            m.config = j.value("config", json::object());
            for (auto it = j.at("stages").begin(); it != j.at("stages").end(); ++it) {
                StageRecord r;
                r.completed_at = it.value().at("completed_at").get<std::string>();
                for (const auto& a : it.value().at("inputs")) r.inputs.push_back({a.at("path"), a.at("sha256")});
                for (const auto& a : it.value().at("outputs")) r.outputs.push_back({a.at("path"), a.at("sha256")});
                r.summary = it.value().value("summary", json::object());
                m.stages[it.key()] = std::move(r);
            }
        } catch (const json::exception& e) {
            throw StageError("manifest", p, std::string("corrupt manifest: ") + e.what());
        }
        return m;
    }

    json to_json() const {
        json st = json::object();
        for (const auto& [name, r] : stages) {
            auto entries = [](const std::vector<ArtifactEntry>& v) {
                json a = json::array();
                for (const auto& e : v) a.push_back({{"path", e.path}, {"sha256", e.sha256}});
                return a;
            };
            st[name] = {{"completed_at", r.completed_at},
                        {"inputs", entries(r.inputs)},
                        {"outputs", entries(r.outputs)},
                        {"summary", r.summary}};
        }
        return {{"config", config}, {"stages", st}};
    }

    void save(const fs::path& root) const { io::write_file_atomic(path(root), to_json().dump(2) + "\n"); }

    /// Problems found re-hashing every recorded output; empty when valid.
    std::vector<std::string> validate(const fs::path& root) const {
        std::vector<std::string> problems;
        for (const auto& [name, r] : stages)
            for (const auto& a : r.outputs) {
                const auto p = root / a.path;
                if (!fs::exists(p)) problems.push_back("[" + name + "] " + p.string() + ": missing");
                else if (io::sha256_file(p) != a.sha256)
                    problems.push_back("[" + name + "] " + p.string() + ": content hash does not match the manifest");
            }
        return problems;
    }
};

// ---------------------------------------------------------------------------
// Pipeline

struct StageOutcome {
    std::string stage;
    std::vector<fs::path> outputs;
    std::size_t produced = 0;
    std::size_t failures = 0;
    json summary = json::object();
    bool ok() const { return failures == 0; }
};

struct SweepRow {
    std::string level;
    std::size_t backstories = 0;
    double mean_words = 0;
    std::vector<metrics::ReportRow> rows;  // model rows, empty without a roster
    std::string artifact_hash;             // backstories.jsonl
};

struct SweepReport {
    std::string axis;
    std::vector<SweepRow> levels;
    bool ok = true;
};

class Pipeline {
public:
    explicit Pipeline(PipelineConfig config, EnvLookup env = process_env)
        : config_(std::move(config)), env_(std::move(env)), root_(config_.storage_root) {}

    const PipelineConfig& config() const { return config_; }
    const fs::path& root() const { return root_; }
    fs::path artifact(const std::string& name) const { return root_ / name; }

    RunManifest manifest() const { return RunManifest::load(root_); }

    // -- generate ----------------------------------------------------------

    StageOutcome generate(std::optional<std::size_t> count_override = {}) {
        const std::string stage = "generate";
        const auto out_path = artifact("backstories.jsonl");
        const std::size_t count = count_override.value_or(config_.count);
        const auto bank = question_bank(stage);

        std::map<std::string, json> done;
        if (fs::exists(out_path)) {
            io::for_each_jsonl(
                out_path,
                [&](const json& j, std::size_t line) {
                    try {
                        const auto b = backstory::backstory_from_json(j);
                        if (b.turns.size() != bank.size() || b.critic_enabled != config_.generation.critic_enabled)
                            throw StageError(stage, out_path,
                                             "existing backstory " + b.id +
                                                 " was generated with a different question bank or critic setting");
                        done[b.id] = backstory::to_json(b);
                    } catch (const StageError&) {
                        throw;
                    } catch (const Error& e) {
                        spdlog::warn("{}:{}: dropped unreadable record ({})", out_path.string(), line, e.what());
                    }
                },
                [&](std::size_t line, const std::string& what) {
                    spdlog::warn("{}:{}: dropped partial record ({})", out_path.string(), line, what);
                });
        }
        const std::size_t resumed = done.size();

        std::vector<std::string> todo;
        for (std::size_t i = 0; i < count; ++i)
            if (!done.count(backstory::backstory_id(i))) todo.push_back(backstory::backstory_id(i));

        json failures = json::array();
        if (!todo.empty()) {
            auto& gen = client("generator");
            llm::Client* critic = config_.generation.critic_enabled ? &client("critic") : nullptr;
            std::mutex mu;
            io::JsonlAppender append(out_path);
            try {
                parallel_for(todo.size(), config_.workers, [&](std::size_t i) {
                    const auto& id = todo[i];
                    try {
                        auto b = backstory::generate_backstory(bank, config_.generation, gen, critic, id,
                                                               mix_seed(config_.seed, id));
                        json j = backstory::to_json(b);
                        std::lock_guard lock(mu);
                        append.append(j);
                        done[id] = std::move(j);
                    } catch (const backstory::RetryExhausted& e) {
                        std::lock_guard lock(mu);
                        spdlog::warn("backstory {} abandoned: {}", id, e.what());
                        failures.push_back({{"id", id}, {"error", e.what()}});
                    }
                });
            } catch (const Error& e) {
                throw StageError(stage, out_path,
                                 std::string(e.what()) + " (completed backstories are kept; rerun to resume)");
            }
        }
        std::sort(failures.begin(), failures.end(), [](const json& a, const json& b) { return a["id"] < b["id"]; });

        std::vector<json> records;
        double words = 0;
        std::size_t rejections = 0;
        for (const auto& [id, j] : done) {
            records.push_back(j);
            words += j["token_count"].get<double>();
            rejections += j["rejections"].size();
        }
        io::write_file_atomic(out_path, io::to_jsonl(records));

        StageOutcome o{stage, {out_path}, todo.size() - failures.size(), failures.size(), json::object()};
        o.summary = {{"requested", count},
                     {"resumed", resumed},
                     {"generated", o.produced},
                     {"total", records.size()},
                     {"mean_words", records.empty() ? 0.0 : words / static_cast<double>(records.size())},
                     {"rejections", rejections},
                     {"critic_enabled", config_.generation.critic_enabled},
                     {"questions", bank.size()},
                     {"failures", failures}};
        record(stage, {}, {"backstories.jsonl"}, o.summary);
        return o;
    }

    // -- annotate ----------------------------------------------------------

    StageOutcome annotate() {
        const std::string stage = "annotate";
        const auto stories = load_backstories(stage);
        auto& extractor = client("annotator");
        auto& sampler = client("sampler");

        std::vector<std::optional<demographics::PersonaProfile>> profiles(stories.size());
        std::vector<std::string> errors(stories.size());
        try {
            parallel_for(stories.size(), config_.workers, [&](std::size_t i) {
                try {
                    profiles[i] = demographics::annotate(stories[i], {extractor, sampler}, config_.annotation);
                } catch (const demographics::AnnotationError& e) {
                    errors[i] = e.what();
                } catch (const llm::BackendError& e) {
                    if (e.transient()) throw;
                    errors[i] = e.what();
                }
            });
        } catch (const Error& e) {
            throw StageError(stage, artifact("profiles.jsonl"), e.what());
        }

        std::vector<json> records, failed;
        for (std::size_t i = 0; i < stories.size(); ++i) {
            if (profiles[i]) {
                for (auto& r : demographics::to_json_records(*profiles[i])) records.push_back(std::move(r));
            } else {
                spdlog::warn("annotation of {} failed: {}", stories[i].id, errors[i]);
                failed.push_back({{"backstory_id", stories[i].id}, {"error", errors[i]}});
            }
        }
        io::write_file_atomic(artifact("profiles.jsonl"), io::to_jsonl(records));
        io::write_file_atomic(artifact("annotate_failures.jsonl"), io::to_jsonl(failed));
        StageOutcome o{stage, {artifact("profiles.jsonl"), artifact("annotate_failures.jsonl")},
                       stories.size() - failed.size(), failed.size(), json::object()};
        o.summary = {{"profiles", o.produced}, {"failures", failed.size()}};
        record(stage, {}, {"profiles.jsonl", "annotate_failures.jsonl"}, o.summary);
        return o;
    }

    /// Writes profiles for a subset of backstories from an existing profile
    /// store (used when a sweep level only subsamples the pool).
    StageOutcome annotate_from(const fs::path& parent_profiles, const std::set<std::string>& ids) {
        const std::string stage = "annotate";
        std::vector<json> records;
        for (const auto& r : io::read_jsonl(parent_profiles))
            if (ids.count(r.at("backstory_id").get<std::string>())) records.push_back(r);
        io::write_file_atomic(artifact("profiles.jsonl"), io::to_jsonl(records));
        io::write_file_atomic(artifact("annotate_failures.jsonl"), "");
        StageOutcome o{stage, {artifact("profiles.jsonl"), artifact("annotate_failures.jsonl")}, records.size() / 6, 0,
                       json::object()};
        o.summary = {{"profiles", o.produced}, {"failures", 0}, {"reused_from", parent_profiles.string()}};
        record(stage, {}, {"profiles.jsonl", "annotate_failures.jsonl"}, o.summary);
        return o;
    }

    // -- match -------------------------------------------------------------

    StageOutcome match() {
        const std::string stage = "match";
        const auto profiles_path = require("annotate", "profiles.jsonl", stage);
        const auto roster_path = roster(stage);
        const auto humans = load_humans(stage);
        const auto profiles = demographics::profiles_from_records(io::read_jsonl(profiles_path));
        if (profiles.size() < humans.size())
            throw StageError(stage, profiles_path,
                             std::to_string(humans.size()) + " human respondents but only " +
                                 std::to_string(profiles.size()) + " annotated personas; matching needs at least as many personas as humans");
        matching::CohortAssignment a;
        try {
            a = matching::assign_cohort(humans, profiles, config_.workers);
        } catch (const Error& e) {
            throw StageError(stage, profiles_path, e.what());
        }
        io::write_file_atomic(artifact("matches.csv"), matching::matches_csv(a, humans, profiles));

        json feas = json::array();
        for (const auto& f : a.feasibility)
            feas.push_back({{"party", party_name(f.party)},
                            {"humans", f.humans},
                            {"personas_with_support", f.personas_with_support},
                            {"feasible", f.feasible()}});
        StageOutcome o{stage, {artifact("matches.csv")}, a.pairs.size(), 0, json::object()};
        o.summary = {{"pairs", a.pairs.size()},
                     {"total_weight", a.total_weight},
                     {"min_weight", a.min_weight},
                     {"mean_weight", a.mean_weight},
                     {"feasibility", feas}};
        record(stage, {{roster_path.string(), io::sha256_file(roster_path)}}, {"matches.csv"}, o.summary);
        return o;
    }

    // -- survey ------------------------------------------------------------

    StageOutcome survey() {
        const std::string stage = "survey";
        const auto humans = load_humans(stage);
        std::vector<backstory::Backstory> stories;
        std::vector<surveys::CohortMember> cohort;

        if (surveys::needs_backstory(config_.method)) {
            const auto matches_path = require("match", "matches.csv", stage);
            check_roster_unchanged(stage);
            stories = load_backstories(stage);
            std::map<std::string, std::size_t> story_at, human_at;
            for (std::size_t i = 0; i < stories.size(); ++i) story_at[stories[i].id] = i;
            for (std::size_t i = 0; i < humans.size(); ++i) human_at[humans[i].id] = i;
            for (const auto& row : matching::load_matches(matches_path)) {
                if (!human_at.count(row.human_id))
                    throw StageError(stage, matches_path, "respondent " + row.human_id + " is not in the roster");
                if (!story_at.count(row.backstory_id))
                    throw StageError(stage, matches_path, "backstory " + row.backstory_id + " is not in the store");
                cohort.push_back({row.human_id, humans[human_at[row.human_id]], &stories[story_at[row.backstory_id]], {}});
            }
        } else {
            for (const auto& h : humans) cohort.push_back({h.id, h, nullptr, {}});
        }
        if (cohort.empty()) throw StageError(stage, artifact("matches.csv"), "survey cohort is empty");

        std::vector<std::string> outputs;
        if (config_.method == surveys::ConditioningMethod::generative_agent) {
            attach_reflections(cohort, stage);
            outputs.push_back("reflections.jsonl");
        }

        auto& respondent = client("survey");
        std::vector<json> failed;
        std::size_t produced = 0;
        json per_study = json::object();
        for (Study s : config_.studies) {
            const std::string name = "responses_" + std::string(surveys::study_name(s)) + ".jsonl";
            surveys::AdministerConfig cfg = config_.administer;
            cfg.seed = mix_seed(config_.seed, "survey:" + std::string(surveys::study_name(s)));
            surveys::StudyRun run;
            try {
                run = surveys::run_study(s, cohort, config_.method, respondent, cfg, config_.workers);
            } catch (const Error& e) {
                throw StageError(stage, artifact(name), e.what());
            }
            std::vector<json> records;
            for (const auto& c : run.cells) records.push_back(surveys::to_json(c, s, config_.method));
            for (const auto& f : run.failures)
                failed.push_back({{"study", surveys::study_name(s)},
                                  {"respondent_id", f.respondent_id},
                                  {"question_id", f.question_id},
                                  {"error", f.error}});
            io::write_file_atomic(artifact(name), io::to_jsonl(records));
            outputs.push_back(name);
            produced += run.cells.size();
            per_study[std::string(surveys::study_name(s))] = {{"cells", run.cells.size()}, {"failures", run.failures.size()}};
        }
        io::write_file_atomic(artifact("survey_failures.jsonl"), io::to_jsonl(failed));
        outputs.push_back("survey_failures.jsonl");

        StageOutcome o{stage, {}, produced, failed.size(), json::object()};
        for (const auto& n : outputs) o.outputs.push_back(artifact(n));
        o.summary = {{"method", surveys::method_name(config_.method)},
                     {"mode", llm::scoring_mode_name(config_.administer.mode)},
                     {"respondents", cohort.size()},
                     {"studies", per_study}};
        const auto roster_path = roster(stage);
        record(stage, {{roster_path.string(), io::sha256_file(roster_path)}}, outputs, o.summary);
        return o;
    }

    // -- evaluate ----------------------------------------------------------

    struct Evaluation {
        StageOutcome outcome;
        std::vector<metrics::ReportRow> rows;
        std::string text;
        std::string csv;
    };

    Evaluation evaluate() {
        const std::string stage = "evaluate";
        Evaluation ev;
        ev.outcome.stage = stage;
        const auto m = manifest();
        std::vector<ArtifactEntry> inputs;

        std::vector<metrics::ReportRow> model_rows;
        if (!m.stages.count("survey")) {
            spdlog::warn("no survey results in {}; the report holds the human reference rows only", root_.string());
        } else {
            const auto humans = load_humans(stage);
            std::map<std::string, Party> party_of;
            for (const auto& h : humans) party_of[h.id] = h.party();
            std::optional<std::vector<metrics::HumanAnswer>> micro;
            if (config_.human_microdata) {
                micro = metrics::load_human_microdata(*config_.human_microdata);
                inputs.push_back({config_.human_microdata->string(), io::sha256_file(*config_.human_microdata)});
            }
            const std::string source = std::string(surveys::method_name(config_.method));
            std::size_t cells_total = 0;
            for (Study s : surveys::all_studies) {
                const std::string name = "responses_" + std::string(surveys::study_name(s)) + ".jsonl";
                const auto& outs = m.stages.at("survey").outputs;
                if (std::none_of(outs.begin(), outs.end(), [&](const ArtifactEntry& a) { return a.path == name; }))
                    continue;
                const auto path = require("survey", name, stage);
                std::vector<surveys::ResponseDistribution> cells;
                for (const auto& j : io::read_jsonl(path)) cells.push_back(surveys::response_from_json(j));
                cells_total += cells.size();
                if (cells.empty()) continue;
                try {
                    const auto scores = metrics::score_study(s, cells, party_of, config_.encodings, config_.score_mode,
                                                             mix_seed(config_.seed, "evaluate"));
                    for (Party p : {Party::democrat, Party::republican}) {
                        auto gap = metrics::study_gap(scores, p);
                        if (micro) gap.wd = metrics::party_wd(s, p, cells, party_of, *micro, config_.encodings);
                        model_rows.push_back({source, gap, false});
                    }
                } catch (const Error& e) {
                    throw StageError(stage, path, e.what());
                }
            }
            if (cells_total == 0)
                throw StageError(stage, artifact("responses_*.jsonl"), "survey produced no model responses to evaluate");
        }

        for (Study s : surveys::all_studies) {
            for (auto& r : metrics::human_rows(s)) ev.rows.push_back(r);
            for (const auto& r : model_rows)
                if (r.gap.study == s) ev.rows.push_back(r);
        }
        ev.text = metrics::render_text(ev.rows);
        ev.csv = metrics::render_csv(ev.rows);
        io::write_file_atomic(artifact("report.txt"), ev.text);
        io::write_file_atomic(artifact("report.csv"), ev.csv);
        ev.outcome.outputs = {artifact("report.txt"), artifact("report.csv")};
        ev.outcome.produced = model_rows.size();
        ev.outcome.summary = {{"model_rows", model_rows.size()},
                              {"score_mode", metrics::score_mode_name(config_.score_mode)},
                              {"reference_only", model_rows.empty()}};
        record(stage, inputs, {"report.txt", "report.csv"}, ev.outcome.summary);
        return ev;
    }

    // -- ablation ----------------------------------------------------------

    SweepReport ablate(const std::string& axis, const std::vector<std::string>& levels,
                       std::optional<std::size_t> count_override = {}) {
        const std::string stage = "ablate";
        if (levels.empty()) throw InvalidArgument("ablation needs at least one level", stage);
        SweepReport report{axis, {}, true};
        const fs::path sweep_root = root_ / "ablate" / axis;

        for (const auto& level : levels) {
            PipelineConfig sub = config_;
            sub.storage_root = sweep_root / level;
            std::optional<std::set<std::string>> subsample;

            if (axis == "count") {
                std::size_t size = 0;
                try {
                    size = std::stoul(level);
                } catch (const std::exception&) {
                    throw InvalidArgument("count level '" + level + "' is not a number", stage);
                }
                if (size < 1) throw InvalidArgument("count level must be >= 1", stage);
                subsample = subsample_ids(size, level);
            } else if (axis == "length") {
                static const std::set<std::string> allowed = {"1", "2", "5", "10"};
                if (!allowed.count(level))
                    throw InvalidArgument("length level '" + level + "' must be one of 1, 2, 5, 10", stage);
                sub.bank_prefix = std::stoi(level);
            } else if (axis == "consistency") {
                if (level != "critic_on" && level != "critic_off")
                    throw InvalidArgument("consistency level '" + level + "' must be critic_on or critic_off", stage);
                sub.generation.critic_enabled = level == "critic_on";
            } else {
                throw InvalidArgument("unknown ablation axis '" + axis + "'", stage);
            }

            Pipeline p(sub, env_);
            fs::create_directories(p.root());
            bool ok = true;
            if (subsample) {
                p.write_subsample(load_backstories(stage), *subsample, level);
                const auto parent = manifest();
                if (parent.stages.count("annotate") && valid_output("annotate", "profiles.jsonl"))
                    p.annotate_from(artifact("profiles.jsonl"), *subsample);
                else
                    ok &= p.annotate().ok();
            } else {
                ok &= p.generate(count_override).ok();
                ok &= p.annotate().ok();
            }

            SweepRow row;
            row.level = level;
            const auto stories = p.load_backstories(stage);
            row.backstories = stories.size();
            for (const auto& b : stories) row.mean_words += static_cast<double>(b.token_count);
            if (!stories.empty()) row.mean_words /= static_cast<double>(stories.size());
            row.artifact_hash = io::sha256_file(p.artifact("backstories.jsonl"));

            if (config_.roster) {
                ok &= p.match().ok();
                ok &= p.survey().ok();
                auto ev = p.evaluate();
                for (auto& r : ev.rows)
                    if (!r.reference) {
                        r.source = level;
                        row.rows.push_back(r);
                    }
            } else {
                spdlog::warn("no roster configured; sweep level {} reports backstory statistics only", level);
            }
            report.ok &= ok;
            report.levels.push_back(std::move(row));
        }
        io::write_file_atomic(sweep_root / "sweep.txt", render_sweep(report));
        io::write_file_atomic(sweep_root / "sweep.csv", render_sweep_csv(report));
        return report;
    }

    static std::string render_sweep(const SweepReport& r) {
        std::vector<std::vector<std::string>> cells;
        cells.push_back({"level", "backstories", "mean_words", "study", "party", "delta", "cohens_d", "wd"});
        for (const auto& l : r.levels) {
            const std::vector<std::string> head = {l.level, std::to_string(l.backstories), io::format_fixed(l.mean_words, 1)};
            if (l.rows.empty()) {
                auto line = head;
                for (int i = 0; i < 5; ++i) line.push_back("---");
                cells.push_back(line);
            }
            for (const auto& m : l.rows) {
                auto line = head;
                line.push_back(std::string(surveys::study_name(m.gap.study)));
                line.push_back(metrics::party_label(m.gap.party));
                line.push_back(metrics::fmt_opt(m.gap.delta));
                line.push_back(metrics::fmt_opt(m.gap.cohens_d));
                line.push_back(metrics::fmt_opt(m.gap.wd));
                cells.push_back(line);
            }
        }
        std::vector<std::size_t> width(cells.front().size(), 0);
        for (const auto& line : cells)
            for (std::size_t i = 0; i < line.size(); ++i) width[i] = std::max(width[i], line[i].size());
        std::string out = "axis: " + r.axis + "\n";
        for (const auto& line : cells) {
            std::string s;
            for (std::size_t i = 0; i < line.size(); ++i) {
                if (i) s += "  ";
                s += line[i] + std::string(width[i] - line[i].size(), ' ');
            }
            while (!s.empty() && s.back() == ' ') s.pop_back();
            out += s + "\n";
        }
        return out;
    }

    static std::string render_sweep_csv(const SweepReport& r) {
        std::string out = "axis,level,backstories,mean_words,study,party,delta,cohens_d,wd\n";
        for (const auto& l : r.levels) {
            const std::string head = r.axis + "," + io::csv_field(l.level) + "," + std::to_string(l.backstories) + "," +
                                     io::format_fixed(l.mean_words, 3);
            if (l.rows.empty()) out += head + ",---,---,---,---,---\n";
            for (const auto& m : l.rows)
                out += head + "," + std::string(surveys::study_name(m.gap.study)) + "," + metrics::party_label(m.gap.party) +
                       "," + metrics::fmt_opt(m.gap.delta) + "," + metrics::fmt_opt(m.gap.cohens_d) + "," +
                       metrics::fmt_opt(m.gap.wd) + "\n";
        }
        return out;
    }

    // -- helpers shared with the CLI ------------------------------------------

    std::vector<backstory::Backstory> load_backstories(const std::string& stage) const {
        const auto path = require("generate", "backstories.jsonl", stage);
        std::vector<backstory::Backstory> out;
        try {
            for (const auto& j : io::read_jsonl(path)) out.push_back(backstory::backstory_from_json(j));
        } catch (const Error& e) {
            throw StageError(stage, path, e.what());
        }
        return out;
    }

    /// Path of a recorded upstream artifact after checking its hash.
    fs::path require(const std::string& producer, const std::string& name, const std::string& stage) const {
        const auto path = artifact(name);
        const auto m = manifest();
        auto it = m.stages.find(producer);
        if (it == m.stages.end())
            throw StageError(stage, path, "upstream stage '" + producer + "' has not completed; run it first");
        const auto& outs = it->second.outputs;
        auto e = std::find_if(outs.begin(), outs.end(), [&](const ArtifactEntry& a) { return a.path == name; });
        if (e == outs.end()) throw StageError(stage, path, "not recorded by the '" + producer + "' stage");
        if (!fs::exists(path)) throw StageError(stage, path, "artifact is missing");
        if (io::sha256_file(path) != e->sha256)
            throw StageError(stage, path, "artifact does not match its manifest hash (modified after '" + producer + "' wrote it)");
        return path;
    }

private:
    llm::Client& client(const std::string& role) {
        std::lock_guard lock(clients_mu_);
        auto it = clients_.find(role);
        if (it != clients_.end()) return *it->second;
        auto backend = make_backend(config_.backends.at(role), env_);
        auto c = std::make_unique<llm::Client>(backend, config_.retry, config_.max_in_flight);
        return *clients_.emplace(role, std::move(c)).first->second;
    }

    std::vector<backstory::InterviewQuestion> question_bank(const std::string& stage) const {
        std::vector<backstory::InterviewQuestion> bank;
        try {
            bank = backstory::load_question_bank(config_.question_bank);
        } catch (const Error& e) {
            throw StageError(stage, config_.question_bank.value_or("<default bank>"), e.what());
        }
        if (config_.bank_prefix > 0) {
            if (static_cast<std::size_t>(config_.bank_prefix) > bank.size())
                throw InvalidArgument("bank prefix exceeds the question bank", stage);
            bank.resize(static_cast<std::size_t>(config_.bank_prefix));
        }
        return bank;
    }

    fs::path roster(const std::string& stage) const {
        if (!config_.roster) throw StageError(stage, "<config>", "no roster configured (matching.roster)");
        if (!fs::exists(*config_.roster)) throw StageError(stage, *config_.roster, "roster file is missing");
        return *config_.roster;
    }

    std::vector<matching::HumanRespondent> load_humans(const std::string& stage) const {
        const auto path = roster(stage);
        try {
            return matching::load_roster(path);
        } catch (const Error& e) {
            throw StageError(stage, path, e.what());
        }
    }

    void check_roster_unchanged(const std::string& stage) const {
        const auto path = roster(stage);
        const auto m = manifest();
        const auto& in = m.stages.at("match").inputs;
        if (in.empty()) return;
        if (io::sha256_file(path) != in.front().sha256)
            throw StageError(stage, path, "roster changed since the match stage ran; rerun match");
    }

    bool valid_output(const std::string& producer, const std::string& name) const {
        try {
            require(producer, name, producer);
            return true;
        } catch (const StageError&) {
            return false;
        }
    }

    std::set<std::string> subsample_ids(std::size_t size, const std::string& level) const {
        auto stories = load_backstories("ablate");
        if (size > stories.size())
            throw InvalidArgument("count level " + level + " exceeds the pool of " + std::to_string(stories.size()) +
                                      " backstories",
                                  "ablate");
        std::vector<std::string> ids;
        for (const auto& b : stories) ids.push_back(b.id);
        Rng rng(mix_seed(config_.seed, "ablate:count:" + level));
        rng.shuffle(ids);
        return {ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(size)};
    }

    void write_subsample(const std::vector<backstory::Backstory>& pool, const std::set<std::string>& ids,
                         const std::string& level) {
        std::vector<json> records;
        double words = 0;
        for (const auto& b : pool)
            if (ids.count(b.id)) {
                records.push_back(backstory::to_json(b));
                words += static_cast<double>(b.token_count);
            }
        io::write_file_atomic(artifact("backstories.jsonl"), io::to_jsonl(records));
        record("generate", {}, {"backstories.jsonl"},
               {{"subsample_of", pool.size()},
                {"level", level},
                {"total", records.size()},
                {"mean_words", records.empty() ? 0.0 : words / static_cast<double>(records.size())}});
    }

    void attach_reflections(std::vector<surveys::CohortMember>& cohort, const std::string& stage) {
        const auto path = artifact("reflections.jsonl");
        std::map<std::string, std::vector<std::string>> cache;
        if (fs::exists(path))
            for (const auto& j : io::read_jsonl(path))
                cache[j.at("backstory_id").get<std::string>()] = j.at("reflections").get<std::vector<std::string>>();
        std::vector<const backstory::Backstory*> missing;
        std::set<std::string> seen;
        for (const auto& m : cohort)
            if (!cache.count(m.backstory->id) && seen.insert(m.backstory->id).second) missing.push_back(m.backstory);
        if (!missing.empty()) {
            auto& reflector = client("reflection");
            std::vector<std::vector<std::string>> found(missing.size());
            try {
                parallel_for(missing.size(), config_.workers,
                             [&](std::size_t i) { found[i] = surveys::expert_reflection(*missing[i], reflector); });
            } catch (const Error& e) {
                throw StageError(stage, path, e.what());
            }
            for (std::size_t i = 0; i < missing.size(); ++i) cache[missing[i]->id] = found[i];
        }
        std::vector<json> records;
        for (const auto& [id, r] : cache) records.push_back({{"backstory_id", id}, {"reflections", r}});
        io::write_file_atomic(path, io::to_jsonl(records));
        for (auto& m : cohort) m.reflections = cache.at(m.backstory->id);
    }

    /// Records a completed stage. Downstream records whose inputs changed
    /// are dropped so they cannot be mistaken for current results.
    void record(const std::string& stage, std::vector<ArtifactEntry> inputs, const std::vector<std::string>& outputs,
                const json& summary) {
        std::lock_guard lock(manifest_mu_);
        auto m = manifest();
        StageRecord r;
        r.completed_at = utc_timestamp();
        r.inputs = std::move(inputs);
        for (const auto& name : outputs) r.outputs.push_back({name, io::sha256_file(artifact(name))});
        r.summary = summary;

        bool changed = true;
        if (auto old = m.stages.find(stage); old != m.stages.end()) {
            changed = old->second.outputs.size() != r.outputs.size();
            for (std::size_t i = 0; !changed && i < r.outputs.size(); ++i)
                changed = old->second.outputs[i].path != r.outputs[i].path ||
                          old->second.outputs[i].sha256 != r.outputs[i].sha256;
        }
        if (changed) {
            const auto& order = stage_order();
            auto pos = std::find(order.begin(), order.end(), stage);
            if (pos != order.end())
                for (auto it = pos + 1; it != order.end(); ++it)
                    if (m.stages.erase(*it)) spdlog::info("{} outputs changed; dropped stale '{}' record", stage, *it);
        }
        m.config = config_.raw;
        m.stages[stage] = std::move(r);
        m.save(root_);
    }

    PipelineConfig config_;
    EnvLookup env_;
    fs::path root_;
    std::mutex clients_mu_;
    std::map<std::string, std::unique_ptr<llm::Client>> clients_;
    std::mutex manifest_mu_;
};

}  // namespace persona::pipeline
