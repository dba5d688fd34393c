#include <gtest/gtest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>

#include "persona/pipeline.hpp"

using namespace persona;
using namespace persona::pipeline;
namespace fs = std::filesystem;

namespace {

const fs::path data_dir = PERSONA_TEST_DATA;

struct Workspace {
    fs::path dir;
    explicit Workspace(const std::string& name) : dir(fs::temp_directory_path() / name) {
        fs::remove_all(dir);
        fs::create_directories(dir);
        for (const char* f : {"golden_config.json", "stub_script.json", "roster.csv", "human_microdata.csv"})
            fs::copy_file(data_dir / f, dir / f);
    }
    ~Workspace() { fs::remove_all(dir); }

    EnvLookup env() const {
        const auto run = (dir / "run").string();
        return [run](const std::string& k) -> std::optional<std::string> {
            if (k == "PERSONA_RUN_DIR") return run;
            return std::nullopt;
        };
    }
    PipelineConfig config(std::size_t workers = 1) const {
        auto c = load_config(dir / "golden_config.json", env());
        c.workers = workers;
        return c;
    }
};

void run_all(Pipeline& p) {
    ASSERT_TRUE(p.generate().ok());
    ASSERT_TRUE(p.annotate().ok());
    ASSERT_TRUE(p.match().ok());
    ASSERT_TRUE(p.survey().ok());
}

struct CliResult {
    int code;
    std::string out;
};

CliResult run_cli(const std::string& args, const fs::path& run_dir) {
    const std::string cmd = "PERSONA_RUN_DIR='" + run_dir.string() + "' '" + PERSONA_CLI + "' " + args + " 2>&1";
    CliResult r{0, {}};
    FILE* pipe = popen(cmd.c_str(), "r");
    char buf[4096];
    std::size_t got;
    while ((got = fread(buf, 1, sizeof buf, pipe)) > 0) r.out.append(buf, got);
    const int status = pclose(pipe);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

}  // namespace

TEST(Config, InterpolatesAndRejectsMissingVariables) {
    const json raw = {{"seed", 1}, {"storage_root", "${ROOT}/x"}, {"backends", {{"default", {{"type", "stub"}, {"script", "s.json"}}}}}};
    const auto c = parse_config(raw, "/base", [](const std::string& k) -> std::optional<std::string> {
        if (k == "ROOT") return "/tmp/r";
        return std::nullopt;
    });
    EXPECT_EQ(c.storage_root, fs::path("/tmp/r/x"));
    EXPECT_EQ(c.backends.at("critic").script, fs::path("/base/s.json"));
    try {
        parse_config(raw, "/base", [](const std::string&) { return std::nullopt; });
        FAIL();
    } catch (const InvalidArgument& e) {
        EXPECT_NE(std::string(e.what()).find("ROOT"), std::string::npos);
    }
}

TEST(Config, RejectsLiteralKeysAndBadFields) {
    const json http = {{"seed", 1},
                       {"backends", {{"default", {{"type", "http"}, {"url", "http://x"}, {"model", "m"}, {"api_key", "sk-1"}}}}}};
    EXPECT_THROW(parse_config(http, "/"), InvalidArgument);
    EXPECT_THROW(parse_config(json{{"backends", json::object()}}, "/"), InvalidArgument);
    const json no_default = {{"seed", 1}, {"backends", {{"generator", {{"script", "s.json"}}}}}};
    EXPECT_THROW(parse_config(no_default, "/"), InvalidArgument);
    const json workers = {{"seed", 1}, {"workers", 0}, {"backends", {{"default", {{"script", "s.json"}}}}}};
    EXPECT_THROW(parse_config(workers, "/"), InvalidArgument);
}

TEST(Golden, ReportIsByteIdenticalAcrossWorkerCounts) {
    const auto golden = io::read_file(data_dir / "golden_report.txt");
    for (std::size_t w : {1u, 4u}) {
        Workspace ws("persona_golden_" + std::to_string(w));
        Pipeline p(ws.config(w), ws.env());
        run_all(p);
        const auto ev = p.evaluate();
        EXPECT_EQ(ev.text, golden) << "workers=" << w;
        EXPECT_TRUE(p.manifest().validate(p.root()).empty());
    }
}

TEST(Golden, CliRunMatches) {
    Workspace ws("persona_golden_cli");
    const std::string cfg = "-c '" + (ws.dir / "golden_config.json").string() + "' ";
    for (const char* stage : {"generate", "annotate", "match", "survey"}) {
        const auto r = run_cli(cfg + stage, ws.dir / "run");
        ASSERT_EQ(r.code, 0) << stage << ": " << r.out;
    }
    const auto r = run_cli(cfg + "evaluate --log-level off", ws.dir / "run");
    ASSERT_EQ(r.code, 0) << r.out;
    EXPECT_EQ(r.out, io::read_file(data_dir / "golden_report.txt"));
    const auto rep = run_cli(cfg + "report --log-level off", ws.dir / "run");
    EXPECT_EQ(rep.code, 0);
    EXPECT_EQ(rep.out, r.out);
}

TEST(Resume, GeneratesOnlyMissingBackstories) {
    Workspace ws("persona_resume");
    Pipeline p(ws.config(), ws.env());
    EXPECT_EQ(p.generate(3).produced, 3u);
    const auto again = p.generate();
    EXPECT_EQ(again.produced, 1u);
    EXPECT_EQ(again.summary["resumed"], 3);
    EXPECT_EQ(again.summary["total"], 4);
    EXPECT_EQ(p.generate().produced, 0u);
    EXPECT_EQ(p.generate(0).produced, 0u);

    Workspace fresh("persona_resume_fresh");
    Pipeline q(fresh.config(), fresh.env());
    q.generate();
    EXPECT_EQ(io::read_file(p.artifact("backstories.jsonl")), io::read_file(q.artifact("backstories.jsonl")));
}

TEST(Resume, PartialTrailingLineIsDropped) {
    Workspace ws("persona_resume_partial");
    Pipeline p(ws.config(), ws.env());
    p.generate(2);
    {
        std::ofstream f(p.artifact("backstories.jsonl"), std::ios::app);
        f << "{\"id\": \"b00002\", \"tur";
    }
    EXPECT_EQ(p.generate().produced, 2u);
    EXPECT_EQ(io::read_jsonl(p.artifact("backstories.jsonl")).size(), 4u);
}

TEST(Manifest, TamperedArtifactIsRejected) {
    Workspace ws("persona_tamper");
    Pipeline p(ws.config(), ws.env());
    p.generate();
    p.annotate();
    {
        std::ofstream f(p.artifact("profiles.jsonl"), std::ios::app);
        f << "\n";
    }
    EXPECT_FALSE(p.manifest().validate(p.root()).empty());
    try {
        p.match();
        FAIL();
    } catch (const StageError& e) {
        EXPECT_EQ(e.stage(), "match");
        EXPECT_NE(std::string(e.what()).find("profiles.jsonl"), std::string::npos);
    }
}

TEST(Stages, MissingUpstreamNamesStage) {
    Workspace ws("persona_upstream");
    Pipeline p(ws.config(), ws.env());
    try {
        p.annotate();
        FAIL();
    } catch (const StageError& e) {
        EXPECT_EQ(e.stage(), "annotate");
        EXPECT_NE(std::string(e.what()).find("backstories.jsonl"), std::string::npos);
    }
}

TEST(Stages, TooFewPersonasFailsAtMatch) {
    Workspace ws("persona_few");
    Pipeline p(ws.config(), ws.env());
    p.generate(1);
    p.annotate();
    try {
        p.match();
        FAIL();
    } catch (const StageError& e) {
        EXPECT_EQ(e.stage(), "match");
        EXPECT_NE(std::string(e.what()).find("profiles.jsonl"), std::string::npos);
    }
    const auto r = run_cli("-c '" + (ws.dir / "golden_config.json").string() + "' match", ws.dir / "run");
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.out.find("error: [match]"), std::string::npos);
}

TEST(Evaluate, ReferenceOnlyWithoutSurvey) {
    Workspace ws("persona_refonly");
    Pipeline p(ws.config(), ws.env());
    const auto ev = p.evaluate();
    EXPECT_EQ(ev.outcome.produced, 0u);
    EXPECT_EQ(ev.rows.size(), 6u);
    for (const auto& r : ev.rows) EXPECT_TRUE(r.reference);
}

TEST(Ablate, LengthAndConsistency) {
    Workspace ws("persona_ablate");
    Pipeline p(ws.config(), ws.env());
    const auto len = p.ablate("length", {"1", "10"}, 2);
    ASSERT_EQ(len.levels.size(), 2u);
    EXPECT_LT(len.levels[0].mean_words, len.levels[1].mean_words);
    EXPECT_FALSE(len.levels[0].rows.empty());
    const auto con = p.ablate("consistency", {"critic_on", "critic_off"}, 2);
    ASSERT_EQ(con.levels.size(), 2u);
    EXPECT_NE(con.levels[0].artifact_hash, con.levels[1].artifact_hash);
    EXPECT_TRUE(fs::exists(p.root() / "ablate" / "length" / "sweep.csv"));
    EXPECT_THROW(p.ablate("length", {"3"}), InvalidArgument);
    EXPECT_THROW(p.ablate("volume", {"1"}), InvalidArgument);
}

TEST(Cli, UsageAndNgram) {
    const fs::path dir = fs::temp_directory_path();
    EXPECT_EQ(run_cli("--bogus", dir).code, 1);
    EXPECT_EQ(run_cli("--help", dir).code, 0);
    const auto r = run_cli("ngram --corpus '" + (data_dir / "ngram_backstories.txt").string() + "' --n 2 --k 3", dir);
    EXPECT_EQ(r.code, 0) << r.out;
    EXPECT_FALSE(r.out.empty());
    const auto missing = run_cli("ngram --corpus /nonexistent/x.txt", dir);
    EXPECT_EQ(missing.code, 1);
    EXPECT_NE(missing.out.find("error: [ngram]"), std::string::npos);
}
