#include <gtest/gtest.h>

#include <set>

#include "persona/surveys.hpp"

using namespace persona;
using namespace persona::surveys;
using llm::Client;
using llm::CompletionRequest;
using llm::CompletionResponse;
using llm::StubBackend;

namespace {

matching::HumanRespondent human(const std::string& id, char party, char gender = 'B') {
    matching::HumanRespondent h;
    h.id = id;
    h.traits = {'D', gender, 'E', 'G', 'G', party};
    return h;
}

std::vector<std::string> labels(const SurveyQuestion& q) {
    std::vector<std::string> out;
    for (const auto& o : q.options) out.push_back(o.label);
    return out;
}

backstory::Backstory tiny_backstory(const std::string& id, const std::string& answer) {
    backstory::Backstory b;
    b.id = id;
    b.seed = 17;
    b.turns.push_back({backstory::default_question_bank()[5], answer, 1});
    return b;
}

}  // namespace

TEST(Banks, SizesAndOptionCounts) {
    EXPECT_EQ(load_study(Study::atp_w110).size(), 10u);
    EXPECT_EQ(load_study(Study::subversion).size(), 24u);
    EXPECT_EQ(load_study(Study::meta_prejudice).size(), 6u);
    for (const auto& q : load_study(Study::atp_w110)) EXPECT_EQ(q.options.size(), 5u);
    for (const auto& q : load_study(Study::subversion))
        EXPECT_EQ(labels(q), (std::vector<std::string>{"Never", "Probably Not", "Probably", "Definitely"}));
    for (const auto& q : load_study(Study::meta_prejudice))
        EXPECT_EQ(labels(q), (std::vector<std::string>{"Very cold", "Cold", "Neutral", "Warm", "Very warm"}));
}

TEST(Banks, VerbatimAtpItems) {
    const auto& atp = load_study(Study::atp_w110);
    EXPECT_EQ(atp[0].text, "Compared to other Americans, would you say Democrats are...");
    EXPECT_EQ(atp[5].text, "Compared to other Americans, would you say Republicans are...");
    EXPECT_EQ(labels(atp[0]), (std::vector<std::string>{"A lot more moral", "Somewhat more moral", "About the same",
                                                        "Somewhat more immoral", "A lot more immoral"}));
    EXPECT_EQ(labels(atp[1]), (std::vector<std::string>{"A lot more hard-working", "Somewhat more hard-working",
                                                        "About the same", "Somewhat more lazy", "A lot more lazy"}));
    EXPECT_EQ(labels(atp[4]), (std::vector<std::string>{"A lot more honest", "Somewhat more honest", "About the same",
                                                        "Somewhat more dishonest", "A lot more dishonest"}));
    for (const auto& q : atp) EXPECT_EQ(q.asked_to, AskedTo::all);
}

TEST(Banks, VerbatimSubversionAndMetaItems) {
    EXPECT_EQ(find_question(Study::subversion, "sub_rep_self_violence").text,
              "Would YOU support using violence to block major DEMOCRAT laws?");
    EXPECT_EQ(find_question(Study::subversion, "sub_rep_self_election_laws").text,
              "Would YOU support laws that would make it easier for REPUBLICANS (and harder for DEMOCRATS) to get "
              "elected?");
    EXPECT_EQ(find_question(Study::subversion, "sub_dem_self_violence").text,
              "Would YOU support using violence to block major REPUBLICAN laws?");
    EXPECT_EQ(find_question(Study::meta_prejudice, "meta_feel_dem").text, "How warm or cold do you feel towards DEMOCRATS?");
    EXPECT_EQ(find_question(Study::meta_prejudice, "meta_feel_rep").text,
              "How warm or cold do you feel towards REPUBLICANS?");
    EXPECT_THROW(find_question(Study::meta_prejudice, "nope"), InvalidArgument);
}

TEST(Banks, ChecksumsPinned) {
    for (auto s : all_studies) EXPECT_EQ(study_checksum(s), pinned_checksum(s)) << study_name(s);
    EXPECT_NO_THROW(verify_study_banks());
}

TEST(Banks, UniqueIds) {
    for (auto s : all_studies) {
        std::set<std::string> ids;
        for (const auto& q : load_study(s)) ids.insert(q.id);
        EXPECT_EQ(ids.size(), load_study(s).size());
    }
}

TEST(Banks, RenderQuestion) {
    const auto& q = load_study(Study::meta_prejudice)[0];
    EXPECT_EQ(render_question(q), "Question: How warm or cold do you feel towards DEMOCRATS?\n(A) Very cold\n(B) Cold\n"
                                  "(C) Neutral\n(D) Warm\n(E) Very warm\nAnswer:");
}

TEST(Conditioning, QaBioPortray) {
    const auto h = human("h1", 'B', 'B');
    const auto qa = render_condition(ConditioningMethod::qa, {&h});
    EXPECT_NE(qa.find("A: Republican"), std::string::npos);
    EXPECT_NE(qa.find("Q: What is your gender?\nA: Female"), std::string::npos);
    EXPECT_NE(render_condition(ConditioningMethod::bio, {&h}).find("I am a Republican."), std::string::npos);
    EXPECT_NE(render_condition(ConditioningMethod::portray, {&h}).find("You are a Republican."), std::string::npos);
    EXPECT_THROW(render_condition(ConditioningMethod::backstory, {&h}), InvalidArgument);
}

TEST(Conditioning, RefusalTraitsOmitted) {
    auto h = human("h1", 'E');
    const auto qa = render_qa(h);
    EXPECT_EQ(qa.find("political affiliation"), std::string::npos);
}

TEST(Reflections, TruncatedToTwenty) {
    std::string reply;
    for (int i = 1; i <= 25; ++i) reply += std::to_string(i) + ". Observation " + std::to_string(i) + "\n";
    const auto r = parse_reflections(reply);
    ASSERT_EQ(r.size(), 20u);
    EXPECT_EQ(r.front(), "Observation 1");
    EXPECT_EQ(r.back(), "Observation 20");
}

TEST(Reflections, ProseSplitOnLines) {
    const auto r = parse_reflections("They distrust both parties.\n\n  - Leans fiscally conservative.\n* Votes rarely.\n");
    EXPECT_EQ(r, (std::vector<std::string>{"They distrust both parties.", "Leans fiscally conservative.", "Votes rarely."}));
}

TEST(Reflections, StubbedCall) {
    Client c(StubBackend::constant("1. a\n2. b\n3. c\n4. d\n5. e\n6. f"));
    EXPECT_EQ(expert_reflection(tiny_backstory("b1", "x"), c).size(), 6u);
}

TEST(Administer, SampledSevenThree) {
    const auto& q = load_study(Study::atp_w110)[0];
    AdministerConfig cfg;
    cfg.mode = llm::ScoringMode::sampled;
    cfg.n_samples = 10;
    cfg.seed = 1000;
    auto stub = std::make_shared<StubBackend>([](const CompletionRequest& r) {
        return CompletionResponse{(*r.seed - 1000) < 7 ? "(C)" : "(B)", std::nullopt};
    });
    Client c(stub);
    const auto d = administer(q, "I am a person.", c, cfg);
    EXPECT_DOUBLE_EQ(d.probabilities.at('B'), 0.3);
    EXPECT_DOUBLE_EQ(d.probabilities.at('C'), 0.7);
    EXPECT_EQ(d.probabilities.at('A'), 0.0);
    EXPECT_EQ(d.n_samples, 10);
}

TEST(Administer, TokenScores) {
    const auto& q = load_study(Study::subversion)[0];
    auto stub = std::make_shared<StubBackend>([](const CompletionRequest& r) {
        CompletionResponse resp{"", std::nullopt};
        resp.token_scores = std::map<std::string, double>{{"A", 0.3}, {"B", 0.1}, {"Z", 0.5}};
        (void)r;
        return resp;
    });
    Client c(stub);
    const auto d = administer(q, "ctx", c, {});
    EXPECT_NEAR(d.probabilities.at('A'), 0.75, 1e-12);
    EXPECT_NEAR(d.probabilities.at('B'), 0.25, 1e-12);
    EXPECT_EQ(d.mode, llm::ScoringMode::token_scores);
    EXPECT_THROW(administer(q, "  ", c, {}), InvalidArgument);
}

TEST(GenerativeAgent, JsonResponseIsOneHot) {
    const auto& q = load_study(Study::meta_prejudice)[0];
    Client c(StubBackend::constant(R"(Sure. {"1": {"Q": "...", "Reasoning": "...", "Response": "(B) Cold"}})"));
    const auto d = administer_generative_agent(q, tiny_backstory("b1", "x"), {"obs"}, c, 3);
    EXPECT_EQ(d.probabilities.at('B'), 1.0);
    double total = 0;
    for (const auto& [k, p] : d.probabilities) total += p;
    EXPECT_EQ(total, 1.0);

    Client bad(StubBackend::constant("I refuse"));
    EXPECT_THROW(administer_generative_agent(q, tiny_backstory("b1", "x"), {}, bad, 3), CellFailure);
}

TEST(GenerativeAgent, PromptCarriesReflectionsAndQuestion) {
    const auto& q = load_study(Study::meta_prejudice)[1];
    const auto p = generative_agent_prompt("TRANSCRIPT", {"first", "second"}, q);
    EXPECT_NE(p.find("1. first\n2. second\n"), std::string::npos);
    EXPECT_NE(p.find("1. How warm or cold do you feel towards REPUBLICANS?\n(A) Very cold"), std::string::npos);
    EXPECT_NE(p.find("\"Response\": \"<your prediction"), std::string::npos);
}

TEST(RunStudy, AskedToRouting) {
    const auto dem = human("h1", 'A'), rep = human("h2", 'B');
    std::vector<CohortMember> cohort{{"h1", dem, nullptr, {}}, {"h2", rep, nullptr, {}}};
    Client c(StubBackend::constant("(A)"));
    AdministerConfig cfg;
    cfg.mode = llm::ScoringMode::sampled;
    cfg.n_samples = 2;
    auto count = [](const StudyRun& r, const std::string& id) {
        return std::count_if(r.cells.begin(), r.cells.end(), [&](const auto& x) { return x.respondent_id == id; });
    };
    const auto meta = run_study(Study::meta_prejudice, cohort, ConditioningMethod::bio, c, cfg);
    EXPECT_EQ(count(meta, "h1"), 4);
    EXPECT_EQ(count(meta, "h2"), 4);
    const auto atp = run_study(Study::atp_w110, cohort, ConditioningMethod::qa, c, cfg);
    EXPECT_EQ(count(atp, "h1"), 10);
    EXPECT_EQ(count(atp, "h2"), 10);
    const auto sub = run_study(Study::subversion, cohort, ConditioningMethod::portray, c, cfg);
    EXPECT_EQ(count(sub, "h2"), 12);
    for (const auto& cell : sub.cells) {
        if (cell.respondent_id == "h2") {
            EXPECT_EQ(cell.question_id.rfind("sub_rep_", 0), 0u);
        }
    }
}

TEST(RunStudy, IndependentsGetSharedItemsOnly) {
    std::vector<CohortMember> cohort{{"h1", human("h1", 'C'), nullptr, {}}};
    Client c(StubBackend::constant("(C)"));
    AdministerConfig cfg;
    cfg.mode = llm::ScoringMode::sampled;
    cfg.n_samples = 1;
    EXPECT_EQ(run_study(Study::meta_prejudice, cohort, ConditioningMethod::qa, c, cfg).cells.size(), 2u);
    EXPECT_TRUE(run_study(Study::subversion, cohort, ConditioningMethod::qa, c, cfg).cells.empty());
}

TEST(RunStudy, DeterministicAcrossWorkers) {
    const auto b1 = tiny_backstory("b1", "I am a lifelong Democrat."), b2 = tiny_backstory("b2", "Proud Republican.");
    std::vector<CohortMember> cohort{{"h1", human("h1", 'A'), &b1, {}}, {"h2", human("h2", 'B'), &b2, {}}};
    auto stub = std::make_shared<StubBackend>([](const CompletionRequest& r) {
        static const char* replies[] = {"(A)", "(B)", "(C)", "(D)", "junk"};
        return CompletionResponse{replies[*r.seed % 5], std::nullopt};
    });
    Client c(stub, {}, 4);
    AdministerConfig cfg;
    cfg.mode = llm::ScoringMode::sampled;
    cfg.n_samples = 8;
    cfg.seed = 55;
    const auto one = run_study(Study::subversion, cohort, ConditioningMethod::backstory, c, cfg, 1);
    const auto four = run_study(Study::subversion, cohort, ConditioningMethod::backstory, c, cfg, 4);
    EXPECT_EQ(one.cells, four.cells);
    EXPECT_EQ(one.cells.size(), 24u);
}

TEST(RunStudy, FailedCellsRecorded) {
    const auto b1 = tiny_backstory("b1", "x");
    std::vector<CohortMember> cohort{{"h1", human("h1", 'A'), &b1, {"r"}}};
    Client c(StubBackend::constant("no json here"));
    const auto run = run_study(Study::meta_prejudice, cohort, ConditioningMethod::generative_agent, c, {});
    EXPECT_TRUE(run.cells.empty());
    EXPECT_EQ(run.failures.size(), 4u);
}

TEST(Json, ResponseRoundTrip) {
    ResponseDistribution r{"h1", "meta_feel_dem", {{'A', 0.25}, {'B', 0.75}}, llm::ScoringMode::sampled, 4};
    EXPECT_EQ(response_from_json(to_json(r, Study::meta_prejudice, ConditioningMethod::qa)), r);
}
