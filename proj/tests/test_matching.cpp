#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "oracles.hpp"
#include "persona/matching.hpp"

using namespace persona;
using namespace persona::matching;
using demographics::TraitDistribution;
namespace fs = std::filesystem;

namespace {

WeightMatrix to_matrix(const std::vector<std::vector<double>>& w) {
    WeightMatrix m(w.size(), w.empty() ? 0 : w[0].size());
    for (std::size_t i = 0; i < m.rows; ++i)
        for (std::size_t j = 0; j < m.cols; ++j) m(i, j) = w[i][j];
    return m;
}

// Dyadic weights k/64 keep every sum exact, so totals compare with ==.
std::vector<std::vector<double>> random_dyadic(Rng& rng, std::size_t n, std::size_t m) {
    std::vector<std::vector<double>> w(n, std::vector<double>(m));
    for (auto& row : w)
        for (auto& x : row) x = static_cast<double>(rng.below(65)) / 64.0;
    return w;
}

PersonaProfile random_profile(Rng& rng, const std::string& id) {
    PersonaProfile p;
    p.backstory_id = id;
    for (auto k : demographics::all_traits) {
        TraitDistribution d;
        d.trait = k;
        const auto letters = demographics::option_set(k).substantive_letters();
        std::vector<double> raw;
        double sum = 0;
        for (std::size_t i = 0; i < letters.size(); ++i) {
            raw.push_back(rng.uniform());
            sum += raw.back();
        }
        for (std::size_t i = 0; i < letters.size(); ++i) d.probabilities[letters[i]] = raw[i] / sum;
        p.distributions[demographics::trait_index(k)] = d;
    }
    return p;
}

HumanRespondent random_human(Rng& rng, const std::string& id) {
    HumanRespondent h;
    h.id = id;
    for (auto k : demographics::all_traits) {
        const auto& opts = demographics::option_set(k).options;
        h.traits[demographics::trait_index(k)] = opts[rng.below(opts.size())].letter;
    }
    return h;
}

}  // namespace

TEST(Hungarian, TwoByTwo) {
    const auto r = hungarian_match(to_matrix({{0.9, 0.1}, {0.2, 0.8}}));
    EXPECT_EQ(r.assignment, (std::vector<std::size_t>{0, 1}));
    EXPECT_DOUBLE_EQ(r.total_weight, 1.7);
}

TEST(Hungarian, RectangularThreeByFiveAgainstEnumeration) {
    Rng rng(2024);
    for (int trial = 0; trial < 50; ++trial) {
        const auto w = random_dyadic(rng, 3, 5);
        std::vector<std::size_t> best;
        const double oracle_total = oracle::brute_force_assignment(w, &best);
        const auto r = hungarian_match(to_matrix(w));
        EXPECT_EQ(r.total_weight, oracle_total);
        EXPECT_EQ(r.assignment, best);  // first optimum in lexicographic order
    }
}

TEST(Hungarian, BeatsGreedyOnCrossingWeights) {
    const std::vector<std::vector<double>> w{{0.9, 0.8, 0.0}, {0.8, 0.0, 0.0}, {0.0, 0.0, 0.1}};
    EXPECT_DOUBLE_EQ(oracle::greedy_assignment(w), 1.0);
    EXPECT_DOUBLE_EQ(oracle::brute_force_assignment(w), 1.7);
    const auto r = hungarian_match(to_matrix(w));
    EXPECT_DOUBLE_EQ(r.total_weight, 1.7);
    EXPECT_EQ(r.assignment, (std::vector<std::size_t>{1, 0, 2}));
}

TEST(Hungarian, TiesBreakLexicographically) {
    const auto r = hungarian_match(to_matrix({{0.5, 0.5, 0.5}, {0.5, 0.5, 0.5}}));
    EXPECT_EQ(r.assignment, (std::vector<std::size_t>{0, 1}));
    const auto z = hungarian_match(to_matrix({{0, 0, 0, 0}, {0, 0, 0, 0}, {0, 0, 0, 0}}));
    EXPECT_EQ(z.assignment, (std::vector<std::size_t>{0, 1, 2}));
}

TEST(Hungarian, Errors) {
    EXPECT_THROW(hungarian_match(to_matrix({{1.0}, {1.0}})), MatchingError);
    EXPECT_THROW(hungarian_match(to_matrix({{-1.0, 0.0}})), MatchingError);
    EXPECT_TRUE(hungarian_match(WeightMatrix(0, 3)).assignment.empty());
}

TEST(Hungarian, RandomSizesAgainstEnumeration) {
    Rng rng(7);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 1 + rng.below(6);
        const std::size_t m = n + rng.below(3);
        const auto w = random_dyadic(rng, n, m);
        EXPECT_EQ(hungarian_match(to_matrix(w)).total_weight, oracle::brute_force_assignment(w));
    }
}

TEST(WeightMatrixBuild, EntriesAreIndependentProducts) {
    Rng rng(99);
    std::vector<HumanRespondent> humans;
    std::vector<PersonaProfile> profiles;
    for (int i = 0; i < 4; ++i) humans.push_back(random_human(rng, "h" + std::to_string(i)));
    for (int j = 0; j < 6; ++j) profiles.push_back(random_profile(rng, "b" + std::to_string(j)));
    const auto m = build_weight_matrix(humans, profiles, 3);
    for (std::size_t i = 0; i < humans.size(); ++i) {
        for (std::size_t j = 0; j < profiles.size(); ++j) {
            double expect = 1.0;
            for (auto k : demographics::all_traits) {
                const char letter = humans[i].trait(k);
                if (demographics::option_set(k).is_refusal(letter)) continue;
                expect *= profiles[j].at(k).probabilities.count(letter) ? profiles[j].at(k).probabilities.at(letter) : 0.0;
            }
            EXPECT_DOUBLE_EQ(m(i, j), expect);
            EXPECT_GE(m(i, j), 0.0);
            EXPECT_LE(m(i, j), 1.0);
        }
    }
}

TEST(Cohort, AssignmentIsInjectiveAndMatchesOracle) {
    Rng rng(5);
    std::vector<HumanRespondent> humans;
    std::vector<PersonaProfile> profiles;
    for (int i = 0; i < 5; ++i) humans.push_back(random_human(rng, "h" + std::to_string(i)));
    for (int j = 0; j < 7; ++j) profiles.push_back(random_profile(rng, "b" + std::to_string(j)));
    const auto a = assign_cohort(humans, profiles, 2);
    std::set<std::size_t> used;
    for (const auto& p : a.pairs) used.insert(p.profile_index);
    EXPECT_EQ(used.size(), humans.size());

    const auto m = build_weight_matrix(humans, profiles);
    std::vector<std::vector<double>> w(humans.size(), std::vector<double>(profiles.size()));
    for (std::size_t i = 0; i < humans.size(); ++i)
        for (std::size_t j = 0; j < profiles.size(); ++j) w[i][j] = m(i, j);
    EXPECT_NEAR(a.total_weight, oracle::brute_force_assignment(w), 1e-15);
}

TEST(Cohort, TooFewPersonas) {
    Rng rng(1);
    std::vector<HumanRespondent> humans{random_human(rng, "h0"), random_human(rng, "h1")};
    std::vector<PersonaProfile> profiles{random_profile(rng, "b0")};
    try {
        assign_cohort(humans, profiles);
        FAIL();
    } catch (const MatchingError& e) {
        EXPECT_EQ(e.stage(), "match");
    }
}

TEST(Cohort, RefusalContributesOne) {
    Rng rng(3);
    auto h = random_human(rng, "h");
    for (auto k : demographics::all_traits)
        h.traits[demographics::trait_index(k)] = demographics::option_set(k).refusal_letters.front();
    EXPECT_EQ(edge_weight(h, random_profile(rng, "b")), 1.0);
}

TEST(Roster, LoadsLabelsAndLettersAndRejectsBadValues) {
    const fs::path dir = fs::temp_directory_path() / "persona_test_matching";
    fs::create_directories(dir);
    io::write_file_atomic(dir / "r.csv",
                          "id,age,gender,education,income,race_ethnicity,party\n"
                          "h1,45-54,Female,Bachelor's degree,\"$60,000 to $69,999\",White or European,Democrat\n"
                          "h2,E,B,E,F,C,B\n");
    const auto r = load_roster(dir / "r.csv");
    ASSERT_EQ(r.size(), 2u);
    EXPECT_EQ(r[0].trait(demographics::TraitKind::income), 'G');
    EXPECT_EQ(r[0].party(), Party::democrat);
    EXPECT_EQ(r[1].party(), Party::republican);
    io::write_file_atomic(dir / "bad.csv", "id,age,gender,education,income,race_ethnicity,party\nh1,old,B,E,F,C,B\n");
    EXPECT_THROW(load_roster(dir / "bad.csv"), MatchingError);
    fs::remove_all(dir);
}

TEST(Matches, CsvRoundTrip) {
    Rng rng(8);
    std::vector<HumanRespondent> humans{random_human(rng, "h0"), random_human(rng, "h1")};
    std::vector<PersonaProfile> profiles{random_profile(rng, "b0"), random_profile(rng, "b1"), random_profile(rng, "b2")};
    const auto a = assign_cohort(humans, profiles);
    const fs::path p = fs::temp_directory_path() / "persona_matches.csv";
    io::write_file_atomic(p, matches_csv(a, humans, profiles));
    const auto rows = load_matches(p);
    ASSERT_EQ(rows.size(), 2u);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        EXPECT_EQ(rows[i].human_id, humans[i].id);
        EXPECT_EQ(rows[i].backstory_id, profiles[a.pairs[i].profile_index].backstory_id);
        EXPECT_EQ(rows[i].weight, a.pairs[i].weight);
    }
    fs::remove(p);
}
