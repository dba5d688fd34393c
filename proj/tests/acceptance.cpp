#include <chrono>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <sstream>

#include "oracles.hpp"
#include "persona/ngram.hpp"
#include "persona/pipeline.hpp"

using namespace persona;
namespace fs = std::filesystem;

namespace {

const fs::path data_dir = PERSONA_TEST_DATA;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Check {
    bool ok = true;
    std::string why;
    void expect(bool cond, const std::string& what) {
        if (!cond && ok) why = what;
        ok = ok && cond;
    }
};

int failures = 0;

void report(int n, const Check& c, const std::string& detail) {
    if (!c.ok) ++failures;
    std::cout << (c.ok ? "PASS" : "FAIL") << " criterion " << n << ": " << detail;
    if (!c.ok) std::cout << " [" << c.why << "]";
    std::cout << std::endl;
}

template <class F>
void run(int n, F&& body) {
    Check c;
    std::string detail;
    try {
        detail = body(c);
    } catch (const std::exception& e) {
        c.expect(false, std::string("exception: ") + e.what());
    }
    report(n, c, detail);
}

std::vector<double> random_dist(Rng& rng, std::size_t k) {
    std::vector<double> p(k);
    double s = 0;
    for (auto& x : p) {
        x = rng.below(4) == 0 ? 0.0 : rng.uniform();
        s += x;
    }
    if (s == 0) p[rng.below(k)] = s = 1;
    for (auto& x : p) x /= s;
    return p;
}

std::vector<double> random_group(Rng& rng, std::size_t n, double shift, double scale) {
    std::vector<double> g(n);
    for (auto& x : g) x = shift + scale * (rng.uniform() * 2 - 1);
    return g;
}

std::string fixed(double v, int digits = 2) {
    std::ostringstream s;
    s.setf(std::ios::fixed);
    s.precision(digits);
    s << v;
    return s.str();
}

struct Workspace {
    fs::path dir;
    explicit Workspace(const std::string& name) : dir(fs::temp_directory_path() / name) {
        fs::remove_all(dir);
        fs::create_directories(dir);
        for (const char* f : {"golden_config.json", "stub_script.json", "roster.csv", "human_microdata.csv"})
            fs::copy_file(data_dir / f, dir / f);
    }
    ~Workspace() { fs::remove_all(dir); }
    pipeline::EnvLookup env() const {
        const auto run = (dir / "run").string();
        return [run](const std::string& k) -> std::optional<std::string> {
            if (k == "PERSONA_RUN_DIR") return run;
            return std::nullopt;
        };
    }
    pipeline::PipelineConfig config(std::size_t workers = 1) const {
        auto c = pipeline::load_config(dir / "golden_config.json", env());
        c.workers = workers;
        return c;
    }
};

matching::WeightMatrix to_matrix(const std::vector<std::vector<double>>& w) {
    matching::WeightMatrix m(w.size(), w.empty() ? 0 : w[0].size());
    for (std::size_t i = 0; i < m.rows; ++i)
        for (std::size_t j = 0; j < m.cols; ++j) m(i, j) = w[i][j];
    return m;
}

std::map<char, double> one_hot(char letter, std::size_t k) {
    std::map<char, double> m;
    for (std::size_t i = 0; i < k; ++i) m[static_cast<char>('A' + i)] = static_cast<char>('A' + i) == letter ? 1.0 : 0.0;
    return m;
}

}  // namespace

int main() {
    spdlog::set_level(spdlog::level::off);

    run(1, [](Check& c) {
        const auto t0 = Clock::now();
        Rng rng(1001);
        int checked = 0;
        for (int trial = 0; trial < 200; ++trial) {
            const std::size_t n = 1 + rng.below(7);
            const std::size_t m = n + rng.below(8 - n + 1);
            std::vector<std::vector<double>> w(n, std::vector<double>(m));
            for (auto& row : w)
                for (auto& x : row) x = static_cast<double>(rng.below(65)) / 64.0;
            const double expect = oracle::brute_force_assignment(w);
            c.expect(matching::hungarian_match(to_matrix(w)).total_weight == expect,
                     "instance " + std::to_string(trial) + " differs from enumeration");
            ++checked;
        }
        const std::vector<std::vector<double>> crossing{{0.9, 0.8, 0.0}, {0.8, 0.0, 0.0}, {0.0, 0.0, 0.1}};
        const double greedy = oracle::greedy_assignment(crossing);
        const double optimal = matching::hungarian_match(to_matrix(crossing)).total_weight;
        c.expect(greedy < optimal && std::abs(optimal - 1.7) < 1e-12, "crossing instance");
        const double secs = seconds_since(t0);
        c.expect(secs < 5.0, "took " + fixed(secs) + " s");
        return std::to_string(checked) + " instances equal enumeration, greedy " + fixed(greedy, 1) + " < optimum " +
               fixed(optimal, 1) + ", " + fixed(secs) + " s";
    });

    run(2, [](Check& c) {
        const auto t0 = Clock::now();
        Rng rng(2002);
        double worst = 0;
        for (int trial = 0; trial < 500; ++trial) {
            const std::size_t k = trial % 2 ? 5 : 4;
            std::vector<double> pos(k);
            for (std::size_t i = 0; i < k; ++i) pos[i] = static_cast<double>(i + 1);
            const auto p = random_dist(rng, k), q = random_dist(rng, k);
            worst = std::max(worst, std::abs(metrics::wasserstein_1d(p, q, pos) - oracle::transport_cost(p, q, pos)));
        }
        c.expect(worst <= 1e-9, "max error " + std::to_string(worst));
        const std::vector<double> pos{1, 2, 3, 4, 5};
        for (int trial = 0; trial < 100; ++trial) {
            const auto a = random_dist(rng, 5), b = random_dist(rng, 5), d = random_dist(rng, 5);
            const double ab = metrics::wasserstein_1d(a, b, pos), ba = metrics::wasserstein_1d(b, a, pos);
            const double bd = metrics::wasserstein_1d(b, d, pos), ad = metrics::wasserstein_1d(a, d, pos);
            c.expect(ab >= 0 && metrics::wasserstein_1d(a, a, pos) == 0.0, "non-negativity / identity");
            c.expect(std::abs(ab - ba) <= 1e-15, "symmetry");
            c.expect(ad <= ab + bd + 1e-12, "triangle inequality");
        }
        const double secs = seconds_since(t0);
        c.expect(secs < 10.0, "took " + fixed(secs) + " s");
        std::ostringstream err;
        err << worst;
        return "500 pairs vs transport solve, max error " + err.str() + ", axioms on 100 triples, " + fixed(secs) + " s";
    });

    run(3, [](Check& c) {
        Rng rng(3003);
        double worst_d = 0, worst_t = 0;
        for (int trial = 0; trial < 100; ++trial) {
            const auto a = random_group(rng, 2 + rng.below(60), rng.uniform() * 4 - 2, 0.1 + rng.uniform() * 3);
            const auto b = random_group(rng, 2 + rng.below(60), rng.uniform() * 4 - 2, 0.1 + rng.uniform() * 3);
            const double rd = oracle::cohens_d(a, b), rt = oracle::welch_t(a, b);
            worst_d = std::max(worst_d, std::abs(metrics::cohens_d(a, b) - rd) / std::max(1.0, std::abs(rd)));
            worst_t = std::max(worst_t, std::abs(metrics::welch_t(a, b).t - rt) / std::max(1.0, std::abs(rt)));
        }
        c.expect(worst_d <= 1e-12, "cohens_d error");
        c.expect(worst_t <= 1e-12, "welch_t error");
        const auto a = random_group(rng, 30, 1, 2), b = random_group(rng, 40, 0, 1);
        const double base = metrics::cohens_d(a, b);
        for (int s = 0; s < 10; ++s) {
            const double k = std::ldexp(1.0, 3 * s - 12);
            auto sa = a, sb = b;
            for (auto& x : sa) x *= k;
            for (auto& x : sb) x *= k;
            c.expect(metrics::cohens_d(sa, sb) == base, "scale " + std::to_string(k));
        }
        std::ostringstream out;
        out << "100 pairs, max relative error d " << worst_d << " t " << worst_t << ", d unchanged under 10 scalings";
        return out.str();
    });

    run(4, [](Check& c) {
        using surveys::Study;
        const std::map<Study, std::size_t> sizes{{Study::atp_w110, 10}, {Study::subversion, 24}, {Study::meta_prejudice, 6}};
        for (const auto& [s, n] : sizes) {
            c.expect(surveys::load_study(s).size() == n, std::string(surveys::study_name(s)) + " size");
            c.expect(surveys::study_checksum(s) == surveys::pinned_checksum(s), std::string(surveys::study_name(s)) + " checksum");
        }
        struct Want {
            Study s;
            Party p;
            double delta, d;
        };
        const std::vector<Want> want{{Study::atp_w110, Party::democrat, 1.630, 2.208},
                                     {Study::atp_w110, Party::republican, 1.606, 2.263},
                                     {Study::subversion, Party::democrat, 0.445, 1.887},
                                     {Study::subversion, Party::republican, 0.398, 1.951},
                                     {Study::meta_prejudice, Party::democrat, 1.091, 0.761},
                                     {Study::meta_prejudice, Party::republican, 1.182, 0.768}};
        for (const auto& w : want) {
            const auto& r = metrics::human_reference(w.s, w.p);
            c.expect(r.delta == w.delta && r.cohens_d == w.d, std::string(surveys::study_name(w.s)) + " reference row");
        }
        const auto text = metrics::render_text(metrics::human_rows(Study::atp_w110));
        c.expect(text.find("1.630") != std::string::npos && text.find("2.263") != std::string::npos, "rendered rows");
        return std::string("banks 10/24/6 with pinned checksums, six human reference rows");
    });

    run(5, [](Check& c) {
        const auto t0 = Clock::now();
        Workspace ws("persona_accept_golden");
        pipeline::Pipeline p(ws.config(), ws.env());
        const auto g = p.generate();
        p.annotate();
        const auto m = p.match();
        p.survey();
        const auto ev = p.evaluate();
        c.expect(g.summary["total"] == 4, "backstory count");
        c.expect(m.produced == 2, "matched humans");
        c.expect(ev.text == io::read_file(data_dir / "golden_report.txt"), "report differs from golden");
        const double secs = seconds_since(t0);
        c.expect(secs < 30.0, "took " + fixed(secs) + " s");
        return "4 backstories, 2 humans, report byte-identical to golden, " + fixed(secs) + " s";
    });

    run(6, [](Check& c) {
        Workspace ws("persona_accept_critic");
        const auto cfg = ws.config();
        pipeline::Pipeline p(cfg, ws.env());
        p.generate();
        const auto script = nlohmann::json::parse(io::read_file(data_dir / "stub_script.json"));
        std::vector<std::string> routine;
        for (const auto& r : script["rules"])
            if (r["match"][0].get<std::string>().find("daily routine") != std::string::npos)
                routine = r["responses"].get<std::vector<std::string>>();
        c.expect(!routine.empty(), "fixture lacks the routine rule");
        const auto fenced = [](const std::string& s) { return s.find("```") != std::string::npos; };
        std::size_t rejections = 0;
        for (const auto& j : io::read_jsonl(p.artifact("backstories.jsonl"))) {
            const auto b = backstory::backstory_from_json(j);
            for (const auto& t : b.turns) {
                c.expect(!fenced(t.answer), b.id + " persisted a code fence");
                int expect = 1;
                if (t.question.id == 5 && !routine.empty()) {
                    while (fenced(routine[backstory::interview_seed(b.seed, 5, expect) % routine.size()])) ++expect;
                }
                c.expect(t.attempts == expect, b.id + " question " + std::to_string(t.question.id) + " attempts");
            }
            for (const auto& r : b.rejections)
                c.expect(r.question_id == 5 && r.reason == backstory::RejectReason::metadata_or_code, "unexpected rejection");
            rejections += b.rejections.size();
        }
        c.expect(rejections > 0, "schedule never produced a fenced answer");
        return "no fenced answer persisted, attempts follow the seed schedule, " + std::to_string(rejections) +
               " rejection(s)";
    });

    run(7, [](Check& c) {
        using demographics::TraitKind;
        backstory::Backstory b;
        b.id = "b00000";
        b.seed = 77;
        b.turns.push_back({backstory::default_question_bank()[5], "I am a proud Democrat and I like fishing.", 1});
        auto sampler = std::make_shared<llm::StubBackend>([](const llm::CompletionRequest& r) {
            Rng rng(*r.seed);
            static const char* replies[] = {"(A)", "(B)", "(C)", "(D)", "(E)", "(F)", "(G)", "??"};
            return llm::CompletionResponse{replies[rng.below(8)], std::nullopt};
        });
        llm::Client sa(sampler);
        for (auto k : demographics::all_traits) {
            const auto d = demographics::sample_trait_distribution(b, k, sa, {40});
            for (const auto& [letter, pr] : d.probabilities) {
                const double scaled = pr * d.support_count;
                c.expect(std::abs(scaled - std::round(scaled)) < 1e-9, "non-integer p x support");
            }
        }
        auto extractor = std::make_shared<llm::StubBackend>([](const llm::CompletionRequest& r) {
            if (r.prompt.find("political party") != std::string::npos)
                return llm::CompletionResponse{"Evidence: \"I am a proud Democrat\" Answer: (A)", std::nullopt};
            return llm::CompletionResponse{"nothing", std::nullopt};
        });
        llm::Client ex(extractor);
        const auto profile = demographics::annotate(b, {ex, sa}, {40});
        const auto& party = profile.at(TraitKind::party);
        double rest = 0;
        for (const auto& [letter, pr] : party.probabilities)
            if (letter != 'A') rest += pr;
        c.expect(party.method == demographics::Method::explicit_evidence && party.probability('A') == 1.0 && rest == 0.0,
                 "explicit trait is not one-hot");

        const std::map<std::string, Party> who{{"d1", Party::democrat}, {"d2", Party::democrat},
                                               {"r1", Party::republican}, {"r2", Party::republican}};
        for (auto study : surveys::all_studies) {
            std::vector<surveys::ResponseDistribution> cells;
            for (const auto& [id, party_of] : who) {
                const char letter = id.back() == '1' ? 'B' : 'C';
                for (const auto& q : surveys::load_study(study))
                    if (surveys::addressed_to(q.asked_to, party_of))
                        cells.push_back({id, q.id, one_hot(letter, q.options.size()), llm::ScoringMode::token_scores, 0});
            }
            const auto scores = metrics::score_study(study, cells, who, metrics::Encodings::defaults(),
                                                     metrics::ScoreMode::expected, 1);
            for (Party p : {Party::democrat, Party::republican}) {
                const auto g = metrics::study_gap(scores, p);
                c.expect(g.delta && *g.delta == 0.0 && g.cohens_d && *g.cohens_d == 0.0,
                         std::string(surveys::study_name(study)) + " identical groups");
            }
        }
        return std::string("sampled p x support integral, explicit trait one-hot, identical groups give zero gap");
    });

    run(8, [](Check& c) {
        const auto t0 = Clock::now();
        const fs::path dir = fs::temp_directory_path() / "persona_accept_ngram";
        fs::remove_all(dir);
        fs::create_directories(dir);
        static const std::vector<std::string> vocab = {"the", "a", "small", "town", "in", "ohio", "I", "grew", "up",
                                                       "my", "father", "worked", "at", "mill", ",", ".", "U.S.",
                                                       "don't", "well-known", "and"};
        Rng rng(8008);
        std::string body;
        std::vector<std::vector<std::string>> docs;
        for (int d = 0; d < 1000; ++d) {
            std::string doc;
            const auto len = rng.below(60);
            for (std::size_t i = 0; i < len; ++i) {
                if (i) doc += ' ';
                doc += vocab[rng.below(10) < 3 ? rng.below(6) : rng.below(vocab.size())];
            }
            body += doc + "\n";
            docs.push_back(ngram::tokenize(doc));
        }
        const auto corpus = dir / "corpus.txt";
        io::write_file_atomic(corpus, body);
        for (int n : {2, 5, 10}) {
            const auto expect = oracle::naive_ngrams(docs, static_cast<std::size_t>(n));
            std::optional<std::vector<std::pair<std::string, std::uint64_t>>> first;
            for (std::size_t w : {1u, 4u, 8u}) {
                ngram::CountOptions opt;
                opt.workers = w;
                opt.spill_threshold = 64;
                opt.batch_documents = 50;
                opt.scratch_dir = dir / "scratch";
                const auto t = ngram::count_ngrams(corpus, {n}, opt);
                const std::map<std::string, std::uint64_t> got(t.entries.begin(), t.entries.end());
                c.expect(got == expect, "n=" + std::to_string(n) + " counts differ from naive counter");
                if (!first) first = t.entries;
                c.expect(t.entries == *first, "workers=" + std::to_string(w) + " differs");
                c.expect(ngram::top_k(t, 25) == oracle::top_k(expect, 25), "top-k differs");
            }
            const auto phrase = ngram::containing_phrase(corpus, "small town", {n});
            const auto filtered = oracle::filter_containing(expect, ngram::tokenize("small town"));
            c.expect(phrase == oracle::top_k(filtered, filtered.size()), "phrase search differs");
        }
        fs::remove_all(dir);
        const double secs = seconds_since(t0);
        c.expect(secs < 10.0, "took " + fixed(secs) + " s");
        return "1000 documents, n in {2,5,10}, spill/merge, top-k and phrase equal oracles for 1/4/8 workers, " +
               fixed(secs) + " s";
    });

    run(9, [](Check& c) {
        Workspace ws("persona_accept_ablate");
        pipeline::Pipeline p(ws.config(), ws.env());
        const auto len = p.ablate("length", {"1", "2", "5", "10"}, 2);
        std::string words;
        for (std::size_t i = 0; i < len.levels.size(); ++i) {
            if (i) {
                c.expect(len.levels[i].mean_words > len.levels[i - 1].mean_words, "mean words not increasing");
                words += " < ";
            }
            words += fixed(len.levels[i].mean_words, 1);
        }
        const auto con = p.ablate("consistency", {"critic_on", "critic_off"}, 2);
        c.expect(con.levels.size() == 2 && con.levels[0].artifact_hash != con.levels[1].artifact_hash,
                 "critic_on and critic_off artifacts are identical");
        return "length axis mean words " + words + ", critic_on/critic_off artifacts differ";
    });

    return failures == 0 ? 0 : 1;
}
