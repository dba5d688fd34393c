#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "persona/demographics.hpp"
#include "persona/metrics.hpp"
#include "persona/ngram.hpp"
#include "persona/pipeline.hpp"
#include "persona/surveys.hpp"

namespace fs = std::filesystem;
using namespace persona;

namespace {

// Exit codes: 0 success, 1 error, 2 stage finished with per-item failures.
constexpr int kPartial = 2;

struct Common {
    std::string config;
    std::optional<std::size_t> workers;
    std::string log_level = "info";
};

pipeline::PipelineConfig load(const Common& c) {
    std::string path = c.config;
    if (path.empty())
        if (const char* env = std::getenv("PERSONA_CONFIG")) path = env;
    if (path.empty()) throw pipeline::StageError("config", "<none>", "pass --config or set PERSONA_CONFIG");
    if (!fs::exists(path)) throw pipeline::StageError("config", path, "config file not found");
    auto cfg = pipeline::load_config(path);
    if (c.workers) {
        if (*c.workers < 1) throw InvalidArgument("--workers must be >= 1", "config");
        cfg.workers = *c.workers;
    }
    return cfg;
}

int finish(const pipeline::StageOutcome& o) {
    std::cout << o.stage << ": " << o.produced << " produced, " << o.failures << " failed\n";
    for (const auto& p : o.outputs) std::cout << "  " << p.string() << "\n";
    return o.ok() ? 0 : kPartial;
}

std::vector<std::string> split_commas(const std::string& s) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (start <= s.size()) {
        const auto end = s.find(',', start);
        const auto piece = trim(s.substr(start, end == std::string::npos ? std::string::npos : end - start));
        if (!piece.empty()) out.push_back(piece);
        if (end == std::string::npos) break;
        start = end + 1;
    }
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Virtual persona pipeline: backstories, annotation, matching, surveys, evaluation"};
    app.require_subcommand(1);
    app.fallthrough();
    Common common;
    app.add_option("-c,--config", common.config, "pipeline config (JSON); defaults to $PERSONA_CONFIG");
    app.add_option("-w,--workers", common.workers, "override the configured worker bound");
    app.add_option("--log-level", common.log_level, "trace|debug|info|warn|error|off")->capture_default_str();

    std::optional<std::size_t> count;
    auto* gen = app.add_subcommand("generate", "generate interview backstories (resumable)");
    gen->add_option("-n,--count", count, "target number of backstories (default: generation.count)");

    auto* ann = app.add_subcommand("annotate", "attribute demographic trait distributions to backstories");
    auto* mat = app.add_subcommand("match", "assign personas to the human roster");

    std::vector<std::string> studies;
    std::string method;
    auto* sur = app.add_subcommand("survey", "administer the survey instruments to the matched cohort");
    sur->add_option("-s,--study", studies, "study to run (repeatable; default: config)");
    sur->add_option("-m,--method", method, "conditioning: backstory|qa|bio|portray|generative_agent");

    auto* eva = app.add_subcommand("evaluate", "compute gaps and write the report");

    std::string axis, levels;
    auto* abl = app.add_subcommand("ablate", "sweep backstory count, length or consistency");
    abl->add_option("-a,--axis", axis, "count|length|consistency")->required();
    abl->add_option("-l,--levels", levels, "comma-separated levels")->required();
    abl->add_option("-n,--count", count, "backstories per level for the length/consistency axes");

    std::string export_what;
    bool csv = false;
    auto* rep = app.add_subcommand("report", "validate the run and print or export results");
    rep->add_option("-e,--export", export_what,
                    "report|manifest|human-reference|study-banks|option-sets")
        ->capture_default_str();
    rep->add_flag("--csv", csv, "print the report as CSV");

    std::vector<std::string> corpora;
    int n = 5;
    std::size_t k = 20;
    std::string phrase, format = "auto", scratch;
    bool lowercase = false, ngram_csv = false;
    std::size_t spill = 1 << 20;
    auto* ng = app.add_subcommand("ngram", "count n-grams in a corpus (or compare two)");
    ng->add_option("--corpus", corpora, "corpus file; give twice to compare")->required()->expected(1, 2);
    ng->add_option("--n", n, "n-gram order")->capture_default_str();
    ng->add_option("--k", k, "number of top entries")->capture_default_str();
    ng->add_option("--phrase", phrase, "only n-grams containing this phrase");
    ng->add_option("--format", format, "auto|jsonl|txt")->capture_default_str();
    ng->add_option("--scratch", scratch, "directory for spill files");
    ng->add_option("--spill-threshold", spill, "distinct keys per shard before spilling")->capture_default_str();
    ng->add_flag("--lowercase", lowercase, "fold case before counting");
    ng->add_flag("--csv", ngram_csv, "CSV output");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    auto logger = spdlog::stderr_color_mt("persona");
    spdlog::set_default_logger(logger);
    spdlog::set_level(spdlog::level::from_str(common.log_level));

    try {
        if (ng->parsed()) {
            if (n < 1) throw InvalidArgument("--n must be >= 1", "ngram");
            ngram::NgramSpec spec{n, lowercase};
            ngram::CountOptions opt;
            opt.workers = common.workers.value_or(1);
            opt.spill_threshold = spill;
            opt.format = ngram::parse_format(format);
            if (!scratch.empty()) opt.scratch_dir = scratch;
            for (const auto& c : corpora)
                if (!fs::exists(c)) throw pipeline::StageError("ngram", c, "corpus not found");
            if (!phrase.empty()) {
                auto ranked = ngram::containing_phrase(corpora.front(), phrase, spec, opt);
                if (ranked.size() > k) ranked.resize(k);
                std::cout << (ngram_csv ? ngram::render_ranked_csv(ranked) : ngram::render_ranked(ranked));
            } else if (corpora.size() == 2) {
                const auto a = ngram::count_ngrams(corpora[0], spec, opt);
                const auto b = ngram::count_ngrams(corpora[1], spec, opt);
                std::cout << ngram::render_comparison(ngram::compare_corpora(a, b, k), fs::path(corpora[0]).filename().string(),
                                                      fs::path(corpora[1]).filename().string());
            } else {
                const auto t = ngram::count_ngrams(corpora.front(), spec, opt);
                const auto ranked = ngram::top_k(t, k);
                std::cout << (ngram_csv ? ngram::render_ranked_csv(ranked) : ngram::render_ranked(ranked));
            }
            return 0;
        }

        if (rep->parsed() && (export_what == "human-reference" || export_what == "study-banks" ||
                              export_what == "option-sets")) {
            if (export_what == "human-reference") std::cout << metrics::human_reference_json().dump(2) << "\n";
            else if (export_what == "option-sets") std::cout << demographics::option_sets_json().dump(2) << "\n";
            else {
                nlohmann::json all = nlohmann::json::object();
                for (auto s : surveys::all_studies) all[std::string(surveys::study_name(s))] = surveys::study_json(s);
                std::cout << all.dump(2) << "\n";
            }
            return 0;
        }

        auto cfg = load(common);
        if (sur->parsed()) {
            if (!studies.empty()) {
                cfg.studies.clear();
                for (const auto& s : studies) cfg.studies.push_back(surveys::parse_study(s));
            }
            if (!method.empty()) cfg.method = surveys::parse_method(method);
        }
        pipeline::Pipeline p(cfg);

        if (gen->parsed()) return finish(p.generate(count));
        if (ann->parsed()) return finish(p.annotate());
        if (mat->parsed()) return finish(p.match());
        if (sur->parsed()) return finish(p.survey());
        if (eva->parsed()) {
            const auto ev = p.evaluate();
            std::cout << ev.text;
            return 0;
        }
        if (abl->parsed()) {
            const auto report = p.ablate(axis, split_commas(levels), count);
            std::cout << pipeline::Pipeline::render_sweep(report);
            return report.ok ? 0 : kPartial;
        }
        if (rep->parsed()) {
            const auto m = p.manifest();
            const auto problems = m.validate(p.root());
            for (const auto& pr : problems) std::cerr << "error: " << pr << "\n";
            if (export_what.empty() || export_what == "report") {
                const auto path = p.require("evaluate", csv ? "report.csv" : "report.txt", "report");
                std::cout << io::read_file(path);
            } else if (export_what == "manifest") {
                std::cout << m.to_json().dump(2) << "\n";
            } else {
                throw InvalidArgument("unknown export '" + export_what + "'", "report");
            }
            return problems.empty() ? 0 : 1;
        }
    } catch (const pipeline::StageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const Error& e) {
        const std::string stage = e.stage().empty() ? app.get_subcommands().front()->get_name() : e.stage();
        std::cerr << "error: [" << stage << "] " << (common.config.empty() ? "<config>" : common.config) << ": "
                  << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: [" << app.get_subcommands().front()->get_name() << "] "
                  << (common.config.empty() ? "<config>" : common.config) << ": " << e.what() << "\n";
        return 1;
    }
    return 0;
}
