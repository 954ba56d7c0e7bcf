// grenol: synthetic data generation, cross-validated training, sampling and evaluation.
//
// Exit codes: 0 success, 2 usage error, 3 data validation error, 4 numeric failure.

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "grenol/braingraph.hpp"
#include "grenol/checkpoint.hpp"
#include "grenol/error.hpp"
#include "grenol/evalmetrics.hpp"
#include "grenol/pipeline.hpp"
#include "grenol/sampler.hpp"
#include "grenol/schedule.hpp"
#include "grenol/trainer.hpp"

namespace fs = std::filesystem;
using namespace grenol;

namespace {

enum ExitCode { kOk = 0, kUsage = 2, kData = 3, kNumeric = 4 };

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// `key = value` lines; blank lines and lines starting with '#' are skipped.
std::vector<std::pair<std::string, std::string>> read_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError(DataError::Kind::io, "cannot read config file '" + path + "'");
    std::vector<std::pair<std::string, std::string>> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string text(csv::trim(line));
        if (text.empty() || text[0] == '#') continue;
        const auto eq = text.find('=');
        if (eq == std::string::npos) {
            throw UsageError(path + ":" + std::to_string(line_no) + ": expected 'key = value'");
        }
        out.emplace_back(std::string(csv::trim(text.substr(0, eq))), std::string(csv::trim(text.substr(eq + 1))));
    }
    return out;
}

// Splices config-file entries in front of the command-line flags of the subcommand, so
// that with last-value-wins options a flag given explicitly overrides the file.
std::vector<std::string> expand_config(std::vector<std::string> args) {
    std::string path;
    for (std::size_t i = 0; i < args.size(); ++i) {
        if (args[i] == "--config" && i + 1 < args.size()) {
            path = args[i + 1];
            args.erase(args.begin() + static_cast<std::ptrdiff_t>(i), args.begin() + static_cast<std::ptrdiff_t>(i + 2));
            break;
        }
        if (args[i].rfind("--config=", 0) == 0) {
            path = args[i].substr(9);
            args.erase(args.begin() + static_cast<std::ptrdiff_t>(i));
            break;
        }
    }
    if (path.empty() || args.empty()) return args;
    std::vector<std::string> injected;
    for (const auto& [key, value] : read_config_file(path)) injected.push_back("--" + key + "=" + value);
    args.insert(args.begin() + 1, injected.begin(), injected.end());
    return args;
}

void ensure_parent(const fs::path& file) {
    if (file.has_parent_path()) fs::create_directories(file.parent_path());
}

std::ofstream open_output(const fs::path& file) {
    ensure_parent(file);
    std::ofstream out(file, std::ios::binary);
    if (!out) throw DataError(DataError::Kind::io, "cannot write '" + file.string() + "'");
    return out;
}

// Resolved option values of a subcommand as `key = value` lines, loadable via --config.
std::string config_echo(const CLI::App& sub) {
    std::ostringstream out;
    out << "# grenol " << sub.get_name() << '\n';
    for (const CLI::Option* opt : sub.get_options()) {
        const std::string name = opt->get_single_name();
        if (name.empty() || name == "help" || name == "h") continue;
        std::string value;
        if (opt->count() > 0) {
            const auto results = opt->reduced_results();
            value = results.empty() ? "true" : results.back();
        } else {
            value = opt->get_default_str();
        }
        if (value.empty()) continue;
        out << name << " = " << value << '\n';
    }
    return out.str();
}

void write_text(const fs::path& file, const std::string& text) {
    auto out = open_output(file);
    out << text;
}

struct Options {
    // gen-data
    std::size_t subjects = 60;
    // shared
    std::uint64_t seed = 0;
    std::string out;
    std::string data;
    std::string train_data;
    std::string checkpoint;
    std::string subject;
    std::string hemisphere = "lh";
    std::string source_metric = kMeanCurvature;
    std::string target_metric = kCorticalThickness;
    // training
    std::size_t folds = 5;
    std::size_t epochs = 500;
    double lr = 1e-3;
    double weight_decay = 1e-3;
    std::size_t batch_size = 0;
    std::size_t patience = 0;
    std::size_t conv_dim = 48;
    std::size_t fc_dim = 128;
    bool untrained = false;
    bool dump_predictions = false;
    // schedule
    std::size_t steps = 100;
    double k = 0.01;
    std::string mode = "paper";
};

ScheduleParams schedule_params(const Options& o) {
    ScheduleParams p;
    p.steps = o.steps;
    p.noise_std = o.k;
    p.mode = parse_diffusion_mode(o.mode);
    return p;
}

void add_schedule_flags(CLI::App* sub, Options& o) {
    sub->add_option("--T", o.steps, "diffusion steps")->check(CLI::PositiveNumber);
    sub->add_option("--k", o.k, "noise standard deviation coefficient")->check(CLI::PositiveNumber);
    sub->add_option("--mode", o.mode, "forward-process coefficient")->check(CLI::IsMember({"paper", "standard"}));
}

int cmd_gen_data(const Options& o, const CLI::App& sub) {
    const auto table = generate_synthetic_dataset(o.subjects, o.seed);
    save_cortical_table(table, o.out);
    write_text(fs::path(o.out).string() + ".echo", config_echo(sub));
    std::cerr << "wrote " << o.subjects << " subjects to " << o.out << '\n';
    return kOk;
}

int cmd_dump_schedule(const Options& o, const CLI::App& sub) {
    const NoiseSchedule schedule(schedule_params(o));
    auto out = open_output(o.out);
    write_schedule_csv(schedule, out);
    write_text(fs::path(o.out).string() + ".echo", config_echo(sub));
    return kOk;
}

int cmd_train(const Options& o, const CLI::App& sub) {
    const CorticalTable table = load_cortical_table(o.data);
    ExperimentConfig exp;
    exp.hemisphere = parse_hemisphere(o.hemisphere);
    exp.source_metric = o.source_metric;
    exp.target_metric = o.target_metric;
    table.metric_column(exp.source_metric);
    table.metric_column(exp.target_metric);
    exp.model.conv_dim = o.conv_dim;
    exp.model.fc_dim = o.fc_dim;
    exp.model.pe_dim = o.fc_dim;
    exp.train.epochs = o.epochs;
    exp.train.lr = o.lr;
    exp.train.weight_decay = o.weight_decay;
    exp.train.batch_size = o.batch_size;
    exp.train.patience = o.patience;
    exp.train.folds = o.folds;
    exp.train.seed = o.seed;
    exp.train.schedule = schedule_params(o);
    exp.model.validate();
    exp.train.validate();

    const auto subjects = table.subjects(exp.hemisphere);
    if (exp.train.folds > subjects.size()) {
        throw DataError(DataError::Kind::invalid_value,
                        std::to_string(exp.train.folds) + " folds requested but " + o.data + " has only " +
                            std::to_string(subjects.size()) + " " + to_string(exp.hemisphere) + " subjects");
    }
    const std::size_t min_train = subjects.size() - (subjects.size() + exp.train.folds - 1) / exp.train.folds;
    if (min_train < 2) throw DataError(DataError::Kind::invalid_value, "too few subjects for batch statistics per fold");

    const fs::path dir(o.out);
    fs::create_directories(dir);
    const std::string echo = config_echo(sub);
    write_text(dir / "config.echo", echo);

    EvalReport combined;
    EvalReport combined_untrained;
    combined.seed = exp.train.seed;
    combined.config_echo = echo;
    cross_validate(table, exp, o.untrained, {}, [&](const FoldOutcome& fold) {
        const fs::path fold_dir = dir / ("fold-" + std::to_string(fold.fold));
        fs::create_directories(fold_dir);
        ModelParams params = fold.trained.params;
        save_checkpoint(params, fold.checkpoint_meta(exp), (fold_dir / "checkpoint.grnl").string());
        auto report = open_output(fold_dir / "train_report.csv");
        write_train_report(fold.trained.report, report);
        combined.append(fold.eval);
        if (fold.untrained_eval) combined_untrained.append(*fold.untrained_eval);
        const auto s = fold.eval.overall();
        std::cerr << "fold " << fold.fold << ": final loss " << fold.trained.report.epochs.back().mean_loss
                  << ", test frobenius " << s.mean_frobenius << " (baseline " << s.mean_baseline_frobenius << ")\n";
    });

    auto csv = open_output(dir / "eval_report.csv");
    write_eval_csv(combined, csv);
    auto summary = open_output(dir / "eval_summary.txt");
    write_eval_summary(combined, summary);
    if (o.untrained) {
        auto ucsv = open_output(dir / "eval_report_untrained.csv");
        write_eval_csv(combined_untrained, ucsv);
    }
    return kOk;
}

Checkpoint load_for(const Options& o, const CorticalTable& table) {
    Checkpoint ckpt = load_checkpoint(o.checkpoint);
    table.metric_column(ckpt.meta.source_metric);
    table.metric_column(ckpt.meta.target_metric);
    return ckpt;
}

int cmd_sample(const Options& o, const CLI::App& sub) {
    const CorticalTable table = load_cortical_table(o.data);
    Checkpoint ckpt = load_for(o, table);
    const BrainGraph source = build_graph(table, o.subject, ckpt.meta.hemisphere, ckpt.meta.source_metric, ckpt.meta.scaler);
    const NoiseSchedule schedule(ckpt.meta.schedule);
    auto rng = subject_rng(o.seed, 0);
    const BrainGraph prediction =
        sample_target(ckpt.params, source, schedule, ckpt.meta.scaler, ckpt.meta.target_metric, rng);

    const fs::path dir(o.out);
    fs::create_directories(dir);
    write_text(dir / "config.echo", config_echo(sub));
    auto adj = open_output(dir / (o.subject + "_adjacency.csv"));
    write_adjacency_csv(prediction.adjacency, adj);
    auto nodes = open_output(dir / (o.subject + "_nodes.csv"));
    write_nodes_csv(prediction, nodes);
    return kOk;
}

std::vector<GraphPair> pairs_for(const CorticalTable& table, const std::vector<std::string>& ids, const CheckpointMeta& meta) {
    std::vector<GraphPair> pairs;
    for (const auto& id : ids) {
        pairs.push_back(build_graph_pair(table, id, meta.hemisphere, meta.source_metric, meta.target_metric, meta.scaler));
    }
    return pairs;
}

int cmd_evaluate(const Options& o, const CLI::App& sub) {
    const CorticalTable table = load_cortical_table(o.data);
    Checkpoint ckpt = load_for(o, table);
    const CheckpointMeta& meta = ckpt.meta;
    const std::set<std::string> trained_on(meta.train_subjects.begin(), meta.train_subjects.end());
    const bool cross_cohort = !o.train_data.empty() && fs::absolute(o.train_data) != fs::absolute(o.data);

    std::vector<std::string> test_ids;
    std::vector<Tensor> baseline_targets;
    if (cross_cohort) {
        // Another cohort: every subject is a test subject; the baseline comes from the
        // training cohort's targets.
        test_ids = table.subjects(meta.hemisphere);
        const CorticalTable train_table = load_cortical_table(o.train_data);
        auto ids = train_table.subjects(meta.hemisphere);
        std::vector<std::string> used;
        for (const auto& id : ids)
            if (trained_on.empty() || trained_on.count(id)) used.push_back(id);
        if (used.empty()) used = ids;
        for (const auto& p : pairs_for(train_table, used, meta)) baseline_targets.push_back(p.target.adjacency);
    } else {
        std::vector<std::string> train_ids;
        for (const auto& id : table.subjects(meta.hemisphere)) (trained_on.count(id) ? train_ids : test_ids).push_back(id);
        for (const auto& p : pairs_for(table, train_ids, meta)) baseline_targets.push_back(p.target.adjacency);
    }
    if (test_ids.empty()) {
        throw DataError(DataError::Kind::unknown_subject,
                        "no held-out " + std::string(to_string(meta.hemisphere)) + " subjects in " + o.data +
                            " (every subject was used for training)");
    }
    if (baseline_targets.empty()) {
        throw DataError(DataError::Kind::unknown_subject,
                        "no training-cohort subjects available for the mean-adjacency baseline; pass --train-data");
    }

    const auto test_pairs = pairs_for(table, test_ids, meta);
    const Tensor baseline = baseline_mean_predictor(baseline_targets);
    const NoiseSchedule schedule(meta.schedule);
    EvalReport report = evaluate_model(ckpt.params, test_pairs, schedule, meta.scaler, baseline, o.seed, 0, cross_cohort);
    report.config_echo = config_echo(sub);

    const fs::path dir(o.out);
    fs::create_directories(dir);
    write_text(dir / "config.echo", report.config_echo);
    auto csv = open_output(dir / "eval_report.csv");
    write_eval_csv(report, csv);
    auto summary = open_output(dir / "eval_summary.txt");
    write_eval_summary(report, summary);
    if (o.dump_predictions) {
        for (const auto& g : report.predictions) {
            auto out = open_output(dir / "predictions" / (g.subject_id + "_adjacency.csv"));
            write_adjacency_csv(g.adjacency, out);
        }
    }
    const auto s = report.overall();
    std::cerr << "evaluated " << s.count << " subjects: frobenius " << s.mean_frobenius << " (baseline "
              << s.mean_baseline_frobenius << ")\n";
    return kOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Source-to-target brain graph prediction with node-level diffusion", "grenol"};
    app.require_subcommand(1);
    app.option_defaults()->always_capture_default()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    Options o;

    auto* gen = app.add_subcommand("gen-data", "write a synthetic cortical table");
    gen->add_option("--subjects", o.subjects, "number of subjects")->check(CLI::Range(2, 100000));
    gen->add_option("--seed", o.seed, "generator seed");
    gen->add_option("--out", o.out, "output CSV")->required();

    auto* train = app.add_subcommand("train", "cross-validated training");
    train->add_option("--data", o.data, "cortical table CSV")->required();
    train->add_option("--hemisphere", o.hemisphere)->check(CLI::IsMember({"lh", "rh"}));
    train->add_option("--source-metric", o.source_metric);
    train->add_option("--target-metric", o.target_metric);
    train->add_option("--folds", o.folds)->check(CLI::Range(2, 1000));
    train->add_option("--epochs", o.epochs)->check(CLI::PositiveNumber);
    train->add_option("--lr", o.lr)->check(CLI::NonNegativeNumber);
    train->add_option("--weight-decay", o.weight_decay)->check(CLI::NonNegativeNumber);
    train->add_option("--batch-size", o.batch_size, "0 = whole training fold");
    train->add_option("--patience", o.patience, "early-stopping patience in epochs, 0 = off");
    train->add_option("--conv-dim", o.conv_dim)->check(CLI::PositiveNumber);
    train->add_option("--fc-dim", o.fc_dim, "FC width, also the time-embedding size")->check(CLI::PositiveNumber);
    train->add_option("--seed", o.seed);
    train->add_flag("--untrained", o.untrained, "also score freshly initialized models");
    add_schedule_flags(train, o);
    train->add_option("--out", o.out, "output directory")->required();

    auto* sample = app.add_subcommand("sample", "predict one subject's target graph");
    sample->add_option("--checkpoint", o.checkpoint)->required()->check(CLI::ExistingFile);
    sample->add_option("--data", o.data)->required();
    sample->add_option("--subject", o.subject)->required();
    sample->add_option("--seed", o.seed);
    sample->add_option("--out", o.out, "output directory")->required();

    auto* evaluate = app.add_subcommand("evaluate", "score a checkpoint on held-out or other-cohort subjects");
    evaluate->add_option("--checkpoint", o.checkpoint)->required()->check(CLI::ExistingFile);
    evaluate->add_option("--data", o.data)->required();
    evaluate->add_option("--train-data", o.train_data, "training cohort (cross-cohort when it differs from --data)");
    evaluate->add_option("--seed", o.seed);
    evaluate->add_flag("--dump-predictions", o.dump_predictions, "write predicted adjacencies");
    evaluate->add_option("--out", o.out, "output directory")->required();

    auto* dump = app.add_subcommand("dump-schedule", "write the noise schedule as CSV");
    add_schedule_flags(dump, o);
    dump->add_option("--out", o.out, "output CSV")->required();

    for (CLI::App* sub : {gen, train, sample, evaluate, dump}) {
        sub->add_option("--config")->description("plain-text file of `key = value` lines; flags take precedence");
    }

    if (argc < 2) {
        std::cerr << app.help();
        return kUsage;
    }

    try {
        std::vector<std::string> args(argv + 1, argv + argc);
        args = expand_config(std::move(args));
        std::reverse(args.begin(), args.end());
        app.parse(args);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kUsage;
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kUsage;
    } catch (const DataError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kData;
    }

    try {
        if (*gen) return cmd_gen_data(o, *gen);
        if (*train) return cmd_train(o, *train);
        if (*sample) return cmd_sample(o, *sample);
        if (*evaluate) return cmd_evaluate(o, *evaluate);
        if (*dump) return cmd_dump_schedule(o, *dump);
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return kData;
    } catch (const FormatError& e) {
        std::cerr << "checkpoint error: " << e.what() << '\n';
        return kData;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << '\n';
        return kNumeric;
    } catch (const std::invalid_argument& e) {
        std::cerr << "invalid configuration: " << e.what() << '\n';
        return kUsage;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "i/o error: " << e.what() << '\n';
        return kData;
    }
    return kUsage;
}
