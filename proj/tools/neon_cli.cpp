#include <csignal>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "neon/evalsvc.hpp"
#include "neon/http.hpp"
#include "neon/mock_backend.hpp"
#include "neon/pipeline.hpp"

namespace fs = std::filesystem;
using namespace neon;

namespace {

constexpr int exit_ok = 0;
constexpr int exit_validation = 1;
constexpr int exit_runtime = 2;

struct RunArgs {
    std::string config;
    std::string run_dir;
    std::vector<std::string> overrides;
    bool force = false;
};

void add_run_args(CLI::App* cmd, RunArgs& a)
{
    cmd->add_option("-c,--config", a.config, "run configuration file")->required()->check(CLI::ExistingFile);
    cmd->add_option("-r,--run-dir", a.run_dir, "run directory")->required();
    cmd->add_option("-s,--set", a.overrides, "override a config key (key=value); repeatable");
    cmd->add_flag("-f,--force", a.force, "rerun stages even if they are up to date");
}

RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides)
{
    auto cfg = RunConfig::load(path);
    for (const auto& o : overrides) cfg.apply_override(o);
    return cfg;
}

/// Rebuilds the configuration a run was produced with.
RunConfig config_from_manifest(const fs::path& run_dir)
{
    const auto m = pipeline::read_manifest(run_dir);
    RunConfig cfg;
    for (const auto& [k, v] : m.at("config").items()) cfg.set(k, v.get<std::string>());
    return cfg;
}

/// Writes `port` to `path` atomically so a watcher never sees a partial file.
void write_port_file(const std::string& path, int port)
{
    if (!path.empty()) io::write_file_atomic(path, std::to_string(port) + "\n");
}

/// Blocks until SIGINT or SIGTERM.
void wait_for_shutdown()
{
    sigset_t set;
    sigemptyset(&set);
    sigaddset(&set, SIGINT);
    sigaddset(&set, SIGTERM);
    int sig = 0;
    sigwait(&set, &sig);
}

void block_shutdown_signals()
{
    sigset_t set;
    sigemptyset(&set);
    sigaddset(&set, SIGINT);
    sigaddset(&set, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &set, nullptr);
}

std::vector<explain::ExplanationRecord> read_records(const fs::path& p)
{
    std::vector<explain::ExplanationRecord> out;
    for (const auto& row : io::read_jsonl(p)) out.push_back(explain::record_from_json(row));
    return out;
}

std::vector<Instantiation> read_instantiations(const fs::path& p)
{
    std::vector<Instantiation> out;
    for (const auto& row : io::read_jsonl(p)) out.push_back(instantiation_from_json(row));
    return out;
}

void print_json(const json& j) { std::cout << j.dump(2) << "\n"; }

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"NEON: explain false statements through generated correct instantiations"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "show help for all subcommands");

    // Pipeline stages.
    RunArgs run_args;
    struct StageCmd {
        const char* name;
        Stage last;
        const char* help;
    };
    const StageCmd stage_cmds[] = {
        {"ingest", Stage::ingest, "load and validate pairs, sample the exemplar pool"},
        {"instantiate", Stage::instantiate, "phase I: generate correct instantiations (runs ingest first)"},
        {"explain", Stage::explain, "assemble hints and generate explanations (runs earlier stages first)"},
        {"score", Stage::score, "compute metrics and write reports (runs earlier stages first)"},
        {"run", Stage::score, "run the whole pipeline"},
    };
    std::vector<std::pair<CLI::App*, Stage>> stage_apps;
    for (const auto& sc : stage_cmds) {
        auto* cmd = app.add_subcommand(sc.name, sc.help);
        add_run_args(cmd, run_args);
        stage_apps.emplace_back(cmd, sc.last);
    }

    // Sweep.
    std::string sweep_config, sweep_out, sweep_key;
    std::vector<std::string> sweep_values, sweep_overrides;
    bool sweep_force = false;
    auto* sweep_cmd = app.add_subcommand("sweep", "run one configuration per value of a key and compare them");
    sweep_cmd->add_option("-c,--config", sweep_config, "base configuration file")->required()->check(CLI::ExistingFile);
    sweep_cmd->add_option("-o,--out", sweep_out, "sweep directory")->required();
    sweep_cmd->add_option("-k,--key", sweep_key, "config key to vary")->required();
    sweep_cmd->add_option("-v,--values", sweep_values, "values (comma separated)")->required()->delimiter(',');
    sweep_cmd->add_option("-s,--set", sweep_overrides, "override a config key (key=value); repeatable");
    sweep_cmd->add_flag("-f,--force", sweep_force, "rerun every stage");

    // Report.
    std::vector<std::string> report_dirs;
    std::string report_csv;
    auto* report_cmd = app.add_subcommand("report", "comparison table over completed runs");
    report_cmd->add_option("runs", report_dirs, "run directories, in row order")->required()->check(CLI::ExistingDirectory);
    report_cmd->add_option("--csv", report_csv, "also write the table as CSV to this file");

    // Classifier filter.
    std::string filter_run, filter_method = "icl";
    double filter_threshold = 0.5;
    std::size_t filter_min_kept = 5;
    auto* filter_cmd = app.add_subcommand("filter", "filter a run's instantiations with the backend classifier");
    filter_cmd->add_option("-r,--run-dir", filter_run, "run directory")->required()->check(CLI::ExistingDirectory);
    filter_cmd->add_option("-m,--method", filter_method, "instantiation method (icl or cgmh)");
    filter_cmd->add_option("-t,--threshold", filter_threshold, "minimum classifier probability")->check(CLI::Range(0.0, 1.0));
    filter_cmd->add_option("--min-kept", filter_min_kept, "kept instantiations needed in ensemble mode");

    // Evaluation service.
    std::string store_dir, host = "127.0.0.1", port_file;
    int port = 8080;
    auto* serve_cmd = app.add_subcommand("eval-serve", "serve the human-evaluation HTTP API");
    serve_cmd->add_option("--store", store_dir, "store directory")->required();
    serve_cmd->add_option("--host", host, "bind address");
    serve_cmd->add_option("--port", port, "port (0 = any free port)");
    serve_cmd->add_option("--port-file", port_file, "write the bound port here once listening");

    auto* eval_cmd = app.add_subcommand("eval", "drive the evaluation store without the HTTP server");
    eval_cmd->require_subcommand(1);
    std::string session_id, annotator, item_id, responses, protocol = "head_to_head", eval_run, method_a, method_b,
                                                          inst_method = "icl", report_out;
    std::size_t n_items = evalsvc::default_n_items;
    std::uint64_t eval_seed = 0;
    std::vector<std::string> annotators;
    bool partial = false;
    auto* create_cmd = eval_cmd->add_subcommand("create", "create a session from a run directory");
    create_cmd->add_option("--store", store_dir, "store directory")->required();
    create_cmd->add_option("--run-dir", eval_run, "run directory holding records or instantiations")->required();
    create_cmd->add_option("--protocol", protocol, "head_to_head or instantiation_quality");
    create_cmd->add_option("--method-a", method_a, "first explanation method (head_to_head)");
    create_cmd->add_option("--method-b", method_b, "second explanation method (head_to_head)");
    create_cmd->add_option("--instantiations", inst_method, "instantiation method (instantiation_quality)");
    create_cmd->add_option("--n-items", n_items, "items per session");
    create_cmd->add_option("--seed", eval_seed, "sampling and shuffling seed");
    create_cmd->add_option("--annotators", annotators, "three annotator ids")->delimiter(',');
    create_cmd->add_option("--session-id", session_id, "explicit session id");
    auto* next_cmd = eval_cmd->add_subcommand("next", "print the next item for an annotator");
    auto* submit_cmd = eval_cmd->add_subcommand("submit", "record one annotator response");
    auto* ereport_cmd = eval_cmd->add_subcommand("report", "print a session report");
    for (auto* c : {next_cmd, submit_cmd, ereport_cmd}) {
        c->add_option("--store", store_dir, "store directory")->required();
        c->add_option("--session", session_id, "session id")->required();
    }
    for (auto* c : {next_cmd, submit_cmd}) c->add_option("--annotator", annotator, "annotator id")->required();
    submit_cmd->add_option("--item", item_id, "item id")->required();
    submit_cmd->add_option("--responses", responses, "responses as a JSON object")->required();
    ereport_cmd->add_flag("--partial", partial, "allow a report over an incomplete session");
    ereport_cmd->add_option("--out", report_out, "write the report JSON to this file");

    // Gateway server over the mock backend.
    std::uint64_t mock_seed = 0;
    bool no_classifier = false;
    auto* gw_cmd = app.add_subcommand("gateway-serve", "serve the mock backend over the gateway wire protocol");
    gw_cmd->add_option("--mock-seed", mock_seed, "mock backend seed");
    gw_cmd->add_flag("--no-classifier", no_classifier, "answer classify with capability_unavailable");
    gw_cmd->add_option("--host", host, "bind address");
    gw_cmd->add_option("--port", port, "port (0 = any free port)");
    gw_cmd->add_option("--port-file", port_file, "write the bound port here once listening");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? exit_ok : exit_validation;
    }

    try {
        for (auto [cmd, last] : stage_apps) {
            if (!cmd->parsed()) continue;
            pipeline::Runner runner(load_config(run_args.config, run_args.overrides), run_args.run_dir,
                                    pipeline::RunOptions{run_args.force, std::nullopt});
            runner.run_until(last);
            if (last == Stage::score) std::cout << io::read_file(fs::path(run_args.run_dir) / "report.txt");
            return exit_ok;
        }
        if (sweep_cmd->parsed()) {
            const auto rows = pipeline::sweep(load_config(sweep_config, sweep_overrides), sweep_key, sweep_values,
                                              sweep_out, sweep_force);
            std::cout << pipeline::table_text(rows);
            return exit_ok;
        }
        if (report_cmd->parsed()) {
            std::vector<std::pair<std::string, fs::path>> runs;
            for (const auto& d : report_dirs) runs.emplace_back(d, d);
            const auto rows = pipeline::collect_rows(runs);
            if (!report_csv.empty()) io::write_file_atomic(report_csv, pipeline::table_csv(rows));
            std::cout << pipeline::table_text(rows);
            return exit_ok;
        }
        if (filter_cmd->parsed()) {
            const auto settings = pipeline::validate(config_from_manifest(filter_run));
            const auto im = parse_instantiation_method(filter_method);
            const auto insts = read_instantiations(fs::path(filter_run) / pipeline::instantiation_file(im));
            std::vector<evalsvc::InstantiationSet> sets;
            for (const auto& h : insts) {
                if (sets.empty() || sets.back().source_id != h.source_id) sets.push_back({h.source_id, {}});
                sets.back().instantiations.push_back(h);
            }
            Gateway gw(pipeline::make_backend(settings), settings.gateway_options);
            const auto result = evalsvc::filter_by_classifier(sets, settings.task, gw, filter_threshold, filter_min_kept);
            const auto out = fs::path(filter_run) / "filtered";
            fs::create_directories(out);
            std::vector<json> kept;
            for (const auto& s : result.sets) {
                for (const auto& h : s.instantiations) kept.push_back(to_json(h));
            }
            if (!result.skipped) io::write_jsonl(out / (filter_method + ".jsonl"), kept);
            io::write_file_atomic(out / (filter_method + ".summary.json"), evalsvc::to_json(result).dump(2) + "\n");
            print_json(evalsvc::to_json(result));
            return exit_ok;
        }
        if (serve_cmd->parsed()) {
            block_shutdown_signals();
            evalsvc::Store store(store_dir);
            evalsvc::Server server(store);
            const int bound = server.start(host, port);
            write_port_file(port_file, bound);
            std::cerr << "eval-serve listening on " << host << ":" << bound << "\n";
            wait_for_shutdown();
            server.stop();
            return exit_ok;
        }
        if (gw_cmd->parsed()) {
            block_shutdown_signals();
            GatewayServer server(std::make_shared<MockBackend>(MockOptions{mock_seed, !no_classifier}));
            const int bound = server.start(host, port);
            write_port_file(port_file, bound);
            std::cerr << "gateway-serve listening on " << host << ":" << bound << "\n";
            wait_for_shutdown();
            server.stop();
            return exit_ok;
        }
        if (eval_cmd->parsed()) {
            evalsvc::Store store(store_dir);
            if (create_cmd->parsed()) {
                evalsvc::SessionSpec spec;
                if (!session_id.empty()) spec.session_id = session_id;
                spec.n_items = n_items;
                spec.seed = eval_seed;
                if (!annotators.empty()) spec.annotators = annotators;
                const fs::path run(eval_run);
                const auto pairs = load_pairs_jsonl(run / "pairs.jsonl");
                evalsvc::Session s;
                if (evalsvc::parse_protocol(protocol) == evalsvc::Protocol::head_to_head) {
                    if (method_a.empty() || method_b.empty()) throw ValidationError("--method-a and --method-b are required");
                    spec.method_a = method_a;
                    spec.method_b = method_b;
                    const auto a = read_records(run / pipeline::records_file(explain::parse_method(method_a)));
                    const auto b = read_records(run / pipeline::records_file(explain::parse_method(method_b)));
                    s = evalsvc::create_head_to_head(spec, evalsvc::align_records(pairs, a, b));
                } else {
                    spec.method_a = inst_method;
                    const auto insts = read_instantiations(run / pipeline::instantiation_file(parse_instantiation_method(inst_method)));
                    s = evalsvc::create_quality(spec, evalsvc::quality_sources(pairs, insts));
                }
                const auto& created = store.create(std::move(s));
                print_json(json{{"session_id", created.session_id},
                                {"n_items", created.items.size()},
                                {"annotators", created.annotators},
                                {"pending", created.items.size() * created.annotators.size()}});
            } else if (next_cmd->parsed()) {
                print_json(store.next(session_id, annotator));
            } else if (submit_cmd->parsed()) {
                print_json(store.submit(session_id, annotator, item_id, json::parse(responses)));
            } else if (ereport_cmd->parsed()) {
                const auto rep = evalsvc::to_json(store.report(session_id, partial));
                if (!report_out.empty()) io::write_file_atomic(report_out, rep.dump(2) + "\n");
                print_json(rep);
            }
            return exit_ok;
        }
    } catch (const pipeline::StageFailure& e) {
        std::cerr << "error: " << e.what() << "\n";
        return e.validation() ? exit_validation : exit_runtime;
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_validation;
    } catch (const ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_validation;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "error: malformed JSON: " << e.what() << "\n";
        return exit_validation;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_runtime;
    }
    return exit_ok;
}
