#include <CLI11.hpp>

#include <frontstab/pipeline.hpp>

namespace {

using namespace frontstab;

struct Args {
    std::string config, out, stages = "all";
    std::optional<std::int64_t> seed;
};

RunConfig load_config(const Args& a) {
    RunConfig c;
    if (!a.config.empty()) c = parse_config(read_file(a.config));
    if (!a.out.empty()) c.run.out = a.out;
    if (a.seed) c.run.seed = *a.seed;
    validate_config(c);
    return c;
}

int print_report(const RunManifest& m, const fs::path& dir) {
    auto rep = emit_report(m, dir);
    std::string stage;
    for (const auto& r : rep.rows) {
        if (r.stage != stage) {
            stage = r.stage;
            std::cout << stage << "\n";
        }
        std::cout << "  " << std::left << std::setw(8) << r.status << r.check;
        if (std::isfinite(r.value)) std::cout << "  value=" << r.value << " limit=" << r.limit;
        std::cout << "\n";
    }
    std::cout << "manifest " << m.manifest_hash << "\n"
              << rep.failures << " failing check(s), " << rep.not_run << " stage(s) not run\n";
    return rep.failures ? 1 : 0;
}

int run_stages(const Args& a, const std::set<std::string>& stages) {
    auto cfg = load_config(a);
    PipelineOptions opt;
    opt.verbose = true;
    try {
        auto m = run_pipeline(cfg, stages, opt);
        return print_report(m, cfg.run.out);
    } catch (const Error& e) {
        if (e.kind() != ErrorKind::stage_failure) throw;
        std::cerr << "frontstab: " << e.what() << "\n";
        if (auto m = read_manifest(cfg.run.out)) print_report(*m, cfg.run.out);
        return 1;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Stability diagnostics for travelling fronts of reaction-diffusion systems"};
    app.set_version_flag("--version", std::string(FRONTSTAB_VERSION));
    app.require_subcommand(1);
    Args a;
    auto global = [&](CLI::App* sub) {
        sub->add_option("--config", a.config, "INI run configuration")->check(CLI::ExistingFile);
        sub->add_option("--out", a.out, "output directory (overrides run.out)");
        sub->add_option("--seed", a.seed, "random seed (overrides run.seed)");
    };
    std::map<std::string, CLI::App*> subs;
    for (const auto& s : stage_names()) {
        subs[s] = app.add_subcommand(s, "run the " + s + " stage and its prerequisites");
        global(subs[s]);
    }
    auto* all = app.add_subcommand("all", "run a list of stages");
    global(all);
    all->add_option("--stages", a.stages, "comma-separated stages, or 'all'");
    auto* report = app.add_subcommand("report", "summarize an existing run directory");
    global(report);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (all->parsed()) return run_stages(a, parse_stage_list(a.stages));
        if (report->parsed()) {
            auto cfg = load_config(a);
            auto m = read_manifest(cfg.run.out);
            if (!m) {
                std::cerr << "frontstab: no readable manifest in " << cfg.run.out << "\n";
                return 2;
            }
            if (!verify_manifest(*m, cfg.run.out)) {
                std::cerr << "frontstab: manifest checksums do not match the artifacts in " << cfg.run.out << "\n";
                print_report(*m, cfg.run.out);
                return 1;
            }
            return print_report(*m, cfg.run.out);
        }
        for (const auto& [name, sub] : subs)
            if (sub->parsed()) return run_stages(a, {name});
    } catch (const Error& e) {
        std::cerr << "frontstab: " << to_string(e.kind()) << ": " << e.what() << "\n";
        bool usage = e.kind() == ErrorKind::parse_error || e.kind() == ErrorKind::validation_error ||
                     e.kind() == ErrorKind::invalid_argument;
        return usage ? 2 : 1;
    } catch (const std::exception& e) {
        std::cerr << "frontstab: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
