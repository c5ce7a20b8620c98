// End-to-end acceptance run: the full pipeline on the default bistable configuration, then the caching and
// determinism checks. Prints one PASS/FAIL line per criterion; exit status 1 if any fails.

#include <unistd.h>

#include "frontstab/pipeline.hpp"

using namespace frontstab;

namespace {

struct Criterion {
    int id;
    std::string title;
    bool pass = true;
    std::vector<std::string> notes;

    void need(bool ok, const std::string& what) {
        pass = pass && ok;
        if (!ok) notes.push_back(what);
    }
};

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3g", v);
    return buf;
}

/// All named checks of a stage pass; a missing stage or check fails.
void require_checks(Criterion& c, const RunManifest& m, const std::string& stage, const std::vector<std::string>& names) {
    const StageRecord* s = m.stage(stage);
    if (!s) {
        c.need(false, stage + " stage missing");
        return;
    }
    if (s->status == "error") c.need(false, stage + " error: " + s->error);
    for (const auto& n : names) {
        const CheckResult* k = s->check(n);
        if (!k) {
            c.need(false, stage + "." + n + " not computed");
            continue;
        }
        c.need(k->pass, n + " = " + fmt(k->value) + " (limit " + k->relation + " " + fmt(k->limit) + ")");
    }
}

/// Checks of a stage whose names start with prefix; at least one must exist.
std::vector<std::string> checks_with_prefix(const RunManifest& m, const std::string& stage, const std::string& prefix) {
    std::vector<std::string> out;
    if (const StageRecord* s = m.stage(stage))
        for (const auto& k : s->checks)
            if (k.name.rfind(prefix, 0) == 0) out.push_back(k.name);
    return out;
}

void require_time(Criterion& c, const RunManifest& m, const std::string& stage, const std::string& part, double limit) {
    const StageRecord* s = m.stage(stage);
    if (!s) return;
    double t = part.empty() ? s->seconds : (s->timings.count(part) ? s->timings.at(part) : NAN);
    std::string what = stage + (part.empty() ? "" : "." + part) + " runtime " + fmt(t) + " s";
    c.need(t < limit, what + " (limit " + fmt(limit) + " s)");
    c.notes.push_back(what);
}

RunManifest run_or_partial(const RunConfig& cfg, const std::set<std::string>& stages) {
    try {
        return run_pipeline(cfg, stages, {true});
    } catch (const Error& e) {
        std::cerr << "pipeline: " << e.what() << "\n";
        auto m = read_manifest(cfg.run.out);
        return m ? *m : RunManifest{};
    }
}

json stage_json(const RunManifest& m, const std::string& name) {
    RunManifest one;
    if (const StageRecord* s = m.stage(name)) one.stages.push_back(*s);
    return detail::manifest_content(one, false)["stages"];
}

void caching_checks(Criterion& c, const RunConfig& cfg, const RunManifest& first, const fs::path& root) {
    if (!first.all_pass() && first.stages.size() < stage_names().size()) {
        c.need(false, "full run incomplete");
        return;
    }
    const auto all = parse_stage_list("all");

    // unchanged config: every stage is a cache hit and the manifest hash is identical
    auto again = run_or_partial(cfg, all);
    bool all_cached = again.stages.size() == stage_names().size();
    for (const auto& s : again.stages) all_cached = all_cached && s.cached;
    c.need(all_cached, "rerun with identical config was not a full cache hit");
    c.need(again.manifest_hash == first.manifest_hash, "rerun manifest hash differs");

    // a resolvent-only change recomputes that stage alone and changes the config hash
    RunConfig changed = cfg;
    changed.resolvent.jump_points += 1;
    auto m2 = run_or_partial(changed, all);
    c.need(m2.config_hash != first.config_hash, "config hash unchanged after a config edit");
    for (const auto& s : m2.stages) {
        bool expect_cached = s.name != "resolvent";
        c.need(s.cached == expect_cached, s.name + (expect_cached ? " recomputed" : " not recomputed") + " after a resolvent edit");
    }

    // reverting recomputes the resolvent and restores the original hash
    auto m3 = run_or_partial(cfg, all);
    c.need(m3.manifest_hash == first.manifest_hash, "manifest hash not restored after reverting the config");

    // a deleted artifact is regenerated bit-identically
    const fs::path dir = cfg.run.out;
    const std::string before = read_file(dir / "resolvent_points.csv");
    fs::remove(dir / "resolvent_points.csv");
    auto m4 = run_or_partial(cfg, all);
    const StageRecord* r = m4.stage("resolvent");
    c.need(r && !r->cached, "resolvent not recomputed after its artifact was deleted");
    c.need(fs::exists(dir / "resolvent_points.csv") && read_file(dir / "resolvent_points.csv") == before,
           "regenerated resolvent_points.csv differs");
    c.need(m4.manifest_hash == first.manifest_hash, "manifest hash differs after regeneration");

    // an independent directory reproduces the upstream stages exactly
    RunConfig other = cfg;
    other.run.out = (root / "independent").string();
    auto m5 = run_or_partial(other, {"spectrum"});
    for (const char* s : {"profile", "spectrum"})
        c.need(stage_json(m5, s) == stage_json(first, s), std::string(s) + " record differs in a fresh directory");
    c.need(m5.config_hash == first.config_hash, "config hash depends on the output directory");
    c.need(verify_manifest(m4, dir), "manifest checksums do not verify");
}

}  // namespace

int main(int argc, char** argv) {
    const bool keep = argc > 1;
    const fs::path root = keep ? fs::path(argv[1]) : fs::temp_directory_path() / ("frontstab_acceptance_" + std::to_string(::getpid()));
    fs::remove_all(root);
    RunConfig cfg;
    cfg.run.out = (root / "run").string();
    std::cout << "acceptance run in " << root << std::endl;

    auto m = run_or_partial(cfg, parse_stage_list("all"));

    std::vector<Criterion> cs;
    {
        Criterion c{1, "profile fidelity"};
        require_checks(c, m, "profile", {"closed_form_linf", "residual_sup", "tail_rate_minus_rel_error", "tail_rate_plus_rel_error"});
        require_time(c, m, "profile", "", 5);
        cs.push_back(c);
    }
    {
        Criterion c{2, "spectral gap and zero mode"};
        require_checks(c, m, "spectrum", {"zero_eigenvalue_abs", "zero_mode_cosine", "gap_eta", "biorthogonality"});
        require_time(c, m, "spectrum", "", 60);
        cs.push_back(c);
    }
    {
        Criterion c{3, "resolvent kernel"};
        require_checks(c, m, "resolvent", {"mode_vs_direct_rel_error", "jump_identities", "constant_coefficient_error"});
        require_time(c, m, "resolvent", "", 30);
        cs.push_back(c);
    }
    {
        Criterion c{4, "Green function reconstruction"};
        require_checks(c, m, "green", {"box_relative_error", "constant_coefficient_error", "translation_mode_error"});
        require_time(c, m, "green", "reconstruction", 300);
        cs.push_back(c);
    }
    {
        Criterion c{5, "two-term kernel bounds and phase-kernel bounds"};
        require_checks(c, m, "green", {"bound.tilde_G", "bound.tilde_G_y", "bound.e_bounds", "bound.e_t_bounds"});
        cs.push_back(c);
    }
    {
        Criterion c{6, "Gaussian kernel bounds and short-time shape"};
        require_checks(c, m, "green", {"bound.tilde_H", "bound.tilde_H_y", "bound.e_tilde_t", "nash_aronson_r2"});
        cs.push_back(c);
    }
    {
        Criterion c{7, "orbital decay, phase limit, linear response"};
        require_checks(c, m, "nonlinear",
                       {"orbital.rate_inf", "orbital.rate_l2", "orbital.alpha_tail_rate", "translation.alpha_inf_rel_error",
                        "linear_response.zeta_ratio_deviation"});
        for (const char* part : {"orbital", "orbital_half", "translation"}) require_time(c, m, "nonlinear", part, 300);
        cs.push_back(c);
    }
    {
        Criterion c{8, "pointwise Gaussian decay"};
        require_checks(c, m, "nonlinear", {"pointwise.v_template", "pointwise.alpha_template", "pointwise.alpha_x_argmax_localized"});
        require_time(c, m, "nonlinear", "pointwise", 600);
        cs.push_back(c);
    }
    {
        Criterion c{9, "L^p operator decay"};
        std::vector<std::string> names;
        for (const auto& n : checks_with_prefix(m, "green", "lp.tilde_G.")) names.push_back(n);
        for (const auto& n : checks_with_prefix(m, "green", "lp.tilde_H."))
            if (n.size() > 3 && n.substr(n.size() - 3) != ".p1") names.push_back(n);
        c.need(!names.empty(), "no L^p checks computed");
        require_checks(c, m, "green", names);
        c.notes.push_back(std::to_string(names.size()) + " rate checks");
        cs.push_back(c);
    }
    {
        Criterion c{10, "determinism and stage caching"};
        caching_checks(c, cfg, m, root);
        cs.push_back(c);
    }

    std::cout << "\n";
    bool ok = true;
    for (const auto& c : cs) {
        ok = ok && c.pass;
        std::cout << "criterion " << std::setw(2) << c.id << "  " << (c.pass ? "PASS" : "FAIL") << "  " << c.title;
        for (std::size_t k = 0; k < c.notes.size(); ++k) std::cout << (k ? "; " : "  [") << c.notes[k];
        std::cout << (c.notes.empty() ? "" : "]") << "\n";
    }
    std::cout << "manifest " << m.manifest_hash << "\n";
    if (!keep) fs::remove_all(root);
    return ok ? 0 : 1;
}
