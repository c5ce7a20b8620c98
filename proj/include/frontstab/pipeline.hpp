#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <set>

#include <openssl/evp.h>

#include <json.hpp>

#include "config.hpp"
#include "green.hpp"
#include "nonlinear.hpp"

#ifndef FRONTSTAB_VERSION
#define FRONTSTAB_VERSION "dev"
#endif

namespace frontstab {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

inline const std::vector<std::string>& stage_names() {
    static const std::vector<std::string> s{"profile", "spectrum", "resolvent", "green", "nonlinear"};
    return s;
}

/// Upstream stages whose data a stage consumes.
inline std::vector<std::string> stage_dependencies(const std::string& s) {
    if (s == "profile") return {};
    if (s == "spectrum") return {"profile"};
    if (s == "resolvent" || s == "green" || s == "nonlinear") return {"spectrum"};
    fail(ErrorKind::invalid_argument, "unknown stage '" + s + "'");
}

/// Comma-separated stage list; "all" expands to every stage.
inline std::set<std::string> parse_stage_list(const std::string& text) {
    std::set<std::string> out;
    std::stringstream in(text);
    std::string item;
    while (std::getline(in, item, ',')) {
        item = detail::trim(item);
        if (item.empty()) continue;
        if (item == "all") {
            out.insert(stage_names().begin(), stage_names().end());
            continue;
        }
        if (std::find(stage_names().begin(), stage_names().end(), item) == stage_names().end())
            fail(ErrorKind::validation_error, "stages: unknown stage '" + item + "'");
        out.insert(item);
    }
    require(!out.empty(), ErrorKind::validation_error, "stages: empty stage list");
    return out;
}

// ---------------------------------------------------------------------------
// Hashing and CSV

inline std::string sha256_hex(std::string_view data) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    require(EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) == 1, ErrorKind::stage_failure,
            "sha256 failed");
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned i = 0; i < len; ++i) {
        out += hex[md[i] >> 4];
        out += hex[md[i] & 15];
    }
    return out;
}

inline std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    require(static_cast<bool>(in), ErrorKind::stage_failure, "cannot read " + p.string());
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

inline std::string config_hash(const RunConfig& c) { return sha256_hex(serialize_config(c, false)); }

class CsvWriter {
public:
    CsvWriter(const fs::path& p, const std::vector<std::string>& header) : out_(p) {
        require(static_cast<bool>(out_), ErrorKind::stage_failure, "cannot write " + p.string());
        row(header);
    }
    void row(const std::vector<std::string>& cells) {
        for (std::size_t k = 0; k < cells.size(); ++k) out_ << (k ? "," : "") << cells[k];
        out_ << "\n";
    }
    void values(std::initializer_list<double> v) {
        std::vector<std::string> cells;
        for (double x : v) cells.push_back(num(x));
        row(cells);
    }
    static std::string num(double v) { return detail::format_double(v); }

private:
    std::ofstream out_;
};

/// Numeric CSV with a header row.
struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<double>> rows;
    [[nodiscard]] std::size_t column(const std::string& name) const {
        auto it = std::find(header.begin(), header.end(), name);
        require(it != header.end(), ErrorKind::stage_failure, "missing CSV column '" + name + "'");
        return static_cast<std::size_t>(it - header.begin());
    }
    [[nodiscard]] std::vector<double> col(const std::string& name) const {
        std::size_t c = column(name);
        std::vector<double> out;
        for (const auto& r : rows) out.push_back(r[c]);
        return out;
    }
};

inline CsvTable read_csv(const fs::path& p) {
    CsvTable t;
    std::istringstream in(read_file(p));
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        std::vector<std::string> cells;
        std::stringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) cells.push_back(cell);
        if (first) {
            t.header = cells;
            first = false;
            continue;
        }
        std::vector<double> r;
        for (const auto& c : cells) r.push_back(std::strtod(c.c_str(), nullptr));
        require(r.size() == t.header.size(), ErrorKind::stage_failure, "ragged CSV row in " + p.string());
        t.rows.push_back(std::move(r));
    }
    return t;
}

// ---------------------------------------------------------------------------
// Manifest

struct CheckResult {
    std::string name;
    bool pass = false;
    double value = 0.0;
    double limit = 0.0;
    std::string relation;  ///< how value compares to limit when passing: "<", "<=", ">", ">="
};

inline CheckResult check_below(std::string name, double value, double limit) {
    return {std::move(name), value < limit, value, limit, "<"};
}
inline CheckResult check_above(std::string name, double value, double limit) {
    return {std::move(name), value > limit, value, limit, ">"};
}
inline CheckResult check_at_least(std::string name, double value, double limit) {
    return {std::move(name), value >= limit, value, limit, ">="};
}

struct Artifact {
    std::string file;
    std::string sha256;
};

struct StageRecord {
    std::string name;
    std::string key;
    std::string status;  ///< "pass", "fail" or "error"
    std::string error;
    bool cached = false;
    double seconds = 0.0;
    std::map<std::string, double> timings;  ///< wall-clock seconds of stage parts; not hashed
    std::map<std::string, double> metrics;
    std::vector<CheckResult> checks;
    std::vector<Artifact> artifacts;

    [[nodiscard]] double metric(const std::string& k) const {
        auto it = metrics.find(k);
        require(it != metrics.end(), ErrorKind::stage_failure, "stage " + name + " has no metric '" + k + "'");
        return it->second;
    }
    [[nodiscard]] const CheckResult* check(const std::string& k) const {
        for (const auto& c : checks)
            if (c.name == k) return &c;
        return nullptr;
    }
};

struct RunManifest {
    std::string version = FRONTSTAB_VERSION;
    std::string config_hash;
    std::int64_t seed = 0;
    std::vector<StageRecord> stages;
    std::string manifest_hash;

    [[nodiscard]] const StageRecord* stage(const std::string& n) const {
        for (const auto& s : stages)
            if (s.name == n) return &s;
        return nullptr;
    }
    [[nodiscard]] bool all_pass() const {
        for (const auto& s : stages)
            if (s.status != "pass") return false;
        return true;
    }
};

namespace detail {

inline json number_json(double v) { return std::isfinite(v) ? json(v) : json(format_double(v)); }

inline double json_number(const json& j) {
    if (j.is_number()) return j.get<double>();
    return std::strtod(j.get<std::string>().c_str(), nullptr);
}

/// Everything except timings, the cache flag and the hash itself.
inline json manifest_content(const RunManifest& m, bool with_volatile) {
    json j;
    j["software"] = "frontstab";
    j["version"] = m.version;
    j["config_hash"] = m.config_hash;
    j["seed"] = m.seed;
    json st = json::array();
    for (const auto& s : m.stages) {
        json e;
        e["name"] = s.name;
        e["key"] = s.key;
        e["status"] = s.status;
        if (!s.error.empty()) e["error"] = s.error;
        if (with_volatile) {
            e["cached"] = s.cached;
            e["seconds"] = s.seconds;
            json tm = json::object();
            for (const auto& [k, v] : s.timings) tm[k] = v;
            e["timings"] = tm;
        }
        json mt = json::object();
        for (const auto& [k, v] : s.metrics) mt[k] = number_json(v);
        e["metrics"] = mt;
        json cs = json::array();
        for (const auto& c : s.checks)
            cs.push_back({{"name", c.name}, {"pass", c.pass}, {"value", number_json(c.value)}, {"limit", number_json(c.limit)},
                          {"relation", c.relation}});
        e["checks"] = cs;
        json as = json::array();
        for (const auto& a : s.artifacts) as.push_back({{"file", a.file}, {"sha256", a.sha256}});
        e["artifacts"] = as;
        st.push_back(e);
    }
    j["stages"] = st;
    return j;
}

}  // namespace detail

inline std::string compute_manifest_hash(const RunManifest& m) {
    return sha256_hex(detail::manifest_content(m, false).dump());
}

inline json manifest_to_json(const RunManifest& m) {
    json j = detail::manifest_content(m, true);
    j["manifest_hash"] = m.manifest_hash;
    return j;
}

inline RunManifest manifest_from_json(const json& j) {
    RunManifest m;
    m.version = j.at("version").get<std::string>();
    m.config_hash = j.at("config_hash").get<std::string>();
    m.seed = j.at("seed").get<std::int64_t>();
    for (const auto& e : j.at("stages")) {
        StageRecord s;
        s.name = e.at("name").get<std::string>();
        s.key = e.at("key").get<std::string>();
        s.status = e.at("status").get<std::string>();
        if (e.contains("error")) s.error = e.at("error").get<std::string>();
        s.cached = e.value("cached", false);
        s.seconds = e.value("seconds", 0.0);
        if (e.contains("timings"))
            for (const auto& [k, v] : e.at("timings").items()) s.timings[k] = v.get<double>();
        for (const auto& [k, v] : e.at("metrics").items()) s.metrics[k] = detail::json_number(v);
        for (const auto& c : e.at("checks"))
            s.checks.push_back({c.at("name").get<std::string>(), c.at("pass").get<bool>(), detail::json_number(c.at("value")),
                                detail::json_number(c.at("limit")), c.at("relation").get<std::string>()});
        for (const auto& a : e.at("artifacts")) s.artifacts.push_back({a.at("file").get<std::string>(), a.at("sha256").get<std::string>()});
        m.stages.push_back(std::move(s));
    }
    m.manifest_hash = j.value("manifest_hash", "");
    return m;
}

inline void write_manifest(RunManifest& m, const fs::path& dir) {
    m.manifest_hash = compute_manifest_hash(m);
    std::ofstream out(dir / "manifest.json");
    require(static_cast<bool>(out), ErrorKind::stage_failure, "cannot write manifest in " + dir.string());
    out << manifest_to_json(m).dump(2) << "\n";
}

inline std::optional<RunManifest> read_manifest(const fs::path& dir) {
    fs::path p = dir / "manifest.json";
    if (!fs::exists(p)) return std::nullopt;
    try {
        return manifest_from_json(json::parse(read_file(p)));
    } catch (const std::exception&) {
        return std::nullopt;
    }
}

/// Every listed artifact exists and matches its checksum.
inline bool artifacts_intact(const StageRecord& s, const fs::path& dir) {
    for (const auto& a : s.artifacts) {
        fs::path p = dir / a.file;
        if (!fs::exists(p) || sha256_hex(read_file(p)) != a.sha256) return false;
    }
    return true;
}

inline bool verify_manifest(const RunManifest& m, const fs::path& dir) {
    if (m.manifest_hash != compute_manifest_hash(m)) return false;
    for (const auto& s : m.stages)
        if (!artifacts_intact(s, dir)) return false;
    return true;
}

// ---------------------------------------------------------------------------
// Stage state

struct PipelineState {
    RunConfig cfg;
    fs::path dir;
    ReactionSystem sys;
    std::optional<FrontProfile> profile;
    std::optional<SpectralData> spectral;
    std::map<std::string, StageRecord> records;
};

inline std::string stage_key(const RunConfig& c, const std::string& stage) {
    if (stage == "profile") return sha256_hex(serialize_sections(c, {"system", "profile"}));
    std::string up = stage_key(c, stage == "spectrum" ? "profile" : "spectrum");
    if (stage == "spectrum") return sha256_hex(up + serialize_sections(c, {"spectral"}));
    if (stage == "resolvent") return sha256_hex(up + serialize_sections(c, {"resolvent", "run"}));
    if (stage == "green") return sha256_hex(up + serialize_sections(c, {"contour", "green", "run"}));
    if (stage == "nonlinear") return sha256_hex(up + serialize_sections(c, {"orbital", "pointwise"}));
    fail(ErrorKind::invalid_argument, "unknown stage '" + stage + "'");
}

inline ReactionSystem make_system(const RunConfig& c) {
    require(c.system.name == "bistable", ErrorKind::validation_error, "system.name: unknown built-in system");
    return bistable_system(c.system.a);
}

class StageOutput {
public:
    StageOutput(const fs::path& dir) : dir_(dir) {}
    CsvWriter csv(const std::string& file, const std::vector<std::string>& header) {
        files_.push_back(file);
        return CsvWriter(dir_ / file, header);
    }
    void metric(const std::string& k, double v) { metrics_[k] = v; }
    void add(CheckResult c) { checks_.push_back(std::move(c)); }
    /// Seconds since the previous lap (or construction), recorded under k.
    void lap(const std::string& k) {
        auto now = std::chrono::steady_clock::now();
        timings_[k] = std::chrono::duration<double>(now - last_).count();
        last_ = now;
    }
    void finish(StageRecord& r) const {
        r.timings = timings_;
        r.metrics = metrics_;
        r.checks = checks_;
        r.artifacts.clear();
        for (const auto& f : files_) r.artifacts.push_back({f, sha256_hex(read_file(dir_ / f))});
        bool ok = true;
        for (const auto& c : checks_) ok = ok && c.pass;
        r.status = ok ? "pass" : "fail";
    }

private:
    fs::path dir_;
    std::vector<std::string> files_;
    std::map<std::string, double> metrics_;
    std::vector<CheckResult> checks_;
    std::map<std::string, double> timings_;
    std::chrono::steady_clock::time_point last_ = std::chrono::steady_clock::now();
};

// ---------------------------------------------------------------------------
// Stages

inline void profile_stage(PipelineState& st, StageOutput& out) {
    const auto& c = st.cfg.profile;
    Grid1D g(c.x_min, c.x_max, static_cast<std::size_t>(c.nodes));
    ProfileOptions po;
    po.tol = c.tol;
    po.anchor = c.anchor;
    po.stencil_order = c.stencil_order;
    auto p = solve_profile(st.sys, g, po);
    auto ends = end_state_spectrum(st.sys);
    auto slowest = [](const Eigen::VectorXcd& gamma) {
        double r = std::numeric_limits<double>::infinity();
        for (int k = 0; k < gamma.size(); ++k) r = std::min(r, gamma[k].real());
        return r;
    };
    const double em = slowest(ends.gamma_minus), ep = slowest(ends.gamma_plus);
    std::vector<std::string> header{"x"};
    for (int k = 0; k < p.n; ++k) header.push_back("u_bar_" + std::to_string(k));
    for (int k = 0; k < p.n; ++k) header.push_back("u_bar_prime_" + std::to_string(k));
    header.push_back("closed_form");
    auto w = out.csv("profile.csv", header);
    double linf = 0;
    const bool closed = st.cfg.system.name == "bistable" && st.cfg.system.a == 0.5;
    for (std::size_t i = 0; i < g.N; ++i) {
        std::vector<std::string> row{CsvWriter::num(g.x(i))};
        for (int k = 0; k < p.n; ++k) row.push_back(CsvWriter::num(p.u_bar[i * p.n + k]));
        for (int k = 0; k < p.n; ++k) row.push_back(CsvWriter::num(p.u_bar_prime[i * p.n + k]));
        double cf = closed ? 1.0 / (1.0 + std::exp((g.x(i) - c.anchor) / std::sqrt(2.0))) : NAN;
        if (closed) linf = std::max(linf, std::abs(p.u_bar[i] - cf));
        row.push_back(CsvWriter::num(cf));
        w.row(row);
    }
    out.metric("residual_sup", p.residual_sup);
    out.metric("tail_rate_minus", p.tail_rate_minus);
    out.metric("tail_rate_plus", p.tail_rate_plus);
    out.metric("expected_rate_minus", em);
    out.metric("expected_rate_plus", ep);
    out.metric("newton_iterations", p.newton_iterations);
    out.metric("speed", p.speed);
    if (closed) {
        out.metric("closed_form_linf", linf);
        out.add(check_below("closed_form_linf", linf, 1e-6));
    }
    out.add(check_below("residual_sup", p.residual_sup, 1e-8));
    out.add(check_below("tail_rate_minus_rel_error", std::abs(p.tail_rate_minus - em) / em, 0.02));
    out.add(check_below("tail_rate_plus_rel_error", std::abs(p.tail_rate_plus - ep) / ep, 0.02));
}

inline FrontProfile load_profile(const PipelineState& st, const StageRecord& r) {
    const auto& c = st.cfg.profile;
    auto t = read_csv(st.dir / "profile.csv");
    FrontProfile p;
    p.grid = Grid1D(c.x_min, c.x_max, static_cast<std::size_t>(c.nodes));
    p.n = st.sys.n;
    require(t.rows.size() == p.grid.N, ErrorKind::stage_failure, "profile.csv does not match the configured grid");
    p.u_bar.resize(p.grid.N * p.n);
    p.u_bar_prime.resize(p.grid.N * p.n);
    for (int k = 0; k < p.n; ++k) {
        auto u = t.col("u_bar_" + std::to_string(k)), d = t.col("u_bar_prime_" + std::to_string(k));
        for (std::size_t i = 0; i < p.grid.N; ++i) {
            p.u_bar[i * p.n + k] = u[i];
            p.u_bar_prime[i * p.n + k] = d[i];
        }
    }
    p.u_minus = st.sys.u_minus;
    p.u_plus = st.sys.u_plus;
    p.residual_sup = r.metric("residual_sup");
    p.tail_rate_minus = r.metric("tail_rate_minus");
    p.tail_rate_plus = r.metric("tail_rate_plus");
    p.speed = r.metric("speed");
    p.newton_iterations = static_cast<int>(r.metric("newton_iterations"));
    p.stencil_order = c.stencil_order;
    return p;
}

inline void spectrum_stage(PipelineState& st, StageOutput& out) {
    const auto& p = *st.profile;
    auto op = assemble_linearization(st.sys, p);
    SpectralOptions so;
    so.tol = st.cfg.spectral.tol;
    so.eta0_factor = st.cfg.spectral.eta0_factor;
    so.cluster_tol = st.cfg.spectral.cluster_tol;
    auto sd = check_spectral_assumption(op, p, end_state_spectrum(st.sys), so);
    {
        auto w = out.csv("spectrum.csv", {"index", "re", "im", "participation", "discrete"});
        for (int k = 0; k < sd.eigenvalues.size(); ++k)
            w.values({double(k), sd.eigenvalues[k].real(), sd.eigenvalues[k].imag(), sd.participation[k],
                      sd.discrete[k] ? 1.0 : 0.0});
    }
    {
        std::vector<std::string> header{"x"};
        for (int k = 0; k < p.n; ++k) header.push_back("phi_" + std::to_string(k));
        for (int k = 0; k < p.n; ++k) header.push_back("psi_tilde_" + std::to_string(k));
        auto w = out.csv("zero_modes.csv", header);
        for (std::size_t i = 0; i < p.grid.N; ++i) {
            std::vector<std::string> row{CsvWriter::num(p.grid.x(i))};
            for (int k = 0; k < p.n; ++k) row.push_back(CsvWriter::num(sd.phi[i * p.n + k]));
            for (int k = 0; k < p.n; ++k) row.push_back(CsvWriter::num(sd.psi_tilde[i * p.n + k]));
            w.row(row);
        }
    }
    out.metric("zero_eig_re", sd.zero_eig.real());
    out.metric("zero_eig_im", sd.zero_eig.imag());
    out.metric("zero_index", sd.zero_index);
    out.metric("eta", sd.eta);
    out.metric("eta_prime", sd.eta_prime);
    out.metric("eta0", sd.eta0);
    out.metric("lambda1", sd.lambda1);
    out.metric("essential_edge", sd.essential_edge);
    out.metric("cosine_similarity", sd.cosine_similarity);
    out.metric("biorthogonality", sd.biorthogonality);
    out.add(check_below("zero_eigenvalue_abs", std::abs(sd.zero_eig), 1e-6));
    out.add(check_above("zero_mode_cosine", sd.cosine_similarity, 0.999));
    out.add(check_above("gap_eta", sd.eta, st.cfg.system.name == "bistable" ? 0.3 : 0.0));
    out.add(check_below("biorthogonality", sd.biorthogonality, 1e-6));
}

inline SpectralData load_spectral(const PipelineState& st, const StageRecord& r) {
    const auto& p = *st.profile;
    SpectralData sd;
    auto s = read_csv(st.dir / "spectrum.csv");
    auto re = s.col("re"), im = s.col("im"), part = s.col("participation"), disc = s.col("discrete");
    sd.eigenvalues.resize(static_cast<Eigen::Index>(re.size()));
    for (std::size_t k = 0; k < re.size(); ++k) {
        sd.eigenvalues[static_cast<Eigen::Index>(k)] = cd(re[k], im[k]);
        sd.participation.push_back(part[k]);
        sd.discrete.push_back(disc[k] != 0.0);
    }
    auto z = read_csv(st.dir / "zero_modes.csv");
    sd.phi.resize(p.grid.N * p.n);
    sd.psi_tilde.resize(p.grid.N * p.n);
    for (int k = 0; k < p.n; ++k) {
        auto ph = z.col("phi_" + std::to_string(k)), ps = z.col("psi_tilde_" + std::to_string(k));
        for (std::size_t i = 0; i < p.grid.N; ++i) {
            sd.phi[i * p.n + k] = ph[i];
            sd.psi_tilde[i * p.n + k] = ps[i];
        }
    }
    sd.zero_eig = cd(r.metric("zero_eig_re"), r.metric("zero_eig_im"));
    sd.zero_index = static_cast<int>(r.metric("zero_index"));
    sd.eta = r.metric("eta");
    sd.eta_prime = r.metric("eta_prime");
    sd.eta0 = r.metric("eta0");
    sd.lambda1 = r.metric("lambda1");
    sd.essential_edge = r.metric("essential_edge");
    sd.cosine_similarity = r.metric("cosine_similarity");
    sd.biorthogonality = r.metric("biorthogonality");
    return sd;
}

/// Contour sample points: the corner pair of the contour and three points along its rays.
inline std::vector<cd> resolvent_check_points(double eta) {
    const double kappa = eta / 4;
    return {cd(-eta / 2, kappa), cd(-eta / 2, -kappa), cd(-eta / 2 - 1.0, kappa + 1.0), cd(-eta / 2 - 4.0, -kappa - 4.0),
            cd(-eta / 2 - 20.0, kappa + 20.0)};
}

inline void resolvent_stage(PipelineState& st, StageOutput& out) {
    const auto& p = *st.profile;
    const auto& sd = *st.spectral;
    const auto& g = p.grid;
    auto op = assemble_linearization(st.sys, p);
    ModeOptions mo;
    mo.renorm_every = st.cfg.resolvent.renorm_every;
    mo.substep_scale = st.cfg.resolvent.substep_scale;
    ModeIntegrator mi(st.sys, p, mo);
    std::mt19937_64 rng(static_cast<std::uint64_t>(st.cfg.run.seed));
    std::uniform_int_distribution<std::size_t> pick(g.N / 15, g.N - 1 - g.N / 15);
    const std::size_t lo = g.nearest(-15.0), hi = g.nearest(15.0);
    double worst_direct = 0, worst_jump = 0, worst_duality = 0, worst_conservation = 0;
    std::vector<ResolventAssembly> set;
    auto w = out.csv("resolvent_points.csv", {"re", "im", "direct_rel_error", "direct_abs_error", "jump_G", "jump_G_x", "jump_G_y",
                                              "jump_G_xy", "duality", "kramer", "conservation"});
    for (cd lambda : resolvent_check_points(sd.eta)) {
        auto ra = assemble_resolvent(mi.integrate(lambda));
        DirectResolventSolver direct(op, lambda);
        double err = 0, scale = 0;
        for (double y : {-10.0, 0.0, 6.0}) {
            std::size_t j = g.nearest(y);
            auto d = direct.solve(j);
            for (std::size_t i = lo; i <= hi; ++i) {
                scale = std::max(scale, std::abs(d.at(i)));
                if (i + 2 < j || i > j + 2) err = std::max(err, std::abs(ra.G(i, j)(0, 0) - d.at(i)));
            }
        }
        JumpResiduals jr;
        for (int k = 0; k < st.cfg.resolvent.jump_points; ++k) {
            auto r = jump_residuals(ra, pick(rng));
            jr.G = std::max(jr.G, r.G);
            jr.G_x = std::max(jr.G_x, r.G_x);
            jr.G_y = std::max(jr.G_y, r.G_y);
            jr.G_xy = std::max(jr.G_xy, r.G_xy);
        }
        double cons = conservation_drift(ra);
        w.values({lambda.real(), lambda.imag(), err / scale, err, jr.G, jr.G_x, jr.G_y, jr.G_xy, ra.modes->duality_deviation,
                  ra.kramer_deviation, cons});
        worst_direct = std::max(worst_direct, err / scale);
        worst_jump = std::max(worst_jump, jr.max());
        worst_duality = std::max({worst_duality, ra.modes->duality_deviation, ra.kramer_deviation});
        worst_conservation = std::max(worst_conservation, cons);
        set.push_back(std::move(ra));
    }
    auto bound = verify_resolvent_bound(set, p, sd.psi_tilde, sd.eta_prime);
    set.clear();

    // f = -u on a line segment: G_lambda(x, y) = -e^{-sqrt(lambda + 1)|x - y|} / (2 sqrt(lambda + 1))
    auto lin = linear_system(1.0);
    auto rest = rest_state_profile(lin, Grid1D(-20, 20, 2001), p.stencil_order);
    ModeIntegrator lmi(lin, rest, mo);
    double worst_constant = 0;
    auto wc = out.csv("resolvent_constant.csv", {"re", "im", "max_abs_error"});
    for (cd lambda : {cd(0.0), cd(0.5, 1.0), cd(-0.5, 0.3), cd(-3.0, 2.0)}) {
        auto ra = assemble_resolvent(lmi.integrate(lambda));
        const auto& lg = ra.grid();
        cd mu = std::sqrt(lambda + 1.0);
        double err = 0;
        for (double y : {-6.0, 0.0, 6.0}) {
            std::size_t j = lg.nearest(y);
            for (std::size_t i = lg.nearest(-10.0); i <= lg.nearest(10.0); ++i) {
                cd exact = std::exp(-mu * std::abs(lg.x(i) - lg.x(j))) / (2.0 * mu);
                err = std::max(err, std::abs(-ra.G(i, j)(0, 0) - exact));
            }
        }
        wc.values({lambda.real(), lambda.imag(), err});
        worst_constant = std::max(worst_constant, err);
    }
    out.metric("direct_rel_error", worst_direct);
    out.metric("jump_max", worst_jump);
    out.metric("duality_deviation", worst_duality);
    out.metric("conservation_drift", worst_conservation);
    out.metric("constant_coefficient_error", worst_constant);
    out.metric("bound_C", bound.C);
    out.metric("bound_measured_tail_rate", bound.measured_tail_rate);
    out.metric("bound_expected_tail_rate", bound.expected_tail_rate);
    out.add(check_below("mode_vs_direct_rel_error", worst_direct, 1e-4));
    out.add(check_below("jump_identities", worst_jump, 1e-6));
    out.add(check_below("constant_coefficient_error", worst_constant, 1e-4));
    out.add(check_below("duality_deviation", worst_duality, 1e-8));
    out.add({"bound_constant_finite", bound.pass && std::isfinite(bound.C), bound.C, INFINITY, "<"});
}

inline const std::vector<std::string>& bound_template_ids() {
    static const std::vector<std::string> s{"tilde_G", "tilde_G_y", "tilde_H", "tilde_H_y", "e_bounds", "e_t_bounds", "e_tilde_t"};
    return s;
}

inline const std::vector<std::string>& bound_fit_columns() {
    static const std::vector<std::string> s{"id", "C", "C1", "C2", "C0", "M", "eta0", "sup_ratio", "samples",
                                            "refined_change", "refined_ratio", "stable", "pass"};
    return s;
}

inline std::vector<std::string> bound_fit_row(const BoundFit& f) {
    using N = CsvWriter;
    return {f.id, N::num(f.C), N::num(f.C1), N::num(f.C2), N::num(f.C0), N::num(f.M), N::num(f.eta0), N::num(f.sup_ratio),
            std::to_string(f.samples), N::num(f.refined_change), N::num(f.refined_ratio), f.stable ? "1" : "0", f.pass ? "1" : "0"};
}

inline void green_stage(PipelineState& st, StageOutput& out) {
    const auto& c = st.cfg;
    const auto& p = *st.profile;
    const auto& sd = *st.spectral;
    const auto& g = p.grid;
    ModeIntegrator mi(st.sys, p);
    auto pole = pole_part(p, sd);
    auto contour = [&](double eta, double t_min) {
        auto s = make_contour(eta, t_min, c.contour.tol, c.contour.kappa);
        s.min_level = c.contour.min_level;
        s.max_level = c.contour.max_level;
        return s;
    };
    GreenContour gc_late(mi, pole, contour(sd.eta, 0.5));
    EvolveOptions eo;
    eo.dt = c.green.oracle_dt;

    // contour quadrature against the evolved delta on a 5 x 3 x 3 box
    std::vector<double> box_t{0.5, 2.0, 5.0};
    std::vector<std::size_t> box_x, box_y;
    for (double x : {-2.0, -1.0, 0.0, 1.0, 2.0}) box_x.push_back(g.nearest(x));
    for (double y : {-1.0, 0.0, 1.5}) box_y.push_back(g.nearest(y));
    auto ks = gc_late.kernel(box_x, box_y, box_t);
    double box_diff = 0, box_mag = 0;
    {
        auto w = out.csv("green_box.csv", {"t", "x", "y", "contour", "evolution"});
        for (std::size_t b = 0; b < box_y.size(); ++b) {
            auto ev = green_evolve(st.sys, p, box_y[b], box_t, 0.05, 0, eo);
            for (std::size_t k = 0; k < box_t.size(); ++k)
                for (std::size_t a = 0; a < box_x.size(); ++a) {
                    double cv = ks.G[ks.index(k, a, b)], e = ev.G[k][box_x[a] * p.n];
                    box_diff = std::max(box_diff, std::abs(cv - e));
                    box_mag = std::max(box_mag, std::abs(e));
                    w.values({box_t[k], g.x(box_x[a]), g.x(box_y[b]), cv, e});
                }
        }
    }

    // constant-coefficient kernel (4 pi t)^{-1/2} e^{-(x-y)^2/(4t) - t}
    double const_err = 0;
    {
        auto lin = linear_system(1.0);
        auto rest = rest_state_profile(lin, Grid1D(-20, 20, 2001), p.stencil_order);
        ModeIntegrator lmi(lin, rest);
        GreenContour lgc(lmi, no_pole(1), contour(1.0, 0.5));
        const auto& lg = rest.grid;
        std::vector<std::size_t> xi, yj{lg.nearest(0.0), lg.nearest(1.5)};
        for (double x = -6; x <= 6 + 1e-12; x += 0.5) xi.push_back(lg.nearest(x));
        std::vector<double> ts{0.5, 1.0, 3.0};
        auto s = lgc.kernel(xi, yj, ts);
        auto w = out.csv("green_constant.csv", {"t", "x", "y", "contour", "exact"});
        for (std::size_t k = 0; k < ts.size(); ++k)
            for (std::size_t a = 0; a < xi.size(); ++a)
                for (std::size_t b = 0; b < yj.size(); ++b) {
                    double r = lg.x(xi[a]) - lg.x(yj[b]), t = ts[k];
                    double exact = std::exp(-r * r / (4 * t) - t) / std::sqrt(4 * std::numbers::pi * t);
                    double v = s.G[s.index(k, a, b)];
                    const_err = std::max(const_err, std::abs(v - exact));
                    w.values({t, lg.x(xi[a]), lg.x(yj[b]), v, exact});
                }
    }

    // e^{Lt} u_bar' = u_bar'
    double trans_err = 0;
    {
        auto ap = gc_late.apply(p.u_bar_prime, box_t);
        const double ref = discrete_lp_norm(p.component(0, true), g.h(), INFINITY);
        auto w = out.csv("green_translation.csv", {"t", "rel_error"});
        for (std::size_t k = 0; k < box_t.size(); ++k) {
            double e = 0;
            for (std::size_t q = 0; q < g.N * p.n; ++q) e = std::max(e, std::abs(ap.values[k * g.N * p.n + q] - p.u_bar_prime[q]));
            w.values({box_t[k], e / ref});
            trans_err = std::max(trans_err, e / ref);
        }
    }

    out.lap("reconstruction");

    // pointwise bound suite on the sample box and its doubling
    GreenContour gc(mi, pole, contour(sd.eta, c.contour.t_min));
    SampleBox box;
    box.x_half = c.green.x_half;
    box.dx = c.green.dx;
    box.y_half = c.green.y_half;
    box.dy = c.green.dy;
    box.t_lo = c.green.t_lo;
    box.t_hi = c.green.t_hi;
    box.t_per_decade = c.green.t_per_decade;
    const SampleBox big = box.doubled();
    const auto big_x = big.x_nodes(g), big_y = big.y_nodes(g);
    const auto big_t = big.times();
    auto s = gc.kernel(big_x, big_y, big_t, true);
    auto d = decompose(s, p, pole);
    {
        auto w = out.csv("green_samples.csv", {"t", "x", "y", "G", "G_y", "E", "G_tilde", "G_tilde_y", "F", "H_tilde", "H_tilde_y"});
        for (std::size_t k = 0; k < s.t.size(); ++k)
            for (std::size_t a = 0; a < s.xi.size(); ++a)
                for (std::size_t b = 0; b < s.yj.size(); ++b) {
                    std::size_t q = s.index(k, a, b);
                    w.values({s.t[k], g.x(s.xi[a]), g.x(s.yj[b]), s.G[q], s.G_y[q], d.E[q], d.G_tilde[q], d.G_tilde_y[q], d.F[q],
                              d.H_tilde[q], d.H_tilde_y[q]});
                }
    }
    const double tol = c.contour.tol;
    std::map<std::string, std::vector<BoundSample>> samples{
        {"tilde_G", resolved_samples(kernel_bound_samples(s, p, d.G_tilde), tol)},
        {"tilde_G_y", resolved_samples(kernel_bound_samples(s, p, d.G_tilde_y), tol)},
        {"tilde_H", resolved_samples(kernel_bound_samples(s, p, d.H_tilde), tol)},
        {"tilde_H_y", resolved_samples(kernel_bound_samples(s, p, d.H_tilde_y), tol)},
        {"e_bounds", phase_kernel_samples(pole, g, big_y, big_t, false)},
        {"e_t_bounds", phase_kernel_samples(pole, g, big_y, big_t, true)},
        {"e_tilde_t", e_tilde_t_samples(pole, g, big_x, big_y, big_t)},
    };
    {
        auto wf = out.csv("bound_fits.csv", bound_fit_columns());
        auto wr = out.csv("bound_ratios.csv", {"template", "t", "x", "y", "q", "bound"});
        for (std::size_t id = 0; id < bound_template_ids().size(); ++id) {
            const auto& name = bound_template_ids()[id];
            auto ts = template_spec(name);
            const auto& sf = samples.at(name);
            auto sb = restrict_samples(sf, box);
            auto fb = fit_pointwise_bound(ts, sb, sd.eta0);
            auto ff = fit_pointwise_bound(ts, sf, sd.eta0);
            check_refinement(ts, fb, ff, sf);
            wf.row(bound_fit_row(fb));
            for (const auto& b : sb) wr.values({double(id), b.t, b.x, b.y, b.q, template_value(ts, fb, b)});
            out.metric("bound." + name + ".size", template_size(ts, fb));
            out.add({"bound." + name, fb.pass, fb.refined_change, 0.1, "<"});
        }
    }

    out.lap("bound_suite");

    // short-time Gaussian shape
    {
        std::vector<std::size_t> xi;
        for (double x = -8; x <= 8 + 1e-12; x += 0.1) xi.push_back(g.nearest(x));
        const double t0 = std::max(c.contour.t_min, 0.1);
        std::vector<double> ts{t0, 2 * t0, 4 * t0, 7 * t0, 10 * t0};
        auto ns = gc.kernel(xi, {g.nearest(0.0)}, ts);
        auto na = nash_aronson_check(ns, p);
        auto w = out.csv("nash_aronson.csv", {"t", "slope", "r2"});
        for (std::size_t k = 0; k < na.t.size(); ++k) w.values({na.t[k], na.slope[k], na.r2[k]});
        out.metric("nash_aronson_min_r2", na.min_r2);
        out.add({"nash_aronson_r2", na.pass, na.min_r2, 0.99, ">"});
    }

    out.lap("nash_aronson");

    // L^p operator decay
    {
        auto lp = lp_kernel_checks(gc_late, p, sd, {0.5, 1.0, 2.0, 3.0, 4.0, 6.0, 8.0}, {1.0, 2.0, INFINITY},
                                   static_cast<unsigned>(c.run.seed));
        auto w = out.csv("lp_checks.csv", {"kernel", "h", "p", "measured_rate", "template_rate", "t_exponent", "pass"});
        for (const auto& ch : lp.checks) {
            w.row({ch.kernel, ch.h_name, CsvWriter::num(ch.p), CsvWriter::num(ch.measured_rate), CsvWriter::num(ch.template_rate),
                   CsvWriter::num(ch.t_exponent), ch.pass ? "1" : "0"});
            std::string pn = std::isinf(ch.p) ? "inf" : CsvWriter::num(ch.p);
            out.add(check_at_least("lp." + ch.kernel + "." + ch.h_name + ".p" + pn, ch.measured_rate, 0.9 * ch.template_rate));
        }
        out.metric("lp_zero_input_max", lp.zero_input_max);
        out.metric("lp_u_bar_prime_residual", lp.u_bar_prime_residual);
        out.add({"lp.zero_input", lp.zero_input_max == 0.0, lp.zero_input_max, 0.0, "<="});
        out.add(check_below("lp.u_bar_prime_residual", lp.u_bar_prime_residual, 1e-3));
    }

    out.lap("lp_checks");
    out.metric("box_relative_error", box_diff / box_mag);
    out.metric("constant_coefficient_error", const_err);
    out.metric("translation_mode_error", trans_err);
    out.metric("kernel_imag_max", std::max(ks.imag_max, s.imag_max));
    out.add(check_below("box_relative_error", box_diff / box_mag, 1e-3));
    out.add(check_below("constant_coefficient_error", const_err, 1e-4));
    out.add(check_below("translation_mode_error", trans_err, 1e-3));
}

inline ExperimentSpec orbital_experiment(const OrbitalConfig& o, const std::string& family, double amplitude) {
    ExperimentSpec e;
    e.family = perturbation_family(family);
    e.amplitude = amplitude;
    e.pde.T_end = o.T_end;
    e.pde.dt = o.dt;
    e.pde.snapshot_dt = o.snapshot_dt;
    e.field = false;
    return e;
}

inline void write_phase_csv(StageOutput& out, const std::string& file, const NonlinearRun& run) {
    auto w = out.csv(file, {"t", "alpha", "alpha_dot", "alpha_fit", "u_l1", "u_l2", "u_inf", "zeta", "zeta1", "zeta2"});
    const auto& ph = run.phase;
    const auto& z = run.zeta;
    auto at = [](const std::vector<double>& v, std::size_t k) { return k < v.size() ? v[k] : NAN; };
    for (std::size_t k = 0; k < ph.t.size(); ++k)
        w.values({ph.t[k], ph.alpha[k], ph.alpha_dot[k], at(run.fit.alpha, k), ph.u_l1[k], ph.u_l2[k], ph.u_inf[k], at(z.zeta, k),
                  at(z.zeta1, k), at(z.zeta2, k)});
}

inline void orbital_metrics(StageOutput& out, const std::string& prefix, const OrbitalDecayReport& r, const NonlinearRun& run) {
    out.metric(prefix + ".E0", run.E0);
    out.metric(prefix + ".rate_l1", r.rate_l1);
    out.metric(prefix + ".rate_l2", r.rate_l2);
    out.metric(prefix + ".rate_inf", r.rate_inf);
    out.metric(prefix + ".alpha_inf", r.alpha_inf);
    out.metric(prefix + ".alpha_tail_rate", r.alpha_tail_rate);
    out.metric(prefix + ".alpha_dot_rate", r.alpha_dot_rate);
    out.metric(prefix + ".C_alpha_dot", r.C_alpha_dot);
    out.metric(prefix + ".C_uniform", r.C_uniform);
    out.metric(prefix + ".sup_zeta", r.sup_zeta);
    out.metric(prefix + ".alpha_dot_check", run.phase.alpha_dot_check);
    out.metric(prefix + ".fit_warning", run.fit.warning ? 1.0 : 0.0);
}

inline const std::vector<std::string>& field_fit_columns() {
    static const std::vector<std::string> s{"name", "C", "M", "sup_ratio", "size", "C_doubled", "M_doubled", "refined_change",
                                            "refined_ratio", "samples", "stable", "pass"};
    return s;
}

inline void nonlinear_stage(PipelineState& st, StageOutput& out) {
    const auto& c = st.cfg;
    const auto& p = *st.profile;
    const auto& sd = *st.spectral;
    const double eta0 = sd.eta0;

    auto orb = run_nonlinear(st.sys, p, sd, orbital_experiment(c.orbital, c.orbital.family, c.orbital.amplitude));
    auto orb_r = verify_orbital_decay(orb, p);
    write_phase_csv(out, "orbital_phase.csv", orb);
    orbital_metrics(out, "orbital", orb_r, orb);
    out.lap("orbital");
    auto half = run_nonlinear(st.sys, p, sd, orbital_experiment(c.orbital, c.orbital.family, c.orbital.amplitude / 2));
    auto half_r = verify_orbital_decay(half, p);
    write_phase_csv(out, "orbital_half_phase.csv", half);
    orbital_metrics(out, "orbital_half", half_r, half);
    out.lap("orbital_half");
    auto tr = run_nonlinear(st.sys, p, sd, orbital_experiment(c.orbital, "translate", c.orbital.translate_shift));
    auto tr_r = verify_orbital_decay(tr, p);
    write_phase_csv(out, "translation_phase.csv", tr);
    orbital_metrics(out, "translation", tr_r, tr);

    out.add(check_at_least("orbital.rate_inf", orb_r.rate_inf, eta0));
    out.add(check_at_least("orbital.rate_l2", orb_r.rate_l2, eta0));
    out.add(check_at_least("orbital.alpha_tail_rate", orb_r.alpha_tail_rate, eta0));
    const double shift = c.orbital.translate_shift;
    out.add(check_below("translation.alpha_inf_rel_error", std::abs(tr_r.alpha_inf - shift) / shift, 0.05));
    const double response = orb_r.sup_zeta / half_r.sup_zeta;
    out.metric("linear_response_ratio", response);
    out.add(check_below("linear_response.zeta_ratio_deviation", std::abs(response / 2 - 1), 0.15));

    out.lap("translation");

    ExperimentSpec pe;
    pe.family = perturbation_family(c.pointwise.family);
    pe.amplitude = c.pointwise.amplitude;
    pe.M = c.pointwise.M;
    pe.K = c.pointwise.K;
    pe.pde.T_end = c.pointwise.T_end;
    pe.pde.dt = c.pointwise.dt;
    pe.pde.snapshot_dt = c.pointwise.snapshot_dt;
    pe.field = true;
    pe.field_options.stride = static_cast<std::size_t>(c.pointwise.stride);
    auto pw = run_nonlinear(st.sys, p, sd, pe);
    write_phase_csv(out, "pointwise_phase.csv", pw);
    const auto& f = *pw.field;
    {
        auto w = out.csv("pointwise_field.csv", {"t", "x", "alpha", "alpha_x", "v"});
        const std::size_t every = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(1.0 / c.pointwise.snapshot_dt)));
        for (std::size_t k = 0; k < f.t.size(); k += every)
            for (std::size_t i = 0; i < f.grid.N; ++i)
                w.values({f.t[k], f.grid.x(i), f.alpha[k][i], f.alpha_x[k][i], f.v[k][i * f.n]});
    }
    auto pg = verify_pointwise_gaussian(pw);
    {
        auto w = out.csv("field_fits.csv", field_fit_columns());
        for (const auto* b : {&pg.v, &pg.alpha, &pg.alpha_x}) {
            using N = CsvWriter;
            w.row({b->name, N::num(b->C), N::num(b->M), N::num(b->sup_ratio), N::num(b->size), N::num(b->C_doubled),
                   N::num(b->M_doubled), N::num(b->refined_change), N::num(b->refined_ratio), std::to_string(b->samples),
                   b->stable ? "1" : "0", b->pass ? "1" : "0"});
        }
    }
    {
        auto w = out.csv("alpha_x_argmax.csv", {"t", "x"});
        for (std::size_t k = 0; k < pg.argmax_t.size(); ++k) w.values({pg.argmax_t[k], pg.argmax_x[k]});
    }
    auto damp = damping_check(pw, c.pointwise.K);
    {
        auto w = out.csv("damping.csv", {"t", "lhs", "rhs"});
        for (std::size_t k = 0; k < damp.t.size(); ++k) w.values({damp.t[k], damp.lhs[k], damp.rhs[k]});
    }
    auto rc = residual_constants(f);
    out.metric("pointwise.E0", pw.E0);
    out.metric("pointwise.alpha_inf", alpha_limit(pw.phase));
    out.metric("pointwise.max_abs_alpha_x", f.max_abs_alpha_x);
    out.metric("pointwise.C_Q", rc.C_Q);
    out.metric("pointwise.C_S", rc.C_S);
    out.metric("pointwise.C_T", rc.C_T);
    out.metric("damping.theta", damp.theta);
    out.metric("damping.C", damp.C);
    out.metric("damping.C_half", damp.C_half);
    out.add({"pointwise.v_template", pg.v.pass, pg.v.refined_change, 0.1, "<"});
    out.add({"pointwise.alpha_template", pg.alpha.pass && std::isfinite(pg.alpha.C), pg.alpha.C, INFINITY, "<"});
    out.add({"pointwise.alpha_x_template", pg.alpha_x.pass && std::isfinite(pg.alpha_x.C), pg.alpha_x.C, INFINITY, "<"});
    out.add({"pointwise.alpha_x_argmax_localized", pg.localized, static_cast<double>(pg.argmax_t.size()), 0.0, ">"});
    out.add({"damping", damp.pass, damp.change, 0.1, "<"});
    out.lap("pointwise");
}

// ---------------------------------------------------------------------------
// Orchestration

using StageFn = void (*)(PipelineState&, StageOutput&);

inline StageFn stage_function(const std::string& s) {
    if (s == "profile") return profile_stage;
    if (s == "spectrum") return spectrum_stage;
    if (s == "resolvent") return resolvent_stage;
    if (s == "green") return green_stage;
    return nonlinear_stage;
}

/// Requested stages plus their upstream closure, in pipeline order.
inline std::vector<std::string> stage_closure(const std::set<std::string>& requested) {
    std::set<std::string> need = requested;
    for (bool grew = true; grew;) {
        grew = false;
        for (const auto& s : std::set<std::string>(need))
            for (const auto& d : stage_dependencies(s)) grew = need.insert(d).second || grew;
    }
    std::vector<std::string> out;
    for (const auto& s : stage_names())
        if (need.count(s)) out.push_back(s);
    return out;
}

struct PipelineOptions {
    bool verbose = false;
};

/// Runs the stage closure into cfg.run.out, reusing stages whose cache key and artifacts match. Writes the manifest
/// after every stage; a stage that throws aborts with stage_failure after its partial manifest is written.
inline RunManifest run_pipeline(const RunConfig& cfg, const std::set<std::string>& requested, const PipelineOptions& opt = {}) {
    validate_config(cfg);
    PipelineState st;
    st.cfg = cfg;
    st.dir = cfg.run.out;
    fs::create_directories(st.dir);
    st.sys = make_system(cfg);
    auto previous = read_manifest(st.dir);
    RunManifest m;
    m.config_hash = config_hash(cfg);
    m.seed = cfg.run.seed;
    const auto order = stage_closure(requested);
    auto needed_later = [&](const std::string& s, std::size_t from) {
        for (std::size_t k = from; k < order.size(); ++k)
            for (const auto& d : stage_dependencies(order[k]))
                if (d == s || (s == "profile" && d == "spectrum")) return true;
        return false;
    };
    for (std::size_t idx = 0; idx < order.size(); ++idx) {
        const auto& name = order[idx];
        StageRecord rec;
        rec.name = name;
        rec.key = stage_key(cfg, name);
        const StageRecord* old = previous ? previous->stage(name) : nullptr;
        if (old && old->key == rec.key && old->status != "error" && artifacts_intact(*old, st.dir)) {
            rec = *old;
            rec.cached = true;
            if (opt.verbose) std::cerr << "[" << name << "] cached\n";
        } else {
            if (opt.verbose) std::cerr << "[" << name << "] running\n";
            auto t0 = std::chrono::steady_clock::now();
            try {
                StageOutput out(st.dir);
                stage_function(name)(st, out);
                out.finish(rec);
            } catch (const std::exception& e) {
                rec.status = "error";
                rec.error = e.what();
            }
            rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        }
        m.stages.push_back(rec);
        write_manifest(m, st.dir);
        if (rec.status == "error") fail(ErrorKind::stage_failure, "stage " + name + ": " + rec.error);
        if (name == "profile" && needed_later(name, idx + 1)) st.profile = load_profile(st, rec);
        if (name == "spectrum" && needed_later(name, idx + 1)) st.spectral = load_spectral(st, rec);
    }
    // earlier results for stages outside this run stay listed while their key still matches
    if (previous) {
        std::vector<StageRecord> merged;
        for (const auto& name : stage_names()) {
            if (const StageRecord* s = m.stage(name)) {
                merged.push_back(*s);
            } else if (const StageRecord* old = previous->stage(name);
                       old && old->key == stage_key(cfg, name) && old->status != "error" && artifacts_intact(*old, st.dir)) {
                merged.push_back(*old);
                merged.back().cached = true;
            }
        }
        m.stages = std::move(merged);
        write_manifest(m, st.dir);
    }
    return m;
}

// ---------------------------------------------------------------------------
// Report

struct ReportRow {
    std::string stage, check, status;
    double value = NAN, limit = NAN;
};

struct ReportSummary {
    std::vector<ReportRow> rows;
    std::vector<std::string> files;
    std::size_t failures = 0;
    std::size_t not_run = 0;
};

namespace detail {

inline const char* plot_green_script() {
    return R"PY(import sys
import numpy as np
import pandas as pd
import matplotlib.pyplot as plt

run = sys.argv[1] if len(sys.argv) > 1 else "."
s = pd.read_csv(f"{run}/green_samples.csv")
times = sorted(s.t.unique())
pick = [times[0], times[len(times) // 2], times[-1]]
fig, axes = plt.subplots(1, len(pick), figsize=(5 * len(pick), 4))
for ax, t in zip(axes, pick):
    d = s[s.t == t].pivot(index="y", columns="x", values="G_tilde")
    im = ax.pcolormesh(d.columns, d.index, np.log10(np.abs(d.values) + 1e-300), shading="auto", vmin=-12)
    ax.set_title(f"log10 |G_tilde|, t = {t:.3g}")
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    fig.colorbar(im, ax=ax)
fig.tight_layout()
fig.savefig(f"{run}/green_heatmap.png", dpi=120)

r = pd.read_csv(f"{run}/bound_ratios.csv")
names = ["tilde_G", "tilde_G_y", "tilde_H", "tilde_H_y", "e_bounds", "e_t_bounds", "e_tilde_t"]
fig, axes = plt.subplots(2, 4, figsize=(18, 8))
for k, ax in enumerate(axes.flat):
    if k >= len(names):
        ax.axis("off")
        continue
    d = r[r.template == k]
    ratio = d.q / d.bound.where(d.bound > 0)
    sc = ax.scatter(d.x - d.y, d.t, c=ratio, s=4, vmin=0, vmax=1)
    ax.set_yscale("log")
    ax.set_title(f"{names[k]}: q / bound")
    ax.set_xlabel("x - y")
    ax.set_ylabel("t")
    fig.colorbar(sc, ax=ax)
fig.tight_layout()
fig.savefig(f"{run}/bound_ratios.png", dpi=120)
)PY";
}

inline const char* plot_phase_script() {
    return R"PY(import sys
import numpy as np
import pandas as pd
import matplotlib.pyplot as plt

run = sys.argv[1] if len(sys.argv) > 1 else "."
fig, axes = plt.subplots(1, 3, figsize=(16, 4))
for name in ["orbital", "orbital_half", "translation", "pointwise"]:
    d = pd.read_csv(f"{run}/{name}_phase.csv")
    axes[0].plot(d.t, d.alpha, label=name)
    axes[1].semilogy(d.t, d.u_inf, label=f"{name} Linf")
    axes[1].semilogy(d.t, d.u_l2, "--", label=f"{name} L2")
    axes[2].semilogy(d.t, np.abs(d.alpha_dot) + 1e-300, label=name)
axes[0].set_title("alpha(t)")
axes[1].set_title("||u~ - u_bar(. - alpha)||")
axes[2].set_title("|alpha'(t)|")
for ax in axes:
    ax.set_xlabel("t")
    ax.legend(fontsize=7)
fig.tight_layout()
fig.savefig(f"{run}/phase_decay.png", dpi=120)

f = pd.read_csv(f"{run}/pointwise_field.csv")
fig, axes = plt.subplots(1, 2, figsize=(12, 4))
for t in sorted(f.t.unique())[::4]:
    d = f[f.t == t]
    axes[0].plot(d.x, d.alpha, label=f"t={t:g}")
    axes[1].plot(d.x, d.alpha_x)
axes[0].set_title("alpha~(x, t)")
axes[1].set_title("alpha~_x(x, t)")
axes[0].legend(fontsize=7)
fig.tight_layout()
fig.savefig(f"{run}/phase_field.png", dpi=120)
)PY";
}

}  // namespace detail

/// Writes the pass/fail matrix, constant tables, rate table, a JSON summary and plot scripts into dir.
inline ReportSummary emit_report(const RunManifest& m, const fs::path& dir) {
    ReportSummary rep;
    for (const auto& name : stage_names()) {
        const StageRecord* s = m.stage(name);
        if (!s) {
            rep.rows.push_back({name, "*", "not run"});
            ++rep.not_run;
            continue;
        }
        if (s->status == "error") {
            rep.rows.push_back({name, "stage", "FAIL"});
            ++rep.failures;
        }
        for (const auto& c : s->checks) {
            rep.rows.push_back({name, c.name, c.pass ? "PASS" : "FAIL", c.value, c.limit});
            if (!c.pass) ++rep.failures;
        }
    }
    auto add_file = [&](const std::string& f) { rep.files.push_back(f); };
    {
        CsvWriter w(dir / "report_checks.csv", {"stage", "check", "status", "value", "limit"});
        for (const auto& r : rep.rows)
            w.row({r.stage, r.check, r.status, CsvWriter::num(r.value), CsvWriter::num(r.limit)});
        add_file("report_checks.csv");
    }
    {
        CsvWriter w(dir / "report_constants.csv", bound_fit_columns());
        const StageRecord* g = m.stage("green");
        bool have = g && g->status != "error" && fs::exists(dir / "bound_fits.csv");
        if (have) {
            std::istringstream in(read_file(dir / "bound_fits.csv"));
            std::string line;
            std::getline(in, line);
            while (std::getline(in, line)) {
                std::vector<std::string> cells;
                std::stringstream ls(line);
                std::string c;
                while (std::getline(ls, c, ',')) cells.push_back(c);
                w.row(cells);
            }
        } else {
            for (const auto& id : bound_template_ids()) {
                std::vector<std::string> row{id};
                for (std::size_t k = 1; k < bound_fit_columns().size(); ++k) row.push_back("not run");
                w.row(row);
            }
        }
        add_file("report_constants.csv");
    }
    {
        CsvWriter w(dir / "report_field_constants.csv", field_fit_columns());
        const StageRecord* nl = m.stage("nonlinear");
        if (nl && nl->status != "error" && fs::exists(dir / "field_fits.csv")) {
            std::istringstream in(read_file(dir / "field_fits.csv"));
            std::string line;
            std::getline(in, line);
            while (std::getline(in, line)) {
                std::vector<std::string> cells;
                std::stringstream ls(line);
                std::string c;
                while (std::getline(ls, c, ',')) cells.push_back(c);
                w.row(cells);
            }
        } else {
            for (const char* id : {"v_gaussian", "alpha_errfn", "alpha_gaussians"}) {
                std::vector<std::string> row{id};
                for (std::size_t k = 1; k < field_fit_columns().size(); ++k) row.push_back("not run");
                w.row(row);
            }
        }
        add_file("report_field_constants.csv");
    }
    {
        CsvWriter w(dir / "report_rates.csv", {"source", "quantity", "rate", "eta0", "eta", "rate_over_eta0"});
        const StageRecord* sp = m.stage("spectrum");
        double eta0 = sp ? sp->metric("eta0") : NAN, eta = sp ? sp->metric("eta") : NAN;
        auto row = [&](const std::string& src, const std::string& q, double r) {
            w.row({src, q, CsvWriter::num(r), CsvWriter::num(eta0), CsvWriter::num(eta), CsvWriter::num(r / eta0)});
        };
        if (const StageRecord* nl = m.stage("nonlinear"); nl && nl->status != "error") {
            for (const char* pre : {"orbital", "orbital_half", "translation"})
                for (const char* q : {"rate_l1", "rate_l2", "rate_inf", "alpha_tail_rate", "alpha_dot_rate"})
                    row(std::string("nonlinear.") + pre, q, nl->metric(std::string(pre) + "." + q));
        } else {
            w.row({"nonlinear", "*", "not run", "", "", ""});
        }
        if (const StageRecord* g = m.stage("green"); g && g->status != "error" && fs::exists(dir / "lp_checks.csv")) {
            std::istringstream in(read_file(dir / "lp_checks.csv"));
            std::string line;
            std::getline(in, line);
            while (std::getline(in, line)) {
                std::vector<std::string> cells;
                std::stringstream ls(line);
                std::string c;
                while (std::getline(ls, c, ',')) cells.push_back(c);
                row("green.lp." + cells[0], cells[1] + ".p" + cells[2], std::strtod(cells[3].c_str(), nullptr));
            }
        } else {
            w.row({"green", "*", "not run", "", "", ""});
        }
        add_file("report_rates.csv");
    }
    {
        std::ofstream(dir / "plot_green.py") << detail::plot_green_script();
        std::ofstream(dir / "plot_phase.py") << detail::plot_phase_script();
        add_file("plot_green.py");
        add_file("plot_phase.py");
    }
    {
        json j;
        j["manifest_hash"] = m.manifest_hash;
        j["config_hash"] = m.config_hash;
        j["failures"] = rep.failures;
        j["not_run"] = rep.not_run;
        json rows = json::array();
        for (const auto& r : rep.rows)
            rows.push_back({{"stage", r.stage}, {"check", r.check}, {"status", r.status}, {"value", detail::number_json(r.value)},
                            {"limit", detail::number_json(r.limit)}});
        j["checks"] = rows;
        std::ofstream(dir / "report.json") << j.dump(2) << "\n";
        add_file("report.json");
    }
    return rep;
}

}  // namespace frontstab
