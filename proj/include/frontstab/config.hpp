#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <tuple>
#include <variant>
#include <vector>

#include "error.hpp"

namespace frontstab {

struct SystemConfig {
    std::string name = "bistable";
    double a = 0.5;
    bool operator==(const SystemConfig&) const = default;
};

struct ProfileConfig {
    double x_min = -30.0, x_max = 30.0;
    int nodes = 3001;
    double tol = 1e-8;
    double anchor = 0.0;
    int stencil_order = 4;
    bool operator==(const ProfileConfig&) const = default;
};

struct SpectralConfig {
    double eta0_factor = 0.9;
    double tol = 1e-6;
    double cluster_tol = 1e-3;
    bool operator==(const SpectralConfig&) const = default;
};

struct ResolventConfig {
    int renorm_every = 50;
    double substep_scale = 0.5;
    int jump_points = 10;  ///< random diagonal points per contour point
    bool operator==(const ResolventConfig&) const = default;
};

struct ContourConfig {
    double kappa = 0.0;  ///< 0 selects eta / 4
    double t_min = 0.1;
    double tol = 1e-8;
    int min_level = 1;
    int max_level = 4;
    bool operator==(const ContourConfig&) const = default;
};

struct GreenConfig {
    double x_half = 12.0, dx = 0.5;
    double y_half = 6.0, dy = 1.5;
    double t_lo = 0.1, t_hi = 10.0;
    int t_per_decade = 4;
    double oracle_dt = 1e-3;
    bool operator==(const GreenConfig&) const = default;
};

struct OrbitalConfig {
    std::string family = "sech";
    double amplitude = 0.01;
    double translate_shift = 0.05;
    double T_end = 40.0;
    double dt = 0.01;
    double snapshot_dt = 0.1;
    bool operator==(const OrbitalConfig&) const = default;
};

struct PointwiseConfig {
    std::string family = "gaussian";
    double amplitude = 0.005;
    double M = 8.0;
    double T_end = 20.0;
    double dt = 0.01;
    double snapshot_dt = 0.1;
    int stride = 5;
    int K = 1;
    bool operator==(const PointwiseConfig&) const = default;
};

struct RunSettings {
    std::string out = "frontstab_run";
    std::int64_t seed = 1;
    bool operator==(const RunSettings&) const = default;
};

struct RunConfig {
    SystemConfig system;
    ProfileConfig profile;
    SpectralConfig spectral;
    ResolventConfig resolvent;
    ContourConfig contour;
    GreenConfig green;
    OrbitalConfig orbital;
    PointwiseConfig pointwise;
    RunSettings run;
    bool operator==(const RunConfig&) const = default;
};

namespace detail {

using FieldRef = std::variant<double*, int*, std::int64_t*, std::string*>;

struct ConfigField {
    const char* section;
    const char* key;
    std::function<FieldRef(RunConfig&)> ref;
};

#define FRONTSTAB_FIELD(sec, key) \
    ConfigField { #sec, #key, [](RunConfig& c) -> FieldRef { return &c.sec.key; } }

inline const std::vector<ConfigField>& config_schema() {
    static const std::vector<ConfigField> s{
        FRONTSTAB_FIELD(system, name),          FRONTSTAB_FIELD(system, a),
        FRONTSTAB_FIELD(profile, x_min),        FRONTSTAB_FIELD(profile, x_max),
        FRONTSTAB_FIELD(profile, nodes),        FRONTSTAB_FIELD(profile, tol),
        FRONTSTAB_FIELD(profile, anchor),       FRONTSTAB_FIELD(profile, stencil_order),
        FRONTSTAB_FIELD(spectral, eta0_factor), FRONTSTAB_FIELD(spectral, tol),
        FRONTSTAB_FIELD(spectral, cluster_tol), FRONTSTAB_FIELD(resolvent, renorm_every),
        FRONTSTAB_FIELD(resolvent, substep_scale), FRONTSTAB_FIELD(resolvent, jump_points),
        FRONTSTAB_FIELD(contour, kappa),        FRONTSTAB_FIELD(contour, t_min),
        FRONTSTAB_FIELD(contour, tol),          FRONTSTAB_FIELD(contour, min_level),
        FRONTSTAB_FIELD(contour, max_level),    FRONTSTAB_FIELD(green, x_half),
        FRONTSTAB_FIELD(green, dx),             FRONTSTAB_FIELD(green, y_half),
        FRONTSTAB_FIELD(green, dy),             FRONTSTAB_FIELD(green, t_lo),
        FRONTSTAB_FIELD(green, t_hi),           FRONTSTAB_FIELD(green, t_per_decade),
        FRONTSTAB_FIELD(green, oracle_dt),      FRONTSTAB_FIELD(orbital, family),
        FRONTSTAB_FIELD(orbital, amplitude),    FRONTSTAB_FIELD(orbital, translate_shift),
        FRONTSTAB_FIELD(orbital, T_end),        FRONTSTAB_FIELD(orbital, dt),
        FRONTSTAB_FIELD(orbital, snapshot_dt),  FRONTSTAB_FIELD(pointwise, family),
        FRONTSTAB_FIELD(pointwise, amplitude),  FRONTSTAB_FIELD(pointwise, M),
        FRONTSTAB_FIELD(pointwise, T_end),      FRONTSTAB_FIELD(pointwise, dt),
        FRONTSTAB_FIELD(pointwise, snapshot_dt), FRONTSTAB_FIELD(pointwise, stride),
        FRONTSTAB_FIELD(pointwise, K),          FRONTSTAB_FIELD(run, out),
        FRONTSTAB_FIELD(run, seed),
    };
    return s;
}

#undef FRONTSTAB_FIELD

inline std::string trim(const std::string& s) {
    auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

[[noreturn]] inline void parse_fail(std::size_t line, std::size_t col, const std::string& msg) {
    fail(ErrorKind::parse_error, "line " + std::to_string(line) + ", column " + std::to_string(col) + ": " + msg);
}

template <class T>
bool parse_number(const std::string& s, T& out) {
    auto r = std::from_chars(s.data(), s.data() + s.size(), out);
    return r.ec == std::errc() && r.ptr == s.data() + s.size();
}

inline void validation(bool ok, const std::string& key, const std::string& msg) {
    if (!ok) fail(ErrorKind::validation_error, key + ": " + msg);
}

}  // namespace detail

/// Range and name checks; throws validation_error naming the key.
inline void validate_config(const RunConfig& c) {
    using detail::validation;
    validation(c.system.name == "bistable", "system.name", "unknown built-in system '" + c.system.name + "'");
    validation(c.system.a > 0 && c.system.a < 1, "system.a", "must lie in (0, 1)");
    validation(c.profile.x_min < c.profile.x_max, "profile.x_max", "must exceed profile.x_min");
    validation(c.profile.nodes >= 11, "profile.nodes", "must be at least 11");
    validation(c.profile.tol > 0, "profile.tol", "must be positive");
    validation(c.profile.anchor > c.profile.x_min && c.profile.anchor < c.profile.x_max, "profile.anchor",
               "must lie inside the domain");
    validation(c.profile.stencil_order == 2 || c.profile.stencil_order == 4, "profile.stencil_order", "must be 2 or 4");
    validation(c.spectral.eta0_factor > 0, "spectral.eta0_factor", "must be positive");
    validation(c.spectral.eta0_factor < 1, "spectral.eta0_factor", "must be < 1 so that eta0 < min(eta/4, eta')");
    validation(c.spectral.tol > 0, "spectral.tol", "must be positive");
    validation(c.spectral.cluster_tol > 0, "spectral.cluster_tol", "must be positive");
    validation(c.resolvent.renorm_every >= 1, "resolvent.renorm_every", "must be at least 1");
    validation(c.resolvent.substep_scale > 0, "resolvent.substep_scale", "must be positive");
    validation(c.resolvent.jump_points >= 1, "resolvent.jump_points", "must be at least 1");
    validation(c.contour.kappa >= 0, "contour.kappa", "must be non-negative");
    validation(c.contour.t_min > 0, "contour.t_min", "must be positive");
    validation(c.contour.tol > 0, "contour.tol", "must be positive");
    validation(c.contour.min_level >= 0, "contour.min_level", "must be non-negative");
    validation(c.contour.max_level >= c.contour.min_level && c.contour.max_level <= 8, "contour.max_level",
               "must lie in [contour.min_level, 8]");
    validation(c.green.x_half > 0, "green.x_half", "sample box must be nonempty");
    validation(c.green.y_half > 0, "green.y_half", "sample box must be nonempty");
    validation(c.green.dx > 0 && c.green.dx <= c.green.x_half, "green.dx", "must lie in (0, green.x_half]");
    validation(c.green.dy > 0 && c.green.dy <= c.green.y_half, "green.dy", "must lie in (0, green.y_half]");
    validation(c.green.t_lo >= c.contour.t_min, "green.t_lo", "must be at least contour.t_min");
    validation(c.green.t_hi > c.green.t_lo, "green.t_hi", "must exceed green.t_lo");
    validation(c.green.t_per_decade >= 1, "green.t_per_decade", "must be at least 1");
    validation(c.green.oracle_dt > 0, "green.oracle_dt", "must be positive");
    validation(2 * c.green.x_half <= c.profile.x_max && -2 * c.green.x_half >= c.profile.x_min, "green.x_half",
               "doubled sample box must fit in the profile domain");
    const std::vector<std::string> families{"gaussian", "sech", "translate", "derivative", "zero"};
    auto family_ok = [&](const std::string& f) { return std::find(families.begin(), families.end(), f) != families.end(); };
    for (auto [sec, fam, amp, T, dt, snap] :
         {std::tuple{"orbital", c.orbital.family, c.orbital.amplitude, c.orbital.T_end, c.orbital.dt, c.orbital.snapshot_dt},
          std::tuple{"pointwise", c.pointwise.family, c.pointwise.amplitude, c.pointwise.T_end, c.pointwise.dt,
                     c.pointwise.snapshot_dt}}) {
        const std::string s(sec);
        validation(family_ok(fam), s + ".family", "unknown perturbation family '" + fam + "'");
        validation(amp >= 0, s + ".amplitude", "must be non-negative");
        validation(T > 0, s + ".T_end", "must be positive");
        validation(dt > 0, s + ".dt", "must be positive");
        double ratio = snap / dt;
        validation(snap > 0 && std::abs(ratio - std::round(ratio)) < 1e-9 * ratio, s + ".snapshot_dt",
                   "must be a positive multiple of dt");
    }
    validation(c.orbital.translate_shift > 0, "orbital.translate_shift", "must be positive");
    validation(c.pointwise.M > 0, "pointwise.M", "must be positive");
    validation(c.pointwise.stride >= 1, "pointwise.stride", "must be at least 1");
    validation(c.pointwise.K >= 1, "pointwise.K", "must be at least 1");
    validation(!c.run.out.empty(), "run.out", "must be nonempty");
    validation(c.run.seed >= 0, "run.seed", "must be non-negative");
}

/// Parses "[section]" / "key = value" text. Keys before any section header are accepted when the key name is
/// unique across sections. Comments start with '#' or ';'.
inline RunConfig parse_config(const std::string& text) {
    RunConfig cfg;
    const auto& schema = detail::config_schema();
    std::map<std::string, std::size_t> seen;
    std::string section;
    std::istringstream in(text);
    std::string raw;
    std::size_t line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        std::string line = raw;
        if (auto c = line.find_first_of("#;"); c != std::string::npos) line.resize(c);
        const std::size_t lead = line.find_first_not_of(" \t\r");
        line = detail::trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') detail::parse_fail(line_no, lead + 1, "unterminated section header");
            section = detail::trim(line.substr(1, line.size() - 2));
            bool known = false;
            for (const auto& f : schema) known = known || section == f.section;
            if (!known) detail::parse_fail(line_no, lead + 2, "unknown section '" + section + "'");
            continue;
        }
        auto eq = line.find('=');
        if (eq == std::string::npos) detail::parse_fail(line_no, lead + 1, "expected 'key = value'");
        std::string key = detail::trim(line.substr(0, eq));
        std::string value = detail::trim(line.substr(eq + 1));
        const std::size_t value_col = raw.find(value.empty() ? "=" : value, raw.find('=')) + 1;
        if (key.empty()) detail::parse_fail(line_no, lead + 1, "missing key");
        const detail::ConfigField* field = nullptr;
        for (const auto& f : schema) {
            bool match = key == f.key && (section.empty() || section == f.section);
            if (!match) continue;
            if (field) detail::parse_fail(line_no, lead + 1, "key '" + key + "' is ambiguous outside a section");
            field = &f;
        }
        if (!field)
            detail::parse_fail(line_no, lead + 1,
                               "unknown key '" + key + "'" + (section.empty() ? "" : " in section [" + section + "]"));
        std::string full = std::string(field->section) + "." + field->key;
        if (seen.count(full)) detail::parse_fail(line_no, lead + 1, "duplicate key '" + full + "'");
        seen[full] = line_no;
        if (value.empty()) detail::parse_fail(line_no, value_col, "missing value for '" + full + "'");
        std::visit(
            [&](auto* p) {
                using T = std::remove_pointer_t<decltype(p)>;
                if constexpr (std::is_same_v<T, std::string>) {
                    *p = value;
                } else {
                    T v{};
                    if (!detail::parse_number(value, v))
                        detail::parse_fail(line_no, value_col, "invalid value '" + value + "' for '" + full + "'");
                    if constexpr (std::is_same_v<T, double>)
                        if (!std::isfinite(v))
                            detail::parse_fail(line_no, value_col, "non-finite value for '" + full + "'");
                    *p = v;
                }
            },
            field->ref(cfg));
    }
    validate_config(cfg);
    return cfg;
}

/// Canonical text: every section and key in schema order, doubles with round-trip precision.
inline std::string serialize_config(const RunConfig& c, bool include_out = true) {
    std::string out, section;
    RunConfig copy = c;
    for (const auto& f : detail::config_schema()) {
        if (!include_out && std::string(f.section) == "run" && std::string(f.key) == "out") continue;
        if (section != f.section) {
            if (!section.empty()) out += "\n";
            section = f.section;
            out += "[" + section + "]\n";
        }
        std::string v = std::visit(
            [](auto* p) -> std::string {
                using T = std::remove_pointer_t<decltype(p)>;
                if constexpr (std::is_same_v<T, std::string>) return *p;
                else if constexpr (std::is_same_v<T, double>) return detail::format_double(*p);
                else return std::to_string(*p);
            },
            f.ref(copy));
        out += std::string(f.key) + " = " + v + "\n";
    }
    return out;
}

/// Canonical text of the listed sections only (stage cache keys).
inline std::string serialize_sections(const RunConfig& c, const std::vector<std::string>& sections) {
    std::string all = serialize_config(c, false), out;
    std::istringstream in(all);
    std::string line;
    bool keep = false;
    while (std::getline(in, line)) {
        if (!line.empty() && line.front() == '[')
            keep = std::find(sections.begin(), sections.end(), line.substr(1, line.size() - 2)) != sections.end();
        if (keep) out += line + "\n";
    }
    return out;
}

}  // namespace frontstab
