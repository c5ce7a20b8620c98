#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace frontstab {

/// Failure categories reported by the library.
enum class ErrorKind {
    invalid_argument,
    assumption_violated,
    no_connection,
    resolution_insufficient,
    normalization_degenerate,
    branch_degenerate,
    overflow_uncontrolled,
    degenerate_basis,
    singular_system,
    quadrature_unconverged,
    instability,
    shift_non_invertible,
    division_degenerate,
    parse_error,
    validation_error,
    stage_failure,
    template_violated,
};

inline std::string_view to_string(ErrorKind k) {
    switch (k) {
        case ErrorKind::invalid_argument: return "invalid-argument";
        case ErrorKind::assumption_violated: return "assumption-violated";
        case ErrorKind::no_connection: return "no-connection";
        case ErrorKind::resolution_insufficient: return "resolution-insufficient";
        case ErrorKind::normalization_degenerate: return "normalization-degenerate";
        case ErrorKind::branch_degenerate: return "branch-degenerate";
        case ErrorKind::overflow_uncontrolled: return "overflow-uncontrolled";
        case ErrorKind::degenerate_basis: return "degenerate-basis";
        case ErrorKind::singular_system: return "singular-system";
        case ErrorKind::quadrature_unconverged: return "quadrature-unconverged";
        case ErrorKind::instability: return "instability";
        case ErrorKind::shift_non_invertible: return "shift-non-invertible";
        case ErrorKind::division_degenerate: return "division-degenerate";
        case ErrorKind::parse_error: return "parse-error";
        case ErrorKind::validation_error: return "validation-error";
        case ErrorKind::stage_failure: return "stage-failure";
        case ErrorKind::template_violated: return "template-violated";
    }
    return "unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

    [[nodiscard]] ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, ErrorKind kind, const std::string& what) {
    if (!cond) fail(kind, what);
}

}  // namespace frontstab
