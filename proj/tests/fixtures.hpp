#pragma once

#include <memory>

#include "frontstab/resolvent.hpp"

namespace frontstab::fixtures {

/// Bistable front on [-30, 30] with N = 3001 and its spectral data, built once per test binary.
struct BistableFront {
    ReactionSystem sys = bistable_system();
    FrontProfile p;
    LinearOperator op;
    SpectralData sd;
    std::unique_ptr<ModeIntegrator> mi;
};

inline const BistableFront& bistable_front() {
    static const BistableFront* f = [] {
        auto* out = new BistableFront;
        out->p = solve_profile(out->sys, Grid1D(-30, 30, 3001), {1e-8});
        out->op = assemble_linearization(out->sys, out->p);
        out->sd = check_spectral_assumption(out->op, out->p, end_state_spectrum(out->sys));
        out->mi = std::make_unique<ModeIntegrator>(out->sys, out->p);
        return out;
    }();
    return *f;
}

}  // namespace frontstab::fixtures
