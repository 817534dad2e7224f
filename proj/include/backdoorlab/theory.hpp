#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "backdoorlab/detector.hpp"

namespace backdoorlab {

/// Margin trajectory of one gated pair together with the closed-form drift
/// prediction evaluated along it.
struct FlowProbe {
    int pair_pred = 0;
    int pair_gt = 0;
    std::vector<double> times;
    std::vector<double> margins;
    std::vector<double> predicted_drift;
    double feature_norm_sq = 0.0;
};

struct ToleranceSpec {
    double rel_tol = 1e-4;          // flow vs closed form at dt = 1e-3
    double fd_tol = 1e-6;           // finite-difference gradient checks
    double first_order_tol = 1e-3;  // decoupling leakage, relative
    int ulps = 10;                  // margin-shift lemma

    void validate() const;  // throws std::invalid_argument unless all positive
};

struct CheckReport {
    std::string name;
    bool pass = false;
    double max_error = 0.0;
    double tolerance = 0.0;
    std::uint64_t scenario_seed = 0;
    std::string detail;  // human-readable notes; not part of the JSON contract
};

/// Hook for fault-injection tests: replaces the analytic first derivative the
/// check compares against finite differences.
using BarrierGradFn = std::function<double(double s, double tau)>;

CheckReport check_barrier_derivatives(std::uint64_t seed, const ToleranceSpec& tol,
                                      const BarrierGradFn& grad_fn = nullptr);
CheckReport check_margin_suppression_independent(std::uint64_t seed, const ToleranceSpec& tol);
CheckReport check_margin_suppression_softmax(std::uint64_t seed, const ToleranceSpec& tol);
CheckReport check_margin_shift_lemma(std::uint64_t seed, const ToleranceSpec& tol);
CheckReport check_probability_drift(std::uint64_t seed, const ToleranceSpec& tol);
CheckReport check_rma_induction(std::uint64_t seed, const ToleranceSpec& tol);
CheckReport check_decoupling(std::uint64_t seed, const ToleranceSpec& tol);
CheckReport check_clean_dormancy(std::uint64_t seed, const ToleranceSpec& tol);
CheckReport check_placement_invariance(std::uint64_t seed, const ToleranceSpec& tol);

/// All checks, run concurrently, in a fixed report order; appends the
/// `sufficiency` conjunction row (suppression + decoupling + placement).
std::vector<CheckReport> run_all_checks(std::uint64_t seed, const ToleranceSpec& tol);

bool all_passed(const std::vector<CheckReport>& reports);

/// JSON array of {name, pass, max_error, tolerance, scenario_seed}.
void write_theory_report(const std::string& path, const std::vector<CheckReport>& reports);

}  // namespace backdoorlab
