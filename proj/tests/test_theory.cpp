#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "backdoorlab/penalty.hpp"
#include "backdoorlab/theory.hpp"

using namespace backdoorlab;
namespace fs = std::filesystem;

namespace {

const std::uint64_t kSeed = 0;  // the CLI default; acceptance runs the same suite

const std::vector<CheckReport>& suite() {
    static const std::vector<CheckReport> reports = run_all_checks(kSeed, ToleranceSpec{});
    return reports;
}

}  // namespace

TEST_CASE("tolerance specs reject non-positive entries") {
    ToleranceSpec tol;
    CHECK_NOTHROW(tol.validate());
    tol.rel_tol = 0.0;
    CHECK_THROWS_AS(tol.validate(), std::invalid_argument);
    tol = ToleranceSpec{};
    tol.fd_tol = -1e-6;
    CHECK_THROWS_AS(tol.validate(), std::invalid_argument);
    tol = ToleranceSpec{};
    tol.first_order_tol = 0.0;
    CHECK_THROWS_AS(tol.validate(), std::invalid_argument);
    tol = ToleranceSpec{};
    tol.ulps = 0;
    CHECK_THROWS_AS(tol.validate(), std::invalid_argument);
    CHECK_THROWS_AS(run_all_checks(kSeed, tol), std::invalid_argument);
}

TEST_CASE("the full check suite passes at the default seed") {
    const auto& reports = suite();
    REQUIRE(reports.size() == 10);
    const char* expected[] = {
        "barrier_derivatives",
        "margin_suppression_independent",
        "margin_suppression_softmax",
        "margin_shift_lemma",
        "probability_drift",
        "rma_induction",
        "decoupling",
        "clean_dormancy",
        "placement_invariance",
        "sufficiency",
    };
    for (std::size_t i = 0; i < reports.size(); ++i) {
        CAPTURE(reports[i].name);
        CAPTURE(reports[i].max_error);
        CAPTURE(reports[i].detail);
        CHECK(reports[i].name == expected[i]);
        CHECK(reports[i].pass);
    }
    CHECK(all_passed(reports));

    // The conjunction row aggregates its three components' worst error.
    const auto& suff = reports.back();
    double worst = 0.0;
    for (const auto& r : reports)
        if (r.name == "margin_suppression_independent" || r.name == "decoupling" ||
            r.name == "placement_invariance")
            worst = std::max(worst, r.max_error);
    CHECK(suff.max_error == worst);
    CHECK(suff.scenario_seed == kSeed);
}

TEST_CASE("a broken analytic derivative is caught by the barrier check") {
    ToleranceSpec tol;
    const CheckReport good = check_barrier_derivatives(kSeed, tol, nullptr);
    CHECK(good.pass);
    CHECK(good.max_error < tol.fd_tol);
    CHECK(good.tolerance == tol.fd_tol);

    // Same hook as the production derivative: still passes.
    const CheckReport same =
        check_barrier_derivatives(kSeed, tol, [](double s, double t) { return barrier_grad(s, t); });
    CHECK(same.pass);
    CHECK(same.max_error == good.max_error);

    // Sign-flipped derivative: the finite-difference comparison must fail.
    const CheckReport bad =
        check_barrier_derivatives(kSeed, tol, [](double s, double t) { return -barrier_grad(s, t); });
    CHECK(!bad.pass);
    CHECK(bad.max_error > tol.fd_tol);
    CHECK(!all_passed({good, bad}));
}

TEST_CASE("individual checks are deterministic for a fixed seed") {
    ToleranceSpec tol;
    const CheckReport a = check_margin_shift_lemma(123, tol);
    const CheckReport b = check_margin_shift_lemma(123, tol);
    CHECK(a.pass == b.pass);
    CHECK(a.max_error == b.max_error);
    const CheckReport c = check_margin_suppression_independent(7, tol);
    const CheckReport d = check_margin_suppression_independent(7, tol);
    CHECK(c.max_error == d.max_error);
    CHECK(c.pass);
}

TEST_CASE("the theory report serializes exactly five keys per check") {
    const auto& reports = suite();
    const fs::path path = fs::temp_directory_path() / "backdoorlab_tests" / "theory_report.json";
    write_theory_report(path.string(), reports);

    std::ifstream in(path);
    REQUIRE(in.good());
    const nlohmann::json arr = nlohmann::json::parse(in);
    REQUIRE(arr.is_array());
    REQUIRE(arr.size() == reports.size());
    for (std::size_t i = 0; i < reports.size(); ++i) {
        const auto& e = arr[i];
        CHECK(e.size() == 5);
        CHECK(e.at("name").get<std::string>() == reports[i].name);
        CHECK(e.at("pass").get<bool>() == reports[i].pass);
        CHECK(e.at("max_error").get<double>() == reports[i].max_error);
        CHECK(e.at("tolerance").get<double>() == reports[i].tolerance);
        CHECK(e.at("scenario_seed").get<std::uint64_t>() == reports[i].scenario_seed);
        CHECK(!e.contains("detail"));
    }
}
