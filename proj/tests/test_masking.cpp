#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "trimae/masking.hpp"

using namespace trimae;

TEST_CASE("single modality always receives the full share") {
    Rng rng(1);
    for (int i = 0; i < 100; ++i) {
        auto s = sample_shares(1.0, 1, rng);
        REQUIRE(s.size() == 1);
        REQUIRE(s[0] == 1.0);
    }
}

TEST_CASE("shares sum to one and stay in range") {
    Rng rng(2);
    for (int i = 0; i < 1000; ++i) {
        auto s = sample_shares(0.7, 3, rng);
        double sum = 0.0;
        for (double v : s) {
            REQUIRE(v >= 0.0);
            REQUIRE(v <= 1.0);
            sum += v;
        }
        REQUIRE(sum == Catch::Approx(1.0).margin(1e-12));
    }
}

// analytic Dirichlet moments: mean 1/M, var = (1/M)(1-1/M)/(M*alpha+1)
static void check_moments(double alpha, std::size_t M, std::size_t draws,
                          std::uint64_t seed, double mean_tol, double std_tol) {
    Rng rng(seed);
    std::vector<double> firsts;
    firsts.reserve(draws);
    for (std::size_t i = 0; i < draws; ++i)
        firsts.push_back(sample_shares(alpha, M, rng)[0]);
    double m = 0.0;
    for (double v : firsts) m += v;
    m /= static_cast<double>(draws);
    double s2 = 0.0;
    for (double v : firsts) s2 += (v - m) * (v - m);
    const double sd = std::sqrt(s2 / static_cast<double>(draws - 1));
    const double mean_ref = 1.0 / static_cast<double>(M);
    const double sd_ref =
        std::sqrt(mean_ref * (1.0 - mean_ref) / (static_cast<double>(M) * alpha + 1.0));
    REQUIRE(std::abs(m - mean_ref) < mean_tol);
    REQUIRE(std::abs(sd - sd_ref) < std_tol);
}

TEST_CASE("Dirichlet moments match analytic values") {
    check_moments(1.0, 3, 10000, 3, 0.02, 0.01);    // sd_ref ~ 0.2357
    check_moments(100.0, 3, 10000, 4, 0.005, 0.005);  // sd_ref ~ 0.0272
}

TEST_CASE("alpha=100 concentrates more than alpha=1") {
    auto stddev = [](double alpha, std::uint64_t seed) {
        Rng rng(seed);
        double m = 0.0, s2 = 0.0;
        std::vector<double> v;
        for (int i = 0; i < 10000; ++i) v.push_back(sample_shares(alpha, 3, rng)[0]);
        for (double x : v) m += x;
        m /= v.size();
        for (double x : v) s2 += (x - m) * (x - m);
        return std::sqrt(s2 / (v.size() - 1.0));
    };
    REQUIRE(stddev(100.0, 5) < stddev(1.0, 6));
}

TEST_CASE("alpha=0.1 pushes mass to the simplex edges") {
    auto edge_rate = [](double alpha, std::uint64_t seed) {
        Rng rng(seed);
        int hits = 0;
        for (int i = 0; i < 10000; ++i) {
            auto s = sample_shares(alpha, 3, rng);
            if (*std::max_element(s.begin(), s.end()) > 0.9) ++hits;
        }
        return hits;
    };
    REQUIRE(edge_rate(0.1, 7) > edge_rate(1.0, 8));
}

TEST_CASE("largest-remainder allocation fixture") {
    auto counts = allocate_budget({0.5, 0.3, 0.2}, 10);
    REQUIRE(counts == std::vector<std::size_t>{5, 3, 2});
}

TEST_CASE("largest remainder assigns leftovers to the biggest fraction") {
    // wants 3.5, 3.5, 3.0 at budget 10: remainders 0.5, 0.5, 0.0
    auto counts = allocate_budget({0.35, 0.35, 0.30}, 10);
    REQUIRE(counts[0] + counts[1] + counts[2] == 10);
    REQUIRE(counts[2] == 3);
}

TEST_CASE("vertex share spills into other modalities when capped") {
    auto counts = allocate_budget({1.0, 0.0, 0.0}, 5, {4, 3, 3});
    REQUIRE(counts[0] == 4);
    REQUIRE(counts[0] + counts[1] + counts[2] == 5);
}

TEST_CASE("budget exceeding total capacity is an error") {
    REQUIRE_THROWS_AS(allocate_budget({0.5, 0.5}, 11, {5, 5}), CapacityError);
}

TEST_CASE("budget scaling rules") {
    MaskingConfig cfg;
    REQUIRE(cfg.budget(1, 256) == 49);
    REQUIRE(cfg.budget(3, 256) == 98);
    REQUIRE(cfg.budget(3, 64) == 25);  // round(98 * 64/256) = round(24.5)
    cfg.scale_rule = MaskingConfig::ScaleRule::Absolute;
    REQUIRE(cfg.budget(3, 64) == 98);
}

TEST_CASE("allocations always sum exactly to the budget") {
    MaskingConfig cfg;
    Rng rng(9);
    const std::vector<std::size_t> caps(3, 64);
    for (int i = 0; i < 10000; ++i) {
        TokenAllocation a = sample_allocation(cfg, caps, rng);
        std::size_t sum = 0;
        for (std::size_t c : a.counts) sum += c;
        REQUIRE(sum == cfg.budget(3, 64));
        REQUIRE(a.budget == sum);
        for (std::size_t m = 0; m < 3; ++m) {
            REQUIRE(a.indices[m].size() == a.counts[m]);
            for (std::size_t k = 1; k < a.indices[m].size(); ++k)
                REQUIRE(a.indices[m][k] > a.indices[m][k - 1]);  // sorted, unique
            if (!a.indices[m].empty()) REQUIRE(a.indices[m].back() < 64);
        }
    }
}

TEST_CASE("token selection is uniform (chi-square, 15 df)") {
    // 12000 single-index draws over 16 positions; chi2 crit at p=0.999 is 37.697
    Rng rng(10);
    std::vector<std::size_t> freq(16, 0);
    const int draws = 12000;
    for (int i = 0; i < draws; ++i) {
        TokenAllocation a = select_tokens({1}, {16}, rng);
        ++freq[a.indices[0][0]];
    }
    const double expect = draws / 16.0;
    double chi2 = 0.0;
    for (std::size_t f : freq) chi2 += (f - expect) * (f - expect) / expect;
    REQUIRE(chi2 < 37.697);
}

TEST_CASE("pair selection is uniform over index pairs") {
    // choose 2 of 6: 15 pairs; chi2 crit for 14 df at p=0.999 is 36.123
    Rng rng(11);
    std::map<std::pair<std::size_t, std::size_t>, int> freq;
    const int draws = 15000;
    for (int i = 0; i < draws; ++i) {
        TokenAllocation a = select_tokens({2}, {6}, rng);
        ++freq[{a.indices[0][0], a.indices[0][1]}];
    }
    REQUIRE(freq.size() == 15);
    const double expect = draws / 15.0;
    double chi2 = 0.0;
    for (const auto& [k, f] : freq) chi2 += (f - expect) * (f - expect) / expect;
    REQUIRE(chi2 < 36.123);
}

TEST_CASE("masking pipeline is deterministic in the rng state") {
    MaskingConfig cfg;
    const std::vector<std::size_t> caps(3, 64);
    Rng a(42), b(42);
    for (int i = 0; i < 50; ++i) {
        TokenAllocation x = sample_allocation(cfg, caps, a);
        TokenAllocation y = sample_allocation(cfg, caps, b);
        REQUIRE(x.counts == y.counts);
        REQUIRE(x.indices == y.indices);
    }
}

TEST_CASE("invalid alpha is rejected") {
    Rng rng(1);
    REQUIRE_THROWS_AS(sample_shares(0.0, 3, rng), DomainError);
    MaskingConfig cfg;
    cfg.alpha = -1.0;
    REQUIRE_THROWS_AS(cfg.validate(), DomainError);
}
