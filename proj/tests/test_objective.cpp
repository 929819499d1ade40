#include <catch2/catch_amalgamated.hpp>

#include "trimae/objective.hpp"

using namespace trimae;

TEST_CASE("masked_l2 basics") {
    Tensor target({4, 4});
    Rng rng(1);
    for (auto& v : target) v = rng.uniform();

    SECTION("perfect prediction scores zero") {
        ad::Var pred = ad::leaf(target);
        REQUIRE(masked_l2(pred, target, {0, 2})->val[0] == 0.0);
    }
    SECTION("empty masked set scores zero") {
        ad::Var pred = ad::leaf(Tensor::zeros({4, 4}));
        REQUIRE(masked_l2(pred, target, {})->val[0] == 0.0);
    }
    SECTION("single pixel off by one in a 2x2 patch gives 0.25") {
        Tensor p = target;
        p(1, 0) += 1.0;
        REQUIRE(masked_l2(ad::leaf(p), target, {1})->val[0] ==
                Catch::Approx(0.25).epsilon(1e-12));
    }
    SECTION("mean over masked patches") {
        Tensor p = target;
        p(0, 0) += 2.0;  // patch 0 error: 4/4 = 1
        p(3, 2) += 1.0;  // patch 3 error: 1/4
        REQUIRE(masked_l2(ad::leaf(p), target, {0, 3})->val[0] ==
                Catch::Approx((1.0 + 0.25) / 2.0).epsilon(1e-12));
    }
    SECTION("shape mismatch and bad index are errors") {
        ad::Var pred = ad::leaf(Tensor::zeros({3, 4}));
        REQUIRE_THROWS_AS(masked_l2(pred, target, {0}), ShapeError);
        ad::Var ok = ad::leaf(target);
        REQUIRE_THROWS_AS(masked_l2(ok, target, {4}), ShapeError);
    }
    SECTION("order of the masked set is irrelevant") {
        Tensor p = target;
        p(0, 1) += 0.3;
        p(2, 2) -= 0.7;
        const double a = masked_l2(ad::leaf(p), target, {0, 2, 3})->val[0];
        const double b = masked_l2(ad::leaf(p), target, {3, 0, 2})->val[0];
        REQUIRE(a == b);
    }
}

TEST_CASE("masked_ce basics") {
    const std::size_t C = 4, px = 4;  // 2x2 patches

    SECTION("uniform logits give ln C") {
        ad::Var logits = ad::leaf(Tensor::zeros({3, px * C}));
        Tensor target({3, px});
        Rng rng(2);
        for (auto& v : target) v = static_cast<double>(rng.uniform_int(C));
        REQUIRE(masked_ce(logits, target, C, {0, 2})->val[0] ==
                Catch::Approx(std::log(4.0)).epsilon(1e-12));
    }
    SECTION("saturated logits give near-zero loss") {
        Tensor target({2, px});
        Rng rng(3);
        Tensor lt = Tensor::zeros({2, px * C});
        for (std::size_t i = 0; i < 2; ++i)
            for (std::size_t j = 0; j < px; ++j) {
                const std::size_t cls = rng.uniform_int(C);
                target(i, j) = static_cast<double>(cls);
                lt(i, cls * px + j) = 50.0;  // class-major layout
            }
        REQUIRE(masked_ce(ad::leaf(lt), target, C, {0, 1})->val[0] < 1e-3);
    }
    SECTION("random two-patch case matches a per-pixel oracle") {
        Rng rng(4);
        Tensor logits({2, px * C});
        for (auto& v : logits) v = rng.normal();
        Tensor target({2, px});
        for (auto& v : target) v = static_cast<double>(rng.uniform_int(C));
        const double got = masked_ce(ad::leaf(logits), target, C, {0, 1})->val[0];
        double oracle = 0.0;
        for (std::size_t i = 0; i < 2; ++i)
            for (std::size_t j = 0; j < px; ++j) {
                double denom = 0.0, mx = -1e300;
                for (std::size_t c = 0; c < C; ++c) mx = std::max(mx, logits(i, c * px + j));
                for (std::size_t c = 0; c < C; ++c) denom += std::exp(logits(i, c * px + j) - mx);
                const std::size_t cls = static_cast<std::size_t>(target(i, j));
                oracle += -(logits(i, cls * px + j) - mx - std::log(denom));
            }
        oracle /= 2.0 * px;
        REQUIRE(got == Catch::Approx(oracle).margin(1e-9));
    }
    SECTION("class index out of range is a data error") {
        ad::Var logits = ad::leaf(Tensor::zeros({1, px * C}));
        Tensor target = Tensor::zeros({1, px});
        target(0, 0) = 4.0;
        REQUIRE_THROWS_AS(masked_ce(logits, target, C, {0}), DataError);
    }
}

TEST_CASE("total_loss composition") {
    ModelConfig cfg;
    cfg.depth = 1;
    cfg.width = 4;
    cfg.heads = 1;
    cfg.patch = 2;
    cfg.input = 4;
    cfg.num_layer_classes = 3;
    Rng rng(5);
    Sample s;
    s.oct = ImagePlane(4, 4);
    s.slo = ImagePlane(4, 4);
    s.layers = LayerMap(4, 4);
    for (auto& v : s.oct.values) v = rng.uniform();
    for (auto& v : s.slo->values) v = rng.uniform();
    for (auto& v : s.layers->values) v = static_cast<int>(rng.uniform_int(3));

    auto make_preds = [&](double off) {
        Tensor po = patchify(s.oct, 2);
        Tensor pn = patchify(*s.slo, 2);
        for (auto& v : po) v += off;
        for (auto& v : pn) v += off;
        Tensor pl({4, 4 * 3});
        for (auto& v : pl) v = rng.normal();
        return std::tuple{ad::leaf(po), ad::leaf(pn), ad::leaf(pl)};
    };

    SECTION("total equals the ordered component sum") {
        TokenAllocation a;
        a.counts = {2, 1, 3};
        a.indices = {{0, 3}, {2}, {0, 1, 2}};
        a.budget = 6;
        auto [po, pn, pl] = make_preds(0.5);
        LossBreakdown lb = total_loss(s, a, po, pn, pl, cfg);
        REQUIRE(lb.total->val[0] ==
                Catch::Approx(lb.l_oct->val[0] + lb.l_slo->val[0] + lb.l_layers->val[0])
                    .epsilon(1e-15));
        REQUIRE(lb.total->val[0] > 0.0);
    }
    SECTION("fully visible modalities contribute zero") {
        TokenAllocation a;
        a.counts = {2, 4, 4};  // SLO and LAYERS fully visible
        a.indices = {{1, 2}, {0, 1, 2, 3}, {0, 1, 2, 3}};
        a.budget = 10;
        auto [po, pn, pl] = make_preds(1.0);
        LossBreakdown lb = total_loss(s, a, po, pn, pl, cfg);
        REQUIRE(lb.l_slo->val[0] == 0.0);
        REQUIRE(lb.l_layers->val[0] == 0.0);
        REQUIRE(lb.total->val[0] == Catch::Approx(lb.l_oct->val[0]).epsilon(1e-15));
    }
    SECTION("perfect reconstruction scores zero everywhere") {
        TokenAllocation a;
        a.counts = {1, 1, 4};
        a.indices = {{0}, {1}, {0, 1, 2, 3}};
        a.budget = 6;
        Tensor pl = Tensor::zeros({4, 4 * 3});
        Tensor lt = patchify(*s.layers, 2);
        for (std::size_t i = 0; i < 4; ++i)
            for (std::size_t j = 0; j < 4; ++j)
                pl(i, static_cast<std::size_t>(lt(i, j)) * 4 + j) = 60.0;
        LossBreakdown lb = total_loss(s, a, ad::leaf(patchify(s.oct, 2)),
                                      ad::leaf(patchify(*s.slo, 2)), ad::leaf(pl), cfg);
        REQUIRE(lb.l_oct->val[0] == 0.0);
        REQUIRE(lb.l_slo->val[0] == 0.0);
        REQUIRE(lb.total->val[0] < 1e-3);
    }
    SECTION("missing modality is a data error") {
        Sample s2 = s;
        s2.slo.reset();
        TokenAllocation a;
        a.counts = {4, 4, 4};
        a.indices = {{0, 1, 2, 3}, {0, 1, 2, 3}, {0, 1, 2, 3}};
        a.budget = 12;
        auto [po, pn, pl] = make_preds(0.0);
        REQUIRE_THROWS_AS(total_loss(s2, a, po, pn, pl, cfg), DataError);
    }
}
