#include <catch2/catch_amalgamated.hpp>

#include "trimae/pretrain.hpp"

using namespace trimae;

TEST_CASE("schedule endpoints and shape") {
    ScheduleConfig s;
    s.base_lr = 1e-4;
    s.batch = 256;
    REQUIRE(lr_at(s, 0.0) == Catch::Approx(1e-6).epsilon(1e-12));
    REQUIRE(lr_at(s, 40.0) == Catch::Approx(1e-4).epsilon(1e-12));
    REQUIRE(lr_at(s, 1600.0) == Catch::Approx(0.0).margin(1e-18));
    // halfway through decay: peak * 0.5 * (1 + cos(pi/2)) = peak/2
    REQUIRE(lr_at(s, 40.0 + 780.0) == Catch::Approx(5e-5).epsilon(1e-9));
    // warmup is linear
    REQUIRE(lr_at(s, 20.0) == Catch::Approx(1e-6 + (1e-4 - 1e-6) * 0.5).epsilon(1e-12));
    REQUIRE_THROWS_AS(lr_at(s, -0.1), DomainError);
    REQUIRE_THROWS_AS(lr_at(s, 1600.5), DomainError);
}

TEST_CASE("peak rate scales linearly with batch size") {
    ScheduleConfig s;
    s.base_lr = 1e-4;
    s.batch = 8;
    REQUIRE(effective_lr(s) == Catch::Approx(1e-4 * 8.0 / 256.0).epsilon(1e-12));
    REQUIRE(lr_at(s, 40.0) == Catch::Approx(effective_lr(s)).epsilon(1e-12));
    s.batch = 512;
    REQUIRE(effective_lr(s) == Catch::Approx(2e-4).epsilon(1e-12));
}

TEST_CASE("schedule validation") {
    ScheduleConfig s;
    s.warmup_epochs = 2000;
    REQUIRE_THROWS_AS(s.validate(), ConfigError);
    s = ScheduleConfig{};
    s.base_lr = 0.0;
    REQUIRE_THROWS_AS(s.validate(), ConfigError);
}

TEST_CASE("AdamW single step matches hand algebra") {
    // p (2,2) so decay applies; g known; one step at lr, wd
    const double lr = 0.01, wd = 0.1, b1 = 0.9, b2 = 0.95, eps = 1e-8;
    Tensor p0({2, 2}, {1.0, -2.0, 0.5, 3.0});
    Tensor g({2, 2}, {0.3, -0.1, 0.0, 2.0});
    ad::Var v = ad::leaf(p0, true);
    v->g() = g;
    std::vector<std::pair<std::string, ad::Var>> params = {{"w", v}};
    AdamWState st;
    optimizer_step(params, st, lr, wd);
    for (std::size_t i = 0; i < 4; ++i) {
        const double decayed = p0[i] * (1.0 - lr * wd);
        const double m = (1.0 - b1) * g[i], vv = (1.0 - b2) * g[i] * g[i];
        const double mhat = m / (1.0 - b1), vhat = vv / (1.0 - b2);
        const double expect = decayed - lr * mhat / (std::sqrt(vhat) + eps);
        REQUIRE(v->val[i] == Catch::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("single-row tensors are exempt from weight decay") {
    Tensor p0({1, 3}, {1.0, 2.0, 3.0});
    ad::Var v = ad::leaf(p0, true);  // zero grad, never allocated
    std::vector<std::pair<std::string, ad::Var>> params = {{"bias", v}};
    AdamWState st;
    optimizer_step(params, st, 0.1, 0.5);
    // no grad, no decay: values unchanged
    for (std::size_t i = 0; i < 3; ++i) REQUIRE(v->val[i] == p0[i]);

    Tensor w0({3, 1}, {1.0, 2.0, 3.0});
    ad::Var w = ad::leaf(w0, true);
    std::vector<std::pair<std::string, ad::Var>> wp = {{"w", w}};
    AdamWState st2;
    optimizer_step(wp, st2, 0.1, 0.5);
    // multi-row with zero grad: pure decay
    for (std::size_t i = 0; i < 3; ++i)
        REQUIRE(w->val[i] == Catch::Approx(w0[i] * (1.0 - 0.05)).epsilon(1e-12));
}

TEST_CASE("non-finite gradients abort with the tensor name") {
    ad::Var v = ad::leaf(Tensor({2, 2}), true);
    v->g()[1] = std::numeric_limits<double>::quiet_NaN();
    std::vector<std::pair<std::string, ad::Var>> params = {{"enc.w", v}};
    AdamWState st;
    try {
        optimizer_step(params, st, 0.01, 0.0);
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        REQUIRE(std::string(e.what()).find("enc.w") != std::string::npos);
    }
}

TEST_CASE("AdamW minimizes a convex quadratic") {
    // f(x) = sum (x - t)^2
    Tensor t({2, 2}, {3.0, -1.0, 0.5, 2.0});
    ad::Var x = ad::leaf(Tensor::zeros({2, 2}), true);
    std::vector<std::pair<std::string, ad::Var>> params = {{"x", x}};
    AdamWState st;
    for (int i = 0; i < 800; ++i) {
        if (x->grad_alloc) std::fill(x->grad.data(), x->grad.data() + 4, 0.0);
        ad::Var diff = ad::sub(x, ad::constant(t));
        ad::Var loss = ad::sum_all(ad::mul(diff, diff));
        ad::backward(loss);
        optimizer_step(params, st, 0.05, 0.0);
    }
    for (std::size_t i = 0; i < 4; ++i) REQUIRE(std::abs(x->val[i] - t[i]) < 1e-2);
}

namespace {

std::vector<Sample> tiny_triplets(std::size_t n, std::size_t S, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Sample> out;
    for (std::size_t i = 0; i < n; ++i) {
        Sample s;
        s.sample_id = "s" + std::to_string(i);
        s.patient_id = "p" + std::to_string(i);
        s.oct = ImagePlane(S, S);
        s.slo = ImagePlane(S, S);
        s.layers = LayerMap(S, S);
        for (auto& v : s.oct.values) v = rng.uniform();
        for (auto& v : s.slo->values) v = rng.uniform();
        for (auto& v : s.layers->values) v = static_cast<int>(rng.uniform_int(2));
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace

TEST_CASE("pretraining is deterministic and loss history is finite") {
    ModelConfig c;
    c.depth = 1;
    c.width = 8;
    c.heads = 2;
    c.patch = 2;
    c.input = 4;
    c.decoder_width = 8;
    c.decoder_heads = 2;
    c.num_layer_classes = 2;
    auto data = tiny_triplets(3, 4, 7);
    ScheduleConfig sched;
    sched.total_epochs = 3;
    sched.warmup_epochs = 1;
    sched.batch = 2;
    MaskingConfig mc;

    auto run = [&] {
        Rng init = Rng::derive(5, 0, 0);
        ParameterSet ps = ParameterSet::init(c, TaskMode::Pretrain, 2, init);
        PretrainResult r = pretrain_run(ps, data, sched, mc, AugmentPolicy::identity(), 5);
        return std::pair{std::move(ps), std::move(r)};
    };
    auto [ps1, r1] = run();
    auto [ps2, r2] = run();
    REQUIRE(r1.history.size() == 3);
    for (std::size_t e = 0; e < 3; ++e) {
        REQUIRE(std::isfinite(r1.history[e].total));
        REQUIRE(r1.history[e].total == r2.history[e].total);
        REQUIRE(r1.history[e].l_oct == r2.history[e].l_oct);
        REQUIRE(r1.history[e].lr == r2.history[e].lr);
    }
    for (std::size_t i = 0; i < ps1.named.size(); ++i)
        for (std::size_t j = 0; j < ps1.named[i].second->val.size(); ++j)
            REQUIRE(ps1.named[i].second->val[j] == ps2.named[i].second->val[j]);
}

TEST_CASE("checkpoint hook fires on the cadence and at the end") {
    ModelConfig c;
    c.depth = 1;
    c.width = 4;
    c.heads = 1;
    c.patch = 2;
    c.input = 4;
    c.decoder_width = 4;
    c.decoder_heads = 1;
    c.num_layer_classes = 2;
    auto data = tiny_triplets(2, 4, 9);
    ScheduleConfig sched;
    sched.total_epochs = 5;  // cadence max(1, 5/20) = 1
    sched.warmup_epochs = 1;
    sched.batch = 2;
    Rng init = Rng::derive(1, 0, 0);
    ParameterSet ps = ParameterSet::init(c, TaskMode::Pretrain, 2, init);
    std::vector<std::size_t> fired;
    pretrain_run(ps, data, sched, MaskingConfig{}, AugmentPolicy::identity(), 1,
                 [&](std::size_t epoch, const ParameterSet&) { fired.push_back(epoch); });
    REQUIRE(fired == std::vector<std::size_t>{1, 2, 3, 4, 5});
}

TEST_CASE("loss CSV layout") {
    std::vector<EpochLoss> hist = {{0, 1.0, 2.0, 3.0, 6.0, 1e-6},
                                   {1, 0.5, 1.0, 1.5, 3.0, 2e-6}};
    const std::string path = "/tmp/trimae_loss_test.csv";
    write_loss_csv(path, hist);
    std::ifstream f(path);
    std::string line;
    std::getline(f, line);
    REQUIRE(line == "epoch,l_oct,l_slo,l_layers,total,lr");
    std::getline(f, line);
    REQUIRE(line.substr(0, 2) == "0,");
    std::getline(f, line);
    REQUIRE(line.substr(0, 2) == "1,");
}
