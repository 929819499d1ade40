#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

#ifndef TRIMAE_CLI_PATH
#error "TRIMAE_CLI_PATH must point at the built CLI binary"
#endif

namespace {

int run(const fs::path& cwd, const std::string& args) {
    const std::string cmd = "cd " + cwd.string() + " && " + std::string(TRIMAE_CLI_PATH) +
                            " " + args + " >/dev/null 2>cli_err.txt";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

bool identical(const fs::path& a, const fs::path& b) { return slurp(a) == slurp(b); }

fs::path workspace() {
    const fs::path p = fs::temp_directory_path() / "trimae_cli_ws";
    fs::remove_all(p);
    fs::create_directories(p);
    std::ofstream cfg(p / "run.cfg");
    cfg << "model.input = 32\n"
           "phantom.size = 32\n"
           "phantom.patients = 6\n"
           "phantom.samples_per_patient = 2\n"
           "schedule.total_epochs = 2\n"
           "schedule.warmup_epochs = 1\n"
           "schedule.batch = 2\n"
           "probe.max_epochs = 3\n"
           "probe.seeds = 2\n"
           "seg.epochs = 2\n"
           "seg.batch = 2\n"
           "data.root = data\n"
           "out = out\n";
    return p;
}

}  // namespace

TEST_CASE("full pipeline produces every artifact") {
    const fs::path ws = workspace();

    REQUIRE(run(ws, "-c run.cfg synth") == 0);
    REQUIRE(fs::exists(ws / "data" / "manifest.csv"));
    REQUIRE(fs::exists(ws / "data" / "resolved.cfg"));
    // both image and mask files landed
    REQUIRE(fs::exists(ws / "data" / "images" / "p0s0_oct.pgm"));
    REQUIRE(fs::exists(ws / "data" / "masks" / "p0s0_layers.pgm"));

    REQUIRE(run(ws, "-c run.cfg pretrain") == 0);
    REQUIRE(fs::exists(ws / "out" / "model.ckpt"));
    REQUIRE(fs::exists(ws / "out" / "loss.csv"));
    REQUIRE(fs::exists(ws / "out" / "loss.svg"));
    {
        std::ifstream f(ws / "out" / "loss.csv");
        std::string header;
        std::getline(f, header);
        REQUIRE(header == "epoch,l_oct,l_slo,l_layers,total,lr");
        std::string row;
        std::size_t rows = 0;
        while (std::getline(f, row)) ++rows;
        REQUIRE(rows == 2);
    }
    // the resolved config reproduces the effective settings
    const std::string resolved = slurp(ws / "out" / "resolved.cfg");
    REQUIRE(resolved.find("model.input=32") != std::string::npos);
    REQUIRE(resolved.find("schedule.total_epochs=2") != std::string::npos);
    REQUIRE(resolved.find("seed=1") != std::string::npos);

    REQUIRE(run(ws, "-c run.cfg --checkpoint out/model.ckpt probe") == 0);
    REQUIRE(fs::exists(ws / "out" / "replicas.csv"));
    REQUIRE(fs::exists(ws / "out" / "probe_seed1.ckpt"));
    REQUIRE(fs::exists(ws / "out" / "probe_seed2.ckpt"));
    {
        std::ifstream f(ws / "out" / "replicas.csv");
        std::string header;
        std::getline(f, header);
        REQUIRE(header == "seed,metric,value");
        const std::string body = slurp(ws / "out" / "replicas.csv");
        REQUIRE(body.find("1,bacc,") != std::string::npos);
        REQUIRE(body.find("mean,auroc,") != std::string::npos);
        REQUIRE(body.find("std,ap,") != std::string::npos);
    }

    REQUIRE(run(ws, "-c run.cfg --checkpoint out/model.ckpt segment-tune") == 0);
    REQUIRE(fs::exists(ws / "out" / "seg.ckpt"));
    REQUIRE(fs::exists(ws / "out" / "dice_trace.csv"));

    REQUIRE(run(ws, "-c run.cfg --checkpoint out/seg.ckpt evaluate") == 0);
    for (const char* name : {"dice.csv", "iou.csv", "avd.csv"}) {
        REQUIRE(fs::exists(ws / "out" / name));
        std::ifstream f(ws / "out" / name);
        std::string header;
        std::getline(f, header);
        REQUIRE(header == "level,unit_id,class,metric,value");
    }

    REQUIRE(run(ws, "-c run.cfg stats --a out/replicas.csv --b out/replicas.csv") == 0);
    {
        const std::string stats = slurp(ws / "out" / "stats.csv");
        REQUIRE(stats.find("metric,mean_a,mean_b,t_p,wilcoxon_p,degenerate") == 0);
        // identical replicas: degenerate t-test at p = 0.5, Wilcoxon undefined
        REQUIRE(stats.find("bacc,") != std::string::npos);
        REQUIRE(stats.find(",0.5,undefined,1") != std::string::npos);
    }

    REQUIRE(run(ws, "-c run.cfg --checkpoint out/model.ckpt report") == 0);
    REQUIRE(fs::exists(ws / "out" / "report.md"));
    for (const char* m : {"oct", "slo", "layers"})
        for (const char* r : {"0", "50", "100"})
            REQUIRE(fs::exists(ws / "out" /
                               ("recon_" + std::string(m) + "_" + r + ".pgm")));
    const std::string md = slurp(ws / "out" / "report.md");
    REQUIRE(md.find("## Reconstruction grids") != std::string::npos);
    REQUIRE(md.find("## Probe replicas") != std::string::npos);
    REQUIRE(md.find("## Pairwise statistics") != std::string::npos);

    SECTION("a re-run is byte-identical") {
        REQUIRE(run(ws, "-c run.cfg --out out_rerun pretrain") == 0);
        REQUIRE(identical(ws / "out" / "model.ckpt", ws / "out_rerun" / "model.ckpt"));
        REQUIRE(identical(ws / "out" / "loss.csv", ws / "out_rerun" / "loss.csv"));
        REQUIRE(run(ws, "-c run.cfg --out out_rerun --checkpoint out_rerun/model.ckpt probe") ==
                0);
        REQUIRE(identical(ws / "out" / "replicas.csv", ws / "out_rerun" / "replicas.csv"));
    }
    SECTION("a different seed changes the checkpoint") {
        REQUIRE(run(ws, "-c run.cfg --out out_seed --seed 2 pretrain") == 0);
        REQUIRE_FALSE(identical(ws / "out" / "model.ckpt", ws / "out_seed" / "model.ckpt"));
    }
}

TEST_CASE("configuration errors exit with code 2") {
    const fs::path ws = workspace();
    std::ofstream(ws / "bad.cfg") << "bogus.key = 1\n";
    REQUIRE(run(ws, "-c bad.cfg synth") == 2);
    std::ofstream(ws / "bad2.cfg") << "schedule.batch = not_a_number\n";
    REQUIRE(run(ws, "-c bad2.cfg pretrain") == 2);
    std::ofstream(ws / "bad3.cfg") << "model.patch = 7\n";  // violates patch % 4
    REQUIRE(run(ws, "-c bad3.cfg pretrain") == 2);
    REQUIRE(run(ws, "-c does_not_exist.cfg synth") == 2);
}

TEST_CASE("data errors exit with code 3") {
    const fs::path ws = workspace();
    // no dataset generated yet
    REQUIRE(run(ws, "-c run.cfg pretrain") == 3);
    // corrupt checkpoint
    REQUIRE(run(ws, "-c run.cfg synth") == 0);
    std::ofstream(ws / "garbage.ckpt") << "not a checkpoint";
    REQUIRE(run(ws, "-c run.cfg --checkpoint garbage.ckpt probe") == 3);
}
