#include "doctest.h"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <sys/wait.h>

#include "json.hpp"
#include "superscope/checkpoint.hpp"
#include "superscope/model.hpp"
#include "superscope/report.hpp"

using namespace superscope;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path work_dir() {
    fs::path dir = fs::temp_directory_path() / "superscope_cli_tests";
    fs::create_directories(dir);
    return dir;
}

struct cli_result {
    int code = -1;
    std::string out;
    std::string err;
};

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)),
                       std::istreambuf_iterator<char>());
}

cli_result run_cli(const std::string& args, const std::string& env = "") {
    fs::path out = work_dir() / "stdout.txt";
    fs::path err = work_dir() / "stderr.txt";
    std::string cmd = env + (env.empty() ? "" : " ") + SUPERSCOPE_CLI_PATH + " " + args +
                      " > " + out.string() + " 2> " + err.string();
    int status = std::system(cmd.c_str());
    cli_result res;
    res.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    res.out = slurp(out);
    res.err = slurp(err);
    return res;
}

double parse_ppl(const std::string& text) {
    return std::strtod(text.c_str(), nullptr);
}

} // namespace

TEST_CASE("dry runs print the resolved configuration") {
    cli_result r = run_cli("detect --toy --seed 3 --plant 1,5,9,100 --dry-run");
    CHECK(r.code == 0);
    json rc = json::parse(r.out);
    CHECK(rc["subcommand"] == "detect");
    CHECK(rc["model"]["kind"] == "toy");
    CHECK(rc["model"]["seed"] == 3);
    CHECK(rc["model"]["plant"]["row"] == 5);
    CHECK(rc["params"].contains("out"));
}

TEST_CASE("detect finds the plant and writes a stable report") {
    fs::path dir1 = work_dir() / "detect1";
    fs::path dir2 = work_dir() / "detect2";
    std::string base = "detect --toy --seed 7 --plant 1,5,9,100 --output-dir ";
    cli_result r1 = run_cli(base + dir1.string());
    CHECK(r1.code == 0);
    CHECK(r1.out.find("layer=1") != std::string::npos);
    CHECK(r1.out.find("row=5") != std::string::npos);
    CHECK(r1.out.find("col=9") != std::string::npos);

    superweights_report rep =
        read_superweights_report((dir1 / "superweights.json").string());
    CHECK(rep.complete);
    REQUIRE(rep.records.size() == 1);
    CHECK(rep.records[0].layer == 1);
    CHECK(rep.records[0].row == 5);
    CHECK(rep.records[0].col == 9);
    CHECK(rep.records[0].value == 100.0f);

    // a rerun reproduces the report byte for byte
    cli_result r2 = run_cli(base + dir2.string());
    CHECK(r2.code == 0);
    CHECK(slurp(dir1 / "superweights.json") == slurp(dir2 / "superweights.json"));
}

TEST_CASE("detect on a clean model writes an empty report") {
    fs::path dir = work_dir() / "clean";
    cli_result r = run_cli("detect --toy --seed 7 --output-dir " + dir.string());
    CHECK(r.code == 0);
    superweights_report rep =
        read_superweights_report((dir / "superweights.json").string());
    CHECK(rep.complete);
    CHECK(rep.records.empty());
}

TEST_CASE("detect exits 2 when the iteration budget truncates the search") {
    // checkpoint with two outlier rows on one fed input channel
    auto [spec, store] = make_toy_model(1234, toy_plant{1, 5, 9, 100.0f});
    store.at(layer_weight_name(1, "mlp.down_proj.weight")).at2(12, 9) = 60.0f;
    fs::path ckpt = work_dir() / "two_sw";
    fs::create_directories(ckpt);
    std::ofstream cfg(ckpt / "config.json");
    cfg << R"({"n_layers":4,"d_model":16,"d_hidden":64,"n_heads":2,)"
        << R"("vocab":64,"max_seq":64})";
    cfg.close();
    save_weight_store(store, (ckpt / "model.safetensors").string());

    fs::path dir = work_dir() / "partial";
    cli_result r = run_cli("detect --checkpoint " + ckpt.string() +
                           " --max-iters 1 --output-dir " + dir.string());
    CHECK(r.code == 2);
    superweights_report rep =
        read_superweights_report((dir / "superweights.json").string());
    CHECK_FALSE(rep.complete);
    CHECK(rep.records.size() == 1);

    // with the default budget both rows come out and the exit is clean
    fs::path full = work_dir() / "full";
    cli_result r2 = run_cli("detect --checkpoint " + ckpt.string() +
                            " --output-dir " + full.string());
    CHECK(r2.code == 0);
    superweights_report rep2 =
        read_superweights_report((full / "superweights.json").string());
    CHECK(rep2.complete);
    CHECK(rep2.records.size() == 2);
}

TEST_CASE("usage mistakes exit 64") {
    CHECK(run_cli("trace --toy --seed 1").code == 64); // no super-weight source
    CHECK(run_cli("trace --toy --seed 1 --sw 1,5,9 --sw-report x.json").code == 64);
    CHECK(run_cli("detect --toy --no-such-flag").code == 64);
    CHECK(run_cli("quantize --toy --seed 1 --clip-z 3 --tune-z --gen-corpus 4,8").code == 64);
    CHECK(run_cli("quantize --toy --seed 1 --sweep 8x8 --clip-z 3 --gen-corpus 4,8").code == 64);
    CHECK(run_cli("eval --toy --seed 1 --w8a8 --scheme x.json --gen-corpus 4,8").code == 64);
    CHECK(run_cli("detect --seed 1").code == 64); // neither --toy nor --checkpoint
}

TEST_CASE("bad inputs exit 1") {
    CHECK(run_cli("detect --checkpoint /nonexistent/ckpt").code == 1);
    CHECK(run_cli("eval --toy --seed 1 --corpus /nonexistent/corpus.txt").code == 1);
}

TEST_CASE("scaling the super weight by 1.0 leaves perplexity untouched") {
    fs::path dir = work_dir() / "unit_scale";
    cli_result mk = run_cli("intervene --toy --seed 1234 --plant 1,5,9,100"
                            " --sw 1,5,9 --scale-sw 1.0 --output-dir " +
                            dir.string() + " --out unit.json");
    REQUIRE(mk.code == 0);

    std::string eval_base = "eval --toy --seed 1234 --plant 1,5,9,100 --gen-corpus 32,12";
    cli_result plain = run_cli(eval_base);
    cli_result scaled = run_cli(eval_base + " --interventions " +
                                (dir / "unit.json").string());
    REQUIRE(plain.code == 0);
    REQUIRE(scaled.code == 0);
    CHECK(plain.out == scaled.out); // %.17g strings match bit for bit
}

TEST_CASE("zeroing the super weight wrecks perplexity") {
    fs::path dir = work_dir() / "zero_sw";
    cli_result mk = run_cli("intervene --toy --seed 1234 --plant 1,5,9,100"
                            " --sw 1,5,9 --zero-sw --output-dir " +
                            dir.string() + " --out zero.json");
    REQUIRE(mk.code == 0);

    std::string eval_base = "eval --toy --seed 1234 --plant 1,5,9,100 --gen-corpus 64,16";
    cli_result plain = run_cli(eval_base);
    cli_result zeroed = run_cli(eval_base + " --interventions " +
                                (dir / "zero.json").string());
    REQUIRE(plain.code == 0);
    REQUIRE(zeroed.code == 0);
    CHECK(parse_ppl(zeroed.out) > 5.0 * parse_ppl(plain.out));
}

TEST_CASE("restoring the super weight beats naive 4-bit") {
    std::string model = "--toy --seed 1234 --plant 1,5,9,2.5 --gen-corpus 200,16";
    fs::path rdir = work_dir() / "q_restore";
    fs::path ndir = work_dir() / "q_naive";

    cli_result restored = run_cli("quantize " + model +
                                  " --bits 4 --block 64x64 --tune-z --sw 1,5,9"
                                  " --restore-sw --output-dir " + rdir.string());
    REQUIRE(restored.code == 0);
    cli_result naive = run_cli("quantize " + model +
                               " --bits 4 --block 64x64 --no-restore --output-dir " +
                               ndir.string());
    REQUIRE(naive.code == 0);

    quant_eval_report rrep = read_quant_eval_report((rdir / "quant_eval.json").string());
    quant_eval_report nrep = read_quant_eval_report((ndir / "quant_eval.json").string());
    REQUIRE(rrep.rows.size() == 1);
    REQUIRE(nrep.rows.size() == 1);
    CHECK(rrep.rows[0].scheme == "rtn-clip-restore");
    CHECK(nrep.rows[0].scheme == "rtn-naive");
    CHECK(rrep.rows[0].ppl <= nrep.rows[0].ppl);

    // eval --scheme reproduces the quantize run's score exactly
    cli_result replay = run_cli("eval " + model + " --scheme " +
                                (rdir / "scheme.json").string());
    REQUIRE(replay.code == 0);
    CHECK(parse_ppl(replay.out) == rrep.rows[0].ppl);
}

TEST_CASE("block sweeps emit naive and restored rows") {
    fs::path dir = work_dir() / "sweep";
    cli_result r = run_cli("quantize --toy --seed 1234 --plant 1,5,9,2.5"
                           " --bits 4 --sweep 8x8,per-tensor --sw 1,5,9 --restore-sw"
                           " --gen-corpus 32,12 --output-dir " + dir.string());
    REQUIRE(r.code == 0);
    quant_eval_report rep = read_quant_eval_report((dir / "quant_eval.json").string());
    REQUIRE(rep.rows.size() == 4);
    CHECK(rep.rows[0].scheme == "rtn-naive");
    CHECK(rep.rows[0].block == "8x8");
    CHECK(rep.rows[1].block == "per-tensor");
    CHECK(rep.rows[2].scheme == "rtn-clip-restore");
    CHECK(rep.rows[3].block == "per-tensor");
}

TEST_CASE("trace reports the activation and one row per layer") {
    fs::path dir = work_dir() / "trace";
    cli_result r = run_cli("trace --toy --seed 1234 --plant 1,5,9,100 --sw 1,5,9"
                           " --output-dir " + dir.string());
    REQUIRE(r.code == 0);
    CHECK(r.out.find("sa layer=1") != std::string::npos);
    CHECK(r.out.find("channel=5") != std::string::npos);

    trace_report main_rep = read_trace_report((dir / "trace.json").string());
    CHECK(main_rep.records.size() == 4); // one down_proj_out max per layer
    float spike = 0.0f;
    for (const tap_record& rec : main_rep.records) {
        CHECK(rec.site == tap_site::down_proj_out);
        if (rec.layer == 1) {
            spike = std::fabs(rec.value);
        }
    }
    CHECK(spike > 100.0f);

    trace_report detail = read_trace_report((dir / "trace_detail.json").string());
    CHECK(detail.records.size() > main_rep.records.size());
}

TEST_CASE("reports rewrite into csv") {
    fs::path dir = work_dir() / "convert";
    cli_result mk = run_cli("detect --toy --seed 7 --plant 1,5,9,100 --output-dir " +
                            dir.string());
    REQUIRE(mk.code == 0);
    cli_result conv = run_cli("report --in " + (dir / "superweights.json").string() +
                              " --out " + (dir / "superweights.csv").string() +
                              " --format csv");
    REQUIRE(conv.code == 0);
    std::string csv = slurp(dir / "superweights.csv");
    CHECK(csv.find("layer") != std::string::npos);
    CHECK(csv.find("mlp.down_proj") != std::string::npos);

    CHECK(run_cli("report --in nothing").code == 64); // --out is required
}

TEST_CASE("thread caps come from the flag or the environment") {
    std::string args = "eval --toy --seed 5 --gen-corpus 16,12";
    cli_result base = run_cli(args);
    cli_result flagged = run_cli(args + " --threads 1");
    cli_result env = run_cli(args, "SUPERSCOPE_THREADS=2");
    REQUIRE(base.code == 0);
    REQUIRE(flagged.code == 0);
    REQUIRE(env.code == 0);
    CHECK(base.out == flagged.out); // identical bits regardless of the cap
    CHECK(base.out == env.out);
}
