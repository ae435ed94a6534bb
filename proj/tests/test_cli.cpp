#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "sonostack/audio_io.hpp"
#include "sonostack/features.hpp"
#include "test_support.hpp"

namespace fs = std::filesystem;

namespace {

struct CliResult {
    int exit_code = -1;
    std::string out;
    std::string err;
};

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

CliResult run_cli(const std::string& args, const std::string& scratch,
                  const std::string& env = "") {
    const fs::path out_file = fs::path(scratch) / "stdout.txt";
    const fs::path err_file = fs::path(scratch) / "stderr.txt";
    const std::string cmd = env + " " + std::string(SONOSTACK_CLI_PATH) + " " + args + " > " +
                            out_file.string() + " 2> " + err_file.string();
    const int status = std::system(cmd.c_str());
    CliResult result;
    result.exit_code = status < 0 ? status : WEXITSTATUS(status);
    result.out = slurp(out_file);
    result.err = slurp(err_file);
    return result;
}

} // namespace

TEST_CASE("cli: synth writes a loadable dataset plus manifest under --out-dir") {
    test_support::TempDir dir("cli_synth");
    const auto r = run_cli("synth --classes 2 --per-class 4 --folds 2 --seed 5 --out-dir " +
                               dir.str(),
                           dir.str());
    REQUIRE(r.exit_code == 0);
    CHECK(fs::exists(dir / "meta.csv"));
    CHECK(fs::exists(dir / "manifest.json"));
    CHECK(fs::exists(dir / "clip_0000.wav"));
    CHECK(r.out.find("8 clips") != std::string::npos);
}

TEST_CASE("cli: extract emits the four stacked channels at 128x128") {
    test_support::TempDir dir("cli_extract");
    const auto clip = test_support::sine_clip(880.0, 1.0, 22050);
    const auto wav = (dir / "tone.wav").string();
    sonostack::audio::save_wav_pcm16(clip, wav);

    const auto r = run_cli("extract --in " + wav +
                               " --features MFCC+GTCC+CH+LM --out tone.fmap --out-dir " +
                               dir.str(),
                           dir.str());
    REQUIRE(r.exit_code == 0);

    const auto maps = sonostack::features::read_fmap_file((dir / "tone.fmap").string());
    REQUIRE(maps.size() == 4);
    for (const auto& m : maps) {
        CHECK(m.rows == 128);
        CHECK(m.cols == 128);
    }
    CHECK(maps[0].kind == sonostack::features::FeatureKind::MFCC);
    CHECK(maps[3].kind == sonostack::features::FeatureKind::LM);
}

TEST_CASE("cli: crossval smoke run prints the per-fold table") {
    test_support::TempDir dir("cli_crossval");
    const auto r = run_cli(
        "crossval --arch cnn1 --features LM --dataset synth --classes 2 --per-class 4 "
        "--folds 4 --epochs 3 --seed 7 --n-mels 64 --out-dir " +
            dir.str(),
        dir.str());
    REQUIRE(r.exit_code == 0);
    CHECK(r.out.find("model,features,fold_1,fold_2,fold_3,fold_4,average_accuracy") !=
          std::string::npos);
    CHECK(r.out.find("cnn1,LM") != std::string::npos);
    CHECK(fs::exists(dir / "crossval.csv"));
    CHECK(fs::exists(dir / "manifest.json"));
}

TEST_CASE("cli: unknown feature tokens are usage errors with exit 2") {
    test_support::TempDir dir("cli_badfeat");
    const auto r = run_cli("train --features BOGUS --dataset synth --out-dir " + dir.str(),
                           dir.str());
    CHECK(r.exit_code == 2);
    CHECK(r.err.find("unknown feature token BOGUS") != std::string::npos);
}

TEST_CASE("cli: unknown commands and flags exit 2 with usage text") {
    test_support::TempDir dir("cli_badcmd");
    const auto bad_cmd = run_cli("frobnicate", dir.str());
    CHECK(bad_cmd.exit_code == 2);
    CHECK(!bad_cmd.err.empty());

    const auto bad_flag = run_cli("bench --no-such-flag", dir.str());
    CHECK(bad_flag.exit_code == 2);
}

TEST_CASE("cli: --help lists every subcommand and flag defaults") {
    test_support::TempDir dir("cli_help");
    const auto top = run_cli("--help", dir.str());
    REQUIRE(top.exit_code == 0);
    for (const char* cmd : {"extract", "train", "finetune", "crossval", "eval", "bench",
                            "synth"}) {
        CHECK(top.out.find(cmd) != std::string::npos);
    }

    const auto train_help = run_cli("train --help", dir.str());
    REQUIRE(train_help.exit_code == 0);
    CHECK(train_help.out.find("--epochs") != std::string::npos);
    CHECK(train_help.out.find("150") != std::string::npos); // the default is shown
    CHECK(train_help.out.find("--lr") != std::string::npos);
    CHECK(train_help.out.find("--batch") != std::string::npos);
}

TEST_CASE("cli: train is byte-reproducible for a fixed seed") {
    test_support::TempDir dir_a("cli_repro_a");
    test_support::TempDir dir_b("cli_repro_b");
    const std::string args =
        "train --arch cnn1 --features LM --dataset synth --classes 2 --per-class 4 "
        "--folds 2 --epochs 2 --seed 11 --n-mels 64 --out-dir ";
    REQUIRE(run_cli(args + dir_a.str(), dir_a.str()).exit_code == 0);
    REQUIRE(run_cli(args + dir_b.str(), dir_b.str()).exit_code == 0);

    CHECK(slurp(dir_a / "model.ssck") == slurp(dir_b / "model.ssck"));
    CHECK(slurp(dir_a / "history.csv") == slurp(dir_b / "history.csv"));
    CHECK(!slurp(dir_a / "history.csv").empty());
}

TEST_CASE("cli: crossval is byte-reproducible for a fixed seed") {
    test_support::TempDir dir_a("cli_cv_a");
    test_support::TempDir dir_b("cli_cv_b");
    const std::string args =
        "crossval --arch cnn1 --features LM --dataset synth --classes 2 --per-class 4 "
        "--folds 2 --epochs 2 --seed 31 --n-mels 64 --out-dir ";
    REQUIRE(run_cli(args + dir_a.str(), dir_a.str()).exit_code == 0);
    REQUIRE(run_cli(args + dir_b.str(), dir_b.str()).exit_code == 0);
    const auto csv = slurp(dir_a / "crossval.csv");
    CHECK(!csv.empty());
    CHECK(csv == slurp(dir_b / "crossval.csv"));
}

TEST_CASE("cli: eval and finetune consume a trained checkpoint") {
    test_support::TempDir dir("cli_eval");
    const std::string train_args =
        "train --arch cnn1 --features LM --dataset synth --classes 2 --per-class 6 "
        "--folds 3 --epochs 8 --seed 3 --n-mels 64 --out-dir " +
        dir.str();
    REQUIRE(run_cli(train_args, dir.str()).exit_code == 0);
    const std::string ckpt = (dir / "model.ssck").string();

    const auto eval_run = run_cli("eval --checkpoint " + ckpt +
                                      " --dataset synth --classes 2 --per-class 6 --folds 3 "
                                      "--eval-folds 3 --seed 3 --n-mels 64 --out-dir " +
                                      dir.str(),
                                  dir.str());
    REQUIRE(eval_run.exit_code == 0);
    CHECK(eval_run.out.find("accuracy,macro_precision,macro_recall,macro_f1") !=
          std::string::npos);
    CHECK(fs::exists(dir / "metrics.csv"));

    const auto ft_run = run_cli("finetune --checkpoint " + ckpt +
                                    " --dataset synth --classes 3 --per-class 4 --folds 2 "
                                    "--epochs 2 --seed 9 --n-mels 64 --out-dir " +
                                    dir.str(),
                                dir.str());
    REQUIRE(ft_run.exit_code == 0);
    CHECK(fs::exists(dir / "finetuned.ssck"));
}

TEST_CASE("cli: bench reports the requested iteration count") {
    test_support::TempDir dir("cli_bench");
    const auto r = run_cli(
        "bench --arch cnn1 --channels 1 --bench-classes 2 --iterations 5 --warmup 1 "
        "--width 32 --seed 2 --out-dir " +
            dir.str(),
        dir.str());
    REQUIRE(r.exit_code == 0);
    CHECK(r.out.find("iterations,mean_ms,std_ms") != std::string::npos);
    CHECK(r.out.find("\n5,") != std::string::npos);
    CHECK(fs::exists(dir / "bench.csv"));
}

TEST_CASE("cli: domain errors exit 1 and name the failing stage") {
    test_support::TempDir dir("cli_domain");
    const auto missing = run_cli("eval --checkpoint " + (dir / "absent.ssck").string() +
                                     " --dataset synth --out-dir " + dir.str(),
                                 dir.str());
    CHECK(missing.exit_code == 1);
    CHECK(missing.err.find("checkpoint") != std::string::npos);

    const auto bad_dataset = run_cli("train --dataset " + (dir / "nowhere").string() +
                                         " --origin esc50 --out-dir " + dir.str(),
                                     dir.str());
    CHECK(bad_dataset.exit_code == 1);
    CHECK(bad_dataset.err.find("load_dataset") != std::string::npos);
}

TEST_CASE("cli: --config supplies values that flags still override") {
    test_support::TempDir dir("cli_config");
    {
        std::ofstream ini(dir / "run.ini");
        ini << "seed=123\n[synth]\nclasses=3\nper-class=2\nfolds=2\n";
    }
    const auto from_file = run_cli("synth --config " + (dir / "run.ini").string() +
                                       " --out-dir " + dir.str(),
                                   dir.str());
    REQUIRE(from_file.exit_code == 0);
    CHECK(from_file.out.find("6 clips, 3 classes") != std::string::npos);
    const auto manifest = slurp(dir / "manifest.json");
    CHECK(manifest.find("\"seed\": 123") != std::string::npos);

    const auto overridden = run_cli("synth --config " + (dir / "run.ini").string() +
                                        " --classes 2 --out-dir " + dir.str(),
                                    dir.str());
    REQUIRE(overridden.exit_code == 0);
    CHECK(overridden.out.find("4 clips, 2 classes") != std::string::npos);
}

TEST_CASE("cli: SONOSTACK_SEED provides the fallback seed") {
    test_support::TempDir dir("cli_envseed");
    const auto r = run_cli("synth --classes 2 --per-class 2 --folds 2 --out-dir " + dir.str(),
                           dir.str(), "SONOSTACK_SEED=777");
    REQUIRE(r.exit_code == 0);
    const auto manifest = slurp(dir / "manifest.json");
    CHECK(manifest.find("\"seed\": 777") != std::string::npos);
}
