// Config resolution on one side, the installed binary on the other: flag
// parsing, precedence, echo round-trips, and a full gen-data -> train ->
// eval -> infer pipeline driven through the real executable.

#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <sys/wait.h>

#include "uhfsynth/config.hpp"
#include "uhfsynth/synthdata.hpp"

using namespace uhfsynth;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    const auto bytes = detail::read_file_bytes(p.string());
    return std::string(bytes.begin(), bytes.end());
}

template <typename Fn>
std::string usage_error_of(Fn&& fn) {
    try {
        fn();
    } catch (const UsageError& e) {
        return e.what();
    }
    FAIL("expected a usage error");
    return "";
}

struct CliRun {
    int exit_code = -1;
    std::string out, err;
};

// Drives the real binary through the shell, capturing both streams.
CliRun run_cli(const std::string& args, const fs::path& scratch, const std::string& tag) {
    const fs::path out_path = scratch / (tag + ".out");
    const fs::path err_path = scratch / (tag + ".err");
    const std::string cmd = std::string("'") + UHFSYNTH_CLI_PATH + "' " + args + " > '" +
                            out_path.string() + "' 2> '" + err_path.string() + "'";
    const int status = std::system(cmd.c_str());
    CliRun r;
    r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(out_path);
    r.err = slurp(err_path);
    return r;
}

} // namespace

TEST_CASE("config defaults and typed access", "[cli]") {
    const Config c = default_config();
    CHECK(c.get_int("base_channels") == 48);
    CHECK(c.get_int("batch_size") == 8);
    CHECK(c.get_int("epochs") == 50);
    CHECK(c.get_bool("augment_flip"));
    CHECK(c.get_bool("stratify_by_field"));
    CHECK(c.get_real("gdfn_expansion") == 2.66);
    CHECK(c.get_real("lr") == 1e-4);
    CHECK(c.get_string("val_metric") == "nmse");
    CHECK(c.get_string("split") == "test");
    CHECK(c.get_string("run_dir").empty());

    // reading a key with the wrong type is a programming error, not bad input
    CHECK_THROWS_AS(c.get_int("lr"), Error);
    CHECK_THROWS_AS(c.get_string("epochs"), Error);
    CHECK_THROWS_WITH(c.get_bool("tag"), Catch::Matchers::ContainsSubstring("wrong type"));
}

TEST_CASE("config precedence and parse errors", "[cli]") {
    const std::string file_text =
        "# corpus shape\n"
        "n_cases = 10   # trailing comment\n"
        "height=32\n"
        "lr = 0.002\n";
    const Config c = resolve_config(&file_text, {{"lr", "0.004"}, {"tag", "smoke"}});
    CHECK(c.get_int("n_cases") == 10);
    CHECK(c.get_int("height") == 32);
    CHECK(c.get_real("lr") == 0.004); // flag beats file
    CHECK(c.get_string("tag") == "smoke");
    CHECK(c.get_int("width") == 96); // untouched default

    Config base = default_config();
    CHECK(usage_error_of([&] { apply_config_file(base, "seed 7\n"); })
              .find("expected key=value") != std::string::npos);
    CHECK(usage_error_of([&] { apply_config_file(base, "seed=1\nlr=0.1\nseed=2\n"); })
              .find("duplicate key 'seed' (lines 1 and 3)") != std::string::npos);
    CHECK(usage_error_of([&] { apply_config_file(base, "=5\n"); }).find("empty key") !=
          std::string::npos);
    CHECK(usage_error_of([&] { apply_config_file(base, "volume=9\n"); })
              .find("unknown key 'volume'") != std::string::npos);
    CHECK(usage_error_of([&] { apply_config_file(base, "epochs=ten\n"); })
              .find("expects an integer, got 'ten'") != std::string::npos);
    CHECK(usage_error_of([&] { apply_config_file(base, "augment_flip=yes\n"); })
              .find("augment_flip") != std::string::npos);
    CHECK(usage_error_of([&] { apply_config_file(base, "complexity=big\n"); })
              .find("complexity") != std::string::npos);
}

TEST_CASE("config echo is sorted, complete, and re-ingestible", "[cli]") {
    const Config c = resolve_config(nullptr, {{"seed", "7"}, {"heads", "2,4,8"}});
    const std::string echo = config_echo(c);

    std::istringstream is(echo);
    std::string line, prev;
    size_t lines = 0;
    while (std::getline(is, line)) {
        ++lines;
        CHECK(line.find(" = ") != std::string::npos);
        CHECK(prev < line); // strictly sorted by key
        prev = line;
    }
    CHECK(lines == c.values.size());
    CHECK(echo.find("seed = 7\n") != std::string::npos);
    CHECK(echo.find("heads = 2,4,8\n") != std::string::npos);

    Config back = default_config();
    apply_config_file(back, echo);
    CHECK(back.values == c.values);
}

TEST_CASE("config bridges to the library structs", "[cli]") {
    const Config c = default_config();

    const ModelConfig m = model_config_from(c);
    CHECK(m.level_channels == std::vector<int64_t>{48, 96, 192});
    CHECK(m.encoder_blocks == std::vector<int64_t>{1, 2, 2});
    CHECK(m.decoder_blocks == std::vector<int64_t>{2, 2, 1});
    CHECK(m.heads == std::vector<int64_t>{1, 2, 4});
    CHECK(m.bottleneck_channel_blocks == 16);
    CHECK(m.gdfn_expansion == 2.66);

    const TrainConfig t = train_config_from(c);
    CHECK(t.lr == 1e-4);
    CHECK(t.eps == 1e-8);
    CHECK(t.seed == 1);
    CHECK(t.slice_height == 64);
    CHECK(t.batch_size == 8);

    const CorpusSpec s = corpus_spec_from(c);
    CHECK(s.n_cases == 12);
    CHECK(s.depth == 4);
    CHECK(s.split.train_fraction == 0.745);

    const Config bad = resolve_config(nullptr, {{"heads", "1,2"}});
    CHECK(usage_error_of([&] { model_config_from(bad); })
              .find("expects 3 comma-separated integers") != std::string::npos);
}

TEST_CASE("cli usage surface", "[cli]") {
    const fs::path t = fresh_dir("uhfsynth_cli_usage");

    CliRun help = run_cli("--help", t, "help");
    CHECK(help.exit_code == 0);
    CHECK(help.out.find("usage: uhfsynth <subcommand>") != std::string::npos);
    CHECK(help.out.find("gen-data") != std::string::npos);
    CHECK(run_cli("eval --help", t, "help2").exit_code == 0);

    CliRun none = run_cli("", t, "none");
    CHECK(none.exit_code == 2);
    CHECK(none.err.find("missing subcommand") != std::string::npos);
    CHECK(none.err.find("usage:") != std::string::npos);

    CliRun unknown = run_cli("frobnicate", t, "unknown");
    CHECK(unknown.exit_code == 2);
    CHECK(unknown.err.find("unknown subcommand 'frobnicate'") != std::string::npos);

    CliRun badkey = run_cli("train --bogus 1", t, "badkey");
    CHECK(badkey.exit_code == 2);
    CHECK(badkey.err.find("unknown key 'bogus' (command line)") != std::string::npos);

    CliRun dangling = run_cli("train --epochs", t, "dangling");
    CHECK(dangling.exit_code == 2);
    CHECK(dangling.err.find("flag '--epochs' expects a value") != std::string::npos);

    CliRun stray = run_cli("train epochs", t, "stray");
    CHECK(stray.exit_code == 2);
    CHECK(stray.err.find("unexpected argument 'epochs'") != std::string::npos);

    CliRun twice = run_cli("train --config a --config b", t, "twice");
    CHECK(twice.exit_code == 2);
    CHECK(twice.err.find("'--config' given twice") != std::string::npos);

    CliRun nodata = run_cli("train --run_dir '" + (t / "r1").string() + "'", t, "nodata");
    CHECK(nodata.exit_code == 2);
    CHECK(nodata.err.find("key 'data'") != std::string::npos);

    // runtime failures (well-formed invocation, bad world) exit 1
    CliRun missing = run_cli("eval --checkpoint '" + (t / "no.ckpt").string() + "' --data '" +
                                 (t / "no.csv").string() + "' --run_dir '" +
                                 (t / "r2").string() + "'",
                             t, "missing");
    CHECK(missing.exit_code == 1);
    CHECK(missing.err.find("error:") != std::string::npos);
}

TEST_CASE("cli pipeline: gen-data, train, eval, infer", "[cli]") {
    const fs::path t = fresh_dir("uhfsynth_cli_pipeline");
    const std::string tiny_model =
        " --base_channels 8 --encoder_blocks 1,1,1 --decoder_blocks 1,1,1"
        " --bottleneck_channel_blocks 1 --bottleneck_spatial_blocks 1"
        " --slice_height 16 --slice_width 24";

    const fs::path gen_run = t / "gen";
    const fs::path corpus = t / "corpus";
    CliRun gen = run_cli("gen-data --run_dir '" + gen_run.string() + "' --output '" +
                             corpus.string() + "' --depth 2 --height 16 --width 24 --seed 5",
                         t, "gen");
    INFO(gen.err);
    REQUIRE(gen.exit_code == 0);
    CHECK(gen.out.find("wrote 12 cases (3 x 1.5T, 9 x 3T)") != std::string::npos);
    CHECK(gen.out.find("splits: train 9, val 2, test 1") != std::string::npos);
    const fs::path manifest = corpus / "manifest.csv";
    REQUIRE(fs::exists(manifest));
    CHECK(fs::exists(gen_run / "config.txt"));
    CHECK(slurp(gen_run / "config.txt").find("n_cases = 12\n") != std::string::npos);

    // the echoed config is a valid --config input and reproduces the corpus
    const fs::path corpus2 = t / "corpus2";
    CliRun regen = run_cli("gen-data --config '" + (gen_run / "config.txt").string() +
                               "' --run_dir '" + (t / "gen2").string() + "' --output '" +
                               corpus2.string() + "'",
                           t, "regen");
    INFO(regen.err);
    REQUIRE(regen.exit_code == 0);
    CHECK(slurp(manifest) == slurp(corpus2 / "manifest.csv"));
    const DatasetManifest man = load_manifest(manifest.string());
    const std::string first_vol = man.cases.front().input_path;
    CHECK(slurp(corpus / first_vol) == slurp(corpus2 / first_vol));

    const fs::path train_run = t / "train";
    CliRun train = run_cli("train --data '" + manifest.string() + "' --run_dir '" +
                               train_run.string() + "'" + tiny_model +
                               " --epochs 1 --batch_size 4 --augment_flip false",
                           t, "train");
    INFO(train.err);
    REQUIRE(train.exit_code == 0);
    CHECK(train.out.find("trained 1 epochs") != std::string::npos);
    REQUIRE(fs::exists(train_run / "best.ckpt"));
    CHECK(fs::exists(train_run / "last.ckpt"));
    const std::string log = slurp(train_run / "log.csv");
    CHECK(log.rfind("epoch,train_l1,val_nmse,val_psnr_db,val_ssim,wall_seconds\n1,", 0) == 0);

    const fs::path eval_run = t / "eval";
    CliRun eval = run_cli("eval --checkpoint '" + (train_run / "best.ckpt").string() +
                              "' --data '" + manifest.string() + "' --run_dir '" +
                              eval_run.string() + "'" + tiny_model + " --model_label tiny",
                          t, "eval");
    INFO(eval.err);
    REQUIRE(eval.exit_code == 0);
    const std::string report = slurp(eval_run / "report.csv");
    CHECK(report.rfind("model,field,metric,mean,sd,n,excluded_infinite,p_vs_reference\n", 0) ==
          0);
    CHECK(report.find("tiny,") != std::string::npos);
    CHECK(slurp(eval_run / "samples.csv")
              .rfind("case_id,slice_index,field_strength,nmse,psnr_db,ssim\n", 0) == 0);

    const fs::path infer_run = t / "infer";
    CliRun infer = run_cli("infer --checkpoint '" + (train_run / "best.ckpt").string() +
                               "' --input '" + (corpus / first_vol).string() + "' --run_dir '" +
                               infer_run.string() + "' --png true",
                           t, "infer");
    INFO(infer.err);
    REQUIRE(infer.exit_code == 0);
    CHECK(infer.out.find("median forward") != std::string::npos);
    REQUIRE(fs::exists(infer_run / "output.uvol"));
    CHECK(fs::exists(infer_run / "output_d000.png"));
    CHECK(fs::exists(infer_run / "output_d001.png"));

    const Volume in_vol = read_volume((corpus / first_vol).string());
    const Volume out_vol = read_volume((infer_run / "output.uvol").string());
    CHECK(out_vol.depth == in_vol.depth);
    CHECK(out_vol.height == in_vol.height);
    CHECK(out_vol.width == in_vol.width);
    for (real v : out_vol.voxels) {
        if (!(v > -1.0 && v < 1.0)) {
            FAIL("inferred voxel " << v << " outside the activation range");
        }
    }
}
