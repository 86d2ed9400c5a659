// uhfsynth command line: corpus generation, training, inference, evaluation,
// the field ablation grid, scaling benchmarks, and the acceptance self-test.
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>

#include "uhfsynth/config.hpp"
#include "uhfsynth/png_io.hpp"
#include "uhfsynth/selftest.hpp"

namespace {

using namespace uhfsynth;
namespace fs = std::filesystem;

const char* kUsage =
    R"(usage: uhfsynth <subcommand> [--config FILE] [--key value ...]

subcommands:
  gen-data   synthesize a paired corpus and write its manifest
  train      fit a model on a corpus manifest
  infer      run a checkpoint over a volume
  eval       score a checkpoint on a manifest split
  ablate     train the field-strength ablation grid
  bench      time the attention towers and fit scaling exponents
  selftest   run the acceptance checks

options:
  --config FILE   flat key=value lines; '#' starts a comment
  --key value     override any config key (precedence: defaults < file < flags)
  --help          print this text

every run writes its resolved configuration to <run_dir>/config.txt before
doing any work; that file is itself a valid --config input.
)";

std::string read_text_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) usage_fail("config: cannot read file '", path, "'");
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    check(static_cast<bool>(os), "cannot open '", path, "' for writing");
    os << text;
    check(static_cast<bool>(os), "write failed for '", path, "'");
}

struct Cli {
    std::string subcommand;
    Config cfg;
};

Cli parse_cli(int argc, char** argv) {
    static const std::set<std::string> subcommands{"gen-data", "train",  "infer",   "eval",
                                                   "ablate",   "bench", "selftest"};
    if (argc < 2) usage_fail("missing subcommand");
    Cli cli;
    cli.subcommand = argv[1];
    if (!subcommands.count(cli.subcommand))
        usage_fail("unknown subcommand '", cli.subcommand, "'");

    std::string config_path;
    std::vector<std::pair<std::string, std::string>> overrides;
    for (int i = 2; i < argc; ++i) {
        std::string arg = argv[i];
        if (arg.rfind("--", 0) != 0) usage_fail("unexpected argument '", arg, "'");
        arg = arg.substr(2);
        std::string key, value;
        const size_t eq = arg.find('=');
        if (eq != std::string::npos) {
            key = arg.substr(0, eq);
            value = arg.substr(eq + 1);
        } else {
            key = arg;
            if (i + 1 >= argc) usage_fail("flag '--", key, "' expects a value");
            value = argv[++i];
        }
        if (key.empty()) usage_fail("empty flag name");
        if (key == "config") {
            if (!config_path.empty()) usage_fail("'--config' given twice");
            config_path = value;
        } else {
            overrides.emplace_back(std::move(key), std::move(value));
        }
    }

    if (config_path.empty()) {
        cli.cfg = resolve_config(nullptr, overrides);
    } else {
        const std::string text = read_text_file(config_path);
        cli.cfg = resolve_config(&text, overrides);
    }
    return cli;
}

/// Resolve (and create) the run directory: explicit run_dir key, or a fresh
/// runs/<timestamp>-<tag> with a numeric suffix on collision.
fs::path ensure_run_dir(const Config& cfg, const std::string& subcommand) {
    std::string dir = cfg.get_string("run_dir");
    if (dir.empty()) {
        std::string tag = cfg.get_string("tag");
        if (tag.empty()) tag = subcommand;
        std::time_t now = std::time(nullptr);
        std::tm tm{};
        gmtime_r(&now, &tm);
        char stamp[32];
        std::strftime(stamp, sizeof(stamp), "%Y%m%d-%H%M%S", &tm);
        fs::path base = fs::path("runs") / (std::string(stamp) + "-" + tag);
        fs::path candidate = base;
        for (int n = 2; fs::exists(candidate); ++n)
            candidate = base.string() + "-" + std::to_string(n);
        dir = candidate.string();
    }
    fs::create_directories(dir);
    return dir;
}

int cmd_gen_data(const Config& cfg, const fs::path& run) {
    const CorpusSpec spec = corpus_spec_from(cfg);
    std::string out_dir = cfg.get_string("output");
    if (out_dir.empty()) out_dir = (run / "corpus").string();
    const DatasetManifest m = build_corpus(spec, out_dir);

    std::map<std::string, int64_t> split_counts;
    int64_t n15 = 0;
    for (const auto& c : m.cases) {
        ++split_counts[c.split];
        if (c.field_strength == 1.5) ++n15;
    }
    std::printf("wrote %zu cases (%lld x 1.5T, %lld x 3T) to %s\n", m.cases.size(),
                static_cast<long long>(n15), static_cast<long long>(m.cases.size() - n15),
                out_dir.c_str());
    std::printf("splits: train %lld, val %lld, test %lld\n",
                static_cast<long long>(split_counts["train"]),
                static_cast<long long>(split_counts["val"]),
                static_cast<long long>(split_counts["test"]));
    std::printf("manifest: %s\n", (fs::path(out_dir) / "manifest.csv").string().c_str());
    return 0;
}

int cmd_train(const Config& cfg, const fs::path& run) {
    const std::string mpath = cfg.get_string("data");
    if (mpath.empty()) usage_fail("train: config key 'data' must point to a corpus manifest");
    const DatasetManifest m = load_manifest(mpath);
    const FitResult fr = fit(train_config_from(cfg), model_config_from(cfg), m, run.string(),
                             cfg.get_string("resume"));
    std::printf("trained %lld epochs; best val nmse %s\n",
                static_cast<long long>(fr.epochs_run), fmt_real(fr.best_val_nmse).c_str());
    std::printf("best checkpoint: %s\n", fr.best_path.c_str());
    std::printf("last checkpoint: %s\n", fr.last_path.c_str());
    std::printf("log: %s\n", fr.log_path.c_str());
    return 0;
}

int cmd_infer(const Config& cfg, const fs::path& run) {
    const std::string ckpt = cfg.get_string("checkpoint");
    const std::string input = cfg.get_string("input");
    if (ckpt.empty()) usage_fail("infer: config key 'checkpoint' is required");
    if (input.empty()) usage_fail("infer: config key 'input' must point to a volume");
    const Volume in = read_volume(input);
    InferResult r = infer(ckpt, in);

    std::string out = cfg.get_string("output");
    if (out.empty()) out = (run / "output.uvol").string();
    write_volume(r.output, out);
    std::printf("wrote %s (%lld x %lld x %lld)\n", out.c_str(),
                static_cast<long long>(r.output.depth), static_cast<long long>(r.output.height),
                static_cast<long long>(r.output.width));
    if (cfg.get_bool("png")) {
        const auto slices = extract_slices(r.output);
        for (size_t d = 0; d < slices.size(); ++d) {
            char name[32];
            std::snprintf(name, sizeof(name), "output_d%03zu.png", d);
            write_slice_png((run / name).string(), slices[d]);
        }
        std::printf("rendered %zu png slices into %s\n", slices.size(), run.string().c_str());
    }
    std::printf("median forward %s s/slice over %zu slices\n",
                fmt_real(r.median_slice_seconds, 4).c_str(), r.slice_seconds.size());
    return 0;
}

int cmd_eval(const Config& cfg, const fs::path& run) {
    const std::string ckpt = cfg.get_string("checkpoint");
    const std::string mpath = cfg.get_string("data");
    if (ckpt.empty()) usage_fail("eval: config key 'checkpoint' is required");
    if (mpath.empty()) usage_fail("eval: config key 'data' must point to a corpus manifest");
    const DatasetManifest m = load_manifest(mpath);
    ModelParams params = model_from_checkpoint(load_checkpoint(ckpt));

    std::vector<MetricSample> reference;
    const std::string ref_path = cfg.get_string("reference");
    if (!ref_path.empty()) reference = load_samples(ref_path);

    const TestRunResult r =
        run_test(params, m, cfg.get_int("slice_height"), cfg.get_int("slice_width"),
                 cfg.get_string("model_label"), ref_path.empty() ? nullptr : &reference,
                 cfg.get_string("split"));
    write_text_file((run / "report.csv").string(), r.csv);
    write_text_file((run / "samples.csv").string(), samples_csv(r.samples));
    std::fputs(r.csv.c_str(), stdout);
    std::printf("report: %s\n", (run / "report.csv").string().c_str());
    std::printf("samples: %s\n", (run / "samples.csv").string().c_str());
    return 0;
}

int cmd_ablate(const Config& cfg, const fs::path& run) {
    const std::string mpath = cfg.get_string("data");
    if (mpath.empty()) usage_fail("ablate: config key 'data' must point to a corpus manifest");
    AblationSpec spec;
    spec.model = model_config_from(cfg);
    spec.train = train_config_from(cfg);
    spec.steps_budget = cfg.get_int("steps_budget");
    const AblationResult r = run_ablation(spec, load_manifest(mpath));
    write_text_file((run / "ablation.csv").string(), r.csv);
    std::fputs(r.csv.c_str(), stdout);
    std::printf("grid: %s\n", (run / "ablation.csv").string().c_str());
    return 0;
}

int cmd_bench(const Config& cfg, const fs::path& run) {
    const BenchReport rep = bench_scaling({{32, 48}, {64, 96}, {128, 192}, {256, 384}},
                                          {{16, 24}, {24, 36}, {32, 48}, {48, 72}, {64, 96}},
                                          cfg.get_int("repeats"));
    write_text_file((run / "bench.csv").string(), rep.csv);
    std::fputs(rep.csv.c_str(), stdout);
    std::printf("mdta exponent: %s\n", fmt_real(rep.mdta_exponent, 4).c_str());
    std::printf("spatial exponent: %s\n", fmt_real(rep.spatial_exponent, 4).c_str());
    std::printf("timings: %s\n", (run / "bench.csv").string().c_str());
    return 0;
}

int cmd_selftest(const Config& cfg, const fs::path& run) {
    SelftestOptions opt;
    opt.scratch_dir = (run / "scratch").string();
    opt.seed = static_cast<uint64_t>(cfg.get_int("seed"));
    const int failures = run_selftest(std::cout, opt);
    return failures == 0 ? 0 : 1;
}

} // namespace

int main(int argc, char** argv) {
    for (int i = 1; i < argc; ++i) {
        const std::string a = argv[i];
        if (a == "--help" || a == "-h" || a == "help") {
            std::fputs(kUsage, stdout);
            return 0;
        }
    }
    try {
        const Cli cli = parse_cli(argc, argv);
        // bench measures single-thread scaling; everything else honors the key
        if (cli.subcommand == "bench")
            set_threads(1);
        else
            set_threads(static_cast<int>(cli.cfg.get_int("threads")));

        const fs::path run = ensure_run_dir(cli.cfg, cli.subcommand);
        write_text_file((run / "config.txt").string(), config_echo(cli.cfg));

        if (cli.subcommand == "gen-data") return cmd_gen_data(cli.cfg, run);
        if (cli.subcommand == "train") return cmd_train(cli.cfg, run);
        if (cli.subcommand == "infer") return cmd_infer(cli.cfg, run);
        if (cli.subcommand == "eval") return cmd_eval(cli.cfg, run);
        if (cli.subcommand == "ablate") return cmd_ablate(cli.cfg, run);
        if (cli.subcommand == "bench") return cmd_bench(cli.cfg, run);
        if (cli.subcommand == "selftest") return cmd_selftest(cli.cfg, run);
        usage_fail("unknown subcommand '", cli.subcommand, "'");
    } catch (const uhfsynth::UsageError& e) {
        std::fprintf(stderr, "error: %s\n\n%s", e.what(), kUsage);
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
