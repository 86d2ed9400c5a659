#pragma once
// Experimental protocol: hold-out evaluation with Welch statistics against a
// reference run, the field-strength ablation grid, a closed-form cost model
// cross-checked against the MAC instrumentation, wall-time scaling fits for
// the two attention families, and checkpoint-driven volume inference.

#if __has_include(<malloc.h>)
#include <malloc.h>
#endif

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "uhfsynth/checkpoint.hpp"
#include "uhfsynth/training.hpp"

namespace uhfsynth {

// ---------------------------------------------------------------------------
// Cost model. Counts fused multiply-accumulates, the same unit the conv2d and
// matmul instrumentation records, for one sample (batch 1). Everything else
// in a block (norms, softmax, activations, residual adds) is linear work that
// the tables ignore.
// ---------------------------------------------------------------------------

enum class BlockKind { Mdta, Gdfn, RestormerBlock, SpatialAttention, Downsample, Upsample, SkipFuse };

inline int64_t conv_flops(int64_t in_ch, int64_t out_ch, int64_t kernel, int64_t height,
                          int64_t width) {
    return in_ch * out_ch * kernel * kernel * height * width;
}

inline int64_t flops(BlockKind kind, int64_t channels, int64_t height, int64_t width,
                     int64_t heads = 1, real gdfn_expansion = 2.66) {
    check(channels >= 1 && height >= 1 && width >= 1, "flops: bad geometry ", channels, "x",
          height, "x", width);
    const int64_t c = channels, hw = height * width;
    switch (kind) {
    case BlockKind::Mdta:
        // qkv pointwise + qkv depthwise + two channel-attention matmuls + out
        check(heads >= 1 && c % heads == 0, "flops: mdta channels ", c,
              " not divisible by heads ", heads);
        return 3 * c * c * hw + 27 * c * hw + 2 * hw * (c * c / heads) + c * c * hw;
    case BlockKind::Gdfn: {
        const int64_t hd = detail::gdfn_hidden(c, gdfn_expansion);
        // expand pointwise (2*hd) + gated depthwise + project back to c
        return 2 * hd * c * hw + 18 * hd * hw + c * hd * hw;
    }
    case BlockKind::RestormerBlock:
        return flops(BlockKind::Mdta, c, height, width, heads) +
               flops(BlockKind::Gdfn, c, height, width, heads, gdfn_expansion);
    case BlockKind::SpatialAttention:
        // q/k/v/out pointwise + two token-attention matmuls, quadratic in hw
        return 4 * c * c * hw + 2 * c * hw * hw;
    case BlockKind::Downsample:
        check(c % 2 == 0, "flops: downsample needs even channels, got ", c);
        return (c / 2) * c * 9 * hw;
    case BlockKind::Upsample:
        return 2 * c * c * 9 * hw;
    case BlockKind::SkipFuse:
        // concat of 2c channels fused back to c by a 1x1 conv
        return c * 2 * c * hw;
    }
    fail("flops: unknown block kind");
}

/// Whole-network cost for one [1, in, height, width] sample. Mirrors
/// model_forward stage by stage and must agree with the instrumented counter
/// to the last MAC.
inline int64_t model_flops(const ModelConfig& cfg, int64_t height, int64_t width) {
    cfg.validate();
    const int64_t div = cfg.spatial_divisor();
    check(height % div == 0 && width % div == 0, "model_flops: spatial dims ", height, "x", width,
          " must be divisible by ", div);
    const auto& ch = cfg.level_channels;
    auto h_at = [&](int l) { return height >> l; };
    auto w_at = [&](int l) { return width >> l; };

    int64_t f = conv_flops(cfg.in_channels, ch[0], 3, h_at(0), w_at(0));
    for (int l = 0; l < ModelConfig::levels; ++l) {
        const auto lu = static_cast<size_t>(l);
        f += cfg.encoder_blocks[lu] * flops(BlockKind::RestormerBlock, ch[lu], h_at(l), w_at(l),
                                            cfg.heads[lu], cfg.gdfn_expansion);
        if (l + 1 < ModelConfig::levels)
            f += flops(BlockKind::Downsample, ch[lu], h_at(l), w_at(l));
    }
    const int bot = ModelConfig::levels - 1;
    f += cfg.bottleneck_channel_blocks * flops(BlockKind::RestormerBlock, ch.back(), h_at(bot),
                                               w_at(bot), cfg.bottleneck_heads,
                                               cfg.gdfn_expansion);
    f += cfg.bottleneck_spatial_blocks *
         flops(BlockKind::SpatialAttention, ch.back(), h_at(bot), w_at(bot));
    for (int l = 0; l < ModelConfig::levels; ++l) {
        const int lev = ModelConfig::levels - 1 - l; // decoder level l runs at this depth
        const auto lv = static_cast<size_t>(lev);
        f += cfg.decoder_blocks[static_cast<size_t>(l)] *
             flops(BlockKind::RestormerBlock, ch[lv], h_at(lev), w_at(lev), cfg.heads[lv],
                   cfg.gdfn_expansion);
        if (l + 1 < ModelConfig::levels) {
            f += flops(BlockKind::Upsample, ch[lv], h_at(lev), w_at(lev));
            // fuse runs after the shuffle, at the shallower level's width
            f += flops(BlockKind::SkipFuse, ch[lv - 1], h_at(lev - 1), w_at(lev - 1));
        }
    }
    f += conv_flops(ch[0], cfg.out_channels, 3, h_at(0), w_at(0));
    return f;
}

// ---------------------------------------------------------------------------
// Hold-out evaluation
// ---------------------------------------------------------------------------

using ForwardFn = std::function<Tensor(const Tensor&)>;

struct TestRunResult {
    std::vector<MetricSample> samples;     // one per evaluated slice, in split order
    std::vector<MetricReport> reports;     // aggregated per field strength
    std::map<std::string, real> p_values;  // "<field>:<metric>", present with a reference
    std::string csv;                       // results-table shape
};

namespace detail {

/// Per-slice forward through an arbitrary [1,1,H,W] -> [1,1,H,W] map.
inline std::vector<MetricSample> eval_pairs_fn(const ForwardFn& fwd,
                                               const std::vector<SlicePair>& pairs) {
    check(!pairs.empty(), "run_test: no slices to evaluate");
    NoGradGuard ng;
    std::vector<MetricSample> out;
    out.reserve(pairs.size());
    for (const auto& p : pairs) {
        Tensor x = slices_to_batch({&p.x});
        Tensor yhat = fwd(x);
        check(yhat.shape() == x.shape(), "run_test: forward changed shape ", x.shape().str(),
              " -> ", yhat.shape().str());
        out.push_back(eval_sample(p, yhat.data()));
    }
    return out;
}

/// Two-sided Welch p for a run's metric values against a reference's.
/// Infinite PSNR sentinels are dropped from both sides, consistent with the
/// mean/sd exclusion. A run compared against its own values must land on
/// p = 1 even when a metric is constant, so that degenerate case is pinned
/// before the variance check can reject it. Returns false when no defensible
/// test exists (too few finite values).
inline bool welch_p_against(const std::vector<real>& run, const std::vector<real>& ref,
                            real* p_out) {
    std::vector<real> a, b;
    for (real v : run)
        if (std::isfinite(v)) a.push_back(v);
    for (real v : ref)
        if (std::isfinite(v)) b.push_back(v);
    if (a == b) {
        *p_out = 1.0;
        return true;
    }
    if (a.size() < 2 || b.size() < 2) return false;
    bool const_a = std::all_of(a.begin(), a.end(), [&](real v) { return v == a[0]; });
    bool const_b = std::all_of(b.begin(), b.end(), [&](real v) { return v == b[0]; });
    if (const_a && const_b) return false; // undefined: zero variance, distinct means
    *p_out = welch_t_test(a, b).p_two_tailed;
    return true;
}

inline const std::array<const char*, 3> kMetricNames = {"nmse", "psnr_db", "ssim"};

inline std::map<std::string, std::array<std::vector<real>, 3>> metric_vectors_by_field(
    const std::vector<MetricSample>& samples) {
    std::map<std::string, std::array<std::vector<real>, 3>> by_field;
    for (const auto& s : samples) {
        auto& v = by_field[field_label(s.field_strength)];
        v[0].push_back(s.nmse);
        v[1].push_back(s.psnr_db);
        v[2].push_back(s.ssim);
    }
    return by_field;
}

} // namespace detail

/// Evaluate a forward map over prepared slice pairs and aggregate per field
/// strength. When `reference` carries a previous run over the same split, a
/// Welch test per field and metric fills the p column of the CSV.
inline TestRunResult run_test_fn(const ForwardFn& fwd, const std::vector<SlicePair>& pairs,
                                 const std::string& model_label,
                                 const std::vector<MetricSample>* reference = nullptr) {
    TestRunResult r;
    r.samples = detail::eval_pairs_fn(fwd, pairs);
    if (reference) {
        check(reference->size() == r.samples.size(), "run_test: reference carries ",
              reference->size(), " samples but this run produced ", r.samples.size());
        auto run_v = detail::metric_vectors_by_field(r.samples);
        auto ref_v = detail::metric_vectors_by_field(*reference);
        check(run_v.size() == ref_v.size(), "run_test: reference field groups differ");
        for (const auto& [field, vecs] : run_v) {
            auto it = ref_v.find(field);
            check(it != ref_v.end(), "run_test: reference lacks field group '", field, "'");
            for (size_t m = 0; m < detail::kMetricNames.size(); ++m) {
                real p = 0.0;
                if (detail::welch_p_against(vecs[m], it->second[m], &p))
                    r.p_values[field + ":" + detail::kMetricNames[m]] = p;
            }
        }
    }
    r.reports = aggregate(r.samples, GroupBy::FieldStrength, model_label);
    r.csv = metrics_csv(r.reports, reference ? &r.p_values : nullptr);
    return r;
}

/// Evaluate a trained model on one split of a corpus (default the test split).
inline TestRunResult run_test(ModelParams& params, const DatasetManifest& manifest,
                              int64_t slice_height, int64_t slice_width,
                              const std::string& model_label,
                              const std::vector<MetricSample>* reference = nullptr,
                              const std::string& split = "test") {
    auto pairs = load_slice_pairs(manifest, split, slice_height, slice_width);
    check(!pairs.empty(), "run_test: split '", split, "' is empty");
    ForwardFn fwd = [&params](const Tensor& x) { return model_forward(params, x); };
    return run_test_fn(fwd, pairs, model_label, reference);
}

// ---------------------------------------------------------------------------
// Per-slice sample files, so a later run can test against an earlier one.
// ---------------------------------------------------------------------------

inline std::string samples_csv(const std::vector<MetricSample>& samples) {
    std::ostringstream os;
    os << "case_id,slice_index,field_strength,nmse,psnr_db,ssim\n";
    for (const auto& s : samples)
        os << s.case_id << "," << s.slice_index << "," << fmt_real(s.field_strength) << ","
           << fmt_real(s.nmse) << "," << fmt_real(s.psnr_db) << "," << fmt_real(s.ssim) << "\n";
    return os.str();
}

inline std::vector<MetricSample> parse_samples_csv(const std::string& text) {
    std::istringstream is(text);
    std::string line;
    check(static_cast<bool>(std::getline(is, line)), "samples csv: empty file");
    check(line == "case_id,slice_index,field_strength,nmse,psnr_db,ssim",
          "samples csv: unexpected header '", line, "'");
    std::vector<MetricSample> out;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::istringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) cells.push_back(cell);
        check(cells.size() == 6, "samples csv: expected 6 columns, got ", cells.size(), " in '",
              line, "'");
        MetricSample s;
        s.case_id = cells[0];
        s.slice_index = std::stoll(cells[1]);
        s.field_strength = std::stod(cells[2]);
        s.nmse = std::stod(cells[3]);
        s.psnr_db = std::stod(cells[4]);
        s.ssim = std::stod(cells[5]);
        out.push_back(std::move(s));
    }
    return out;
}

inline void save_samples(const std::vector<MetricSample>& samples, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    check(static_cast<bool>(os), "save_samples: cannot open ", path);
    os << samples_csv(samples);
    check(static_cast<bool>(os), "save_samples: write failed for ", path);
}

inline std::vector<MetricSample> load_samples(const std::string& path) {
    const auto bytes = detail::read_file_bytes(path);
    return parse_samples_csv(std::string(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

// ---------------------------------------------------------------------------
// Field-strength ablation: one shared initialization, three training diets
// (both fields, 1.5T only, 3T only), equal optimizer-step budgets, evaluated
// on the common test split per field with Welch p against the mixed run.
// ---------------------------------------------------------------------------

inline const std::array<const char*, 3> kAblationStrategies = {"mixed", "only_1.5T", "only_3T"};

struct AblationSpec {
    ModelConfig model;
    TrainConfig train;        // seed fixes both the shared init and batch order
    int64_t steps_budget = 40;

    void validate() const {
        model.validate();
        train.validate();
        check(steps_budget >= 1, "AblationSpec: steps_budget must be >= 1, got ", steps_budget);
    }
};

struct AblationResult {
    std::map<std::string, std::vector<MetricSample>> samples; // per strategy
    std::string csv;
};

inline AblationResult run_ablation(const AblationSpec& spec, const DatasetManifest& manifest) {
    spec.validate();
    auto train_pairs =
        load_slice_pairs(manifest, "train", spec.train.slice_height, spec.train.slice_width);
    auto test_pairs =
        load_slice_pairs(manifest, "test", spec.train.slice_height, spec.train.slice_width);
    auto require_field = [](const std::vector<SlicePair>& pairs, real field, const char* split) {
        for (const auto& p : pairs)
            if (p.field_strength == field) return;
        fail("run_ablation: no ", detail::field_label(field), " cases in '", split, "' split");
    };
    for (real f : {1.5, 3.0}) {
        require_field(train_pairs, f, "train");
        require_field(test_pairs, f, "test");
    }

    AblationResult out;
    std::map<std::string, std::map<std::string, std::array<std::vector<real>, 3>>> vecs;
    std::map<std::string, std::map<std::string, MetricReport>> stats;
    for (const char* strategy : kAblationStrategies) {
        std::vector<SlicePair> diet;
        for (const auto& p : train_pairs) {
            if (std::string(strategy) == "only_1.5T" && p.field_strength != 1.5) continue;
            if (std::string(strategy) == "only_3T" && p.field_strength != 3.0) continue;
            diet.push_back(p);
        }
        ModelParams params = build(spec.model, spec.train.seed);
        params.set_requires_grad(true);
        OptimizerState st;
        train_steps(params, st, diet, spec.train, spec.steps_budget);
        ForwardFn fwd = [&params](const Tensor& x) { return model_forward(params, x); };
        auto samples = detail::eval_pairs_fn(fwd, test_pairs);
        vecs[strategy] = detail::metric_vectors_by_field(samples);
        for (auto& rep : aggregate(samples, GroupBy::FieldStrength, strategy))
            stats[strategy][rep.group] = rep;
        out.samples[strategy] = std::move(samples);
    }

    std::ostringstream os;
    os << "strategy,eval_field,metric,mean,sd,n,excluded_infinite,cross_domain,p_vs_mixed\n";
    for (const char* strategy : kAblationStrategies) {
        for (const char* field : {"1.5T", "3T"}) {
            const MetricReport& rep = stats[strategy][field];
            const MetricStat* cols[] = {&rep.nmse, &rep.psnr_db, &rep.ssim};
            const bool cross =
                (std::string(strategy) == "only_1.5T" && std::string(field) == "3T") ||
                (std::string(strategy) == "only_3T" && std::string(field) == "1.5T");
            for (size_t m = 0; m < detail::kMetricNames.size(); ++m) {
                os << strategy << "," << field << "," << detail::kMetricNames[m] << ","
                   << fmt_real(cols[m]->mean) << "," << fmt_real(cols[m]->sd) << "," << cols[m]->n
                   << "," << cols[m]->excluded_infinite << "," << (cross ? 1 : 0) << ",";
                if (std::string(strategy) != "mixed") {
                    real p = 0.0;
                    if (detail::welch_p_against(vecs[strategy][field][m], vecs["mixed"][field][m],
                                                &p))
                        os << fmt_real(p);
                }
                os << "\n";
            }
        }
    }
    out.csv = os.str();
    return out;
}

// ---------------------------------------------------------------------------
// Wall-time scaling of the two attention families. Single isolated block,
// single thread, median over repeats after one discarded warmup run, and a
// log-log least-squares fit of median time against pixel count.
// ---------------------------------------------------------------------------

struct BenchPoint {
    std::string tower; // "mdta" or "spatial"
    int64_t height = 0, width = 0;
    int64_t repeats = 0;
    real median_seconds = 0.0;
};

struct BenchReport {
    std::vector<BenchPoint> points;
    real mdta_exponent = 0.0;    // fitted growth in pixel count; ~1 is linear
    real spatial_exponent = 0.0; // ~2 is quadratic
    std::string csv;
};

namespace detail {

inline real median_of(std::vector<real> v) {
    check(!v.empty(), "median_of: empty");
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline real fit_log_log_slope(const std::vector<real>& x, const std::vector<real>& y) {
    check(x.size() == y.size() && x.size() >= 2, "fit_log_log_slope: need >= 2 points");
    const real n = static_cast<real>(x.size());
    real sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (size_t i = 0; i < x.size(); ++i) {
        check(x[i] > 0.0 && y[i] > 0.0, "fit_log_log_slope: values must be positive");
        const real lx = std::log(x[i]), ly = std::log(y[i]);
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

} // namespace detail

/// Median forward wall time of one isolated attention block at a given shape.
/// Pins execution to one thread so the fit measures algorithmic growth.
inline real bench_forward_median(BlockKind kind, int64_t channels, int64_t heads, int64_t height,
                                 int64_t width, int64_t repeats) {
    check(kind == BlockKind::Mdta || kind == BlockKind::SpatialAttention,
          "bench_forward_median: only the attention blocks are benchmarked");
    check(repeats >= 1, "bench_forward_median: repeats must be >= 1, got ", repeats);
#if defined(M_MMAP_THRESHOLD) && defined(M_TRIM_THRESHOLD)
    // keep the big score buffers on the heap across runs; re-mapping and
    // first-touch faulting them on every forward would swamp the timings
    static const bool heap_tuned = [] {
        mallopt(M_MMAP_THRESHOLD, 1 << 30);
        mallopt(M_TRIM_THRESHOLD, 1 << 30);
        return true;
    }();
    (void)heap_tuned;
#endif
    set_threads(1);
    NoGradGuard ng;
    Rng rng(mix_seed(0xbe9c4u, static_cast<uint64_t>(height * width)));
    Tensor x = Tensor::zeros(Shape{1, channels, height, width});
    for (auto& v : x.mutable_data()) v = rng.uniform(-1.0, 1.0);

    MdtaParams mp;
    SpatialAttnParams sp;
    if (kind == BlockKind::Mdta)
        mp = init_mdta(channels, heads, rng);
    else
        sp = init_spatial_attn(channels, heads, rng);
    auto run = [&]() {
        return kind == BlockKind::Mdta ? mdta_forward(x, mp) : spatial_attention(x, sp);
    };

    run(); // warmup, discarded
    std::vector<real> times;
    times.reserve(static_cast<size_t>(repeats));
    for (int64_t r = 0; r < repeats; ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        Tensor y = run();
        const auto t1 = std::chrono::steady_clock::now();
        check(std::isfinite(y.data()[0]), "bench_forward_median: non-finite output");
        times.push_back(std::chrono::duration<real>(t1 - t0).count());
    }
    return detail::median_of(times);
}

inline BenchReport bench_scaling(
    const std::vector<std::array<int64_t, 2>>& mdta_res = {{32, 48}, {64, 96}, {128, 192},
                                                           {256, 384}},
    const std::vector<std::array<int64_t, 2>>& spatial_res = {{16, 24}, {24, 36}, {32, 48},
                                                              {48, 72}, {64, 96}},
    int64_t repeats = 3, int64_t channels = 32, int64_t heads = 2) {
    check(mdta_res.size() >= 2 && spatial_res.size() >= 2,
          "bench_scaling: need >= 2 resolutions per tower");
    BenchReport rep;
    auto tower = [&](BlockKind kind, const char* name,
                     const std::vector<std::array<int64_t, 2>>& res) {
        std::vector<real> pixels, medians;
        for (const auto& hw : res) {
            BenchPoint pt;
            pt.tower = name;
            pt.height = hw[0];
            pt.width = hw[1];
            pt.repeats = repeats;
            pt.median_seconds = bench_forward_median(kind, channels, heads, hw[0], hw[1], repeats);
            pixels.push_back(static_cast<real>(hw[0] * hw[1]));
            medians.push_back(pt.median_seconds);
            rep.points.push_back(std::move(pt));
        }
        return detail::fit_log_log_slope(pixels, medians);
    };
    rep.mdta_exponent = tower(BlockKind::Mdta, "mdta", mdta_res);
    rep.spatial_exponent = tower(BlockKind::SpatialAttention, "spatial", spatial_res);

    std::ostringstream os;
    os << "tower,height,width,pixels,repeats,median_seconds\n";
    for (const auto& pt : rep.points)
        os << pt.tower << "," << pt.height << "," << pt.width << "," << pt.height * pt.width << ","
           << pt.repeats << "," << fmt_real(pt.median_seconds) << "\n";
    rep.csv = os.str();
    return rep;
}

// ---------------------------------------------------------------------------
// Volume inference. Slices are zero-padded up to the network's spatial
// divisor, pushed through, and cropped back, so output dims always equal
// input dims. Latency is reported, never asserted.
// ---------------------------------------------------------------------------

struct InferResult {
    Volume output;                   // value range (-1, 1) from the output activation
    std::vector<real> slice_seconds; // forward wall time per slice
    real median_slice_seconds = 0.0;
};

inline InferResult infer_volume(ModelParams& params, const Volume& input) {
    const ModelConfig& cfg = params.config;
    check(cfg.in_channels == 1 && cfg.out_channels == 1,
          "infer: model must map one channel to one channel, got ", cfg.in_channels, " -> ",
          cfg.out_channels);
    input.validate();
    const int64_t div = cfg.spatial_divisor();
    const int64_t H = input.height, W = input.width;
    const int64_t ph = (H + div - 1) / div * div;
    const int64_t pw = (W + div - 1) / div * div;
    const int64_t bh = (ph - H + 1) / 2, bw = (pw - W + 1) / 2; // pad offsets to undo

    NoGradGuard ng;
    InferResult r;
    r.output.depth = input.depth;
    r.output.height = H;
    r.output.width = W;
    r.output.spacing_mm = input.spacing_mm;
    r.output.value_lo = -1.0;
    r.output.value_hi = 1.0;
    r.output.voxels.resize(static_cast<size_t>(input.numel()));

    const auto slices = extract_slices(input);
    for (int64_t d = 0; d < input.depth; ++d) {
        const Slice padded = center_crop_or_pad(slices[static_cast<size_t>(d)], ph, pw);
        const auto t0 = std::chrono::steady_clock::now();
        Tensor y = model_forward(params, slices_to_batch({&padded}));
        const auto t1 = std::chrono::steady_clock::now();
        r.slice_seconds.push_back(std::chrono::duration<real>(t1 - t0).count());
        const auto& row = y.data();
        for (int64_t i = 0; i < H; ++i)
            for (int64_t j = 0; j < W; ++j)
                r.output.at(d, i, j) = row[static_cast<size_t>((bh + i) * pw + (bw + j))];
    }
    r.median_slice_seconds = detail::median_of(r.slice_seconds);
    return r;
}

inline InferResult infer(const std::string& checkpoint_path, const Volume& input) {
    Checkpoint ck = load_checkpoint(checkpoint_path);
    ModelParams params = model_from_checkpoint(ck);
    return infer_volume(params, input);
}

} // namespace uhfsynth
