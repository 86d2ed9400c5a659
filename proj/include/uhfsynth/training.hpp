#pragma once

// Optimization recipe: mean-reduced L1 objective, AdamW with decoupled weight
// decay, seeded epoch loop with paired-flip augmentation, and validation-NMSE
// checkpoint selection. Training is a pure function of (seed, data, config);
// only the wall-time column of the log varies between reruns.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "uhfsynth/checkpoint.hpp"
#include "uhfsynth/metrics.hpp"
#include "uhfsynth/synthdata.hpp"

namespace uhfsynth {

struct TrainConfig {
    real lr = 1e-4;
    real beta1 = 0.9;
    real beta2 = 0.999;
    real eps = 1e-8;
    real weight_decay = 1e-4;
    int64_t batch_size = 8;
    int64_t epochs = 50;
    uint64_t seed = 0;
    bool augment_flip = true;
    std::string val_metric = "nmse"; // lower is better; the only supported selector
    int64_t slice_height = 64, slice_width = 96;

    void validate() const {
        // lr = 0 is allowed: it freezes the dynamics exactly, which the
        // invariance checks rely on
        check(lr >= 0.0, "train config: lr must be >= 0, got ", lr);
        check(beta1 >= 0.0 && beta1 < 1.0, "train config: beta1 must be in [0,1), got ", beta1);
        check(beta2 >= 0.0 && beta2 < 1.0, "train config: beta2 must be in [0,1), got ", beta2);
        check(eps > 0.0, "train config: eps must be > 0, got ", eps);
        check(weight_decay >= 0.0, "train config: weight_decay must be >= 0, got ", weight_decay);
        check(batch_size >= 1, "train config: batch_size must be >= 1, got ", batch_size);
        check(epochs >= 1, "train config: epochs must be >= 1, got ", epochs);
        check(val_metric == "nmse", "train config: unsupported val_metric '", val_metric, "'");
        check(slice_height >= 4 && slice_width >= 4 && slice_height % 4 == 0 &&
                  slice_width % 4 == 0,
              "train config: slice dims must be positive multiples of 4, got ", slice_height, "x",
              slice_width);
    }
};

// mean absolute deviation; subgradient at exact ties is 0
inline Tensor l1_loss(const Tensor& yhat, const Tensor& y) {
    check(yhat.shape().dims == y.shape().dims, "l1_loss: shape mismatch ", yhat.shape().str(),
          " vs ", y.shape().str());
    return mean(abs(sub(yhat, y)));
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

struct OptimizerState {
    int64_t step = 0;
    std::map<std::string, std::vector<real>> m, v; // keyed by parameter name
};

namespace detail {

// One decoupled-decay AdamW update; assumes t was already incremented and the
// gradient has been validated finite.
inline void adamw_update(std::vector<real>& theta, const real* g, std::vector<real>& m,
                         std::vector<real>& v, int64_t t, const TrainConfig& cfg) {
    const real bc1 = 1.0 - std::pow(cfg.beta1, static_cast<real>(t));
    const real bc2 = 1.0 - std::pow(cfg.beta2, static_cast<real>(t));
    for (size_t i = 0; i < theta.size(); ++i) {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        const real mhat = m[i] / bc1;
        const real vhat = v[i] / bc2;
        // decay is decoupled: applied to the parameter, not folded into g
        theta[i] -= cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * theta[i]);
    }
}

} // namespace detail

// Single optimizer step over every model parameter. Aborts before touching
// any parameter if some gradient contains a non-finite value.
inline void adamw_step(ModelParams& params, OptimizerState& st, const TrainConfig& cfg) {
    std::vector<std::pair<std::string, Tensor*>> named;
    params.for_each_param([&](const std::string& name, Tensor& t) {
        named.emplace_back(name, &t);
    });

    for (auto& [name, t] : named) {
        if (!t->grad_populated()) continue;
        const auto& g = t->grad();
        for (size_t i = 0; i < g.size(); ++i)
            check(std::isfinite(g[i]), "adamw_step: non-finite gradient in parameter '", name,
                  "' at index ", i);
    }

    ++st.step;
    for (auto& [name, t] : named) {
        auto& theta = t->mutable_data();
        auto& m = st.m[name];
        auto& v = st.v[name];
        if (m.empty()) m.assign(theta.size(), 0.0);
        if (v.empty()) v.assign(theta.size(), 0.0);
        check(m.size() == theta.size() && v.size() == theta.size(),
              "adamw_step: moment shape mismatch for parameter '", name, "'");
        std::vector<real> zeros;
        const real* g;
        if (t->grad_populated()) {
            g = t->grad().data();
        } else {
            zeros.assign(theta.size(), 0.0); // unpopulated gradient counts as zero
            g = zeros.data();
        }
        detail::adamw_update(theta, g, m, v, st.step, cfg);
    }
}

// ---------------------------------------------------------------------------
// Slice dataset
// ---------------------------------------------------------------------------

struct SlicePair {
    Slice x, y;
    std::string case_id;
    real field_strength = 3.0;
    int64_t slice_index = 0;
};

// Loads every case of the given split (empty split string = all cases),
// slices both volumes, and center-crops/pads each slice to the target frame.
inline std::vector<SlicePair> load_slice_pairs(const DatasetManifest& m, const std::string& split,
                                               int64_t target_h, int64_t target_w) {
    std::vector<SlicePair> out;
    for (const auto& c : m.cases) {
        if (!split.empty() && c.split != split) continue;
        const Volume vx = read_volume(resolve_path(m, c.input_path));
        const Volume vy = read_volume(resolve_path(m, c.target_path));
        check(vx.depth == vy.depth && vx.height == vy.height && vx.width == vy.width,
              "load_slice_pairs: case '", c.case_id, "' has mismatched volume dims");
        const auto xs = extract_slices(vx);
        const auto ys = extract_slices(vy);
        for (size_t d = 0; d < xs.size(); ++d) {
            SlicePair p;
            p.x = center_crop_or_pad(xs[d], target_h, target_w);
            p.y = center_crop_or_pad(ys[d], target_h, target_w);
            p.case_id = c.case_id;
            p.field_strength = c.field_strength;
            p.slice_index = static_cast<int64_t>(d);
            out.push_back(std::move(p));
        }
    }
    return out;
}

inline Tensor slices_to_batch(const std::vector<const Slice*>& slices) {
    check(!slices.empty(), "slices_to_batch: empty batch");
    const int64_t h = slices[0]->height, w = slices[0]->width;
    std::vector<real> buf;
    buf.reserve(slices.size() * static_cast<size_t>(h * w));
    for (const Slice* s : slices) {
        check(s->height == h && s->width == w, "slices_to_batch: mixed slice dims");
        buf.insert(buf.end(), s->pix.begin(), s->pix.end());
    }
    return Tensor(Shape{static_cast<int64_t>(slices.size()), 1, h, w}, std::move(buf));
}

namespace detail {

// seeded epoch shuffle, chunked into batches (last batch may be short)
inline std::vector<std::vector<size_t>> make_batches(size_t n, int64_t batch_size, Rng& rng) {
    std::vector<size_t> idx(n);
    for (size_t i = 0; i < n; ++i) idx[i] = i;
    for (size_t i = n; i > 1; --i) {
        const size_t j = static_cast<size_t>(rng.uniform(0.0, static_cast<real>(i)));
        std::swap(idx[i - 1], idx[std::min(j, i - 1)]);
    }
    std::vector<std::vector<size_t>> batches;
    for (size_t at = 0; at < n; at += static_cast<size_t>(batch_size))
        batches.emplace_back(idx.begin() + static_cast<int64_t>(at),
                             idx.begin() + static_cast<int64_t>(std::min(
                                               n, at + static_cast<size_t>(batch_size))));
    return batches;
}

// One pass over the data (or fewer batches if *steps_left runs out).
// Returns {sum of batch_loss * batch_size, samples seen}.
inline std::pair<real, int64_t> run_epoch_batches(ModelParams& params, OptimizerState& st,
                                                  const std::vector<SlicePair>& data,
                                                  const TrainConfig& cfg, int64_t epoch,
                                                  int64_t* steps_left,
                                                  std::vector<real>* step_losses) {
    Rng rng(mix_seed(mix_seed(cfg.seed, 0xe9bcull), static_cast<uint64_t>(epoch)));
    const auto batches = make_batches(data.size(), cfg.batch_size, rng);

    real loss_sum = 0.0;
    int64_t samples = 0;
    for (size_t bi = 0; bi < batches.size(); ++bi) {
        if (steps_left && *steps_left <= 0) break;
        try {
            std::vector<Slice> xs, ys;
            xs.reserve(batches[bi].size());
            ys.reserve(batches[bi].size());
            for (size_t k : batches[bi]) {
                Slice x = data[k].x, y = data[k].y;
                if (cfg.augment_flip) augment_flip(x, y, rng);
                xs.push_back(std::move(x));
                ys.push_back(std::move(y));
            }
            std::vector<const Slice*> xp, yp;
            for (auto& s : xs) xp.push_back(&s);
            for (auto& s : ys) yp.push_back(&s);

            const Tensor xb = slices_to_batch(xp);
            const Tensor yb = slices_to_batch(yp);
            const Tensor yhat = model_forward(params, xb);
            const Tensor loss = l1_loss(yhat, yb);
            backward(loss);
            adamw_step(params, st, cfg);
            params.zero_grads();

            const real l = loss.item();
            loss_sum += l * static_cast<real>(batches[bi].size());
            samples += static_cast<int64_t>(batches[bi].size());
            if (step_losses) step_losses->push_back(l);
            if (steps_left) --*steps_left;
        } catch (const Error& e) {
            fail("train epoch ", epoch, ": batch ", bi, ": ", e.what());
        }
    }
    return {loss_sum, samples};
}

} // namespace detail

// One full pass; returns the per-sample mean train loss.
inline real train_epoch(ModelParams& params, OptimizerState& st,
                        const std::vector<SlicePair>& data, const TrainConfig& cfg,
                        int64_t epoch) {
    check(!data.empty(), "train_epoch: empty dataset");
    const auto [loss_sum, samples] =
        detail::run_epoch_batches(params, st, data, cfg, epoch, nullptr, nullptr);
    return loss_sum / static_cast<real>(samples);
}

// Step-budgeted training (epoch structure, shuffles and augmentation included);
// returns each optimizer step's batch loss, in order.
inline std::vector<real> train_steps(ModelParams& params, OptimizerState& st,
                                     const std::vector<SlicePair>& data, const TrainConfig& cfg,
                                     int64_t total_steps) {
    check(!data.empty(), "train_steps: empty dataset");
    check(total_steps >= 1, "train_steps: need at least 1 step");
    std::vector<real> losses;
    losses.reserve(static_cast<size_t>(total_steps));
    int64_t left = total_steps;
    for (int64_t epoch = 0; left > 0; ++epoch)
        detail::run_epoch_batches(params, st, data, cfg, epoch, &left, &losses);
    return losses;
}

// ---------------------------------------------------------------------------
// Validation pass
// ---------------------------------------------------------------------------

// Per-slice quality metrics for one predicted batch row against its target.
// SSIM uses the windowed form whenever the slice fits the default window.
inline MetricSample eval_sample(const SlicePair& p, const std::vector<real>& yhat_row) {
    MetricSample s;
    s.case_id = p.case_id;
    s.slice_index = p.slice_index;
    s.field_strength = p.field_strength;
    s.nmse = nmse(p.y.pix, yhat_row);
    s.psnr_db = psnr(p.y.pix, yhat_row);
    s.ssim = (p.y.height >= 11 && p.y.width >= 11)
                 ? ssim_windowed(p.y.pix, yhat_row, p.y.height, p.y.width)
                 : ssim_global(p.y.pix, yhat_row);
    return s;
}

// Deterministic forward-only sweep; batches in dataset order.
inline std::vector<MetricSample> evaluate_pairs(ModelParams& params,
                                                const std::vector<SlicePair>& data,
                                                int64_t batch_size) {
    check(!data.empty(), "evaluate_pairs: empty dataset");
    NoGradGuard no_grad;
    std::vector<MetricSample> samples;
    samples.reserve(data.size());
    for (size_t at = 0; at < data.size(); at += static_cast<size_t>(batch_size)) {
        const size_t end = std::min(data.size(), at + static_cast<size_t>(batch_size));
        std::vector<const Slice*> xp;
        for (size_t k = at; k < end; ++k) xp.push_back(&data[k].x);
        const Tensor yhat = model_forward(params, slices_to_batch(xp));
        const int64_t hw = data[at].x.height * data[at].x.width;
        for (size_t k = at; k < end; ++k) {
            const auto* base = yhat.data().data() + static_cast<int64_t>(k - at) * hw;
            samples.push_back(eval_sample(data[k], std::vector<real>(base, base + hw)));
        }
    }
    return samples;
}

// ---------------------------------------------------------------------------
// fit: epochs + validation selection + checkpoints + CSV log
// ---------------------------------------------------------------------------

struct FitResult {
    std::string best_path, last_path, log_path;
    real best_val_nmse = 0.0;
    int64_t epochs_run = 0;
    std::vector<std::string> log_rows;
};

namespace detail {

inline Checkpoint checkpoint_with_optimizer(ModelParams& params, const OptimizerState& st,
                                            int64_t epoch, uint64_t rng_state, real val_metric) {
    Checkpoint c = checkpoint_from_model(params, epoch, rng_state, val_metric);
    for (const auto& [name, m] : st.m)
        c.arrays["opt.m." + name] = Tensor(Shape{static_cast<int64_t>(m.size())}, m);
    for (const auto& [name, v] : st.v)
        c.arrays["opt.v." + name] = Tensor(Shape{static_cast<int64_t>(v.size())}, v);
    c.arrays["opt.step"] = Tensor::scalar(static_cast<real>(st.step));
    return c;
}

inline void optimizer_from_checkpoint(const Checkpoint& c, OptimizerState& st) {
    st = OptimizerState{};
    for (const auto& [name, t] : c.arrays) {
        if (name.rfind("opt.m.", 0) == 0) st.m[name.substr(6)] = t.data();
        else if (name.rfind("opt.v.", 0) == 0) st.v[name.substr(6)] = t.data();
        else if (name == "opt.step") st.step = static_cast<int64_t>(std::llround(t.item()));
    }
}

} // namespace detail

inline FitResult fit(const TrainConfig& cfg, const ModelConfig& mcfg,
                     const DatasetManifest& manifest, const std::string& run_dir,
                     const std::string& resume_from = "") {
    cfg.validate();
    mcfg.validate();
    std::filesystem::create_directories(run_dir);

    const auto train_pairs = load_slice_pairs(manifest, "train", cfg.slice_height,
                                              cfg.slice_width);
    const auto val_pairs = load_slice_pairs(manifest, "val", cfg.slice_height, cfg.slice_width);
    check(!train_pairs.empty(), "fit: empty train split");
    check(!val_pairs.empty(), "fit: empty val split");

    ModelParams params = build(mcfg, cfg.seed);
    OptimizerState st;
    int64_t start_epoch = 0;
    if (!resume_from.empty()) {
        const Checkpoint ckpt = load_checkpoint(resume_from, &mcfg);
        params = model_from_checkpoint(ckpt);
        detail::optimizer_from_checkpoint(ckpt, st);
        start_epoch = ckpt.epoch;
        check(start_epoch < cfg.epochs, "fit: checkpoint already at epoch ", start_epoch,
              ", config asks for ", cfg.epochs);
    }
    params.set_requires_grad(true);

    FitResult res;
    res.best_path = (std::filesystem::path(run_dir) / "best.ckpt").string();
    res.last_path = (std::filesystem::path(run_dir) / "last.ckpt").string();
    res.log_path = (std::filesystem::path(run_dir) / "log.csv").string();
    res.best_val_nmse = std::numeric_limits<real>::infinity();

    for (int64_t epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        const real train_loss = train_epoch(params, st, train_pairs, cfg, epoch);

        const auto val_samples = evaluate_pairs(params, val_pairs, cfg.batch_size);
        const auto reports = aggregate(val_samples, GroupBy::All);
        const real val_nmse = reports[0].nmse.mean;
        const real wall = std::chrono::duration<real>(std::chrono::steady_clock::now() - t0)
                              .count();

        std::ostringstream row;
        row << epoch + 1 << "," << fmt_real(train_loss) << "," << fmt_real(val_nmse) << ","
            << fmt_real(reports[0].psnr_db.mean) << "," << fmt_real(reports[0].ssim.mean) << ","
            << fmt_real(wall, 4);
        res.log_rows.push_back(row.str());

        std::ofstream log(res.log_path, std::ios::trunc);
        log << "epoch,train_l1,val_nmse,val_psnr_db,val_ssim,wall_seconds\n";
        for (const auto& r : res.log_rows) log << r << "\n";
        log.flush();

        const Checkpoint ckpt =
            detail::checkpoint_with_optimizer(params, st, epoch + 1, cfg.seed, val_nmse);
        save_checkpoint(ckpt, res.last_path);
        if (val_nmse < res.best_val_nmse) {
            res.best_val_nmse = val_nmse;
            save_checkpoint(ckpt, res.best_path);
        }
        ++res.epochs_run;
    }
    return res;
}

} // namespace uhfsynth
