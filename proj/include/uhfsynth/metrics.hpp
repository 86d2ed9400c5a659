#pragma once

// Evaluation mathematics: NMSE, PSNR, global and windowed SSIM, Welch's
// two-tailed t-test, and mean +/- SD aggregation into table-shaped reports.
// Everything operates on plain double buffers in double precision.
//
// Variance conventions, deliberately mixed: SSIM uses population (1/N)
// moments per the classical definition; Welch's test uses sample (1/(n-1))
// variances per the test's definition.

#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "uhfsynth/stats.hpp"

namespace uhfsynth {

struct MetricSample {
    std::string case_id;
    int64_t slice_index = 0;
    real field_strength = 3.0; // tesla tag: 1.5 or 3.0
    real nmse = 0.0;
    real psnr_db = 0.0; // may be +infinity (perfect reconstruction)
    real ssim = 0.0;
};

struct MetricStat {
    real mean = 0.0;
    real sd = 0.0;
    int64_t n = 0;
    int64_t excluded_infinite = 0; // PSNR sentinels left out of mean/sd
};

struct MetricReport {
    std::string model;
    std::string group; // grouping key value, e.g. "1.5T" or a case id
    int64_t n = 0;     // samples in the group
    MetricStat nmse;
    MetricStat psnr_db;
    MetricStat ssim;
};

struct WelchResult {
    real t = 0.0;
    real df = 0.0;
    real p_two_tailed = 1.0;
    real alpha = 0.05;
    bool significant = false;
};

// ---------------------------------------------------------------------------
// Per-pair metrics
// ---------------------------------------------------------------------------

inline void check_same_size(const char* op, const std::vector<real>& y,
                            const std::vector<real>& yhat) {
    check(y.size() == yhat.size(), op, ": size mismatch ", y.size(), " vs ", yhat.size());
    check(!y.empty(), op, ": empty input");
}

/// Residual energy over reference energy: sum((y-yhat)^2) / sum(y^2).
inline real nmse(const std::vector<real>& y, const std::vector<real>& yhat) {
    check_same_size("nmse", y, yhat);
    real num = 0.0, den = 0.0;
    for (size_t i = 0; i < y.size(); ++i) {
        const real d = y[i] - yhat[i];
        num += d * d;
        den += y[i] * y[i];
    }
    check(den > 0.0, "nmse: reference is identically zero (normalization undefined)");
    return num / den;
}

/// 10*log10(L^2 / MSE) in dB; +infinity sentinel when MSE is exactly zero.
inline real psnr(const std::vector<real>& y, const std::vector<real>& yhat, real L = 2.0) {
    check_same_size("psnr", y, yhat);
    check(L > 0, "psnr: dynamic range must be positive, got ", L);
    real mse = 0.0;
    for (size_t i = 0; i < y.size(); ++i) {
        const real d = y[i] - yhat[i];
        mse += d * d;
    }
    mse /= static_cast<real>(y.size());
    if (mse == 0.0) return std::numeric_limits<real>::infinity();
    return 10.0 * std::log10(L * L / mse);
}

/// Single-statistic SSIM over the whole image with population moments.
inline real ssim_global(const std::vector<real>& y, const std::vector<real>& yhat, real L = 2.0) {
    check_same_size("ssim_global", y, yhat);
    check(y.size() >= 2, "ssim_global: need at least 2 elements, got ", y.size());
    const real n = static_cast<real>(y.size());
    real m1 = 0.0, m2 = 0.0;
    for (size_t i = 0; i < y.size(); ++i) {
        m1 += y[i];
        m2 += yhat[i];
    }
    m1 /= n;
    m2 /= n;
    real v1 = 0.0, v2 = 0.0, cov = 0.0;
    for (size_t i = 0; i < y.size(); ++i) {
        const real a = y[i] - m1;
        const real b = yhat[i] - m2;
        v1 += a * a;
        v2 += b * b;
        cov += a * b;
    }
    v1 /= n;
    v2 /= n;
    cov /= n;
    const real c1 = (0.01 * L) * (0.01 * L);
    const real c2 = (0.03 * L) * (0.03 * L);
    return ((2.0 * m1 * m2 + c1) * (2.0 * cov + c2)) /
           ((m1 * m1 + m2 * m2 + c1) * (v1 + v2 + c2));
}

namespace detail {

inline std::vector<real> gaussian_kernel(int window, real sigma) {
    std::vector<real> k(static_cast<size_t>(window));
    const real mid = 0.5 * static_cast<real>(window - 1);
    real total = 0.0;
    for (int i = 0; i < window; ++i) {
        const real d = static_cast<real>(i) - mid;
        k[static_cast<size_t>(i)] = std::exp(-0.5 * d * d / (sigma * sigma));
        total += k[static_cast<size_t>(i)];
    }
    for (auto& v : k) v /= total;
    return k;
}

/// Valid-mode separable filtering with a normalized 1-D kernel applied along
/// both axes. Output is (H-window+1) x (W-window+1).
inline std::vector<real> gaussian_filter_valid(const std::vector<real>& img, int64_t H, int64_t W,
                                               const std::vector<real>& k) {
    const int64_t win = static_cast<int64_t>(k.size());
    const int64_t Wo = W - win + 1, Ho = H - win + 1;
    std::vector<real> rows(static_cast<size_t>(H * Wo));
    for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < Wo; ++x) {
            real acc = 0.0;
            for (int64_t i = 0; i < win; ++i)
                acc += k[static_cast<size_t>(i)] * img[static_cast<size_t>(y * W + x + i)];
            rows[static_cast<size_t>(y * Wo + x)] = acc;
        }
    std::vector<real> out(static_cast<size_t>(Ho * Wo));
    for (int64_t y = 0; y < Ho; ++y)
        for (int64_t x = 0; x < Wo; ++x) {
            real acc = 0.0;
            for (int64_t i = 0; i < win; ++i)
                acc += k[static_cast<size_t>(i)] * rows[static_cast<size_t>((y + i) * Wo + x)];
            out[static_cast<size_t>(y * Wo + x)] = acc;
        }
    return out;
}

} // namespace detail

/// Mean of Gaussian-weighted local SSIM over all valid window positions.
inline real ssim_windowed(const std::vector<real>& y, const std::vector<real>& yhat, int64_t H,
                          int64_t W, int window = 11, real sigma = 1.5, real L = 2.0) {
    check_same_size("ssim_windowed", y, yhat);
    check(static_cast<int64_t>(y.size()) == H * W, "ssim_windowed: buffer size ", y.size(),
          " != H*W = ", H * W);
    check(window >= 1 && window % 2 == 1, "ssim_windowed: window must be odd, got ", window);
    check(H >= window && W >= window, "ssim_windowed: image ", H, "x", W,
          " smaller than window ", window);
    check(sigma > 0, "ssim_windowed: sigma must be positive");

    const auto k = detail::gaussian_kernel(window, sigma);
    std::vector<real> yy(y.size()), hh(y.size()), yh(y.size());
    for (size_t i = 0; i < y.size(); ++i) {
        yy[i] = y[i] * y[i];
        hh[i] = yhat[i] * yhat[i];
        yh[i] = y[i] * yhat[i];
    }
    const auto mu1 = detail::gaussian_filter_valid(y, H, W, k);
    const auto mu2 = detail::gaussian_filter_valid(yhat, H, W, k);
    const auto m11 = detail::gaussian_filter_valid(yy, H, W, k);
    const auto m22 = detail::gaussian_filter_valid(hh, H, W, k);
    const auto m12 = detail::gaussian_filter_valid(yh, H, W, k);

    const real c1 = (0.01 * L) * (0.01 * L);
    const real c2 = (0.03 * L) * (0.03 * L);
    real total = 0.0;
    for (size_t i = 0; i < mu1.size(); ++i) {
        const real v1 = m11[i] - mu1[i] * mu1[i];
        const real v2 = m22[i] - mu2[i] * mu2[i];
        const real cov = m12[i] - mu1[i] * mu2[i];
        total += ((2.0 * mu1[i] * mu2[i] + c1) * (2.0 * cov + c2)) /
                 ((mu1[i] * mu1[i] + mu2[i] * mu2[i] + c1) * (v1 + v2 + c2));
    }
    return total / static_cast<real>(mu1.size());
}

// ---------------------------------------------------------------------------
// Welch's two-tailed t-test
// ---------------------------------------------------------------------------

inline WelchResult welch_t_test(const std::vector<real>& a, const std::vector<real>& b,
                                real alpha = 0.05) {
    check(a.size() >= 2 && b.size() >= 2, "welch_t_test: need >= 2 samples per group, got ",
          a.size(), " and ", b.size());
    const real na = static_cast<real>(a.size());
    const real nb = static_cast<real>(b.size());
    real ma = 0.0, mb = 0.0;
    for (real v : a) ma += v;
    for (real v : b) mb += v;
    ma /= na;
    mb /= nb;
    real va = 0.0, vb = 0.0;
    for (real v : a) va += (v - ma) * (v - ma);
    for (real v : b) vb += (v - mb) * (v - mb);
    va /= (na - 1.0); // sample variance
    vb /= (nb - 1.0);
    check(va > 0.0 && vb > 0.0,
          "welch_t_test: degenerate zero variance (test undefined for constant samples)");

    WelchResult r;
    r.alpha = alpha;
    const real se_a = va / na, se_b = vb / nb;
    r.t = (ma - mb) / std::sqrt(se_a + se_b);
    r.df = (se_a + se_b) * (se_a + se_b) /
           (se_a * se_a / (na - 1.0) + se_b * se_b / (nb - 1.0));
    r.p_two_tailed = 2.0 * (1.0 - student_t_cdf(std::fabs(r.t), r.df));
    r.p_two_tailed = std::min(std::max(r.p_two_tailed, 0.0), 1.0);
    r.significant = r.p_two_tailed < alpha;
    return r;
}

// ---------------------------------------------------------------------------
// Aggregation (Table 1 shape: mean +/- SD per group)
// ---------------------------------------------------------------------------

enum class GroupBy { FieldStrength, Case, All };

namespace detail {

inline MetricStat summarize(const std::vector<real>& values) {
    MetricStat s;
    std::vector<real> finite;
    for (real v : values) {
        if (std::isinf(v)) ++s.excluded_infinite;
        else finite.push_back(v);
    }
    s.n = static_cast<int64_t>(finite.size());
    if (finite.empty()) return s;
    for (real v : finite) s.mean += v;
    s.mean /= static_cast<real>(finite.size());
    if (finite.size() >= 2) {
        real acc = 0.0;
        for (real v : finite) acc += (v - s.mean) * (v - s.mean);
        s.sd = std::sqrt(acc / (static_cast<real>(finite.size()) - 1.0));
    }
    return s;
}

inline std::string field_label(real field_strength) {
    std::ostringstream os;
    os << field_strength << "T";
    return os.str();
}

} // namespace detail

inline std::vector<MetricReport> aggregate(const std::vector<MetricSample>& samples,
                                           GroupBy group_by,
                                           const std::string& model_label = "model") {
    check(!samples.empty(), "aggregate: no samples");
    std::map<std::string, std::vector<const MetricSample*>> groups;
    for (const auto& s : samples) {
        std::string key;
        switch (group_by) {
        case GroupBy::FieldStrength: key = detail::field_label(s.field_strength); break;
        case GroupBy::Case: key = s.case_id; break;
        case GroupBy::All: key = "all"; break;
        }
        groups[key].push_back(&s);
    }
    std::vector<MetricReport> reports;
    for (const auto& [key, members] : groups) {
        check(!members.empty(), "aggregate: empty group '", key, "'");
        MetricReport r;
        r.model = model_label;
        r.group = key;
        r.n = static_cast<int64_t>(members.size());
        std::vector<real> v_nmse, v_psnr, v_ssim;
        for (const MetricSample* m : members) {
            v_nmse.push_back(m->nmse);
            v_psnr.push_back(m->psnr_db);
            v_ssim.push_back(m->ssim);
        }
        r.nmse = detail::summarize(v_nmse);
        r.psnr_db = detail::summarize(v_psnr);
        r.ssim = detail::summarize(v_ssim);
        reports.push_back(std::move(r));
    }
    return reports;
}

/// CSV emission matching the table presentation. `p_values` keys are
/// "<group>:<metric>"; rows without an entry get an empty p column.
inline std::string metrics_csv(const std::vector<MetricReport>& reports,
                               const std::map<std::string, real>* p_values = nullptr) {
    std::ostringstream os;
    os << "model,field,metric,mean,sd,n,excluded_infinite,p_vs_reference\n";
    for (const auto& r : reports) {
        struct Row {
            const char* name;
            const MetricStat* s;
        } rows[] = {{"nmse", &r.nmse}, {"psnr_db", &r.psnr_db}, {"ssim", &r.ssim}};
        for (const auto& row : rows) {
            os << r.model << "," << r.group << "," << row.name << "," << fmt_real(row.s->mean)
               << "," << fmt_real(row.s->sd) << "," << row.s->n << ","
               << row.s->excluded_infinite << ",";
            if (p_values) {
                auto it = p_values->find(r.group + ":" + row.name);
                if (it != p_values->end()) os << fmt_real(it->second);
            }
            os << "\n";
        }
    }
    return os.str();
}

} // namespace uhfsynth
