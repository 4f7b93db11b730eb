#pragma once

#include "flowsuff/numcore/common.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <span>

namespace flowsuff {

struct SplineConfig {
    int bins = 8;
    double tail_bound = 3.0;
    double min_bin_width = 1e-3;
    double min_bin_height = 1e-3;
    double min_derivative = 1e-3;

    /// Raw parameters per transformed coordinate: K widths, K heights,
    /// K-1 interior derivatives.
    int params_per_dim() const { return 3 * bins - 1; }
};

inline constexpr int kMaxSplineBins = 64;

struct SplineValue {
    double y = 0.0;
    double logdet = 0.0;
};

namespace detail {

inline double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Locate bin k with knots[k] <= x < knots[k+1], clamped to [0, K-1].
inline int search_bin(const double* knots, int bins, double x) {
    int k = 0;
    while (k + 1 < bins && x >= knots[k + 1]) ++k;
    return k;
}

struct BinEval {
    double xi, s, t, num_in, den, D;
};

inline BinEval eval_bin(double x, double xk, double w, double h, double dk, double dk1) {
    BinEval e{};
    e.xi = std::clamp((x - xk) / w, 0.0, 1.0);
    e.s = h / w;
    e.t = e.xi * (1.0 - e.xi);
    e.num_in = e.s * e.xi * e.xi + dk * e.t;
    e.den = e.s + (dk1 + dk - 2.0 * e.s) * e.t;
    e.D = dk1 * e.xi * e.xi + 2.0 * e.s * e.t + dk * (1.0 - e.xi) * (1.0 - e.xi);
    return e;
}

}  // namespace detail

/// Monotone rational-quadratic spline on [-B, B] with identity tails, given
/// normalized knot data: bin widths and heights (each summing to 2B) and
/// K+1 knot derivatives (boundary ones included).
inline SplineValue rqs_transform(double x, std::span<const double> widths, std::span<const double> heights,
                                 std::span<const double> derivatives, double tail_bound) {
    const int K = static_cast<int>(widths.size());
    FLOWSUFF_EXPECT(K >= 2 && K <= kMaxSplineBins, "rqs_transform: need 2..64 bins");
    FLOWSUFF_EXPECT(static_cast<int>(heights.size()) == K && static_cast<int>(derivatives.size()) == K + 1,
                    "rqs_transform: inconsistent parameter lengths");
    if (x < -tail_bound || x > tail_bound) return {x, 0.0};
    std::array<double, kMaxSplineBins + 1> cw{}, ch{};
    cw[0] = ch[0] = -tail_bound;
    for (int i = 0; i < K; ++i) {
        cw[i + 1] = cw[i] + widths[i];
        ch[i + 1] = ch[i] + heights[i];
    }
    cw[K] = ch[K] = tail_bound;
    const int k = detail::search_bin(cw.data(), K, x);
    const double w = cw[k + 1] - cw[k];
    const double h = ch[k + 1] - ch[k];
    const auto e = detail::eval_bin(x, cw[k], w, h, derivatives[k], derivatives[k + 1]);
    return {ch[k] + h * e.num_in / e.den, 2.0 * std::log(e.s) + std::log(e.D) - 2.0 * std::log(e.den)};
}

/// Spline knots decoded from raw network outputs, kept with the intermediate
/// softmax values needed to backpropagate into those outputs.
class RqsSpline {
public:
    RqsSpline(const double* raw, const SplineConfig& cfg) : cfg_(cfg) {
        const int K = cfg.bins;
        FLOWSUFF_EXPECT(K >= 2 && K <= kMaxSplineBins, "RqsSpline: need 2..64 bins");
        const double B = cfg.tail_bound;
        softmax(raw, K, sw_.data());
        softmax(raw + K, K, sh_.data());
        const double aw = 1.0 - cfg.min_bin_width * K;
        const double ah = 1.0 - cfg.min_bin_height * K;
        cw_[0] = ch_[0] = -B;
        for (int i = 0; i < K; ++i) {
            cw_[i + 1] = cw_[i] + 2.0 * B * (cfg.min_bin_width + aw * sw_[i]);
            ch_[i + 1] = ch_[i] + 2.0 * B * (cfg.min_bin_height + ah * sh_[i]);
        }
        cw_[K] = ch_[K] = B;
        const double c0 = derivative_offset(cfg);
        d_[0] = d_[K] = 1.0;
        for (int j = 1; j < K; ++j) {
            const double a = raw[2 * K + j - 1] + c0;
            dsig_[j] = detail::sigmoid(a);
            d_[j] = cfg.min_derivative + detail::softplus(a);
        }
    }

    /// Raw offset that maps a zero network output to derivative exactly 1.
    static double derivative_offset(const SplineConfig& cfg) {
        return std::log(std::expm1(1.0 - cfg.min_derivative));
    }

    SplineValue forward(double x) const {
        const double B = cfg_.tail_bound;
        if (x < -B || x > B) return {x, 0.0};
        const int k = detail::search_bin(cw_.data(), cfg_.bins, x);
        const double w = cw_[k + 1] - cw_[k];
        const double h = ch_[k + 1] - ch_[k];
        const auto e = detail::eval_bin(x, cw_[k], w, h, d_[k], d_[k + 1]);
        return {ch_[k] + h * e.num_in / e.den,
                2.0 * std::log(e.s) + std::log(e.D) - 2.0 * std::log(e.den)};
    }

    /// Analytic inverse. The returned logdet is that of the forward map at x.
    SplineValue inverse(double y) const {
        const double B = cfg_.tail_bound;
        if (y < -B || y > B) return {y, 0.0};
        const int k = detail::search_bin(ch_.data(), cfg_.bins, y);
        const double w = cw_[k + 1] - cw_[k];
        const double h = ch_[k + 1] - ch_[k];
        const double s = h / w;
        const double dk = d_[k], dk1 = d_[k + 1];
        const double dy = y - ch_[k];
        const double a = h * (s - dk) + dy * (dk1 + dk - 2.0 * s);
        const double b = h * dk - dy * (dk1 + dk - 2.0 * s);
        const double c = -s * dy;
        const double disc = std::max(b * b - 4.0 * a * c, 0.0);
        const double denom = -b - std::sqrt(disc);
        const double xi = denom == 0.0 ? 0.0 : std::clamp(2.0 * c / denom, 0.0, 1.0);
        const double x = cw_[k] + xi * w;
        const auto e = detail::eval_bin(x, cw_[k], w, h, dk, dk1);
        return {x, 2.0 * std::log(e.s) + std::log(e.D) - 2.0 * std::log(e.den)};
    }

    /// Backpropagate upstream gradients (gy on y, gl on logdet) at input x.
    /// Adds d/d raw into graw (length params_per_dim) and returns d/dx.
    double backward(double x, double gy, double gl, double* graw) const {
        const double B = cfg_.tail_bound;
        if (x < -B || x > B) return gy;
        const int K = cfg_.bins;
        const int k = detail::search_bin(cw_.data(), K, x);
        const double w = cw_[k + 1] - cw_[k];
        const double h = ch_[k + 1] - ch_[k];
        const double dk = d_[k], dk1 = d_[k + 1];
        const auto e = detail::eval_bin(x, cw_[k], w, h, dk, dk1);
        const double xi = e.xi, s = e.s, t = e.t, ni = e.num_in, den = e.den, D = e.D;
        const double den2 = den * den;
        const double sum_d = dk1 + dk - 2.0 * s;

        const double y_xi = h * ((2.0 * s * xi + dk * (1.0 - 2.0 * xi)) * den - ni * sum_d * (1.0 - 2.0 * xi)) / den2;
        const double y_s = h * (xi * xi * den - ni * (1.0 - 2.0 * t)) / den2;
        const double y_dk = h * (t * den - ni * t) / den2;
        const double y_dk1 = -h * ni * t / den2;
        const double y_h = ni / den;

        const double l_xi = (2.0 * dk1 * xi + 2.0 * s * (1.0 - 2.0 * xi) - 2.0 * dk * (1.0 - xi)) / D -
                            2.0 * sum_d * (1.0 - 2.0 * xi) / den;
        const double l_s = 2.0 / s + 2.0 * t / D - 2.0 * (1.0 - 2.0 * t) / den;
        const double l_dk = (1.0 - xi) * (1.0 - xi) / D - 2.0 * t / den;
        const double l_dk1 = xi * xi / D - 2.0 * t / den;

        const double G_xi = gy * y_xi + gl * l_xi;
        const double G_s = gy * y_s + gl * l_s;
        const double G_dk = gy * y_dk + gl * l_dk;
        const double G_dk1 = gy * y_dk1 + gl * l_dk1;

        const double g_x = G_xi / w;
        const double g_xk = -G_xi / w;
        const double g_w = -G_xi * xi / w - G_s * s / w;
        const double g_h = gy * y_h + G_s / w;

        std::array<double, kMaxSplineBins + 1> g_cw{}, g_ch{};
        g_cw[k + 1] += g_w;
        g_cw[k] += g_xk - g_w;
        g_ch[k + 1] += g_h;
        g_ch[k] += gy - g_h;
        knots_backward(g_cw.data(), sw_.data(), cfg_.min_bin_width, graw);
        knots_backward(g_ch.data(), sh_.data(), cfg_.min_bin_height, graw + K);

        if (k >= 1) graw[2 * K + k - 1] += G_dk * dsig_[k];
        if (k + 1 <= K - 1) graw[2 * K + k] += G_dk1 * dsig_[k + 1];
        return g_x;
    }

    double knot_x(int i) const { return cw_[i]; }
    double knot_y(int i) const { return ch_[i]; }
    double knot_derivative(int i) const { return d_[i]; }

private:
    static void softmax(const double* in, int n, double* out) {
        double mx = in[0];
        for (int i = 1; i < n; ++i) mx = std::max(mx, in[i]);
        double sum = 0.0;
        for (int i = 0; i < n; ++i) {
            out[i] = std::exp(in[i] - mx);
            sum += out[i];
        }
        for (int i = 0; i < n; ++i) out[i] /= sum;
    }

    // Knots j = 1..K-1 are -B + 2B * sum_{i<j} (floor + a * softmax_i).
    void knots_backward(const double* g_knot, const double* sm, double floor, double* graw) const {
        const int K = cfg_.bins;
        const double scale = 2.0 * cfg_.tail_bound * (1.0 - floor * K);
        std::array<double, kMaxSplineBins> g_s{};
        double suffix = 0.0;
        for (int i = K - 1; i >= 0; --i) {
            // g_s[i] collects knots j > i, restricted to the interior j <= K-1.
            if (i + 1 <= K - 1) suffix += g_knot[i + 1];
            g_s[i] = scale * suffix;
        }
        double dot = 0.0;
        for (int i = 0; i < K; ++i) dot += sm[i] * g_s[i];
        for (int i = 0; i < K; ++i) graw[i] += sm[i] * (g_s[i] - dot);
    }

    SplineConfig cfg_;
    std::array<double, kMaxSplineBins + 1> cw_{}, ch_{}, d_{}, dsig_{};
    std::array<double, kMaxSplineBins> sw_{}, sh_{};
};

}  // namespace flowsuff
