#include "cmb/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "cmb/errors.hpp"

namespace cmb::oracle {

std::vector<double> fd_gradient(const std::function<double()>& f,
                                const std::vector<double*>& coords, double step) {
    std::vector<double> grad(coords.size());
    for (size_t i = 0; i < coords.size(); ++i) {
        double* p = coords[i];
        double saved = *p;
        *p = saved + step;
        double fp = f();
        *p = saved - step;
        double fm = f();
        *p = saved;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw ValueError("fd_gradient: non-finite function value");
        grad[i] = (fp - fm) / (2.0 * step);
    }
    return grad;
}

double rel_error(double analytic, double numeric) {
    double denom = std::max({1.0, std::abs(analytic), std::abs(numeric)});
    return std::abs(analytic - numeric) / denom;
}

KnnTable knn_exhaustive(const std::vector<double>& s, int rows, int cols, int k) {
    KnnTable table;
    table.idx.resize(rows);
    table.dist.resize(rows);
    for (int n = 0; n < rows; ++n) {
        std::vector<std::pair<double, int>> cand;
        for (int m = 0; m < rows; ++m) {
            if (m == n) continue;
            double d2 = 0.0;
            for (int j = 0; j < cols; ++j) {
                double diff = s[n * cols + j] - s[m * cols + j];
                d2 += diff * diff;
            }
            cand.push_back({std::sqrt(d2), m});
        }
        std::sort(cand.begin(), cand.end(), [](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first < b.first;
            return a.second < b.second;
        });
        for (int j = 0; j < k; ++j) {
            table.idx[n].push_back(cand[j].second);
            table.dist[n].push_back(cand[j].first);
        }
    }
    return table;
}

namespace {
double log_normal(double z, double mu, double sigma) {
    double d = (z - mu) / sigma;
    return -0.5 * std::log(2.0 * M_PI) - std::log(sigma) - 0.5 * d * d;
}
} // namespace

McEstimate mc_kl(const std::vector<double>& mu_p, const std::vector<double>& sigma_p,
                 const std::vector<double>& mu_q, const std::vector<double>& sigma_q,
                 int64_t n_samples, uint64_t seed) {
    Rng rng(seed);
    size_t d = mu_p.size();
    double sum = 0.0, sumsq = 0.0;
    for (int64_t i = 0; i < n_samples; ++i) {
        double w = 0.0;
        for (size_t j = 0; j < d; ++j) {
            double z = mu_p[j] + sigma_p[j] * rng.normal();
            w += log_normal(z, mu_p[j], sigma_p[j]) - log_normal(z, mu_q[j], sigma_q[j]);
        }
        sum += w;
        sumsq += w * w;
    }
    double n = static_cast<double>(n_samples);
    double mean = sum / n;
    double var = (sumsq - n * mean * mean) / (n - 1.0);
    return {mean, std::sqrt(std::max(var, 0.0) / n)};
}

std::vector<double> loop_autocorrelate(const std::vector<double>& x, int c, int m) {
    // row softmax
    std::vector<double> sm(x.size());
    for (int i = 0; i < c; ++i) {
        double mx = x[i * m];
        for (int j = 1; j < m; ++j) mx = std::max(mx, x[i * m + j]);
        double z = 0.0;
        for (int j = 0; j < m; ++j) {
            sm[i * m + j] = std::exp(x[i * m + j] - mx);
            z += sm[i * m + j];
        }
        for (int j = 0; j < m; ++j) sm[i * m + j] /= z;
    }
    std::vector<double> s(static_cast<size_t>(c) * c, 0.0);
    for (int i = 0; i < c; ++i)
        for (int j = 0; j < c; ++j) {
            double acc = 0.0;
            for (int p = 0; p < m; ++p) acc += sm[i * m + p] * x[j * m + p];
            s[i * c + j] = acc;
        }
    return s;
}

std::vector<double> loop_central_feature(const std::vector<double>& s, int c, int k,
                                         const std::vector<double>& conv_w,
                                         const std::vector<double>& conv_b, int dc) {
    KnnTable nt = knn_exhaustive(s, c, c, k);
    std::vector<double> central(dc, -1e300);
    for (int n = 0; n < c; ++n) {
        for (int j = 0; j < k; ++j) {
            int m = nt.idx[n][j];
            // p = concat(s_n - d, d), 2c channels at this position
            std::vector<double> p(2 * c);
            for (int q = 0; q < c; ++q) {
                p[q] = s[n * c + q] - s[m * c + q];
                p[c + q] = s[m * c + q];
            }
            for (int o = 0; o < dc; ++o) {
                double v = conv_b[o];
                for (int q = 0; q < 2 * c; ++q) v += conv_w[o * 2 * c + q] * p[q];
                central[o] = std::max(central[o], v);
            }
        }
    }
    return central;
}

namespace {

// y[rows x n] = x[rows x in] * w^T[in x n] + b, all scalar loops
std::vector<double> loop_affine_rows(const std::vector<double>& x, int rows, int in,
                                     const std::vector<double>& w, const std::vector<double>& b,
                                     int out) {
    std::vector<double> y(static_cast<size_t>(rows) * out);
    for (int r = 0; r < rows; ++r)
        for (int o = 0; o < out; ++o) {
            double v = b[o];
            for (int i = 0; i < in; ++i) v += w[o * in + i] * x[r * in + i];
            y[r * out + o] = v;
        }
    return y;
}

void loop_row_softmax(std::vector<double>& x, int rows, int cols) {
    for (int r = 0; r < rows; ++r) {
        double mx = x[r * cols];
        for (int j = 1; j < cols; ++j) mx = std::max(mx, x[r * cols + j]);
        double z = 0.0;
        for (int j = 0; j < cols; ++j) {
            x[r * cols + j] = std::exp(x[r * cols + j] - mx);
            z += x[r * cols + j];
        }
        for (int j = 0; j < cols; ++j) x[r * cols + j] /= z;
    }
}

std::vector<double> loop_matmul(const std::vector<double>& a, int m, int k,
                                const std::vector<double>& b, int n) {
    std::vector<double> c(static_cast<size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p) {
            double av = a[i * k + p];
            for (int j = 0; j < n; ++j) c[i * n + j] += av * b[p * n + j];
        }
    return c;
}

} // namespace

LoopItim loop_itim(const std::vector<double>& l5, int c, int hw, const std::vector<double>& t,
                   int n, int d_text, int proj,
                   const std::vector<double>& wa, const std::vector<double>& ba,
                   const std::vector<double>& wb, const std::vector<double>& bb,
                   const std::vector<double>& wg, const std::vector<double>& bg,
                   const std::vector<double>& wd, const std::vector<double>& bd,
                   const std::vector<double>& wt, const std::vector<double>& bt,
                   double w1, double w2) {
    // l5 arrives [c x hw]; per-position rows are [hw x c]
    std::vector<double> l5_rows(static_cast<size_t>(hw) * c);
    for (int i = 0; i < c; ++i)
        for (int p = 0; p < hw; ++p) l5_rows[p * c + i] = l5[i * hw + p];

    std::vector<double> q = loop_affine_rows(l5_rows, hw, c, wa, ba, proj);   // alpha
    std::vector<double> kk = loop_affine_rows(l5_rows, hw, c, wb, bb, proj);  // beta
    std::vector<double> vi = loop_affine_rows(l5_rows, hw, c, wg, bg, c);     // gamma
    std::vector<double> kt = loop_affine_rows(t, n, d_text, wd, bd, proj);    // delta
    std::vector<double> vt = loop_affine_rows(t, n, d_text, wt, bt, c);       // theta

    LoopItim r;
    // F_it = softmax over text axis of q * kt^T
    r.f_it.assign(static_cast<size_t>(hw) * n, 0.0);
    for (int p = 0; p < hw; ++p)
        for (int j = 0; j < n; ++j) {
            double v = 0.0;
            for (int d = 0; d < proj; ++d) v += q[p * proj + d] * kt[j * proj + d];
            r.f_it[p * n + j] = v;
        }
    loop_row_softmax(r.f_it, hw, n);
    // F_ir = softmax over spatial axis of q * kk^T
    r.f_ir.assign(static_cast<size_t>(hw) * hw, 0.0);
    for (int p = 0; p < hw; ++p)
        for (int j = 0; j < hw; ++j) {
            double v = 0.0;
            for (int d = 0; d < proj; ++d) v += q[p * proj + d] * kk[j * proj + d];
            r.f_ir[p * hw + j] = v;
        }
    loop_row_softmax(r.f_ir, hw, hw);
    r.cs = loop_matmul(r.f_ir, hw, hw, r.f_it, n);
    // refined attention maps
    std::vector<double> rf_it(r.cs.size());
    for (size_t i = 0; i < rf_it.size(); ++i) rf_it[i] = w1 * r.cs[i] + r.f_it[i];
    std::vector<double> f_it_t(static_cast<size_t>(n) * hw);
    for (int p = 0; p < hw; ++p)
        for (int j = 0; j < n; ++j) f_it_t[j * hw + p] = r.f_it[p * n + j];
    std::vector<double> cs_fitt = loop_matmul(r.cs, hw, n, f_it_t, hw);
    std::vector<double> rf_ir(r.f_ir.size());
    for (size_t i = 0; i < rf_ir.size(); ++i) rf_ir[i] = w2 * cs_fitt[i] + r.f_ir[i];
    // O = rF_it * theta(T) + rF_ir * gamma(L5) + L5, assembled per position
    std::vector<double> o_rows = loop_matmul(rf_it, hw, n, vt, c);
    std::vector<double> o_img = loop_matmul(rf_ir, hw, hw, vi, c);
    r.o.assign(static_cast<size_t>(c) * hw, 0.0);
    for (int p = 0; p < hw; ++p)
        for (int i = 0; i < c; ++i)
            r.o[i * hw + p] = o_rows[p * c + i] + o_img[p * c + i] + l5[i * hw + p];
    return r;
}

std::vector<double> loop_conv2d(const std::vector<double>& x, int ci, int h, int w,
                                const std::vector<double>& wgt, int co, int kh, int kw,
                                const std::vector<double>& bias, int stride, int pad) {
    int ho = (h + 2 * pad - kh) / stride + 1;
    int wo = (w + 2 * pad - kw) / stride + 1;
    std::vector<double> y(static_cast<size_t>(co) * ho * wo, 0.0);
    for (int o = 0; o < co; ++o)
        for (int oi = 0; oi < ho; ++oi)
            for (int oj = 0; oj < wo; ++oj) {
                double acc = bias.empty() ? 0.0 : bias[o];
                for (int c = 0; c < ci; ++c)
                    for (int ki = 0; ki < kh; ++ki)
                        for (int kj = 0; kj < kw; ++kj) {
                            int si = oi * stride + ki - pad;
                            int sj = oj * stride + kj - pad;
                            if (si < 0 || si >= h || sj < 0 || sj >= w) continue;
                            acc += wgt[((o * ci + c) * kh + ki) * kw + kj] *
                                   x[(c * h + si) * w + sj];
                        }
                y[(o * ho + oi) * wo + oj] = acc;
            }
    return y;
}

std::vector<double> loop_relu(const std::vector<double>& x) {
    std::vector<double> y(x.size());
    for (size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
    return y;
}

std::vector<double> loop_sigmoid(const std::vector<double>& x) {
    std::vector<double> y(x.size());
    for (size_t i = 0; i < x.size(); ++i)
        y[i] = x[i] >= 0.0 ? 1.0 / (1.0 + std::exp(-x[i]))
                           : std::exp(x[i]) / (1.0 + std::exp(x[i]));
    return y;
}

std::vector<double> loop_bn_train(const std::vector<double>& x, int c, int hw,
                                  const std::vector<double>& gamma,
                                  const std::vector<double>& beta, double eps) {
    std::vector<double> y(x.size());
    for (int ci = 0; ci < c; ++ci) {
        double mean = 0.0;
        for (int i = 0; i < hw; ++i) mean += x[ci * hw + i];
        mean /= hw;
        double var = 0.0;
        for (int i = 0; i < hw; ++i) {
            double d = x[ci * hw + i] - mean;
            var += d * d;
        }
        var /= hw;
        double inv = 1.0 / std::sqrt(var + eps);
        for (int i = 0; i < hw; ++i)
            y[ci * hw + i] = (x[ci * hw + i] - mean) * inv * gamma[ci] + beta[ci];
    }
    return y;
}

LoopMaskLoss loop_weighted_bce_iou(const std::vector<double>& logits,
                                   const std::vector<double>& g,
                                   const std::vector<double>& weights) {
    double bce_num = 0.0, wsum = 0.0, inter = 0.0, uni = 0.0;
    for (size_t i = 0; i < logits.size(); ++i) {
        double x = logits[i];
        double p = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
        double bce = std::max(x, 0.0) - x * g[i] + std::log1p(std::exp(-std::abs(x)));
        bce_num += weights[i] * bce;
        wsum += weights[i];
        inter += weights[i] * p * g[i];
        uni += weights[i] * (p + g[i] - p * g[i]);
    }
    return {bce_num / wsum, 1.0 - inter / uni};
}

double loop_dice(const std::vector<double>& logits, const std::vector<double>& g, double smooth) {
    double inter = 0.0, psum = 0.0, gsum = 0.0;
    for (size_t i = 0; i < logits.size(); ++i) {
        double x = logits[i];
        double p = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
        inter += p * g[i];
        psum += p;
        gsum += g[i];
    }
    return 1.0 - (2.0 * inter + smooth) / (psum + gsum + smooth);
}

LoopConfusion loop_confusion(const std::vector<double>& pred_bin, const std::vector<double>& gt) {
    LoopConfusion c;
    for (size_t i = 0; i < pred_bin.size(); ++i) {
        bool p = pred_bin[i] > 0.5;
        bool g = gt[i] > 0.5;
        if (p && g) ++c.tp;
        else if (p && !g) ++c.fp;
        else if (!p && g) ++c.fn;
        else ++c.tn;
    }
    return c;
}

} // namespace cmb::oracle
