#include "fednorm/normalization.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "fednorm/errors.hpp"

namespace fednorm {

namespace {

/// Writes the MV-normalized slice into `out` and returns 1/sqrt(var + eps^2).
double mv_kernel(const double* x, double* out, std::size_t d, double eps) {
    double mu = 0.0;
    for (std::size_t i = 0; i < d; ++i) mu += x[i];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) var += (x[i] - mu) * (x[i] - mu);
    var /= static_cast<double>(d);
    const double denom = var + eps * eps;
    if (!(denom > 0.0)) throw DegenerateInputError("mv_normalize: constant vector with epsilon = 0");
    const double inv = 1.0 / std::sqrt(denom);
    for (std::size_t i = 0; i < d; ++i) out[i] = (x[i] - mu) * inv;
    return inv;
}

/// dx += inv * (g - mean(g) - y * mean(g * y)) on one slice.
void mv_backward_kernel(const double* y, const double* g, double* dx, std::size_t d, double inv) {
    double mg = 0.0, mgy = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        mg += g[i];
        mgy += g[i] * y[i];
    }
    mg /= static_cast<double>(d);
    mgy /= static_cast<double>(d);
    for (std::size_t i = 0; i < d; ++i) dx[i] += inv * (g[i] - mg - y[i] * mgy);
}

/// Returns the divisor max(eps, ||x||) and writes sqrt(d) x / divisor.
double scale_kernel(const double* x, double* out, std::size_t d, double eps) {
    double n2 = 0.0;
    for (std::size_t i = 0; i < d; ++i) n2 += x[i] * x[i];
    const double norm = std::sqrt(n2);
    const double r = std::max(eps, norm);
    if (!(r > 0.0)) throw DegenerateInputError("scale_normalize: zero vector with epsilon = 0");
    const double f = std::sqrt(static_cast<double>(d)) / r;
    for (std::size_t i = 0; i < d; ++i) out[i] = x[i] * f;
    return r;
}

struct Rows {
    std::size_t rows, cols;
};

Rows rows_of(const Tensor& t) {
    if (t.rank() == 1) return {1, t.size()};
    return {t.dim(0), t.row_size()};
}

void check_groups(std::size_t d, std::size_t groups) {
    if (groups == 0 || d % groups != 0)
        throw ShapeError("group_normalize: " + std::to_string(groups) + " groups do not divide dimension " +
                         std::to_string(d));
}

}  // namespace

std::vector<double> mv_normalize(std::span<const double> x, double eps) {
    if (x.empty()) throw ShapeError("mv_normalize: empty vector");
    std::vector<double> out(x.size());
    mv_kernel(x.data(), out.data(), x.size(), eps);
    return out;
}

std::vector<double> scale_normalize(std::span<const double> x, double eps) {
    if (x.empty()) throw ShapeError("scale_normalize: empty vector");
    std::vector<double> out(x.size());
    scale_kernel(x.data(), out.data(), x.size(), eps);
    return out;
}

std::vector<double> mean_shift(std::span<const double> x) {
    if (x.empty()) throw ShapeError("mean_shift: empty vector");
    double mu = 0.0;
    for (double v : x) mu += v;
    mu /= static_cast<double>(x.size());
    std::vector<double> out(x.begin(), x.end());
    for (auto& v : out) v -= mu;
    return out;
}

std::vector<double> group_normalize(std::span<const double> x, std::size_t groups, double eps) {
    check_groups(x.size(), groups);
    std::vector<double> out(x.size());
    const std::size_t gs = x.size() / groups;
    for (std::size_t g = 0; g < groups; ++g) mv_kernel(x.data() + g * gs, out.data() + g * gs, gs, eps);
    return out;
}

Tensor mv_normalize(const Tensor& x, double eps) {
    Tensor out(x.shape());
    const auto r = rows_of(x);
    for (std::size_t i = 0; i < r.rows; ++i)
        mv_kernel(x.data().data() + i * r.cols, out.data().data() + i * r.cols, r.cols, eps);
    return out;
}

Tensor scale_normalize(const Tensor& x, double eps) {
    Tensor out(x.shape());
    const auto r = rows_of(x);
    for (std::size_t i = 0; i < r.rows; ++i)
        scale_kernel(x.data().data() + i * r.cols, out.data().data() + i * r.cols, r.cols, eps);
    return out;
}

Tensor mean_shift(const Tensor& x) {
    Tensor out(x.shape());
    const auto r = rows_of(x);
    for (std::size_t i = 0; i < r.rows; ++i) {
        auto shifted = mean_shift(x.row(i));
        std::copy(shifted.begin(), shifted.end(), out.data().begin() + static_cast<std::ptrdiff_t>(i * r.cols));
    }
    return out;
}

Tensor group_normalize(const Tensor& x, std::size_t groups, double eps) {
    Tensor out(x.shape());
    const auto r = rows_of(x);
    for (std::size_t i = 0; i < r.rows; ++i) {
        auto y = group_normalize(x.row(i), groups, eps);
        std::copy(y.begin(), y.end(), out.data().begin() + static_cast<std::ptrdiff_t>(i * r.cols));
    }
    return out;
}

Var mv_normalize(const Var& x, double eps) {
    const Tensor& xv = x.value();
    const auto r = rows_of(xv);
    Tensor out(xv.shape());
    std::vector<double> inv(r.rows);
    for (std::size_t i = 0; i < r.rows; ++i)
        inv[i] = mv_kernel(xv.data().data() + i * r.cols, out.data().data() + i * r.cols, r.cols, eps);
    Tensor y = out;
    Var xc = x;
    return x.tape().record(std::move(out), {x}, [xc, y = std::move(y), inv = std::move(inv), r](Tape& t, const Tensor& g) {
        Tensor* gx = t.grad_buffer(xc);
        for (std::size_t i = 0; i < r.rows; ++i)
            mv_backward_kernel(y.data().data() + i * r.cols, g.data().data() + i * r.cols,
                               gx->data().data() + i * r.cols, r.cols, inv[i]);
    });
}

Var scale_normalize(const Var& x, double eps) {
    const Tensor& xv = x.value();
    const auto r = rows_of(xv);
    Tensor out(xv.shape());
    std::vector<double> divisor(r.rows);
    std::vector<bool> floored(r.rows);
    auto& tape = x.tape();
    for (std::size_t i = 0; i < r.rows; ++i) {
        divisor[i] = scale_kernel(xv.data().data() + i * r.cols, out.data().data() + i * r.cols, r.cols, eps);
        floored[i] = l2_norm(xv.row(i)) < eps;
        tape.note_branch(floored[i] ? 2u : 3u);
    }
    Var xc = x;
    return tape.record(std::move(out), {x},
                       [xc, divisor = std::move(divisor), floored = std::move(floored), r](Tape& t, const Tensor& g) {
                           Tensor* gx = t.grad_buffer(xc);
                           const Tensor& xv2 = xc.value();
                           const double sd = std::sqrt(static_cast<double>(r.cols));
                           for (std::size_t i = 0; i < r.rows; ++i) {
                               const double* xi = xv2.data().data() + i * r.cols;
                               const double* gi = g.data().data() + i * r.cols;
                               double* dx = gx->data().data() + i * r.cols;
                               const double f = sd / divisor[i];
                               if (floored[i]) {
                                   for (std::size_t j = 0; j < r.cols; ++j) dx[j] += f * gi[j];
                                   continue;
                               }
                               // f * (g - u u^T g) with u = x / ||x|| and ||x|| = divisor.
                               double ug = 0.0;
                               for (std::size_t j = 0; j < r.cols; ++j) ug += xi[j] * gi[j];
                               const double c = ug / (divisor[i] * divisor[i]);
                               for (std::size_t j = 0; j < r.cols; ++j) dx[j] += f * (gi[j] - xi[j] * c);
                           }
                       });
}

Var mean_shift(const Var& x) {
    Tensor out = mean_shift(x.value());
    const auto r = rows_of(x.value());
    Var xc = x;
    return x.tape().record(std::move(out), {x}, [xc, r](Tape& t, const Tensor& g) {
        Tensor* gx = t.grad_buffer(xc);
        for (std::size_t i = 0; i < r.rows; ++i) {
            const double* gi = g.data().data() + i * r.cols;
            double mg = 0.0;
            for (std::size_t j = 0; j < r.cols; ++j) mg += gi[j];
            mg /= static_cast<double>(r.cols);
            double* dx = gx->data().data() + i * r.cols;
            for (std::size_t j = 0; j < r.cols; ++j) dx[j] += gi[j] - mg;
        }
    });
}

Var group_normalize(const Var& x, std::size_t groups, double eps) {
    const Tensor& xv = x.value();
    const auto r = rows_of(xv);
    check_groups(r.cols, groups);
    const std::size_t gs = r.cols / groups;
    Tensor out(xv.shape());
    std::vector<double> inv(r.rows * groups);
    for (std::size_t i = 0; i < r.rows; ++i)
        for (std::size_t g = 0; g < groups; ++g) {
            const std::size_t off = i * r.cols + g * gs;
            inv[i * groups + g] = mv_kernel(xv.data().data() + off, out.data().data() + off, gs, eps);
        }
    Tensor y = out;
    Var xc = x;
    return x.tape().record(std::move(out), {x},
                           [xc, y = std::move(y), inv = std::move(inv), r, groups, gs](Tape& t, const Tensor& g) {
                               Tensor* gx = t.grad_buffer(xc);
                               for (std::size_t i = 0; i < r.rows; ++i)
                                   for (std::size_t k = 0; k < groups; ++k) {
                                       const std::size_t off = i * r.cols + k * gs;
                                       mv_backward_kernel(y.data().data() + off, g.data().data() + off,
                                                          gx->data().data() + off, gs, inv[i * groups + k]);
                                   }
                           });
}

Var mv_learnable(const Var& x, const Var& gamma, const Var& beta, double eps) {
    const Tensor& xv = x.value();
    const auto r = rows_of(xv);
    if (gamma.value().size() != r.cols || beta.value().size() != r.cols)
        throw ShapeError("mv_learnable: gamma/beta must have " + std::to_string(r.cols) + " entries");
    Tensor n(xv.shape());
    std::vector<double> inv(r.rows);
    for (std::size_t i = 0; i < r.rows; ++i)
        inv[i] = mv_kernel(xv.data().data() + i * r.cols, n.data().data() + i * r.cols, r.cols, eps);
    Tensor out(xv.shape());
    const Tensor& gv = gamma.value();
    const Tensor& bv = beta.value();
    for (std::size_t i = 0; i < r.rows; ++i)
        for (std::size_t j = 0; j < r.cols; ++j) out[i * r.cols + j] = gv[j] * n[i * r.cols + j] + bv[j];
    Var xc = x, gc = gamma, bc = beta;
    return x.tape().record(
        std::move(out), {x, gamma, beta},
        [xc, gc, bc, n = std::move(n), inv = std::move(inv), r](Tape& t, const Tensor& g) {
            if (Tensor* dg = t.grad_buffer(gc))
                for (std::size_t i = 0; i < r.rows; ++i)
                    for (std::size_t j = 0; j < r.cols; ++j) (*dg)[j] += g[i * r.cols + j] * n[i * r.cols + j];
            if (Tensor* db = t.grad_buffer(bc))
                for (std::size_t i = 0; i < r.rows; ++i)
                    for (std::size_t j = 0; j < r.cols; ++j) (*db)[j] += g[i * r.cols + j];
            if (Tensor* gx = t.grad_buffer(xc)) {
                const Tensor& gv2 = gc.value();
                std::vector<double> gn(r.cols);
                for (std::size_t i = 0; i < r.rows; ++i) {
                    for (std::size_t j = 0; j < r.cols; ++j) gn[j] = g[i * r.cols + j] * gv2[j];
                    mv_backward_kernel(n.data().data() + i * r.cols, gn.data(), gx->data().data() + i * r.cols,
                                       r.cols, inv[i]);
                }
            }
        });
}

BatchNormState BatchNormState::fresh(std::size_t channels, double momentum) {
    return BatchNormState{momentum, Tensor(Shape{channels}, 0.0), Tensor(Shape{channels}, 1.0)};
}

Var batch_normalize(const Var& x, BatchNormState& state, double eps, bool training) {
    const Tensor& xv = x.value();
    if (xv.rank() < 2) throw ShapeError("batch_normalize expects a batched tensor");
    const std::size_t B = xv.dim(0), C = xv.dim(1);
    const std::size_t S = xv.row_size() / C;
    if (state.running_mean.size() != C || state.running_var.size() != C)
        throw ShapeError("batch_normalize: running statistics have wrong channel count");
    if (training && B < 2) throw Error("batch_normalize: training mode needs at least 2 samples per batch");

    auto at = [C, S](std::size_t b, std::size_t c, std::size_t s) { return (b * C + c) * S + s; };
    Tensor out(xv.shape());
    std::vector<double> inv(C);
    const double count = static_cast<double>(B * S);
    for (std::size_t c = 0; c < C; ++c) {
        double mu, var;
        if (training) {
            mu = 0.0;
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t s = 0; s < S; ++s) mu += xv[at(b, c, s)];
            mu /= count;
            var = 0.0;
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t s = 0; s < S; ++s) var += (xv[at(b, c, s)] - mu) * (xv[at(b, c, s)] - mu);
            var /= count;
            const double m = state.momentum;
            state.running_mean[c] = (1.0 - m) * state.running_mean[c] + m * mu;
            state.running_var[c] = (1.0 - m) * state.running_var[c] + m * var;
        } else {
            mu = state.running_mean[c];
            var = state.running_var[c];
        }
        const double denom = var + eps * eps;
        if (!(denom > 0.0)) throw DegenerateInputError("batch_normalize: zero variance with epsilon = 0");
        inv[c] = 1.0 / std::sqrt(denom);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t s = 0; s < S; ++s) out[at(b, c, s)] = (xv[at(b, c, s)] - mu) * inv[c];
    }
    Tensor y = out;
    Var xc = x;
    return x.tape().record(std::move(out), {x},
                           [xc, y = std::move(y), inv = std::move(inv), B, C, S, training, at](Tape& t, const Tensor& g) {
                               Tensor* gx = t.grad_buffer(xc);
                               const double n = static_cast<double>(B * S);
                               for (std::size_t c = 0; c < C; ++c) {
                                   if (!training) {
                                       for (std::size_t b = 0; b < B; ++b)
                                           for (std::size_t s = 0; s < S; ++s)
                                               (*gx)[at(b, c, s)] += inv[c] * g[at(b, c, s)];
                                       continue;
                                   }
                                   double mg = 0.0, mgy = 0.0;
                                   for (std::size_t b = 0; b < B; ++b)
                                       for (std::size_t s = 0; s < S; ++s) {
                                           mg += g[at(b, c, s)];
                                           mgy += g[at(b, c, s)] * y[at(b, c, s)];
                                       }
                                   mg /= n;
                                   mgy /= n;
                                   for (std::size_t b = 0; b < B; ++b)
                                       for (std::size_t s = 0; s < S; ++s) {
                                           const auto k = at(b, c, s);
                                           (*gx)[k] += inv[c] * (g[k] - mg - y[k] * mgy);
                                       }
                               }
                           });
}

}  // namespace fednorm
