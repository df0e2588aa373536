#include "fednorm/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "fednorm/errors.hpp"

namespace fednorm {

namespace {

struct RowView {
    std::size_t rows;
    std::size_t cols;
    bool single;  // rank-1 input
};

RowView rows_of(const Tensor& t) {
    if (t.rank() == 1) return {1, t.size(), true};
    return {t.dim(0), t.row_size(), false};
}

Shape batched_shape(const RowView& v, std::size_t cols) {
    return v.single ? Shape{cols} : Shape{v.rows, cols};
}

struct ImageView {
    std::size_t batch, channels, height, width;
    bool single;
};

ImageView image_of(const Tensor& t, const char* op) {
    if (t.rank() == 3) return {1, t.dim(0), t.dim(1), t.dim(2), true};
    if (t.rank() == 4) return {t.dim(0), t.dim(1), t.dim(2), t.dim(3), false};
    throw ShapeError(std::string(op) + " expects [B x C x H x W] or [C x H x W], got " + shape_string(t.shape()));
}

}  // namespace

Tensor apply_activation(const Activation& rho, const Tensor& x) {
    Tensor out = x;
    for (auto& v : out.values()) v = rho(v);
    return out;
}

Var affine(const Var& x, const Var& weight, const std::optional<Var>& bias) {
    const Tensor& xv = x.value();
    const Tensor& w = weight.value();
    if (w.rank() != 2) throw ShapeError("affine weight must be a matrix, got " + shape_string(w.shape()));
    const auto xs = rows_of(xv);
    const std::size_t out_dim = w.dim(0), in_dim = w.dim(1);
    if (xs.cols != in_dim)
        throw ShapeError("affine: input " + shape_string(xv.shape()) + " does not match weight " +
                         shape_string(w.shape()));
    if (bias && (bias->value().size() != out_dim))
        throw ShapeError("affine: bias " + shape_string(bias->value().shape()) + " does not match output " +
                         std::to_string(out_dim));

    Tensor out(batched_shape(xs, out_dim));
    const double* xp = xv.data().data();
    const double* wp = w.data().data();
    double* op = out.data().data();
    for (std::size_t r = 0; r < xs.rows; ++r) {
        const double* xr = xp + r * in_dim;
        for (std::size_t o = 0; o < out_dim; ++o) {
            const double* wr = wp + o * in_dim;
            double s = 0.0;
            for (std::size_t i = 0; i < in_dim; ++i) s += wr[i] * xr[i];
            op[r * out_dim + o] = s;
        }
    }
    if (bias) {
        const double* bp = bias->value().data().data();
        for (std::size_t r = 0; r < xs.rows; ++r)
            for (std::size_t o = 0; o < out_dim; ++o) op[r * out_dim + o] += bp[o];
    }

    Var xc = x, wc = weight;
    std::optional<Var> bc = bias;
    auto backward = [xc, wc, bc, xs, in_dim, out_dim](Tape& t, const Tensor& g) {
        const double* gp = g.data().data();
        if (Tensor* gx = t.grad_buffer(xc)) {
            const double* w2 = wc.value().data().data();
            double* dx = gx->data().data();
            for (std::size_t r = 0; r < xs.rows; ++r)
                for (std::size_t o = 0; o < out_dim; ++o) {
                    const double go = gp[r * out_dim + o];
                    if (go == 0.0) continue;
                    const double* wr = w2 + o * in_dim;
                    double* dr = dx + r * in_dim;
                    for (std::size_t i = 0; i < in_dim; ++i) dr[i] += go * wr[i];
                }
        }
        if (Tensor* gw = t.grad_buffer(wc)) {
            const double* x2 = xc.value().data().data();
            double* dw = gw->data().data();
            for (std::size_t r = 0; r < xs.rows; ++r)
                for (std::size_t o = 0; o < out_dim; ++o) {
                    const double go = gp[r * out_dim + o];
                    if (go == 0.0) continue;
                    const double* xr = x2 + r * in_dim;
                    double* dr = dw + o * in_dim;
                    for (std::size_t i = 0; i < in_dim; ++i) dr[i] += go * xr[i];
                }
        }
        if (!bc) return;
        if (Tensor* gb = t.grad_buffer(*bc)) {
            double* db = gb->data().data();
            for (std::size_t r = 0; r < xs.rows; ++r)
                for (std::size_t o = 0; o < out_dim; ++o) db[o] += gp[r * out_dim + o];
        }
    };
    auto& tape = x.tape();
    if (bias) return tape.record(std::move(out), {x, weight, *bias}, backward);
    return tape.record(std::move(out), {x, weight}, backward);
}

Var activate(const Var& x, const Activation& rho) {
    auto& tape = x.tape();
    const Tensor& xv = x.value();
    Tensor out(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) {
        out[i] = rho(xv[i]);
        tape.note_branch(xv[i] > 0.0 ? 1u : 0u);
    }
    Var xc = x;
    return tape.record(std::move(out), {x}, [xc, rho](Tape& t, const Tensor& g) {
        Tensor* gx = t.grad_buffer(xc);
        const Tensor& xv2 = xc.value();
        for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * rho.slope(xv2[i]);
    });
}

Var conv2d(const Var& x, const Var& kernel, std::size_t stride, const std::optional<Var>& bias) {
    const Tensor& xv = x.value();
    const Tensor& kv = kernel.value();
    const auto im = image_of(xv, "conv2d");
    if (kv.rank() != 4) throw ShapeError("conv2d kernel must be [c_out x c_in x k x k]");
    const std::size_t co = kv.dim(0), ci = kv.dim(1), k = kv.dim(2);
    if (kv.dim(3) != k) throw ShapeError("conv2d kernel must be square");
    if (ci != im.channels)
        throw ShapeError("conv2d: kernel expects " + std::to_string(ci) + " input channels, got " +
                         std::to_string(im.channels));
    if (k > im.height || k > im.width) throw ShapeError("conv2d: kernel larger than input");
    if (stride == 0) throw ShapeError("conv2d: stride must be positive");
    if (bias && bias->value().size() != co) throw ShapeError("conv2d: bias size mismatch");
    const std::size_t oh = (im.height - k) / stride + 1, ow = (im.width - k) / stride + 1;
    const std::size_t H = im.height, W = im.width;

    Shape out_shape = im.single ? Shape{co, oh, ow} : Shape{im.batch, co, oh, ow};
    Tensor out(out_shape);
    const double* xp = xv.data().data();
    const double* kp = kv.data().data();
    double* op = out.data().data();
    for (std::size_t b = 0; b < im.batch; ++b)
        for (std::size_t o = 0; o < co; ++o) {
            double* orow = op + ((b * co + o) * oh) * ow;
            const double bo = bias ? bias->value()[o] : 0.0;
            for (std::size_t p = 0; p < oh * ow; ++p) orow[p] = bo;
            for (std::size_t c = 0; c < ci; ++c) {
                const double* xc = xp + (b * ci + c) * H * W;
                const double* kc = kp + ((o * ci + c) * k) * k;
                for (std::size_t ky = 0; ky < k; ++ky)
                    for (std::size_t kx = 0; kx < k; ++kx) {
                        const double kw = kc[ky * k + kx];
                        for (std::size_t y = 0; y < oh; ++y) {
                            const double* xr = xc + (y * stride + ky) * W + kx;
                            double* orr = orow + y * ow;
                            for (std::size_t xo = 0; xo < ow; ++xo) orr[xo] += kw * xr[xo * stride];
                        }
                    }
            }
        }

    Var xc = x, kc = kernel;
    std::optional<Var> bc = bias;
    auto backward = [xc, kc, bc, im, co, ci, k, oh, ow, stride](Tape& t, const Tensor& g) {
        const std::size_t H2 = im.height, W2 = im.width;
        const double* gp = g.data().data();
        const double* xp2 = xc.value().data().data();
        const double* kp2 = kc.value().data().data();
        Tensor* gx = t.grad_buffer(xc);
        Tensor* gk = t.grad_buffer(kc);
        for (std::size_t b = 0; b < im.batch; ++b)
            for (std::size_t o = 0; o < co; ++o) {
                const double* grow = gp + ((b * co + o) * oh) * ow;
                for (std::size_t c = 0; c < ci; ++c) {
                    const std::size_t xoff = (b * ci + c) * H2 * W2;
                    const std::size_t koff = ((o * ci + c) * k) * k;
                    for (std::size_t ky = 0; ky < k; ++ky)
                        for (std::size_t kx = 0; kx < k; ++kx) {
                            double acc = 0.0;
                            const double kw = kp2[koff + ky * k + kx];
                            for (std::size_t y = 0; y < oh; ++y) {
                                const std::size_t xr = xoff + (y * stride + ky) * W2 + kx;
                                const double* gr = grow + y * ow;
                                for (std::size_t xo = 0; xo < ow; ++xo) {
                                    acc += gr[xo] * xp2[xr + xo * stride];
                                    if (gx) (*gx)[xr + xo * stride] += gr[xo] * kw;
                                }
                            }
                            if (gk) (*gk)[koff + ky * k + kx] += acc;
                        }
                }
                if (bc) {
                    if (Tensor* gb = t.grad_buffer(*bc)) {
                        double s = 0.0;
                        for (std::size_t p = 0; p < oh * ow; ++p) s += grow[p];
                        (*gb)[o] += s;
                    }
                }
            }
    };
    auto& tape = x.tape();
    if (bias) return tape.record(std::move(out), {x, kernel, *bias}, backward);
    return tape.record(std::move(out), {x, kernel}, backward);
}

Var maxpool2d(const Var& x, std::size_t window, std::size_t stride) {
    const Tensor& xv = x.value();
    const auto im = image_of(xv, "maxpool2d");
    if (window == 0 || stride == 0) throw ShapeError("maxpool2d: window and stride must be positive");
    if (window > im.height || window > im.width) throw ShapeError("maxpool2d: window larger than input");
    const std::size_t oh = (im.height - window) / stride + 1, ow = (im.width - window) / stride + 1;
    Shape out_shape = im.single ? Shape{im.channels, oh, ow} : Shape{im.batch, im.channels, oh, ow};
    Tensor out(out_shape);
    std::vector<std::size_t> argmax(out.size());
    auto& tape = x.tape();
    std::size_t idx = 0;
    for (std::size_t plane = 0; plane < im.batch * im.channels; ++plane) {
        const std::size_t base = plane * im.height * im.width;
        for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t xo = 0; xo < ow; ++xo, ++idx) {
                std::size_t best = base + (y * stride) * im.width + xo * stride;
                for (std::size_t wy = 0; wy < window; ++wy)
                    for (std::size_t wx = 0; wx < window; ++wx) {
                        const std::size_t j = base + (y * stride + wy) * im.width + xo * stride + wx;
                        if (xv[j] > xv[best]) best = j;
                    }
                out[idx] = xv[best];
                argmax[idx] = best;
                tape.note_branch(static_cast<std::uint32_t>(best - base));
            }
    }
    Var xc = x;
    return tape.record(std::move(out), {x}, [xc, argmax = std::move(argmax)](Tape& t, const Tensor& g) {
        Tensor* gx = t.grad_buffer(xc);
        for (std::size_t i = 0; i < g.size(); ++i) (*gx)[argmax[i]] += g[i];
    });
}

Var reshape(const Var& x, Shape shape) {
    Tensor out = x.value().reshaped(std::move(shape));
    Var xc = x;
    return x.tape().record(std::move(out), {x}, [xc](Tape& t, const Tensor& g) {
        Tensor* gx = t.grad_buffer(xc);
        for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
    });
}

Var flatten(const Var& x) {
    const Tensor& xv = x.value();
    if (xv.rank() == 2) return x;
    if (xv.rank() < 2) throw ShapeError("flatten expects a batched tensor");
    return reshape(x, Shape{xv.dim(0), xv.row_size()});
}

Var add(const Var& a, const Var& b) {
    if (a.shape() != b.shape())
        throw ShapeError("add: shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    Tensor out = a.value();
    const Tensor& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    Var ac = a, bc = b;
    return a.tape().record(std::move(out), {a, b}, [ac, bc](Tape& t, const Tensor& g) {
        t.accumulate(ac, g);
        t.accumulate(bc, g);
    });
}

Var scale(const Var& x, double factor) {
    Tensor out = x.value();
    for (auto& v : out.values()) v *= factor;
    Var xc = x;
    return x.tape().record(std::move(out), {x}, [xc, factor](Tape& t, const Tensor& g) {
        Tensor* gx = t.grad_buffer(xc);
        for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += factor * g[i];
    });
}

Var sum_of_squares(const Var& x) {
    double s = 0.0;
    for (double v : x.value().data()) s += v * v;
    Var xc = x;
    return x.tape().record(Tensor::scalar(s), {x}, [xc](Tape& t, const Tensor& g) {
        Tensor* gx = t.grad_buffer(xc);
        const Tensor& xv = xc.value();
        for (std::size_t i = 0; i < xv.size(); ++i) (*gx)[i] += 2.0 * xv[i] * g[0];
    });
}

Var scale_columns(const Var& x, std::span<const double> factors) {
    const Tensor& xv = x.value();
    const auto rv = rows_of(xv);
    if (factors.size() != rv.cols) throw ShapeError("scale_columns: factor count does not match columns");
    Tensor out = xv;
    for (std::size_t r = 0; r < rv.rows; ++r)
        for (std::size_t c = 0; c < rv.cols; ++c) out[r * rv.cols + c] *= factors[c];
    std::vector<double> f(factors.begin(), factors.end());
    Var xc = x;
    return x.tape().record(std::move(out), {x}, [xc, f = std::move(f), rv](Tape& t, const Tensor& g) {
        Tensor* gx = t.grad_buffer(xc);
        for (std::size_t r = 0; r < rv.rows; ++r)
            for (std::size_t c = 0; c < rv.cols; ++c) (*gx)[r * rv.cols + c] += f[c] * g[r * rv.cols + c];
    });
}

Var shift_columns(const Var& x, std::span<const double> offsets) {
    const Tensor& xv = x.value();
    const auto rv = rows_of(xv);
    if (offsets.size() != rv.cols) throw ShapeError("shift_columns: offset count does not match columns");
    Tensor out = xv;
    for (std::size_t r = 0; r < rv.rows; ++r)
        for (std::size_t c = 0; c < rv.cols; ++c) out[r * rv.cols + c] += offsets[c];
    Var xc = x;
    return x.tape().record(std::move(out), {x}, [xc](Tape& t, const Tensor& g) { t.accumulate(xc, g); });
}

Var softmax_cross_entropy(const Var& logits, std::span<const int> labels, std::span<const bool> excluded) {
    const Tensor& z = logits.value();
    const auto rv = rows_of(z);
    const std::size_t C = rv.cols;
    if (labels.size() != rv.rows)
        throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(rv.rows) + " rows");
    if (!excluded.empty() && excluded.size() != C)
        throw ShapeError("softmax_cross_entropy: exclusion mask size mismatch");
    auto is_excluded = [&](std::size_t c) { return !excluded.empty() && excluded[c]; };

    Tensor probs(Shape{rv.rows, C}, 0.0);
    double total = 0.0;
    for (std::size_t r = 0; r < rv.rows; ++r) {
        const int y = labels[r];
        if (y < 0 || static_cast<std::size_t>(y) >= C)
            throw Error("softmax_cross_entropy: label " + std::to_string(y) + " out of range [0, " +
                        std::to_string(C) + ")");
        if (is_excluded(static_cast<std::size_t>(y)))
            throw Error("softmax_cross_entropy: label " + std::to_string(y) + " is excluded from the softmax");
        const double* zr = z.data().data() + r * C;
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < C; ++c)
            if (!is_excluded(c)) m = std::max(m, zr[c]);
        double s = 0.0;
        for (std::size_t c = 0; c < C; ++c)
            if (!is_excluded(c)) s += std::exp(zr[c] - m);
        const double log_s = std::log(s);
        for (std::size_t c = 0; c < C; ++c)
            if (!is_excluded(c)) probs[r * C + c] = std::exp(zr[c] - m - log_s);
        total += -(zr[y] - m - log_s);
    }
    const double inv_b = 1.0 / static_cast<double>(rv.rows);
    std::vector<int> ys(labels.begin(), labels.end());
    Var lc = logits;
    return logits.tape().record(Tensor::scalar(total * inv_b), {logits},
                                [lc, probs = std::move(probs), ys = std::move(ys), C, inv_b](Tape& t, const Tensor& g) {
                                    Tensor* gz = t.grad_buffer(lc);
                                    const double scale = g[0] * inv_b;
                                    for (std::size_t r = 0; r < ys.size(); ++r) {
                                        for (std::size_t c = 0; c < C; ++c)
                                            (*gz)[r * C + c] += scale * probs[r * C + c];
                                        (*gz)[r * C + static_cast<std::size_t>(ys[r])] -= scale;
                                    }
                                });
}

Var decorrelation_penalty(const Var& features, double eps) {
    const Tensor& xv = features.value();
    const auto rv = rows_of(xv);
    const std::size_t B = rv.rows, d = rv.cols;
    auto& tape = features.tape();
    if (B < 2) {
        return tape.record(Tensor::scalar(0.0), {features}, [](Tape&, const Tensor&) {});
    }
    // Column standardization over the batch.
    Tensor z(Shape{B, d});
    std::vector<double> inv_std(d);
    for (std::size_t j = 0; j < d; ++j) {
        double mu = 0.0;
        for (std::size_t r = 0; r < B; ++r) mu += xv[r * d + j];
        mu /= static_cast<double>(B);
        double var = 0.0;
        for (std::size_t r = 0; r < B; ++r) var += (xv[r * d + j] - mu) * (xv[r * d + j] - mu);
        var /= static_cast<double>(B);
        inv_std[j] = 1.0 / std::sqrt(var + eps);
        for (std::size_t r = 0; r < B; ++r) z[r * d + j] = (xv[r * d + j] - mu) * inv_std[j];
    }
    Tensor corr(Shape{d, d}, 0.0);
    for (std::size_t r = 0; r < B; ++r)
        for (std::size_t i = 0; i < d; ++i) {
            const double zi = z[r * d + i];
            for (std::size_t j = 0; j < d; ++j) corr[i * d + j] += zi * z[r * d + j];
        }
    for (auto& v : corr.values()) v /= static_cast<double>(B);
    double loss = 0.0;
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j)
            if (i != j) loss += corr[i * d + j] * corr[i * d + j];
    const double norm = 1.0 / static_cast<double>(d * d);
    loss *= norm;

    Var fc = features;
    return tape.record(Tensor::scalar(loss), {features},
                       [fc, z = std::move(z), corr = std::move(corr), inv_std = std::move(inv_std), B, d,
                        norm](Tape& t, const Tensor& g) {
                           Tensor* gx = t.grad_buffer(fc);
                           // dL/dz = (2/B) z G with G_ij = 2 norm K_ij off the diagonal.
                           Tensor gz(Shape{B, d}, 0.0);
                           const double coeff = g[0] * 4.0 * norm / static_cast<double>(B);
                           for (std::size_t r = 0; r < B; ++r)
                               for (std::size_t i = 0; i < d; ++i) {
                                   const double zi = z[r * d + i];
                                   for (std::size_t j = 0; j < d; ++j)
                                       if (i != j) gz[r * d + j] += coeff * zi * corr[i * d + j];
                               }
                           for (std::size_t j = 0; j < d; ++j) {
                               double mg = 0.0, mgz = 0.0;
                               for (std::size_t r = 0; r < B; ++r) {
                                   mg += gz[r * d + j];
                                   mgz += gz[r * d + j] * z[r * d + j];
                               }
                               mg /= static_cast<double>(B);
                               mgz /= static_cast<double>(B);
                               for (std::size_t r = 0; r < B; ++r)
                                   (*gx)[r * d + j] += inv_std[j] * (gz[r * d + j] - mg - z[r * d + j] * mgz);
                           }
                       });
}

std::vector<int> argmax_rows(const Tensor& logits) {
    const auto rv = rows_of(logits);
    std::vector<int> out(rv.rows);
    for (std::size_t r = 0; r < rv.rows; ++r) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < rv.cols; ++c)
            if (logits[r * rv.cols + c] > logits[r * rv.cols + best]) best = c;
        out[r] = static_cast<int>(best);
    }
    return out;
}

void sgd_step(Tensor& param, const Tensor& grad, double lr) {
    if (param.shape() != grad.shape())
        throw ShapeError("sgd_step: gradient " + shape_string(grad.shape()) + " does not match parameter " +
                         shape_string(param.shape()));
    if (!(lr > 0.0)) throw Error("sgd_step: learning rate must be positive");
    if (!grad.all_finite()) throw NumericError("sgd_step: non-finite gradient");
    auto p = param.data();
    auto g = grad.data();
    for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * g[i];
}

}  // namespace fednorm
