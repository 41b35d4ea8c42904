#include "dpolab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace dpolab {

namespace {

std::int64_t shape_numel(const std::vector<std::int64_t>& shape) {
    std::int64_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

void check_shape(const std::vector<std::int64_t>& shape) {
    if (shape.empty()) throw std::invalid_argument("tensor shape must have rank >= 1");
    for (auto e : shape) {
        if (e < 1) throw std::invalid_argument("tensor shape extents must be >= 1, got " + shape_str(shape));
    }
}

void require_2d(const TensorPtr& t, const char* op) {
    if (t->shape.size() != 2) {
        throw std::invalid_argument(std::string(op) + ": expected 2-D tensor, got shape " + shape_str(t->shape));
    }
}

// Attach tape metadata if any input carries grad.
void record(const TensorPtr& out, std::vector<TensorPtr> parents, std::function<void()> fn) {
    bool needs = false;
    for (const auto& p : parents) needs = needs || p->requires_grad;
    if (!needs) return;
    out->requires_grad = true;
    out->ensure_grad();
    out->parents = std::move(parents);
    out->backward_fn = std::move(fn);
}

}  // namespace

std::string shape_str(const std::vector<std::int64_t>& shape) {
    std::ostringstream ss;
    ss << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) ss << ",";
        ss << shape[i];
    }
    ss << "]";
    return ss.str();
}

void Tensor::zero_grad() {
    if (requires_grad) std::fill(grad.begin(), grad.end(), 0.0);
}

void Tensor::ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
}

TensorPtr make_tensor(std::vector<std::int64_t> shape, bool requires_grad) {
    check_shape(shape);
    auto t = std::make_shared<Tensor>();
    t->shape = std::move(shape);
    t->data.assign(static_cast<std::size_t>(shape_numel(t->shape)), 0.0);
    t->requires_grad = requires_grad;
    if (requires_grad) t->ensure_grad();
    return t;
}

TensorPtr make_tensor(std::vector<std::int64_t> shape, std::vector<double> values, bool requires_grad) {
    check_shape(shape);
    if (static_cast<std::int64_t>(values.size()) != shape_numel(shape)) {
        throw std::invalid_argument("tensor data length " + std::to_string(values.size()) +
                                    " does not match shape " + shape_str(shape));
    }
    auto t = std::make_shared<Tensor>();
    t->shape = std::move(shape);
    t->data = std::move(values);
    t->requires_grad = requires_grad;
    if (requires_grad) t->ensure_grad();
    return t;
}

TensorPtr make_scalar(double v, bool requires_grad) {
    return make_tensor({1}, {v}, requires_grad);
}

TensorPtr make_randn(std::vector<std::int64_t> shape, Rng& rng, double stddev, bool requires_grad) {
    auto t = make_tensor(std::move(shape), requires_grad);
    for (auto& v : t->data) v = rng.normal() * stddev;
    return t;
}

TensorPtr matmul(const TensorPtr& a, const TensorPtr& b) {
    require_2d(a, "matmul");
    require_2d(b, "matmul");
    if (a->cols() != b->rows()) {
        throw std::invalid_argument("matmul: inner dimensions differ, " + shape_str(a->shape) + " vs " +
                                    shape_str(b->shape));
    }
    const std::int64_t m = a->rows(), k = a->cols(), n = b->cols();
    auto out = make_tensor({m, n});
    const double* A = a->data.data();
    const double* B = b->data.data();
    double* C = out->data.data();
    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t kk = 0; kk < k; ++kk) {
            const double av = A[i * k + kk];
            const double* Br = B + kk * n;
            double* Cr = C + i * n;
            for (std::int64_t j = 0; j < n; ++j) Cr[j] += av * Br[j];
        }
    }
    record(out, {a, b}, [out_p = out.get(), a_p = a.get(), b_p = b.get(), m, k, n]() {
        const double* dY = out_p->grad.data();
        if (a_p->requires_grad) {
            // dA = dY * B^T
            double* dA = a_p->grad.data();
            const double* B = b_p->data.data();
            for (std::int64_t i = 0; i < m; ++i)
                for (std::int64_t kk = 0; kk < k; ++kk) {
                    double acc = 0.0;
                    const double* dYr = dY + i * n;
                    const double* Br = B + kk * n;
                    for (std::int64_t j = 0; j < n; ++j) acc += dYr[j] * Br[j];
                    dA[i * k + kk] += acc;
                }
        }
        if (b_p->requires_grad) {
            // dB = A^T * dY
            double* dB = b_p->grad.data();
            const double* A = a_p->data.data();
            for (std::int64_t i = 0; i < m; ++i) {
                const double* dYr = dY + i * n;
                for (std::int64_t kk = 0; kk < k; ++kk) {
                    const double av = A[i * k + kk];
                    double* dBr = dB + kk * n;
                    for (std::int64_t j = 0; j < n; ++j) dBr[j] += av * dYr[j];
                }
            }
        }
    });
    return out;
}

TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
    const bool same = a->shape == b->shape;
    const bool row_bcast = !same && a->shape.size() == 2 && b->shape.size() == 1 && b->numel() == a->cols();
    if (!same && !row_bcast) {
        throw std::invalid_argument("add: incompatible shapes " + shape_str(a->shape) + " vs " +
                                    shape_str(b->shape));
    }
    auto out = make_tensor(a->shape);
    const std::int64_t n = a->numel();
    if (same) {
        for (std::int64_t i = 0; i < n; ++i) out->data[i] = a->data[i] + b->data[i];
    } else {
        const std::int64_t c = a->cols();
        for (std::int64_t i = 0; i < n; ++i) out->data[i] = a->data[i] + b->data[i % c];
    }
    record(out, {a, b}, [out_p = out.get(), a_p = a.get(), b_p = b.get(), same]() {
        const std::int64_t n = out_p->numel();
        if (a_p->requires_grad) {
            for (std::int64_t i = 0; i < n; ++i) a_p->grad[i] += out_p->grad[i];
        }
        if (b_p->requires_grad) {
            if (same) {
                for (std::int64_t i = 0; i < n; ++i) b_p->grad[i] += out_p->grad[i];
            } else {
                const std::int64_t c = b_p->numel();
                for (std::int64_t i = 0; i < n; ++i) b_p->grad[i % c] += out_p->grad[i];
            }
        }
    });
    return out;
}

TensorPtr mul(const TensorPtr& a, const TensorPtr& b) {
    if (a->shape != b->shape) {
        throw std::invalid_argument("mul: incompatible shapes " + shape_str(a->shape) + " vs " +
                                    shape_str(b->shape));
    }
    auto out = make_tensor(a->shape);
    const std::int64_t n = a->numel();
    for (std::int64_t i = 0; i < n; ++i) out->data[i] = a->data[i] * b->data[i];
    record(out, {a, b}, [out_p = out.get(), a_p = a.get(), b_p = b.get()]() {
        const std::int64_t n = out_p->numel();
        if (a_p->requires_grad)
            for (std::int64_t i = 0; i < n; ++i) a_p->grad[i] += out_p->grad[i] * b_p->data[i];
        if (b_p->requires_grad)
            for (std::int64_t i = 0; i < n; ++i) b_p->grad[i] += out_p->grad[i] * a_p->data[i];
    });
    return out;
}

TensorPtr scale(const TensorPtr& a, double s) {
    auto out = make_tensor(a->shape);
    const std::int64_t n = a->numel();
    for (std::int64_t i = 0; i < n; ++i) out->data[i] = a->data[i] * s;
    record(out, {a}, [out_p = out.get(), a_p = a.get(), s]() {
        const std::int64_t n = out_p->numel();
        for (std::int64_t i = 0; i < n; ++i) a_p->grad[i] += out_p->grad[i] * s;
    });
    return out;
}

TensorPtr add_const(const TensorPtr& a, double c) {
    auto out = make_tensor(a->shape);
    const std::int64_t n = a->numel();
    for (std::int64_t i = 0; i < n; ++i) out->data[i] = a->data[i] + c;
    record(out, {a}, [out_p = out.get(), a_p = a.get()]() {
        const std::int64_t n = out_p->numel();
        for (std::int64_t i = 0; i < n; ++i) a_p->grad[i] += out_p->grad[i];
    });
    return out;
}

TensorPtr neg(const TensorPtr& a) { return scale(a, -1.0); }

TensorPtr sigmoid(const TensorPtr& a) {
    auto out = make_tensor(a->shape);
    const std::int64_t n = a->numel();
    for (std::int64_t i = 0; i < n; ++i) {
        const double x = a->data[i];
        out->data[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    }
    record(out, {a}, [out_p = out.get(), a_p = a.get()]() {
        const std::int64_t n = out_p->numel();
        for (std::int64_t i = 0; i < n; ++i) {
            const double y = out_p->data[i];
            a_p->grad[i] += out_p->grad[i] * y * (1.0 - y);
        }
    });
    return out;
}

TensorPtr log_elem(const TensorPtr& a) {
    auto out = make_tensor(a->shape);
    const std::int64_t n = a->numel();
    for (std::int64_t i = 0; i < n; ++i) out->data[i] = std::log(a->data[i]);
    record(out, {a}, [out_p = out.get(), a_p = a.get()]() {
        const std::int64_t n = out_p->numel();
        for (std::int64_t i = 0; i < n; ++i) a_p->grad[i] += out_p->grad[i] / a_p->data[i];
    });
    return out;
}

TensorPtr log_sigmoid(const TensorPtr& a) {
    auto out = make_tensor(a->shape);
    const std::int64_t n = a->numel();
    for (std::int64_t i = 0; i < n; ++i) {
        const double x = a->data[i];
        // log(sigma(x)) = -log1p(exp(-x)) for x >= 0, x - log1p(exp(x)) otherwise
        out->data[i] = x >= 0.0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
    }
    record(out, {a}, [out_p = out.get(), a_p = a.get()]() {
        const std::int64_t n = out_p->numel();
        for (std::int64_t i = 0; i < n; ++i) {
            const double x = a_p->data[i];
            // d/dx log(sigma(x)) = sigma(-x)
            const double s = x >= 0.0 ? std::exp(-x) / (1.0 + std::exp(-x)) : 1.0 / (1.0 + std::exp(x));
            a_p->grad[i] += out_p->grad[i] * s;
        }
    });
    return out;
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

TensorPtr gelu(const TensorPtr& a) {
    auto out = make_tensor(a->shape);
    const std::int64_t n = a->numel();
    for (std::int64_t i = 0; i < n; ++i) {
        const double x = a->data[i];
        out->data[i] = 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
    }
    record(out, {a}, [out_p = out.get(), a_p = a.get()]() {
        const std::int64_t n = out_p->numel();
        for (std::int64_t i = 0; i < n; ++i) {
            const double x = a_p->data[i];
            const double u = kGeluC * (x + kGeluA * x * x * x);
            const double t = std::tanh(u);
            const double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
            const double d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
            a_p->grad[i] += out_p->grad[i] * d;
        }
    });
    return out;
}

TensorPtr tanh_elem(const TensorPtr& a) {
    auto out = make_tensor(a->shape);
    const std::int64_t n = a->numel();
    for (std::int64_t i = 0; i < n; ++i) out->data[i] = std::tanh(a->data[i]);
    record(out, {a}, [out_p = out.get(), a_p = a.get()]() {
        const std::int64_t n = out_p->numel();
        for (std::int64_t i = 0; i < n; ++i) {
            const double y = out_p->data[i];
            a_p->grad[i] += out_p->grad[i] * (1.0 - y * y);
        }
    });
    return out;
}

TensorPtr log_softmax_rows(const TensorPtr& a) {
    require_2d(a, "log_softmax_rows");
    const std::int64_t m = a->rows(), n = a->cols();
    auto out = make_tensor(a->shape);
    for (std::int64_t i = 0; i < m; ++i) {
        const double* x = a->data.data() + i * n;
        double* y = out->data.data() + i * n;
        double mx = x[0];
        for (std::int64_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
        double s = 0.0;
        for (std::int64_t j = 0; j < n; ++j) s += std::exp(x[j] - mx);
        const double lse = mx + std::log(s);
        for (std::int64_t j = 0; j < n; ++j) y[j] = x[j] - lse;
    }
    record(out, {a}, [out_p = out.get(), a_p = a.get(), m, n]() {
        // dX = dY - softmax(x) * rowsum(dY)
        for (std::int64_t i = 0; i < m; ++i) {
            const double* y = out_p->data.data() + i * n;
            const double* dy = out_p->grad.data() + i * n;
            double* dx = a_p->grad.data() + i * n;
            double s = 0.0;
            for (std::int64_t j = 0; j < n; ++j) s += dy[j];
            for (std::int64_t j = 0; j < n; ++j) dx[j] += dy[j] - std::exp(y[j]) * s;
        }
    });
    return out;
}

TensorPtr softmax_rows(const TensorPtr& a) {
    require_2d(a, "softmax_rows");
    const std::int64_t m = a->rows(), n = a->cols();
    auto out = make_tensor(a->shape);
    for (std::int64_t i = 0; i < m; ++i) {
        const double* x = a->data.data() + i * n;
        double* y = out->data.data() + i * n;
        double mx = x[0];
        for (std::int64_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
        double s = 0.0;
        for (std::int64_t j = 0; j < n; ++j) {
            y[j] = std::exp(x[j] - mx);
            s += y[j];
        }
        for (std::int64_t j = 0; j < n; ++j) y[j] /= s;
    }
    record(out, {a}, [out_p = out.get(), a_p = a.get(), m, n]() {
        // dX_j = y_j * (dY_j - sum_k dY_k y_k)
        for (std::int64_t i = 0; i < m; ++i) {
            const double* y = out_p->data.data() + i * n;
            const double* dy = out_p->grad.data() + i * n;
            double* dx = a_p->grad.data() + i * n;
            double s = 0.0;
            for (std::int64_t j = 0; j < n; ++j) s += dy[j] * y[j];
            for (std::int64_t j = 0; j < n; ++j) dx[j] += y[j] * (dy[j] - s);
        }
    });
    return out;
}

TensorPtr layer_norm_rows(const TensorPtr& x, const TensorPtr& gain, const TensorPtr& bias, double eps) {
    require_2d(x, "layer_norm_rows");
    const std::int64_t m = x->rows(), n = x->cols();
    if (gain->numel() != n || bias->numel() != n) {
        throw std::invalid_argument("layer_norm_rows: gain/bias length must match width " + std::to_string(n) +
                                    ", got " + shape_str(gain->shape) + " and " + shape_str(bias->shape));
    }
    auto out = make_tensor(x->shape);
    // Stash per-row mean and inverse stddev for the backward pass.
    auto stats = std::make_shared<std::vector<double>>(static_cast<std::size_t>(2 * m));
    for (std::int64_t i = 0; i < m; ++i) {
        const double* xr = x->data.data() + i * n;
        double* yr = out->data.data() + i * n;
        double mean = 0.0;
        for (std::int64_t j = 0; j < n; ++j) mean += xr[j];
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::int64_t j = 0; j < n; ++j) var += (xr[j] - mean) * (xr[j] - mean);
        var /= static_cast<double>(n);
        const double inv = 1.0 / std::sqrt(var + eps);
        (*stats)[2 * i] = mean;
        (*stats)[2 * i + 1] = inv;
        for (std::int64_t j = 0; j < n; ++j) {
            yr[j] = gain->data[j] * ((xr[j] - mean) * inv) + bias->data[j];
        }
    }
    record(out, {x, gain, bias},
           [out_p = out.get(), x_p = x.get(), g_p = gain.get(), b_p = bias.get(), stats, m, n]() {
               for (std::int64_t i = 0; i < m; ++i) {
                   const double mean = (*stats)[2 * i];
                   const double inv = (*stats)[2 * i + 1];
                   const double* xr = x_p->data.data() + i * n;
                   const double* dy = out_p->grad.data() + i * n;
                   // xhat_j = (x_j - mean) * inv
                   double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                   for (std::int64_t j = 0; j < n; ++j) {
                       const double xhat = (xr[j] - mean) * inv;
                       const double dxhat = dy[j] * g_p->data[j];
                       sum_dxhat += dxhat;
                       sum_dxhat_xhat += dxhat * xhat;
                       if (g_p->requires_grad) g_p->grad[j] += dy[j] * xhat;
                       if (b_p->requires_grad) b_p->grad[j] += dy[j];
                   }
                   if (x_p->requires_grad) {
                       double* dx = x_p->grad.data() + i * n;
                       const double nn = static_cast<double>(n);
                       for (std::int64_t j = 0; j < n; ++j) {
                           const double xhat = (xr[j] - mean) * inv;
                           const double dxhat = dy[j] * g_p->data[j];
                           dx[j] += inv * (dxhat - sum_dxhat / nn - xhat * sum_dxhat_xhat / nn);
                       }
                   }
               }
           });
    return out;
}

TensorPtr embedding_rows(const TensorPtr& table, const std::vector<int>& ids) {
    require_2d(table, "embedding_rows");
    const std::int64_t V = table->rows(), d = table->cols();
    const std::int64_t T = static_cast<std::int64_t>(ids.size());
    if (T < 1) throw std::invalid_argument("embedding_rows: empty id list");
    for (int id : ids) {
        if (id < 0 || id >= V) {
            throw std::invalid_argument("embedding_rows: id " + std::to_string(id) + " outside table rows " +
                                        std::to_string(V));
        }
    }
    auto out = make_tensor({T, d});
    for (std::int64_t t = 0; t < T; ++t) {
        const double* src = table->data.data() + static_cast<std::int64_t>(ids[t]) * d;
        std::copy(src, src + d, out->data.data() + t * d);
    }
    record(out, {table}, [out_p = out.get(), tab_p = table.get(), ids, d]() {
        for (std::size_t t = 0; t < ids.size(); ++t) {
            const double* dy = out_p->grad.data() + static_cast<std::int64_t>(t) * d;
            double* dst = tab_p->grad.data() + static_cast<std::int64_t>(ids[t]) * d;
            for (std::int64_t j = 0; j < d; ++j) dst[j] += dy[j];
        }
    });
    return out;
}

TensorPtr gather_pairs(const TensorPtr& a, const std::vector<int>& row_ids, const std::vector<int>& col_ids) {
    require_2d(a, "gather_pairs");
    if (row_ids.size() != col_ids.size() || row_ids.empty()) {
        throw std::invalid_argument("gather_pairs: row/col id lists must be nonempty and equal length");
    }
    const std::int64_t m = a->rows(), n = a->cols();
    const std::int64_t k = static_cast<std::int64_t>(row_ids.size());
    for (std::int64_t i = 0; i < k; ++i) {
        if (row_ids[i] < 0 || row_ids[i] >= m || col_ids[i] < 0 || col_ids[i] >= n) {
            throw std::invalid_argument("gather_pairs: index (" + std::to_string(row_ids[i]) + "," +
                                        std::to_string(col_ids[i]) + ") outside " + shape_str(a->shape));
        }
    }
    auto out = make_tensor({k});
    for (std::int64_t i = 0; i < k; ++i) out->data[i] = a->at(row_ids[i], col_ids[i]);
    record(out, {a}, [out_p = out.get(), a_p = a.get(), row_ids, col_ids, n]() {
        for (std::size_t i = 0; i < row_ids.size(); ++i) {
            a_p->grad[static_cast<std::int64_t>(row_ids[i]) * n + col_ids[i]] += out_p->grad[i];
        }
    });
    return out;
}

TensorPtr transpose(const TensorPtr& a) {
    require_2d(a, "transpose");
    const std::int64_t m = a->rows(), n = a->cols();
    auto out = make_tensor({n, m});
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) out->data[j * m + i] = a->data[i * n + j];
    record(out, {a}, [out_p = out.get(), a_p = a.get(), m, n]() {
        for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t j = 0; j < n; ++j) a_p->grad[i * n + j] += out_p->grad[j * m + i];
    });
    return out;
}

TensorPtr slice_cols(const TensorPtr& a, std::int64_t c0, std::int64_t c1) {
    require_2d(a, "slice_cols");
    const std::int64_t m = a->rows(), n = a->cols();
    if (c0 < 0 || c1 > n || c0 >= c1) {
        throw std::invalid_argument("slice_cols: range [" + std::to_string(c0) + "," + std::to_string(c1) +
                                    ") invalid for shape " + shape_str(a->shape));
    }
    const std::int64_t w = c1 - c0;
    auto out = make_tensor({m, w});
    for (std::int64_t i = 0; i < m; ++i) {
        const double* src = a->data.data() + i * n + c0;
        std::copy(src, src + w, out->data.data() + i * w);
    }
    record(out, {a}, [out_p = out.get(), a_p = a.get(), m, n, c0, w]() {
        for (std::int64_t i = 0; i < m; ++i) {
            const double* dy = out_p->grad.data() + i * w;
            double* dx = a_p->grad.data() + i * n + c0;
            for (std::int64_t j = 0; j < w; ++j) dx[j] += dy[j];
        }
    });
    return out;
}

TensorPtr concat_cols(const std::vector<TensorPtr>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: empty part list");
    const std::int64_t m = parts[0]->rows();
    std::int64_t total = 0;
    for (const auto& p : parts) {
        require_2d(p, "concat_cols");
        if (p->rows() != m) {
            throw std::invalid_argument("concat_cols: row mismatch, " + shape_str(parts[0]->shape) + " vs " +
                                        shape_str(p->shape));
        }
        total += p->cols();
    }
    auto out = make_tensor({m, total});
    std::int64_t off = 0;
    for (const auto& p : parts) {
        const std::int64_t w = p->cols();
        for (std::int64_t i = 0; i < m; ++i) {
            std::copy(p->data.data() + i * w, p->data.data() + (i + 1) * w,
                      out->data.data() + i * total + off);
        }
        off += w;
    }
    record(out, parts, [out_p = out.get(), parts, m, total]() {
        std::int64_t off = 0;
        for (const auto& p : parts) {
            const std::int64_t w = p->cols();
            if (p->requires_grad) {
                for (std::int64_t i = 0; i < m; ++i) {
                    const double* dy = out_p->grad.data() + i * total + off;
                    double* dx = p->grad.data() + i * w;
                    for (std::int64_t j = 0; j < w; ++j) dx[j] += dy[j];
                }
            }
            off += w;
        }
    });
    return out;
}

TensorPtr stack_scalars(const std::vector<TensorPtr>& scalars) {
    if (scalars.empty()) throw std::invalid_argument("stack_scalars: empty input");
    for (const auto& s : scalars) {
        if (!s->is_scalar()) {
            throw std::invalid_argument("stack_scalars: all inputs must be scalar, got " + shape_str(s->shape));
        }
    }
    const std::int64_t k = static_cast<std::int64_t>(scalars.size());
    auto out = make_tensor({k});
    for (std::int64_t i = 0; i < k; ++i) out->data[i] = scalars[i]->data[0];
    record(out, scalars, [out_p = out.get(), scalars]() {
        for (std::size_t i = 0; i < scalars.size(); ++i) {
            if (scalars[i]->requires_grad) scalars[i]->grad[0] += out_p->grad[i];
        }
    });
    return out;
}

TensorPtr sum_all(const TensorPtr& a) {
    auto out = make_tensor({1});
    double s = 0.0;
    for (double v : a->data) s += v;
    out->data[0] = s;
    record(out, {a}, [out_p = out.get(), a_p = a.get()]() {
        const double g = out_p->grad[0];
        for (auto& gv : a_p->grad) gv += g;
    });
    return out;
}

TensorPtr mean_all(const TensorPtr& a) {
    auto out = make_tensor({1});
    double s = 0.0;
    for (double v : a->data) s += v;
    const double inv = 1.0 / static_cast<double>(a->numel());
    out->data[0] = s * inv;
    record(out, {a}, [out_p = out.get(), a_p = a.get(), inv]() {
        const double g = out_p->grad[0] * inv;
        for (auto& gv : a_p->grad) gv += g;
    });
    return out;
}

void backward(const TensorPtr& loss) {
    if (!loss->is_scalar()) {
        throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_str(loss->shape));
    }
    if (!loss->requires_grad) return;  // nothing reachable carries grad

    // Iterative post-order DFS; visits each node once, parents before use in
    // the reversed order.
    std::vector<Tensor*> topo;
    std::unordered_set<Tensor*> visited;
    std::vector<std::pair<Tensor*, std::size_t>> stack;
    stack.emplace_back(loss.get(), 0);
    visited.insert(loss.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Tensor* parent = node->parents[idx].get();
            ++idx;
            if (parent->requires_grad && !visited.count(parent)) {
                visited.insert(parent);
                stack.emplace_back(parent, 0);
            }
        } else {
            topo.push_back(node);
            stack.pop_back();
        }
    }

    loss->grad[0] = 1.0;
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        if ((*it)->backward_fn) (*it)->backward_fn();
    }
    // Free the tape; parameters keep their accumulated grads.
    for (Tensor* node : topo) {
        node->parents.clear();
        node->backward_fn = nullptr;
    }
}

}  // namespace dpolab
