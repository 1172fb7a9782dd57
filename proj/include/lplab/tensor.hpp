#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "lplab/errors.hpp"
#include "lplab/rng.hpp"

namespace lplab {

struct Shape {
    std::size_t rows = 0;
    std::size_t cols = 0;

    std::size_t count() const { return rows * cols; }
    bool operator==(const Shape& o) const = default;

    std::string str() const {
        return std::to_string(rows) + "x" + std::to_string(cols);
    }
};

// Dense row-major 2-D tensor of doubles. 1-D values are stored as 1xN.
// grad stays empty until backward() (or ensure_grad) touches the tensor,
// so sgd_step can tell "never differentiated" from "zero gradient".
class Tensor {
public:
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;

    Tensor() = default;
    Tensor(std::size_t rows, std::size_t cols, bool rg = false)
        : shape{rows, cols}, data(rows * cols, 0.0), requires_grad(rg) {}

    std::size_t rows() const { return shape.rows; }
    std::size_t cols() const { return shape.cols; }
    std::size_t size() const { return data.size(); }

    double& at(std::size_t r, std::size_t c) { return data[r * shape.cols + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * shape.cols + c]; }

    bool has_grad() const { return !grad.empty(); }

    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
    }

    void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }

    bool is_scalar() const { return shape.rows == 1 && shape.cols == 1; }

    double scalar() const {
        if (!is_scalar()) throw UsageError("scalar() on tensor of shape " + shape.str());
        return data[0];
    }
};

using TensorPtr = std::shared_ptr<Tensor>;

inline TensorPtr tensor(std::size_t rows, std::size_t cols, bool rg = false) {
    return std::make_shared<Tensor>(rows, cols, rg);
}

inline TensorPtr tensor_of(std::size_t rows, std::size_t cols, std::vector<double> values,
                           bool rg = false) {
    if (values.size() != rows * cols) {
        throw DimensionError("tensor_of: " + std::to_string(values.size()) +
                             " values for shape " + Shape{rows, cols}.str());
    }
    auto t = tensor(rows, cols, rg);
    t->data = std::move(values);
    return t;
}

inline TensorPtr zeros(std::size_t rows, std::size_t cols, bool rg = false) {
    return tensor(rows, cols, rg);
}

inline TensorPtr ones(std::size_t rows, std::size_t cols, bool rg = false) {
    auto t = tensor(rows, cols, rg);
    std::fill(t->data.begin(), t->data.end(), 1.0);
    return t;
}

inline TensorPtr full(std::size_t rows, std::size_t cols, double v, bool rg = false) {
    auto t = tensor(rows, cols, rg);
    std::fill(t->data.begin(), t->data.end(), v);
    return t;
}

inline TensorPtr identity(std::size_t n) {
    auto t = tensor(n, n);
    for (std::size_t i = 0; i < n; ++i) t->at(i, i) = 1.0;
    return t;
}

inline TensorPtr randn(std::size_t rows, std::size_t cols, Rng& rng, double stddev = 1.0,
                       bool rg = false) {
    auto t = tensor(rows, cols, rg);
    for (auto& v : t->data) v = rng.normal(0.0, stddev);
    return t;
}

inline TensorPtr clone(const Tensor& src) {
    auto t = tensor(src.rows(), src.cols(), src.requires_grad);
    t->data = src.data;
    return t;
}

inline void check_finite(const Tensor& t, const char* op) {
    for (double v : t.data) {
        if (!std::isfinite(v)) {
            throw NumericError(std::string(op) + " produced a non-finite value");
        }
    }
}

namespace detail {

// out[m x n] += a[m x k] * b[k x n], plain ikj loop
inline void matmul_acc(const std::vector<double>& a, const std::vector<double>& b,
                       std::vector<double>& out, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a.data() + i * k;
        double* orow = out.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
}

// out[m x n] += a[k x m]^T * b[k x n]
inline void matmul_tn_acc(const std::vector<double>& a, const std::vector<double>& b,
                          std::vector<double>& out, std::size_t k, std::size_t m,
                          std::size_t n) {
    for (std::size_t p = 0; p < k; ++p) {
        const double* arow = a.data() + p * m;
        const double* brow = b.data() + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const double av = arow[i];
            if (av == 0.0) continue;
            double* orow = out.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
}

// out[m x k] += a[m x n] * b[k x n]^T
inline void matmul_nt_acc(const std::vector<double>& a, const std::vector<double>& b,
                          std::vector<double>& out, std::size_t m, std::size_t n,
                          std::size_t k) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a.data() + i * n;
        double* orow = out.data() + i * k;
        for (std::size_t j = 0; j < k; ++j) {
            const double* brow = b.data() + j * n;
            double s = 0.0;
            for (std::size_t p = 0; p < n; ++p) s += arow[p] * brow[p];
            orow[j] += s;
        }
    }
}

inline double gelu_tanh(double x) {
    constexpr double c = 0.7978845608028654; // sqrt(2/pi)
    const double u = c * (x + 0.044715 * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
}

inline double gelu_tanh_grad(double x) {
    constexpr double c = 0.7978845608028654;
    const double u = c * (x + 0.044715 * x * x * x);
    const double t = std::tanh(u);
    const double du = c * (1.0 + 3.0 * 0.044715 * x * x);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

} // namespace detail

// Reverse-mode tape. Ops record a node per produced tensor; creation order is
// the topological order, and backward() replays nodes once in reverse.
// The tape is rebuilt every forward pass (define-by-run) and never shared
// between threads.
class Tape {
public:
    struct Node {
        const char* op;
        TensorPtr out;
        std::function<void()> backward;
    };

    std::size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

    TensorPtr matmul(const TensorPtr& a, const TensorPtr& b) {
        if (a->cols() != b->rows()) {
            throw DimensionError("matmul: " + a->shape.str() + " times " + b->shape.str());
        }
        auto out = tensor(a->rows(), b->cols());
        detail::matmul_acc(a->data, b->data, out->data, a->rows(), a->cols(), b->cols());
        check_finite(*out, "matmul");
        record("matmul", out, {a, b}, [a, b, out] {
            if (a->requires_grad) {
                a->ensure_grad();
                detail::matmul_nt_acc(out->grad, b->data, a->grad, a->rows(), b->cols(),
                                      a->cols());
            }
            if (b->requires_grad) {
                b->ensure_grad();
                detail::matmul_tn_acc(a->data, out->grad, b->grad, a->rows(), a->cols(),
                                      b->cols());
            }
        });
        return out;
    }

    TensorPtr transpose(const TensorPtr& a) {
        auto out = tensor(a->cols(), a->rows());
        for (std::size_t r = 0; r < a->rows(); ++r)
            for (std::size_t c = 0; c < a->cols(); ++c) out->at(c, r) = a->at(r, c);
        check_finite(*out, "transpose");
        record("transpose", out, {a}, [a, out] {
            if (!a->requires_grad) return;
            a->ensure_grad();
            for (std::size_t r = 0; r < a->rows(); ++r)
                for (std::size_t c = 0; c < a->cols(); ++c)
                    a->grad[r * a->cols() + c] += out->grad[c * a->rows() + r];
        });
        return out;
    }

    TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
        require_same_shape(a, b, "add");
        auto out = tensor(a->rows(), a->cols());
        for (std::size_t i = 0; i < out->size(); ++i) out->data[i] = a->data[i] + b->data[i];
        check_finite(*out, "add");
        record("add", out, {a, b}, [a, b, out] {
            accumulate(a, out->grad, 1.0);
            accumulate(b, out->grad, 1.0);
        });
        return out;
    }

    TensorPtr sub(const TensorPtr& a, const TensorPtr& b) {
        require_same_shape(a, b, "sub");
        auto out = tensor(a->rows(), a->cols());
        for (std::size_t i = 0; i < out->size(); ++i) out->data[i] = a->data[i] - b->data[i];
        check_finite(*out, "sub");
        record("sub", out, {a, b}, [a, b, out] {
            accumulate(a, out->grad, 1.0);
            accumulate(b, out->grad, -1.0);
        });
        return out;
    }

    TensorPtr scale(const TensorPtr& a, double c) {
        auto out = tensor(a->rows(), a->cols());
        for (std::size_t i = 0; i < out->size(); ++i) out->data[i] = c * a->data[i];
        check_finite(*out, "scale");
        record("scale", out, {a}, [a, out, c] { accumulate(a, out->grad, c); });
        return out;
    }

    TensorPtr hadamard(const TensorPtr& a, const TensorPtr& b) {
        require_same_shape(a, b, "hadamard");
        auto out = tensor(a->rows(), a->cols());
        for (std::size_t i = 0; i < out->size(); ++i) out->data[i] = a->data[i] * b->data[i];
        check_finite(*out, "hadamard");
        record("hadamard", out, {a, b}, [a, b, out] {
            if (a->requires_grad) {
                a->ensure_grad();
                for (std::size_t i = 0; i < a->size(); ++i)
                    a->grad[i] += out->grad[i] * b->data[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (std::size_t i = 0; i < b->size(); ++i)
                    b->grad[i] += out->grad[i] * a->data[i];
            }
        });
        return out;
    }

    // x[m x n] + bias[1 x n] broadcast over rows
    TensorPtr add_row_bias(const TensorPtr& x, const TensorPtr& bias) {
        if (bias->rows() != 1 || bias->cols() != x->cols()) {
            throw DimensionError("add_row_bias: bias " + bias->shape.str() + " for input " +
                                 x->shape.str());
        }
        auto out = tensor(x->rows(), x->cols());
        for (std::size_t r = 0; r < x->rows(); ++r)
            for (std::size_t c = 0; c < x->cols(); ++c)
                out->at(r, c) = x->at(r, c) + bias->data[c];
        check_finite(*out, "add_row_bias");
        record("add_row_bias", out, {x, bias}, [x, bias, out] {
            accumulate(x, out->grad, 1.0);
            if (bias->requires_grad) {
                bias->ensure_grad();
                for (std::size_t r = 0; r < x->rows(); ++r)
                    for (std::size_t c = 0; c < x->cols(); ++c)
                        bias->grad[c] += out->grad[r * x->cols() + c];
            }
        });
        return out;
    }

    TensorPtr relu(const TensorPtr& a) {
        auto out = tensor(a->rows(), a->cols());
        for (std::size_t i = 0; i < out->size(); ++i)
            out->data[i] = a->data[i] > 0.0 ? a->data[i] : 0.0;
        check_finite(*out, "relu");
        record("relu", out, {a}, [a, out] {
            if (!a->requires_grad) return;
            a->ensure_grad();
            for (std::size_t i = 0; i < a->size(); ++i)
                if (a->data[i] > 0.0) a->grad[i] += out->grad[i];
        });
        return out;
    }

    // tanh approximation
    TensorPtr gelu(const TensorPtr& a) {
        auto out = tensor(a->rows(), a->cols());
        for (std::size_t i = 0; i < out->size(); ++i)
            out->data[i] = detail::gelu_tanh(a->data[i]);
        check_finite(*out, "gelu");
        record("gelu", out, {a}, [a, out] {
            if (!a->requires_grad) return;
            a->ensure_grad();
            for (std::size_t i = 0; i < a->size(); ++i)
                a->grad[i] += out->grad[i] * detail::gelu_tanh_grad(a->data[i]);
        });
        return out;
    }

    TensorPtr softmax_rows(const TensorPtr& a) {
        auto out = tensor(a->rows(), a->cols());
        const std::size_t n = a->cols();
        for (std::size_t r = 0; r < a->rows(); ++r) {
            const double* in = a->data.data() + r * n;
            double* o = out->data.data() + r * n;
            double mx = in[0];
            for (std::size_t c = 1; c < n; ++c) mx = std::max(mx, in[c]);
            double sum = 0.0;
            for (std::size_t c = 0; c < n; ++c) {
                o[c] = std::exp(in[c] - mx);
                sum += o[c];
            }
            for (std::size_t c = 0; c < n; ++c) o[c] /= sum;
        }
        check_finite(*out, "softmax_rows");
        record("softmax_rows", out, {a}, [a, out] {
            if (!a->requires_grad) return;
            a->ensure_grad();
            const std::size_t n = a->cols();
            for (std::size_t r = 0; r < a->rows(); ++r) {
                const double* p = out->data.data() + r * n;
                const double* g = out->grad.data() + r * n;
                double dot = 0.0;
                for (std::size_t c = 0; c < n; ++c) dot += g[c] * p[c];
                double* ga = a->grad.data() + r * n;
                for (std::size_t c = 0; c < n; ++c) ga[c] += p[c] * (g[c] - dot);
            }
        });
        return out;
    }

    static constexpr double kLayerNormEps = 1e-8;

    // per-row normalization, no affine parameters
    TensorPtr layer_norm(const TensorPtr& a) {
        auto out = tensor(a->rows(), a->cols());
        const std::size_t n = a->cols();
        auto inv_std = std::make_shared<std::vector<double>>(a->rows());
        for (std::size_t r = 0; r < a->rows(); ++r) {
            const double* in = a->data.data() + r * n;
            double mean = 0.0;
            for (std::size_t c = 0; c < n; ++c) mean += in[c];
            mean /= static_cast<double>(n);
            double var = 0.0;
            for (std::size_t c = 0; c < n; ++c) var += (in[c] - mean) * (in[c] - mean);
            var /= static_cast<double>(n);
            const double is = 1.0 / std::sqrt(var + kLayerNormEps);
            (*inv_std)[r] = is;
            double* o = out->data.data() + r * n;
            for (std::size_t c = 0; c < n; ++c) o[c] = (in[c] - mean) * is;
        }
        check_finite(*out, "layer_norm");
        record("layer_norm", out, {a}, [a, out, inv_std] {
            if (!a->requires_grad) return;
            a->ensure_grad();
            const std::size_t n = a->cols();
            const double dn = static_cast<double>(n);
            for (std::size_t r = 0; r < a->rows(); ++r) {
                const double* y = out->data.data() + r * n;
                const double* g = out->grad.data() + r * n;
                double gmean = 0.0, gymean = 0.0;
                for (std::size_t c = 0; c < n; ++c) {
                    gmean += g[c];
                    gymean += g[c] * y[c];
                }
                gmean /= dn;
                gymean /= dn;
                const double is = (*inv_std)[r];
                double* ga = a->grad.data() + r * n;
                for (std::size_t c = 0; c < n; ++c)
                    ga[c] += is * (g[c] - gmean - y[c] * gymean);
            }
        });
        return out;
    }

    TensorPtr reduce_sum(const TensorPtr& a) {
        auto out = tensor(1, 1);
        double s = 0.0;
        for (double v : a->data) s += v;
        out->data[0] = s;
        check_finite(*out, "reduce_sum");
        record("reduce_sum", out, {a}, [a, out] { accumulate(a, out->grad[0]); });
        return out;
    }

    TensorPtr reduce_mean(const TensorPtr& a) {
        if (a->size() == 0) throw DimensionError("reduce_mean: empty tensor");
        auto out = tensor(1, 1);
        double s = 0.0;
        for (double v : a->data) s += v;
        const double inv = 1.0 / static_cast<double>(a->size());
        out->data[0] = s * inv;
        check_finite(*out, "reduce_mean");
        record("reduce_mean", out, {a}, [a, out, inv] { accumulate(a, out->grad[0] * inv); });
        return out;
    }

    // mean over all elements of (pred - target)^2; gradient 2(p - t)/n
    TensorPtr mse_loss(const TensorPtr& pred, const TensorPtr& target) {
        require_same_shape(pred, target, "mse_loss");
        auto out = tensor(1, 1);
        const double inv = 1.0 / static_cast<double>(pred->size());
        double s = 0.0;
        for (std::size_t i = 0; i < pred->size(); ++i) {
            const double d = pred->data[i] - target->data[i];
            s += d * d;
        }
        out->data[0] = s * inv;
        check_finite(*out, "mse_loss");
        record("mse_loss", out, {pred, target}, [pred, target, out, inv] {
            const double g = out->grad[0];
            if (pred->requires_grad) {
                pred->ensure_grad();
                for (std::size_t i = 0; i < pred->size(); ++i)
                    pred->grad[i] += g * 2.0 * inv * (pred->data[i] - target->data[i]);
            }
            if (target->requires_grad) {
                target->ensure_grad();
                for (std::size_t i = 0; i < target->size(); ++i)
                    target->grad[i] -= g * 2.0 * inv * (pred->data[i] - target->data[i]);
            }
        });
        return out;
    }

    // mean over the batch of -log softmax(logits)[label]
    TensorPtr softmax_cross_entropy(const TensorPtr& logits, const std::vector<int>& labels) {
        const std::size_t m = logits->rows();
        const std::size_t c = logits->cols();
        if (labels.size() != m) {
            throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                                 " labels for " + std::to_string(m) + " logit rows");
        }
        for (std::size_t i = 0; i < m; ++i) {
            if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) {
                throw UsageError("softmax_cross_entropy: label " + std::to_string(labels[i]) +
                                 " at row " + std::to_string(i) + " outside [0, " +
                                 std::to_string(c) + ")");
            }
        }
        auto probs = std::make_shared<std::vector<double>>(m * c);
        auto out = tensor(1, 1);
        double total = 0.0;
        for (std::size_t r = 0; r < m; ++r) {
            const double* in = logits->data.data() + r * c;
            double* p = probs->data() + r * c;
            double mx = in[0];
            for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, in[j]);
            double sum = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
                p[j] = std::exp(in[j] - mx);
                sum += p[j];
            }
            for (std::size_t j = 0; j < c; ++j) p[j] /= sum;
            total -= std::log(p[static_cast<std::size_t>(labels[r])]);
        }
        out->data[0] = total / static_cast<double>(m);
        check_finite(*out, "softmax_cross_entropy");
        auto labels_copy = std::make_shared<std::vector<int>>(labels);
        record("softmax_cross_entropy", out, {logits},
               [logits, out, probs, labels_copy, m, c] {
                   if (!logits->requires_grad) return;
                   logits->ensure_grad();
                   const double g = out->grad[0] / static_cast<double>(m);
                   for (std::size_t r = 0; r < m; ++r) {
                       const double* p = probs->data() + r * c;
                       double* gl = logits->grad.data() + r * c;
                       const std::size_t y = static_cast<std::size_t>((*labels_copy)[r]);
                       for (std::size_t j = 0; j < c; ++j) {
                           gl[j] += g * (p[j] - (j == y ? 1.0 : 0.0));
                       }
                   }
               });
        return out;
    }

    // Same row-major buffer, new shape.
    TensorPtr reshape(const TensorPtr& a, std::size_t rows, std::size_t cols) {
        if (rows * cols != a->size()) {
            throw DimensionError("reshape: " + a->shape.str() + " to " +
                                 Shape{rows, cols}.str());
        }
        auto out = tensor(rows, cols);
        out->data = a->data;
        check_finite(*out, "reshape");
        record("reshape", out, {a}, [a, out] { accumulate(a, out->grad, 1.0); });
        return out;
    }

    // Stack blocks with equal column counts along the row axis.
    TensorPtr concat_rows(const std::vector<TensorPtr>& parts) {
        if (parts.empty()) throw DimensionError("concat_rows: no inputs");
        const std::size_t cols = parts[0]->cols();
        std::size_t rows = 0;
        for (const auto& p : parts) {
            if (p->cols() != cols) {
                throw DimensionError("concat_rows: " + p->shape.str() + " vs " +
                                     std::to_string(cols) + " columns");
            }
            rows += p->rows();
        }
        auto out = tensor(rows, cols);
        std::size_t r0 = 0;
        for (const auto& p : parts) {
            std::copy(p->data.begin(), p->data.end(), out->data.begin() + r0 * cols);
            r0 += p->rows();
        }
        check_finite(*out, "concat_rows");
        bool any = false;
        for (const auto& p : parts) any = any || p->requires_grad;
        if (any) {
            out->requires_grad = true;
            auto inputs = parts;
            nodes_.push_back(Node{"concat_rows", out, [inputs, out, cols] {
                std::size_t r0 = 0;
                for (const auto& p : inputs) {
                    if (p->requires_grad) {
                        p->ensure_grad();
                        for (std::size_t i = 0; i < p->size(); ++i)
                            p->grad[i] += out->grad[r0 * cols + i];
                    }
                    r0 += p->rows();
                }
            }});
        }
        return out;
    }

    // Seeds d(loss)/d(loss) = 1 and replays nodes in reverse creation order.
    // Leaf gradients accumulate additively across calls; intermediate (tape-
    // produced) gradients are reset per call so a repeated backward doubles
    // exactly the leaves. Callers clear leaf grads between optimizer steps.
    void backward(const TensorPtr& loss) {
        if (!loss->is_scalar()) {
            throw UsageError("backward: loss must be 1x1, got " + loss->shape.str());
        }
        for (auto& n : nodes_) n.out->grad.clear();
        loss->ensure_grad();
        loss->grad[0] = 1.0;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            if (it->out->has_grad()) it->backward();
        }
    }

private:
    std::vector<Node> nodes_;

    static void require_same_shape(const TensorPtr& a, const TensorPtr& b, const char* op) {
        if (!(a->shape == b->shape)) {
            throw DimensionError(std::string(op) + ": " + a->shape.str() + " vs " +
                                 b->shape.str());
        }
    }

    static void accumulate(const TensorPtr& t, const std::vector<double>& g, double c) {
        if (!t->requires_grad) return;
        t->ensure_grad();
        for (std::size_t i = 0; i < t->size(); ++i) t->grad[i] += c * g[i];
    }

    static void accumulate(const TensorPtr& t, double g) {
        if (!t->requires_grad) return;
        t->ensure_grad();
        for (std::size_t i = 0; i < t->size(); ++i) t->grad[i] += g;
    }

    void record(const char* op, const TensorPtr& out,
                std::initializer_list<TensorPtr> inputs, std::function<void()> fn) {
        bool any = false;
        for (const auto& in : inputs) any = any || in->requires_grad;
        if (!any) return;
        out->requires_grad = true;
        nodes_.push_back(Node{op, out, std::move(fn)});
    }
};

// In-place vanilla SGD update; gradients are left untouched.
inline void sgd_step(const std::vector<TensorPtr>& params, double lr) {
    for (const auto& p : params) {
        if (!p->has_grad()) {
            throw UsageError("sgd_step: parameter of shape " + p->shape.str() +
                             " has no gradient");
        }
        for (std::size_t i = 0; i < p->size(); ++i) p->data[i] -= lr * p->grad[i];
        check_finite(*p, "sgd_step");
    }
}

} // namespace lplab
