// Minimal dense-tensor numerics with tape-based reverse-mode autodiff.
// Everything is 64-bit; graphs are rebuilt per forward pass.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace egtr {

struct Tensor;
using Ten = std::shared_ptr<Tensor>;

[[noreturn]] inline void fatal(const std::string& msg) {
    throw std::runtime_error(msg);
}

inline std::string shape_str(const std::vector<int>& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

inline int64_t numel_of(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;
    std::vector<double> grad;   // same length as data once backward touched it
    bool requires_grad = false;
    std::vector<Ten> parents;
    std::function<void(Tensor&)> backward_fn;  // adds to parents' grads

    Tensor(std::vector<int> s, bool rg = false)
        : shape(std::move(s)), requires_grad(rg) {
        data.assign(static_cast<size_t>(numel_of(shape)), 0.0);
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }
    int ndim() const { return static_cast<int>(shape.size()); }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

inline Ten tensor(std::vector<int> shape, bool requires_grad = false) {
    return std::make_shared<Tensor>(std::move(shape), requires_grad);
}

inline Ten tensor_from(std::vector<int> shape, std::vector<double> values,
                       bool requires_grad = false) {
    auto t = tensor(std::move(shape), requires_grad);
    if (values.size() != t->data.size())
        fatal("tensor_from: " + std::to_string(values.size()) + " values for shape " +
              shape_str(t->shape));
    t->data = std::move(values);
    return t;
}

inline Ten scalar(double v) { return tensor_from({1}, {v}); }

// A node needs grads if it or anything upstream of it does.
inline bool track(std::initializer_list<Ten> inputs) {
    for (const auto& t : inputs)
        if (t->requires_grad || t->backward_fn) return true;
    return false;
}

inline Ten make_node(std::vector<int> shape, std::vector<Ten> parents,
                     std::function<void(Tensor&)> bw) {
    auto out = tensor(std::move(shape));
    bool need = false;
    for (const auto& p : parents)
        if (p->requires_grad || p->backward_fn) need = true;
    if (need) {
        out->parents = std::move(parents);
        out->backward_fn = std::move(bw);
    }
    return out;
}

// ---- matmul -------------------------------------------------------------

inline Ten matmul(const Ten& a, const Ten& b) {
    if (a->ndim() != 2 || b->ndim() != 2 || a->dim(1) != b->dim(0))
        fatal("matmul: shape mismatch " + shape_str(a->shape) + " x " + shape_str(b->shape));
    const int m = a->dim(0), k = a->dim(1), n = b->dim(1);
    auto out = make_node({m, n}, {a, b}, [m, k, n](Tensor& o) {
        Tensor& A = *o.parents[0];
        Tensor& B = *o.parents[1];
        A.ensure_grad();
        B.ensure_grad();
        // dA = dO B^T ; dB = A^T dO
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) {
                const double g = o.grad[static_cast<size_t>(i) * n + j];
                if (g == 0.0) continue;
                for (int t = 0; t < k; ++t) {
                    A.grad[static_cast<size_t>(i) * k + t] += g * B.data[static_cast<size_t>(t) * n + j];
                    B.grad[static_cast<size_t>(t) * n + j] += g * A.data[static_cast<size_t>(i) * k + t];
                }
            }
    });
    // ikj order keeps the inner loop contiguous
    const double* pa = a->data.data();
    const double* pb = b->data.data();
    double* po = out->data.data();
    for (int i = 0; i < m; ++i) {
        double* orow = po + static_cast<size_t>(i) * n;
        for (int t = 0; t < k; ++t) {
            const double av = pa[static_cast<size_t>(i) * k + t];
            if (av == 0.0) continue;
            const double* brow = pb + static_cast<size_t>(t) * n;
            for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    return out;
}

// ---- elementwise --------------------------------------------------------

namespace detail {

// broadcast b over leading dims of a: numel(a) % numel(b) == 0, b repeats
inline void check_broadcast(const Ten& a, const Ten& b, const char* op) {
    if (b->numel() == 0 || a->numel() % b->numel() != 0)
        fatal(std::string(op) + ": incompatible shapes " + shape_str(a->shape) + " vs " +
              shape_str(b->shape));
}

}  // namespace detail

inline Ten add(const Ten& a, const Ten& b) {
    detail::check_broadcast(a, b, "add");
    const size_t nb = b->data.size();
    auto out = make_node(a->shape, {a, b}, [nb](Tensor& o) {
        Tensor& A = *o.parents[0];
        Tensor& B = *o.parents[1];
        A.ensure_grad();
        B.ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i) {
            A.grad[i] += o.grad[i];
            B.grad[i % nb] += o.grad[i];
        }
    });
    for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = a->data[i] + b->data[i % nb];
    return out;
}

inline Ten sub(const Ten& a, const Ten& b) {
    detail::check_broadcast(a, b, "sub");
    const size_t nb = b->data.size();
    auto out = make_node(a->shape, {a, b}, [nb](Tensor& o) {
        Tensor& A = *o.parents[0];
        Tensor& B = *o.parents[1];
        A.ensure_grad();
        B.ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i) {
            A.grad[i] += o.grad[i];
            B.grad[i % nb] -= o.grad[i];
        }
    });
    for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = a->data[i] - b->data[i % nb];
    return out;
}

inline Ten mul(const Ten& a, const Ten& b) {
    detail::check_broadcast(a, b, "mul");
    const size_t nb = b->data.size();
    auto out = make_node(a->shape, {a, b}, [nb](Tensor& o) {
        Tensor& A = *o.parents[0];
        Tensor& B = *o.parents[1];
        A.ensure_grad();
        B.ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i) {
            A.grad[i] += o.grad[i] * B.data[i % nb];
            B.grad[i % nb] += o.grad[i] * A.data[i];
        }
    });
    for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = a->data[i] * b->data[i % nb];
    return out;
}

// gate broadcast: g has shape (..., 1), x has shape (..., d); g repeats along last dim
inline Ten mul_lastdim_broadcast(const Ten& x, const Ten& g) {
    if (x->numel() % g->numel() != 0)
        fatal("mul_lastdim_broadcast: " + shape_str(x->shape) + " vs " + shape_str(g->shape));
    const size_t d = x->data.size() / g->data.size();
    auto out = make_node(x->shape, {x, g}, [d](Tensor& o) {
        Tensor& X = *o.parents[0];
        Tensor& G = *o.parents[1];
        X.ensure_grad();
        G.ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i) {
            X.grad[i] += o.grad[i] * G.data[i / d];
            G.grad[i / d] += o.grad[i] * X.data[i];
        }
    });
    for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = x->data[i] * g->data[i / d];
    return out;
}

inline Ten scale(const Ten& a, double c) {
    auto out = make_node(a->shape, {a}, [c](Tensor& o) {
        Tensor& A = *o.parents[0];
        A.ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i) A.grad[i] += c * o.grad[i];
    });
    for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = c * a->data[i];
    return out;
}

inline Ten add_const(const Ten& a, double c) {
    auto out = make_node(a->shape, {a}, [](Tensor& o) {
        Tensor& A = *o.parents[0];
        A.ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i) A.grad[i] += o.grad[i];
    });
    for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = a->data[i] + c;
    return out;
}

inline Ten sigmoid(const Ten& a) {
    auto out = make_node(a->shape, {a}, [](Tensor& o) {
        Tensor& A = *o.parents[0];
        A.ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i)
            A.grad[i] += o.grad[i] * o.data[i] * (1.0 - o.data[i]);
    });
    for (size_t i = 0; i < out->data.size(); ++i) {
        const double x = a->data[i];
        out->data[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                                : std::exp(x) / (1.0 + std::exp(x));
    }
    return out;
}

// subgradient at 0 is 0
inline Ten relu(const Ten& a) {
    auto out = make_node(a->shape, {a}, [](Tensor& o) {
        Tensor& A = *o.parents[0];
        A.ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i)
            if (A.data[i] > 0.0) A.grad[i] += o.grad[i];
    });
    for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = std::max(0.0, a->data[i]);
    return out;
}

inline Ten abs_op(const Ten& a) {
    auto out = make_node(a->shape, {a}, [](Tensor& o) {
        Tensor& A = *o.parents[0];
        A.ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i) {
            if (A.data[i] > 0.0) A.grad[i] += o.grad[i];
            else if (A.data[i] < 0.0) A.grad[i] -= o.grad[i];
        }
    });
    for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = std::fabs(a->data[i]);
    return out;
}

// elementwise max/min; ties route the gradient to the first input
inline Ten max_elem(const Ten& a, const Ten& b) {
    if (a->shape != b->shape) fatal("max_elem: shape mismatch");
    auto out = make_node(a->shape, {a, b}, [](Tensor& o) {
        Tensor& A = *o.parents[0];
        Tensor& B = *o.parents[1];
        A.ensure_grad();
        B.ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i) {
            if (A.data[i] >= B.data[i]) A.grad[i] += o.grad[i];
            else B.grad[i] += o.grad[i];
        }
    });
    for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = std::max(a->data[i], b->data[i]);
    return out;
}

inline Ten min_elem(const Ten& a, const Ten& b) {
    if (a->shape != b->shape) fatal("min_elem: shape mismatch");
    auto out = make_node(a->shape, {a, b}, [](Tensor& o) {
        Tensor& A = *o.parents[0];
        Tensor& B = *o.parents[1];
        A.ensure_grad();
        B.ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i) {
            if (A.data[i] <= B.data[i]) A.grad[i] += o.grad[i];
            else B.grad[i] += o.grad[i];
        }
    });
    for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = std::min(a->data[i], b->data[i]);
    return out;
}

inline Ten div_elem(const Ten& a, const Ten& b) {
    if (a->shape != b->shape) fatal("div_elem: shape mismatch");
    auto out = make_node(a->shape, {a, b}, [](Tensor& o) {
        Tensor& A = *o.parents[0];
        Tensor& B = *o.parents[1];
        A.ensure_grad();
        B.ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i) {
            A.grad[i] += o.grad[i] / B.data[i];
            B.grad[i] -= o.grad[i] * A.data[i] / (B.data[i] * B.data[i]);
        }
    });
    for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = a->data[i] / b->data[i];
    return out;
}

// ---- softmax ------------------------------------------------------------

inline Ten softmax_lastdim(const Ten& x) {
    if (x->ndim() < 1 || x->dim(x->ndim() - 1) < 1) fatal("softmax_lastdim: empty last dim");
    const int d = x->dim(x->ndim() - 1);
    const int64_t rows = x->numel() / d;
    auto out = make_node(x->shape, {x}, [d, rows](Tensor& o) {
        Tensor& X = *o.parents[0];
        X.ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
            const size_t base = static_cast<size_t>(r) * d;
            double dot = 0.0;
            for (int j = 0; j < d; ++j) dot += o.grad[base + j] * o.data[base + j];
            for (int j = 0; j < d; ++j)
                X.grad[base + j] += o.data[base + j] * (o.grad[base + j] - dot);
        }
    });
    for (int64_t r = 0; r < rows; ++r) {
        const size_t base = static_cast<size_t>(r) * d;
        double mx = x->data[base];
        for (int j = 1; j < d; ++j) mx = std::max(mx, x->data[base + j]);
        double sum = 0.0;
        for (int j = 0; j < d; ++j) {
            out->data[base + j] = std::exp(x->data[base + j] - mx);
            sum += out->data[base + j];
        }
        for (int j = 0; j < d; ++j) out->data[base + j] /= sum;
    }
    return out;
}

// ---- reductions ---------------------------------------------------------

inline Ten sum_all(const Ten& x) {
    auto out = make_node({1}, {x}, [](Tensor& o) {
        Tensor& X = *o.parents[0];
        X.ensure_grad();
        for (size_t i = 0; i < X.grad.size(); ++i) X.grad[i] += o.grad[0];
    });
    out->data[0] = std::accumulate(x->data.begin(), x->data.end(), 0.0);
    return out;
}

inline Ten mean_all(const Ten& x) {
    const double inv = 1.0 / static_cast<double>(x->numel());
    auto out = make_node({1}, {x}, [inv](Tensor& o) {
        Tensor& X = *o.parents[0];
        X.ensure_grad();
        for (size_t i = 0; i < X.grad.size(); ++i) X.grad[i] += o.grad[0] * inv;
    });
    out->data[0] = std::accumulate(x->data.begin(), x->data.end(), 0.0) * inv;
    return out;
}

inline std::vector<int> drop_axis(const std::vector<int>& shape, int axis) {
    std::vector<int> out;
    for (int i = 0; i < static_cast<int>(shape.size()); ++i)
        if (i != axis) out.push_back(shape[static_cast<size_t>(i)]);
    if (out.empty()) out.push_back(1);
    return out;
}

namespace detail {
inline void axis_strides(const std::vector<int>& shape, int axis, int64_t& outer,
                         int64_t& len, int64_t& inner) {
    outer = 1;
    inner = 1;
    len = shape[static_cast<size_t>(axis)];
    for (int i = 0; i < axis; ++i) outer *= shape[static_cast<size_t>(i)];
    for (int i = axis + 1; i < static_cast<int>(shape.size()); ++i)
        inner *= shape[static_cast<size_t>(i)];
}
}  // namespace detail

inline Ten sum_axis(const Ten& x, int axis) {
    if (axis < 0 || axis >= x->ndim()) fatal("sum_axis: invalid axis " + std::to_string(axis));
    int64_t outer, len, inner;
    detail::axis_strides(x->shape, axis, outer, len, inner);
    auto out = make_node(drop_axis(x->shape, axis), {x}, [outer, len, inner](Tensor& o) {
        Tensor& X = *o.parents[0];
        X.ensure_grad();
        for (int64_t a = 0; a < outer; ++a)
            for (int64_t l = 0; l < len; ++l)
                for (int64_t b = 0; b < inner; ++b)
                    X.grad[static_cast<size_t>((a * len + l) * inner + b)] +=
                        o.grad[static_cast<size_t>(a * inner + b)];
    });
    for (int64_t a = 0; a < outer; ++a)
        for (int64_t l = 0; l < len; ++l)
            for (int64_t b = 0; b < inner; ++b)
                out->data[static_cast<size_t>(a * inner + b)] +=
                    x->data[static_cast<size_t>((a * len + l) * inner + b)];
    return out;
}

inline Ten mean_axis(const Ten& x, int axis) {
    if (axis < 0 || axis >= x->ndim()) fatal("mean_axis: invalid axis " + std::to_string(axis));
    return scale(sum_axis(x, axis), 1.0 / x->dim(axis));
}

// max along axis; argmax ties break to lowest index, subgradient follows argmax
inline Ten max_axis(const Ten& x, int axis, std::vector<int64_t>* argmax_out = nullptr) {
    if (axis < 0 || axis >= x->ndim()) fatal("max_axis: invalid axis " + std::to_string(axis));
    int64_t outer, len, inner;
    detail::axis_strides(x->shape, axis, outer, len, inner);
    auto arg = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(outer * inner), 0);
    auto out = make_node(drop_axis(x->shape, axis), {x}, [outer, len, inner, arg](Tensor& o) {
        Tensor& X = *o.parents[0];
        X.ensure_grad();
        for (int64_t a = 0; a < outer; ++a)
            for (int64_t b = 0; b < inner; ++b) {
                const int64_t l = (*arg)[static_cast<size_t>(a * inner + b)];
                X.grad[static_cast<size_t>((a * len + l) * inner + b)] +=
                    o.grad[static_cast<size_t>(a * inner + b)];
            }
    });
    for (int64_t a = 0; a < outer; ++a)
        for (int64_t b = 0; b < inner; ++b) {
            double best = x->data[static_cast<size_t>(a * len * inner + b)];
            int64_t bi = 0;
            for (int64_t l = 1; l < len; ++l) {
                const double v = x->data[static_cast<size_t>((a * len + l) * inner + b)];
                if (v > best) {
                    best = v;
                    bi = l;
                }
            }
            out->data[static_cast<size_t>(a * inner + b)] = best;
            (*arg)[static_cast<size_t>(a * inner + b)] = bi;
        }
    if (argmax_out) *argmax_out = *arg;
    return out;
}

// ---- shape / indexing ---------------------------------------------------

inline Ten reshape(const Ten& x, std::vector<int> shape) {
    if (numel_of(shape) != x->numel())
        fatal("reshape: " + shape_str(x->shape) + " -> " + shape_str(shape));
    auto out = make_node(std::move(shape), {x}, [](Tensor& o) {
        Tensor& X = *o.parents[0];
        X.ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i) X.grad[i] += o.grad[i];
    });
    out->data = x->data;
    return out;
}

// rows [r0, r1) of a 2-D tensor
inline Ten slice_rows(const Ten& x, int r0, int r1) {
    if (x->ndim() != 2 || r0 < 0 || r1 > x->dim(0) || r0 >= r1) fatal("slice_rows: bad range");
    const int cols = x->dim(1);
    auto out = make_node({r1 - r0, cols}, {x}, [r0, cols](Tensor& o) {
        Tensor& X = *o.parents[0];
        X.ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i)
            X.grad[static_cast<size_t>(r0) * cols + i] += o.grad[i];
    });
    std::copy(x->data.begin() + static_cast<int64_t>(r0) * cols,
              x->data.begin() + static_cast<int64_t>(r1) * cols, out->data.begin());
    return out;
}

// select arbitrary flat elements; backward scatters
inline Ten gather(const Ten& x, const std::vector<int64_t>& idx) {
    for (int64_t i : idx)
        if (i < 0 || i >= x->numel()) fatal("gather: index out of range");
    auto ids = std::make_shared<std::vector<int64_t>>(idx);
    auto out = make_node({static_cast<int>(idx.size())}, {x}, [ids](Tensor& o) {
        Tensor& X = *o.parents[0];
        X.ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i)
            X.grad[static_cast<size_t>((*ids)[i])] += o.grad[i];
    });
    for (size_t i = 0; i < idx.size(); ++i)
        out->data[i] = x->data[static_cast<size_t>(idx[i])];
    return out;
}

inline Ten concat_cols(const Ten& a, const Ten& b) {
    if (a->ndim() != 2 || b->ndim() != 2 || a->dim(0) != b->dim(0))
        fatal("concat_cols: shape mismatch");
    const int rows = a->dim(0), ca = a->dim(1), cb = b->dim(1);
    auto out = make_node({rows, ca + cb}, {a, b}, [rows, ca, cb](Tensor& o) {
        Tensor& A = *o.parents[0];
        Tensor& B = *o.parents[1];
        A.ensure_grad();
        B.ensure_grad();
        for (int r = 0; r < rows; ++r) {
            const size_t ob = static_cast<size_t>(r) * (ca + cb);
            for (int j = 0; j < ca; ++j) A.grad[static_cast<size_t>(r) * ca + j] += o.grad[ob + j];
            for (int j = 0; j < cb; ++j) B.grad[static_cast<size_t>(r) * cb + j] += o.grad[ob + ca + j];
        }
    });
    for (int r = 0; r < rows; ++r) {
        const size_t ob = static_cast<size_t>(r) * (ca + cb);
        for (int j = 0; j < ca; ++j) out->data[ob + j] = a->data[static_cast<size_t>(r) * ca + j];
        for (int j = 0; j < cb; ++j) out->data[ob + ca + j] = b->data[static_cast<size_t>(r) * cb + j];
    }
    return out;
}

// columns [c0, c1) of a 2-D tensor
inline Ten slice_cols(const Ten& x, int c0, int c1) {
    if (x->ndim() != 2 || c0 < 0 || c1 > x->dim(1) || c0 >= c1) fatal("slice_cols: bad range");
    const int rows = x->dim(0), cols = x->dim(1), w = c1 - c0;
    auto out = make_node({rows, w}, {x}, [rows, cols, c0, w](Tensor& o) {
        Tensor& X = *o.parents[0];
        X.ensure_grad();
        for (int r = 0; r < rows; ++r)
            for (int j = 0; j < w; ++j)
                X.grad[static_cast<size_t>(r) * cols + c0 + j] +=
                    o.grad[static_cast<size_t>(r) * w + j];
    });
    for (int r = 0; r < rows; ++r)
        for (int j = 0; j < w; ++j)
            out->data[static_cast<size_t>(r) * w + j] = x->data[static_cast<size_t>(r) * cols + c0 + j];
    return out;
}

// per-row layer normalization with affine scale/shift
inline Ten layer_norm_rows(const Ten& x, const Ten& gamma, const Ten& beta, double eps = 1e-5) {
    if (x->ndim() != 2) fatal("layer_norm_rows: need 2-D input");
    const int rows = x->dim(0), d = x->dim(1);
    if (gamma->numel() != d || beta->numel() != d) fatal("layer_norm_rows: affine size mismatch");
    auto xhat = std::make_shared<std::vector<double>>(x->data.size());
    auto istd = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
    auto out = make_node({rows, d}, {x, gamma, beta}, [rows, d, xhat, istd](Tensor& o) {
        Tensor& X = *o.parents[0];
        Tensor& G = *o.parents[1];
        Tensor& B = *o.parents[2];
        X.ensure_grad();
        G.ensure_grad();
        B.ensure_grad();
        for (int r = 0; r < rows; ++r) {
            const size_t base = static_cast<size_t>(r) * d;
            double gsum = 0.0, gxsum = 0.0;
            for (int j = 0; j < d; ++j) {
                const double gy = o.grad[base + j] * G.data[static_cast<size_t>(j)];
                gsum += gy;
                gxsum += gy * (*xhat)[base + j];
                G.grad[static_cast<size_t>(j)] += o.grad[base + j] * (*xhat)[base + j];
                B.grad[static_cast<size_t>(j)] += o.grad[base + j];
            }
            const double is = (*istd)[static_cast<size_t>(r)];
            for (int j = 0; j < d; ++j) {
                const double gy = o.grad[base + j] * G.data[static_cast<size_t>(j)];
                X.grad[base + j] +=
                    is * (gy - gsum / d - (*xhat)[base + j] * gxsum / d);
            }
        }
    });
    for (int r = 0; r < rows; ++r) {
        const size_t base = static_cast<size_t>(r) * d;
        double mean = 0.0;
        for (int j = 0; j < d; ++j) mean += x->data[base + j];
        mean /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
            const double c = x->data[base + j] - mean;
            var += c * c;
        }
        var /= d;
        const double is = 1.0 / std::sqrt(var + eps);
        (*istd)[static_cast<size_t>(r)] = is;
        for (int j = 0; j < d; ++j) {
            (*xhat)[base + j] = (x->data[base + j] - mean) * is;
            out->data[base + j] = (*xhat)[base + j] * gamma->data[static_cast<size_t>(j)] +
                                  beta->data[static_cast<size_t>(j)];
        }
    }
    return out;
}

inline Ten transpose2d(const Ten& x) {
    if (x->ndim() != 2) fatal("transpose2d: need 2-D");
    const int m = x->dim(0), n = x->dim(1);
    auto out = make_node({n, m}, {x}, [m, n](Tensor& o) {
        Tensor& X = *o.parents[0];
        X.ensure_grad();
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < m; ++j)
                X.grad[static_cast<size_t>(j) * n + i] += o.grad[static_cast<size_t>(i) * m + j];
    });
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            out->data[static_cast<size_t>(j) * m + i] = x->data[static_cast<size_t>(i) * n + j];
    return out;
}

// ---- fused losses -------------------------------------------------------

// mean over elements of BCE(sigmoid(x), t); stable in logit space
inline Ten bce_with_logits_mean(const Ten& logits, const std::vector<double>& targets) {
    if (static_cast<int64_t>(targets.size()) != logits->numel())
        fatal("bce_with_logits_mean: target size mismatch");
    const auto tgt = std::make_shared<std::vector<double>>(targets);
    const double inv = 1.0 / static_cast<double>(targets.size());
    auto out = make_node({1}, {logits}, [tgt, inv](Tensor& o) {
        Tensor& X = *o.parents[0];
        X.ensure_grad();
        for (size_t i = 0; i < X.data.size(); ++i) {
            const double x = X.data[i];
            const double s = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                                      : std::exp(x) / (1.0 + std::exp(x));
            X.grad[i] += o.grad[0] * inv * (s - (*tgt)[i]);
        }
    });
    double acc = 0.0;
    for (size_t i = 0; i < targets.size(); ++i) {
        const double x = logits->data[i];
        // max(x,0) - x t + log(1 + exp(-|x|))
        acc += std::max(x, 0.0) - x * targets[i] + std::log1p(std::exp(-std::fabs(x)));
    }
    out->data[0] = acc * inv;
    return out;
}

// sum over rows of w_r * CE(softmax(logits_r), class_r)
inline Ten softmax_cross_entropy_sum(const Ten& logits, const std::vector<int>& classes,
                                     const std::vector<double>& row_weights) {
    if (logits->ndim() != 2) fatal("softmax_cross_entropy_sum: need 2-D logits");
    const int rows = logits->dim(0), cols = logits->dim(1);
    if (static_cast<int>(classes.size()) != rows || static_cast<int>(row_weights.size()) != rows)
        fatal("softmax_cross_entropy_sum: row count mismatch");
    auto cls = std::make_shared<std::vector<int>>(classes);
    auto wts = std::make_shared<std::vector<double>>(row_weights);
    auto out = make_node({1}, {logits}, [rows, cols, cls, wts](Tensor& o) {
        Tensor& X = *o.parents[0];
        X.ensure_grad();
        for (int r = 0; r < rows; ++r) {
            const size_t base = static_cast<size_t>(r) * cols;
            double mx = X.data[base];
            for (int j = 1; j < cols; ++j) mx = std::max(mx, X.data[base + j]);
            double sum = 0.0;
            for (int j = 0; j < cols; ++j) sum += std::exp(X.data[base + j] - mx);
            const double w = (*wts)[static_cast<size_t>(r)] * o.grad[0];
            for (int j = 0; j < cols; ++j) {
                const double p = std::exp(X.data[base + j] - mx) / sum;
                X.grad[base + j] += w * (p - (j == (*cls)[static_cast<size_t>(r)] ? 1.0 : 0.0));
            }
        }
    });
    double acc = 0.0;
    for (int r = 0; r < rows; ++r) {
        const size_t base = static_cast<size_t>(r) * cols;
        double mx = logits->data[base];
        for (int j = 1; j < cols; ++j) mx = std::max(mx, logits->data[base + j]);
        double lse = 0.0;
        for (int j = 0; j < cols; ++j) lse += std::exp(logits->data[base + j] - mx);
        lse = std::log(lse) + mx;
        acc += row_weights[static_cast<size_t>(r)] *
               (lse - logits->data[base + classes[static_cast<size_t>(r)]]);
    }
    out->data[0] = acc;
    return out;
}

// ---- backward -----------------------------------------------------------

inline void topo_sort(const Ten& root, std::vector<Tensor*>& order) {
    std::unordered_set<Tensor*> seen;
    // iterative DFS, children pushed in fixed parent order for determinism
    std::vector<std::pair<Tensor*, size_t>> stack{{root.get(), 0}};
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Tensor* p = node->parents[next++].get();
            if (!seen.count(p) && (p->backward_fn || p->requires_grad)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
}

inline void backward(const Ten& loss) {
    if (loss->numel() != 1)
        fatal("backward: loss must be scalar, got shape " + shape_str(loss->shape));
    std::vector<Tensor*> order;
    topo_sort(loss, order);
    for (Tensor* t : order)
        if (t->grad.size() == t->data.size()) std::fill(t->grad.begin(), t->grad.end(), 0.0);
    loss->ensure_grad();
    loss->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backward_fn) (*it)->backward_fn(**it);
}

// releases the tape below a tensor, keeping its values
inline void detach(const Ten& t) {
    t->parents.clear();
    t->backward_fn = nullptr;
}

// ---- finite differences -------------------------------------------------

// Central-difference audit of df/dx. Coordinates where |x_i| < kink_skip are
// excluded when skip_kinks is set (ReLU-style non-differentiable points).
inline double finite_diff_check(const std::function<double(const std::vector<double>&)>& f,
                                std::vector<double> x, const std::vector<double>& analytic,
                                double h = 1e-5, bool skip_kinks = false,
                                const std::function<bool(size_t)>& skip = nullptr) {
    double worst = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
        if (skip && skip(i)) continue;
        if (skip_kinks && std::fabs(x[i]) < h) continue;
        const double orig = x[i];
        x[i] = orig + h;
        const double fp = f(x);
        x[i] = orig - h;
        const double fm = f(x);
        x[i] = orig;
        const double num = (fp - fm) / (2.0 * h);
        const double denom = std::max({1.0, std::fabs(num), std::fabs(analytic[i])});
        worst = std::max(worst, std::fabs(num - analytic[i]) / denom);
    }
    return worst;
}

}  // namespace egtr
