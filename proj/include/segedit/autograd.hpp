#pragma once

// Small reverse-mode autodiff over dense tensors. Image tensors are (C, H, W);
// matrices are (rows, cols). Scalar type is a template parameter so gradient checks can
// run in double while training runs in float.

#include "segedit/error.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <new>
#include <numeric>
#include <random>
#include <string>
#include <unordered_set>
#include <vector>

namespace segedit::ag {

/// Tensor storage aligned to 64 bytes. Eigen's vectorized reductions peel a head that
/// depends on the buffer address, so malloc-aligned storage makes sums differ between runs.
template <class T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t alignment{64};

    AlignedAllocator() noexcept = default;
    template <class U>
    AlignedAllocator(AlignedAllocator<U> const&) noexcept {}

    T* allocate(size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
    void deallocate(T* p, size_t) noexcept { ::operator delete(p, alignment); }

    template <class U>
    bool operator==(AlignedAllocator<U> const&) const noexcept { return true; }
};

template <class T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

template <class T>
struct Node;

template <class T>
using Var = std::shared_ptr<Node<T>>;

template <class T>
struct Node {
    std::vector<int> shape;
    Buffer<T> value;
    Buffer<T> grad;
    std::vector<Var<T>> parents;
    std::function<void(Node&)> backward;
    bool requires_grad = false;

    size_t size() const noexcept { return value.size(); }
    int dim(int i) const { return shape.at(static_cast<size_t>(i)); }

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    }
    void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
};

inline size_t shape_size(std::vector<int> const& shape) {
    size_t n = 1;
    for (int d : shape) {
        if (d < 1) throw Error(ErrorKind::shape, "tensor dimensions must be positive");
        n *= static_cast<size_t>(d);
    }
    return n;
}

template <class T>
Var<T> constant(std::vector<int> shape, std::vector<T> value) {
    if (shape_size(shape) != value.size()) throw Error(ErrorKind::shape, "tensor data does not match its shape");
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value.assign(value.begin(), value.end());
    return n;
}

template <class T>
Var<T> zeros(std::vector<int> shape) {
    size_t n = shape_size(shape);
    return constant<T>(std::move(shape), std::vector<T>(n, T(0)));
}

/// Trainable leaf.
template <class T>
Var<T> parameter(std::vector<int> shape, std::vector<T> value) {
    auto n = constant<T>(std::move(shape), std::move(value));
    n->requires_grad = true;
    n->ensure_grad();
    return n;
}

namespace detail {

template <class T>
Var<T> make(std::vector<int> shape, std::vector<Var<T>> parents) {
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value.assign(shape_size(n->shape), T(0));
    for (auto const& p : parents) n->requires_grad = n->requires_grad || p->requires_grad;
    n->parents = std::move(parents);
    return n;
}

inline void same_shape(std::vector<int> const& a, std::vector<int> const& b, char const* op) {
    if (a != b) throw Error(ErrorKind::shape, std::string(op) + ": operand shapes differ");
}

template <class T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <class T>
using CMatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> const>;

} // namespace detail

/// Accumulates d(root)/d(node) into every reachable node with requires_grad. The root
/// must be a single element; its seed gradient is 1.
template <class T>
void backward(Var<T> const& root) {
    if (root->size() != 1) throw Error(ErrorKind::shape, "backward needs a scalar root");
    if (!root->requires_grad) return;
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, size_t>> stack{{root.get(), 0}};
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [n, i] = stack.back();
        if (i < n->parents.size()) {
            Node<T>* p = n->parents[i++].get();
            if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    for (auto* n : order) n->ensure_grad();
    root->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backward) (*it)->backward(**it);
}

// ---------------------------------------------------------------- elementwise

template <class T>
Var<T> add(Var<T> const& a, Var<T> const& b) {
    detail::same_shape(a->shape, b->shape, "add");
    auto out = detail::make<T>(a->shape, {a, b});
    for (size_t i = 0; i < out->size(); ++i) out->value[i] = a->value[i] + b->value[i];
    out->backward = [](Node<T>& n) {
        for (int k = 0; k < 2; ++k)
            if (n.parents[k]->requires_grad)
                for (size_t i = 0; i < n.size(); ++i) n.parents[k]->grad[i] += n.grad[i];
    };
    return out;
}

template <class T>
Var<T> sub(Var<T> const& a, Var<T> const& b) {
    detail::same_shape(a->shape, b->shape, "sub");
    auto out = detail::make<T>(a->shape, {a, b});
    for (size_t i = 0; i < out->size(); ++i) out->value[i] = a->value[i] - b->value[i];
    out->backward = [](Node<T>& n) {
        if (n.parents[0]->requires_grad)
            for (size_t i = 0; i < n.size(); ++i) n.parents[0]->grad[i] += n.grad[i];
        if (n.parents[1]->requires_grad)
            for (size_t i = 0; i < n.size(); ++i) n.parents[1]->grad[i] -= n.grad[i];
    };
    return out;
}

template <class T>
Var<T> mul(Var<T> const& a, Var<T> const& b) {
    detail::same_shape(a->shape, b->shape, "mul");
    auto out = detail::make<T>(a->shape, {a, b});
    for (size_t i = 0; i < out->size(); ++i) out->value[i] = a->value[i] * b->value[i];
    out->backward = [](Node<T>& n) {
        auto &pa = *n.parents[0], &pb = *n.parents[1];
        if (pa.requires_grad)
            for (size_t i = 0; i < n.size(); ++i) pa.grad[i] += n.grad[i] * pb.value[i];
        if (pb.requires_grad)
            for (size_t i = 0; i < n.size(); ++i) pb.grad[i] += n.grad[i] * pa.value[i];
    };
    return out;
}

template <class T>
Var<T> scale(Var<T> const& a, T s) {
    auto out = detail::make<T>(a->shape, {a});
    for (size_t i = 0; i < out->size(); ++i) out->value[i] = a->value[i] * s;
    out->backward = [s](Node<T>& n) {
        for (size_t i = 0; i < n.size(); ++i) n.parents[0]->grad[i] += n.grad[i] * s;
    };
    return out;
}

template <class T>
Var<T> add_scalar(Var<T> const& a, T s) {
    auto out = detail::make<T>(a->shape, {a});
    for (size_t i = 0; i < out->size(); ++i) out->value[i] = a->value[i] + s;
    out->backward = [](Node<T>& n) {
        for (size_t i = 0; i < n.size(); ++i) n.parents[0]->grad[i] += n.grad[i];
    };
    return out;
}

/// Applies f elementwise; df receives (input, output) and returns the local derivative.
template <class T, class F, class DF>
Var<T> unary(Var<T> const& a, F f, DF df) {
    auto out = detail::make<T>(a->shape, {a});
    for (size_t i = 0; i < out->size(); ++i) out->value[i] = f(a->value[i]);
    out->backward = [df](Node<T>& n) {
        auto& p = *n.parents[0];
        for (size_t i = 0; i < n.size(); ++i) p.grad[i] += n.grad[i] * df(p.value[i], n.value[i]);
    };
    return out;
}

template <class T>
Var<T> tanh(Var<T> const& a) {
    return unary(a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <class T>
Var<T> sigmoid(Var<T> const& a) {
    return unary(
        a, [](T x) { return T(1) / (T(1) + std::exp(-x)); }, [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Var<T> leaky_relu(Var<T> const& a, T slope = T(0.2)) {
    return unary(
        a, [slope](T x) { return x > 0 ? x : slope * x; }, [slope](T x, T) { return x > 0 ? T(1) : slope; });
}

/// log(1 + e^x), computed stably.
template <class T>
Var<T> softplus(Var<T> const& a) {
    return unary(
        a, [](T x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); },
        [](T x, T) { return T(1) / (T(1) + std::exp(-x)); });
}

template <class T>
Var<T> square(Var<T> const& a) {
    return unary(a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <class T>
Var<T> abs(Var<T> const& a) {
    return unary(a, [](T x) { return std::abs(x); }, [](T x, T) { return x > 0 ? T(1) : x < 0 ? T(-1) : T(0); });
}

// ---------------------------------------------------------------- reductions

template <class T>
Var<T> sum(Var<T> const& a) {
    auto out = detail::make<T>({1}, {a});
    T s = 0;
    for (T v : a->value) s += v;
    out->value[0] = s;
    out->backward = [](Node<T>& n) {
        for (auto& g : n.parents[0]->grad) g += n.grad[0];
    };
    return out;
}

template <class T>
Var<T> mean(Var<T> const& a) {
    return scale(sum(a), T(1) / static_cast<T>(a->size()));
}

/// Mean over rows of a (rows, cols) matrix -> (cols).
template <class T>
Var<T> mean_rows(Var<T> const& a) {
    if (a->shape.size() != 2) throw Error(ErrorKind::shape, "mean_rows needs a matrix");
    int r = a->dim(0), c = a->dim(1);
    auto out = detail::make<T>({c}, {a});
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out->value[j] += a->value[static_cast<size_t>(i) * c + j] / static_cast<T>(r);
    out->backward = [r, c](Node<T>& n) {
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) n.parents[0]->grad[static_cast<size_t>(i) * c + j] += n.grad[j] / static_cast<T>(r);
    };
    return out;
}

/// Mean over H, W of a (C, H, W) tensor -> (C).
template <class T>
Var<T> global_avg_pool(Var<T> const& a) {
    if (a->shape.size() != 3) throw Error(ErrorKind::shape, "global_avg_pool needs (C,H,W)");
    int c = a->dim(0);
    size_t hw = a->size() / c;
    auto out = detail::make<T>({c}, {a});
    for (int k = 0; k < c; ++k) {
        T s = 0;
        for (size_t i = 0; i < hw; ++i) s += a->value[k * hw + i];
        out->value[k] = s / static_cast<T>(hw);
    }
    out->backward = [c, hw](Node<T>& n) {
        for (int k = 0; k < c; ++k)
            for (size_t i = 0; i < hw; ++i) n.parents[0]->grad[k * hw + i] += n.grad[k] / static_cast<T>(hw);
    };
    return out;
}

// ---------------------------------------------------------------- shape ops

template <class T>
Var<T> reshape(Var<T> const& a, std::vector<int> shape) {
    if (shape_size(shape) != a->size()) throw Error(ErrorKind::shape, "reshape changes element count");
    auto out = detail::make<T>(std::move(shape), {a});
    out->value = a->value;
    out->backward = [](Node<T>& n) {
        for (size_t i = 0; i < n.size(); ++i) n.parents[0]->grad[i] += n.grad[i];
    };
    return out;
}

/// Concatenates along the leading axis; trailing dims must agree.
template <class T>
Var<T> concat(std::vector<Var<T>> const& parts) {
    if (parts.empty()) throw Error(ErrorKind::shape, "concat of nothing");
    std::vector<int> shape = parts[0]->shape;
    int lead = 0;
    for (auto const& p : parts) {
        if (p->shape.size() != shape.size() || !std::equal(p->shape.begin() + 1, p->shape.end(), shape.begin() + 1))
            throw Error(ErrorKind::shape, "concat: trailing dimensions differ");
        lead += p->dim(0);
    }
    shape[0] = lead;
    auto out = detail::make<T>(shape, parts);
    size_t off = 0;
    for (auto const& p : parts) {
        std::copy(p->value.begin(), p->value.end(), out->value.begin() + static_cast<std::ptrdiff_t>(off));
        off += p->size();
    }
    out->backward = [](Node<T>& n) {
        size_t off = 0;
        for (auto const& p : n.parents) {
            if (p->requires_grad)
                for (size_t i = 0; i < p->size(); ++i) p->grad[i] += n.grad[off + i];
            off += p->size();
        }
    };
    return out;
}

/// (D) -> (D, H, W), each channel constant.
template <class T>
Var<T> broadcast_spatial(Var<T> const& v, int h, int w) {
    if (v->shape.size() != 1) throw Error(ErrorKind::shape, "broadcast_spatial needs a vector");
    int d = v->dim(0);
    size_t hw = static_cast<size_t>(h) * w;
    auto out = detail::make<T>({d, h, w}, {v});
    for (int k = 0; k < d; ++k) std::fill_n(out->value.begin() + static_cast<std::ptrdiff_t>(k * hw), hw, v->value[k]);
    out->backward = [d, hw](Node<T>& n) {
        for (int k = 0; k < d; ++k)
            for (size_t i = 0; i < hw; ++i) n.parents[0]->grad[k] += n.grad[k * hw + i];
    };
    return out;
}

template <class T>
Var<T> transpose(Var<T> const& a) {
    if (a->shape.size() != 2) throw Error(ErrorKind::shape, "transpose needs a matrix");
    int r = a->dim(0), c = a->dim(1);
    auto out = detail::make<T>({c, r}, {a});
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out->value[static_cast<size_t>(j) * r + i] = a->value[static_cast<size_t>(i) * c + j];
    out->backward = [r, c](Node<T>& n) {
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) n.parents[0]->grad[static_cast<size_t>(i) * c + j] += n.grad[static_cast<size_t>(j) * r + i];
    };
    return out;
}

// ---------------------------------------------------------------- linear algebra

/// (m, k) x (k, n) -> (m, n). A vector operand of shape (k) on the right is treated as (k, 1).
template <class T>
Var<T> matmul(Var<T> const& a, Var<T> const& b) {
    if (a->shape.size() != 2 || b->shape.empty() || b->shape.size() > 2) throw Error(ErrorKind::shape, "matmul needs matrices");
    int m = a->dim(0), k = a->dim(1);
    int kb = b->dim(0), n = b->shape.size() == 2 ? b->dim(1) : 1;
    if (k != kb) throw Error(ErrorKind::shape, "matmul: inner dimensions differ");
    std::vector<int> shape = b->shape.size() == 2 ? std::vector<int>{m, n} : std::vector<int>{m};
    auto out = detail::make<T>(shape, {a, b});
    detail::MatMap<T>(out->value.data(), m, n).noalias() =
        detail::CMatMap<T>(a->value.data(), m, k) * detail::CMatMap<T>(b->value.data(), k, n);
    out->backward = [m, k, n](Node<T>& nd) {
        auto &pa = *nd.parents[0], &pb = *nd.parents[1];
        detail::CMatMap<T> g(nd.grad.data(), m, n);
        if (pa.requires_grad)
            detail::MatMap<T>(pa.grad.data(), m, k).noalias() += g * detail::CMatMap<T>(pb.value.data(), k, n).transpose();
        if (pb.requires_grad)
            detail::MatMap<T>(pb.grad.data(), k, n).noalias() += detail::CMatMap<T>(pa.value.data(), m, k).transpose() * g;
    };
    return out;
}

/// x (in) or (rows, in) times W^T plus b: W is (out, in), b is (out).
template <class T>
Var<T> linear(Var<T> const& x, Var<T> const& w, Var<T> const& b) {
    if (x->shape.size() == 1) return add(matmul(w, x), b);
    auto y = transpose(matmul(w, transpose(x)));
    int rows = x->dim(0), o = w->dim(0);
    auto out = detail::make<T>({rows, o}, {y, b});
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < o; ++j) out->value[static_cast<size_t>(i) * o + j] = y->value[static_cast<size_t>(i) * o + j] + b->value[j];
    out->backward = [rows, o](Node<T>& n) {
        auto &py = *n.parents[0], &pb = *n.parents[1];
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < o; ++j) {
                T g = n.grad[static_cast<size_t>(i) * o + j];
                if (py.requires_grad) py.grad[static_cast<size_t>(i) * o + j] += g;
                if (pb.requires_grad) pb.grad[j] += g;
            }
    };
    return out;
}

/// Softmax over axis 0 of a (rows, cols) matrix: every column sums to 1.
template <class T>
Var<T> softmax_cols(Var<T> const& a) {
    if (a->shape.size() != 2) throw Error(ErrorKind::shape, "softmax_cols needs a matrix");
    int r = a->dim(0), c = a->dim(1);
    auto out = detail::make<T>(a->shape, {a});
    for (int j = 0; j < c; ++j) {
        T mx = a->value[j];
        for (int i = 1; i < r; ++i) mx = std::max(mx, a->value[static_cast<size_t>(i) * c + j]);
        T s = 0;
        for (int i = 0; i < r; ++i) s += out->value[static_cast<size_t>(i) * c + j] = std::exp(a->value[static_cast<size_t>(i) * c + j] - mx);
        for (int i = 0; i < r; ++i) out->value[static_cast<size_t>(i) * c + j] /= s;
    }
    out->backward = [r, c](Node<T>& n) {
        for (int j = 0; j < c; ++j) {
            T dot = 0;
            for (int i = 0; i < r; ++i) dot += n.grad[static_cast<size_t>(i) * c + j] * n.value[static_cast<size_t>(i) * c + j];
            for (int i = 0; i < r; ++i) {
                size_t k = static_cast<size_t>(i) * c + j;
                n.parents[0]->grad[k] += n.value[k] * (n.grad[k] - dot);
            }
        }
    };
    return out;
}

template <class T>
Var<T> softmax_rows(Var<T> const& a) {
    return transpose(softmax_cols(transpose(a)));
}

/// Scales every row of a (rows, cols) matrix to unit L2 norm (eps-guarded).
template <class T>
Var<T> normalize_rows(Var<T> const& a, T eps = T(1e-8)) {
    if (a->shape.size() != 2) throw Error(ErrorKind::shape, "normalize_rows needs a matrix");
    int r = a->dim(0), c = a->dim(1);
    auto out = detail::make<T>(a->shape, {a});
    std::vector<T> norms(r);
    for (int i = 0; i < r; ++i) {
        T s = 0;
        for (int j = 0; j < c; ++j) s += a->value[static_cast<size_t>(i) * c + j] * a->value[static_cast<size_t>(i) * c + j];
        norms[i] = std::sqrt(s + eps);
        for (int j = 0; j < c; ++j) out->value[static_cast<size_t>(i) * c + j] = a->value[static_cast<size_t>(i) * c + j] / norms[i];
    }
    out->backward = [r, c, norms](Node<T>& n) {
        for (int i = 0; i < r; ++i) {
            T dot = 0;
            for (int j = 0; j < c; ++j) dot += n.grad[static_cast<size_t>(i) * c + j] * n.value[static_cast<size_t>(i) * c + j];
            for (int j = 0; j < c; ++j) {
                size_t k = static_cast<size_t>(i) * c + j;
                n.parents[0]->grad[k] += (n.grad[k] - n.value[k] * dot) / norms[i];
            }
        }
    };
    return out;
}

// ---------------------------------------------------------------- spatial ops

/// 2-D convolution: x (C, H, W), w (O, C, k, k), optional b (O); zero padding.
template <class T>
Var<T> conv2d(Var<T> const& x, Var<T> const& w, Var<T> const& b, int stride = 1, int pad = -1) {
    if (x->shape.size() != 3 || w->shape.size() != 4) throw Error(ErrorKind::shape, "conv2d needs (C,H,W) input and (O,C,k,k) kernel");
    int C = x->dim(0), H = x->dim(1), W = x->dim(2);
    int O = w->dim(0), k = w->dim(2);
    if (w->dim(1) != C || w->dim(3) != k) throw Error(ErrorKind::shape, "conv2d: kernel does not match input channels");
    if (b && (b->shape.size() != 1 || b->dim(0) != O)) throw Error(ErrorKind::shape, "conv2d: bias does not match output channels");
    if (pad < 0) pad = k / 2;
    int Ho = (H + 2 * pad - k) / stride + 1, Wo = (W + 2 * pad - k) / stride + 1;
    if (Ho < 1 || Wo < 1) throw Error(ErrorKind::shape, "conv2d: input smaller than kernel");
    int K = C * k * k, P = Ho * Wo;

    Buffer<T> cols(static_cast<size_t>(K) * P, T(0));
    for (int c = 0; c < C; ++c)
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                T* row = cols.data() + static_cast<size_t>((c * k + ky) * k + kx) * P;
                for (int oy = 0; oy < Ho; ++oy) {
                    int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) continue;
                    T const* src = x->value.data() + (static_cast<size_t>(c) * H + iy) * W;
                    for (int ox = 0; ox < Wo; ++ox) {
                        int ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < W) row[oy * Wo + ox] = src[ix];
                    }
                }
            }

    std::vector<Var<T>> parents{x, w};
    if (b) parents.push_back(b);
    auto out = detail::make<T>({O, Ho, Wo}, parents);
    detail::MatMap<T> y(out->value.data(), O, P);
    y.noalias() = detail::CMatMap<T>(w->value.data(), O, K) * detail::CMatMap<T>(cols.data(), K, P);
    if (b)
        for (int o = 0; o < O; ++o) y.row(o).array() += b->value[o];

    out->backward = [=, cols = std::move(cols)](Node<T>& n) {
        auto &px = *n.parents[0], &pw = *n.parents[1];
        detail::CMatMap<T> g(n.grad.data(), O, P);
        if (pw.requires_grad) detail::MatMap<T>(pw.grad.data(), O, K).noalias() += g * detail::CMatMap<T>(cols.data(), K, P).transpose();
        if (n.parents.size() > 2 && n.parents[2]->requires_grad)
            for (int o = 0; o < O; ++o) n.parents[2]->grad[o] += g.row(o).sum();
        if (!px.requires_grad) return;
        Buffer<T> dcols(static_cast<size_t>(K) * P);
        detail::MatMap<T>(dcols.data(), K, P).noalias() = detail::CMatMap<T>(pw.value.data(), O, K).transpose() * g;
        for (int c = 0; c < C; ++c)
            for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) {
                    T const* row = dcols.data() + static_cast<size_t>((c * k + ky) * k + kx) * P;
                    for (int oy = 0; oy < Ho; ++oy) {
                        int iy = oy * stride - pad + ky;
                        if (iy < 0 || iy >= H) continue;
                        T* dst = px.grad.data() + (static_cast<size_t>(c) * H + iy) * W;
                        for (int ox = 0; ox < Wo; ++ox) {
                            int ix = ox * stride - pad + kx;
                            if (ix >= 0 && ix < W) dst[ix] += row[oy * Wo + ox];
                        }
                    }
                }
    };
    return out;
}

/// Average pooling by an integer factor; H and W must be divisible by it.
template <class T>
Var<T> avg_pool(Var<T> const& x, int f) {
    if (x->shape.size() != 3) throw Error(ErrorKind::shape, "avg_pool needs (C,H,W)");
    int C = x->dim(0), H = x->dim(1), W = x->dim(2);
    if (f < 1 || H % f || W % f) throw Error(ErrorKind::shape, "avg_pool: size not divisible by factor");
    if (f == 1) return x;
    int h = H / f, w = W / f;
    T inv = T(1) / static_cast<T>(f * f);
    auto out = detail::make<T>({C, h, w}, {x});
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < H; ++y)
            for (int xx = 0; xx < W; ++xx)
                out->value[(static_cast<size_t>(c) * h + y / f) * w + xx / f] += x->value[(static_cast<size_t>(c) * H + y) * W + xx] * inv;
    out->backward = [=](Node<T>& n) {
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < H; ++y)
                for (int xx = 0; xx < W; ++xx)
                    n.parents[0]->grad[(static_cast<size_t>(c) * H + y) * W + xx] += n.grad[(static_cast<size_t>(c) * h + y / f) * w + xx / f] * inv;
    };
    return out;
}

/// Nearest-neighbor upsampling by an integer factor.
template <class T>
Var<T> upsample(Var<T> const& x, int f) {
    if (x->shape.size() != 3) throw Error(ErrorKind::shape, "upsample needs (C,H,W)");
    if (f == 1) return x;
    int C = x->dim(0), h = x->dim(1), w = x->dim(2), H = h * f, W = w * f;
    auto out = detail::make<T>({C, H, W}, {x});
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < H; ++y)
            for (int xx = 0; xx < W; ++xx)
                out->value[(static_cast<size_t>(c) * H + y) * W + xx] = x->value[(static_cast<size_t>(c) * h + y / f) * w + xx / f];
    out->backward = [=](Node<T>& n) {
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < H; ++y)
                for (int xx = 0; xx < W; ++xx)
                    n.parents[0]->grad[(static_cast<size_t>(c) * h + y / f) * w + xx / f] += n.grad[(static_cast<size_t>(c) * H + y) * W + xx];
    };
    return out;
}

/// where(mask) a else b, with a per-pixel mask (H*W entries) shared by all channels.
template <class T>
Var<T> select(std::vector<uint8_t> const& mask, Var<T> const& a, Var<T> const& b) {
    detail::same_shape(a->shape, b->shape, "select");
    if (a->shape.size() != 3) throw Error(ErrorKind::shape, "select needs (C,H,W)");
    size_t hw = static_cast<size_t>(a->dim(1)) * a->dim(2);
    if (mask.size() != hw) throw Error(ErrorKind::shape, "select: mask size differs from image");
    int C = a->dim(0);
    auto out = detail::make<T>(a->shape, {a, b});
    for (int c = 0; c < C; ++c)
        for (size_t i = 0; i < hw; ++i) out->value[c * hw + i] = mask[i] ? a->value[c * hw + i] : b->value[c * hw + i];
    out->backward = [mask, C, hw](Node<T>& n) {
        auto &pa = *n.parents[0], &pb = *n.parents[1];
        for (int c = 0; c < C; ++c)
            for (size_t i = 0; i < hw; ++i) {
                auto& dst = mask[i] ? pa : pb;
                if (dst.requires_grad) dst.grad[c * hw + i] += n.grad[c * hw + i];
            }
    };
    return out;
}

/// Residual color head: base + d * (d > 0 ? 1 - base : base). With base and d in range
/// the result stays inside [0,1]; d == 0 reproduces base.
template <class T>
Var<T> residual_head(Var<T> const& base, Var<T> const& d) {
    detail::same_shape(base->shape, d->shape, "residual_head");
    auto out = detail::make<T>(base->shape, {base, d});
    for (size_t i = 0; i < out->size(); ++i) {
        T c = base->value[i], dv = d->value[i];
        out->value[i] = c + dv * (dv > 0 ? T(1) - c : c);
    }
    out->backward = [](Node<T>& n) {
        auto &pc = *n.parents[0], &pd = *n.parents[1];
        for (size_t i = 0; i < n.size(); ++i) {
            T c = pc.value[i], dv = pd.value[i], g = n.grad[i];
            if (pd.requires_grad) pd.grad[i] += g * (dv > 0 ? T(1) - c : c);
            if (pc.requires_grad) pc.grad[i] += g * (dv > 0 ? T(1) - dv : T(1) + dv);
        }
    };
    return out;
}

/// Detached copy: same values, no gradient path.
template <class T>
Var<T> detach(Var<T> const& a) {
    auto n = std::make_shared<Node<T>>();
    n->shape = a->shape;
    n->value = a->value;
    return n;
}

struct GradCheck {
    double max_rel_error = 0;
    size_t probes = 0;
};

/// Central finite differences for every element of every leaf in `leaves` against the
/// analytic gradient of `loss()`. Relative error uses max(|analytic|, |numeric|, floor)
/// as the denominator so entries with a true gradient of zero do not divide by zero.
template <class T, class F>
GradCheck gradient_check(std::vector<Var<T>> const& leaves, F loss, T eps = T(1e-4), double floor = 1e-6) {
    for (auto const& l : leaves) {
        l->requires_grad = true;
        l->ensure_grad();
        l->zero_grad();
    }
    backward(loss());
    GradCheck out;
    for (auto const& l : leaves)
        for (size_t i = 0; i < l->size(); ++i) {
            T keep = l->value[i];
            l->value[i] = keep + eps;
            double up = loss()->value[0];
            l->value[i] = keep - eps;
            double down = loss()->value[0];
            l->value[i] = keep;
            double numeric = (up - down) / (2.0 * eps);
            double analytic = l->grad[i];
            double denom = std::max({std::abs(numeric), std::abs(analytic), floor});
            out.max_rel_error = std::max(out.max_rel_error, std::abs(numeric - analytic) / denom);
            ++out.probes;
        }
    return out;
}

} // namespace segedit::ag
