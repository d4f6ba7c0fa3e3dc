#include "cmb/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <unordered_set>

#include "cmb/gemm.hpp"

namespace cmb {

int64_t numel(const Shape& shape) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;
    std::vector<std::shared_ptr<TensorImpl>> parents;
    std::function<void()> backward_fn;
};

namespace {

thread_local bool g_grad_enabled = true;

void check_shape_positive(const Shape& shape) {
    for (int64_t d : shape)
        if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_str(shape));
}

// Ensures the grad buffer exists and returns it; caller must have checked
// requires_grad.
std::vector<double>& grad_buf(TensorImpl* t) {
    if (t->grad.empty()) t->grad.assign(t->data.size(), 0.0);
    return t->grad;
}

void acc_into(TensorImpl* t, const double* g, int64_t n) {
    if (!t->requires_grad) return;
    auto& gb = grad_buf(t);
    for (int64_t i = 0; i < n; ++i) gb[i] += g[i];
}

bool any_requires(const std::vector<Tensor>& ts) {
    for (const auto& t : ts)
        if (t.defined() && t.requires_grad()) return true;
    return false;
}

// Wires a result node into the tape. The backward closure receives the node
// itself; inputs are reachable through self->parents in the order given here.
Tensor make_node(Shape shape, std::vector<double> data, const std::vector<Tensor>& parents,
                 std::function<void(TensorImpl*)> bw) {
    Tensor out = Tensor::from_data(std::move(shape), std::move(data));
    if (!g_grad_enabled || !any_requires(parents)) return out;
    TensorImpl* impl = out.impl().get();
    impl->requires_grad = true;
    for (const auto& p : parents) impl->parents.push_back(p.impl());
    impl->backward_fn = [impl, bw = std::move(bw)]() { bw(impl); };
    return out;
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shapes differ, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

// (outer, axis length, inner) factorization for iteration along an axis.
struct AxisSplit {
    int64_t outer, n, inner;
};
AxisSplit axis_split(const Shape& shape, int axis) {
    AxisSplit s{1, shape[axis], 1};
    for (int i = 0; i < axis; ++i) s.outer *= shape[i];
    for (size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

int check_axis(const char* op, const Shape& shape, int axis) {
    if (axis < 0 || axis >= static_cast<int>(shape.size()))
        throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                         " invalid for shape " + shape_str(shape));
    return axis;
}

double stable_sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

} // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

// ---- Tensor basics ----

Tensor::Tensor(Shape shape, double fill, bool requires_grad) {
    check_shape_positive(shape);
    impl_ = std::make_shared<TensorImpl>();
    impl_->data.assign(numel(shape), fill);
    impl_->shape = std::move(shape);
    impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
Tensor Tensor::ones(Shape shape) { return Tensor(std::move(shape), 1.0); }
Tensor Tensor::full(Shape shape, double value) { return Tensor(std::move(shape), value); }
Tensor Tensor::scalar(double value) { return Tensor(Shape{1}, value); }

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    check_shape_positive(shape);
    if (numel(shape) != static_cast<int64_t>(data.size()))
        throw ShapeError("from_data: " + std::to_string(data.size()) +
                         " values do not fill shape " + shape_str(shape));
    Tensor t;
    t.impl_ = std::make_shared<TensorImpl>();
    t.impl_->shape = std::move(shape);
    t.impl_->data = std::move(data);
    t.impl_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev) {
    Tensor t(std::move(shape), 0.0);
    for (auto& v : t.impl_->data) v = rng.normal() * stddev;
    return t;
}

const Shape& Tensor::shape() const { return impl_->shape; }
int Tensor::rank() const { return static_cast<int>(impl_->shape.size()); }
int64_t Tensor::dim(int i) const { return impl_->shape.at(i); }
int64_t Tensor::size() const { return static_cast<int64_t>(impl_->data.size()); }

double* Tensor::data() { return impl_->data.data(); }
const double* Tensor::data() const { return impl_->data.data(); }
std::vector<double>& Tensor::vec() { return impl_->data; }
const std::vector<double>& Tensor::vec() const { return impl_->data; }

double Tensor::item() const {
    if (size() != 1) throw ShapeError("item(): tensor has shape " + shape_str(shape()));
    return impl_->data[0];
}

double Tensor::at(std::initializer_list<int64_t> idx) const {
    const Shape& s = impl_->shape;
    if (idx.size() != s.size()) throw ShapeError("at(): rank mismatch for " + shape_str(s));
    int64_t flat = 0;
    int i = 0;
    for (int64_t v : idx) flat = flat * s[i++] + v;
    return impl_->data.at(flat);
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool value) {
    impl_->requires_grad = value;
    return *this;
}

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

const std::vector<double>& Tensor::grad() const {
    if (!has_grad()) throw ValueError("grad(): no gradient recorded");
    return impl_->grad;
}

void Tensor::zero_grad() {
    if (impl_) impl_->grad.clear();
}

void Tensor::accumulate_grad(const double* g, int64_t n) {
    if (!impl_ || !impl_->requires_grad) return;
    acc_into(impl_.get(), g, n);
}

Tensor Tensor::detach() const {
    return from_data(impl_->shape, impl_->data);
}

void Tensor::backward() {
    if (!impl_) throw ValueError("backward(): undefined tensor");
    if (size() != 1)
        throw ValueError("backward(): root must be scalar, got shape " + shape_str(shape()));
    // Iterative post-order DFS to get a topological order.
    std::vector<TensorImpl*> order;
    std::unordered_set<TensorImpl*> seen;
    struct Frame {
        TensorImpl* node;
        size_t next;
    };
    std::vector<Frame> stack;
    stack.push_back({impl_.get(), 0});
    seen.insert(impl_.get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.node->parents.size()) {
            TensorImpl* p = f.node->parents[f.next++].get();
            if (p && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }
    grad_buf(impl_.get());
    impl_->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl* n = *it;
        if (n->backward_fn && !n->grad.empty()) n->backward_fn();
    }
}

Tensor Tensor::make_custom(
    Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
    std::function<void(const std::vector<double>&, std::vector<Tensor>&)> backward) {
    return make_node(std::move(shape), std::move(data), inputs,
                     [inputs, backward = std::move(backward)](TensorImpl* self) mutable {
                         backward(self->grad, inputs);
                     });
}

// ---- elementwise ----

namespace {

template <typename FwdFn, typename BwdFn>
Tensor binary_elementwise(const char* name, const Tensor& a, const Tensor& b, FwdFn f, BwdFn bw) {
    check_same_shape(name, a, b);
    const auto& av = a.vec();
    const auto& bv = b.vec();
    std::vector<double> out(av.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = f(av[i], bv[i]);
    return make_node(a.shape(), std::move(out), {a, b}, bw);
}

} // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_elementwise(
        "add", a, b, [](double x, double y) { return x + y; },
        [](TensorImpl* self) {
            const auto& g = self->grad;
            acc_into(self->parents[0].get(), g.data(), g.size());
            acc_into(self->parents[1].get(), g.data(), g.size());
        });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_elementwise(
        "sub", a, b, [](double x, double y) { return x - y; },
        [](TensorImpl* self) {
            const auto& g = self->grad;
            acc_into(self->parents[0].get(), g.data(), g.size());
            TensorImpl* p1 = self->parents[1].get();
            if (p1->requires_grad) {
                auto& gb = grad_buf(p1);
                for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
            }
        });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_elementwise(
        "mul", a, b, [](double x, double y) { return x * y; },
        [](TensorImpl* self) {
            const auto& g = self->grad;
            TensorImpl* pa = self->parents[0].get();
            TensorImpl* pb = self->parents[1].get();
            if (pa->requires_grad) {
                auto& gb = grad_buf(pa);
                for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * pb->data[i];
            }
            if (pb->requires_grad) {
                auto& gb = grad_buf(pb);
                for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * pa->data[i];
            }
        });
}

Tensor div(const Tensor& a, const Tensor& b) {
    return binary_elementwise(
        "div", a, b, [](double x, double y) { return x / y; },
        [](TensorImpl* self) {
            const auto& g = self->grad;
            TensorImpl* pa = self->parents[0].get();
            TensorImpl* pb = self->parents[1].get();
            if (pa->requires_grad) {
                auto& gb = grad_buf(pa);
                for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] / pb->data[i];
            }
            if (pb->requires_grad) {
                auto& gb = grad_buf(pb);
                for (size_t i = 0; i < g.size(); ++i)
                    gb[i] -= g[i] * pa->data[i] / (pb->data[i] * pb->data[i]);
            }
        });
}

namespace {

template <typename FwdFn, typename BwdFn>
Tensor unary_elementwise(const Tensor& a, FwdFn f, BwdFn bw) {
    const auto& av = a.vec();
    std::vector<double> out(av.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
    return make_node(a.shape(), std::move(out), {a}, bw);
}

// Backward for unary ops whose derivative depends on input x and output y.
template <typename DFn>
auto unary_bw(DFn d) {
    return [d](TensorImpl* self) {
        TensorImpl* p = self->parents[0].get();
        if (!p->requires_grad) return;
        const auto& g = self->grad;
        auto& gb = grad_buf(p);
        for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * d(p->data[i], self->data[i]);
    };
}

} // namespace

Tensor add_scalar(const Tensor& a, double c) {
    return unary_elementwise(a, [c](double x) { return x + c; },
                             unary_bw([](double, double) { return 1.0; }));
}

Tensor mul_scalar(const Tensor& a, double c) {
    return unary_elementwise(a, [c](double x) { return x * c; },
                             unary_bw([c](double, double) { return c; }));
}

Tensor rsub_scalar(const Tensor& a, double c) {
    return unary_elementwise(a, [c](double x) { return c - x; },
                             unary_bw([](double, double) { return -1.0; }));
}

Tensor neg(const Tensor& a) { return rsub_scalar(a, 0.0); }

Tensor relu(const Tensor& a) {
    return unary_elementwise(a, [](double x) { return x > 0.0 ? x : 0.0; },
                             unary_bw([](double x, double) { return x > 0.0 ? 1.0 : 0.0; }));
}

Tensor sigmoid(const Tensor& a) {
    return unary_elementwise(a, stable_sigmoid,
                             unary_bw([](double, double y) { return y * (1.0 - y); }));
}

Tensor exp(const Tensor& a) {
    return unary_elementwise(a, [](double x) { return std::exp(x); },
                             unary_bw([](double, double y) { return y; }));
}

Tensor log(const Tensor& a) {
    return unary_elementwise(a, [](double x) { return std::log(x); },
                             unary_bw([](double x, double) { return 1.0 / x; }));
}

Tensor sqrt(const Tensor& a) {
    return unary_elementwise(a, [](double x) { return std::sqrt(x); },
                             unary_bw([](double, double y) { return 0.5 / y; }));
}

Tensor softplus(const Tensor& a) {
    return unary_elementwise(
        a, [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); },
        unary_bw([](double x, double) { return stable_sigmoid(x); }));
}

Tensor rsqrt(const Tensor& a, double eps) {
    return unary_elementwise(a, [eps](double x) { return 1.0 / std::sqrt(x + eps); },
                             unary_bw([](double, double y) { return -0.5 * y * y * y; }));
}

Tensor clamp_away_from_zero(const Tensor& a, double eps) {
    return unary_elementwise(
        a,
        [eps](double x) {
            if (x == 0.0 || std::abs(x) >= eps) return x;
            return x > 0.0 ? eps : -eps;
        },
        unary_bw([eps](double x, double) { return std::abs(x) >= eps ? 1.0 : 0.0; }));
}

// ---- broadcast ----

Tensor scale_by(const Tensor& a, const Tensor& s) {
    if (s.size() != 1)
        throw ShapeError("scale_by: scale must be a scalar tensor, got " + shape_str(s.shape()));
    double sv = s.vec()[0];
    const auto& av = a.vec();
    std::vector<double> out(av.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * sv;
    return make_node(a.shape(), std::move(out), {a, s}, [](TensorImpl* self) {
        const auto& g = self->grad;
        TensorImpl* pa = self->parents[0].get();
        TensorImpl* ps = self->parents[1].get();
        if (pa->requires_grad) {
            double sv = ps->data[0];
            auto& gb = grad_buf(pa);
            for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * sv;
        }
        if (ps->requires_grad) {
            double acc = 0.0;
            for (size_t i = 0; i < g.size(); ++i) acc += g[i] * pa->data[i];
            grad_buf(ps)[0] += acc;
        }
    });
}

Tensor mul_broadcast0(const Tensor& x, const Tensor& g1) {
    if (x.rank() != g1.rank() || g1.dim(0) != 1)
        throw ShapeError("mul_broadcast0: gate must have one channel, got " +
                         shape_str(g1.shape()) + " for input " + shape_str(x.shape()));
    for (int i = 1; i < x.rank(); ++i)
        if (x.dim(i) != g1.dim(i))
            throw ShapeError("mul_broadcast0: trailing dims differ, " + shape_str(x.shape()) +
                             " vs " + shape_str(g1.shape()));
    int64_t c = x.dim(0);
    int64_t p = x.size() / c;
    const auto& xv = x.vec();
    const auto& gv = g1.vec();
    std::vector<double> out(xv.size());
    for (int64_t ci = 0; ci < c; ++ci)
        for (int64_t i = 0; i < p; ++i) out[ci * p + i] = xv[ci * p + i] * gv[i];
    return make_node(x.shape(), std::move(out), {x, g1}, [c, p](TensorImpl* self) {
        const auto& g = self->grad;
        TensorImpl* px = self->parents[0].get();
        TensorImpl* pg = self->parents[1].get();
        if (px->requires_grad) {
            auto& gb = grad_buf(px);
            for (int64_t ci = 0; ci < c; ++ci)
                for (int64_t i = 0; i < p; ++i) gb[ci * p + i] += g[ci * p + i] * pg->data[i];
        }
        if (pg->requires_grad) {
            auto& gb = grad_buf(pg);
            for (int64_t ci = 0; ci < c; ++ci)
                for (int64_t i = 0; i < p; ++i) gb[i] += g[ci * p + i] * px->data[ci * p + i];
        }
    });
}

namespace {

void check_channel_vec(const char* op, const Tensor& x, const Tensor& v) {
    if (v.rank() != 1 || v.dim(0) != x.dim(0))
        throw ShapeError(std::string(op) + ": per-channel vector " + shape_str(v.shape()) +
                         " does not match input " + shape_str(x.shape()));
}

template <typename FwdFn>
Tensor channel_op(const char* name, const Tensor& x, const Tensor& v, FwdFn f,
                  std::function<void(TensorImpl*)> bw) {
    check_channel_vec(name, x, v);
    int64_t c = x.dim(0);
    int64_t p = x.size() / c;
    const auto& xv = x.vec();
    const auto& vv = v.vec();
    std::vector<double> out(xv.size());
    for (int64_t ci = 0; ci < c; ++ci) {
        double s = vv[ci];
        for (int64_t i = 0; i < p; ++i) out[ci * p + i] = f(xv[ci * p + i], s);
    }
    return make_node(x.shape(), std::move(out), {x, v}, std::move(bw));
}

} // namespace

Tensor add_channels(const Tensor& x, const Tensor& v) {
    int64_t c = x.dim(0), p = x.size() / x.dim(0);
    return channel_op("add_channels", x, v, [](double a, double s) { return a + s; },
                      [c, p](TensorImpl* self) {
                          const auto& g = self->grad;
                          TensorImpl* px = self->parents[0].get();
                          TensorImpl* pv = self->parents[1].get();
                          if (px->requires_grad) acc_into(px, g.data(), g.size());
                          if (pv->requires_grad) {
                              auto& gb = grad_buf(pv);
                              for (int64_t ci = 0; ci < c; ++ci) {
                                  double s = 0.0;
                                  for (int64_t i = 0; i < p; ++i) s += g[ci * p + i];
                                  gb[ci] += s;
                              }
                          }
                      });
}

Tensor sub_channels(const Tensor& x, const Tensor& v) {
    int64_t c = x.dim(0), p = x.size() / x.dim(0);
    return channel_op("sub_channels", x, v, [](double a, double s) { return a - s; },
                      [c, p](TensorImpl* self) {
                          const auto& g = self->grad;
                          TensorImpl* px = self->parents[0].get();
                          TensorImpl* pv = self->parents[1].get();
                          if (px->requires_grad) acc_into(px, g.data(), g.size());
                          if (pv->requires_grad) {
                              auto& gb = grad_buf(pv);
                              for (int64_t ci = 0; ci < c; ++ci) {
                                  double s = 0.0;
                                  for (int64_t i = 0; i < p; ++i) s += g[ci * p + i];
                                  gb[ci] -= s;
                              }
                          }
                      });
}

Tensor mul_channels(const Tensor& x, const Tensor& v) {
    int64_t c = x.dim(0), p = x.size() / x.dim(0);
    return channel_op("mul_channels", x, v, [](double a, double s) { return a * s; },
                      [c, p](TensorImpl* self) {
                          const auto& g = self->grad;
                          TensorImpl* px = self->parents[0].get();
                          TensorImpl* pv = self->parents[1].get();
                          if (px->requires_grad) {
                              auto& gb = grad_buf(px);
                              for (int64_t ci = 0; ci < c; ++ci) {
                                  double s = pv->data[ci];
                                  for (int64_t i = 0; i < p; ++i) gb[ci * p + i] += g[ci * p + i] * s;
                              }
                          }
                          if (pv->requires_grad) {
                              auto& gb = grad_buf(pv);
                              for (int64_t ci = 0; ci < c; ++ci) {
                                  double s = 0.0;
                                  for (int64_t i = 0; i < p; ++i)
                                      s += g[ci * p + i] * px->data[ci * p + i];
                                  gb[ci] += s;
                              }
                          }
                      });
}

Tensor channel_mean(const Tensor& x) {
    if (x.rank() < 2) throw ShapeError("channel_mean: need rank >= 2, got " + shape_str(x.shape()));
    int64_t c = x.dim(0);
    int64_t p = x.size() / c;
    const auto& xv = x.vec();
    std::vector<double> out(c);
    for (int64_t ci = 0; ci < c; ++ci) {
        double s = 0.0;
        for (int64_t i = 0; i < p; ++i) s += xv[ci * p + i];
        out[ci] = s / static_cast<double>(p);
    }
    return make_node({c}, std::move(out), {x}, [c, p](TensorImpl* self) {
        TensorImpl* px = self->parents[0].get();
        if (!px->requires_grad) return;
        const auto& g = self->grad;
        auto& gb = grad_buf(px);
        double inv = 1.0 / static_cast<double>(p);
        for (int64_t ci = 0; ci < c; ++ci) {
            double gv = g[ci] * inv;
            for (int64_t i = 0; i < p; ++i) gb[ci * p + i] += gv;
        }
    });
}

// ---- linear algebra / structure ----

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(static_cast<size_t>(m * n));
    detail::dgemm(m, n, k, a.data(), k, false, b.data(), n, false, out.data(), n, false);
    return make_node({m, n}, std::move(out), {a, b}, [m, k, n](TensorImpl* self) {
        const auto& g = self->grad;
        TensorImpl* pa = self->parents[0].get();
        TensorImpl* pb = self->parents[1].get();
        if (pa->requires_grad) {
            auto& gb = grad_buf(pa);
            // dA = G * B^T
            detail::dgemm(m, k, n, g.data(), n, false, pb->data.data(), n, true, gb.data(), k, true);
        }
        if (pb->requires_grad) {
            auto& gb = grad_buf(pb);
            // dB = A^T * G
            detail::dgemm(k, n, m, pa->data.data(), k, true, g.data(), n, false, gb.data(), n, true);
        }
    });
}

Tensor transpose2d(const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("transpose2d: need rank 2, got " + shape_str(a.shape()));
    int64_t r = a.dim(0), c = a.dim(1);
    const auto& av = a.vec();
    std::vector<double> out(av.size());
    for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
    return make_node({c, r}, std::move(out), {a}, [r, c](TensorImpl* self) {
        TensorImpl* p = self->parents[0].get();
        if (!p->requires_grad) return;
        const auto& g = self->grad;
        auto& gb = grad_buf(p);
        for (int64_t i = 0; i < r; ++i)
            for (int64_t j = 0; j < c; ++j) gb[i * c + j] += g[j * r + i];
    });
}

Tensor reshape(const Tensor& a, Shape shape) {
    check_shape_positive(shape);
    if (numel(shape) != a.size())
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                         shape_str(shape));
    return make_node(std::move(shape), a.vec(), {a}, [](TensorImpl* self) {
        acc_into(self->parents[0].get(), self->grad.data(), self->grad.size());
    });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Shape& s0 = parts[0].shape();
    check_axis("concat", s0, axis);
    Shape out_shape = s0;
    int64_t total = 0;
    for (const auto& t : parts) {
        if (t.rank() != static_cast<int>(s0.size()))
            throw ShapeError("concat: rank mismatch, " + shape_str(s0) + " vs " +
                             shape_str(t.shape()));
        for (int i = 0; i < t.rank(); ++i)
            if (i != axis && t.dim(i) != s0[i])
                throw ShapeError("concat: shapes differ off-axis, " + shape_str(s0) + " vs " +
                                 shape_str(t.shape()));
        total += t.dim(axis);
    }
    out_shape[axis] = total;
    AxisSplit sp = axis_split(out_shape, axis);
    std::vector<double> out(numel(out_shape));
    std::vector<int64_t> sizes;
    int64_t off = 0;
    for (const auto& t : parts) {
        int64_t n_t = t.dim(axis);
        sizes.push_back(n_t);
        const auto& tv = t.vec();
        for (int64_t o = 0; o < sp.outer; ++o)
            std::memcpy(out.data() + (o * sp.n + off) * sp.inner,
                        tv.data() + o * n_t * sp.inner, sizeof(double) * n_t * sp.inner);
        off += n_t;
    }
    return make_node(std::move(out_shape), std::move(out), parts, [sp, sizes](TensorImpl* self) {
        const auto& g = self->grad;
        int64_t off = 0;
        for (size_t pi = 0; pi < self->parents.size(); ++pi) {
            TensorImpl* p = self->parents[pi].get();
            int64_t n_t = sizes[pi];
            if (p->requires_grad) {
                auto& gb = grad_buf(p);
                for (int64_t o = 0; o < sp.outer; ++o) {
                    const double* src = g.data() + (o * sp.n + off) * sp.inner;
                    double* dst = gb.data() + o * n_t * sp.inner;
                    for (int64_t i = 0; i < n_t * sp.inner; ++i) dst[i] += src[i];
                }
            }
            off += n_t;
        }
    });
}

std::vector<Tensor> split(const Tensor& a, int axis, const std::vector<int64_t>& sizes) {
    check_axis("split", a.shape(), axis);
    int64_t total = 0;
    for (int64_t s : sizes) total += s;
    if (total != a.dim(axis))
        throw ShapeError("split: sizes sum to " + std::to_string(total) + " but axis " +
                         std::to_string(axis) + " of " + shape_str(a.shape()) + " has " +
                         std::to_string(a.dim(axis)));
    AxisSplit sp = axis_split(a.shape(), axis);
    std::vector<Tensor> outs;
    int64_t off = 0;
    for (int64_t n_t : sizes) {
        Shape os = a.shape();
        os[axis] = n_t;
        std::vector<double> out(numel(os));
        for (int64_t o = 0; o < sp.outer; ++o)
            std::memcpy(out.data() + o * n_t * sp.inner,
                        a.vec().data() + (o * sp.n + off) * sp.inner,
                        sizeof(double) * n_t * sp.inner);
        int64_t off_copy = off;
        outs.push_back(make_node(std::move(os), std::move(out), {a},
                                 [sp, n_t, off_copy](TensorImpl* self) {
                                     TensorImpl* p = self->parents[0].get();
                                     if (!p->requires_grad) return;
                                     const auto& g = self->grad;
                                     auto& gb = grad_buf(p);
                                     for (int64_t o = 0; o < sp.outer; ++o) {
                                         const double* src = g.data() + o * n_t * sp.inner;
                                         double* dst = gb.data() + (o * sp.n + off_copy) * sp.inner;
                                         for (int64_t i = 0; i < n_t * sp.inner; ++i) dst[i] += src[i];
                                     }
                                 }));
        off += n_t;
    }
    return outs;
}

Tensor softmax(const Tensor& a, int axis) {
    check_axis("softmax", a.shape(), axis);
    AxisSplit sp = axis_split(a.shape(), axis);
    const auto& av = a.vec();
    std::vector<double> out(av.size());
    for (int64_t o = 0; o < sp.outer; ++o) {
        for (int64_t in = 0; in < sp.inner; ++in) {
            int64_t base = o * sp.n * sp.inner + in;
            double mx = av[base];
            for (int64_t i = 1; i < sp.n; ++i) mx = std::max(mx, av[base + i * sp.inner]);
            double z = 0.0;
            for (int64_t i = 0; i < sp.n; ++i) {
                double e = std::exp(av[base + i * sp.inner] - mx);
                out[base + i * sp.inner] = e;
                z += e;
            }
            for (int64_t i = 0; i < sp.n; ++i) out[base + i * sp.inner] /= z;
        }
    }
    return make_node(a.shape(), std::move(out), {a}, [sp](TensorImpl* self) {
        TensorImpl* p = self->parents[0].get();
        if (!p->requires_grad) return;
        const auto& g = self->grad;
        const auto& y = self->data;
        auto& gb = grad_buf(p);
        for (int64_t o = 0; o < sp.outer; ++o) {
            for (int64_t in = 0; in < sp.inner; ++in) {
                int64_t base = o * sp.n * sp.inner + in;
                double dot = 0.0;
                for (int64_t i = 0; i < sp.n; ++i)
                    dot += g[base + i * sp.inner] * y[base + i * sp.inner];
                for (int64_t i = 0; i < sp.n; ++i) {
                    int64_t idx = base + i * sp.inner;
                    gb[idx] += y[idx] * (g[idx] - dot);
                }
            }
        }
    });
}

// ---- reductions ----

Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.vec()) s += v;
    return make_node({1}, {s}, {a}, [](TensorImpl* self) {
        TensorImpl* p = self->parents[0].get();
        if (!p->requires_grad) return;
        double g = self->grad[0];
        auto& gb = grad_buf(p);
        for (auto& v : gb) v += g;
    });
}

Tensor mean(const Tensor& a) {
    double s = 0.0;
    for (double v : a.vec()) s += v;
    double inv = 1.0 / static_cast<double>(a.size());
    return make_node({1}, {s * inv}, {a}, [inv](TensorImpl* self) {
        TensorImpl* p = self->parents[0].get();
        if (!p->requires_grad) return;
        double g = self->grad[0] * inv;
        auto& gb = grad_buf(p);
        for (auto& v : gb) v += g;
    });
}

Tensor global_maxpool(const Tensor& a) {
    if (a.rank() < 2)
        throw ShapeError("global_maxpool: need rank >= 2, got " + shape_str(a.shape()));
    int64_t c = a.dim(0);
    int64_t p = a.size() / c;
    const auto& av = a.vec();
    std::vector<double> out(c);
    auto argmax = std::make_shared<std::vector<int64_t>>(c);
    for (int64_t ci = 0; ci < c; ++ci) {
        int64_t best = 0;
        double bv = av[ci * p];
        for (int64_t i = 1; i < p; ++i) {
            double v = av[ci * p + i];
            if (v > bv) {
                bv = v;
                best = i;
            }
        }
        out[ci] = bv;
        (*argmax)[ci] = best;
    }
    return make_node({c}, std::move(out), {a}, [c, p, argmax](TensorImpl* self) {
        TensorImpl* pa = self->parents[0].get();
        if (!pa->requires_grad) return;
        const auto& g = self->grad;
        auto& gb = grad_buf(pa);
        for (int64_t ci = 0; ci < c; ++ci) gb[ci * p + (*argmax)[ci]] += g[ci];
    });
}

// ---- spatial ----

namespace {

void im2col(const double* x, int64_t ci, int64_t h, int64_t w, int64_t kh, int64_t kw,
            int64_t stride, int64_t pad, int64_t ho, int64_t wo, double* col) {
    for (int64_t c = 0; c < ci; ++c) {
        const double* xc = x + c * h * w;
        for (int64_t ki = 0; ki < kh; ++ki) {
            for (int64_t kj = 0; kj < kw; ++kj) {
                double* dst = col + ((c * kh + ki) * kw + kj) * (ho * wo);
                for (int64_t oi = 0; oi < ho; ++oi) {
                    int64_t si = oi * stride + ki - pad;
                    double* drow = dst + oi * wo;
                    if (si < 0 || si >= h) {
                        std::fill(drow, drow + wo, 0.0);
                        continue;
                    }
                    const double* srow = xc + si * w;
                    if (stride == 1) {
                        int64_t sj0 = kj - pad;
                        int64_t lo = std::max<int64_t>(0, -sj0);
                        int64_t hi = std::min<int64_t>(wo, w - sj0);
                        for (int64_t oj = 0; oj < lo; ++oj) drow[oj] = 0.0;
                        if (hi > lo)
                            std::memcpy(drow + lo, srow + sj0 + lo, sizeof(double) * (hi - lo));
                        for (int64_t oj = std::max(lo, hi); oj < wo; ++oj) drow[oj] = 0.0;
                    } else {
                        for (int64_t oj = 0; oj < wo; ++oj) {
                            int64_t sj = oj * stride + kj - pad;
                            drow[oj] = (sj >= 0 && sj < w) ? srow[sj] : 0.0;
                        }
                    }
                }
            }
        }
    }
}

void col2im(const double* col, int64_t ci, int64_t h, int64_t w, int64_t kh, int64_t kw,
            int64_t stride, int64_t pad, int64_t ho, int64_t wo, double* dx) {
    for (int64_t c = 0; c < ci; ++c) {
        double* xc = dx + c * h * w;
        for (int64_t ki = 0; ki < kh; ++ki) {
            for (int64_t kj = 0; kj < kw; ++kj) {
                const double* src = col + ((c * kh + ki) * kw + kj) * (ho * wo);
                for (int64_t oi = 0; oi < ho; ++oi) {
                    int64_t si = oi * stride + ki - pad;
                    if (si < 0 || si >= h) continue;
                    const double* srow = src + oi * wo;
                    double* xrow = xc + si * w;
                    for (int64_t oj = 0; oj < wo; ++oj) {
                        int64_t sj = oj * stride + kj - pad;
                        if (sj >= 0 && sj < w) xrow[sj] += srow[oj];
                    }
                }
            }
        }
    }
}

} // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
    if (x.rank() != 3 || w.rank() != 4 || w.dim(1) != x.dim(0))
        throw ShapeError("conv2d: input " + shape_str(x.shape()) + " incompatible with kernel " +
                         shape_str(w.shape()));
    if (b.defined() && (b.rank() != 1 || b.dim(0) != w.dim(0)))
        throw ShapeError("conv2d: bias " + shape_str(b.shape()) + " incompatible with kernel " +
                         shape_str(w.shape()));
    int64_t ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
    int64_t co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    int64_t ho = (h + 2 * pad - kh) / stride + 1;
    int64_t wo = (wd + 2 * pad - kw) / stride + 1;
    if (ho <= 0 || wo <= 0)
        throw ShapeError("conv2d: kernel " + shape_str(w.shape()) + " larger than padded input " +
                         shape_str(x.shape()));
    int64_t ckk = ci * kh * kw;
    int64_t npos = ho * wo;
    bool pointwise = (kh == 1 && kw == 1 && stride == 1 && pad == 0);

    std::shared_ptr<std::vector<double>> col;
    const double* col_ptr = nullptr;
    if (pointwise) {
        col_ptr = x.data();
    } else {
        col = std::make_shared<std::vector<double>>(static_cast<size_t>(ckk * npos));
        im2col(x.data(), ci, h, wd, kh, kw, stride, pad, ho, wo, col->data());
        col_ptr = col->data();
    }

    std::vector<double> out(static_cast<size_t>(co * npos));
    detail::dgemm(co, npos, ckk, w.data(), ckk, false, col_ptr, npos, false, out.data(), npos,
                  false);
    if (b.defined()) {
        const auto& bv = b.vec();
        for (int64_t c = 0; c < co; ++c) {
            double bc = bv[c];
            for (int64_t i = 0; i < npos; ++i) out[c * npos + i] += bc;
        }
    }
    std::vector<Tensor> parents = b.defined() ? std::vector<Tensor>{x, w, b}
                                              : std::vector<Tensor>{x, w};
    struct ConvDims {
        int64_t ci, h, w, co, kh, kw, ho, wo, ckk, npos;
        int stride, pad;
        bool pointwise, has_bias;
    };
    ConvDims d{ci, h, wd, co, kh, kw, ho, wo, ckk, npos, stride, pad, pointwise, b.defined()};
    return make_node({co, ho, wo}, std::move(out), parents, [d, col](TensorImpl* self) {
        const auto& g = self->grad;
        TensorImpl* px = self->parents[0].get();
        TensorImpl* pw = self->parents[1].get();
        if (pw->requires_grad) {
            const double* col_ptr = d.pointwise ? px->data.data() : col->data();
            auto& gb = grad_buf(pw);
            // dW = G * col^T
            detail::dgemm(d.co, d.ckk, d.npos, g.data(), d.npos, false, col_ptr, d.npos, true,
                          gb.data(), d.ckk, true);
        }
        if (d.has_bias) {
            TensorImpl* pb = self->parents[2].get();
            if (pb->requires_grad) {
                auto& gb = grad_buf(pb);
                for (int64_t c = 0; c < d.co; ++c) {
                    double s = 0.0;
                    for (int64_t i = 0; i < d.npos; ++i) s += g[c * d.npos + i];
                    gb[c] += s;
                }
            }
        }
        if (px->requires_grad) {
            auto& gb = grad_buf(px);
            if (d.pointwise) {
                // dX = W^T * G
                detail::dgemm(d.ckk, d.npos, d.co, pw->data.data(), d.ckk, true, g.data(), d.npos,
                              false, gb.data(), d.npos, true);
            } else {
                std::vector<double> dcol(static_cast<size_t>(d.ckk * d.npos));
                detail::dgemm(d.ckk, d.npos, d.co, pw->data.data(), d.ckk, true, g.data(), d.npos,
                              false, dcol.data(), d.npos, false);
                col2im(dcol.data(), d.ci, d.h, d.w, d.kh, d.kw, d.stride, d.pad, d.ho, d.wo,
                       gb.data());
            }
        }
    });
}

Tensor upsample_nearest2x(const Tensor& x) {
    if (x.rank() != 3)
        throw ShapeError("upsample_nearest2x: need [C,H,W], got " + shape_str(x.shape()));
    int64_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const auto& xv = x.vec();
    std::vector<double> out(static_cast<size_t>(c * 4 * h * w));
    for (int64_t ci = 0; ci < c; ++ci)
        for (int64_t i = 0; i < h; ++i)
            for (int64_t j = 0; j < w; ++j) {
                double v = xv[(ci * h + i) * w + j];
                int64_t base = ((ci * 2 * h) + 2 * i) * 2 * w + 2 * j;
                out[base] = v;
                out[base + 1] = v;
                out[base + 2 * w] = v;
                out[base + 2 * w + 1] = v;
            }
    return make_node({c, 2 * h, 2 * w}, std::move(out), {x}, [c, h, w](TensorImpl* self) {
        TensorImpl* p = self->parents[0].get();
        if (!p->requires_grad) return;
        const auto& g = self->grad;
        auto& gb = grad_buf(p);
        for (int64_t ci = 0; ci < c; ++ci)
            for (int64_t i = 0; i < h; ++i)
                for (int64_t j = 0; j < w; ++j) {
                    int64_t base = ((ci * 2 * h) + 2 * i) * 2 * w + 2 * j;
                    gb[(ci * h + i) * w + j] +=
                        g[base] + g[base + 1] + g[base + 2 * w] + g[base + 2 * w + 1];
                }
    });
}

Tensor avgpool_same(const Tensor& x, int k) {
    if (x.requires_grad()) throw ValueError("avgpool_same: not differentiable");
    if (x.rank() < 2) throw ShapeError("avgpool_same: need rank >= 2, got " + shape_str(x.shape()));
    if (k <= 0) throw ValueError("avgpool_same: kernel must be positive");
    int64_t h = x.dim(x.rank() - 2), w = x.dim(x.rank() - 1);
    int64_t c = x.size() / (h * w);
    int64_t pad_lo = (k - 1) / 2;
    const auto& xv = x.vec();
    std::vector<double> out(xv.size());
    double inv = 1.0 / (static_cast<double>(k) * k);
    for (int64_t ci = 0; ci < c; ++ci) {
        const double* xc = xv.data() + ci * h * w;
        double* oc = out.data() + ci * h * w;
        for (int64_t i = 0; i < h; ++i) {
            int64_t r0 = std::max<int64_t>(0, i - pad_lo);
            int64_t r1 = std::min<int64_t>(h, i - pad_lo + k);
            for (int64_t j = 0; j < w; ++j) {
                int64_t c0 = std::max<int64_t>(0, j - pad_lo);
                int64_t c1 = std::min<int64_t>(w, j - pad_lo + k);
                double s = 0.0;
                for (int64_t r = r0; r < r1; ++r)
                    for (int64_t cc = c0; cc < c1; ++cc) s += xc[r * w + cc];
                oc[i * w + j] = s * inv;
            }
        }
    }
    return Tensor::from_data(x.shape(), std::move(out));
}

// ---- normalization ----

Tensor batchnorm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                       std::vector<double>* mean_out, std::vector<double>* var_out) {
    if (x.rank() < 2)
        throw ShapeError("batchnorm_train: need rank >= 2, got " + shape_str(x.shape()));
    int64_t c = x.dim(0);
    if (gamma.size() != c || beta.size() != c)
        throw ShapeError("batchnorm_train: scale/shift do not match " +
                         std::to_string(c) + " channels");
    int64_t p = x.size() / c;
    const double* xv = x.data();
    std::vector<double> mu(c), inv(c);
    if (var_out) var_out->resize(c);
    auto xn = std::make_shared<std::vector<double>>(x.size());
    std::vector<double> out(x.size());
    for (int64_t ci = 0; ci < c; ++ci) {
        const double* row = xv + ci * p;
        double m = 0.0;
        for (int64_t i = 0; i < p; ++i) m += row[i];
        m /= static_cast<double>(p);
        double var = 0.0;
        for (int64_t i = 0; i < p; ++i) {
            double d = row[i] - m;
            var += d * d;
        }
        var /= static_cast<double>(p);
        mu[ci] = m;
        inv[ci] = 1.0 / std::sqrt(var + eps);
        if (var_out) (*var_out)[ci] = var;
        double g = gamma.vec()[ci], b = beta.vec()[ci];
        double* xnrow = xn->data() + ci * p;
        double* orow = out.data() + ci * p;
        for (int64_t i = 0; i < p; ++i) {
            xnrow[i] = (row[i] - m) * inv[ci];
            orow[i] = g * xnrow[i] + b;
        }
    }
    if (mean_out) *mean_out = mu;
    auto inv_sp = std::make_shared<std::vector<double>>(std::move(inv));
    return make_node(x.shape(), std::move(out), {x, gamma, beta},
                     [c, p, xn, inv_sp](TensorImpl* self) {
                         const auto& g = self->grad;
                         TensorImpl* px = self->parents[0].get();
                         TensorImpl* pg = self->parents[1].get();
                         TensorImpl* pb = self->parents[2].get();
                         for (int64_t ci = 0; ci < c; ++ci) {
                             const double* grow = g.data() + ci * p;
                             const double* xnrow = xn->data() + ci * p;
                             double s1 = 0.0, s2 = 0.0;
                             for (int64_t i = 0; i < p; ++i) {
                                 s1 += grow[i];
                                 s2 += grow[i] * xnrow[i];
                             }
                             if (pb->requires_grad) grad_buf(pb)[ci] += s1;
                             if (pg->requires_grad) grad_buf(pg)[ci] += s2;
                             if (px->requires_grad) {
                                 double scale = pg->data[ci] * (*inv_sp)[ci];
                                 double m1 = s1 / static_cast<double>(p);
                                 double m2 = s2 / static_cast<double>(p);
                                 double* dx = grad_buf(px).data() + ci * p;
                                 for (int64_t i = 0; i < p; ++i)
                                     dx[i] += scale * (grow[i] - m1 - xnrow[i] * m2);
                             }
                         }
                     });
}

// ---- losses ----

Tensor bce_with_logits(const Tensor& logits, const Tensor& targets) {
    check_same_shape("bce_with_logits", logits, targets);
    const auto& xv = logits.vec();
    const auto& tv = targets.vec();
    std::vector<double> out(xv.size());
    for (size_t i = 0; i < out.size(); ++i) {
        double x = xv[i];
        out[i] = std::max(x, 0.0) - x * tv[i] + std::log1p(std::exp(-std::abs(x)));
    }
    return make_node(logits.shape(), std::move(out), {logits, targets}, [](TensorImpl* self) {
        TensorImpl* px = self->parents[0].get();
        TensorImpl* pt = self->parents[1].get();
        if (!px->requires_grad) return;
        const auto& g = self->grad;
        auto& gb = grad_buf(px);
        for (size_t i = 0; i < g.size(); ++i)
            gb[i] += g[i] * (stable_sigmoid(px->data[i]) - pt->data[i]);
    });
}

} // namespace cmb
