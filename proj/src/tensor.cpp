#include "unlearn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace unlearn {

int64_t numel_of(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

Tensor::Tensor(Shape shape, double fill) {
    for (int d : shape) {
        if (d <= 0) throw std::runtime_error("tensor: non-positive extent in shape " + shape_str(shape));
    }
    impl = std::make_shared<TensorImpl>();
    impl->data.assign(static_cast<size_t>(numel_of(shape)), fill);
    impl->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> values) {
    if (numel_of(shape) != static_cast<int64_t>(values.size())) {
        throw std::runtime_error("tensor: data length " + std::to_string(values.size()) +
                                 " does not match shape " + shape_str(shape));
    }
    impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(values);
}

Tensor Tensor::randn(Shape shape, Rng& rng, double std, double mean) {
    Tensor t(std::move(shape));
    for (auto& v : t.impl->data) v = rng.normal(mean, std);
    return t;
}

double Tensor::item() const {
    if (numel() != 1) throw std::runtime_error("item: tensor has " + std::to_string(numel()) + " elements, expected 1");
    return impl->data[0];
}

Tensor& Tensor::set_requires_grad(bool rg) {
    impl->requires_grad = rg;
    return *this;
}

double* Tensor::grad() {
    impl->ensure_grad();
    return impl->grad.data();
}

void Tensor::zero_grad() {
    if (impl) std::fill(impl->grad.begin(), impl->grad.end(), 0.0);
}

Tensor Tensor::detached_copy() const {
    Tensor t;
    t.impl = std::make_shared<TensorImpl>();
    t.impl->shape = impl->shape;
    t.impl->data = impl->data;
    return t;
}

// ---- tape ----

namespace {
thread_local Tape* g_active_tape = nullptr;
int g_num_threads = 1;
}  // namespace

Tape* Tape::active() { return g_active_tape; }

void Tape::backward(const Tensor& loss) {
    if (loss.numel() != 1) throw std::runtime_error("backward: loss must be scalar, got " + shape_str(loss.shape()));
    if (consumed_) throw std::runtime_error("backward: tape already consumed; reset before reuse");
    if (!loss.requires_grad()) throw std::runtime_error("backward: loss does not require grad (not on this tape?)");
    loss.impl->ensure_grad();
    loss.impl->grad[0] += 1.0;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
    consumed_ = true;
}

void Tape::reset() {
    entries_.clear();
    consumed_ = false;
}

TapeScope::TapeScope(Tape& t) : prev(g_active_tape) { g_active_tape = &t; }
TapeScope::~TapeScope() { g_active_tape = prev; }

NoGradScope::NoGradScope() : prev(g_active_tape) { g_active_tape = nullptr; }
NoGradScope::~NoGradScope() { g_active_tape = prev; }

void backward(const Tensor& loss) {
    Tape* t = Tape::active();
    if (!t) throw std::runtime_error("backward: no active tape");
    t->backward(loss);
}

void set_num_threads(int n) { g_num_threads = n < 1 ? 1 : n; }
int num_threads() { return g_num_threads; }

// ---- helpers ----

namespace {

bool track(const Tensor& t) { return Tape::active() && t.requires_grad(); }

Tensor make_out(Shape shape, bool wants_grad) {
    Tensor t(std::move(shape));
    t.impl->requires_grad = wants_grad && Tape::active() != nullptr;
    return t;
}

// numpy-style align-right broadcast
Shape broadcast_shape(const Shape& a, const Shape& b) {
    size_t ra = a.size(), rb = b.size(), r = std::max(ra, rb);
    Shape out(r);
    for (size_t i = 0; i < r; ++i) {
        int da = i < r - ra ? 1 : a[i - (r - ra)];
        int db = i < r - rb ? 1 : b[i - (r - rb)];
        if (da != db && da != 1 && db != 1) {
            throw std::runtime_error("broadcast: incompatible shapes " + shape_str(a) + " vs " + shape_str(b));
        }
        out[i] = std::max(da, db);
    }
    return out;
}

// flat-index strides of `s` as seen from broadcast shape `out` (0 on broadcast dims)
std::vector<int64_t> bcast_strides(const Shape& s, const Shape& out) {
    size_t r = out.size(), rs = s.size();
    std::vector<int64_t> st(r, 0);
    int64_t acc = 1;
    for (size_t i = rs; i-- > 0;) {
        st[i + (r - rs)] = (s[i] == 1) ? 0 : acc;
        acc *= s[i];
    }
    for (size_t i = 0; i < r; ++i) {
        if (i < r - rs) st[i] = 0;
        else if (s[i - (r - rs)] == 1) st[i] = 0;
    }
    return st;
}

struct BinOutcome {
    Tensor out;
    std::vector<int64_t> map_a, map_b;  // empty when shapes equal
};

// Precomputes per-element source indices for the broadcast case.
BinOutcome binary_setup(const Tensor& a, const Tensor& b, bool wants_grad) {
    BinOutcome r;
    if (a.shape() == b.shape()) {
        r.out = make_out(a.shape(), wants_grad);
        return r;
    }
    Shape os = broadcast_shape(a.shape(), b.shape());
    r.out = make_out(os, wants_grad);
    auto sa = bcast_strides(a.shape(), os);
    auto sb = bcast_strides(b.shape(), os);
    int64_t n = r.out.numel();
    r.map_a.resize(static_cast<size_t>(n));
    r.map_b.resize(static_cast<size_t>(n));
    size_t rk = os.size();
    std::vector<int64_t> idx(rk, 0);
    for (int64_t f = 0; f < n; ++f) {
        int64_t ia = 0, ib = 0;
        for (size_t d = 0; d < rk; ++d) {
            ia += idx[d] * sa[d];
            ib += idx[d] * sb[d];
        }
        r.map_a[static_cast<size_t>(f)] = ia;
        r.map_b[static_cast<size_t>(f)] = ib;
        for (size_t d = rk; d-- > 0;) {
            if (++idx[d] < os[d]) break;
            idx[d] = 0;
        }
    }
    return r;
}

}  // namespace

// ---- elementwise binary ----

template <typename FwdFn, typename BwdFn>
static Tensor binary_op(const Tensor& a, const Tensor& b, FwdFn fwd, BwdFn bwd, const char* /*name*/) {
    bool req = track(a) || track(b);
    BinOutcome s = binary_setup(a, b, a.requires_grad() || b.requires_grad());
    Tensor out = s.out;
    int64_t n = out.numel();
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    if (s.map_a.empty()) {
        for (int64_t i = 0; i < n; ++i) po[i] = fwd(pa[i], pb[i]);
    } else {
        for (int64_t i = 0; i < n; ++i) po[i] = fwd(pa[s.map_a[static_cast<size_t>(i)]], pb[s.map_b[static_cast<size_t>(i)]]);
    }
    if (req) {
        auto ia = a.impl, ib = b.impl, io = out.impl;
        auto map_a = std::move(s.map_a);
        auto map_b = std::move(s.map_b);
        Tape::active()->record([ia, ib, io, map_a, map_b, bwd]() {
            int64_t m = static_cast<int64_t>(io->data.size());
            const double* g = io->grad.data();
            if (io->grad.empty()) return;
            double* ga = nullptr;
            double* gb = nullptr;
            if (ia->requires_grad) { ia->ensure_grad(); ga = ia->grad.data(); }
            if (ib->requires_grad) { ib->ensure_grad(); gb = ib->grad.data(); }
            const double* va = ia->data.data();
            const double* vb = ib->data.data();
            for (int64_t i = 0; i < m; ++i) {
                size_t ja = map_a.empty() ? static_cast<size_t>(i) : static_cast<size_t>(map_a[static_cast<size_t>(i)]);
                size_t jb = map_b.empty() ? static_cast<size_t>(i) : static_cast<size_t>(map_b[static_cast<size_t>(i)]);
                double da, db;
                bwd(va[ja], vb[jb], g[i], da, db);
                if (ga) ga[ja] += da;
                if (gb) gb[jb] += db;
            }
        });
    }
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op(a, b, [](double x, double y) { return x + y; },
                     [](double, double, double g, double& da, double& db) { da = g; db = g; }, "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op(a, b, [](double x, double y) { return x - y; },
                     [](double, double, double g, double& da, double& db) { da = g; db = -g; }, "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op(a, b, [](double x, double y) { return x * y; },
                     [](double x, double y, double g, double& da, double& db) { da = g * y; db = g * x; }, "mul");
}

Tensor div(const Tensor& a, const Tensor& b) {
    return binary_op(a, b, [](double x, double y) { return x / y; },
                     [](double x, double y, double g, double& da, double& db) {
                         da = g / y;
                         db = -g * x / (y * y);
                     },
                     "div");
}

// ---- elementwise unary ----

template <typename FwdFn, typename BwdFn>
static Tensor unary_op(const Tensor& x, FwdFn fwd, BwdFn bwd) {
    Tensor out = make_out(x.shape(), x.requires_grad());
    int64_t n = x.numel();
    const double* px = x.data();
    double* po = out.data();
    for (int64_t i = 0; i < n; ++i) po[i] = fwd(px[i]);
    if (track(x)) {
        auto ix = x.impl, io = out.impl;
        Tape::active()->record([ix, io, bwd]() {
            if (io->grad.empty()) return;
            ix->ensure_grad();
            int64_t m = static_cast<int64_t>(io->data.size());
            const double* g = io->grad.data();
            const double* vx = ix->data.data();
            const double* vy = io->data.data();
            double* gx = ix->grad.data();
            for (int64_t i = 0; i < m; ++i) gx[i] += bwd(vx[i], vy[i], g[i]);
        });
    }
    return out;
}

Tensor affine(const Tensor& x, double a, double b) {
    return unary_op(x, [a, b](double v) { return a * v + b; },
                    [a](double, double, double g) { return a * g; });
}

Tensor scalar_mul(const Tensor& x, double s) { return affine(x, s, 0.0); }

Tensor relu(const Tensor& x) {
    return unary_op(x, [](double v) { return v > 0.0 ? v : 0.0; },
                    [](double v, double, double g) { return v > 0.0 ? g : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
    return unary_op(x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
                    [](double, double y, double g) { return g * y * (1.0 - y); });
}

Tensor softplus(const Tensor& x) {
    return unary_op(x, [](double v) { return std::log1p(std::exp(-std::fabs(v))) + std::max(v, 0.0); },
                    [](double v, double, double g) { return g / (1.0 + std::exp(-v)); });
}

Tensor log(const Tensor& x) {
    return unary_op(x, [](double v) { return std::log(v); },
                    [](double v, double, double g) { return g / v; });
}

Tensor exp(const Tensor& x) {
    return unary_op(x, [](double v) { return std::exp(v); },
                    [](double, double y, double g) { return g * y; });
}

Tensor sqrt(const Tensor& x) {
    return unary_op(x, [](double v) { return std::sqrt(v); },
                    [](double, double y, double g) { return g * 0.5 / y; });
}

Tensor abs(const Tensor& x) {
    return unary_op(x, [](double v) { return std::fabs(v); },
                    [](double v, double, double g) { return v > 0.0 ? g : (v < 0.0 ? -g : 0.0); });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
    if (lo > hi) throw std::runtime_error("clamp: lo > hi");
    return unary_op(x, [lo, hi](double v) { return v < lo ? lo : (v > hi ? hi : v); },
                    [lo, hi](double v, double, double g) { return (v > lo && v < hi) ? g : 0.0; });
}

// ---- reductions ----

Tensor sum(const Tensor& x) {
    Tensor out = make_out(Shape{1}, x.requires_grad());
    const double* px = x.data();
    double acc = 0.0;
    int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) acc += px[i];
    out.data()[0] = acc;
    if (track(x)) {
        auto ix = x.impl, io = out.impl;
        Tape::active()->record([ix, io]() {
            if (io->grad.empty()) return;
            ix->ensure_grad();
            double g = io->grad[0];
            for (auto& v : ix->grad) v += g;
        });
    }
    return out;
}

Tensor sum_axis(const Tensor& x, int axis) {
    int r = x.rank();
    if (axis < 0 || axis >= r) throw std::runtime_error("sum_axis: axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape()));
    Shape os;
    for (int i = 0; i < r; ++i)
        if (i != axis) os.push_back(x.dim(i));
    if (os.empty()) os.push_back(1);
    int64_t outer = 1, axis_n = x.dim(axis), inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.dim(i);
    for (int i = axis + 1; i < r; ++i) inner *= x.dim(i);
    Tensor out = make_out(os, x.requires_grad());
    const double* px = x.data();
    double* po = out.data();
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
            double acc = 0.0;
            for (int64_t a = 0; a < axis_n; ++a) acc += px[(o * axis_n + a) * inner + in];
            po[o * inner + in] = acc;
        }
    }
    if (track(x)) {
        auto ix = x.impl, io = out.impl;
        Tape::active()->record([ix, io, outer, axis_n, inner]() {
            if (io->grad.empty()) return;
            ix->ensure_grad();
            const double* g = io->grad.data();
            double* gx = ix->grad.data();
            for (int64_t o = 0; o < outer; ++o)
                for (int64_t a = 0; a < axis_n; ++a)
                    for (int64_t in = 0; in < inner; ++in)
                        gx[(o * axis_n + a) * inner + in] += g[o * inner + in];
        });
    }
    return out;
}

Tensor mean(const Tensor& x) {
    return scalar_mul(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor softmax(const Tensor& x, int axis) {
    int r = x.rank();
    if (axis < 0 || axis >= r) throw std::runtime_error("softmax: axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape()));
    int64_t outer = 1, axis_n = x.dim(axis), inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.dim(i);
    for (int i = axis + 1; i < r; ++i) inner *= x.dim(i);
    Tensor out = make_out(x.shape(), x.requires_grad());
    const double* px = x.data();
    double* po = out.data();
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
            double mx = -1e300;
            for (int64_t a = 0; a < axis_n; ++a) mx = std::max(mx, px[(o * axis_n + a) * inner + in]);
            double z = 0.0;
            for (int64_t a = 0; a < axis_n; ++a) {
                double e = std::exp(px[(o * axis_n + a) * inner + in] - mx);
                po[(o * axis_n + a) * inner + in] = e;
                z += e;
            }
            for (int64_t a = 0; a < axis_n; ++a) po[(o * axis_n + a) * inner + in] /= z;
        }
    }
    if (track(x)) {
        auto ix = x.impl, io = out.impl;
        Tape::active()->record([ix, io, outer, axis_n, inner]() {
            if (io->grad.empty()) return;
            ix->ensure_grad();
            const double* g = io->grad.data();
            const double* y = io->data.data();
            double* gx = ix->grad.data();
            for (int64_t o = 0; o < outer; ++o) {
                for (int64_t in = 0; in < inner; ++in) {
                    double dot = 0.0;
                    for (int64_t a = 0; a < axis_n; ++a) {
                        int64_t i = (o * axis_n + a) * inner + in;
                        dot += g[i] * y[i];
                    }
                    for (int64_t a = 0; a < axis_n; ++a) {
                        int64_t i = (o * axis_n + a) * inner + in;
                        gx[i] += y[i] * (g[i] - dot);
                    }
                }
            }
        });
    }
    return out;
}

// ---- shape ops ----

Tensor reshape(const Tensor& x, Shape ns) {
    if (numel_of(ns) != x.numel()) {
        throw std::runtime_error("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(ns));
    }
    Tensor out = make_out(ns, x.requires_grad());
    out.impl->data = x.impl->data;
    if (track(x)) {
        auto ix = x.impl, io = out.impl;
        Tape::active()->record([ix, io]() {
            if (io->grad.empty()) return;
            ix->ensure_grad();
            for (size_t i = 0; i < io->grad.size(); ++i) ix->grad[i] += io->grad[i];
        });
    }
    return out;
}

Tensor concat(const std::vector<Tensor>& xs, int axis) {
    if (xs.empty()) throw std::runtime_error("concat: no inputs");
    int r = xs[0].rank();
    if (axis < 0 || axis >= r) throw std::runtime_error("concat: axis out of range");
    Shape os = xs[0].shape();
    int total = 0;
    for (const auto& t : xs) {
        if (t.rank() != r) throw std::runtime_error("concat: rank mismatch");
        for (int i = 0; i < r; ++i) {
            if (i != axis && t.dim(i) != os[static_cast<size_t>(i)])
                throw std::runtime_error("concat: shape mismatch " + shape_str(t.shape()) + " vs " + shape_str(os));
        }
        total += t.dim(axis);
    }
    os[static_cast<size_t>(axis)] = total;
    bool req = false;
    for (const auto& t : xs) req = req || t.requires_grad();
    Tensor out = make_out(os, req);

    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= os[static_cast<size_t>(i)];
    for (int i = axis + 1; i < r; ++i) inner *= os[static_cast<size_t>(i)];
    double* po = out.data();
    int64_t off = 0;
    std::vector<int64_t> offsets;
    for (const auto& t : xs) {
        offsets.push_back(off);
        int64_t an = t.dim(axis);
        const double* pt = t.data();
        for (int64_t o = 0; o < outer; ++o) {
            std::copy(pt + o * an * inner, pt + (o + 1) * an * inner,
                      po + (o * total + off) * inner);
        }
        off += an;
    }
    if (req && Tape::active()) {
        std::vector<std::shared_ptr<TensorImpl>> impls;
        for (const auto& t : xs) impls.push_back(t.impl);
        auto io = out.impl;
        int64_t total64 = total;
        Tape::active()->record([impls, io, offsets, outer, inner, total64, axis]() {
            if (io->grad.empty()) return;
            const double* g = io->grad.data();
            for (size_t k = 0; k < impls.size(); ++k) {
                auto& im = impls[k];
                if (!im->requires_grad) continue;
                im->ensure_grad();
                int64_t an = im->shape[static_cast<size_t>(axis)];
                for (int64_t o = 0; o < outer; ++o) {
                    const double* src = g + (o * total64 + offsets[k]) * inner;
                    double* dst = im->grad.data() + o * an * inner;
                    for (int64_t i = 0; i < an * inner; ++i) dst[i] += src[i];
                }
            }
        });
    }
    return out;
}

Tensor slice(const Tensor& x, int axis, int start, int len) {
    int r = x.rank();
    if (axis < 0 || axis >= r) throw std::runtime_error("slice: axis out of range");
    if (start < 0 || len <= 0 || start + len > x.dim(axis))
        throw std::runtime_error("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                                 ") out of bounds for axis extent " + std::to_string(x.dim(axis)));
    Shape os = x.shape();
    os[static_cast<size_t>(axis)] = len;
    Tensor out = make_out(os, x.requires_grad());
    int64_t outer = 1, inner = 1, an = x.dim(axis);
    for (int i = 0; i < axis; ++i) outer *= x.dim(i);
    for (int i = axis + 1; i < r; ++i) inner *= x.dim(i);
    const double* px = x.data();
    double* po = out.data();
    for (int64_t o = 0; o < outer; ++o) {
        std::copy(px + (o * an + start) * inner, px + (o * an + start + len) * inner,
                  po + o * len * inner);
    }
    if (track(x)) {
        auto ix = x.impl, io = out.impl;
        int64_t len64 = len, start64 = start;
        Tape::active()->record([ix, io, outer, inner, an, len64, start64]() {
            if (io->grad.empty()) return;
            ix->ensure_grad();
            const double* g = io->grad.data();
            double* gx = ix->grad.data();
            for (int64_t o = 0; o < outer; ++o) {
                double* dst = gx + (o * an + start64) * inner;
                const double* src = g + o * len64 * inner;
                for (int64_t i = 0; i < len64 * inner; ++i) dst[i] += src[i];
            }
        });
    }
    return out;
}

Tensor dropout(const Tensor& x, double p, Rng& rng, bool training) {
    if (p < 0.0 || p >= 1.0) throw std::runtime_error("dropout: p must be in [0,1)");
    if (!training || p == 0.0) return x;
    Tensor mask(x.shape());
    double keep = 1.0 - p;
    double* pm = mask.data();
    int64_t n = mask.numel();
    for (int64_t i = 0; i < n; ++i) pm[i] = rng.uniform() < p ? 0.0 : 1.0 / keep;
    return mul(x, mask);
}

}  // namespace unlearn
