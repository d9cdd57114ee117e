#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "unlearn/rng.hpp"

namespace unlearn {

using Shape = std::vector<int>;

int64_t numel_of(const Shape& s);
std::string shape_str(const Shape& s);

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
    }
};

// Dense float64 tensor. Value semantics over a shared buffer; ops never
// mutate tape-tracked tensors in place.
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> values);

    static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }
    static Tensor randn(Shape shape, Rng& rng, double std = 1.0, double mean = 0.0);

    bool defined() const { return impl != nullptr; }
    const Shape& shape() const { return impl->shape; }
    int rank() const { return static_cast<int>(impl->shape.size()); }
    int dim(int i) const { return impl->shape[static_cast<size_t>(i)]; }
    int64_t numel() const { return static_cast<int64_t>(impl->data.size()); }

    double* data() { return impl->data.data(); }
    const double* data() const { return impl->data.data(); }
    std::vector<double>& vec() { return impl->data; }
    const std::vector<double>& vec() const { return impl->data; }

    double item() const;

    bool requires_grad() const { return impl && impl->requires_grad; }
    Tensor& set_requires_grad(bool rg);

    // allocates the grad buffer on demand
    double* grad();
    const std::vector<double>& grad_vec() const { return impl->grad; }
    bool has_grad() const { return impl && !impl->grad.empty(); }
    void zero_grad();

    Tensor detached_copy() const;  // same values, no grad participation

    std::shared_ptr<TensorImpl> impl;
};

// Wengert list: ops append backward closures in execution order, backward
// replays them reversed. Gradients accumulate additively on the tensors.
class Tape {
  public:
    void record(std::function<void()> fn) { entries_.push_back(std::move(fn)); }
    void backward(const Tensor& loss);
    void reset();
    bool consumed() const { return consumed_; }
    size_t size() const { return entries_.size(); }

    static Tape* active();

  private:
    std::vector<std::function<void()>> entries_;
    bool consumed_ = false;
    friend struct TapeScope;
    friend struct NoGradScope;
};

struct TapeScope {
    explicit TapeScope(Tape& t);
    ~TapeScope();
    Tape* prev;
};

struct NoGradScope {
    NoGradScope();
    ~NoGradScope();
    Tape* prev;
};

void set_num_threads(int n);
int num_threads();

// ---- elementwise / scalar ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor affine(const Tensor& x, double a, double b);  // a*x + b
Tensor scalar_mul(const Tensor& x, double s);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor log(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor clamp(const Tensor& x, double lo, double hi);

// ---- reductions / shape ----
Tensor sum(const Tensor& x);             // -> [1]
Tensor sum_axis(const Tensor& x, int axis);
Tensor mean(const Tensor& x);            // -> [1]
Tensor softmax(const Tensor& x, int axis);
Tensor reshape(const Tensor& x, Shape ns);
Tensor concat(const std::vector<Tensor>& xs, int axis);
Tensor slice(const Tensor& x, int axis, int start, int len);

// ---- linear algebra / conv ----
Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);
// bias may be undefined for a bias-free convolution
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int padding);
Tensor max_pool2d(const Tensor& x);          // kernel 2, stride 2
Tensor nearest_upsample2d(const Tensor& x);  // factor 2

// mask-multiply dropout on the input of a branch; identity when !training or p == 0
Tensor dropout(const Tensor& x, double p, Rng& rng, bool training);

void backward(const Tensor& loss);  // requires an active tape

}  // namespace unlearn
