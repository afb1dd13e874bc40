#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "minisam/common.hpp"

namespace minisam {

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);
int64_t shape_numel(const Shape& s);

namespace detail {
struct TensorImpl {
    Shape shape;
    std::vector<float> data;
    std::vector<float> grad;  // empty until first accumulation
    bool requires_grad = false;
};
}  // namespace detail

// Dense float32 array, row-major. Value-semantics handle over a shared buffer;
// copies alias the same storage (like the usual framework tensors).
class Tensor {
public:
    Tensor() : impl_(std::make_shared<detail::TensorImpl>()) {}

    static Tensor zeros(const Shape& shape, bool requires_grad = false);
    static Tensor full(const Shape& shape, float value, bool requires_grad = false);
    static Tensor from(const Shape& shape, std::vector<float> data, bool requires_grad = false);
    static Tensor scalar(float value, bool requires_grad = false);

    const Shape& shape() const { return impl_->shape; }
    int dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
    int rank() const { return static_cast<int>(impl_->shape.size()); }
    int64_t size() const { return static_cast<int64_t>(impl_->data.size()); }

    float* data() { return impl_->data.data(); }
    const float* data() const { return impl_->data.data(); }
    std::vector<float>& vec() { return impl_->data; }
    const std::vector<float>& vec() const { return impl_->data; }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool v) { impl_->requires_grad = v; }

    // Gradient buffer, allocated zero-filled on first use. Constness of the
    // handle is shallow (copies alias the same storage), so this is const.
    float* grad() const;
    bool has_grad() const { return !impl_->grad.empty(); }
    const std::vector<float>& grad_vec() const { return impl_->grad; }
    void zero_grad();

    float item() const;

    // Deep copy of data (fresh buffer, no grad).
    Tensor clone() const;

    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

private:
    std::shared_ptr<detail::TensorImpl> impl_;
};

// Reverse-mode tape. Constructing a Tape makes it the active recorder for the
// current thread; destruction restores the previous one. Ops record a backward
// rule whenever a tape is active and the result requires gradients.
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Seeds loss.grad = 1 and replays recorded rules in reverse order.
    // Loss must be scalar (shape {1}).
    void backward(const Tensor& loss);

    size_t num_ops() const { return ops_.size(); }

    static Tape* current();

private:
    friend void record_op(std::vector<Tensor> inputs, const Tensor& output,
                          std::function<void()> backward_fn);
    struct Op {
        std::function<void()> backward_fn;
    };
    std::vector<Op> ops_;
    Tape* prev_ = nullptr;
};

// Registers a backward rule for an op whose output depends on `inputs`.
// No-op when no tape is active or nothing requires gradients.
void record_op(std::vector<Tensor> inputs, const Tensor& output,
               std::function<void()> backward_fn);

bool any_requires_grad(const std::vector<Tensor>& ts);

// ---- elementwise / structural ops ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);
// x: [n, d], bias: [d] or [1, d]; adds bias to every row
Tensor add_rowwise(const Tensor& x, const Tensor& bias);
Tensor reshape(const Tensor& x, const Shape& shape);
Tensor slice_cols(const Tensor& x, int start, int count);
Tensor slice_rows(const Tensor& x, int start, int count);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
// x: [n, d] -> [1, d]
Tensor mean_rows(const Tensor& x);

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose2d(const Tensor& x);

// ---- nonlinearities / normalization ----
Tensor softmax(const Tensor& x, int axis);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = 1e-5f);
Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

// ---- convolutions ----
// x: [c_in, h, w]; w: [c_out, c_in/groups, kh, kw]; bias: [c_out] or empty
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad,
              int groups);
// x: [c_in, h, w]; w: [c_in, c_out, k, k]; output extent (in-1)*stride + k
Tensor transpose_conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride);
Tensor bilinear_resize(const Tensor& x, int out_h, int out_w);

// Central-difference gradient oracle: (f(x+h e_i) - f(x-h e_i)) / 2h per
// coordinate. Perturbs x's buffer in place (restored afterwards), so f may
// either use the passed tensor or a captured graph that shares x's storage.
Tensor finite_difference_grad(const std::function<float(const Tensor&)>& f, Tensor x,
                              float h = 1e-3f);

// max |a-b| / max(1, |b|) elementwise reduce, for gradient comparisons
float max_rel_err(const Tensor& a, const Tensor& b);

}  // namespace minisam
