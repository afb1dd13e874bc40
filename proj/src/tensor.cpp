#include "minisam/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

namespace minisam {

using EMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int e : s) n *= e;
    return n;
}

// ---------------------------------------------------------------- Tensor

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
    Tensor t;
    t.impl_->shape = shape;
    t.impl_->data.assign(static_cast<size_t>(shape_numel(shape)), 0.0f);
    t.impl_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::full(const Shape& shape, float value, bool requires_grad) {
    Tensor t = zeros(shape, requires_grad);
    std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
    return t;
}

Tensor Tensor::from(const Shape& shape, std::vector<float> data, bool requires_grad) {
    if (static_cast<int64_t>(data.size()) != shape_numel(shape)) {
        throw ShapeError("Tensor::from: data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
    }
    Tensor t;
    t.impl_->shape = shape;
    t.impl_->data = std::move(data);
    t.impl_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::scalar(float value, bool requires_grad) {
    return from({1}, {value}, requires_grad);
}

float* Tensor::grad() const {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0f);
    return impl_->grad.data();
}

void Tensor::zero_grad() {
    std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0f);
}

float Tensor::item() const {
    if (size() != 1) throw UsageError("item(): tensor has shape " + shape_str(shape()));
    return impl_->data[0];
}

Tensor Tensor::clone() const {
    Tensor t;
    t.impl_->shape = impl_->shape;
    t.impl_->data = impl_->data;
    t.impl_->requires_grad = impl_->requires_grad;
    return t;
}

// ---------------------------------------------------------------- Tape

namespace {
thread_local Tape* g_current_tape = nullptr;
}

Tape::Tape() {
    prev_ = g_current_tape;
    g_current_tape = this;
}

Tape::~Tape() { g_current_tape = prev_; }

Tape* Tape::current() { return g_current_tape; }

void Tape::backward(const Tensor& loss) {
    if (loss.size() != 1) {
        throw UsageError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    }
    Tensor l = loss;
    l.grad()[0] += 1.0f;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) it->backward_fn();
}

bool any_requires_grad(const std::vector<Tensor>& ts) {
    for (const auto& t : ts) {
        if (t.requires_grad()) return true;
    }
    return false;
}

void record_op(std::vector<Tensor> inputs, const Tensor& output,
               std::function<void()> backward_fn) {
    Tape* tape = Tape::current();
    if (tape == nullptr) return;
    if (!any_requires_grad(inputs)) return;
    Tensor out = output;
    out.set_requires_grad(true);
    tape->ops_.push_back({std::move(backward_fn)});
}

namespace {

void mark_dependent(const std::vector<Tensor>& inputs, Tensor& out) {
    if (any_requires_grad(inputs)) out.set_requires_grad(true);
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

}  // namespace

// ---------------------------------------------------------------- elementwise

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    Tensor y = Tensor::zeros(a.shape());
    const int64_t n = a.size();
    for (int64_t i = 0; i < n; ++i) y.data()[i] = a.data()[i] + b.data()[i];
    mark_dependent({a, b}, y);
    record_op({a, b}, y, [a, b, y]() mutable {
        const float* gy = y.grad();
        const int64_t n = y.size();
        if (a.requires_grad()) {
            float* ga = a.grad();
            for (int64_t i = 0; i < n; ++i) ga[i] += gy[i];
        }
        if (b.requires_grad()) {
            float* gb = b.grad();
            for (int64_t i = 0; i < n; ++i) gb[i] += gy[i];
        }
    });
    return y;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    Tensor y = Tensor::zeros(a.shape());
    const int64_t n = a.size();
    for (int64_t i = 0; i < n; ++i) y.data()[i] = a.data()[i] - b.data()[i];
    mark_dependent({a, b}, y);
    record_op({a, b}, y, [a, b, y]() mutable {
        const float* gy = y.grad();
        const int64_t n = y.size();
        if (a.requires_grad()) {
            float* ga = a.grad();
            for (int64_t i = 0; i < n; ++i) ga[i] += gy[i];
        }
        if (b.requires_grad()) {
            float* gb = b.grad();
            for (int64_t i = 0; i < n; ++i) gb[i] -= gy[i];
        }
    });
    return y;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    Tensor y = Tensor::zeros(a.shape());
    const int64_t n = a.size();
    for (int64_t i = 0; i < n; ++i) y.data()[i] = a.data()[i] * b.data()[i];
    mark_dependent({a, b}, y);
    record_op({a, b}, y, [a, b, y]() mutable {
        const float* gy = y.grad();
        const int64_t n = y.size();
        if (a.requires_grad()) {
            float* ga = a.grad();
            for (int64_t i = 0; i < n; ++i) ga[i] += gy[i] * b.data()[i];
        }
        if (b.requires_grad()) {
            float* gb = b.grad();
            for (int64_t i = 0; i < n; ++i) gb[i] += gy[i] * a.data()[i];
        }
    });
    return y;
}

Tensor scale(const Tensor& a, float s) {
    Tensor y = Tensor::zeros(a.shape());
    const int64_t n = a.size();
    for (int64_t i = 0; i < n; ++i) y.data()[i] = a.data()[i] * s;
    mark_dependent({a}, y);
    record_op({a}, y, [a, y, s]() mutable {
        const float* gy = y.grad();
        float* ga = a.grad();
        const int64_t n = y.size();
        for (int64_t i = 0; i < n; ++i) ga[i] += gy[i] * s;
    });
    return y;
}

Tensor add_rowwise(const Tensor& x, const Tensor& bias) {
    if (x.rank() != 2) throw ShapeError("add_rowwise: x must be 2-d, got " + shape_str(x.shape()));
    const int n = x.dim(0), d = x.dim(1);
    if (bias.size() != d) {
        throw ShapeError("add_rowwise: bias shape " + shape_str(bias.shape()) +
                         " incompatible with x " + shape_str(x.shape()));
    }
    Tensor y = Tensor::zeros(x.shape());
    for (int i = 0; i < n; ++i) {
        const float* xi = x.data() + static_cast<int64_t>(i) * d;
        float* yi = y.data() + static_cast<int64_t>(i) * d;
        for (int j = 0; j < d; ++j) yi[j] = xi[j] + bias.data()[j];
    }
    mark_dependent({x, bias}, y);
    record_op({x, bias}, y, [x, bias, y, n, d]() mutable {
        const float* gy = y.grad();
        if (x.requires_grad()) {
            float* gx = x.grad();
            for (int64_t i = 0; i < static_cast<int64_t>(n) * d; ++i) gx[i] += gy[i];
        }
        if (bias.requires_grad()) {
            float* gb = bias.grad();
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < d; ++j) gb[j] += gy[static_cast<int64_t>(i) * d + j];
        }
    });
    return y;
}

Tensor reshape(const Tensor& x, const Shape& shape) {
    if (shape_numel(shape) != x.size()) {
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
    }
    Tensor y = Tensor::from(shape, x.vec());
    mark_dependent({x}, y);
    record_op({x}, y, [x, y]() mutable {
        const float* gy = y.grad();
        float* gx = x.grad();
        const int64_t n = x.size();
        for (int64_t i = 0; i < n; ++i) gx[i] += gy[i];
    });
    return y;
}

Tensor slice_cols(const Tensor& x, int start, int count) {
    if (x.rank() != 2) throw ShapeError("slice_cols: x must be 2-d");
    const int n = x.dim(0), d = x.dim(1);
    if (start < 0 || count <= 0 || start + count > d) {
        throw ShapeError("slice_cols: range [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") out of width " + std::to_string(d));
    }
    Tensor y = Tensor::zeros({n, count});
    for (int i = 0; i < n; ++i) {
        const float* xi = x.data() + static_cast<int64_t>(i) * d + start;
        std::copy(xi, xi + count, y.data() + static_cast<int64_t>(i) * count);
    }
    mark_dependent({x}, y);
    record_op({x}, y, [x, y, start, count, n, d]() mutable {
        const float* gy = y.grad();
        float* gx = x.grad();
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < count; ++j)
                gx[static_cast<int64_t>(i) * d + start + j] +=
                    gy[static_cast<int64_t>(i) * count + j];
    });
    return y;
}

Tensor slice_rows(const Tensor& x, int start, int count) {
    if (x.rank() != 2) throw ShapeError("slice_rows: x must be 2-d");
    const int n = x.dim(0), d = x.dim(1);
    if (start < 0 || count <= 0 || start + count > n) {
        throw ShapeError("slice_rows: range [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") out of height " + std::to_string(n));
    }
    Tensor y = Tensor::zeros({count, d});
    std::copy(x.data() + static_cast<int64_t>(start) * d,
              x.data() + static_cast<int64_t>(start + count) * d, y.data());
    mark_dependent({x}, y);
    record_op({x}, y, [x, y, start, d]() mutable {
        const float* gy = y.grad();
        float* gx = x.grad() + static_cast<int64_t>(start) * d;
        for (int64_t i = 0; i < y.size(); ++i) gx[i] += gy[i];
    });
    return y;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw UsageError("concat_cols: no parts");
    const int n = parts[0].dim(0);
    int d = 0;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.dim(0) != n)
            throw ShapeError("concat_cols: incompatible part " + shape_str(p.shape()));
        d += p.dim(1);
    }
    Tensor y = Tensor::zeros({n, d});
    int off = 0;
    for (const auto& p : parts) {
        const int pd = p.dim(1);
        for (int i = 0; i < n; ++i)
            std::copy(p.data() + static_cast<int64_t>(i) * pd,
                      p.data() + static_cast<int64_t>(i + 1) * pd,
                      y.data() + static_cast<int64_t>(i) * d + off);
        off += pd;
    }
    mark_dependent(parts, y);
    record_op(parts, y, [parts, y, n, d]() mutable {
        const float* gy = y.grad();
        int off = 0;
        for (auto p : parts) {
            const int pd = p.dim(1);
            if (p.requires_grad()) {
                float* gp = p.grad();
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < pd; ++j)
                        gp[static_cast<int64_t>(i) * pd + j] +=
                            gy[static_cast<int64_t>(i) * d + off + j];
            }
            off += pd;
        }
    });
    return y;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw UsageError("concat_rows: no parts");
    const int d = parts[0].dim(1);
    int n = 0;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.dim(1) != d)
            throw ShapeError("concat_rows: incompatible part " + shape_str(p.shape()));
        n += p.dim(0);
    }
    Tensor y = Tensor::zeros({n, d});
    int64_t off = 0;
    for (const auto& p : parts) {
        std::copy(p.data(), p.data() + p.size(), y.data() + off);
        off += p.size();
    }
    mark_dependent(parts, y);
    record_op(parts, y, [parts, y]() mutable {
        const float* gy = y.grad();
        int64_t off = 0;
        for (auto p : parts) {
            if (p.requires_grad()) {
                float* gp = p.grad();
                for (int64_t i = 0; i < p.size(); ++i) gp[i] += gy[off + i];
            }
            off += p.size();
        }
    });
    return y;
}

Tensor sum_all(const Tensor& x) {
    double acc = 0.0;
    for (int64_t i = 0; i < x.size(); ++i) acc += x.data()[i];
    Tensor y = Tensor::scalar(static_cast<float>(acc));
    mark_dependent({x}, y);
    record_op({x}, y, [x, y]() mutable {
        const float g = y.grad()[0];
        float* gx = x.grad();
        for (int64_t i = 0; i < x.size(); ++i) gx[i] += g;
    });
    return y;
}

Tensor mean_all(const Tensor& x) {
    const float inv = 1.0f / static_cast<float>(x.size());
    double acc = 0.0;
    for (int64_t i = 0; i < x.size(); ++i) acc += x.data()[i];
    Tensor y = Tensor::scalar(static_cast<float>(acc) * inv);
    mark_dependent({x}, y);
    record_op({x}, y, [x, y, inv]() mutable {
        const float g = y.grad()[0] * inv;
        float* gx = x.grad();
        for (int64_t i = 0; i < x.size(); ++i) gx[i] += g;
    });
    return y;
}

Tensor mean_rows(const Tensor& x) {
    if (x.rank() != 2) throw ShapeError("mean_rows: x must be 2-d");
    const int n = x.dim(0), d = x.dim(1);
    Tensor y = Tensor::zeros({1, d});
    const float inv = 1.0f / static_cast<float>(n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) y.data()[j] += x.data()[static_cast<int64_t>(i) * d + j];
    for (int j = 0; j < d; ++j) y.data()[j] *= inv;
    mark_dependent({x}, y);
    record_op({x}, y, [x, y, n, d, inv]() mutable {
        const float* gy = y.grad();
        float* gx = x.grad();
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j) gx[static_cast<int64_t>(i) * d + j] += gy[j] * inv;
    });
    return y;
}

// ---------------------------------------------------------------- linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    }
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor y = Tensor::zeros({m, n});
    {
        ECMap A(a.data(), m, k), B(b.data(), k, n);
        EMap Y(y.data(), m, n);
        Y.noalias() = A * B;
    }
    mark_dependent({a, b}, y);
    record_op({a, b}, y, [a, b, y, m, k, n]() mutable {
        ECMap A(a.data(), m, k), B(b.data(), k, n), GY(y.grad(), m, n);
        if (a.requires_grad()) {
            EMap GA(a.grad(), m, k);
            GA.noalias() += GY * B.transpose();
        }
        if (b.requires_grad()) {
            EMap GB(b.grad(), k, n);
            GB.noalias() += A.transpose() * GY;
        }
    });
    return y;
}

Tensor transpose2d(const Tensor& x) {
    if (x.rank() != 2) throw ShapeError("transpose2d: x must be 2-d");
    const int m = x.dim(0), n = x.dim(1);
    Tensor y = Tensor::zeros({n, m});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            y.data()[static_cast<int64_t>(j) * m + i] = x.data()[static_cast<int64_t>(i) * n + j];
    mark_dependent({x}, y);
    record_op({x}, y, [x, y, m, n]() mutable {
        const float* gy = y.grad();
        float* gx = x.grad();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
                gx[static_cast<int64_t>(i) * n + j] += gy[static_cast<int64_t>(j) * m + i];
    });
    return y;
}

// ---------------------------------------------------------------- nonlinear

Tensor softmax(const Tensor& x, int axis) {
    if (axis < 0 || axis >= x.rank())
        throw ShapeError("softmax: axis " + std::to_string(axis) + " invalid for " +
                         shape_str(x.shape()));
    const int ax = x.dim(axis);
    int64_t inner = 1, outer = 1;
    for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
    for (int i = 0; i < axis; ++i) outer *= x.dim(i);
    Tensor y = Tensor::zeros(x.shape());
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
            const int64_t base = o * ax * inner + in;
            float mx = -INFINITY;
            for (int j = 0; j < ax; ++j) mx = std::max(mx, x.data()[base + j * inner]);
            double denom = 0.0;
            for (int j = 0; j < ax; ++j) {
                const float e = std::exp(x.data()[base + j * inner] - mx);
                y.data()[base + j * inner] = e;
                denom += e;
            }
            const float inv = static_cast<float>(1.0 / denom);
            for (int j = 0; j < ax; ++j) y.data()[base + j * inner] *= inv;
        }
    }
    mark_dependent({x}, y);
    record_op({x}, y, [x, y, ax, inner, outer]() mutable {
        const float* gy = y.grad();
        float* gx = x.grad();
        for (int64_t o = 0; o < outer; ++o) {
            for (int64_t in = 0; in < inner; ++in) {
                const int64_t base = o * ax * inner + in;
                double dot = 0.0;
                for (int j = 0; j < ax; ++j)
                    dot += static_cast<double>(gy[base + j * inner]) * y.data()[base + j * inner];
                for (int j = 0; j < ax; ++j) {
                    const int64_t k = base + j * inner;
                    gx[k] += y.data()[k] * (gy[k] - static_cast<float>(dot));
                }
            }
        }
    });
    return y;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
    if (x.rank() != 2) throw ShapeError("layer_norm: x must be 2-d");
    const int n = x.dim(0), d = x.dim(1);
    if (gamma.size() != d || beta.size() != d) {
        throw ShapeError("layer_norm: gamma/beta " + shape_str(gamma.shape()) + "/" +
                         shape_str(beta.shape()) + " do not match width " + std::to_string(d));
    }
    Tensor y = Tensor::zeros(x.shape());
    Tensor xhat = Tensor::zeros(x.shape());
    std::vector<float> inv_std(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        const float* xi = x.data() + static_cast<int64_t>(i) * d;
        double mu = 0.0;
        for (int j = 0; j < d; ++j) mu += xi[j];
        mu /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
            const double c = xi[j] - mu;
            var += c * c;
        }
        var /= d;
        const float is = static_cast<float>(1.0 / std::sqrt(var + eps));
        inv_std[static_cast<size_t>(i)] = is;
        float* xh = xhat.data() + static_cast<int64_t>(i) * d;
        float* yi = y.data() + static_cast<int64_t>(i) * d;
        for (int j = 0; j < d; ++j) {
            xh[j] = (xi[j] - static_cast<float>(mu)) * is;
            yi[j] = xh[j] * gamma.data()[j] + beta.data()[j];
        }
    }
    mark_dependent({x, gamma, beta}, y);
    record_op({x, gamma, beta}, y, [x, gamma, beta, y, xhat, inv_std, n, d]() mutable {
        const float* gy = y.grad();
        for (int i = 0; i < n; ++i) {
            const float* gyi = gy + static_cast<int64_t>(i) * d;
            const float* xh = xhat.data() + static_cast<int64_t>(i) * d;
            if (x.requires_grad()) {
                float* gx = x.grad() + static_cast<int64_t>(i) * d;
                double m1 = 0.0, m2 = 0.0;  // mean(dxhat), mean(dxhat * xhat)
                for (int j = 0; j < d; ++j) {
                    const double dxh = static_cast<double>(gyi[j]) * gamma.data()[j];
                    m1 += dxh;
                    m2 += dxh * xh[j];
                }
                m1 /= d;
                m2 /= d;
                const float is = inv_std[static_cast<size_t>(i)];
                for (int j = 0; j < d; ++j) {
                    const double dxh = static_cast<double>(gyi[j]) * gamma.data()[j];
                    gx[j] += static_cast<float>(is * (dxh - m1 - xh[j] * m2));
                }
            }
            if (gamma.requires_grad()) {
                float* gg = gamma.grad();
                for (int j = 0; j < d; ++j) gg[j] += gyi[j] * xh[j];
            }
            if (beta.requires_grad()) {
                float* gb = beta.grad();
                for (int j = 0; j < d; ++j) gb[j] += gyi[j];
            }
        }
    });
    return y;
}

namespace {
constexpr float kGeluC = 0.7978845608028654f;  // sqrt(2/pi)
constexpr float kGeluA = 0.044715f;
}  // namespace

Tensor gelu(const Tensor& x) {
    Tensor y = Tensor::zeros(x.shape());
    for (int64_t i = 0; i < x.size(); ++i) {
        const float v = x.data()[i];
        const float t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
        y.data()[i] = 0.5f * v * (1.0f + t);
    }
    mark_dependent({x}, y);
    record_op({x}, y, [x, y]() mutable {
        const float* gy = y.grad();
        float* gx = x.grad();
        for (int64_t i = 0; i < x.size(); ++i) {
            const float v = x.data()[i];
            const float t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
            const float du = kGeluC * (1.0f + 3.0f * kGeluA * v * v);
            const float d = 0.5f * (1.0f + t) + 0.5f * v * (1.0f - t * t) * du;
            gx[i] += gy[i] * d;
        }
    });
    return y;
}

Tensor sigmoid(const Tensor& x) {
    Tensor y = Tensor::zeros(x.shape());
    for (int64_t i = 0; i < x.size(); ++i) {
        const float v = x.data()[i];
        y.data()[i] = v >= 0.0f ? 1.0f / (1.0f + std::exp(-v))
                                : std::exp(v) / (1.0f + std::exp(v));
    }
    mark_dependent({x}, y);
    record_op({x}, y, [x, y]() mutable {
        const float* gy = y.grad();
        float* gx = x.grad();
        for (int64_t i = 0; i < x.size(); ++i) {
            const float s = y.data()[i];
            gx[i] += gy[i] * s * (1.0f - s);
        }
    });
    return y;
}

// ---------------------------------------------------------------- conv

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad,
              int groups) {
    if (x.rank() != 3 || w.rank() != 4)
        throw ShapeError("conv2d: expected x[c,h,w] and w[co,ci,kh,kw], got " +
                         shape_str(x.shape()) + " and " + shape_str(w.shape()));
    const int cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
    const int cout = w.dim(0), cig = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    if (groups < 1 || cin % groups != 0 || cout % groups != 0)
        throw ConfigError("conv2d: channels (in " + std::to_string(cin) + ", out " +
                          std::to_string(cout) + ") not divisible by groups " +
                          std::to_string(groups));
    if (cig != cin / groups)
        throw ShapeError("conv2d: kernel input channels " + std::to_string(cig) +
                         " != c_in/groups " + std::to_string(cin / groups));
    const int oh = (h + 2 * pad - kh) / stride + 1;
    const int ow = (wd + 2 * pad - kw) / stride + 1;
    const int cog = cout / groups;
    const int patch = cig * kh * kw;

    // im2col buffer shared by forward and backward
    auto build_cols = [=](const float* xd, std::vector<float>& cols, int g) {
        // cols: [patch, oh*ow]
        for (int c = 0; c < cig; ++c) {
            const float* xc = xd + static_cast<int64_t>(g * cig + c) * h * wd;
            for (int ki = 0; ki < kh; ++ki) {
                for (int kj = 0; kj < kw; ++kj) {
                    float* row = cols.data() +
                                 static_cast<int64_t>((c * kh + ki) * kw + kj) * oh * ow;
                    for (int oi = 0; oi < oh; ++oi) {
                        const int ii = oi * stride + ki - pad;
                        for (int oj = 0; oj < ow; ++oj) {
                            const int jj = oj * stride + kj - pad;
                            row[oi * ow + oj] = (ii >= 0 && ii < h && jj >= 0 && jj < wd)
                                                    ? xc[ii * wd + jj]
                                                    : 0.0f;
                        }
                    }
                }
            }
        }
    };

    Tensor y = Tensor::zeros({cout, oh, ow});
    {
        std::vector<float> cols(static_cast<size_t>(patch) * oh * ow);
        for (int g = 0; g < groups; ++g) {
            build_cols(x.data(), cols, g);
            ECMap W(w.data() + static_cast<int64_t>(g) * cog * patch, cog, patch);
            ECMap C(cols.data(), patch, oh * ow);
            EMap Y(y.data() + static_cast<int64_t>(g) * cog * oh * ow, cog, oh * ow);
            Y.noalias() = W * C;
        }
        if (bias.size() > 0) {
            if (bias.size() != cout)
                throw ShapeError("conv2d: bias size " + std::to_string(bias.size()) +
                                 " != c_out " + std::to_string(cout));
            for (int c = 0; c < cout; ++c) {
                float* yc = y.data() + static_cast<int64_t>(c) * oh * ow;
                for (int i = 0; i < oh * ow; ++i) yc[i] += bias.data()[c];
            }
        }
    }
    mark_dependent({x, w, bias}, y);
    record_op({x, w, bias}, y,
              [=]() mutable {
        Tensor xx = x, ww = w, bb = bias, yy = y;
        std::vector<float> cols(static_cast<size_t>(patch) * oh * ow);
        for (int g = 0; g < groups; ++g) {
            ECMap GY(yy.grad() + static_cast<int64_t>(g) * cog * oh * ow, cog, oh * ow);
            if (ww.requires_grad() || xx.requires_grad()) build_cols(xx.data(), cols, g);
            if (ww.requires_grad()) {
                ECMap C(cols.data(), patch, oh * ow);
                EMap GW(ww.grad() + static_cast<int64_t>(g) * cog * patch, cog, patch);
                GW.noalias() += GY * C.transpose();
            }
            if (xx.requires_grad()) {
                ECMap W(ww.data() + static_cast<int64_t>(g) * cog * patch, cog, patch);
                EMat GC = W.transpose() * GY;  // [patch, oh*ow]
                float* gx = xx.grad();
                for (int c = 0; c < cig; ++c) {
                    float* gxc = gx + static_cast<int64_t>(g * cig + c) * h * wd;
                    for (int ki = 0; ki < kh; ++ki) {
                        for (int kj = 0; kj < kw; ++kj) {
                            const float* row =
                                GC.data() + static_cast<int64_t>((c * kh + ki) * kw + kj) * oh * ow;
                            for (int oi = 0; oi < oh; ++oi) {
                                const int ii = oi * stride + ki - pad;
                                if (ii < 0 || ii >= h) continue;
                                for (int oj = 0; oj < ow; ++oj) {
                                    const int jj = oj * stride + kj - pad;
                                    if (jj < 0 || jj >= wd) continue;
                                    gxc[ii * wd + jj] += row[oi * ow + oj];
                                }
                            }
                        }
                    }
                }
            }
        }
        if (bb.size() > 0 && bb.requires_grad()) {
            float* gb = bb.grad();
            for (int c = 0; c < cout; ++c) {
                const float* gyc = yy.grad() + static_cast<int64_t>(c) * oh * ow;
                double acc = 0.0;
                for (int i = 0; i < oh * ow; ++i) acc += gyc[i];
                gb[c] += static_cast<float>(acc);
            }
        }
    });
    return y;
}

Tensor transpose_conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride) {
    if (x.rank() != 3 || w.rank() != 4)
        throw ShapeError("transpose_conv2d: expected x[c,h,w] and w[ci,co,k,k], got " +
                         shape_str(x.shape()) + " and " + shape_str(w.shape()));
    if (stride < 1) throw ConfigError("transpose_conv2d: stride must be >= 1");
    const int cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
    if (w.dim(0) != cin)
        throw ShapeError("transpose_conv2d: kernel in-channels " + std::to_string(w.dim(0)) +
                         " != input channels " + std::to_string(cin));
    const int cout = w.dim(1), k = w.dim(2);
    const int oh = (h - 1) * stride + k;
    const int ow = (wd - 1) * stride + k;
    Tensor y = Tensor::zeros({cout, oh, ow});

    // one GEMM per kernel tap, scattered at (stride*i + di, stride*j + dj)
    {
        EMat wt(cout, cin);  // per-tap kernel slice, transposed
        for (int di = 0; di < k; ++di) {
            for (int dj = 0; dj < k; ++dj) {
                for (int ci = 0; ci < cin; ++ci)
                    for (int co = 0; co < cout; ++co)
                        wt(co, ci) = w.data()[((static_cast<int64_t>(ci) * cout + co) * k + di) * k + dj];
                ECMap X(x.data(), cin, h * wd);
                EMat T = wt * X;  // [cout, h*wd]
                for (int co = 0; co < cout; ++co) {
                    float* yc = y.data() + static_cast<int64_t>(co) * oh * ow;
                    const float* tr = T.data() + static_cast<int64_t>(co) * h * wd;
                    for (int i = 0; i < h; ++i)
                        for (int j = 0; j < wd; ++j)
                            yc[(i * stride + di) * ow + (j * stride + dj)] += tr[i * wd + j];
                }
            }
        }
        if (bias.size() > 0) {
            if (bias.size() != cout)
                throw ShapeError("transpose_conv2d: bias size " + std::to_string(bias.size()) +
                                 " != c_out " + std::to_string(cout));
            for (int c = 0; c < cout; ++c) {
                float* yc = y.data() + static_cast<int64_t>(c) * oh * ow;
                for (int i = 0; i < oh * ow; ++i) yc[i] += bias.data()[c];
            }
        }
    }
    mark_dependent({x, w, bias}, y);
    record_op({x, w, bias}, y, [=]() mutable {
        Tensor xx = x, ww = w, bb = bias, yy = y;
        EMat gtap(cout, h * wd);
        for (int di = 0; di < k; ++di) {
            for (int dj = 0; dj < k; ++dj) {
                // gather grad at this tap's output positions
                for (int co = 0; co < cout; ++co) {
                    const float* gyc = yy.grad() + static_cast<int64_t>(co) * oh * ow;
                    float* row = gtap.data() + static_cast<int64_t>(co) * h * wd;
                    for (int i = 0; i < h; ++i)
                        for (int j = 0; j < wd; ++j)
                            row[i * wd + j] = gyc[(i * stride + di) * ow + (j * stride + dj)];
                }
                if (xx.requires_grad()) {
                    EMat wt(cin, cout);
                    for (int ci = 0; ci < cin; ++ci)
                        for (int co = 0; co < cout; ++co)
                            wt(ci, co) =
                                ww.data()[((static_cast<int64_t>(ci) * cout + co) * k + di) * k + dj];
                    EMap GX(xx.grad(), cin, h * wd);
                    GX.noalias() += wt * gtap;
                }
                if (ww.requires_grad()) {
                    ECMap X(xx.data(), cin, h * wd);
                    EMat GW = X * gtap.transpose();  // [cin, cout]
                    for (int ci = 0; ci < cin; ++ci)
                        for (int co = 0; co < cout; ++co)
                            ww.grad()[((static_cast<int64_t>(ci) * cout + co) * k + di) * k + dj] +=
                                GW(ci, co);
                }
            }
        }
        if (bb.size() > 0 && bb.requires_grad()) {
            for (int c = 0; c < cout; ++c) {
                const float* gyc = yy.grad() + static_cast<int64_t>(c) * oh * ow;
                double acc = 0.0;
                for (int i = 0; i < oh * ow; ++i) acc += gyc[i];
                bb.grad()[c] += static_cast<float>(acc);
            }
        }
    });
    return y;
}

Tensor bilinear_resize(const Tensor& x, int out_h, int out_w) {
    if (x.rank() != 3) throw ShapeError("bilinear_resize: x must be [c,h,w]");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    Tensor y = Tensor::zeros({c, out_h, out_w});
    // half-pixel centers, clamped
    struct Tap {
        int lo, hi;
        float whi;
    };
    std::vector<Tap> ti(static_cast<size_t>(out_h)), tj(static_cast<size_t>(out_w));
    auto make_taps = [](std::vector<Tap>& taps, int out_n, int in_n) {
        for (int i = 0; i < out_n; ++i) {
            float src = (static_cast<float>(i) + 0.5f) * static_cast<float>(in_n) /
                            static_cast<float>(out_n) -
                        0.5f;
            src = std::clamp(src, 0.0f, static_cast<float>(in_n - 1));
            const int lo = static_cast<int>(std::floor(src));
            const int hi = std::min(lo + 1, in_n - 1);
            taps[static_cast<size_t>(i)] = {lo, hi, src - static_cast<float>(lo)};
        }
    };
    make_taps(ti, out_h, h);
    make_taps(tj, out_w, w);
    for (int ch = 0; ch < c; ++ch) {
        const float* xc = x.data() + static_cast<int64_t>(ch) * h * w;
        float* yc = y.data() + static_cast<int64_t>(ch) * out_h * out_w;
        for (int i = 0; i < out_h; ++i) {
            const Tap& a = ti[static_cast<size_t>(i)];
            for (int j = 0; j < out_w; ++j) {
                const Tap& b = tj[static_cast<size_t>(j)];
                const float v00 = xc[a.lo * w + b.lo], v01 = xc[a.lo * w + b.hi];
                const float v10 = xc[a.hi * w + b.lo], v11 = xc[a.hi * w + b.hi];
                yc[i * out_w + j] = (1 - a.whi) * ((1 - b.whi) * v00 + b.whi * v01) +
                                    a.whi * ((1 - b.whi) * v10 + b.whi * v11);
            }
        }
    }
    mark_dependent({x}, y);
    record_op({x}, y, [x, y, ti, tj, c, h, w, out_h, out_w]() mutable {
        const float* gy = y.grad();
        float* gx = x.grad();
        for (int ch = 0; ch < c; ++ch) {
            float* gxc = gx + static_cast<int64_t>(ch) * h * w;
            const float* gyc = gy + static_cast<int64_t>(ch) * out_h * out_w;
            for (int i = 0; i < out_h; ++i) {
                const Tap& a = ti[static_cast<size_t>(i)];
                for (int j = 0; j < out_w; ++j) {
                    const Tap& b = tj[static_cast<size_t>(j)];
                    const float g = gyc[i * out_w + j];
                    gxc[a.lo * w + b.lo] += (1 - a.whi) * (1 - b.whi) * g;
                    gxc[a.lo * w + b.hi] += (1 - a.whi) * b.whi * g;
                    gxc[a.hi * w + b.lo] += a.whi * (1 - b.whi) * g;
                    gxc[a.hi * w + b.hi] += a.whi * b.whi * g;
                }
            }
        }
    });
    return y;
}

// ---------------------------------------------------------------- oracle

Tensor finite_difference_grad(const std::function<float(const Tensor&)>& f, Tensor x, float h) {
    if (h <= 0.0f) throw UsageError("finite_difference_grad: h must be > 0");
    Tensor g = Tensor::zeros(x.shape());
    for (int64_t i = 0; i < x.size(); ++i) {
        const float orig = x.data()[i];
        x.data()[i] = orig + h;
        const float fp = f(x);
        x.data()[i] = orig - h;
        const float fm = f(x);
        x.data()[i] = orig;
        g.data()[i] = (fp - fm) / (2.0f * h);
    }
    return g;
}

float max_rel_err(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError("max_rel_err: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    float worst = 0.0f;
    for (int64_t i = 0; i < a.size(); ++i) {
        const float denom = std::max(1.0f, std::abs(b.data()[i]));
        worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]) / denom);
    }
    return worst;
}

}  // namespace minisam
