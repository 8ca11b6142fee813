#pragma once

// Dense float32 tensors with tape-based reverse-mode differentiation.
//
// A GradTape becomes the active tape of the constructing thread for its
// lifetime. Ops whose inputs require gradients append an entry to the active
// tape; with no active tape, ops run forward only. backward() walks the tape
// once in reverse and accumulates into every participating tensor's grad.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "kdlt/errors.hpp"

namespace kdlt::nd {

using Shape = std::vector<int>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct Storage {
    Shape shape;
    std::vector<float> value;
    std::vector<float> grad;  // empty until a gradient is accumulated
    bool requires_grad = false;
};

class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<float> values, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, float value, bool requires_grad = false);
    static Tensor scalar(float value, bool requires_grad = false);

    bool defined() const { return static_cast<bool>(s_); }
    const Shape& shape() const { return s_->shape; }
    int rank() const { return static_cast<int>(s_->shape.size()); }
    // Negative axes count from the back.
    int dim(int axis) const;
    std::size_t numel() const { return s_->value.size(); }

    std::span<const float> data() const { return s_->value; }
    // Direct write access; reserved for constructors, initializers and optimizers.
    std::span<float> mutable_data() { return s_->value; }
    float item() const;
    float at(std::size_t flat_index) const { return s_->value.at(flat_index); }

    bool requires_grad() const { return s_->requires_grad; }
    void set_requires_grad(bool on) { s_->requires_grad = on; }
    bool has_grad() const { return !s_->grad.empty(); }
    std::span<const float> grad() const { return s_->grad; }
    std::span<float> mutable_grad();
    void zero_grad() { s_->grad.clear(); }

    // Value copy that never participates in a tape.
    Tensor detach() const;
    Tensor clone() const;

    const std::shared_ptr<Storage>& storage() const { return s_; }

private:
    std::shared_ptr<Storage> s_;
};

class GradTape {
public:
    // Receives the recorded output (value and accumulated grad).
    using BackwardFn = std::function<void(const Storage& output)>;

    GradTape();
    ~GradTape();
    GradTape(const GradTape&) = delete;
    GradTape& operator=(const GradTape&) = delete;

    static GradTape* active();

    void record(std::vector<std::shared_ptr<Storage>> parents,
                std::shared_ptr<Storage> output, BackwardFn fn);

    // Seeds d(loss)/d(loss) = 1 and propagates. Valid once per tape.
    void backward(const Tensor& loss);

    std::size_t size() const { return entries_.size(); }
    bool consumed() const { return consumed_; }

private:
    struct Entry {
        std::vector<std::shared_ptr<Storage>> parents;
        std::shared_ptr<Storage> output;
        BackwardFn fn;
    };
    std::vector<Entry> entries_;
    GradTape* previous_ = nullptr;
    bool consumed_ = false;
};

void backward(const Tensor& loss, GradTape& tape);

// Suspends recording on this thread (teacher forward, evaluation).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    GradTape* saved_;
};

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b);          // [m,k] x [k,n]
Tensor bmm(const Tensor& a, const Tensor& b);             // [B,m,k] x [B,k,n]
Tensor transpose_last2(const Tensor& x);                  // rank 2 or 3

// NCHW convolution with square kernel; weight [Co,Ci,k,k], bias [Co] (may be undefined).
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int padding);
int conv_out_extent(int in, int kernel, int stride, int padding);

// ---------------------------------------------------------------------------
// Shape

Tensor reshape(const Tensor& x, Shape shape);
Tensor concat_rows(const Tensor& a, const Tensor& b);     // along axis 0
Tensor select_rows(const Tensor& x, std::span<const int> rows);  // x [R,C]
// out[r, j] = x[r, index[r, j]]; x [R,A], index row-major R x m.
Tensor gather_last(const Tensor& x, std::span<const int> index, int per_row);
Tensor expand_last(const Tensor& x, int n);               // [...] -> [...,n]

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
// b's shape must equal the trailing dims of a; b is repeated over the leading dims.
Tensor add_broadcast(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, float s);
Tensor add_scalar(const Tensor& x, float s);
Tensor neg(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor silu(const Tensor& x);

// ---------------------------------------------------------------------------
// Reductions (accumulate in double)

Tensor sum(const Tensor& x);   // -> scalar
Tensor mean(const Tensor& x);  // -> scalar
Tensor sum_last(const Tensor& x);
Tensor mean_last(const Tensor& x);
// Population standard deviation over the last axis. Its gradient is taken as
// zero where the deviation vanishes.
Tensor std_last(const Tensor& x);

// ---------------------------------------------------------------------------
// Normalizers

Tensor softmax(const Tensor& x, int axis);
Tensor log_softmax(const Tensor& x, int axis);
// Cosine similarity over the last axis; pairs with a zero-norm side yield 0.
Tensor cosine_last(const Tensor& a, const Tensor& b);
// Rows scaled to unit norm over the last axis; zero rows stay zero.
Tensor l2_normalize_last(const Tensor& x);

// ---------------------------------------------------------------------------
// Verification

// Max over checked coordinates of |analytic - central difference| / max(1, |analytic|).
// When max_coords > 0 and smaller than x.numel(), an evenly strided subset is checked.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                  double eps = 1e-3, std::size_t max_coords = 0);

}  // namespace kdlt::nd
