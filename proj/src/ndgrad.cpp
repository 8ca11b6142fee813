#include "kdlt/ndgrad.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace kdlt::nd {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

thread_local GradTape* g_active_tape = nullptr;

using StoragePtr = std::shared_ptr<Storage>;

std::span<float> grad_buffer(Storage& s) {
    if (s.grad.empty()) s.grad.assign(s.value.size(), 0.0f);
    return s.grad;
}

// Gradient sink for a parent, or an empty span when it does not take gradients.
std::span<float> sink(const StoragePtr& s) {
    if (!s || !s->requires_grad) return {};
    return grad_buffer(*s);
}

// Wraps a forward result; records it on the active tape when a parent needs gradients.
Tensor finish(Shape shape, std::vector<float> value, std::initializer_list<const Tensor*> parents,
              GradTape::BackwardFn fn) {
    Tensor out(std::move(shape), std::move(value));
    GradTape* tape = GradTape::active();
    if (tape == nullptr) return out;
    std::vector<StoragePtr> ps;
    bool any = false;
    for (const Tensor* p : parents) {
        if (p->defined()) {
            ps.push_back(p->storage());
            any = any || p->requires_grad();
        }
    }
    if (!any) return out;
    out.set_requires_grad(true);
    tape->record(std::move(ps), out.storage(), std::move(fn));
    return out;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
}

Shape drop_last(const Shape& s) { return Shape(s.begin(), s.end() - 1); }

void require_rank_at_least(const Tensor& x, int r, const char* op) {
    if (x.rank() < r) {
        throw DimensionError(std::string(op) + ": rank " + std::to_string(x.rank()) + " below " +
                             std::to_string(r));
    }
}

// Elementwise map; deriv(x, y) returns dy/dx.
template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& x, Fwd fwd, Deriv deriv) {
    auto in = x.data();
    std::vector<float> out(in.size());
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = fwd(in[i]);
    StoragePtr xs = x.storage();
    return finish(x.shape(), std::move(out), {&x}, [xs, deriv](const Storage& o) {
        auto gx = sink(xs);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += o.grad[i] * deriv(xs->value[i], o.value[i]);
    });
}

}  // namespace

// ===========================================================================
// Shape helpers and Tensor

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw DimensionError("non-positive extent in shape " + shape_str(shape));
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape, std::vector<float> values, bool requires_grad)
    : s_(std::make_shared<Storage>()) {
    if (shape_numel(shape) != values.size()) {
        throw DimensionError("tensor data size " + std::to_string(values.size()) +
                             " does not match shape " + shape_str(shape));
    }
    s_->shape = std::move(shape);
    s_->value = std::move(values);
    s_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0f, requires_grad); }

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
    std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<float>(n, value), requires_grad);
}

Tensor Tensor::scalar(float value, bool requires_grad) { return Tensor({}, {value}, requires_grad); }

int Tensor::dim(int axis) const {
    int r = rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw DimensionError("axis out of range for " + shape_str(shape()));
    return s_->shape[static_cast<std::size_t>(axis)];
}

float Tensor::item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return s_->value[0];
}

std::span<float> Tensor::mutable_grad() { return grad_buffer(*s_); }

Tensor Tensor::detach() const { return Tensor(s_->shape, s_->value, false); }

Tensor Tensor::clone() const {
    Tensor t(s_->shape, s_->value, s_->requires_grad);
    t.s_->grad = s_->grad;
    return t;
}

// ===========================================================================
// Tape

GradTape::GradTape() : previous_(g_active_tape) { g_active_tape = this; }

GradTape::~GradTape() {
    if (g_active_tape == this) g_active_tape = previous_;
}

GradTape* GradTape::active() { return g_active_tape; }

void GradTape::record(std::vector<std::shared_ptr<Storage>> parents, std::shared_ptr<Storage> output,
                      BackwardFn fn) {
    if (consumed_) throw StateError("cannot record onto a tape after backward");
    entries_.push_back(Entry{std::move(parents), std::move(output), std::move(fn)});
}

void GradTape::backward(const Tensor& loss) {
    if (consumed_) throw StateError("backward called twice on the same tape");
    if (!loss.defined() || loss.numel() != 1) {
        throw ContractError("backward requires a scalar loss, got " +
                            (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
    }
    consumed_ = true;
    if (!loss.requires_grad()) return;
    grad_buffer(*loss.storage())[0] += 1.0f;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
        if (it->output->grad.empty()) continue;
        it->fn(*it->output);
    }
}

void backward(const Tensor& loss, GradTape& tape) { tape.backward(loss); }

NoGradGuard::NoGradGuard() : saved_(g_active_tape) { g_active_tape = nullptr; }
NoGradGuard::~NoGradGuard() { g_active_tape = saved_; }

// ===========================================================================
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) throw DimensionError("matmul expects rank-2 operands");
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw DimensionError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    }
    std::vector<float> out(static_cast<std::size_t>(m) * n);
    MapMat(out.data(), m, n).noalias() = CMapMat(a.data().data(), m, k) * CMapMat(b.data().data(), k, n);
    StoragePtr as = a.storage(), bs = b.storage();
    return finish({m, n}, std::move(out), {&a, &b}, [as, bs, m, k, n](const Storage& o) {
        CMapMat g(o.grad.data(), m, n);
        if (auto ga = sink(as); !ga.empty())
            MapMat(ga.data(), m, k).noalias() += g * CMapMat(bs->value.data(), k, n).transpose();
        if (auto gb = sink(bs); !gb.empty())
            MapMat(gb.data(), k, n).noalias() += CMapMat(as->value.data(), m, k).transpose() * g;
    });
}

Tensor bmm(const Tensor& a, const Tensor& b) {
    if (a.rank() != 3 || b.rank() != 3) throw DimensionError("bmm expects rank-3 operands");
    const int B = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    if (b.dim(0) != B || b.dim(1) != k) {
        throw DimensionError("bmm: incompatible " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    const std::size_t sa = static_cast<std::size_t>(m) * k, sb = static_cast<std::size_t>(k) * n,
                      so = static_cast<std::size_t>(m) * n;
    std::vector<float> out(B * so);
    for (int i = 0; i < B; ++i) {
        MapMat(out.data() + i * so, m, n).noalias() =
            CMapMat(a.data().data() + i * sa, m, k) * CMapMat(b.data().data() + i * sb, k, n);
    }
    StoragePtr as = a.storage(), bs = b.storage();
    return finish({B, m, n}, std::move(out), {&a, &b}, [=](const Storage& o) {
        auto ga = sink(as);
        auto gb = sink(bs);
        for (int i = 0; i < B; ++i) {
            CMapMat g(o.grad.data() + i * so, m, n);
            if (!ga.empty())
                MapMat(ga.data() + i * sa, m, k).noalias() +=
                    g * CMapMat(bs->value.data() + i * sb, k, n).transpose();
            if (!gb.empty())
                MapMat(gb.data() + i * sb, k, n).noalias() +=
                    CMapMat(as->value.data() + i * sa, m, k).transpose() * g;
        }
    });
}

Tensor transpose_last2(const Tensor& x) {
    if (x.rank() != 2 && x.rank() != 3) throw DimensionError("transpose_last2 expects rank 2 or 3");
    const int B = x.rank() == 3 ? x.dim(0) : 1;
    const int r = x.dim(-2), c = x.dim(-1);
    const std::size_t plane = static_cast<std::size_t>(r) * c;
    std::vector<float> out(x.numel());
    for (int i = 0; i < B; ++i)
        MapMat(out.data() + i * plane, c, r) = CMapMat(x.data().data() + i * plane, r, c).transpose();
    Shape shape = x.shape();
    std::swap(shape[shape.size() - 1], shape[shape.size() - 2]);
    StoragePtr xs = x.storage();
    return finish(std::move(shape), std::move(out), {&x}, [=](const Storage& o) {
        auto gx = sink(xs);
        for (int i = 0; i < B; ++i)
            MapMat(gx.data() + i * plane, r, c) += CMapMat(o.grad.data() + i * plane, c, r).transpose();
    });
}

int conv_out_extent(int in, int kernel, int stride, int padding) {
    if (stride <= 0 || kernel <= 0 || padding < 0) throw DimensionError("invalid convolution geometry");
    const int span = in + 2 * padding - kernel;
    if (span < 0) throw DimensionError("convolution kernel larger than padded input");
    return span / stride + 1;
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int padding) {
    if (x.rank() != 4 || weight.rank() != 4) throw DimensionError("conv2d expects NCHW input and OIHW weight");
    const int N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Co = weight.dim(0), kk = weight.dim(2);
    if (weight.dim(1) != Ci || weight.dim(3) != kk) {
        throw DimensionError("conv2d: weight " + shape_str(weight.shape()) + " incompatible with input " +
                             shape_str(x.shape()));
    }
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != Co)) throw DimensionError("conv2d: bias shape");
    const int Ho = conv_out_extent(H, kk, stride, padding);
    const int Wo = conv_out_extent(W, kk, stride, padding);
    const int P = Ho * Wo;
    const int Kd = Ci * kk * kk;
    const std::size_t cols_n = static_cast<std::size_t>(N) * P;

    // im2col: rows (ci, ky, kx), columns (n, oy, ox)
    auto cols = std::make_shared<std::vector<float>>(static_cast<std::size_t>(Kd) * cols_n, 0.0f);
    const float* xd = x.data().data();
    for (int ci = 0; ci < Ci; ++ci)
        for (int ky = 0; ky < kk; ++ky)
            for (int kx = 0; kx < kk; ++kx) {
                float* row = cols->data() + static_cast<std::size_t>((ci * kk + ky) * kk + kx) * cols_n;
                for (int n = 0; n < N; ++n) {
                    const float* plane = xd + (static_cast<std::size_t>(n) * Ci + ci) * H * W;
                    float* dst = row + static_cast<std::size_t>(n) * P;
                    for (int oy = 0; oy < Ho; ++oy) {
                        const int iy = oy * stride - padding + ky;
                        if (iy < 0 || iy >= H) continue;
                        for (int ox = 0; ox < Wo; ++ox) {
                            const int ix = ox * stride - padding + kx;
                            if (ix >= 0 && ix < W) dst[oy * Wo + ox] = plane[iy * W + ix];
                        }
                    }
                }
            }

    RowMat prod = CMapMat(weight.data().data(), Co, Kd) * CMapMat(cols->data(), Kd, static_cast<Eigen::Index>(cols_n));
    std::vector<float> out(static_cast<std::size_t>(N) * Co * P);
    for (int n = 0; n < N; ++n)
        for (int co = 0; co < Co; ++co) {
            const float b = bias.defined() ? bias.data()[co] : 0.0f;
            const float* src = prod.data() + static_cast<std::size_t>(co) * cols_n + static_cast<std::size_t>(n) * P;
            float* dst = out.data() + (static_cast<std::size_t>(n) * Co + co) * P;
            for (int p = 0; p < P; ++p) dst[p] = src[p] + b;
        }

    StoragePtr xs = x.storage(), ws = weight.storage(), bs = bias.defined() ? bias.storage() : nullptr;
    return finish({N, Co, Ho, Wo}, std::move(out), {&x, &weight, &bias}, [=](const Storage& o) {
        // Regroup grad to [Co, N*P] to match the im2col column order.
        RowMat g(Co, static_cast<Eigen::Index>(cols_n));
        for (int n = 0; n < N; ++n)
            for (int co = 0; co < Co; ++co)
                std::copy_n(o.grad.data() + (static_cast<std::size_t>(n) * Co + co) * P, P,
                            g.data() + static_cast<std::size_t>(co) * cols_n + static_cast<std::size_t>(n) * P);
        if (auto gb = sink(bs); !gb.empty())
            for (int co = 0; co < Co; ++co) {
                double acc = 0.0;
                const float* row = g.data() + static_cast<std::size_t>(co) * cols_n;
                for (std::size_t j = 0; j < cols_n; ++j) acc += row[j];
                gb[co] += static_cast<float>(acc);
            }
        if (auto gw = sink(ws); !gw.empty())
            MapMat(gw.data(), Co, Kd).noalias() +=
                g * CMapMat(cols->data(), Kd, static_cast<Eigen::Index>(cols_n)).transpose();
        if (auto gx = sink(xs); !gx.empty()) {
            RowMat gcols = CMapMat(ws->value.data(), Co, Kd).transpose() * g;
            for (int ci = 0; ci < Ci; ++ci)
                for (int ky = 0; ky < kk; ++ky)
                    for (int kx = 0; kx < kk; ++kx) {
                        const float* row =
                            gcols.data() + static_cast<std::size_t>((ci * kk + ky) * kk + kx) * cols_n;
                        for (int n = 0; n < N; ++n) {
                            float* plane = gx.data() + (static_cast<std::size_t>(n) * Ci + ci) * H * W;
                            const float* src = row + static_cast<std::size_t>(n) * P;
                            for (int oy = 0; oy < Ho; ++oy) {
                                const int iy = oy * stride - padding + ky;
                                if (iy < 0 || iy >= H) continue;
                                for (int ox = 0; ox < Wo; ++ox) {
                                    const int ix = ox * stride - padding + kx;
                                    if (ix >= 0 && ix < W) plane[iy * W + ix] += src[oy * Wo + ox];
                                }
                            }
                        }
                    }
        }
    });
}

// ===========================================================================
// Shape

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw DimensionError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
    }
    StoragePtr xs = x.storage();
    return finish(std::move(shape), std::vector<float>(x.data().begin(), x.data().end()), {&x},
                  [xs](const Storage& o) {
                      auto gx = sink(xs);
                      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += o.grad[i];
                  });
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
    require_rank_at_least(a, 1, "concat_rows");
    if (a.rank() != b.rank() || !std::equal(a.shape().begin() + 1, a.shape().end(), b.shape().begin() + 1)) {
        throw DimensionError("concat_rows: trailing shapes differ " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
    std::vector<float> out(a.data().begin(), a.data().end());
    out.insert(out.end(), b.data().begin(), b.data().end());
    Shape shape = a.shape();
    shape[0] += b.dim(0);
    StoragePtr as = a.storage(), bs = b.storage();
    const std::size_t na = a.numel();
    return finish(std::move(shape), std::move(out), {&a, &b}, [=](const Storage& o) {
        if (auto ga = sink(as); !ga.empty())
            for (std::size_t i = 0; i < na; ++i) ga[i] += o.grad[i];
        if (auto gb = sink(bs); !gb.empty())
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += o.grad[na + i];
    });
}

Tensor select_rows(const Tensor& x, std::span<const int> rows) {
    if (x.rank() != 2) throw DimensionError("select_rows expects a rank-2 tensor");
    if (rows.empty()) throw ContractError("select_rows: empty row list");
    const int R = x.dim(0), C = x.dim(1);
    std::vector<int> idx(rows.begin(), rows.end());
    std::vector<float> out(idx.size() * C);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= R) throw DimensionError("select_rows: row index out of range");
        std::copy_n(x.data().data() + static_cast<std::size_t>(idx[i]) * C, C, out.data() + i * C);
    }
    StoragePtr xs = x.storage();
    return finish({static_cast<int>(idx.size()), C}, std::move(out), {&x}, [xs, idx, C](const Storage& o) {
        auto gx = sink(xs);
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (int c = 0; c < C; ++c) gx[static_cast<std::size_t>(idx[i]) * C + c] += o.grad[i * C + c];
    });
}

Tensor gather_last(const Tensor& x, std::span<const int> index, int per_row) {
    if (x.rank() != 2) throw DimensionError("gather_last expects a rank-2 tensor");
    const int R = x.dim(0), A = x.dim(1);
    if (per_row <= 0 || index.size() != static_cast<std::size_t>(R) * per_row) {
        throw DimensionError("gather_last: index count does not match rows");
    }
    std::vector<int> idx(index.begin(), index.end());
    std::vector<float> out(idx.size());
    for (int r = 0; r < R; ++r)
        for (int j = 0; j < per_row; ++j) {
            const int k = idx[static_cast<std::size_t>(r) * per_row + j];
            if (k < 0 || k >= A) throw DimensionError("gather_last: index out of range");
            out[static_cast<std::size_t>(r) * per_row + j] = x.data()[static_cast<std::size_t>(r) * A + k];
        }
    StoragePtr xs = x.storage();
    return finish({R, per_row}, std::move(out), {&x}, [xs, idx, R, A, per_row](const Storage& o) {
        auto gx = sink(xs);
        for (int r = 0; r < R; ++r)
            for (int j = 0; j < per_row; ++j) {
                const std::size_t flat = static_cast<std::size_t>(r) * per_row + j;
                gx[static_cast<std::size_t>(r) * A + idx[flat]] += o.grad[flat];
            }
    });
}

Tensor expand_last(const Tensor& x, int n) {
    if (n <= 0) throw DimensionError("expand_last: non-positive extent");
    std::vector<float> out(x.numel() * n);
    for (std::size_t i = 0; i < x.numel(); ++i) std::fill_n(out.data() + i * n, n, x.data()[i]);
    Shape shape = x.shape();
    shape.push_back(n);
    StoragePtr xs = x.storage();
    return finish(std::move(shape), std::move(out), {&x}, [xs, n](const Storage& o) {
        auto gx = sink(xs);
        for (std::size_t i = 0; i < gx.size(); ++i) {
            double acc = 0.0;
            for (int j = 0; j < n; ++j) acc += o.grad[i * n + j];
            gx[i] += static_cast<float>(acc);
        }
    });
}

// ===========================================================================
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    std::vector<float> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    StoragePtr as = a.storage(), bs = b.storage();
    return finish(a.shape(), std::move(out), {&a, &b}, [as, bs](const Storage& o) {
        for (auto* s : {&as, &bs})
            if (auto g = sink(*s); !g.empty())
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    std::vector<float> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    StoragePtr as = a.storage(), bs = b.storage();
    return finish(a.shape(), std::move(out), {&a, &b}, [as, bs](const Storage& o) {
        if (auto g = sink(as); !g.empty())
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
        if (auto g = sink(bs); !g.empty())
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= o.grad[i];
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    std::vector<float> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    StoragePtr as = a.storage(), bs = b.storage();
    return finish(a.shape(), std::move(out), {&a, &b}, [as, bs](const Storage& o) {
        if (auto g = sink(as); !g.empty())
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * bs->value[i];
        if (auto g = sink(bs); !g.empty())
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * as->value[i];
    });
}

Tensor div(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "div");
    std::vector<float> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] / b.data()[i];
    StoragePtr as = a.storage(), bs = b.storage();
    return finish(a.shape(), std::move(out), {&a, &b}, [as, bs](const Storage& o) {
        if (auto g = sink(as); !g.empty())
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] / bs->value[i];
        if (auto g = sink(bs); !g.empty())
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= o.grad[i] * o.value[i] / bs->value[i];
    });
}

Tensor add_broadcast(const Tensor& a, const Tensor& b) {
    if (b.rank() > a.rank() || !std::equal(b.shape().begin(), b.shape().end(), a.shape().end() - b.rank())) {
        throw DimensionError("add_broadcast: " + shape_str(b.shape()) + " is not a suffix of " +
                             shape_str(a.shape()));
    }
    const std::size_t inner = b.numel(), outer = a.numel() / inner;
    std::vector<float> out(a.numel());
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] = a.data()[o * inner + i] + b.data()[i];
    StoragePtr as = a.storage(), bs = b.storage();
    return finish(a.shape(), std::move(out), {&a, &b}, [=](const Storage& o) {
        if (auto g = sink(as); !g.empty())
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
        if (auto g = sink(bs); !g.empty()) {
            std::vector<double> acc(inner, 0.0);
            for (std::size_t r = 0; r < outer; ++r)
                for (std::size_t i = 0; i < inner; ++i) acc[i] += o.grad[r * inner + i];
            for (std::size_t i = 0; i < inner; ++i) g[i] += static_cast<float>(acc[i]);
        }
    });
}

Tensor scale(const Tensor& x, float s) {
    return unary(x, [s](float v) { return v * s; }, [s](float, float) { return s; });
}

Tensor add_scalar(const Tensor& x, float s) {
    return unary(x, [s](float v) { return v + s; }, [](float, float) { return 1.0f; });
}

Tensor neg(const Tensor& x) { return scale(x, -1.0f); }

Tensor exp(const Tensor& x) {
    return unary(x, [](float v) { return std::exp(v); }, [](float, float y) { return y; });
}

Tensor log(const Tensor& x) {
    return unary(x, [](float v) { return std::log(v); }, [](float v, float) { return 1.0f / v; });
}

Tensor sqrt(const Tensor& x) {
    return unary(x, [](float v) { return std::sqrt(v); }, [](float, float y) { return 0.5f / y; });
}

Tensor silu(const Tensor& x) {
    return unary(
        x, [](float v) { return v / (1.0f + std::exp(-v)); },
        [](float v, float) {
            const float s = 1.0f / (1.0f + std::exp(-v));
            return s * (1.0f + v * (1.0f - s));
        });
}

// ===========================================================================
// Reductions

Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (float v : x.data()) acc += v;
    StoragePtr xs = x.storage();
    return finish({}, {static_cast<float>(acc)}, {&x}, [xs](const Storage& o) {
        auto g = sink(xs);
        for (float& v : g) v += o.grad[0];
    });
}

Tensor mean(const Tensor& x) {
    double acc = 0.0;
    for (float v : x.data()) acc += v;
    const double n = static_cast<double>(x.numel());
    StoragePtr xs = x.storage();
    return finish({}, {static_cast<float>(acc / n)}, {&x}, [xs, n](const Storage& o) {
        auto g = sink(xs);
        const float share = static_cast<float>(o.grad[0] / n);
        for (float& v : g) v += share;
    });
}

Tensor sum_last(const Tensor& x) {
    require_rank_at_least(x, 1, "sum_last");
    const int n = x.dim(-1);
    const std::size_t rows = x.numel() / n;
    std::vector<float> out(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        double acc = 0.0;
        for (int j = 0; j < n; ++j) acc += x.data()[r * n + j];
        out[r] = static_cast<float>(acc);
    }
    StoragePtr xs = x.storage();
    return finish(drop_last(x.shape()), std::move(out), {&x}, [xs, n, rows](const Storage& o) {
        auto g = sink(xs);
        for (std::size_t r = 0; r < rows; ++r)
            for (int j = 0; j < n; ++j) g[r * n + j] += o.grad[r];
    });
}

Tensor mean_last(const Tensor& x) {
    require_rank_at_least(x, 1, "mean_last");
    return scale(sum_last(x), 1.0f / static_cast<float>(x.dim(-1)));
}

Tensor std_last(const Tensor& x) {
    require_rank_at_least(x, 1, "std_last");
    const int n = x.dim(-1);
    const std::size_t rows = x.numel() / n;
    std::vector<float> out(rows);
    auto means = std::make_shared<std::vector<double>>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const float* v = x.data().data() + r * n;
        double m = 0.0;
        for (int j = 0; j < n; ++j) m += v[j];
        m /= n;
        double var = 0.0;
        for (int j = 0; j < n; ++j) var += (v[j] - m) * (v[j] - m);
        (*means)[r] = m;
        out[r] = static_cast<float>(std::sqrt(var / n));
    }
    StoragePtr xs = x.storage();
    return finish(drop_last(x.shape()), std::move(out), {&x}, [xs, n, rows, means](const Storage& o) {
        auto g = sink(xs);
        for (std::size_t r = 0; r < rows; ++r) {
            const double s = o.value[r];
            if (s == 0.0) continue;
            const double coef = o.grad[r] / (n * s);
            for (int j = 0; j < n; ++j)
                g[r * n + j] += static_cast<float>(coef * (xs->value[r * n + j] - (*means)[r]));
        }
    });
}

// ===========================================================================
// Normalizers

namespace {

struct AxisLayout {
    std::size_t outer, len, inner;
};

AxisLayout axis_layout(const Tensor& x, int axis) {
    const int r = x.rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw DimensionError("softmax axis out of range for " + shape_str(x.shape()));
    AxisLayout l{1, static_cast<std::size_t>(x.shape()[axis]), 1};
    for (int i = 0; i < axis; ++i) l.outer *= x.shape()[i];
    for (int i = axis + 1; i < r; ++i) l.inner *= x.shape()[i];
    return l;
}

// Fills softmax (or log-softmax) along the axis with max subtraction.
void softmax_rows(const float* in, float* out, const AxisLayout& l, bool as_log) {
    for (std::size_t o = 0; o < l.outer; ++o)
        for (std::size_t i = 0; i < l.inner; ++i) {
            const std::size_t base = o * l.len * l.inner + i;
            float mx = in[base];
            for (std::size_t k = 1; k < l.len; ++k) mx = std::max(mx, in[base + k * l.inner]);
            double z = 0.0;
            for (std::size_t k = 0; k < l.len; ++k) z += std::exp(static_cast<double>(in[base + k * l.inner] - mx));
            const double logz = std::log(z);
            for (std::size_t k = 0; k < l.len; ++k) {
                const double shifted = static_cast<double>(in[base + k * l.inner] - mx) - logz;
                out[base + k * l.inner] = static_cast<float>(as_log ? shifted : std::exp(shifted));
            }
        }
}

}  // namespace

Tensor softmax(const Tensor& x, int axis) {
    const AxisLayout l = axis_layout(x, axis);
    std::vector<float> out(x.numel());
    softmax_rows(x.data().data(), out.data(), l, false);
    StoragePtr xs = x.storage();
    return finish(x.shape(), std::move(out), {&x}, [xs, l](const Storage& o) {
        auto g = sink(xs);
        for (std::size_t a = 0; a < l.outer; ++a)
            for (std::size_t i = 0; i < l.inner; ++i) {
                const std::size_t base = a * l.len * l.inner + i;
                double dot = 0.0;
                for (std::size_t k = 0; k < l.len; ++k)
                    dot += static_cast<double>(o.grad[base + k * l.inner]) * o.value[base + k * l.inner];
                for (std::size_t k = 0; k < l.len; ++k) {
                    const std::size_t j = base + k * l.inner;
                    g[j] += static_cast<float>(o.value[j] * (o.grad[j] - dot));
                }
            }
    });
}

Tensor log_softmax(const Tensor& x, int axis) {
    const AxisLayout l = axis_layout(x, axis);
    std::vector<float> out(x.numel());
    softmax_rows(x.data().data(), out.data(), l, true);
    StoragePtr xs = x.storage();
    return finish(x.shape(), std::move(out), {&x}, [xs, l](const Storage& o) {
        auto g = sink(xs);
        for (std::size_t a = 0; a < l.outer; ++a)
            for (std::size_t i = 0; i < l.inner; ++i) {
                const std::size_t base = a * l.len * l.inner + i;
                double total = 0.0;
                for (std::size_t k = 0; k < l.len; ++k) total += o.grad[base + k * l.inner];
                for (std::size_t k = 0; k < l.len; ++k) {
                    const std::size_t j = base + k * l.inner;
                    g[j] += static_cast<float>(o.grad[j] - std::exp(static_cast<double>(o.value[j])) * total);
                }
            }
    });
}

Tensor cosine_last(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "cosine_last");
    require_rank_at_least(a, 1, "cosine_last");
    const int n = a.dim(-1);
    const std::size_t rows = a.numel() / n;
    // per row: dot, |a|, |b|
    auto stats = std::make_shared<std::vector<double>>(rows * 3);
    std::vector<float> out(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const float* av = a.data().data() + r * n;
        const float* bv = b.data().data() + r * n;
        double dot = 0.0, na = 0.0, nb = 0.0;
        for (int j = 0; j < n; ++j) {
            dot += static_cast<double>(av[j]) * bv[j];
            na += static_cast<double>(av[j]) * av[j];
            nb += static_cast<double>(bv[j]) * bv[j];
        }
        na = std::sqrt(na);
        nb = std::sqrt(nb);
        (*stats)[3 * r] = dot;
        (*stats)[3 * r + 1] = na;
        (*stats)[3 * r + 2] = nb;
        out[r] = (na == 0.0 || nb == 0.0) ? 0.0f : static_cast<float>(dot / (na * nb));
    }
    StoragePtr as = a.storage(), bs = b.storage();
    return finish(drop_last(a.shape()), std::move(out), {&a, &b}, [=](const Storage& o) {
        auto ga = sink(as);
        auto gb = sink(bs);
        for (std::size_t r = 0; r < rows; ++r) {
            const double dot = (*stats)[3 * r], na = (*stats)[3 * r + 1], nb = (*stats)[3 * r + 2];
            if (na == 0.0 || nb == 0.0) continue;
            const double c = dot / (na * nb);
            const double g = o.grad[r];
            const float* av = as->value.data() + r * n;
            const float* bv = bs->value.data() + r * n;
            if (!ga.empty())
                for (int j = 0; j < n; ++j)
                    ga[r * n + j] += static_cast<float>(g * (bv[j] / (na * nb) - c * av[j] / (na * na)));
            if (!gb.empty())
                for (int j = 0; j < n; ++j)
                    gb[r * n + j] += static_cast<float>(g * (av[j] / (na * nb) - c * bv[j] / (nb * nb)));
        }
    });
}

Tensor l2_normalize_last(const Tensor& x) {
    require_rank_at_least(x, 1, "l2_normalize_last");
    const int n = x.dim(-1);
    const std::size_t rows = x.numel() / n;
    auto norms = std::make_shared<std::vector<double>>(rows);
    std::vector<float> out(x.numel(), 0.0f);
    for (std::size_t r = 0; r < rows; ++r) {
        const float* v = x.data().data() + r * n;
        double s = 0.0;
        for (int j = 0; j < n; ++j) s += static_cast<double>(v[j]) * v[j];
        s = std::sqrt(s);
        (*norms)[r] = s;
        if (s > 0.0)
            for (int j = 0; j < n; ++j) out[r * n + j] = static_cast<float>(v[j] / s);
    }
    StoragePtr xs = x.storage();
    return finish(x.shape(), std::move(out), {&x}, [xs, n, rows, norms](const Storage& o) {
        auto g = sink(xs);
        for (std::size_t r = 0; r < rows; ++r) {
            const double s = (*norms)[r];
            if (s == 0.0) continue;
            double dot = 0.0;
            for (int j = 0; j < n; ++j) dot += static_cast<double>(o.grad[r * n + j]) * o.value[r * n + j];
            for (int j = 0; j < n; ++j)
                g[r * n + j] += static_cast<float>((o.grad[r * n + j] - o.value[r * n + j] * dot) / s);
        }
    });
}

// ===========================================================================
// Verification

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps,
                  std::size_t max_coords) {
    Tensor probe = x.detach();
    probe.set_requires_grad(true);
    {
        GradTape tape;
        Tensor y = f(probe);
        if (!y.defined() || y.numel() != 1) throw ContractError("grad_check: function must return a scalar");
        tape.backward(y);
    }
    std::vector<float> analytic(probe.numel(), 0.0f);
    if (probe.has_grad()) std::copy(probe.grad().begin(), probe.grad().end(), analytic.begin());

    const std::size_t n = probe.numel();
    const std::size_t stride = (max_coords > 0 && max_coords < n) ? (n + max_coords - 1) / max_coords : 1;
    NoGradGuard no_grad;
    double worst = 0.0;
    auto values = probe.mutable_data();
    for (std::size_t i = 0; i < n; i += stride) {
        const float original = values[i];
        const float up = original + static_cast<float>(eps);
        const float down = original - static_cast<float>(eps);
        values[i] = up;
        const double f_up = f(probe).item();
        values[i] = down;
        const double f_down = f(probe).item();
        values[i] = original;
        const double numeric = (f_up - f_down) / (static_cast<double>(up) - static_cast<double>(down));
        const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(static_cast<double>(analytic[i])));
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace kdlt::nd
