#include "duet/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

#include "duet/simd.hpp"

namespace duet::ag {

namespace {

thread_local bool g_grad_enabled = true;

using BackwardFn = std::function<void(Node&)>;

Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->is_leaf = false;
    if (g_grad_enabled) {
        bool any = false;
        for (const Var& v : inputs)
            if (v.defined() && v.requires_grad()) any = true;
        if (any) {
            node->requires_grad = true;
            for (const Var& v : inputs)
                if (v.defined()) node->parents.push_back(v.node());
            node->backward_fn = std::move(fn);
        }
    }
    return Var(std::move(node));
}

Var record_many(Tensor value, const std::vector<Var>& inputs, BackwardFn fn) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->is_leaf = false;
    if (g_grad_enabled) {
        bool any = false;
        for (const Var& v : inputs)
            if (v.requires_grad()) any = true;
        if (any) {
            node->requires_grad = true;
            for (const Var& v : inputs) node->parents.push_back(v.node());
            node->backward_fn = std::move(fn);
        }
    }
    return Var(std::move(node));
}

Tensor& grad_of(const Var& v) { return v.node()->ensure_grad(); }

void require_same_shape(const Var& a, const Var& b, const char* op) {
    if (a.value().shape != b.value().shape)
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
}

// C[n x m] += A[n x k] * B[m x k]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
             std::size_t m) {
    std::vector<double> bt(k * m);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < k; ++j) bt[j * m + i] = b[i * k + j];
    simd::kernels().gemm(a, bt.data(), c, n, k, m);
}

// C[k x m] += A[n x k]^T * B[n x m]
void gemm_tn(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
             std::size_t m) {
    std::vector<double> at(k * n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < k; ++j) at[j * n + i] = a[i * k + j];
    simd::kernels().gemm(at.data(), b, c, k, n, m);
}

template <class F>
Var unary(const Var& a, F f, std::function<double(double x, double y)> dfdx) {
    Tensor out(a.shape());
    const auto& x = a.value().data;
    for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = f(x[i]);
    return record(std::move(out), {a}, [a, dfdx](Node& self) {
        if (!a.requires_grad()) return;
        Tensor& ga = grad_of(a);
        const auto& x = a.value().data;
        for (std::size_t i = 0; i < x.size(); ++i)
            ga.data[i] += self.grad.data[i] * dfdx(x[i], self.value.data[i]);
    });
}

}  // namespace

Tensor& Node::ensure_grad() {
    if (grad.data.size() != value.data.size() || grad.shape != value.shape) grad = Tensor(value.shape);
    return grad;
}

Var Var::constant(Tensor value) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    return Var(std::move(node));
}

Var Var::parameter(Tensor value) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->requires_grad = true;
    return Var(std::move(node));
}

void Var::zero_grad() {
    if (!node_->grad.data.empty()) node_->grad.fill(0.0);
}

void Var::backward() const {
    if (node_->value.size() != 1) throw std::logic_error("backward() requires a scalar");
    if (!node_->requires_grad) return;

    // Owning handles: releasing a node's closure below must not free parents
    // that are still queued.
    std::vector<std::shared_ptr<Node>> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<std::shared_ptr<Node>, std::size_t>> stack{{node_, 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, idx] = stack.back();
        if (idx < n->parents.size()) {
            const auto& p = n->parents[idx++];
            if (p->requires_grad && !seen.count(p.get())) {
                seen.insert(p.get());
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    node_->ensure_grad().data[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = it->get();
        if (n->backward_fn && !n->grad.data.empty()) {
            n->backward_fn(*n);
            if (n != node_.get()) {
                n->backward_fn = nullptr;
                n->parents.clear();
                n->grad = Tensor();
            }
        }
    }
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

// ---- elementwise -----------------------------------------------------------

Var add(const Var& a, const Var& b) {
    require_same_shape(a, b, "add");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += b.value().data[i];
    return record(std::move(out), {a, b}, [a, b](Node& self) {
        for (const Var* v : {&a, &b})
            if (v->requires_grad()) simd::axpy(1.0, self.grad.data, grad_of(*v).data);
    });
}

Var sub(const Var& a, const Var& b) {
    require_same_shape(a, b, "sub");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= b.value().data[i];
    return record(std::move(out), {a, b}, [a, b](Node& self) {
        if (a.requires_grad()) simd::axpy(1.0, self.grad.data, grad_of(a).data);
        if (b.requires_grad()) simd::axpy(-1.0, self.grad.data, grad_of(b).data);
    });
}

Var mul(const Var& a, const Var& b) {
    require_same_shape(a, b, "mul");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= b.value().data[i];
    return record(std::move(out), {a, b}, [a, b](Node& self) {
        const auto& g = self.grad.data;
        if (a.requires_grad()) {
            auto& ga = grad_of(a).data;
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b.value().data[i];
        }
        if (b.requires_grad()) {
            auto& gb = grad_of(b).data;
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a.value().data[i];
        }
    });
}

Var scale(const Var& a, double s) {
    Tensor out = a.value();
    for (double& v : out.data) v *= s;
    return record(std::move(out), {a}, [a, s](Node& self) {
        if (a.requires_grad()) simd::axpy(s, self.grad.data, grad_of(a).data);
    });
}

Var add_scalar(const Var& a, double s) {
    Tensor out = a.value();
    for (double& v : out.data) v += s;
    return record(std::move(out), {a}, [a](Node& self) {
        if (a.requires_grad()) simd::axpy(1.0, self.grad.data, grad_of(a).data);
    });
}

// The hinge dead zone relies on relu'(x) being exactly 0 for x <= 0.
Var relu(const Var& a) {
    return unary(
        a, [](double x) { return x > 0.0 ? x : 0.0; },
        [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var abs(const Var& a) {
    return unary(
        a, [](double x) { return std::fabs(x); },
        [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Var sigmoid(const Var& a) {
    return unary(
        a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
        [](double, double y) { return y * (1.0 - y); });
}

Var quick_gelu(const Var& a) {
    return unary(
        a, [](double x) { return x / (1.0 + std::exp(-1.702 * x)); },
        [](double x, double) {
            const double s = 1.0 / (1.0 + std::exp(-1.702 * x));
            return s + 1.702 * x * s * (1.0 - s);
        });
}

// ---- reductions ------------------------------------------------------------

Var sum(const Var& a) {
    double s = 0.0;
    for (double v : a.value().data) s += v;
    return record(Tensor::scalar(s), {a}, [a](Node& self) {
        if (!a.requires_grad()) return;
        const double g = self.grad.data[0];
        for (double& v : grad_of(a).data) v += g;
    });
}

Var mean(const Var& a) {
    if (a.size() == 0) throw std::invalid_argument("mean of empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

// ---- linear algebra --------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
    const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
    if (b.rows() != k)
        throw std::invalid_argument("matmul: inner dimension mismatch " + shape_str(a.shape()) +
                                    " x " + shape_str(b.shape()));
    Tensor out({n, m});
    simd::kernels().gemm(a.value().data.data(), b.value().data.data(), out.data.data(), n, k, m);
    return record(std::move(out), {a, b}, [a, b, n, k, m](Node& self) {
        const double* g = self.grad.data.data();
        if (a.requires_grad()) gemm_nt(g, b.value().data.data(), grad_of(a).data.data(), n, m, k);
        if (b.requires_grad()) gemm_tn(a.value().data.data(), g, grad_of(b).data.data(), n, k, m);
    });
}

Var add_rowwise(const Var& a, const Var& bias) {
    const std::size_t n = a.rows(), m = a.cols();
    if (bias.size() != m) throw std::invalid_argument("add_rowwise: bias width mismatch");
    Tensor out = a.value();
    for (std::size_t i = 0; i < n; ++i) simd::axpy(1.0, bias.value().data, out.row(i));
    return record(std::move(out), {a, bias}, [a, bias, n, m](Node& self) {
        if (a.requires_grad()) simd::axpy(1.0, self.grad.data, grad_of(a).data);
        if (bias.requires_grad()) {
            auto& gb = grad_of(bias).data;
            for (std::size_t i = 0; i < n; ++i) simd::axpy(1.0, self.grad.row(i), gb);
        }
        (void)m;
    });
}

Var linear(const Var& x, const Var& w, const Var& bias) {
    Var y = matmul(x, w);
    return bias.defined() ? add_rowwise(y, bias) : y;
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
    const std::size_t n = x.rows(), m = x.cols();
    if (gamma.size() != m || beta.size() != m)
        throw std::invalid_argument("layer_norm: parameter width mismatch");
    Tensor out({x.shape()});
    auto xhat = std::make_shared<std::vector<double>>(n * m);
    auto rstd = std::make_shared<std::vector<double>>(n);
    const auto& g = gamma.value().data;
    const auto& b = beta.value().data;
    for (std::size_t i = 0; i < n; ++i) {
        auto row = x.value().row(i);
        double mu = 0.0;
        for (double v : row) mu += v;
        mu /= static_cast<double>(m);
        double var = 0.0;
        for (double v : row) var += (v - mu) * (v - mu);
        var /= static_cast<double>(m);
        const double r = 1.0 / std::sqrt(var + eps);
        (*rstd)[i] = r;
        for (std::size_t j = 0; j < m; ++j) {
            const double h = (row[j] - mu) * r;
            (*xhat)[i * m + j] = h;
            out.data[i * m + j] = h * g[j] + b[j];
        }
    }
    return record(std::move(out), {x, gamma, beta}, [x, gamma, beta, xhat, rstd, n, m](Node& self) {
        const auto& gy = self.grad.data;
        if (gamma.requires_grad()) {
            auto& gg = grad_of(gamma).data;
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < m; ++j) gg[j] += gy[i * m + j] * (*xhat)[i * m + j];
        }
        if (beta.requires_grad()) {
            auto& gb = grad_of(beta).data;
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < m; ++j) gb[j] += gy[i * m + j];
        }
        if (!x.requires_grad()) return;
        auto& gx = grad_of(x).data;
        const auto& gm = gamma.value().data;
        std::vector<double> dh(m);
        for (std::size_t i = 0; i < n; ++i) {
            double mean_dh = 0.0, mean_dh_h = 0.0;
            for (std::size_t j = 0; j < m; ++j) {
                dh[j] = gy[i * m + j] * gm[j];
                mean_dh += dh[j];
                mean_dh_h += dh[j] * (*xhat)[i * m + j];
            }
            mean_dh /= static_cast<double>(m);
            mean_dh_h /= static_cast<double>(m);
            const double r = (*rstd)[i];
            for (std::size_t j = 0; j < m; ++j)
                gx[i * m + j] += r * (dh[j] - mean_dh - (*xhat)[i * m + j] * mean_dh_h);
        }
    });
}

Var softmax_rows(const Var& x) {
    const std::size_t n = x.rows(), m = x.cols();
    if (m == 0) throw std::invalid_argument("softmax over an empty axis");
    Tensor out(x.shape());
    for (std::size_t i = 0; i < n; ++i) {
        auto row = x.value().row(i);
        const double mx = *std::max_element(row.begin(), row.end());
        double z = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
            out.data[i * m + j] = std::exp(row[j] - mx);
            z += out.data[i * m + j];
        }
        for (std::size_t j = 0; j < m; ++j) out.data[i * m + j] /= z;
    }
    return record(std::move(out), {x}, [x, n, m](Node& self) {
        if (!x.requires_grad()) return;
        auto& gx = grad_of(x).data;
        for (std::size_t i = 0; i < n; ++i) {
            const double* y = self.value.data.data() + i * m;
            const double* gy = self.grad.data.data() + i * m;
            const double s = simd::kernels().dot(y, gy, m);
            for (std::size_t j = 0; j < m; ++j) gx[i * m + j] += y[j] * (gy[j] - s);
        }
    });
}

Var cross_entropy(const Var& logits, const std::vector<std::size_t>& labels) {
    const std::size_t n = logits.rows(), m = logits.cols();
    if (labels.size() != n) throw std::invalid_argument("cross_entropy: one label per row required");
    if (m == 0) throw std::invalid_argument("cross_entropy over an empty axis");
    Tensor prob(logits.shape());
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] >= m) throw std::invalid_argument("cross_entropy: label out of range");
        auto row = logits.value().row(i);
        const double mx = *std::max_element(row.begin(), row.end());
        double z = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
            prob.data[i * m + j] = std::exp(row[j] - mx);
            z += prob.data[i * m + j];
        }
        for (std::size_t j = 0; j < m; ++j) prob.data[i * m + j] /= z;
        loss -= row[labels[i]] - mx - std::log(z);
    }
    Tensor out({1});
    out.data[0] = loss / static_cast<double>(n);
    return record(std::move(out), {logits}, [logits, labels, prob = std::move(prob), n, m](Node& self) {
        auto& g = grad_of(logits).data;
        const double s = self.grad.data[0] / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j)
                g[i * m + j] += s * (prob.data[i * m + j] - (j == labels[i] ? 1.0 : 0.0));
    });
}

Var row_dot(const Var& a, const Var& b) {
    require_same_shape(a, b, "row_dot");
    const std::size_t n = a.rows();
    Tensor out({n});
    for (std::size_t i = 0; i < n; ++i) out.data[i] = simd::dot(a.value().row(i), b.value().row(i));
    return record(std::move(out), {a, b}, [a, b, n](Node& self) {
        for (std::size_t i = 0; i < n; ++i) {
            const double g = self.grad.data[i];
            if (a.requires_grad()) simd::axpy(g, b.value().row(i), grad_of(a).row(i));
            if (b.requires_grad()) simd::axpy(g, a.value().row(i), grad_of(b).row(i));
        }
    });
}

Var row_norm(const Var& a) {
    const std::size_t n = a.rows();
    Tensor out({n});
    for (std::size_t i = 0; i < n; ++i) out.data[i] = std::sqrt(simd::sum_sq(a.value().row(i)));
    return record(std::move(out), {a}, [a, n](Node& self) {
        if (!a.requires_grad()) return;
        for (std::size_t i = 0; i < n; ++i) {
            const double nrm = self.value.data[i];
            if (nrm > 0.0) simd::axpy(self.grad.data[i] / nrm, a.value().row(i), grad_of(a).row(i));
        }
    });
}

Var cosine_distance_rows(const Var& a, const Var& b) {
    require_same_shape(a, b, "cosine_distance_rows");
    const std::size_t n = a.rows();
    Tensor out({n});
    auto cache = std::make_shared<std::vector<double>>(3 * n);  // |a|, |b|, cos
    for (std::size_t i = 0; i < n; ++i) {
        const double na = std::sqrt(simd::sum_sq(a.value().row(i)));
        const double nb = std::sqrt(simd::sum_sq(b.value().row(i)));
        if (na == 0.0 || nb == 0.0) throw std::domain_error("cosine distance of a zero vector");
        const double c = simd::dot(a.value().row(i), b.value().row(i)) / (na * nb);
        (*cache)[3 * i] = na;
        (*cache)[3 * i + 1] = nb;
        (*cache)[3 * i + 2] = c;
        out.data[i] = 1.0 - c;
    }
    return record(std::move(out), {a, b}, [a, b, n, cache](Node& self) {
        for (std::size_t i = 0; i < n; ++i) {
            const double g = -self.grad.data[i];  // d(1-c) = -dc
            const double na = (*cache)[3 * i], nb = (*cache)[3 * i + 1], c = (*cache)[3 * i + 2];
            if (a.requires_grad()) {
                auto ga = grad_of(a).row(i);
                simd::axpy(g / (na * nb), b.value().row(i), ga);
                simd::axpy(-g * c / (na * na), a.value().row(i), ga);
            }
            if (b.requires_grad()) {
                auto gb = grad_of(b).row(i);
                simd::axpy(g / (na * nb), a.value().row(i), gb);
                simd::axpy(-g * c / (nb * nb), b.value().row(i), gb);
            }
        }
    });
}

Var normalize_rows(const Var& a) {
    const std::size_t n = a.rows(), m = a.cols();
    Tensor out = a.value();
    auto norms = std::make_shared<std::vector<double>>(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double nrm = std::sqrt(simd::sum_sq(out.row(i)));
        if (nrm == 0.0) throw std::domain_error("cannot normalize a zero vector");
        (*norms)[i] = nrm;
        for (double& v : out.row(i)) v /= nrm;
    }
    return record(std::move(out), {a}, [a, n, m, norms](Node& self) {
        if (!a.requires_grad()) return;
        for (std::size_t i = 0; i < n; ++i) {
            auto y = self.value.row(i);
            auto gy = self.grad.row(i);
            const double s = simd::dot(y, gy);
            auto ga = grad_of(a).row(i);
            for (std::size_t j = 0; j < m; ++j) ga[j] += (gy[j] - y[j] * s) / (*norms)[i];
        }
    });
}

// ---- shape -----------------------------------------------------------------

Var reshape(const Var& a, Shape shape) {
    if (shape_numel(shape) != a.size())
        throw std::invalid_argument("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
    Tensor out(std::move(shape), a.value().data);
    return record(std::move(out), {a}, [a](Node& self) {
        if (a.requires_grad()) simd::axpy(1.0, self.grad.data, grad_of(a).data);
    });
}

Var transpose(const Var& a) {
    const std::size_t n = a.rows(), m = a.cols();
    Tensor out({m, n});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) out.data[j * n + i] = a.value().data[i * m + j];
    return record(std::move(out), {a}, [a, n, m](Node& self) {
        auto& g = grad_of(a).data;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) g[i * m + j] += self.grad.data[j * n + i];
    });
}

Var gather_rows(const Var& a, std::vector<std::size_t> index) {
    const std::size_t m = a.cols();
    Shape shape = a.shape();
    shape[0] = index.size();
    Tensor out(shape);
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] >= a.rows()) throw std::out_of_range("gather_rows: index out of range");
        std::copy_n(a.value().data.begin() + index[i] * m, m, out.data.begin() + i * m);
    }
    return record(std::move(out), {a}, [a, index = std::move(index)](Node& self) {
        if (!a.requires_grad()) return;
        Tensor& ga = grad_of(a);
        for (std::size_t i = 0; i < index.size(); ++i) simd::axpy(1.0, self.grad.row(i), ga.row(index[i]));
    });
}

Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
    const std::size_t m = parts[0].cols();
    std::size_t n = 0;
    for (const Var& p : parts) {
        if (p.cols() != m) throw std::invalid_argument("concat_rows: width mismatch");
        n += p.rows();
    }
    Shape shape = parts[0].shape();
    shape[0] = n;
    Tensor out(shape);
    std::size_t off = 0;
    for (const Var& p : parts) {
        std::copy(p.value().data.begin(), p.value().data.end(), out.data.begin() + off);
        off += p.size();
    }
    return record_many(std::move(out), parts, [parts](Node& self) {
        std::size_t off = 0;
        for (const Var& p : parts) {
            if (p.requires_grad())
                simd::kernels().axpy(1.0, self.grad.data.data() + off, grad_of(p).data.data(), p.size());
            off += p.size();
        }
    });
}

Var slice_cols(const Var& a, std::size_t begin, std::size_t end) {
    const std::size_t n = a.rows(), m = a.cols();
    if (begin > end || end > m) throw std::out_of_range("slice_cols: bad range");
    const std::size_t w = end - begin;
    Tensor out({n, w});
    for (std::size_t i = 0; i < n; ++i)
        std::copy_n(a.value().data.begin() + i * m + begin, w, out.data.begin() + i * w);
    return record(std::move(out), {a}, [a, n, m, begin, w](Node& self) {
        if (!a.requires_grad()) return;
        auto& ga = grad_of(a).data;
        for (std::size_t i = 0; i < n; ++i)
            simd::kernels().axpy(1.0, self.grad.data.data() + i * w, ga.data() + i * m + begin, w);
    });
}

// ---- attention -------------------------------------------------------------

Var multi_head_attention(const Var& qkv, const std::vector<std::size_t>& lengths,
                         std::size_t heads, bool causal) {
    const std::size_t n = qkv.rows();
    const std::size_t w3 = qkv.cols();
    if (w3 % 3 != 0 || (w3 / 3) % heads != 0)
        throw std::invalid_argument("attention: width not divisible by heads");
    const std::size_t w = w3 / 3, hd = w / heads;
    std::size_t total = 0;
    for (std::size_t l : lengths) total += l;
    if (total != n) throw std::invalid_argument("attention: sequence lengths do not cover input");
    const double inv = 1.0 / std::sqrt(static_cast<double>(hd));

    // Softmax probabilities per (sequence, head), each L x L.
    auto probs = std::make_shared<std::vector<double>>();
    {
        std::size_t need = 0;
        for (std::size_t l : lengths) need += heads * l * l;
        probs->assign(need, 0.0);
    }
    const double* x = qkv.value().data.data();
    Tensor out({n, w});
    std::size_t off = 0, poff = 0;
    for (std::size_t len : lengths) {
        for (std::size_t h = 0; h < heads; ++h) {
            double* p = probs->data() + poff;
            for (std::size_t i = 0; i < len; ++i) {
                const double* qi = x + (off + i) * w3 + h * hd;
                const std::size_t lim = causal ? i + 1 : len;
                double mx = -1e300;
                for (std::size_t j = 0; j < lim; ++j) {
                    const double* kj = x + (off + j) * w3 + w + h * hd;
                    p[i * len + j] = simd::kernels().dot(qi, kj, hd) * inv;
                    mx = std::max(mx, p[i * len + j]);
                }
                double z = 0.0;
                for (std::size_t j = 0; j < lim; ++j) {
                    p[i * len + j] = std::exp(p[i * len + j] - mx);
                    z += p[i * len + j];
                }
                double* oi = out.data.data() + (off + i) * w + h * hd;
                for (std::size_t j = 0; j < lim; ++j) {
                    p[i * len + j] /= z;
                    simd::kernels().axpy(p[i * len + j], x + (off + j) * w3 + 2 * w + h * hd, oi, hd);
                }
            }
            poff += len * len;
        }
        off += len;
    }

    return record(std::move(out), {qkv}, [qkv, lengths, heads, causal, probs, w, w3, hd, inv](Node& self) {
        if (!qkv.requires_grad()) return;
        const double* x = qkv.value().data.data();
        double* gx = grad_of(qkv).data.data();
        const double* go = self.grad.data.data();
        std::vector<double> dp;
        std::size_t off = 0, poff = 0;
        for (std::size_t len : lengths) {
            dp.assign(len, 0.0);
            for (std::size_t h = 0; h < heads; ++h) {
                const double* p = probs->data() + poff;
                for (std::size_t i = 0; i < len; ++i) {
                    const std::size_t lim = causal ? i + 1 : len;
                    const double* goi = go + (off + i) * w + h * hd;
                    double s = 0.0;
                    for (std::size_t j = 0; j < lim; ++j) {
                        const double* vj = x + (off + j) * w3 + 2 * w + h * hd;
                        // dV_j += P_ij dO_i
                        simd::kernels().axpy(p[i * len + j], goi, gx + (off + j) * w3 + 2 * w + h * hd, hd);
                        dp[j] = simd::kernels().dot(goi, vj, hd);
                        s += p[i * len + j] * dp[j];
                    }
                    const double* qi = x + (off + i) * w3 + h * hd;
                    double* gqi = gx + (off + i) * w3 + h * hd;
                    for (std::size_t j = 0; j < lim; ++j) {
                        const double ds = p[i * len + j] * (dp[j] - s) * inv;
                        if (ds == 0.0) continue;
                        const double* kj = x + (off + j) * w3 + w + h * hd;
                        simd::kernels().axpy(ds, kj, gqi, hd);
                        simd::kernels().axpy(ds, qi, gx + (off + j) * w3 + w + h * hd, hd);
                    }
                }
                poff += len * len;
            }
            off += len;
        }
    });
}

Var batched_patch_dot(const Var& patches, const Var& query, std::size_t tokens) {
    const std::size_t b = query.rows(), d = query.cols();
    if (tokens == 0) throw std::invalid_argument("region attention over zero patches");
    if (patches.rows() != b * tokens || patches.cols() != d)
        throw std::invalid_argument("batched_patch_dot: shape mismatch " + shape_str(patches.shape()) +
                                    " vs query " + shape_str(query.shape()));
    Tensor out({b, tokens});
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t t = 0; t < tokens; ++t)
            out.data[i * tokens + t] = simd::dot(patches.value().row(i * tokens + t), query.value().row(i));
    return record(std::move(out), {patches, query}, [patches, query, b, tokens](Node& self) {
        for (std::size_t i = 0; i < b; ++i)
            for (std::size_t t = 0; t < tokens; ++t) {
                const double g = self.grad.data[i * tokens + t];
                if (patches.requires_grad())
                    simd::axpy(g, query.value().row(i), grad_of(patches).row(i * tokens + t));
                if (query.requires_grad())
                    simd::axpy(g, patches.value().row(i * tokens + t), grad_of(query).row(i));
            }
    });
}

Var batched_weighted_sum(const Var& weights, const Var& patches) {
    const std::size_t b = weights.rows(), tokens = weights.cols(), d = patches.cols();
    if (patches.rows() != b * tokens) throw std::invalid_argument("batched_weighted_sum: shape mismatch");
    Tensor out({b, d});
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t t = 0; t < tokens; ++t)
            simd::axpy(weights.value().data[i * tokens + t], patches.value().row(i * tokens + t), out.row(i));
    return record(std::move(out), {weights, patches}, [weights, patches, b, tokens](Node& self) {
        for (std::size_t i = 0; i < b; ++i)
            for (std::size_t t = 0; t < tokens; ++t) {
                if (weights.requires_grad())
                    grad_of(weights).data[i * tokens + t] +=
                        simd::dot(self.grad.row(i), patches.value().row(i * tokens + t));
                if (patches.requires_grad())
                    simd::axpy(weights.value().data[i * tokens + t], self.grad.row(i),
                               grad_of(patches).row(i * tokens + t));
            }
    });
}

// ---- images ----------------------------------------------------------------

namespace {

// cols: [C*9 x H*W] patch matrix for one image (zero padding 1).
void im2col3x3(const double* img, std::size_t c, std::size_t h, std::size_t w, double* cols) {
    const std::size_t hw = h * w;
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t ky = 0; ky < 3; ++ky)
            for (std::size_t kx = 0; kx < 3; ++kx) {
                double* dst = cols + ((ch * 3 + ky) * 3 + kx) * hw;
                for (std::size_t y = 0; y < h; ++y) {
                    const long sy = static_cast<long>(y) + static_cast<long>(ky) - 1;
                    for (std::size_t xx = 0; xx < w; ++xx) {
                        const long sx = static_cast<long>(xx) + static_cast<long>(kx) - 1;
                        dst[y * w + xx] = (sy < 0 || sx < 0 || sy >= static_cast<long>(h) || sx >= static_cast<long>(w))
                                              ? 0.0
                                              : img[(ch * h + static_cast<std::size_t>(sy)) * w + static_cast<std::size_t>(sx)];
                    }
                }
            }
}

void col2im3x3(const double* cols, std::size_t c, std::size_t h, std::size_t w, double* img) {
    const std::size_t hw = h * w;
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t ky = 0; ky < 3; ++ky)
            for (std::size_t kx = 0; kx < 3; ++kx) {
                const double* src = cols + ((ch * 3 + ky) * 3 + kx) * hw;
                for (std::size_t y = 0; y < h; ++y) {
                    const long sy = static_cast<long>(y) + static_cast<long>(ky) - 1;
                    if (sy < 0 || sy >= static_cast<long>(h)) continue;
                    for (std::size_t xx = 0; xx < w; ++xx) {
                        const long sx = static_cast<long>(xx) + static_cast<long>(kx) - 1;
                        if (sx < 0 || sx >= static_cast<long>(w)) continue;
                        img[(ch * h + static_cast<std::size_t>(sy)) * w + static_cast<std::size_t>(sx)] += src[y * w + xx];
                    }
                }
            }
}

}  // namespace

Var conv3x3(const Var& x, const Var& w, const Var& b) {
    const Shape& xs = x.shape();
    const Shape& ws = w.shape();
    if (xs.size() != 4 || ws.size() != 4 || ws[1] != xs[1] || ws[2] != 3 || ws[3] != 3 || b.size() != ws[0])
        throw std::invalid_argument("conv3x3: shape mismatch " + shape_str(xs) + " * " + shape_str(ws));
    const std::size_t batch = xs[0], c = xs[1], h = xs[2], wd = xs[3], co = ws[0];
    const std::size_t hw = h * wd, kk = c * 9;
    Tensor out({batch, co, h, wd});
    auto cols = std::make_shared<std::vector<double>>(batch * kk * hw);
    for (std::size_t i = 0; i < batch; ++i) {
        double* ci = cols->data() + i * kk * hw;
        im2col3x3(x.value().data.data() + i * c * hw, c, h, wd, ci);
        double* oi = out.data.data() + i * co * hw;
        for (std::size_t o = 0; o < co; ++o)
            for (std::size_t p = 0; p < hw; ++p) oi[o * hw + p] = b.value().data[o];
        simd::kernels().gemm(w.value().data.data(), ci, oi, co, kk, hw);
    }
    return record(std::move(out), {x, w, b}, [x, w, b, cols, batch, c, h, wd, co, hw, kk](Node& self) {
        std::vector<double> dcols;
        for (std::size_t i = 0; i < batch; ++i) {
            const double* gi = self.grad.data.data() + i * co * hw;
            const double* ci = cols->data() + i * kk * hw;
            if (b.requires_grad()) {
                auto& gb = grad_of(b).data;
                for (std::size_t o = 0; o < co; ++o)
                    for (std::size_t p = 0; p < hw; ++p) gb[o] += gi[o * hw + p];
            }
            if (w.requires_grad()) gemm_nt(gi, ci, grad_of(w).data.data(), co, hw, kk);
            if (x.requires_grad()) {
                dcols.assign(kk * hw, 0.0);
                gemm_tn(w.value().data.data(), gi, dcols.data(), co, kk, hw);
                col2im3x3(dcols.data(), c, h, wd, grad_of(x).data.data() + i * c * hw);
            }
        }
    });
}

Var upsample2x(const Var& x) {
    const Shape& xs = x.shape();
    if (xs.size() != 4) throw std::invalid_argument("upsample2x expects [B x C x H x W]");
    const std::size_t planes = xs[0] * xs[1], h = xs[2], w = xs[3];
    Tensor out({xs[0], xs[1], 2 * h, 2 * w});
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t y = 0; y < 2 * h; ++y)
            for (std::size_t xx = 0; xx < 2 * w; ++xx)
                out.data[(p * 2 * h + y) * 2 * w + xx] = x.value().data[(p * h + y / 2) * w + xx / 2];
    return record(std::move(out), {x}, [x, planes, h, w](Node& self) {
        if (!x.requires_grad()) return;
        auto& gx = grad_of(x).data;
        for (std::size_t p = 0; p < planes; ++p)
            for (std::size_t y = 0; y < 2 * h; ++y)
                for (std::size_t xx = 0; xx < 2 * w; ++xx)
                    gx[(p * h + y / 2) * w + xx / 2] += self.grad.data[(p * 2 * h + y) * 2 * w + xx];
    });
}

}  // namespace duet::ag
