#include "apl/autodiff.hpp"

#include <cmath>
#include <unordered_set>
#include <utility>

namespace apl::ag {

namespace {

NodePtr make_node(const char* op, Tensor value, std::vector<NodePtr> parents,
                  std::function<void(Node&)> bp) {
    require_finite(op, value);
    auto n = std::make_shared<Node>();
    n->op = op;
    n->value = std::move(value);
    n->parents = std::move(parents);
    for (const auto& p : n->parents) {
        if (p->needs_grad) {
            n->needs_grad = true;
            break;
        }
    }
    if (n->needs_grad) n->backprop = std::move(bp);
    return n;
}

// accumulate g into parent's grad if the parent participates in the sweep
void acc(const NodePtr& p, const Tensor& g) {
    if (p->needs_grad) p->ensure_grad() += g;
}

double log_sigmoid_scalar(double t) {
    // -log(1 + e^-t) for t >= 0, t - log(1 + e^t) otherwise
    if (t >= 0.0) return -std::log1p(std::exp(-t));
    return t - std::log1p(std::exp(t));
}

double sigmoid_scalar(double t) {
    if (t >= 0.0) {
        double e = std::exp(-t);
        return 1.0 / (1.0 + e);
    }
    double e = std::exp(t);
    return e / (1.0 + e);
}

} // namespace

Tensor& Node::ensure_grad() {
    if (!grad_ready) {
        grad = Tensor::Zero(value.rows(), value.cols());
        grad_ready = true;
    }
    return grad;
}

NodePtr leaf(Tensor value, bool requires_grad) {
    require_finite("leaf", value);
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->needs_grad = requires_grad;
    return n;
}

NodePtr constant(Tensor value) { return leaf(std::move(value), false); }

NodePtr constant(double value) { return leaf(scalar(value), false); }

NodePtr add(const NodePtr& a, const NodePtr& b) {
    require_same_shape("add", a->value, b->value);
    return make_node("add", a->value + b->value, {a, b}, [](Node& n) {
        acc(n.parents[0], n.grad);
        acc(n.parents[1], n.grad);
    });
}

NodePtr sub(const NodePtr& a, const NodePtr& b) {
    require_same_shape("sub", a->value, b->value);
    return make_node("sub", a->value - b->value, {a, b}, [](Node& n) {
        acc(n.parents[0], n.grad);
        if (n.parents[1]->needs_grad) n.parents[1]->ensure_grad() -= n.grad;
    });
}

NodePtr mul(const NodePtr& a, const NodePtr& b) {
    require_same_shape("mul", a->value, b->value);
    return make_node("mul", a->value.cwiseProduct(b->value), {a, b}, [](Node& n) {
        acc(n.parents[0], n.grad.cwiseProduct(n.parents[1]->value));
        acc(n.parents[1], n.grad.cwiseProduct(n.parents[0]->value));
    });
}

NodePtr matmul(const NodePtr& a, const NodePtr& b) {
    if (a->value.cols() != b->value.rows()) {
        throw ShapeError("matmul: inner dimensions differ, " + shape_str(a->value) + " vs " +
                         shape_str(b->value));
    }
    return make_node("matmul", a->value * b->value, {a, b}, [](Node& n) {
        acc(n.parents[0], n.grad * n.parents[1]->value.transpose());
        acc(n.parents[1], n.parents[0]->value.transpose() * n.grad);
    });
}

NodePtr scalar_mul(const NodePtr& a, double c) {
    return make_node("scalar_mul", a->value * c, {a}, [c](Node& n) {
        acc(n.parents[0], n.grad * c);
    });
}

NodePtr add_n(const std::vector<NodePtr>& xs) {
    if (xs.empty()) throw GraphError("add_n: empty operand list");
    Tensor v = xs[0]->value;
    for (size_t i = 1; i < xs.size(); ++i) {
        require_same_shape("add_n", xs[0]->value, xs[i]->value);
        v += xs[i]->value;
    }
    return make_node("add_n", std::move(v), xs, [](Node& n) {
        for (auto& p : n.parents) acc(p, n.grad);
    });
}

NodePtr transpose(const NodePtr& a) {
    return make_node("transpose", a->value.transpose(), {a}, [](Node& n) {
        acc(n.parents[0], n.grad.transpose());
    });
}

NodePtr slice_cols(const NodePtr& a, int col0, int ncols) {
    if (col0 < 0 || ncols <= 0 || col0 + ncols > a->value.cols()) {
        throw ShapeError("slice_cols: [" + std::to_string(col0) + ", " +
                         std::to_string(col0 + ncols) + ") out of " + shape_str(a->value));
    }
    return make_node("slice_cols", a->value.middleCols(col0, ncols), {a},
                     [col0, ncols](Node& n) {
                         if (n.parents[0]->needs_grad) {
                             n.parents[0]->ensure_grad().middleCols(col0, ncols) += n.grad;
                         }
                     });
}

NodePtr concat_cols(const std::vector<NodePtr>& parts) {
    if (parts.empty()) throw GraphError("concat_cols: empty operand list");
    Eigen::Index rows = parts[0]->value.rows();
    Eigen::Index cols = 0;
    for (const auto& p : parts) {
        if (p->value.rows() != rows) {
            throw ShapeError("concat_cols: row mismatch " + shape_str(parts[0]->value) + " vs " +
                             shape_str(p->value));
        }
        cols += p->value.cols();
    }
    Tensor v(rows, cols);
    Eigen::Index off = 0;
    for (const auto& p : parts) {
        v.middleCols(off, p->value.cols()) = p->value;
        off += p->value.cols();
    }
    return make_node("concat_cols", std::move(v), parts, [](Node& n) {
        Eigen::Index off = 0;
        for (auto& p : n.parents) {
            if (p->needs_grad) p->ensure_grad() += n.grad.middleCols(off, p->value.cols());
            off += p->value.cols();
        }
    });
}

NodePtr embedding_gather(const NodePtr& table, const std::vector<int>& ids) {
    if (ids.empty()) throw ShapeError("embedding_gather: empty id list");
    for (int id : ids) {
        if (id < 0 || id >= table->value.rows()) {
            throw ShapeError("embedding_gather: id " + std::to_string(id) + " out of " +
                             shape_str(table->value));
        }
    }
    Tensor v(static_cast<Eigen::Index>(ids.size()), table->value.cols());
    for (size_t t = 0; t < ids.size(); ++t) v.row(static_cast<Eigen::Index>(t)) = table->value.row(ids[t]);
    return make_node("embedding_gather", std::move(v), {table}, [ids](Node& n) {
        if (!n.parents[0]->needs_grad) return;
        Tensor& g = n.parents[0]->ensure_grad();
        for (size_t t = 0; t < ids.size(); ++t) g.row(ids[t]) += n.grad.row(static_cast<Eigen::Index>(t));
    });
}

NodePtr gather_logprob(const NodePtr& logprobs, const std::vector<int>& ids, int row0) {
    if (ids.empty()) throw ShapeError("gather_logprob: empty id list");
    Eigen::Index rows = logprobs->value.rows(), cols = logprobs->value.cols();
    if (row0 < 0 || row0 + static_cast<Eigen::Index>(ids.size()) > rows) {
        throw ShapeError("gather_logprob: rows [" + std::to_string(row0) + ", " +
                         std::to_string(row0 + ids.size()) + ") out of " + shape_str(logprobs->value));
    }
    for (int id : ids) {
        if (id < 0 || id >= cols) {
            throw ShapeError("gather_logprob: id " + std::to_string(id) + " out of " +
                             shape_str(logprobs->value));
        }
    }
    Tensor v(1, static_cast<Eigen::Index>(ids.size()));
    for (size_t t = 0; t < ids.size(); ++t) v(0, static_cast<Eigen::Index>(t)) = logprobs->value(row0 + static_cast<Eigen::Index>(t), ids[t]);
    return make_node("gather_logprob", std::move(v), {logprobs}, [ids, row0](Node& n) {
        if (!n.parents[0]->needs_grad) return;
        Tensor& g = n.parents[0]->ensure_grad();
        for (size_t t = 0; t < ids.size(); ++t) {
            g(row0 + static_cast<Eigen::Index>(t), ids[t]) += n.grad(0, static_cast<Eigen::Index>(t));
        }
    });
}

NodePtr gelu(const NodePtr& a) {
    const double inv_sqrt2 = 0.7071067811865475244;
    const double inv_sqrt2pi = 0.3989422804014326779;
    Tensor v = a->value.unaryExpr([&](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); });
    return make_node("gelu", std::move(v), {a}, [inv_sqrt2, inv_sqrt2pi](Node& n) {
        const Tensor& x = n.parents[0]->value;
        Tensor d = x.unaryExpr([&](double t) {
            return 0.5 * (1.0 + std::erf(t * inv_sqrt2)) + t * inv_sqrt2pi * std::exp(-0.5 * t * t);
        });
        acc(n.parents[0], n.grad.cwiseProduct(d));
    });
}

NodePtr sigmoid(const NodePtr& a) {
    Tensor v = a->value.unaryExpr([](double x) { return sigmoid_scalar(x); });
    return make_node("sigmoid", std::move(v), {a}, [](Node& n) {
        const Tensor& s = n.value;
        acc(n.parents[0], n.grad.cwiseProduct(s.cwiseProduct((1.0 - s.array()).matrix())));
    });
}

NodePtr log_sigmoid(const NodePtr& a) {
    Tensor v = a->value.unaryExpr([](double x) { return log_sigmoid_scalar(x); });
    return make_node("log_sigmoid", std::move(v), {a}, [](Node& n) {
        // d/dt log sigma(t) = sigma(-t)
        Tensor d = n.parents[0]->value.unaryExpr([](double x) { return sigmoid_scalar(-x); });
        acc(n.parents[0], n.grad.cwiseProduct(d));
    });
}

NodePtr max_with_zero(const NodePtr& a) {
    Tensor v = a->value.cwiseMax(0.0);
    return make_node("max_with_zero", std::move(v), {a}, [](Node& n) {
        Tensor d = (n.parents[0]->value.array() > 0.0).cast<double>().matrix();
        acc(n.parents[0], n.grad.cwiseProduct(d));
    });
}

NodePtr layer_norm(const NodePtr& x, const NodePtr& gamma, const NodePtr& beta, double eps) {
    Eigen::Index cols = x->value.cols();
    if (gamma->value.rows() != 1 || gamma->value.cols() != cols) {
        throw ShapeError("layer_norm: gamma " + shape_str(gamma->value) + " vs x " + shape_str(x->value));
    }
    if (beta->value.rows() != 1 || beta->value.cols() != cols) {
        throw ShapeError("layer_norm: beta " + shape_str(beta->value) + " vs x " + shape_str(x->value));
    }
    Eigen::Index rows = x->value.rows();
    Tensor xhat(rows, cols);
    Tensor inv_std(rows, 1);
    for (Eigen::Index i = 0; i < rows; ++i) {
        double mu = x->value.row(i).mean();
        double var = (x->value.row(i).array() - mu).square().mean();
        double s = 1.0 / std::sqrt(var + eps);
        inv_std(i, 0) = s;
        xhat.row(i) = (x->value.row(i).array() - mu) * s;
    }
    Tensor v(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
        v.row(i) = xhat.row(i).cwiseProduct(gamma->value.row(0)) + beta->value.row(0);
    }
    return make_node("layer_norm", std::move(v), {x, gamma, beta},
                     [xhat, inv_std](Node& n) {
                         const NodePtr& xn = n.parents[0];
                         const NodePtr& gn = n.parents[1];
                         const NodePtr& bn = n.parents[2];
                         Eigen::Index rows = n.grad.rows(), cols = n.grad.cols();
                         if (gn->needs_grad) {
                             gn->ensure_grad() += (n.grad.cwiseProduct(xhat)).colwise().sum();
                         }
                         if (bn->needs_grad) {
                             bn->ensure_grad() += n.grad.colwise().sum();
                         }
                         if (xn->needs_grad) {
                             Tensor& gx = xn->ensure_grad();
                             for (Eigen::Index i = 0; i < rows; ++i) {
                                 Eigen::Array<double, 1, Eigen::Dynamic> a =
                                     n.grad.row(i).cwiseProduct(gn->value.row(0)).array();
                                 double m1 = a.mean();
                                 double m2 = (a * xhat.row(i).array()).mean();
                                 gx.row(i) += ((a - m1 - xhat.row(i).array() * m2) * inv_std(i, 0))
                                                  .matrix();
                                 (void)cols;
                             }
                         }
                     });
}

NodePtr softmax_logits_to_logprobs(const NodePtr& logits, int axis) {
    if (axis == 0) {
        return transpose(softmax_logits_to_logprobs(transpose(logits), 1));
    }
    if (axis != 1) throw ShapeError("softmax_logits_to_logprobs: axis must be 0 or 1");
    Eigen::Index rows = logits->value.rows(), cols = logits->value.cols();
    Tensor v(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
        double m = logits->value.row(i).maxCoeff();
        double lse = m + std::log((logits->value.row(i).array() - m).exp().sum());
        v.row(i) = (logits->value.row(i).array() - lse).matrix();
    }
    return make_node("softmax_logits_to_logprobs", std::move(v), {logits}, [](Node& n) {
        if (!n.parents[0]->needs_grad) return;
        Tensor& g = n.parents[0]->ensure_grad();
        for (Eigen::Index i = 0; i < n.grad.rows(); ++i) {
            double gsum = n.grad.row(i).sum();
            g.row(i) += (n.grad.row(i).array() - n.value.row(i).array().exp() * gsum).matrix();
        }
    });
}

NodePtr causal_softmax(const NodePtr& scores) {
    Eigen::Index n_ = scores->value.rows();
    if (scores->value.cols() != n_) {
        throw ShapeError("causal_softmax: expected square scores, got " + shape_str(scores->value));
    }
    Tensor v = Tensor::Zero(n_, n_);
    for (Eigen::Index i = 0; i < n_; ++i) {
        double m = scores->value.row(i).head(i + 1).maxCoeff();
        Eigen::Array<double, 1, Eigen::Dynamic> e =
            (scores->value.row(i).head(i + 1).array() - m).exp();
        v.row(i).head(i + 1) = (e / e.sum()).matrix();
    }
    return make_node("causal_softmax", std::move(v), {scores}, [](Node& n) {
        if (!n.parents[0]->needs_grad) return;
        Tensor& g = n.parents[0]->ensure_grad();
        for (Eigen::Index i = 0; i < n.grad.rows(); ++i) {
            // rows are probability vectors; entries past the diagonal are zero
            double dot = n.grad.row(i).cwiseProduct(n.value.row(i)).sum();
            g.row(i) += n.value.row(i).cwiseProduct((n.grad.row(i).array() - dot).matrix());
        }
    });
}

NodePtr sum(const NodePtr& a) {
    return make_node("sum", scalar(a->value.sum()), {a}, [](Node& n) {
        if (!n.parents[0]->needs_grad) return;
        n.parents[0]->ensure_grad().array() += n.grad(0, 0);
    });
}

NodePtr mean(const NodePtr& a) {
    double inv = 1.0 / static_cast<double>(a->value.size());
    return make_node("mean", scalar(a->value.sum() * inv), {a}, [inv](Node& n) {
        if (!n.parents[0]->needs_grad) return;
        n.parents[0]->ensure_grad().array() += n.grad(0, 0) * inv;
    });
}

void backward(const NodePtr& root) {
    if (!is_scalar(root->value)) {
        throw GraphError("backward: root must be scalar, got " + shape_str(root->value));
    }
    if (root->backward_done) {
        throw GraphError("backward: already ran on this root; rebuild the graph to run again");
    }
    root->backward_done = true;
    if (!root->needs_grad) return;

    // iterative DFS postorder; reversed it is a valid topological order
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(root.get(), 0);
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [n, i] = stack.back();
        if (i < n->parents.size()) {
            Node* p = n->parents[i].get();
            ++i;
            if (p->needs_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    root->ensure_grad()(0, 0) = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backprop && n->grad_ready) n->backprop(*n);
    }
}

} // namespace apl::ag
