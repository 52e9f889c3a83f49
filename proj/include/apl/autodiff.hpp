#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "apl/tensor.hpp"

namespace apl::ag {

struct Node;
using NodePtr = std::shared_ptr<Node>;

// One value in a reverse-mode computation graph. The backprop closure reads
// this node's grad and accumulates into the parents' grads.
struct Node {
    Tensor value;
    Tensor grad;
    std::vector<NodePtr> parents;
    std::function<void(Node&)> backprop;
    const char* op = "leaf";
    bool needs_grad = false;   // true iff some leaf below requires grad
    bool grad_ready = false;   // grad allocated and zeroed
    bool backward_done = false;

    Tensor& ensure_grad();
};

NodePtr leaf(Tensor value, bool requires_grad = true);
NodePtr constant(Tensor value);
NodePtr constant(double value);

inline double scalar_value(const NodePtr& n) { return n->value(0, 0); }

// elementwise / linear algebra
NodePtr add(const NodePtr& a, const NodePtr& b);
NodePtr sub(const NodePtr& a, const NodePtr& b);
NodePtr mul(const NodePtr& a, const NodePtr& b);
NodePtr matmul(const NodePtr& a, const NodePtr& b);
NodePtr scalar_mul(const NodePtr& a, double c);
NodePtr add_n(const std::vector<NodePtr>& xs);

// structure
NodePtr transpose(const NodePtr& a);
NodePtr slice_cols(const NodePtr& a, int col0, int ncols);
NodePtr concat_cols(const std::vector<NodePtr>& parts);
NodePtr embedding_gather(const NodePtr& table, const std::vector<int>& ids);
// picked(0, t) = logprobs(row0 + t, ids[t])
NodePtr gather_logprob(const NodePtr& logprobs, const std::vector<int>& ids, int row0 = 0);

// nonlinearities
NodePtr gelu(const NodePtr& a);
NodePtr sigmoid(const NodePtr& a);
NodePtr log_sigmoid(const NodePtr& a);
NodePtr max_with_zero(const NodePtr& a);
NodePtr layer_norm(const NodePtr& x, const NodePtr& gamma, const NodePtr& beta, double eps = 1e-5);

// Numerically stable log-softmax (max subtraction). axis 1 normalizes each
// row over its columns; axis 0 each column over its rows.
NodePtr softmax_logits_to_logprobs(const NodePtr& logits, int axis = 1);
// Row i is a softmax over columns 0..i; columns above the diagonal are zero.
NodePtr causal_softmax(const NodePtr& scores);

// reductions
NodePtr sum(const NodePtr& a);
NodePtr mean(const NodePtr& a);

// Reverse-mode sweep from a scalar root. Leaf grads for this graph are
// populated exactly once; calling backward twice on the same root throws.
void backward(const NodePtr& root);

} // namespace apl::ag
