#include "apl/gradcheck.hpp"

#include <cmath>

#include "apl/datagen.hpp"
#include "apl/lm.hpp"
#include "apl/losses.hpp"
#include "apl/util.hpp"

namespace apl::gradcheck {

double max_rel_grad_err(const GraphBuilder& build, const std::vector<Tensor>& inputs) {
    std::vector<ag::NodePtr> leaves;
    leaves.reserve(inputs.size());
    for (const auto& t : inputs) leaves.push_back(ag::leaf(t, true));
    ag::NodePtr root = build(leaves);
    ag::backward(root);

    auto eval_at = [&](const std::vector<Tensor>& pts) {
        std::vector<ag::NodePtr> consts;
        consts.reserve(pts.size());
        for (const auto& t : pts) consts.push_back(ag::leaf(t, false));
        return ag::scalar_value(build(consts));
    };

    double worst = 0.0;
    std::vector<Tensor> probe = inputs;
    for (size_t i = 0; i < inputs.size(); ++i) {
        for (Eigen::Index j = 0; j < inputs[i].size(); ++j) {
            double x = inputs[i].data()[j];
            double h = 1e-4 * std::max(1.0, std::abs(x));
            probe[i].data()[j] = x + h;
            double fp = eval_at(probe);
            probe[i].data()[j] = x - h;
            double fm = eval_at(probe);
            probe[i].data()[j] = x;
            double fd = (fp - fm) / (2.0 * h);
            double ad = leaves[i]->grad_ready ? leaves[i]->grad.data()[j] : 0.0;
            double err = std::abs(ad - fd) / std::max(1.0, std::abs(fd));
            worst = std::max(worst, err);
        }
    }
    return worst;
}

namespace {

Tensor random_tensor(Rng& rng, Eigen::Index rows, Eigen::Index cols, double scale = 1.0) {
    Tensor t(rows, cols);
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = scale * rng.normal();
    return t;
}

// random values bounded away from zero, for ops with a kink at the origin
Tensor random_tensor_off_origin(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
    Tensor t(rows, cols);
    for (Eigen::Index i = 0; i < t.size(); ++i) {
        double v = rng.normal();
        double sign = v >= 0.0 ? 1.0 : -1.0;
        t.data()[i] = sign * (0.05 + std::abs(v));
    }
    return t;
}

} // namespace

std::vector<CheckResult> check_ops(uint64_t seed, int rounds) {
    std::vector<CheckResult> out;
    auto run = [&](const std::string& name, auto make_inputs, const GraphBuilder& build) {
        double worst = 0.0;
        for (int r = 0; r < rounds; ++r) {
            Rng rng(derive_seed(seed, fnv1a64(name.data(), name.size()) + static_cast<uint64_t>(r)));
            worst = std::max(worst, max_rel_grad_err(build, make_inputs(rng)));
        }
        out.push_back({name, worst});
    };

    using V = std::vector<ag::NodePtr>;
    auto two34 = [](Rng& rng) {
        return std::vector<Tensor>{random_tensor(rng, 3, 4), random_tensor(rng, 3, 4)};
    };
    auto one34 = [](Rng& rng) { return std::vector<Tensor>{random_tensor(rng, 3, 4)}; };

    run("add", two34, [](const V& l) { return ag::sum(ag::add(l[0], l[1])); });
    run("sub", two34, [](const V& l) { return ag::sum(ag::sub(l[0], l[1])); });
    run("mul", two34, [](const V& l) { return ag::sum(ag::mul(l[0], l[1])); });
    run("scalar_mul", one34, [](const V& l) { return ag::sum(ag::scalar_mul(l[0], -1.7)); });
    run("matmul",
        [](Rng& rng) {
            return std::vector<Tensor>{random_tensor(rng, 3, 4), random_tensor(rng, 4, 2)};
        },
        [](const V& l) { return ag::sum(ag::matmul(l[0], l[1])); });
    run("add_n",
        [](Rng& rng) {
            return std::vector<Tensor>{random_tensor(rng, 2, 3), random_tensor(rng, 2, 3),
                                       random_tensor(rng, 2, 3)};
        },
        [](const V& l) { return ag::sum(ag::add_n({l[0], l[1], l[2]})); });
    run("transpose", one34, [](const V& l) {
        return ag::sum(ag::mul(ag::transpose(l[0]), ag::transpose(l[0])));
    });
    run("slice_cols", one34, [](const V& l) { return ag::sum(ag::slice_cols(l[0], 1, 2)); });
    run("concat_cols",
        [](Rng& rng) {
            return std::vector<Tensor>{random_tensor(rng, 3, 2), random_tensor(rng, 3, 3)};
        },
        [](const V& l) { return ag::sum(ag::mul(ag::concat_cols({l[0], l[1]}),
                                                ag::concat_cols({l[0], l[1]}))); });
    run("embedding_gather",
        [](Rng& rng) { return std::vector<Tensor>{random_tensor(rng, 5, 3)}; },
        [](const V& l) { return ag::sum(ag::embedding_gather(l[0], {0, 2, 2, 4})); });
    run("gather_logprob",
        [](Rng& rng) { return std::vector<Tensor>{random_tensor(rng, 4, 5)}; },
        [](const V& l) { return ag::sum(ag::gather_logprob(l[0], {1, 4, 0}, 1)); });
    run("gelu", one34, [](const V& l) { return ag::sum(ag::gelu(l[0])); });
    run("sigmoid", one34, [](const V& l) { return ag::sum(ag::sigmoid(l[0])); });
    run("log_sigmoid", one34, [](const V& l) { return ag::sum(ag::log_sigmoid(l[0])); });
    run("max_with_zero",
        [](Rng& rng) { return std::vector<Tensor>{random_tensor_off_origin(rng, 3, 4)}; },
        [](const V& l) { return ag::sum(ag::max_with_zero(l[0])); });
    run("layer_norm",
        [](Rng& rng) {
            return std::vector<Tensor>{random_tensor(rng, 3, 6), random_tensor(rng, 1, 6),
                                       random_tensor(rng, 1, 6)};
        },
        [](const V& l) { return ag::sum(ag::mul(ag::layer_norm(l[0], l[1], l[2]),
                                                ag::layer_norm(l[0], l[1], l[2]))); });
    run("softmax_logits_to_logprobs", one34, [](const V& l) {
        return ag::sum(ag::mul(ag::softmax_logits_to_logprobs(l[0], 1),
                               ag::softmax_logits_to_logprobs(l[0], 1)));
    });
    run("softmax_logits_to_logprobs_axis0", one34, [](const V& l) {
        return ag::sum(ag::mul(ag::softmax_logits_to_logprobs(l[0], 0),
                               ag::softmax_logits_to_logprobs(l[0], 0)));
    });
    run("causal_softmax",
        [](Rng& rng) { return std::vector<Tensor>{random_tensor(rng, 4, 4)}; },
        [](const V& l) {
            return ag::sum(ag::mul(ag::causal_softmax(l[0]), ag::causal_softmax(l[0])));
        });
    run("sum", one34, [](const V& l) { return ag::sum(ag::mul(l[0], l[0])); });
    run("mean", one34, [](const V& l) { return ag::mean(ag::mul(l[0], l[0])); });
    run("composite",
        [](Rng& rng) {
            return std::vector<Tensor>{random_tensor(rng, 3, 4), random_tensor(rng, 4, 4),
                                       random_tensor(rng, 1, 4), random_tensor(rng, 1, 4)};
        },
        [](const V& l) {
            ag::NodePtr h = ag::layer_norm(ag::matmul(l[0], l[1]), l[2], l[3]);
            return ag::mean(ag::mul(ag::gelu(h), ag::sigmoid(h)));
        });
    return out;
}

namespace {

LmConfig micro_lm_config(uint64_t seed) {
    LmConfig cfg;
    cfg.vocab_size = 5;
    cfg.context_len = 12;
    cfg.embed_dim = 8;
    cfg.num_layers = 1;
    cfg.num_heads = 2;
    cfg.seed = seed;
    return cfg;
}

// finite differences through a scalar functional of the policy parameters
double policy_fd_err(LmPolicy& policy, const std::function<double()>& eval,
                     const std::vector<Tensor>& ad_grads) {
    double worst = 0.0;
    auto params = policy.mutable_params();
    for (size_t i = 0; i < params.size(); ++i) {
        Tensor& p = params[i].value;
        for (Eigen::Index j = 0; j < p.size(); ++j) {
            double x = p.data()[j];
            double h = 1e-4 * std::max(1.0, std::abs(x));
            p.data()[j] = x + h;
            double fp = eval();
            p.data()[j] = x - h;
            double fm = eval();
            p.data()[j] = x;
            double fd = (fp - fm) / (2.0 * h);
            double ad = ad_grads[i].size() ? ad_grads[i].data()[j] : 0.0;
            worst = std::max(worst, std::abs(ad - fd) / std::max(1.0, std::abs(fd)));
        }
    }
    return worst;
}

std::vector<Tensor> leaf_grads(const LmPolicy::ParamBinding& pb) {
    std::vector<Tensor> grads;
    grads.reserve(pb.leaves.size());
    for (const auto& l : pb.leaves) {
        grads.push_back(l->grad_ready ? l->grad : Tensor());
    }
    return grads;
}

} // namespace

std::vector<CheckResult> check_lm(uint64_t seed) {
    LmPolicy policy = LmPolicy::init(micro_lm_config(derive_seed(seed, 21)));
    TokenSequence x = {0, 3, 1};
    TokenSequence y = {2, 4, 0};

    LmPolicy::ParamBinding pb = policy.bind(true);
    ag::NodePtr root = policy.log_prob_sum_node(pb, x, y);
    ag::backward(root);
    std::vector<Tensor> ad = leaf_grads(pb);
    double err = policy_fd_err(policy, [&]() { return policy.log_prob_sum(x, y); }, ad);
    return {{"lm.log_prob_sum", err}};
}

std::vector<CheckResult> check_losses(uint64_t seed) {
    LmConfig cfg = micro_lm_config(derive_seed(seed, 31));
    LmPolicy policy = LmPolicy::init(cfg);
    LmConfig ref_cfg = cfg;
    ref_cfg.seed = derive_seed(seed, 32);
    LmPolicy ref = LmPolicy::init(ref_cfg).clone_frozen();

    std::vector<ResponsePair> resp = {
        {{0, 1}, {2, 3, 0}, {4, 0}, "a"},
        {{3, 2, 1}, {0, 4}, {1, 1, 0}, "b"},
    };
    std::vector<PromptPair> prom = {
        {{0, 1, 2}, {0, 3, 2}, {4, 0}, "a"},
        {{2, 2}, {1, 4}, {3, 0, 0}, "b"},
    };

    std::vector<CheckResult> out;
    auto run = [&](const std::string& name, auto make_loss) {
        LmPolicy::ParamBinding pb = policy.bind(true);
        ScoringContext sc{policy, ref, pb};
        ag::NodePtr root = make_loss(sc);
        ag::backward(root);
        std::vector<Tensor> ad = leaf_grads(pb);
        auto eval = [&]() {
            LmPolicy::ParamBinding pe = policy.bind(false);
            ScoringContext se{policy, ref, pe};
            return ag::scalar_value(make_loss(se));
        };
        out.push_back({name, policy_fd_err(policy, eval, ad)});
    };

    run("losses.dpo", [&](const ScoringContext& sc) { return dpo_loss(sc, resp, 0.4); });
    run("losses.adpo", [&](const ScoringContext& sc) { return adpo_loss(sc, prom, 0.4); });
    run("losses.dpop", [&](const ScoringContext& sc) { return dpop_loss(sc, resp, 0.4, 0.7); });
    run("losses.adpop", [&](const ScoringContext& sc) { return adpop_loss(sc, prom, 0.4, 0.7); });
    run("losses.multi", [&](const ScoringContext& sc) {
        LossSpec spec;
        spec.objective = Objective::dpo;
        spec.direction = Direction::multitask;
        spec.beta = 0.4;
        spec.lambda_multi = 0.3;
        return multi_loss(sc, resp, prom, spec);
    });
    return out;
}

double worst_err(std::span<const CheckResult> results) {
    double worst = 0.0;
    for (const auto& r : results) worst = std::max(worst, r.max_rel_err);
    return worst;
}

} // namespace apl::gradcheck
