#include "apl/evalkit.hpp"

#include <cmath>
#include <cstdio>

#include <nlohmann/json.hpp>

#include "apl/error.hpp"
#include "apl/util.hpp"

namespace apl::evalkit {

using json = nlohmann::ordered_json;

EvalReport evaluate(const LmPolicy& policy, std::span<const datagen::AbductiveRecord> dataset) {
    if (dataset.empty()) throw ConfigError("evaluate: empty dataset");
    EvalReport rep;
    rep.n_items = static_cast<int>(dataset.size());
    rep.per_item.reserve(dataset.size());
    int n_std = 0, n_abd = 0;
    for (const auto& r : dataset) {
        EvalItemResult item;
        item.id = r.id;
        double all_right = policy.avg_log_lik(r.original_prompt, r.right_answer);
        double all_hall_orig = policy.avg_log_lik(r.original_prompt, r.hallucinated_answer);
        double all_hall_mod = policy.avg_log_lik(r.modified_prompt, r.hallucinated_answer);
        item.margin_std = all_right - all_hall_orig;
        item.margin_abd = all_hall_mod - all_hall_orig;
        item.std_correct = item.margin_std > 0.0;
        item.abd_correct = item.margin_abd > 0.0;
        n_std += item.std_correct;
        n_abd += item.abd_correct;
        rep.per_item.push_back(std::move(item));
    }
    rep.accuracy = static_cast<double>(n_std) / rep.n_items;
    rep.abductive_accuracy = static_cast<double>(n_abd) / rep.n_items;
    return rep;
}

double accuracy(const LmPolicy& policy, std::span<const datagen::AbductiveRecord> dataset) {
    return evaluate(policy, dataset).accuracy;
}

double abductive_accuracy(const LmPolicy& policy,
                          std::span<const datagen::AbductiveRecord> dataset) {
    return evaluate(policy, dataset).abductive_accuracy;
}

std::string EvalReport::to_json() const {
    json j;
    j["accuracy"] = accuracy;
    j["abductive_accuracy"] = abductive_accuracy;
    j["n_items"] = n_items;
    json items = json::array();
    for (const auto& it : per_item) {
        json e;
        e["id"] = it.id;
        e["std_correct"] = it.std_correct;
        e["abd_correct"] = it.abd_correct;
        e["margin_std"] = it.margin_std;
        e["margin_abd"] = it.margin_abd;
        items.push_back(std::move(e));
    }
    j["per_item"] = std::move(items);
    return j.dump();
}

EnumeratedWorld EnumeratedWorld::make(int vocab, int max_resp_len,
                                      std::vector<TokenSequence> prompts) {
    if (vocab <= 0 || max_resp_len <= 0 || prompts.empty()) {
        throw ConfigError("EnumeratedWorld: need positive vocab, length, and prompts");
    }
    EnumeratedWorld w;
    w.prompts = std::move(prompts);
    w.prompt_prior.assign(w.prompts.size(), 1.0 / static_cast<double>(w.prompts.size()));
    for (int len = 1; len <= max_resp_len; ++len) {
        std::vector<int> idx(static_cast<size_t>(len), 0);
        while (true) {
            w.responses.emplace_back(idx.begin(), idx.end());
            int pos = len - 1;
            while (pos >= 0 && ++idx[static_cast<size_t>(pos)] == vocab) {
                idx[static_cast<size_t>(pos)] = 0;
                --pos;
            }
            if (pos < 0) break;
        }
    }
    return w;
}

SeqLogProb log_prob_fn(const LmPolicy& policy) {
    return [&policy](const TokenSequence& x, const TokenSequence& y) {
        return policy.log_prob_sum(x, y);
    };
}

AbductiveTable abductive_policy_oracle(const SeqLogProb& lp, const EnumeratedWorld& world,
                                       std::span<const double> prior) {
    std::vector<double> p(prior.begin(), prior.end());
    if (p.empty()) p = world.prompt_prior;
    if (p.size() != world.prompts.size()) {
        throw ConfigError("abductive_policy_oracle: prior size mismatch");
    }
    const size_t nx = world.prompts.size();
    const size_t ny = world.responses.size();
    AbductiveTable table;
    table.posterior = Tensor::Zero(static_cast<Eigen::Index>(ny), static_cast<Eigen::Index>(nx));
    table.q.assign(ny, 0.0);
    for (size_t yi = 0; yi < ny; ++yi) {
        double q = 0.0;
        for (size_t xi = 0; xi < nx; ++xi) {
            double joint = std::exp(lp(world.prompts[xi], world.responses[yi])) * p[xi];
            table.posterior(static_cast<Eigen::Index>(yi), static_cast<Eigen::Index>(xi)) = joint;
            q += joint;
        }
        if (q <= 0.0) {
            throw NumericFault("abductive_policy_oracle: response " + std::to_string(yi) +
                               " is unreachable (q = 0)");
        }
        table.q[yi] = q;
        table.posterior.row(static_cast<Eigen::Index>(yi)) /= q;
    }
    return table;
}

AbductiveTable abductive_policy_oracle(const LmPolicy& policy, const EnumeratedWorld& world) {
    return abductive_policy_oracle(log_prob_fn(policy), world);
}

std::vector<Triple> sample_triples(const EnumeratedWorld& world, int n, uint64_t seed) {
    if (world.prompts.size() < 2) throw ConfigError("sample_triples: need at least two prompts");
    Rng rng(seed);
    std::vector<Triple> out;
    out.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        int xw = static_cast<int>(rng.uniform_int(world.prompts.size()));
        int xl = static_cast<int>(rng.uniform_int(world.prompts.size() - 1));
        if (xl >= xw) ++xl;
        int y = static_cast<int>(rng.uniform_int(world.responses.size()));
        out.push_back({xw, xl, y});
    }
    return out;
}

double prop1_discrepancy_with_priors(const LmPolicy& policy, const LmPolicy& ref,
                                     const EnumeratedWorld& world, double beta,
                                     std::span<const Triple> triples,
                                     std::span<const double> prior_theta,
                                     std::span<const double> prior_ref) {
    AbductiveTable t_theta = abductive_policy_oracle(log_prob_fn(policy), world, prior_theta);
    AbductiveTable t_ref = abductive_policy_oracle(log_prob_fn(ref), world, prior_ref);
    double worst = 0.0;
    for (const auto& [xw, xl, y] : triples) {
        double abductive_form =
            beta * (std::log(t_theta.posterior(y, xw)) - std::log(t_ref.posterior(y, xw)) -
                    std::log(t_theta.posterior(y, xl)) + std::log(t_ref.posterior(y, xl)));
        double psi_w = policy.log_prob_sum(world.prompts[xw], world.responses[y]) -
                       ref.log_prob_sum(world.prompts[xw], world.responses[y]);
        double psi_l = policy.log_prob_sum(world.prompts[xl], world.responses[y]) -
                       ref.log_prob_sum(world.prompts[xl], world.responses[y]);
        double swapped_form = beta * (psi_w - psi_l);
        worst = std::max(worst, std::abs(abductive_form - swapped_form));
    }
    return worst;
}

double verify_prop1(const LmPolicy& policy, const LmPolicy& ref, const EnumeratedWorld& world,
                    double beta, std::span<const Triple> triples) {
    return prop1_discrepancy_with_priors(policy, ref, world, beta, triples, world.prompt_prior,
                                         world.prompt_prior);
}

std::vector<TrainItem> to_train_items(std::span<const datagen::AbductiveRecord> records) {
    std::vector<TrainItem> items;
    items.reserve(records.size());
    for (const auto& r : records) {
        items.push_back({datagen::response_view(r), datagen::prompt_view(r)});
    }
    return items;
}

namespace {

std::string fmt_acc(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

std::string fmt_knob(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%g", v);
    return buf;
}

} // namespace

std::string run_lambda_ablation(const LmPolicy& base,
                                std::span<const datagen::AbductiveRecord> train,
                                std::span<const datagen::AbductiveRecord> eval,
                                const TrainConfig& tmpl, std::span<const double> grid) {
    std::vector<TrainItem> items = to_train_items(train);
    LmPolicy ref = base.clone_frozen();
    std::string csv = "lambda,accuracy,abductive_accuracy\n";
    for (double lambda : grid) {
        TrainConfig cfg = tmpl;
        cfg.loss.direction = Direction::multitask;
        cfg.loss.lambda_multi = lambda;
        LmPolicy policy = base;
        finetune(policy, ref, items, cfg);
        EvalReport rep = evaluate(policy, eval);
        csv += fmt_knob(lambda) + "," + fmt_acc(rep.accuracy) + "," +
               fmt_acc(rep.abductive_accuracy) + "\n";
    }
    return csv;
}

std::string run_dpop_penalty_ablation(const LmPolicy& base,
                                      std::span<const datagen::AbductiveRecord> train,
                                      std::span<const datagen::AbductiveRecord> eval,
                                      const TrainConfig& tmpl, std::span<const double> grid) {
    std::vector<TrainItem> items = to_train_items(train);
    LmPolicy ref = base.clone_frozen();
    std::string csv = "lambda_dpop,accuracy,abductive_accuracy\n";
    for (double lambda_dpop : grid) {
        TrainConfig cfg = tmpl;
        cfg.loss.objective = Objective::dpop;
        cfg.loss.direction = Direction::multitask;
        cfg.loss.lambda_dpop = lambda_dpop;
        LmPolicy policy = base;
        finetune(policy, ref, items, cfg);
        EvalReport rep = evaluate(policy, eval);
        csv += fmt_knob(lambda_dpop) + "," + fmt_acc(rep.accuracy) + "," +
               fmt_acc(rep.abductive_accuracy) + "\n";
    }
    return csv;
}

std::string run_delta_ablation(const LmPolicy& base,
                               std::span<const datagen::AbductiveRecord> scored_candidates,
                               double split_ratio, uint64_t split_seed, const TrainConfig& tmpl,
                               std::span<const double> deltas_train,
                               std::span<const double> deltas_eval) {
    // eval sets are fixed across training deltas
    std::vector<std::vector<datagen::AbductiveRecord>> eval_sets;
    for (double de : deltas_eval) {
        std::vector<datagen::AbductiveRecord> es;
        for (const auto& r : scored_candidates) {
            if (r.margin >= de && !datagen::assigned_to_train(r.id, split_ratio, split_seed)) {
                es.push_back(r);
            }
        }
        if (es.empty()) {
            throw ConfigError("run_delta_ablation: empty eval set for delta " + fmt_knob(de));
        }
        eval_sets.push_back(std::move(es));
    }

    std::string csv = "delta_train,delta_eval,epoch,accuracy,abductive_accuracy\n";
    LmPolicy ref = base.clone_frozen();
    for (double dt : deltas_train) {
        std::vector<datagen::AbductiveRecord> train;
        for (const auto& r : scored_candidates) {
            if (r.margin >= dt && datagen::assigned_to_train(r.id, split_ratio, split_seed)) {
                train.push_back(r);
            }
        }
        if (train.empty()) {
            throw ConfigError("run_delta_ablation: empty train set for delta " + fmt_knob(dt));
        }
        std::vector<TrainItem> items = to_train_items(train);
        LmPolicy policy = base;
        TrainConfig cfg = tmpl;
        std::vector<std::string> rows;
        finetune(policy, ref, items, cfg, [&](int epoch, const LmPolicy& p) {
            for (size_t ei = 0; ei < eval_sets.size(); ++ei) {
                EvalReport rep = evaluate(p, eval_sets[ei]);
                rows.push_back(fmt_knob(dt) + "," + fmt_knob(deltas_eval[ei]) + "," +
                               std::to_string(epoch) + "," + fmt_acc(rep.accuracy) + "," +
                               fmt_acc(rep.abductive_accuracy));
            }
        });
        for (const auto& row : rows) {
            csv += row;
            csv += '\n';
        }
    }
    return csv;
}

} // namespace apl::evalkit
