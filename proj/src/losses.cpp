#include "apl/losses.hpp"

#include "apl/error.hpp"

namespace apl {

void LossSpec::validate() const {
    if (beta <= 0.0) throw ConfigError("LossSpec: beta must be positive");
    if (lambda_dpop < 0.0) throw ConfigError("LossSpec: lambda_dpop must be non-negative");
    if (direction == Direction::multitask && (lambda_multi < 0.0 || lambda_multi > 1.0)) {
        throw ConfigError("LossSpec: lambda_multi must lie in [0, 1]");
    }
}

std::string to_string(Objective o) { return o == Objective::dpo ? "dpo" : "dpop"; }

std::string to_string(Direction d) {
    switch (d) {
        case Direction::standard: return "standard";
        case Direction::abductive: return "abductive";
        default: return "multitask";
    }
}

Objective objective_from_string(const std::string& s) {
    if (s == "dpo") return Objective::dpo;
    if (s == "dpop") return Objective::dpop;
    throw ConfigError("unknown objective: " + s);
}

Direction direction_from_string(const std::string& s) {
    if (s == "standard") return Direction::standard;
    if (s == "abductive") return Direction::abductive;
    if (s == "multitask") return Direction::multitask;
    throw ConfigError("unknown direction: " + s);
}

PsiScore compute_psi(const ScoringContext& sc, const TokenSequence& x, const TokenSequence& y,
                     std::string x_id, std::string y_id) {
    if (!sc.ref.frozen()) throw std::logic_error("compute_psi: reference policy must be frozen");
    ag::NodePtr policy_lp = sc.policy.log_prob_sum_node(sc.binding, x, y);
    double ref_lp = sc.ref.log_prob_sum(x, y);
    return {ag::sub(policy_lp, ag::constant(ref_lp)), std::move(x_id), std::move(y_id)};
}

namespace lossform {

ag::NodePtr preference_term(const ag::NodePtr& psi_w, const ag::NodePtr& psi_l, double beta) {
    ag::NodePtr margin = ag::scalar_mul(ag::sub(psi_w, psi_l), beta);
    return ag::scalar_mul(ag::log_sigmoid(margin), -1.0);
}

ag::NodePtr preference_term_with_hinge(const ag::NodePtr& psi_w, const ag::NodePtr& psi_l,
                                       double beta, double lambda_dpop) {
    if (lambda_dpop == 0.0) return preference_term(psi_w, psi_l, beta);
    // hinge fires when the policy's likelihood of the preferred item has
    // dropped below the reference: max(0, -psi_w)
    ag::NodePtr penalty = ag::scalar_mul(ag::max_with_zero(ag::scalar_mul(psi_w, -1.0)), lambda_dpop);
    ag::NodePtr margin = ag::sub(ag::scalar_mul(ag::sub(psi_w, psi_l), beta), penalty);
    return ag::scalar_mul(ag::log_sigmoid(margin), -1.0);
}

ag::NodePtr batch_mean(const std::vector<ag::NodePtr>& terms) {
    return ag::scalar_mul(ag::add_n(terms), 1.0 / static_cast<double>(terms.size()));
}

} // namespace lossform

ag::NodePtr dpo_loss(const ScoringContext& sc, std::span<const ResponsePair> batch, double beta) {
    if (batch.empty()) throw ConfigError("dpo_loss: empty batch");
    std::vector<ag::NodePtr> terms;
    terms.reserve(batch.size());
    for (const auto& item : batch) {
        PsiScore w = compute_psi(sc, item.x, item.y_w, item.id, "y_w");
        PsiScore l = compute_psi(sc, item.x, item.y_l, item.id, "y_l");
        terms.push_back(lossform::preference_term(w.value, l.value, beta));
    }
    return lossform::batch_mean(terms);
}

ag::NodePtr adpo_loss(const ScoringContext& sc, std::span<const PromptPair> batch, double beta) {
    if (batch.empty()) throw ConfigError("adpo_loss: empty batch");
    std::vector<ag::NodePtr> terms;
    terms.reserve(batch.size());
    for (const auto& item : batch) {
        PsiScore w = compute_psi(sc, item.x_w, item.y, item.id, "x_w");
        PsiScore l = compute_psi(sc, item.x_l, item.y, item.id, "x_l");
        terms.push_back(lossform::preference_term(w.value, l.value, beta));
    }
    return lossform::batch_mean(terms);
}

ag::NodePtr dpop_loss(const ScoringContext& sc, std::span<const ResponsePair> batch, double beta,
                      double lambda_dpop) {
    if (batch.empty()) throw ConfigError("dpop_loss: empty batch");
    if (lambda_dpop < 0.0) throw ConfigError("dpop_loss: negative lambda_dpop");
    std::vector<ag::NodePtr> terms;
    terms.reserve(batch.size());
    for (const auto& item : batch) {
        PsiScore w = compute_psi(sc, item.x, item.y_w, item.id, "y_w");
        PsiScore l = compute_psi(sc, item.x, item.y_l, item.id, "y_l");
        terms.push_back(lossform::preference_term_with_hinge(w.value, l.value, beta, lambda_dpop));
    }
    return lossform::batch_mean(terms);
}

ag::NodePtr adpop_loss(const ScoringContext& sc, std::span<const PromptPair> batch, double beta,
                       double lambda_dpop) {
    if (batch.empty()) throw ConfigError("adpop_loss: empty batch");
    if (lambda_dpop < 0.0) throw ConfigError("adpop_loss: negative lambda_dpop");
    std::vector<ag::NodePtr> terms;
    terms.reserve(batch.size());
    for (const auto& item : batch) {
        PsiScore w = compute_psi(sc, item.x_w, item.y, item.id, "x_w");
        PsiScore l = compute_psi(sc, item.x_l, item.y, item.id, "x_l");
        terms.push_back(lossform::preference_term_with_hinge(w.value, l.value, beta, lambda_dpop));
    }
    return lossform::batch_mean(terms);
}

ag::NodePtr multi_loss(const ScoringContext& sc, std::span<const ResponsePair> resp_batch,
                       std::span<const PromptPair> prompt_batch, const LossSpec& spec) {
    if (spec.lambda_multi < 0.0 || spec.lambda_multi > 1.0) {
        throw ConfigError("multi_loss: lambda_multi outside [0, 1]");
    }
    auto standard_side = [&]() {
        return spec.objective == Objective::dpo
                   ? dpo_loss(sc, resp_batch, spec.beta)
                   : dpop_loss(sc, resp_batch, spec.beta, spec.lambda_dpop);
    };
    auto abductive_side = [&]() {
        return spec.objective == Objective::dpo
                   ? adpo_loss(sc, prompt_batch, spec.beta)
                   : adpop_loss(sc, prompt_batch, spec.beta, spec.lambda_dpop);
    };
    if (spec.lambda_multi == 1.0) return standard_side();
    if (spec.lambda_multi == 0.0) return abductive_side();
    return ag::add(ag::scalar_mul(standard_side(), spec.lambda_multi),
                   ag::scalar_mul(abductive_side(), 1.0 - spec.lambda_multi));
}

} // namespace apl
