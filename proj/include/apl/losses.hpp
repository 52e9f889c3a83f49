#pragma once

#include <span>
#include <string>
#include <vector>

#include "apl/autodiff.hpp"
#include "apl/lm.hpp"

namespace apl {

// Policy-vs-reference log-likelihood ratio for one (x, y), differentiable
// through the trainable policy only.
struct PsiScore {
    ag::NodePtr value;
    std::string x_id;
    std::string y_id;
};

enum class Objective { dpo, dpop };
enum class Direction { standard, abductive, multitask };

struct LossSpec {
    Objective objective = Objective::dpo;
    Direction direction = Direction::standard;
    double beta = 0.1;
    double lambda_multi = 0.5; // weight on the standard side, multitask only
    double lambda_dpop = 0.0;  // hinge penalty weight, dpop only

    void validate() const;
};

std::string to_string(Objective o);
std::string to_string(Direction d);
Objective objective_from_string(const std::string& s);
Direction direction_from_string(const std::string& s);

// (x, y_w, y_l): prefer response y_w over y_l for prompt x
struct ResponsePair {
    TokenSequence x, y_w, y_l;
    std::string id;
};

// (x_w, x_l, y): prefer prompt x_w over x_l for the shared response y
struct PromptPair {
    TokenSequence x_w, x_l, y;
    std::string id;
};

// Trainable policy bound to one graph plus the frozen reference it is
// anchored to. Reference terms enter the graph as constants.
struct ScoringContext {
    const LmPolicy& policy;
    const LmPolicy& ref;
    const LmPolicy::ParamBinding& binding;
};

PsiScore compute_psi(const ScoringContext& sc, const TokenSequence& x, const TokenSequence& y,
                     std::string x_id = "", std::string y_id = "");

ag::NodePtr dpo_loss(const ScoringContext& sc, std::span<const ResponsePair> batch, double beta);
ag::NodePtr adpo_loss(const ScoringContext& sc, std::span<const PromptPair> batch, double beta);
ag::NodePtr dpop_loss(const ScoringContext& sc, std::span<const ResponsePair> batch, double beta,
                      double lambda_dpop);
ag::NodePtr adpop_loss(const ScoringContext& sc, std::span<const PromptPair> batch, double beta,
                       double lambda_dpop);
// lambda * standard + (1 - lambda) * abductive; at lambda 0 or 1 this builds
// exactly the single-sided graph
ag::NodePtr multi_loss(const ScoringContext& sc, std::span<const ResponsePair> resp_batch,
                       std::span<const PromptPair> prompt_batch, const LossSpec& spec);

// Formula cores over precomputed psi nodes; the front-ends above and the
// trainer both assemble batches through these.
namespace lossform {
ag::NodePtr preference_term(const ag::NodePtr& psi_w, const ag::NodePtr& psi_l, double beta);
ag::NodePtr preference_term_with_hinge(const ag::NodePtr& psi_w, const ag::NodePtr& psi_l,
                                       double beta, double lambda_dpop);
ag::NodePtr batch_mean(const std::vector<ag::NodePtr>& terms);
} // namespace lossform

} // namespace apl
