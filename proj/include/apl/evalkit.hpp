#pragma once

#include <array>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "apl/datagen.hpp"
#include "apl/lm.hpp"
#include "apl/trainer.hpp"

namespace apl::evalkit {

struct EvalItemResult {
    std::string id;
    bool std_correct = false;
    bool abd_correct = false;
    double margin_std = 0.0; // ALL(right|orig) - ALL(hall|orig)
    double margin_abd = 0.0; // ALL(hall|mod) - ALL(hall|orig)
};

struct EvalReport {
    double accuracy = 0.0;
    double abductive_accuracy = 0.0;
    int n_items = 0;
    std::vector<EvalItemResult> per_item;

    std::string to_json() const;
};

// Ties count as incorrect: correctness requires a strict average
// log-likelihood gap in the right direction.
EvalReport evaluate(const LmPolicy& policy, std::span<const datagen::AbductiveRecord> dataset);
double accuracy(const LmPolicy& policy, std::span<const datagen::AbductiveRecord> dataset);
double abductive_accuracy(const LmPolicy& policy,
                          std::span<const datagen::AbductiveRecord> dataset);

// Fully enumerable prompt/response supports for the Bayes-inversion oracle.
struct EnumeratedWorld {
    std::vector<TokenSequence> prompts;
    std::vector<double> prompt_prior; // sums to 1
    std::vector<TokenSequence> responses;

    // all responses of length 1..max_resp_len over [0, vocab); uniform prior
    static EnumeratedWorld make(int vocab, int max_resp_len,
                                std::vector<TokenSequence> prompts);
};

// log pi(y | x)
using SeqLogProb = std::function<double(const TokenSequence& x, const TokenSequence& y)>;
SeqLogProb log_prob_fn(const LmPolicy& policy);

// Exact Bayes inversion: posterior(y, x) = pi(x | y~) built from
// q(y) = sum_x pi(y|x) p(x). Rows sum to one.
struct AbductiveTable {
    Tensor posterior;      // responses x prompts
    std::vector<double> q; // response marginals
};
AbductiveTable abductive_policy_oracle(const SeqLogProb& lp, const EnumeratedWorld& world,
                                       std::span<const double> prior = {});
AbductiveTable abductive_policy_oracle(const LmPolicy& policy, const EnumeratedWorld& world);

// (prompt_w index, prompt_l index, response index)
using Triple = std::array<int, 3>;
std::vector<Triple> sample_triples(const EnumeratedWorld& world, int n, uint64_t seed);

// Max absolute gap between the abductive-policy form of the preference
// margin, beta * [log-ratio of posteriors], and the swapped direct form,
// beta * [psi(x_w, y) - psi(x_l, y)], over the given triples. Both policies
// share the world prior, which is the equivalence's assumption.
double verify_prop1(const LmPolicy& policy, const LmPolicy& ref, const EnumeratedWorld& world,
                    double beta, std::span<const Triple> triples);

// Same computation with per-policy priors, to show the shared-prior
// assumption is load-bearing.
double prop1_discrepancy_with_priors(const LmPolicy& policy, const LmPolicy& ref,
                                     const EnumeratedWorld& world, double beta,
                                     std::span<const Triple> triples,
                                     std::span<const double> prior_theta,
                                     std::span<const double> prior_ref);

// Ablation runners. Each cell fine-tunes a fresh copy of `base` with the
// shared seed in `tmpl` and evaluates on `eval`. Results come back as CSV.
std::string run_lambda_ablation(const LmPolicy& base,
                                std::span<const datagen::AbductiveRecord> train,
                                std::span<const datagen::AbductiveRecord> eval,
                                const TrainConfig& tmpl, std::span<const double> grid);

std::string run_dpop_penalty_ablation(const LmPolicy& base,
                                      std::span<const datagen::AbductiveRecord> train,
                                      std::span<const datagen::AbductiveRecord> eval,
                                      const TrainConfig& tmpl, std::span<const double> grid);

// Trains on candidates re-filtered at each delta_train and evaluates per
// epoch on the eval side of each delta_eval. Candidates must carry margins;
// the id-hash split keeps train/eval assignment consistent across deltas.
std::string run_delta_ablation(const LmPolicy& base,
                               std::span<const datagen::AbductiveRecord> scored_candidates,
                               double split_ratio, uint64_t split_seed, const TrainConfig& tmpl,
                               std::span<const double> deltas_train,
                               std::span<const double> deltas_eval);

std::vector<TrainItem> to_train_items(std::span<const datagen::AbductiveRecord> records);

} // namespace apl::evalkit
