#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "apl/evalkit.hpp"
#include "apl/util.hpp"

using namespace apl;
using namespace apl::evalkit;

namespace {

LmConfig micro_config(int vocab, uint64_t seed) {
    LmConfig cfg;
    cfg.vocab_size = vocab;
    cfg.context_len = 16;
    cfg.embed_dim = 8;
    cfg.num_layers = 1;
    cfg.num_heads = 2;
    cfg.seed = seed;
    return cfg;
}

datagen::AbductiveRecord make_record(std::string id, TokenSequence orig, TokenSequence mod,
                                     TokenSequence right, TokenSequence hall) {
    datagen::AbductiveRecord r;
    r.id = std::move(id);
    r.original_prompt = std::move(orig);
    r.modified_prompt = std::move(mod);
    r.right_answer = std::move(right);
    r.hallucinated_answer = std::move(hall);
    r.margin = 0.5;
    return r;
}

std::vector<datagen::AbductiveRecord> micro_dataset() {
    return {
        make_record("a", {0, 1}, {0, 2}, {3, 0}, {4, 0}),
        make_record("b", {1, 2}, {1, 3}, {4, 0}, {5, 0}),
        make_record("c", {2, 3}, {2, 4}, {5, 0}, {1, 0}),
        make_record("d", {3, 4}, {3, 5}, {1, 0}, {2, 0}),
    };
}

} // namespace

TEST_CASE("a uniform policy scores zero accuracy under the strict tie rule") {
    LmPolicy uniform = LmPolicy::zeros(micro_config(6, 1));
    auto data = micro_dataset();
    EvalReport rep = evaluate(uniform, data);
    CHECK(rep.accuracy == 0.0);
    CHECK(rep.abductive_accuracy == 0.0);
    CHECK(rep.n_items == 4);
}

TEST_CASE("accuracies match a hand-rolled count over the items") {
    LmPolicy policy = LmPolicy::init(micro_config(6, 2));
    auto data = micro_dataset();
    EvalReport rep = evaluate(policy, data);

    int n_std = 0, n_abd = 0;
    for (const auto& r : data) {
        double right = policy.avg_log_lik(r.original_prompt, r.right_answer);
        double hall_orig = policy.avg_log_lik(r.original_prompt, r.hallucinated_answer);
        double hall_mod = policy.avg_log_lik(r.modified_prompt, r.hallucinated_answer);
        n_std += right > hall_orig;
        n_abd += hall_mod > hall_orig;
    }
    CHECK(rep.accuracy == doctest::Approx(n_std / 4.0).epsilon(1e-15));
    CHECK(rep.abductive_accuracy == doctest::Approx(n_abd / 4.0).epsilon(1e-15));
}

TEST_CASE("evaluation is invariant under dataset shuffling") {
    LmPolicy policy = LmPolicy::init(micro_config(6, 3));
    auto data = micro_dataset();
    EvalReport a = evaluate(policy, data);
    std::reverse(data.begin(), data.end());
    EvalReport b = evaluate(policy, data);
    CHECK(a.accuracy == b.accuracy);
    CHECK(a.abductive_accuracy == b.abductive_accuracy);
}

TEST_CASE("sum and average log-likelihood orderings agree on shared-answer pairs") {
    LmPolicy policy = LmPolicy::init(micro_config(6, 4));
    for (const auto& r : micro_dataset()) {
        double avg = policy.avg_log_lik(r.modified_prompt, r.hallucinated_answer) -
                     policy.avg_log_lik(r.original_prompt, r.hallucinated_answer);
        double sum = policy.log_prob_sum(r.modified_prompt, r.hallucinated_answer) -
                     policy.log_prob_sum(r.original_prompt, r.hallucinated_answer);
        CHECK((avg > 0.0) == (sum > 0.0));
    }
}

TEST_CASE("empty datasets are rejected") {
    LmPolicy policy = LmPolicy::zeros(micro_config(6, 5));
    std::vector<datagen::AbductiveRecord> empty;
    CHECK_THROWS_AS(evaluate(policy, empty), ConfigError);
}

TEST_CASE("enumerated worlds cover every response up to the length bound") {
    EnumeratedWorld w = EnumeratedWorld::make(3, 2, {{0}, {1}});
    CHECK(w.responses.size() == 3 + 9);
    CHECK(w.prompt_prior[0] == doctest::Approx(0.5));
}

TEST_CASE("flat likelihoods invert to the prompt prior") {
    EnumeratedWorld w = EnumeratedWorld::make(3, 2, {{0}, {1}, {2}});
    SeqLogProb flat = [](const TokenSequence&, const TokenSequence& y) {
        return -1.1 * static_cast<double>(y.size());
    };
    AbductiveTable t = abductive_policy_oracle(flat, w);
    for (Eigen::Index yi = 0; yi < t.posterior.rows(); ++yi) {
        for (Eigen::Index xi = 0; xi < 3; ++xi) {
            CHECK(std::abs(t.posterior(yi, xi) - 1.0 / 3.0) <= 1e-12);
        }
    }
}

TEST_CASE("posterior rows sum to one for a real micro policy") {
    LmPolicy policy = LmPolicy::init(micro_config(4, 6));
    EnumeratedWorld w = EnumeratedWorld::make(4, 3, {{0}, {1}, {2, 3}, {3, 0}});
    AbductiveTable t = abductive_policy_oracle(policy, w);
    for (Eigen::Index yi = 0; yi < t.posterior.rows(); ++yi) {
        CHECK(std::abs(t.posterior.row(yi).sum() - 1.0) <= 1e-12);
        CHECK(t.q[static_cast<size_t>(yi)] > 0.0);
    }
}

TEST_CASE("oracle matches an independently coded double-loop Bayes computation") {
    LmPolicy policy = LmPolicy::init(micro_config(3, 7));
    EnumeratedWorld w = EnumeratedWorld::make(3, 2, {{0}, {1, 2}});
    AbductiveTable t = abductive_policy_oracle(policy, w);

    for (size_t yi = 0; yi < w.responses.size(); ++yi) {
        double q = 0.0;
        std::vector<double> joint(w.prompts.size());
        for (size_t xi = 0; xi < w.prompts.size(); ++xi) {
            joint[xi] =
                std::exp(policy.log_prob_sum(w.prompts[xi], w.responses[yi])) * w.prompt_prior[xi];
            q += joint[xi];
        }
        CHECK(t.q[yi] == doctest::Approx(q).epsilon(1e-14));
        for (size_t xi = 0; xi < w.prompts.size(); ++xi) {
            CHECK(t.posterior(static_cast<Eigen::Index>(yi), static_cast<Eigen::Index>(xi)) ==
                  doctest::Approx(joint[xi] / q).epsilon(1e-14));
        }
    }
}

TEST_CASE("unreachable responses raise a numeric fault") {
    EnumeratedWorld w = EnumeratedWorld::make(2, 1, {{0}, {1}});
    SeqLogProb dead = [](const TokenSequence&, const TokenSequence&) { return -1e9; };
    CHECK_THROWS_AS(abductive_policy_oracle(dead, w), NumericFault);
}

TEST_CASE("the two preference-margin forms coincide exactly at policy == ref") {
    LmPolicy policy = LmPolicy::init(micro_config(4, 8));
    LmPolicy ref = policy.clone_frozen();
    EnumeratedWorld w = EnumeratedWorld::make(4, 2, {{0}, {1}, {2}});
    auto triples = sample_triples(w, 20, 11);
    CHECK(verify_prop1(policy, ref, w, 0.1, triples) == 0.0);
}

TEST_CASE("the swapped-psi form equals the abductive-policy form on micro policies") {
    EnumeratedWorld w = EnumeratedWorld::make(3, 2, {{0}, {1, 0}, {2, 2}});
    auto triples = sample_triples(w, 40, 12);
    for (uint64_t seed = 0; seed < 5; ++seed) {
        LmPolicy policy = LmPolicy::init(micro_config(3, 100 + seed));
        LmPolicy ref = LmPolicy::init(micro_config(3, 200 + seed)).clone_frozen();
        double disc = verify_prop1(policy, ref, w, 0.1, triples);
        INFO("seed ", seed, " discrepancy ", disc);
        CHECK(disc <= 1e-9);
    }
}

TEST_CASE("mismatched prompt priors break the equivalence") {
    EnumeratedWorld w = EnumeratedWorld::make(3, 2, {{0}, {1}, {2}});
    auto triples = sample_triples(w, 40, 13);
    LmPolicy policy = LmPolicy::init(micro_config(3, 300));
    LmPolicy ref = LmPolicy::init(micro_config(3, 301)).clone_frozen();
    std::vector<double> p_theta = {0.6, 0.3, 0.1};
    std::vector<double> p_ref = {0.1, 0.3, 0.6};
    double disc = prop1_discrepancy_with_priors(policy, ref, w, 0.1, triples, p_theta, p_ref);
    CHECK(disc > 1e-6);
}

TEST_CASE("ablation runners produce one row per grid point and share seeds") {
    // small synthetic set via the generator
    datagen::GenConfig gcfg;
    gcfg.num_entities = 4;
    gcfg.num_templates = 2;
    gcfg.seed = 9;
    auto synth = datagen::synthesize_corpus(gcfg);
    auto scored = datagen::stage2_filter(datagen::scorer_of(synth.world), synth.candidates, 0.0);
    REQUIRE(scored.size() >= 10);
    std::vector<datagen::AbductiveRecord> train(scored.begin(), scored.begin() + 8);
    std::vector<datagen::AbductiveRecord> eval(scored.begin() + 8, scored.end());

    LmConfig mcfg = micro_config(synth.world.vocab_size(), 10);
    LmPolicy base = LmPolicy::init(mcfg);

    TrainConfig tmpl;
    tmpl.epochs = 1;
    tmpl.batch_size = 4;
    tmpl.lr = 5e-4;
    tmpl.seed = 21;

    std::vector<double> grid = {0.0, 0.5, 1.0};
    std::string csv = run_lambda_ablation(base, train, eval, tmpl, grid);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 4); // header + 3 rows
    CHECK(csv.rfind("lambda,accuracy,abductive_accuracy\n", 0) == 0);

    // the lambda = 1 row equals a standalone standard-DPO run
    TrainConfig std_cfg = tmpl;
    std_cfg.loss.direction = Direction::standard;
    LmPolicy policy = base;
    LmPolicy ref = base.clone_frozen();
    finetune(policy, ref, to_train_items(train), std_cfg);
    EvalReport rep = evaluate(policy, eval);
    char expect[128];
    std::snprintf(expect, sizeof(expect), "1,%.6f,%.6f", rep.accuracy, rep.abductive_accuracy);
    CHECK(csv.find(expect) != std::string::npos);

    // rerun determinism
    CHECK(run_lambda_ablation(base, train, eval, tmpl, grid) == csv);
}

TEST_CASE("dpop penalty ablation at zero equals the multitask dpo run") {
    datagen::GenConfig gcfg;
    gcfg.num_entities = 4;
    gcfg.num_templates = 2;
    gcfg.seed = 14;
    auto synth = datagen::synthesize_corpus(gcfg);
    auto scored = datagen::stage2_filter(datagen::scorer_of(synth.world), synth.candidates, 0.0);
    std::vector<datagen::AbductiveRecord> train(scored.begin(), scored.begin() + 8);
    std::vector<datagen::AbductiveRecord> eval(scored.begin() + 8, scored.end());
    LmPolicy base = LmPolicy::init(micro_config(synth.world.vocab_size(), 15));

    TrainConfig tmpl;
    tmpl.epochs = 1;
    tmpl.batch_size = 4;
    tmpl.lr = 5e-4;
    tmpl.seed = 22;
    tmpl.loss.lambda_multi = 0.5;

    std::vector<double> grid = {0.0, 0.4};
    std::string csv = run_dpop_penalty_ablation(base, train, eval, tmpl, grid);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);

    TrainConfig multi = tmpl;
    multi.loss.objective = Objective::dpo;
    multi.loss.direction = Direction::multitask;
    LmPolicy policy = base;
    LmPolicy ref = base.clone_frozen();
    finetune(policy, ref, to_train_items(train), multi);
    EvalReport rep = evaluate(policy, eval);
    char expect[128];
    std::snprintf(expect, sizeof(expect), "0,%.6f,%.6f", rep.accuracy, rep.abductive_accuracy);
    CHECK(csv.find(expect) != std::string::npos);
}

TEST_CASE("delta ablation covers the grid deterministically") {
    datagen::GenConfig gcfg;
    gcfg.num_entities = 6;
    gcfg.num_templates = 3;
    gcfg.seed = 16;
    auto synth = datagen::synthesize_corpus(gcfg);
    auto scored = datagen::stage2_filter(datagen::scorer_of(synth.world), synth.candidates, 0.0);
    LmPolicy base = LmPolicy::init(micro_config(synth.world.vocab_size(), 17));

    TrainConfig tmpl;
    tmpl.loss.direction = Direction::abductive;
    tmpl.epochs = 2;
    tmpl.batch_size = 8;
    tmpl.lr = 5e-4;
    tmpl.seed = 23;

    std::vector<double> deltas = {0.1, 0.8};
    std::string csv =
        run_delta_ablation(base, scored, 0.8, gcfg.seed, tmpl, deltas, deltas);
    // header + |dt| x epochs x |de| rows
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 2 * 2 * 2);
    CHECK(csv.rfind("delta_train,delta_eval,epoch,accuracy,abductive_accuracy\n", 0) == 0);
    CHECK(run_delta_ablation(base, scored, 0.8, gcfg.seed, tmpl, deltas, deltas) == csv);
}
