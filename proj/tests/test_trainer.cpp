#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "apl/trainer.hpp"
#include "apl/util.hpp"

using namespace apl;

namespace {

LmConfig micro_config(int vocab = 6, uint64_t seed = 500) {
    LmConfig cfg;
    cfg.vocab_size = vocab;
    cfg.context_len = 16;
    cfg.embed_dim = 8;
    cfg.num_layers = 1;
    cfg.num_heads = 2;
    cfg.seed = seed;
    return cfg;
}

std::vector<TokenSequence> tiny_corpus(int docs, uint64_t seed) {
    Rng rng(seed);
    std::vector<TokenSequence> corpus;
    for (int i = 0; i < docs; ++i) {
        TokenSequence doc;
        doc.push_back(0);
        for (int t = 0; t < 5; ++t) doc.push_back(1 + static_cast<int>(rng.uniform_int(5)));
        corpus.push_back(std::move(doc));
    }
    return corpus;
}

// matched views: (x, y_l) of the standard view is the (x_l, y) of the
// abductive one, as in the generated datasets
TrainItem make_item(TokenSequence x, TokenSequence x_mod, TokenSequence y_w, TokenSequence y_l,
                    std::string id) {
    TrainItem item;
    item.resp = {x, y_w, y_l, id};
    item.prompt = {std::move(x_mod), std::move(x), std::move(y_l), std::move(id)};
    return item;
}

std::vector<TrainItem> tiny_dataset() {
    return {
        make_item({0, 1}, {0, 2}, {3, 0}, {4, 0}, "i0"),
        make_item({0, 2}, {0, 3}, {5, 0}, {1, 0}, "i1"),
        make_item({1, 4}, {1, 5}, {2, 0}, {3, 0}, "i2"),
        make_item({2, 3}, {2, 1}, {4, 0}, {5, 0}, "i3"),
        make_item({3, 3}, {3, 4}, {1, 0}, {2, 0}, "i4"),
        make_item({4, 2}, {4, 1}, {5, 0}, {3, 0}, "i5"),
        make_item({5, 1}, {5, 2}, {2, 0}, {4, 0}, "i6"),
    };
}

} // namespace

TEST_CASE("mle loss is non-increasing across epochs at a tiny learning rate") {
    LmPolicy policy = LmPolicy::init(micro_config(6, 41));
    MleConfig cfg;
    cfg.epochs = 8;
    cfg.lr = 1e-4;
    cfg.batch_size = 10;
    cfg.warmup_ratio = 0.0;
    cfg.seed = 7;
    auto corpus = tiny_corpus(10, 19);
    PretrainStats stats = pretrain_mle(policy, corpus, cfg);
    REQUIRE(stats.epoch_mean_loss.size() == 8);
    for (size_t e = 1; e < stats.epoch_mean_loss.size(); ++e) {
        CHECK(stats.epoch_mean_loss[e] <= stats.epoch_mean_loss[e - 1] + 1e-9);
    }
    CHECK(stats.final_loss < stats.initial_loss);
}

TEST_CASE("pretraining is bit-deterministic for a fixed seed") {
    auto corpus = tiny_corpus(12, 23);
    MleConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 4;
    cfg.seed = 99;

    LmPolicy a = LmPolicy::init(micro_config(6, 42));
    LmPolicy b = LmPolicy::init(micro_config(6, 42));
    pretrain_mle(a, corpus, cfg);
    pretrain_mle(b, corpus, cfg);
    CHECK(a.params_hash() == b.params_hash());
}

TEST_CASE("mle drives next-token distributions toward empirical frequencies") {
    // two documents sharing a prefix; the optimum after [0, 1] is a 50/50
    // split between tokens 2 and 3
    std::vector<TokenSequence> corpus = {{0, 1, 2, 4}, {0, 1, 3, 4}};
    LmPolicy policy = LmPolicy::init(micro_config(5, 43));
    MleConfig cfg;
    cfg.epochs = 400;
    cfg.lr = 5e-3;
    cfg.batch_size = 2;
    cfg.adam.weight_decay = 0.0;
    cfg.seed = 3;
    pretrain_mle(policy, corpus, cfg);

    Tensor rows = policy.position_logprobs({0, 1});
    double p2 = std::exp(rows(1, 2));
    double p3 = std::exp(rows(1, 3));
    CHECK(p2 == doctest::Approx(0.5).epsilon(0.1));
    CHECK(p3 == doctest::Approx(0.5).epsilon(0.1));
    double p1 = std::exp(rows(0, 1)); // deterministic continuation of token 0
    CHECK(p1 > 0.9);
}

TEST_CASE("diverging pretraining aborts with a numeric fault") {
    auto corpus = tiny_corpus(8, 29);
    LmPolicy policy = LmPolicy::init(micro_config(6, 44));
    MleConfig cfg;
    cfg.epochs = 50;
    cfg.lr = 1e5;
    cfg.batch_size = 8;
    CHECK_THROWS_AS(pretrain_mle(policy, corpus, cfg), NumericFault);
}

TEST_CASE("multitask at lambda one reproduces the standard run bitwise") {
    auto items = tiny_dataset();
    LmPolicy base = LmPolicy::init(micro_config(6, 45));
    LmPolicy ref = base.clone_frozen();

    TrainConfig std_cfg;
    std_cfg.loss.objective = Objective::dpo;
    std_cfg.loss.direction = Direction::standard;
    std_cfg.epochs = 3;
    std_cfg.batch_size = 3;
    std_cfg.seed = 77;

    TrainConfig multi_cfg = std_cfg;
    multi_cfg.loss.direction = Direction::multitask;
    multi_cfg.loss.lambda_multi = 1.0;

    LmPolicy a = base;
    DynamicsLog la = finetune(a, ref, items, std_cfg);
    LmPolicy b = base;
    DynamicsLog lb = finetune(b, ref, items, multi_cfg);

    CHECK(a.params_hash() == b.params_hash());
    CHECK(la.to_csv() == lb.to_csv());
}

TEST_CASE("zero learning rate leaves parameters and losses unchanged") {
    auto items = tiny_dataset();
    LmPolicy base = LmPolicy::init(micro_config(6, 46));
    LmPolicy ref = base.clone_frozen();
    TrainConfig cfg;
    cfg.lr = 0.0;
    cfg.epochs = 3;
    cfg.batch_size = 16; // full batch, one step per epoch
    cfg.seed = 5;

    LmPolicy policy = base;
    DynamicsLog log = finetune(policy, ref, items, cfg);
    CHECK(policy.params_hash() == base.params_hash());
    REQUIRE(log.rows.size() == 3);
    CHECK(log.rows[1].loss == log.rows[0].loss);
    CHECK(log.rows[2].loss == log.rows[0].loss);
}

TEST_CASE("one dpo step widens the preference margin") {
    LmPolicy base = LmPolicy::init(micro_config(6, 47));
    LmPolicy ref = base.clone_frozen();
    std::vector<TrainItem> items = {tiny_dataset()[0]};
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 1;
    cfg.lr = 1e-3;
    cfg.warmup_ratio = 0.0;

    const auto& rp = items[0].resp;
    auto margin = [&](const LmPolicy& p) {
        double w = p.log_prob_sum(rp.x, rp.y_w) - ref.log_prob_sum(rp.x, rp.y_w);
        double l = p.log_prob_sum(rp.x, rp.y_l) - ref.log_prob_sum(rp.x, rp.y_l);
        return w - l;
    };
    CHECK(margin(base) == 0.0);
    LmPolicy policy = base;
    finetune(policy, ref, items, cfg);
    CHECK(margin(policy) > 0.0);
}

TEST_CASE("the reference policy is untouched by fine-tuning") {
    auto items = tiny_dataset();
    LmPolicy base = LmPolicy::init(micro_config(6, 48));
    LmPolicy ref = base.clone_frozen();
    uint64_t ref_hash = ref.params_hash();
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 4;
    LmPolicy policy = base;
    finetune(policy, ref, items, cfg);
    CHECK(ref.params_hash() == ref_hash);
    CHECK(policy.params_hash() != ref_hash);
}

TEST_CASE("dynamics rows follow the configured logging arithmetic") {
    auto items = tiny_dataset(); // 7 items
    LmPolicy base = LmPolicy::init(micro_config(6, 49));
    LmPolicy ref = base.clone_frozen();
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 2;
    cfg.grad_accum = 1;
    cfg.log_interval = 2;
    LmPolicy policy = base;
    DynamicsLog log = finetune(policy, ref, items, cfg);
    // 4 steps per epoch, 12 total, every second one logged
    CHECK(log.rows.size() == 6);
    for (size_t i = 1; i < log.rows.size(); ++i) {
        CHECK(log.rows[i].step > log.rows[i - 1].step);
    }
    std::string csv = log.to_csv();
    CHECK(csv.rfind("step,epoch,logp_chosen_std,logp_rejected_std,logp_chosen_abd,"
                    "logp_rejected_abd,loss,grad_norm\n",
                    0) == 0);
}

TEST_CASE("the rejected-response and rejected-prompt trajectories coincide") {
    // the standard view's (x, y_l) is literally the abductive view's (x_l, y)
    auto items = tiny_dataset();
    LmPolicy base = LmPolicy::init(micro_config(6, 50));
    LmPolicy ref = base.clone_frozen();
    TrainConfig cfg;
    cfg.loss.direction = Direction::multitask;
    cfg.loss.lambda_multi = 0.5;
    cfg.epochs = 2;
    cfg.batch_size = 4;
    LmPolicy policy = base;
    DynamicsLog log = finetune(policy, ref, items, cfg);
    for (const auto& row : log.rows) {
        CHECK(row.logp_rejected_std == row.logp_rejected_abd);
    }
}

TEST_CASE("gradient accumulation matches the equivalent single batch") {
    auto items = tiny_dataset();
    items.resize(4);
    LmPolicy base = LmPolicy::init(micro_config(6, 51));
    LmPolicy ref = base.clone_frozen();

    TrainConfig whole;
    whole.epochs = 2;
    whole.batch_size = 4;
    whole.grad_accum = 1;
    whole.seed = 9;
    TrainConfig accum = whole;
    accum.batch_size = 2;
    accum.grad_accum = 2;

    LmPolicy a = base;
    finetune(a, ref, items, whole);
    LmPolicy b = base;
    finetune(b, ref, items, accum);
    // same effective batch; identical up to floating-point regrouping
    double worst = 0.0;
    for (size_t i = 0; i < a.params().size(); ++i) {
        worst = std::max(worst,
                         (a.params()[i].value - b.params()[i].value).cwiseAbs().maxCoeff());
    }
    CHECK(worst <= 1e-9);
}

TEST_CASE("config validation rejects nonsense") {
    TrainConfig cfg;
    cfg.epochs = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = TrainConfig{};
    cfg.batch_size = -1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = TrainConfig{};
    cfg.warmup_ratio = 1.5;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = TrainConfig{};
    cfg.loss.beta = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);

    LmPolicy base = LmPolicy::init(micro_config(6, 52));
    LmPolicy not_frozen = base;
    auto items = tiny_dataset();
    TrainConfig ok;
    CHECK_THROWS_AS(finetune(base, not_frozen, items, ok), ConfigError);
    LmPolicy ref = base.clone_frozen();
    std::vector<TrainItem> empty;
    CHECK_THROWS_AS(finetune(base, ref, empty, ok), ConfigError);
}
