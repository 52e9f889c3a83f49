#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>
#include <set>

#include "apl/datagen.hpp"
#include "apl/util.hpp"

using namespace apl;
using namespace apl::datagen;

namespace {

GenConfig small_config() {
    GenConfig cfg;
    cfg.num_entities = 6;
    cfg.num_templates = 3;
    cfg.seed = 321;
    return cfg;
}

LmConfig lm_for(const World& world, uint64_t seed = 5) {
    LmConfig cfg;
    cfg.vocab_size = world.vocab_size();
    cfg.context_len = 16;
    cfg.embed_dim = 8;
    cfg.num_layers = 1;
    cfg.num_heads = 2;
    cfg.seed = seed;
    return cfg;
}

} // namespace

TEST_CASE("synthesis is a pure function of its config") {
    SynthOutput a = synthesize_corpus(small_config());
    SynthOutput b = synthesize_corpus(small_config());
    REQUIRE(a.corpus.size() == b.corpus.size());
    CHECK(a.corpus == b.corpus);
    REQUIRE(a.candidates.size() == b.candidates.size());
    for (size_t i = 0; i < a.candidates.size(); ++i) {
        CHECK(record_to_jsonl_line(a.candidates[i]) == record_to_jsonl_line(b.candidates[i]));
    }
}

TEST_CASE("prompts of a candidate differ in exactly the fact slot") {
    SynthOutput s = synthesize_corpus(small_config());
    CHECK(s.candidates.size() >= 10);
    for (const auto& r : s.candidates) {
        REQUIRE(r.original_prompt.size() == r.modified_prompt.size());
        int diffs = 0;
        size_t where = 0;
        for (size_t i = 0; i < r.original_prompt.size(); ++i) {
            if (r.original_prompt[i] != r.modified_prompt[i]) {
                ++diffs;
                where = i;
            }
        }
        CHECK(diffs == 1);
        CHECK(where == 3); // the background value slot
        CHECK(r.right_answer != r.hallucinated_answer);
    }
}

TEST_CASE("degenerate generator configs are rejected") {
    GenConfig cfg = small_config();
    cfg.num_templates = 0;
    CHECK_THROWS_AS(synthesize_corpus(cfg), ConfigError);
    cfg = small_config();
    cfg.num_entities = 0;
    CHECK_THROWS_AS(synthesize_corpus(cfg), ConfigError);
    cfg = small_config();
    cfg.delta = -0.1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    // 1 entity x 1 template yields only kNumValues - 1 candidates
    cfg = small_config();
    cfg.num_entities = 1;
    cfg.num_templates = 1;
    CHECK_THROWS_AS(synthesize_corpus(cfg), ConfigError);
}

TEST_CASE("stage 1 keeps exactly the records above the likelihood bar") {
    SynthOutput s = synthesize_corpus(small_config());
    LmPolicy base = LmPolicy::init(lm_for(s.world));

    auto all = stage1_filter(base, s.candidates, -std::numeric_limits<double>::infinity());
    CHECK(all.size() == s.candidates.size());
    auto none = stage1_filter(base, s.candidates, std::numeric_limits<double>::infinity());
    CHECK(none.empty());

    // a fresh random-init policy sits near the uniform distribution
    double thr = -std::log(static_cast<double>(s.world.vocab_size()));
    auto kept = stage1_filter(base, s.candidates, thr);
    // brute-force recomputation through the model's own scoring
    std::set<std::string> expect;
    for (const auto& r : s.candidates) {
        if (base.avg_log_lik(r.original_prompt, r.hallucinated_answer) >= thr) expect.insert(r.id);
    }
    std::set<std::string> got;
    for (const auto& r : kept) got.insert(r.id);
    CHECK(got == expect);
}

TEST_CASE("stage 2 stores margins and thresholds them") {
    SynthOutput s = synthesize_corpus(small_config());
    SeqScorer world_scorer = scorer_of(s.world);

    CHECK_THROWS_AS(stage2_filter(world_scorer, s.candidates, -0.01), ConfigError);

    auto weak = stage2_filter(world_scorer, s.candidates, 0.0);
    for (const auto& r : weak) {
        CHECK(std::isfinite(r.margin));
        CHECK(r.margin >= 0.0);
        double recomputed = world_scorer(r.modified_prompt, r.hallucinated_answer) -
                            world_scorer(r.original_prompt, r.hallucinated_answer);
        CHECK(r.margin == recomputed);
    }

    auto tight = stage2_filter(world_scorer, s.candidates, 1.0);
    auto loose = stage2_filter(world_scorer, s.candidates, 0.1);
    std::set<std::string> loose_ids;
    for (const auto& r : loose) loose_ids.insert(r.id);
    for (const auto& r : tight) {
        CHECK(r.margin >= 1.0);
        CHECK(loose_ids.count(r.id) == 1); // monotone thresholding
    }
    CHECK(tight.size() < loose.size());
}

TEST_CASE("default delta matches the likelihood-margin convention") {
    GenConfig cfg;
    CHECK(cfg.delta == 0.1);
}

TEST_CASE("world margins follow the generator's faithfulness") {
    SynthOutput s = synthesize_corpus(small_config());
    const World& w = s.world;
    for (const auto& r : s.candidates) {
        // hallucinated answer is certain under the modified background
        CHECK(w.avg_log_lik(r.modified_prompt, r.hallucinated_answer) == 0.0);
        double all_orig = w.avg_log_lik(r.original_prompt, r.hallucinated_answer);
        CHECK(all_orig < 0.0);
    }
}

TEST_CASE("dataset emission splits disjointly and round-trips") {
    SynthOutput s = synthesize_corpus(small_config());
    auto records = stage2_filter(scorer_of(s.world), s.candidates, 0.1);
    REQUIRE(records.size() >= 10);

    auto dir = std::filesystem::temp_directory_path() / "apl_test_emit";
    std::filesystem::remove_all(dir);
    SplitResult split = emit_dataset(records, 0.8, 99, dir);
    CHECK(split.n_train + split.n_eval == records.size());

    auto train = load_records_jsonl(split.train_path);
    auto eval = load_records_jsonl(split.eval_path);
    CHECK(train.size() == split.n_train);
    CHECK(eval.size() == split.n_eval);

    std::set<std::string> train_ids, eval_ids;
    for (const auto& r : train) train_ids.insert(r.id);
    for (const auto& r : eval) eval_ids.insert(r.id);
    for (const auto& id : eval_ids) CHECK(train_ids.count(id) == 0);

    // round-trip parse equality against the in-memory records
    std::map<std::string, const AbductiveRecord*> by_id;
    for (const auto& r : records) by_id[r.id] = &r;
    for (const auto& r : train) {
        REQUIRE(by_id.count(r.id) == 1);
        CHECK(record_to_jsonl_line(r) == record_to_jsonl_line(*by_id[r.id]));
    }

    CHECK_THROWS_AS(emit_dataset(records, 1.2, 99, dir), ConfigError);
    CHECK_THROWS_AS(emit_dataset(records, 0.0, 99, dir), ConfigError);
    std::filesystem::remove_all(dir);
}

TEST_CASE("emitted records satisfy all three stage predicates when re-checked") {
    SynthOutput s = synthesize_corpus(small_config());
    LmPolicy base = LmPolicy::init(lm_for(s.world));
    double thr = -std::log(static_cast<double>(s.world.vocab_size())) - 0.05;
    auto stage1 = stage1_filter(base, s.candidates, thr);
    auto records = stage2_filter(scorer_of(s.world), stage1, 0.1);
    REQUIRE(!records.empty());
    for (const auto& r : records) {
        // stage 1: the base still rates the hallucination above the bar
        CHECK(base.avg_log_lik(r.original_prompt, r.hallucinated_answer) >= thr);
        // stage 2: margin toward the modified prompt
        double m = s.world.avg_log_lik(r.modified_prompt, r.hallucinated_answer) -
                   s.world.avg_log_lik(r.original_prompt, r.hallucinated_answer);
        CHECK(m >= 0.1);
        CHECK(r.margin == m);
        // stage 3 by construction: the modified background names the value the
        // hallucinated answer asserts
        CHECK(r.modified_prompt[3] - r.hallucinated_answer[0] ==
              -(World::kNumValues)); // value token vs matching answer token
    }
}

TEST_CASE("the two views of a record share the hallucinated pair") {
    SynthOutput s = synthesize_corpus(small_config());
    const AbductiveRecord& r = s.candidates.front();
    ResponsePair resp = response_view(r);
    PromptPair prom = prompt_view(r);
    CHECK(prom.x_l == resp.x);  // original prompt
    CHECK(prom.y == resp.y_l);  // hallucinated answer
    CHECK(prom.x_w == r.modified_prompt);
    CHECK(resp.y_w == r.right_answer);
}

TEST_CASE("id-hash split assignment is deterministic") {
    CHECK(assigned_to_train("some-id", 0.8, 1) == assigned_to_train("some-id", 0.8, 1));
    int n_train = 0;
    for (int i = 0; i < 2000; ++i) {
        n_train += assigned_to_train("rec" + std::to_string(i), 0.8, 7);
    }
    CHECK(n_train > 1400);
    CHECK(n_train < 1800);
}

TEST_CASE("corpus files round-trip") {
    SynthOutput s = synthesize_corpus(small_config());
    auto path = std::filesystem::temp_directory_path() / "apl_test_corpus.jsonl";
    write_corpus_jsonl(s.corpus, s.world, path);
    auto loaded = load_corpus_jsonl(path);
    CHECK(loaded == s.corpus);
    std::filesystem::remove(path);
}
