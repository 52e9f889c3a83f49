#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "apl/lm.hpp"
#include "apl/losses.hpp"

namespace apl::datagen {

struct GenConfig {
    int num_templates = 8;
    int num_entities = 28;
    double delta = 0.1;          // nats per token, stage-2 margin threshold
    double all_threshold = -0.5; // nats per token, stage-1 hallucination bar
    uint64_t seed = 20240801;

    void validate() const;
};

// One dataset entry. The standard view is (x = original_prompt,
// y_w = right_answer, y_l = hallucinated_answer); the abductive view is
// (x_w = modified_prompt, x_l = original_prompt, y = hallucinated_answer).
// Both views of one record share the hallucinated answer.
struct AbductiveRecord {
    std::string id;
    TokenSequence original_prompt;
    TokenSequence modified_prompt;
    TokenSequence right_answer;
    TokenSequence hallucinated_answer;
    double margin = std::numeric_limits<double>::quiet_NaN();
    std::string text_original;
    std::string text_modified;
};

ResponsePair response_view(const AbductiveRecord& r);
PromptPair prompt_view(const AbductiveRecord& r);

// Symbolic QA world behind the generator. Facts are (entity, relation, value)
// triples; each (entity, relation) cell has a "popular" value that dominates
// the corpus. Two per-cell dials: support strength, how decisively the stated
// background picks the answer in the world itself (this is what the stage-2
// verifier measures), and corpus faithfulness, how often corpus documents
// actually answer from the stated background instead of the popular prior.
// Faithfulness grows with support but is capped low, so a model trained on
// the corpus keeps defaulting to the popular answer even where the background
// plainly says otherwise.
class World {
public:
    static World make(const GenConfig& cfg);

    static constexpr int kNumValues = 8;
    static constexpr int kDocsPerCell = 6;
    static constexpr double kPopularProb = 0.75;
    static constexpr double kSupportMin = 0.05;
    static constexpr double kSupportMax = 0.95;
    static constexpr double kFaithBase = 0.02;
    static constexpr double kFaithSlope = 0.35;
    static constexpr double kAnswerNoise = 0.08;
    static constexpr int kAnswerLen = 2; // answer token + end token

    int vocab_size() const;
    int eos_token() const { return 0; }

    TokenSequence prompt(int entity, int rel, int value) const;
    TokenSequence answer(int value) const;

    int popular_value(int entity, int rel) const;
    // semantic strength of the background for this cell, in (0, 1)
    double support(int entity, int rel) const;
    // probability that a corpus document for this cell answers faithfully
    double corpus_faithfulness(int entity, int rel) const;

    // world conditional p(answer | background states bg_value); the stage-2
    // verifier scores against this
    double support_prob(int entity, int rel, int bg_value, int answer_value) const;
    // exact average log-likelihood of `answer` given `prompt` under the world
    // conditional, nats per answer token
    double avg_log_lik(const TokenSequence& prompt, const TokenSequence& answer) const;

    std::string token_name(int tok) const;
    std::string render(const TokenSequence& seq) const;

private:
    GenConfig cfg_;
    std::vector<int> popular_;
    std::vector<double> support_;

    int entity_tok(int e) const { return 4 + e; }
    int rel_tok(int k) const { return 4 + cfg_.num_entities + k; }
    int question_tok(int k) const { return 4 + cfg_.num_entities + cfg_.num_templates + k; }
    int value_tok(int v) const { return 4 + cfg_.num_entities + 2 * cfg_.num_templates + v; }
    int answer_tok(int v) const {
        return 4 + cfg_.num_entities + 2 * cfg_.num_templates + kNumValues + v;
    }
    friend struct WorldParse;
};

struct SynthOutput {
    std::vector<TokenSequence> corpus; // MLE pre-training documents
    std::vector<AbductiveRecord> candidates;
    World world;
};

// Grammar-based corpus plus candidate records. The corpus is skewed so that
// MLE on it yields a model that keeps preferring each cell's popular answer
// even when the stated background disagrees; each candidate's modified prompt
// is the one under which the hallucinated answer is factually supported.
SynthOutput synthesize_corpus(const GenConfig& cfg);

// avg-log-likelihood scorer, nats per answer token
using SeqScorer = std::function<double(const TokenSequence& prompt, const TokenSequence& answer)>;

SeqScorer scorer_of(const LmPolicy& policy);
SeqScorer scorer_of(const World& world);

// keeps records the scorer still assigns the hallucination at least
// `all_threshold` nats/token under the original prompt
std::vector<AbductiveRecord> stage1_filter(const SeqScorer& scorer,
                                           std::span<const AbductiveRecord> candidates,
                                           double all_threshold);
std::vector<AbductiveRecord> stage1_filter(const LmPolicy& base,
                                           std::span<const AbductiveRecord> candidates,
                                           double all_threshold);

// computes margin = ALL(hallucination | modified) - ALL(hallucination |
// original) under the scorer, stores it, and keeps records with margin >= delta
std::vector<AbductiveRecord> stage2_filter(const SeqScorer& scorer,
                                           std::span<const AbductiveRecord> candidates, double delta);
std::vector<AbductiveRecord> stage2_filter(const LmPolicy& base,
                                           std::span<const AbductiveRecord> candidates, double delta);

// deterministic id-hash split assignment; shared by emit_dataset and the
// delta ablation so a record never switches sides between datasets
bool assigned_to_train(const std::string& id, double split_ratio, uint64_t seed);

struct SplitResult {
    std::filesystem::path train_path, eval_path;
    size_t n_train = 0, n_eval = 0;
};

SplitResult emit_dataset(std::span<const AbductiveRecord> records, double split_ratio,
                         uint64_t seed, const std::filesystem::path& dir);

std::string record_to_jsonl_line(const AbductiveRecord& r);
std::vector<AbductiveRecord> load_records_jsonl(const std::filesystem::path& path);
void write_records_jsonl(std::span<const AbductiveRecord> records,
                         const std::filesystem::path& path);

void write_corpus_jsonl(std::span<const TokenSequence> corpus, const World& world,
                        const std::filesystem::path& path);
std::vector<TokenSequence> load_corpus_jsonl(const std::filesystem::path& path);

} // namespace apl::datagen
