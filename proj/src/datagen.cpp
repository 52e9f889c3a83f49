#include "apl/datagen.hpp"

#include <cmath>
#include <sstream>

#include <nlohmann/json.hpp>

#include "apl/error.hpp"
#include "apl/util.hpp"

namespace apl::datagen {

using json = nlohmann::ordered_json;

void GenConfig::validate() const {
    if (num_templates <= 0) throw ConfigError("GenConfig: num_templates must be positive");
    if (num_entities <= 0) throw ConfigError("GenConfig: num_entities must be positive");
    if (delta < 0.0) throw ConfigError("GenConfig: delta must be non-negative");
}

ResponsePair response_view(const AbductiveRecord& r) {
    return {r.original_prompt, r.right_answer, r.hallucinated_answer, r.id};
}

PromptPair prompt_view(const AbductiveRecord& r) {
    return {r.modified_prompt, r.original_prompt, r.hallucinated_answer, r.id};
}

namespace {

const char* kEntityNames[] = {
    "ada",  "bo",   "cy",   "dee",  "eli",  "fay",  "gus",  "hal",  "ida",  "jo",
    "kip",  "lena", "mona", "ned",  "ola",  "pam",  "quin", "rex",  "sal",  "tess",
    "uma",  "vik",  "wren", "xan",  "yuri", "zane", "ann",  "ben",  "cleo", "dora",
    "evan", "finn", "gwen", "hugo", "iris", "jack", "kira", "liam", "maya", "nora"};

const char* kRelationNames[] = {"color", "size", "origin", "rank",
                                "team",  "food", "tool",   "mood"};

const char* kValueNames[] = {"red", "blue", "green", "gold", "gray", "pink", "teal", "ivory"};

std::string entity_name(int e) {
    if (e < static_cast<int>(std::size(kEntityNames))) return kEntityNames[e];
    return "ent" + std::to_string(e);
}

std::string relation_name(int k) {
    if (k < static_cast<int>(std::size(kRelationNames))) return kRelationNames[k];
    return "rel" + std::to_string(k);
}

std::string value_name(int v) {
    if (v < static_cast<int>(std::size(kValueNames))) return kValueNames[v];
    return "val" + std::to_string(v);
}

} // namespace

// parsed [BG, entity, rel, value, QM, question, entity, AM] prompt
struct WorldParse {
    int entity = -1, rel = -1, value = -1;

    static WorldParse from_prompt(const World& w, const TokenSequence& prompt) {
        const GenConfig& cfg = w.cfg_;
        if (prompt.size() != 8 || prompt[0] != 1 || prompt[4] != 2 || prompt[7] != 3) {
            throw ShapeError("World: prompt does not match the generator grammar");
        }
        WorldParse p;
        p.entity = prompt[1] - 4;
        p.rel = prompt[2] - (4 + cfg.num_entities);
        p.value = prompt[3] - (4 + cfg.num_entities + 2 * cfg.num_templates);
        int q = prompt[5] - (4 + cfg.num_entities + cfg.num_templates);
        if (p.entity < 0 || p.entity >= cfg.num_entities || p.rel < 0 || p.rel >= cfg.num_templates ||
            p.value < 0 || p.value >= World::kNumValues || q != p.rel || prompt[6] != prompt[1]) {
            throw ShapeError("World: prompt does not match the generator grammar");
        }
        return p;
    }
};

World World::make(const GenConfig& cfg) {
    cfg.validate();
    World w;
    w.cfg_ = cfg;
    Rng rng(derive_seed(cfg.seed, 0));
    w.popular_.resize(static_cast<size_t>(cfg.num_entities) * cfg.num_templates);
    w.support_.resize(w.popular_.size());
    for (size_t i = 0; i < w.popular_.size(); ++i) {
        w.popular_[i] = static_cast<int>(rng.uniform_int(kNumValues));
        w.support_[i] = rng.uniform(kSupportMin, kSupportMax);
    }
    return w;
}

int World::vocab_size() const {
    return 4 + cfg_.num_entities + 2 * cfg_.num_templates + 2 * kNumValues;
}

TokenSequence World::prompt(int entity, int rel, int value) const {
    return {1, entity_tok(entity), rel_tok(rel), value_tok(value),
            2, question_tok(rel), entity_tok(entity), 3};
}

TokenSequence World::answer(int value) const { return {answer_tok(value), eos_token()}; }

int World::popular_value(int entity, int rel) const {
    return popular_[static_cast<size_t>(entity) * cfg_.num_templates + rel];
}

double World::support(int entity, int rel) const {
    return support_[static_cast<size_t>(entity) * cfg_.num_templates + rel];
}

double World::corpus_faithfulness(int entity, int rel) const {
    return kFaithBase + kFaithSlope * support(entity, rel);
}

double World::support_prob(int entity, int rel, int bg_value, int answer_value) const {
    double s = support(entity, rel);
    int pop = popular_value(entity, rel);
    double p = 0.0;
    if (answer_value == bg_value) p += s;
    if (answer_value == pop) p += 1.0 - s;
    return p;
}

double World::avg_log_lik(const TokenSequence& prompt, const TokenSequence& answer) const {
    WorldParse p = WorldParse::from_prompt(*this, prompt);
    if (answer.size() != kAnswerLen || answer[1] != eos_token()) {
        throw ShapeError("World: answer does not match the generator grammar");
    }
    int av = answer[0] - (4 + cfg_.num_entities + 2 * cfg_.num_templates + kNumValues);
    if (av < 0 || av >= kNumValues) {
        throw ShapeError("World: answer token outside the answer range");
    }
    double prob = support_prob(p.entity, p.rel, p.value, av);
    // end token follows the answer token with probability one
    return std::log(std::max(prob, 1e-300)) / static_cast<double>(kAnswerLen);
}

std::string World::token_name(int tok) const {
    if (tok == 0) return "<end>";
    if (tok == 1) return "background:";
    if (tok == 2) return "question:";
    if (tok == 3) return "answer:";
    int e = tok - 4;
    if (e < cfg_.num_entities) return entity_name(e);
    int k = tok - (4 + cfg_.num_entities);
    if (k < cfg_.num_templates) return relation_name(k);
    int q = tok - (4 + cfg_.num_entities + cfg_.num_templates);
    if (q < cfg_.num_templates) return "what-" + relation_name(q) + "-of";
    int v = tok - (4 + cfg_.num_entities + 2 * cfg_.num_templates);
    if (v < kNumValues) return value_name(v);
    int a = tok - (4 + cfg_.num_entities + 2 * cfg_.num_templates + kNumValues);
    if (a < kNumValues) return value_name(a);
    return "tok" + std::to_string(tok);
}

std::string World::render(const TokenSequence& seq) const {
    std::string out;
    for (size_t i = 0; i < seq.size(); ++i) {
        if (i) out += ' ';
        out += token_name(seq[i]);
    }
    return out;
}

SynthOutput synthesize_corpus(const GenConfig& cfg) {
    cfg.validate();
    World world = World::make(cfg);
    Rng rng(derive_seed(cfg.seed, 1));

    std::vector<TokenSequence> corpus;
    corpus.reserve(static_cast<size_t>(cfg.num_entities) * cfg.num_templates * World::kDocsPerCell);
    for (int e = 0; e < cfg.num_entities; ++e) {
        for (int k = 0; k < cfg.num_templates; ++k) {
            int pop = world.popular_value(e, k);
            double faith = world.corpus_faithfulness(e, k);
            for (int d = 0; d < World::kDocsPerCell; ++d) {
                int v;
                if (rng.uniform() < World::kPopularProb) {
                    v = pop;
                } else {
                    int off = static_cast<int>(rng.uniform_int(World::kNumValues - 1));
                    v = off >= pop ? off + 1 : off;
                }
                int a;
                if (rng.uniform() < faith) {
                    a = v;
                } else if (rng.uniform() < World::kAnswerNoise) {
                    int off = static_cast<int>(rng.uniform_int(World::kNumValues - 1));
                    a = off >= pop ? off + 1 : off;
                } else {
                    a = pop;
                }
                TokenSequence doc = world.prompt(e, k, v);
                TokenSequence ans = world.answer(a);
                doc.insert(doc.end(), ans.begin(), ans.end());
                corpus.push_back(std::move(doc));
            }
        }
    }

    std::vector<AbductiveRecord> candidates;
    for (int e = 0; e < cfg.num_entities; ++e) {
        for (int k = 0; k < cfg.num_templates; ++k) {
            int pop = world.popular_value(e, k);
            for (int v = 0; v < World::kNumValues; ++v) {
                if (v == pop) continue;
                AbductiveRecord r;
                r.id = "r-e" + std::to_string(e) + "-k" + std::to_string(k) + "-v" + std::to_string(v);
                r.original_prompt = world.prompt(e, k, v);
                r.modified_prompt = world.prompt(e, k, pop);
                r.right_answer = world.answer(v);
                r.hallucinated_answer = world.answer(pop);
                r.text_original = world.render(r.original_prompt);
                r.text_modified = world.render(r.modified_prompt);
                candidates.push_back(std::move(r));
            }
        }
    }
    if (candidates.size() < 10) {
        throw ConfigError("synthesize_corpus: configuration yields only " +
                          std::to_string(candidates.size()) + " candidates (< 10)");
    }
    return {std::move(corpus), std::move(candidates), std::move(world)};
}

SeqScorer scorer_of(const LmPolicy& policy) {
    return [&policy](const TokenSequence& x, const TokenSequence& y) {
        return policy.avg_log_lik(x, y);
    };
}

SeqScorer scorer_of(const World& world) {
    return [&world](const TokenSequence& x, const TokenSequence& y) {
        return world.avg_log_lik(x, y);
    };
}

std::vector<AbductiveRecord> stage1_filter(const SeqScorer& scorer,
                                           std::span<const AbductiveRecord> candidates,
                                           double all_threshold) {
    std::vector<AbductiveRecord> kept;
    for (const auto& r : candidates) {
        if (scorer(r.original_prompt, r.hallucinated_answer) >= all_threshold) kept.push_back(r);
    }
    return kept;
}

std::vector<AbductiveRecord> stage1_filter(const LmPolicy& base,
                                           std::span<const AbductiveRecord> candidates,
                                           double all_threshold) {
    return stage1_filter(scorer_of(base), candidates, all_threshold);
}

std::vector<AbductiveRecord> stage2_filter(const SeqScorer& scorer,
                                           std::span<const AbductiveRecord> candidates,
                                           double delta) {
    if (delta < 0.0) throw ConfigError("stage2_filter: negative delta");
    std::vector<AbductiveRecord> kept;
    for (const auto& r : candidates) {
        double margin = scorer(r.modified_prompt, r.hallucinated_answer) -
                        scorer(r.original_prompt, r.hallucinated_answer);
        if (margin >= delta) {
            kept.push_back(r);
            kept.back().margin = margin;
        }
    }
    return kept;
}

std::vector<AbductiveRecord> stage2_filter(const LmPolicy& base,
                                           std::span<const AbductiveRecord> candidates,
                                           double delta) {
    return stage2_filter(scorer_of(base), candidates, delta);
}

bool assigned_to_train(const std::string& id, double split_ratio, uint64_t seed) {
    uint64_t h = derive_seed(seed, fnv1a64(id.data(), id.size()));
    double u = static_cast<double>(h >> 11) * (1.0 / 9007199254740992.0);
    return u < split_ratio;
}

std::string record_to_jsonl_line(const AbductiveRecord& r) {
    json j;
    j["id"] = r.id;
    j["original_prompt"] = r.original_prompt;
    j["modified_prompt"] = r.modified_prompt;
    j["right_answer"] = r.right_answer;
    j["hallucinated_answer"] = r.hallucinated_answer;
    j["margin"] = r.margin;
    j["text_original"] = r.text_original;
    j["text_modified"] = r.text_modified;
    return j.dump();
}

static AbductiveRecord record_from_json(const json& j) {
    AbductiveRecord r;
    r.id = j.at("id").get<std::string>();
    r.original_prompt = j.at("original_prompt").get<TokenSequence>();
    r.modified_prompt = j.at("modified_prompt").get<TokenSequence>();
    r.right_answer = j.at("right_answer").get<TokenSequence>();
    r.hallucinated_answer = j.at("hallucinated_answer").get<TokenSequence>();
    r.margin = j.at("margin").get<double>();
    r.text_original = j.at("text_original").get<std::string>();
    r.text_modified = j.at("text_modified").get<std::string>();
    return r;
}

void write_records_jsonl(std::span<const AbductiveRecord> records,
                         const std::filesystem::path& path) {
    std::string out;
    for (const auto& r : records) {
        out += record_to_jsonl_line(r);
        out += '\n';
    }
    atomic_write_file(path, out);
}

std::vector<AbductiveRecord> load_records_jsonl(const std::filesystem::path& path) {
    std::istringstream in(read_text_file(path));
    std::vector<AbductiveRecord> records;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            records.push_back(record_from_json(json::parse(line)));
        } catch (const json::exception& e) {
            throw IoError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return records;
}

SplitResult emit_dataset(std::span<const AbductiveRecord> records, double split_ratio,
                         uint64_t seed, const std::filesystem::path& dir) {
    if (!(split_ratio > 0.0 && split_ratio < 1.0)) {
        throw ConfigError("emit_dataset: split_ratio must lie in (0, 1)");
    }
    std::vector<AbductiveRecord> train, eval;
    for (const auto& r : records) {
        (assigned_to_train(r.id, split_ratio, seed) ? train : eval).push_back(r);
    }
    std::filesystem::create_directories(dir);
    SplitResult res;
    res.train_path = dir / "train.jsonl";
    res.eval_path = dir / "eval.jsonl";
    res.n_train = train.size();
    res.n_eval = eval.size();
    write_records_jsonl(train, res.train_path);
    write_records_jsonl(eval, res.eval_path);
    return res;
}

void write_corpus_jsonl(std::span<const TokenSequence> corpus, const World& world,
                        const std::filesystem::path& path) {
    std::string out;
    for (const auto& doc : corpus) {
        json j;
        j["tokens"] = doc;
        j["text"] = world.render(doc);
        out += j.dump();
        out += '\n';
    }
    atomic_write_file(path, out);
}

std::vector<TokenSequence> load_corpus_jsonl(const std::filesystem::path& path) {
    std::istringstream in(read_text_file(path));
    std::vector<TokenSequence> corpus;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            corpus.push_back(json::parse(line).at("tokens").get<TokenSequence>());
        } catch (const json::exception& e) {
            throw IoError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return corpus;
}

} // namespace apl::datagen
