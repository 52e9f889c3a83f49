// Command-line front end: data generation, training, evaluation, ablations,
// and gradient checking over one JSON config tree.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "apl/datagen.hpp"
#include "apl/error.hpp"
#include "apl/evalkit.hpp"
#include "apl/gradcheck.hpp"
#include "apl/lm.hpp"
#include "apl/losses.hpp"
#include "apl/trainer.hpp"
#include "apl/util.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace apl;

namespace {

constexpr const char* kToolVersion = "apl 0.1.0";

struct RunConfig {
    datagen::GenConfig gen;
    LmConfig model;
    MleConfig mle;
    TrainConfig train;
    double split_ratio = 0.8;
    std::vector<double> lambda_grid = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
    std::vector<double> dpop_grid = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
    std::vector<double> delta_train = {0.1, 1.0};
    std::vector<double> delta_eval = {0.1, 1.0};
};

template <class T>
void get_if(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

json loss_to_json(const LossSpec& s) {
    return {{"objective", to_string(s.objective)}, {"direction", to_string(s.direction)},
            {"beta", s.beta},                      {"lambda_multi", s.lambda_multi},
            {"lambda_dpop", s.lambda_dpop}};
}

void loss_from_json(const json& j, LossSpec& s) {
    std::string objective = to_string(s.objective), direction = to_string(s.direction);
    get_if(j, "objective", objective);
    get_if(j, "direction", direction);
    s.objective = objective_from_string(objective);
    s.direction = direction_from_string(direction);
    get_if(j, "beta", s.beta);
    get_if(j, "lambda_multi", s.lambda_multi);
    get_if(j, "lambda_dpop", s.lambda_dpop);
}

json config_to_json(const RunConfig& c) {
    json j;
    j["gen"] = {{"num_templates", c.gen.num_templates}, {"num_entities", c.gen.num_entities},
                {"delta", c.gen.delta},                 {"all_threshold", c.gen.all_threshold},
                {"seed", c.gen.seed}};
    j["model"] = {{"vocab_size", c.model.vocab_size},   {"context_len", c.model.context_len},
                  {"embed_dim", c.model.embed_dim},     {"num_layers", c.model.num_layers},
                  {"num_heads", c.model.num_heads},     {"seed", c.model.seed}};
    j["mle"] = {{"epochs", c.mle.epochs},
                {"lr", c.mle.lr},
                {"batch_size", c.mle.batch_size},
                {"max_grad_norm", c.mle.max_grad_norm},
                {"warmup_ratio", c.mle.warmup_ratio},
                {"adam_beta1", c.mle.adam.beta1},
                {"adam_beta2", c.mle.adam.beta2},
                {"adam_eps", c.mle.adam.eps},
                {"weight_decay", c.mle.adam.weight_decay},
                {"seed", c.mle.seed}};
    j["train"] = {{"loss", loss_to_json(c.train.loss)},
                  {"epochs", c.train.epochs},
                  {"lr", c.train.lr},
                  {"batch_size", c.train.batch_size},
                  {"grad_accum", c.train.grad_accum},
                  {"max_grad_norm", c.train.max_grad_norm},
                  {"warmup_ratio", c.train.warmup_ratio},
                  {"adam_beta1", c.train.adam.beta1},
                  {"adam_beta2", c.train.adam.beta2},
                  {"adam_eps", c.train.adam.eps},
                  {"weight_decay", c.train.adam.weight_decay},
                  {"seed", c.train.seed},
                  {"log_interval", c.train.log_interval}};
    j["split_ratio"] = c.split_ratio;
    j["ablate"] = {{"lambda_grid", c.lambda_grid},
                   {"dpop_grid", c.dpop_grid},
                   {"delta_train", c.delta_train},
                   {"delta_eval", c.delta_eval}};
    return j;
}

RunConfig config_from_json(const json& j) {
    RunConfig c;
    if (j.contains("gen")) {
        const json& g = j.at("gen");
        get_if(g, "num_templates", c.gen.num_templates);
        get_if(g, "num_entities", c.gen.num_entities);
        get_if(g, "delta", c.gen.delta);
        get_if(g, "all_threshold", c.gen.all_threshold);
        get_if(g, "seed", c.gen.seed);
    }
    if (j.contains("model")) {
        const json& m = j.at("model");
        get_if(m, "vocab_size", c.model.vocab_size);
        get_if(m, "context_len", c.model.context_len);
        get_if(m, "embed_dim", c.model.embed_dim);
        get_if(m, "num_layers", c.model.num_layers);
        get_if(m, "num_heads", c.model.num_heads);
        get_if(m, "seed", c.model.seed);
    }
    if (j.contains("mle")) {
        const json& m = j.at("mle");
        get_if(m, "epochs", c.mle.epochs);
        get_if(m, "lr", c.mle.lr);
        get_if(m, "batch_size", c.mle.batch_size);
        get_if(m, "max_grad_norm", c.mle.max_grad_norm);
        get_if(m, "warmup_ratio", c.mle.warmup_ratio);
        get_if(m, "adam_beta1", c.mle.adam.beta1);
        get_if(m, "adam_beta2", c.mle.adam.beta2);
        get_if(m, "adam_eps", c.mle.adam.eps);
        get_if(m, "weight_decay", c.mle.adam.weight_decay);
        get_if(m, "seed", c.mle.seed);
    }
    if (j.contains("train")) {
        const json& t = j.at("train");
        if (t.contains("loss")) loss_from_json(t.at("loss"), c.train.loss);
        get_if(t, "epochs", c.train.epochs);
        get_if(t, "lr", c.train.lr);
        get_if(t, "batch_size", c.train.batch_size);
        get_if(t, "grad_accum", c.train.grad_accum);
        get_if(t, "max_grad_norm", c.train.max_grad_norm);
        get_if(t, "warmup_ratio", c.train.warmup_ratio);
        get_if(t, "adam_beta1", c.train.adam.beta1);
        get_if(t, "adam_beta2", c.train.adam.beta2);
        get_if(t, "adam_eps", c.train.adam.eps);
        get_if(t, "weight_decay", c.train.adam.weight_decay);
        get_if(t, "seed", c.train.seed);
        get_if(t, "log_interval", c.train.log_interval);
    }
    get_if(j, "split_ratio", c.split_ratio);
    if (j.contains("ablate")) {
        const json& a = j.at("ablate");
        get_if(a, "lambda_grid", c.lambda_grid);
        get_if(a, "dpop_grid", c.dpop_grid);
        get_if(a, "delta_train", c.delta_train);
        get_if(a, "delta_eval", c.delta_eval);
    }
    return c;
}

// config file plus repeatable --set key.path=value overrides; flags win
json resolve_config_json(const std::string& config_path, const std::vector<std::string>& sets) {
    json j = json::object();
    if (!config_path.empty()) {
        if (!fs::exists(config_path)) {
            throw ConfigError("config file not found: " + config_path);
        }
        try {
            j = json::parse(read_text_file(config_path));
        } catch (const json::exception& e) {
            throw ConfigError("config parse failed: " + config_path + ": " + e.what());
        }
    }
    for (const auto& kv : sets) {
        auto eq = kv.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("--set expects key.path=value, got: " + kv);
        }
        std::string key = kv.substr(0, eq);
        std::string val = kv.substr(eq + 1);
        std::string pointer = "/";
        for (char ch : key) pointer += ch == '.' ? '/' : ch;
        json parsed;
        try {
            parsed = json::parse(val);
        } catch (const json::exception&) {
            parsed = val;
        }
        try {
            j[json::json_pointer(pointer)] = parsed;
        } catch (const json::exception& e) {
            throw ConfigError("--set " + kv + ": " + e.what());
        }
    }
    return j;
}

fs::path resolve_out_dir(const std::string& out) {
    fs::path p(out);
    const char* root = std::getenv("APL_OUT_ROOT");
    if (root && *root && p.is_relative()) return fs::path(root) / p;
    return p;
}

struct RunMeta {
    std::string command;
    json config;
    json seeds = json::object();
    json inputs = json::object();
    json outputs = json::object();
    std::chrono::steady_clock::time_point started = std::chrono::steady_clock::now();

    void add_input(const fs::path& p) {
        if (!p.empty() && fs::exists(p)) inputs[p.filename().string()] = file_hash_hex(p);
    }
    void add_output(const fs::path& p) { outputs[p.filename().string()] = file_hash_hex(p); }

    void write(const fs::path& dir) const {
        json j;
        j["tool_version"] = kToolVersion;
        j["command"] = command;
        j["config"] = config;
        j["seeds"] = seeds;
        j["inputs"] = inputs;
        j["outputs"] = outputs;
        j["duration_seconds"] =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
        atomic_write_file(dir / "manifest.json", j.dump(2) + "\n");
    }
};

json collect_seeds(const RunConfig& cfg) {
    return {{"gen", cfg.gen.seed}, {"model", cfg.model.seed}, {"mle", cfg.mle.seed},
            {"train", cfg.train.seed}};
}

LmPolicy build_base(const RunConfig& cfg, const std::vector<TokenSequence>& corpus,
                    int world_vocab) {
    LmConfig mcfg = cfg.model;
    if (mcfg.vocab_size < world_vocab) {
        throw ConfigError("model.vocab_size " + std::to_string(mcfg.vocab_size) +
                          " is smaller than the generated vocabulary " +
                          std::to_string(world_vocab));
    }
    LmPolicy base = LmPolicy::init(mcfg);
    PretrainStats stats = pretrain_mle(base, corpus, cfg.mle);
    std::fprintf(stderr, "[apl] mle pretrain: loss %.4f -> %.4f over %ld steps\n",
                 stats.initial_loss, stats.final_loss, stats.steps);
    return base;
}

int cmd_gen_data(const std::string& config_path, const std::vector<std::string>& sets,
                 const std::string& out) {
    json cfg_json = resolve_config_json(config_path, sets);
    RunConfig cfg = config_from_json(cfg_json);
    RunMeta meta;
    meta.command = "gen-data";
    meta.config = config_to_json(cfg);
    meta.seeds = collect_seeds(cfg);
    if (!config_path.empty()) meta.add_input(config_path);

    cfg.gen.validate();
    datagen::SynthOutput synth = datagen::synthesize_corpus(cfg.gen);
    LmPolicy base = build_base(cfg, synth.corpus, synth.world.vocab_size());

    auto stage1 = datagen::stage1_filter(base, synth.candidates, cfg.gen.all_threshold);
    auto scored = datagen::stage2_filter(datagen::scorer_of(synth.world), stage1, 0.0);
    std::vector<datagen::AbductiveRecord> dataset;
    for (const auto& r : scored) {
        if (r.margin >= cfg.gen.delta) dataset.push_back(r);
    }
    if (dataset.empty()) throw ConfigError("gen-data: no records survived the three stages");

    fs::path out_dir = resolve_out_dir(out);
    fs::create_directories(out_dir);
    datagen::write_corpus_jsonl(synth.corpus, synth.world, out_dir / "corpus.jsonl");
    datagen::write_records_jsonl(scored, out_dir / "candidates.jsonl");
    base.save(out_dir / "base_model.json");
    datagen::SplitResult split =
        datagen::emit_dataset(dataset, cfg.split_ratio, cfg.gen.seed, out_dir);

    for (const char* f : {"corpus.jsonl", "candidates.jsonl", "base_model.json", "train.jsonl",
                          "eval.jsonl"}) {
        meta.add_output(out_dir / f);
    }
    meta.write(out_dir);

    json summary;
    summary["n_candidates"] = synth.candidates.size();
    summary["n_stage1"] = stage1.size();
    summary["n_scored"] = scored.size();
    summary["n_records"] = dataset.size();
    summary["n_train"] = split.n_train;
    summary["n_eval"] = split.n_eval;
    summary["out_dir"] = out_dir.string();
    std::cout << summary.dump() << "\n";
    return 0;
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& sets,
              const std::string& data, const std::string& out) {
    json cfg_json = resolve_config_json(config_path, sets);
    RunConfig cfg = config_from_json(cfg_json);
    cfg.train.validate();
    RunMeta meta;
    meta.command = "train";
    meta.config = config_to_json(cfg);
    meta.seeds = collect_seeds(cfg);
    if (!config_path.empty()) meta.add_input(config_path);

    fs::path data_dir(data);
    fs::path train_file = data_dir / "train.jsonl";
    if (!fs::exists(train_file)) throw IoError("train: missing dataset " + train_file.string());
    auto records = datagen::load_records_jsonl(train_file);
    meta.add_input(train_file);

    fs::path out_dir = resolve_out_dir(out);
    fs::create_directories(out_dir);

    LmPolicy base = [&]() {
        fs::path ckpt = data_dir / "base_model.json";
        if (fs::exists(ckpt)) {
            meta.add_input(ckpt);
            return LmPolicy::load(ckpt);
        }
        fs::path corpus_file = data_dir / "corpus.jsonl";
        if (!fs::exists(corpus_file)) {
            throw IoError("train: neither base_model.json nor corpus.jsonl found under " +
                          data_dir.string());
        }
        meta.add_input(corpus_file);
        auto corpus = datagen::load_corpus_jsonl(corpus_file);
        LmPolicy b = build_base(cfg, corpus, 0);
        b.save(out_dir / "base_model.json");
        meta.add_output(out_dir / "base_model.json");
        return b;
    }();

    std::vector<TrainItem> items = evalkit::to_train_items(records);
    LmPolicy policy = base;
    LmPolicy ref = base.clone_frozen();
    DynamicsLog log = finetune(policy, ref, items, cfg.train);

    policy.save(out_dir / "checkpoint.json");
    log.write_csv(out_dir / "dynamics.csv");
    meta.add_output(out_dir / "checkpoint.json");
    meta.add_output(out_dir / "dynamics.csv");
    meta.write(out_dir);

    json summary;
    summary["n_records"] = records.size();
    summary["steps"] = log.rows.empty() ? 0 : log.rows.back().step;
    summary["final_loss"] = log.rows.empty() ? 0.0 : log.rows.back().loss;
    summary["checkpoint"] = (out_dir / "checkpoint.json").string();
    std::cout << summary.dump() << "\n";
    return 0;
}

int cmd_eval(const std::string& config_path, const std::vector<std::string>& sets,
             const std::string& checkpoint, const std::string& data, const std::string& out) {
    json cfg_json = resolve_config_json(config_path, sets);
    RunConfig cfg = config_from_json(cfg_json);
    RunMeta meta;
    meta.command = "eval";
    meta.config = config_to_json(cfg);
    meta.seeds = collect_seeds(cfg);
    if (!config_path.empty()) meta.add_input(config_path);

    if (!fs::exists(checkpoint)) throw IoError("eval: missing checkpoint " + checkpoint);
    fs::path eval_file = fs::path(data) / "eval.jsonl";
    if (!fs::exists(eval_file)) throw IoError("eval: missing dataset " + eval_file.string());
    LmPolicy policy = LmPolicy::load(checkpoint);
    auto records = datagen::load_records_jsonl(eval_file);
    meta.add_input(checkpoint);
    meta.add_input(eval_file);

    evalkit::EvalReport report = evalkit::evaluate(policy, records);
    std::cout << report.to_json() << "\n";

    if (!out.empty()) {
        fs::path out_dir = resolve_out_dir(out);
        fs::create_directories(out_dir);
        atomic_write_file(out_dir / "report.json", report.to_json() + "\n");
        meta.add_output(out_dir / "report.json");
        meta.write(out_dir);
    }
    return 0;
}

int cmd_ablate(const std::string& kind, const std::string& config_path,
               const std::vector<std::string>& sets, const std::string& data,
               const std::string& out) {
    json cfg_json = resolve_config_json(config_path, sets);
    RunConfig cfg = config_from_json(cfg_json);
    RunMeta meta;
    meta.command = "ablate " + kind;
    meta.config = config_to_json(cfg);
    meta.seeds = collect_seeds(cfg);
    if (!config_path.empty()) meta.add_input(config_path);

    fs::path data_dir(data);
    fs::path base_file = data_dir / "base_model.json";
    if (!fs::exists(base_file)) throw IoError("ablate: missing base model " + base_file.string());
    LmPolicy base = LmPolicy::load(base_file);
    meta.add_input(base_file);

    fs::path out_dir = resolve_out_dir(out);
    fs::create_directories(out_dir);

    std::string csv;
    std::string csv_name;
    if (kind == "lambda" || kind == "dpop") {
        fs::path train_file = data_dir / "train.jsonl";
        fs::path eval_file = data_dir / "eval.jsonl";
        if (!fs::exists(train_file) || !fs::exists(eval_file)) {
            throw IoError("ablate: missing train/eval datasets under " + data_dir.string());
        }
        auto train = datagen::load_records_jsonl(train_file);
        auto eval = datagen::load_records_jsonl(eval_file);
        meta.add_input(train_file);
        meta.add_input(eval_file);
        if (kind == "lambda") {
            csv = evalkit::run_lambda_ablation(base, train, eval, cfg.train, cfg.lambda_grid);
            csv_name = "lambda_ablation.csv";
        } else {
            csv = evalkit::run_dpop_penalty_ablation(base, train, eval, cfg.train, cfg.dpop_grid);
            csv_name = "dpop_ablation.csv";
        }
    } else if (kind == "delta") {
        fs::path cand_file = data_dir / "candidates.jsonl";
        if (!fs::exists(cand_file)) throw IoError("ablate: missing " + cand_file.string());
        auto candidates = datagen::load_records_jsonl(cand_file);
        meta.add_input(cand_file);
        TrainConfig tmpl = cfg.train;
        tmpl.loss.direction = Direction::abductive;
        csv = evalkit::run_delta_ablation(base, candidates, cfg.split_ratio, cfg.gen.seed, tmpl,
                                          cfg.delta_train, cfg.delta_eval);
        csv_name = "delta_ablation.csv";
    } else {
        throw ConfigError("ablate: unknown kind '" + kind + "' (expected lambda, delta, or dpop)");
    }

    atomic_write_file(out_dir / csv_name, csv);
    meta.add_output(out_dir / csv_name);
    meta.write(out_dir);

    json summary;
    summary["kind"] = kind;
    summary["csv"] = (out_dir / csv_name).string();
    summary["rows"] = std::count(csv.begin(), csv.end(), '\n') - 1;
    std::cout << summary.dump() << "\n";
    return 0;
}

int cmd_gradcheck(const std::string& scope, uint64_t seed) {
    std::vector<gradcheck::CheckResult> results;
    if (scope == "ops") {
        results = gradcheck::check_ops(seed);
    } else if (scope == "lm") {
        results = gradcheck::check_lm(seed);
    } else if (scope == "losses") {
        results = gradcheck::check_losses(seed);
    } else {
        throw ConfigError("gradcheck: unknown scope '" + scope +
                          "' (expected ops, lm, or losses)");
    }
    bool ok = true;
    json out;
    out["scope"] = scope;
    out["tolerance"] = gradcheck::kTolerance;
    json items = json::array();
    for (const auto& r : results) {
        items.push_back({{"name", r.name}, {"max_rel_err", r.max_rel_err}, {"pass", r.pass()}});
        ok = ok && r.pass();
    }
    out["results"] = std::move(items);
    out["pass"] = ok;
    std::cout << out.dump() << "\n";
    return ok ? 0 : 4;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Desk-scale laboratory for abductive preference optimization"};
    app.require_subcommand(1);

    std::string config_path, data_dir, out_dir, checkpoint, kind, scope;
    std::vector<std::string> sets;
    uint64_t gradcheck_seed = 2024;

    auto add_common = [&](CLI::App* sub, bool with_out) {
        sub->add_option("--config", config_path, "JSON config file");
        sub->add_option("--set", sets, "override a config key, e.g. --set train.lr=0.002");
        if (with_out) sub->add_option("--out", out_dir, "output directory")->required();
    };

    CLI::App* gen = app.add_subcommand("gen-data", "synthesize and filter the dataset");
    add_common(gen, true);

    CLI::App* train = app.add_subcommand("train", "preference fine-tuning");
    add_common(train, true);
    train->add_option("--data", data_dir, "dataset directory from gen-data")->required();

    CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    eval->add_option("--config", config_path, "JSON config file");
    eval->add_option("--set", sets, "override a config key");
    eval->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
    eval->add_option("--data", data_dir, "dataset directory")->required();
    eval->add_option("--out", out_dir, "optional output directory for report + manifest");

    CLI::App* ablate = app.add_subcommand("ablate", "run an ablation grid");
    ablate->add_option("kind", kind, "lambda | delta | dpop")->required();
    add_common(ablate, true);
    ablate->add_option("--data", data_dir, "dataset directory from gen-data")->required();

    CLI::App* gc = app.add_subcommand("gradcheck", "finite-difference gradient checks");
    gc->add_option("scope", scope, "ops | lm | losses")->required();
    gc->add_option("--seed", gradcheck_seed, "randomization seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (gen->parsed()) return cmd_gen_data(config_path, sets, out_dir);
        if (train->parsed()) return cmd_train(config_path, sets, data_dir, out_dir);
        if (eval->parsed()) return cmd_eval(config_path, sets, checkpoint, data_dir, out_dir);
        if (ablate->parsed()) return cmd_ablate(kind, config_path, sets, data_dir, out_dir);
        if (gc->parsed()) return cmd_gradcheck(scope, gradcheck_seed);
    } catch (const ConfigError& e) {
        std::cerr << "[apl] config error: " << e.what() << "\n";
        return 2;
    } catch (const IoError& e) {
        std::cerr << "[apl] io error: " << e.what() << "\n";
        return 3;
    } catch (const NumericFault& e) {
        std::cerr << "[apl] numeric fault: " << e.what() << "\n";
        return 4;
    } catch (const ShapeError& e) {
        std::cerr << "[apl] numeric fault: " << e.what() << "\n";
        return 4;
    } catch (const GraphError& e) {
        std::cerr << "[apl] numeric fault: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "[apl] error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
