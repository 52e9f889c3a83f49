#include "apl/lm.hpp"

#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "apl/error.hpp"
#include "apl/util.hpp"

namespace apl {

using json = nlohmann::ordered_json;

void LmConfig::validate() const {
    if (vocab_size <= 0 || context_len <= 0 || embed_dim <= 0 || num_layers <= 0 || num_heads <= 0) {
        throw ConfigError("LmConfig: all dimensions must be positive");
    }
    if (embed_dim % num_heads != 0) {
        throw ConfigError("LmConfig: embed_dim " + std::to_string(embed_dim) +
                          " not divisible by num_heads " + std::to_string(num_heads));
    }
}

void check_tokens(const TokenSequence& seq, int vocab_size, const char* what) {
    if (seq.empty()) throw ShapeError(std::string(what) + ": empty token sequence");
    for (int id : seq) {
        if (id < 0 || id >= vocab_size) {
            throw ShapeError(std::string(what) + ": token " + std::to_string(id) +
                             " outside vocab of size " + std::to_string(vocab_size));
        }
    }
}

void LmPolicy::build_param_layout() {
    const int D = cfg_.embed_dim;
    const int V = cfg_.vocab_size;
    const int C = cfg_.context_len;
    const int H = 4 * D;

    params_.clear();
    params_.push_back({"tok_emb", Tensor::Zero(V, D)});
    params_.push_back({"pos_emb", Tensor::Zero(C, D)});
    for (int l = 0; l < cfg_.num_layers; ++l) {
        std::string p = "layer" + std::to_string(l) + ".";
        params_.push_back({p + "ln1.g", Tensor::Zero(1, D)});
        params_.push_back({p + "ln1.b", Tensor::Zero(1, D)});
        params_.push_back({p + "attn.wq", Tensor::Zero(D, D)});
        params_.push_back({p + "attn.wk", Tensor::Zero(D, D)});
        params_.push_back({p + "attn.wv", Tensor::Zero(D, D)});
        params_.push_back({p + "attn.wo", Tensor::Zero(D, D)});
        params_.push_back({p + "ln2.g", Tensor::Zero(1, D)});
        params_.push_back({p + "ln2.b", Tensor::Zero(1, D)});
        params_.push_back({p + "mlp.w1", Tensor::Zero(D, H)});
        params_.push_back({p + "mlp.w2", Tensor::Zero(H, D)});
    }
    params_.push_back({"lnf.g", Tensor::Zero(1, D)});
    params_.push_back({"lnf.b", Tensor::Zero(1, D)});
    params_.push_back({"lm_head", Tensor::Zero(cfg_.embed_dim, V)});
}

LmPolicy LmPolicy::init(const LmConfig& cfg) {
    cfg.validate();
    LmPolicy p;
    p.cfg_ = cfg;
    p.build_param_layout();
    Rng rng(cfg.seed);
    for (auto& np : p.params_) {
        bool is_gain = np.name.ends_with(".g");
        bool is_bias = np.name.ends_with(".b");
        for (Eigen::Index i = 0; i < np.value.size(); ++i) {
            if (is_gain) {
                np.value.data()[i] = 1.0;
            } else if (is_bias) {
                np.value.data()[i] = 0.0;
            } else {
                np.value.data()[i] = rng.normal(0.0, 0.02);
            }
        }
    }
    return p;
}

LmPolicy LmPolicy::zeros(const LmConfig& cfg) {
    cfg.validate();
    LmPolicy p;
    p.cfg_ = cfg;
    p.build_param_layout();
    return p;
}

LmPolicy LmPolicy::clone_frozen() const {
    LmPolicy p = *this;
    p.frozen_ = true;
    return p;
}

std::span<NamedTensor> LmPolicy::mutable_params() {
    if (frozen_) throw std::logic_error("LmPolicy: attempt to mutate a frozen policy");
    return params_;
}

LmPolicy::ParamBinding LmPolicy::bind(bool requires_grad) const {
    if (requires_grad && frozen_) {
        throw std::logic_error("LmPolicy: cannot build a differentiable binding of a frozen policy");
    }
    ParamBinding pb;
    pb.leaves.reserve(params_.size());
    for (const auto& np : params_) pb.leaves.push_back(ag::leaf(np.value, requires_grad));
    return pb;
}

namespace {

// parameter indices in the layout above
struct Layout {
    static constexpr int kTok = 0;
    static constexpr int kPos = 1;
    static constexpr int kPerLayer = 10;
    static int layer_base(int l) { return 2 + l * kPerLayer; }
};

} // namespace

// Forward over input tokens, returning n x vocab rows of next-token
// log-probabilities (row t conditions on tokens[0..t]).
static ag::NodePtr forward_logprob_rows(const LmConfig& cfg, const LmPolicy::ParamBinding& pb,
                                        const TokenSequence& input) {
    using namespace ag;
    const int n = static_cast<int>(input.size());
    const int hd = cfg.embed_dim / cfg.num_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

    std::vector<int> positions(input.size());
    for (size_t t = 0; t < input.size(); ++t) positions[t] = static_cast<int>(t);

    NodePtr x = add(embedding_gather(pb.leaves[Layout::kTok], input),
                    embedding_gather(pb.leaves[Layout::kPos], positions));

    for (int l = 0; l < cfg.num_layers; ++l) {
        int b = Layout::layer_base(l);
        NodePtr h = layer_norm(x, pb.leaves[b + 0], pb.leaves[b + 1]);
        NodePtr q = matmul(h, pb.leaves[b + 2]);
        NodePtr k = matmul(h, pb.leaves[b + 3]);
        NodePtr v = matmul(h, pb.leaves[b + 4]);
        std::vector<NodePtr> heads;
        heads.reserve(cfg.num_heads);
        for (int hid = 0; hid < cfg.num_heads; ++hid) {
            NodePtr qh = slice_cols(q, hid * hd, hd);
            NodePtr kh = slice_cols(k, hid * hd, hd);
            NodePtr vh = slice_cols(v, hid * hd, hd);
            NodePtr scores = scalar_mul(matmul(qh, transpose(kh)), scale);
            heads.push_back(matmul(causal_softmax(scores), vh));
        }
        x = add(x, matmul(concat_cols(heads), pb.leaves[b + 5]));
        NodePtr h2 = layer_norm(x, pb.leaves[b + 6], pb.leaves[b + 7]);
        x = add(x, matmul(gelu(matmul(h2, pb.leaves[b + 8])), pb.leaves[b + 9]));
    }

    int base = Layout::layer_base(cfg.num_layers);
    NodePtr f = layer_norm(x, pb.leaves[base + 0], pb.leaves[base + 1]);
    NodePtr logits = matmul(f, pb.leaves[base + 2]);
    (void)n;
    return softmax_logits_to_logprobs(logits, 1);
}

ag::NodePtr LmPolicy::log_prob_sum_node(const ParamBinding& pb, const TokenSequence& x,
                                        const TokenSequence& y) const {
    check_tokens(x, cfg_.vocab_size, "log_prob_sum(x)");
    check_tokens(y, cfg_.vocab_size, "log_prob_sum(y)");
    if (static_cast<int>(x.size() + y.size()) > cfg_.context_len) {
        throw ShapeError("log_prob_sum: sequence of length " + std::to_string(x.size() + y.size()) +
                         " exceeds context " + std::to_string(cfg_.context_len));
    }
    // the last token of y is never conditioned on, so it is not fed
    TokenSequence input = x;
    input.insert(input.end(), y.begin(), y.end() - 1);
    ag::NodePtr rows = forward_logprob_rows(cfg_, pb, input);
    ag::NodePtr picked = ag::gather_logprob(rows, y, static_cast<int>(x.size()) - 1);
    return ag::sum(picked);
}

double LmPolicy::log_prob_sum(const TokenSequence& x, const TokenSequence& y) const {
    ParamBinding pb = bind(false);
    return ag::scalar_value(log_prob_sum_node(pb, x, y));
}

double LmPolicy::avg_log_lik(const TokenSequence& x, const TokenSequence& y) const {
    return log_prob_sum(x, y) / static_cast<double>(y.size());
}

Tensor LmPolicy::position_logprobs(const TokenSequence& tokens) const {
    check_tokens(tokens, cfg_.vocab_size, "position_logprobs");
    if (static_cast<int>(tokens.size()) > cfg_.context_len) {
        throw ShapeError("position_logprobs: sequence exceeds context");
    }
    ParamBinding pb = bind(false);
    return forward_logprob_rows(cfg_, pb, tokens)->value;
}

TokenSequence LmPolicy::sample_greedy(const TokenSequence& x, int max_len, int eos_id) const {
    if (max_len < 1) throw ConfigError("sample_greedy: max_len must be >= 1");
    TokenSequence seq = x;
    TokenSequence out;
    for (int i = 0; i < max_len; ++i) {
        if (static_cast<int>(seq.size()) >= cfg_.context_len) break;
        Tensor rows = position_logprobs(seq);
        Eigen::Index best = 0;
        rows.row(rows.rows() - 1).maxCoeff(&best);
        int tok = static_cast<int>(best);
        out.push_back(tok);
        seq.push_back(tok);
        if (tok == eos_id) break;
    }
    return out;
}

uint64_t LmPolicy::params_hash() const {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& np : params_) {
        h = fnv1a64(np.name.data(), np.name.size(), h);
        h = fnv1a64(np.value.data(), sizeof(double) * static_cast<size_t>(np.value.size()), h);
    }
    return h;
}

void LmPolicy::save(const std::filesystem::path& path) const {
    json j;
    j["format_version"] = 1;
    j["config"] = {{"vocab_size", cfg_.vocab_size},   {"context_len", cfg_.context_len},
                   {"embed_dim", cfg_.embed_dim},     {"num_layers", cfg_.num_layers},
                   {"num_heads", cfg_.num_heads},     {"seed", cfg_.seed}};
    json params = json::array();
    for (const auto& np : params_) {
        json p;
        p["name"] = np.name;
        p["rows"] = np.value.rows();
        p["cols"] = np.value.cols();
        std::vector<double> data(np.value.data(), np.value.data() + np.value.size());
        p["data"] = data;
        params.push_back(std::move(p));
    }
    j["params"] = std::move(params);
    atomic_write_file(path, j.dump() + "\n");
}

LmPolicy LmPolicy::load(const std::filesystem::path& path) {
    json j;
    try {
        j = json::parse(read_text_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw IoError("checkpoint parse failed: " + path.string() + ": " + e.what());
    }
    if (!j.contains("format_version") || j["format_version"].get<int>() != 1) {
        throw IoError("checkpoint " + path.string() + ": unsupported format version");
    }
    LmConfig cfg;
    const json& c = j.at("config");
    cfg.vocab_size = c.at("vocab_size").get<int>();
    cfg.context_len = c.at("context_len").get<int>();
    cfg.embed_dim = c.at("embed_dim").get<int>();
    cfg.num_layers = c.at("num_layers").get<int>();
    cfg.num_heads = c.at("num_heads").get<int>();
    cfg.seed = c.at("seed").get<uint64_t>();
    LmPolicy p = LmPolicy::zeros(cfg);
    const json& params = j.at("params");
    if (params.size() != p.params_.size()) {
        throw IoError("checkpoint " + path.string() + ": parameter count mismatch");
    }
    for (size_t i = 0; i < p.params_.size(); ++i) {
        const json& e = params[i];
        auto& np = p.params_[i];
        if (e.at("name").get<std::string>() != np.name) {
            throw IoError("checkpoint " + path.string() + ": unexpected parameter " +
                          e.at("name").get<std::string>());
        }
        Eigen::Index rows = e.at("rows").get<Eigen::Index>();
        Eigen::Index cols = e.at("cols").get<Eigen::Index>();
        if (rows != np.value.rows() || cols != np.value.cols()) {
            throw IoError("checkpoint " + path.string() + ": shape mismatch for " + np.name);
        }
        const auto data = e.at("data").get<std::vector<double>>();
        if (static_cast<Eigen::Index>(data.size()) != np.value.size()) {
            throw IoError("checkpoint " + path.string() + ": data length mismatch for " + np.name);
        }
        std::copy(data.begin(), data.end(), np.value.data());
    }
    return p;
}

} // namespace apl
