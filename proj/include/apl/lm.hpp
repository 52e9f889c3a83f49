#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "apl/autodiff.hpp"
#include "apl/tensor.hpp"

namespace apl {

using TokenSequence = std::vector<int>;

struct LmConfig {
    int vocab_size = 64;
    int context_len = 64;
    int embed_dim = 32;
    int num_layers = 2;
    int num_heads = 2;
    uint64_t seed = 7;

    void validate() const;
};

struct NamedTensor {
    std::string name;
    Tensor value;
};

// Tiny pre-norm causal transformer. The trainable policy and the frozen
// reference share this class; frozen instances reject parameter mutation.
class LmPolicy {
public:
    static LmPolicy init(const LmConfig& cfg);
    // all-zero parameters -> uniform next-token distribution at every position
    static LmPolicy zeros(const LmConfig& cfg);

    const LmConfig& config() const { return cfg_; }
    bool frozen() const { return frozen_; }
    LmPolicy clone_frozen() const;

    // Parameter leaves for one computation graph. Reuse a binding across the
    // items of a batch so their gradients accumulate on the same leaves.
    struct ParamBinding {
        std::vector<ag::NodePtr> leaves; // aligned with params()
    };
    ParamBinding bind(bool requires_grad) const;

    // log pi(y | x) summed over the tokens of y, as a graph node
    ag::NodePtr log_prob_sum_node(const ParamBinding& pb, const TokenSequence& x,
                                  const TokenSequence& y) const;
    double log_prob_sum(const TokenSequence& x, const TokenSequence& y) const;
    double avg_log_lik(const TokenSequence& x, const TokenSequence& y) const;

    // per-position next-token log-probabilities for tokens[0..n-1], n x vocab
    Tensor position_logprobs(const TokenSequence& tokens) const;
    TokenSequence sample_greedy(const TokenSequence& x, int max_len, int eos_id = -1) const;

    std::span<const NamedTensor> params() const { return params_; }
    std::span<NamedTensor> mutable_params();
    uint64_t params_hash() const;

    void save(const std::filesystem::path& path) const;
    static LmPolicy load(const std::filesystem::path& path);

private:
    LmPolicy() = default;
    void build_param_layout();

    LmConfig cfg_;
    bool frozen_ = false;
    std::vector<NamedTensor> params_;
};

void check_tokens(const TokenSequence& seq, int vocab_size, const char* what);

} // namespace apl
