#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "apl/losses.hpp"

namespace apl {

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

struct MleConfig {
    int epochs = 12;
    double lr = 3e-3;
    int batch_size = 32;
    double max_grad_norm = 1.0;
    double warmup_ratio = 0.1;
    AdamConfig adam;
    uint64_t seed = 11;
};

struct TrainConfig {
    LossSpec loss;
    int epochs = 5;
    double lr = 1e-3;
    int batch_size = 16;
    int grad_accum = 1;
    double max_grad_norm = 1.0;
    double warmup_ratio = 0.1;
    AdamConfig adam;
    uint64_t seed = 13;
    int log_interval = 1; // optimizer steps per dynamics row

    void validate() const;
};

// Matched views of one record; multitask steps compute both loss sides on the
// same records.
struct TrainItem {
    ResponsePair resp;
    PromptPair prompt;
};

struct DynamicsRow {
    long step = 0;
    double epoch = 0.0;
    double logp_chosen_std = 0.0;   // log pi(y_w | x)
    double logp_rejected_std = 0.0; // log pi(y_l | x)
    double logp_chosen_abd = 0.0;   // log pi(y | x_w)
    double logp_rejected_abd = 0.0; // log pi(y | x_l)
    double loss = 0.0;
    double grad_norm = 0.0;
};

struct DynamicsLog {
    static constexpr const char* kCsvHeader =
        "step,epoch,logp_chosen_std,logp_rejected_std,logp_chosen_abd,logp_rejected_abd,loss,"
        "grad_norm";

    std::vector<DynamicsRow> rows;

    std::string to_csv() const;
    void write_csv(const std::filesystem::path& path) const;

    // mean of one column over the rows falling in 1-based epoch e
    double epoch_mean(int epoch, double DynamicsRow::*field, int total_epochs) const;
};

struct PretrainStats {
    double initial_loss = 0.0;
    double final_loss = 0.0;
    long steps = 0;
    std::vector<double> epoch_mean_loss; // mean training-batch loss per epoch
};

// Plain next-token MLE over whole documents. Diverging (non-finite) loss
// aborts with a diagnostic.
PretrainStats pretrain_mle(LmPolicy& policy, std::span<const TokenSequence> corpus,
                           const MleConfig& cfg);

double mle_corpus_loss(const LmPolicy& policy, std::span<const TokenSequence> corpus);

using EpochCallback = std::function<void(int epoch, const LmPolicy& policy)>;

// Preference fine-tuning under cfg.loss, with linear warmup into a constant
// learning rate and global-norm gradient clipping. The reference policy must
// be the frozen snapshot the run is anchored to.
DynamicsLog finetune(LmPolicy& policy, const LmPolicy& ref, std::span<const TrainItem> dataset,
                     const TrainConfig& cfg, const EpochCallback& on_epoch = {});

} // namespace apl
