#include "apl/trainer.hpp"

#include <cmath>
#include <cstdio>

#include "apl/error.hpp"
#include "apl/util.hpp"

namespace apl {

void TrainConfig::validate() const {
    loss.validate();
    if (epochs <= 0) throw ConfigError("TrainConfig: epochs must be positive");
    if (lr < 0.0) throw ConfigError("TrainConfig: lr must be non-negative");
    if (batch_size <= 0) throw ConfigError("TrainConfig: batch_size must be positive");
    if (grad_accum <= 0) throw ConfigError("TrainConfig: grad_accum must be positive");
    if (max_grad_norm <= 0.0) throw ConfigError("TrainConfig: max_grad_norm must be positive");
    if (warmup_ratio < 0.0 || warmup_ratio > 1.0) {
        throw ConfigError("TrainConfig: warmup_ratio must lie in [0, 1]");
    }
    if (log_interval <= 0) throw ConfigError("TrainConfig: log_interval must be positive");
}

namespace {

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

// Adam with decoupled weight decay, linear warmup into a constant rate,
// global-norm clipping before the update.
class AdamW {
public:
    AdamW(const AdamConfig& cfg, double lr, long total_steps, double warmup_ratio,
          double max_grad_norm, std::span<const NamedTensor> params)
        : cfg_(cfg), lr_(lr), max_norm_(max_grad_norm) {
        warmup_steps_ = std::llround(warmup_ratio * static_cast<double>(total_steps));
        m_.reserve(params.size());
        v_.reserve(params.size());
        for (const auto& p : params) {
            m_.push_back(Tensor::Zero(p.value.rows(), p.value.cols()));
            v_.push_back(Tensor::Zero(p.value.rows(), p.value.cols()));
        }
    }

    // applies one update in place; returns the pre-clip gradient norm
    double step(std::span<NamedTensor> params, std::vector<Tensor>& grads) {
        ++t_;
        double sq = 0.0;
        for (const auto& g : grads) sq += g.squaredNorm();
        double norm = std::sqrt(sq);
        if (!std::isfinite(norm)) throw NumericFault("AdamW: non-finite gradient norm");
        double clip = norm > max_norm_ ? max_norm_ / norm : 1.0;

        double lr_t = lr_;
        if (warmup_steps_ > 0 && t_ < warmup_steps_) {
            lr_t = lr_ * static_cast<double>(t_) / static_cast<double>(warmup_steps_);
        }
        double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));

        for (size_t i = 0; i < params.size(); ++i) {
            Tensor g = grads[i] * clip;
            m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
            v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
            Tensor mhat = m_[i] / bc1;
            Tensor vhat = v_[i] / bc2;
            Tensor& p = params[i].value;
            p -= lr_t * (mhat.array() / (vhat.array().sqrt() + cfg_.eps)).matrix();
            p -= lr_t * cfg_.weight_decay * p;
        }
        return norm;
    }

private:
    AdamConfig cfg_;
    double lr_;
    long warmup_steps_ = 0;
    double max_norm_;
    long t_ = 0;
    std::vector<Tensor> m_, v_;
};

std::vector<size_t> epoch_order(size_t n, uint64_t seed, int epoch) {
    std::vector<size_t> idx(n);
    for (size_t i = 0; i < n; ++i) idx[i] = i;
    Rng rng(derive_seed(seed, 0x9000 + static_cast<uint64_t>(epoch)));
    rng.shuffle(idx);
    return idx;
}

} // namespace

std::string DynamicsLog::to_csv() const {
    std::string out = kCsvHeader;
    out += '\n';
    for (const auto& r : rows) {
        out += std::to_string(r.step);
        out += ',';
        out += fmt_double(r.epoch);
        out += ',';
        out += fmt_double(r.logp_chosen_std);
        out += ',';
        out += fmt_double(r.logp_rejected_std);
        out += ',';
        out += fmt_double(r.logp_chosen_abd);
        out += ',';
        out += fmt_double(r.logp_rejected_abd);
        out += ',';
        out += fmt_double(r.loss);
        out += ',';
        out += fmt_double(r.grad_norm);
        out += '\n';
    }
    return out;
}

void DynamicsLog::write_csv(const std::filesystem::path& path) const {
    atomic_write_file(path, to_csv());
}

double DynamicsLog::epoch_mean(int epoch, double DynamicsRow::*field, int total_epochs) const {
    double sum = 0.0;
    int n = 0;
    for (const auto& r : rows) {
        int e = static_cast<int>(std::ceil(r.epoch - 1e-12));
        if (e < 1) e = 1;
        if (e > total_epochs) e = total_epochs;
        if (e == epoch) {
            sum += r.*field;
            ++n;
        }
    }
    if (n == 0) throw ConfigError("DynamicsLog: no rows in epoch " + std::to_string(epoch));
    return sum / n;
}

double mle_corpus_loss(const LmPolicy& policy, std::span<const TokenSequence> corpus) {
    double total = 0.0;
    long tokens = 0;
    for (const auto& doc : corpus) {
        TokenSequence x(doc.begin(), doc.begin() + 1);
        TokenSequence y(doc.begin() + 1, doc.end());
        total += policy.log_prob_sum(x, y);
        tokens += static_cast<long>(y.size());
    }
    return -total / static_cast<double>(tokens);
}

PretrainStats pretrain_mle(LmPolicy& policy, std::span<const TokenSequence> corpus,
                           const MleConfig& cfg) {
    if (corpus.empty()) throw ConfigError("pretrain_mle: empty corpus");
    for (const auto& doc : corpus) {
        if (doc.size() < 2) throw ConfigError("pretrain_mle: documents need at least 2 tokens");
    }
    PretrainStats stats;
    stats.initial_loss = mle_corpus_loss(policy, corpus);

    const size_t n = corpus.size();
    const long steps_per_epoch = static_cast<long>((n + cfg.batch_size - 1) / cfg.batch_size);
    AdamW opt(cfg.adam, cfg.lr, steps_per_epoch * cfg.epochs, cfg.warmup_ratio, cfg.max_grad_norm,
              policy.params());

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<size_t> order = epoch_order(n, cfg.seed, epoch);
        double epoch_loss_sum = 0.0;
        long epoch_batches = 0;
        for (size_t start = 0; start < n; start += static_cast<size_t>(cfg.batch_size)) {
            size_t end = std::min(n, start + static_cast<size_t>(cfg.batch_size));
            LmPolicy::ParamBinding pb = policy.bind(true);
            std::vector<ag::NodePtr> doc_terms;
            long batch_tokens = 0;
            for (size_t i = start; i < end; ++i) {
                const TokenSequence& doc = corpus[order[i]];
                TokenSequence x(doc.begin(), doc.begin() + 1);
                TokenSequence y(doc.begin() + 1, doc.end());
                doc_terms.push_back(policy.log_prob_sum_node(pb, x, y));
                batch_tokens += static_cast<long>(y.size());
            }
            ag::NodePtr loss = ag::scalar_mul(ag::add_n(doc_terms),
                                              -1.0 / static_cast<double>(batch_tokens));
            double loss_val = ag::scalar_value(loss);
            if (!std::isfinite(loss_val)) {
                throw NumericFault("pretrain_mle: non-finite loss at step " +
                                   std::to_string(stats.steps + 1));
            }
            ag::backward(loss);
            std::vector<Tensor> grads;
            grads.reserve(pb.leaves.size());
            for (auto& l : pb.leaves) {
                grads.push_back(l->grad_ready ? l->grad
                                              : Tensor::Zero(l->value.rows(), l->value.cols()));
            }
            opt.step(policy.mutable_params(), grads);
            ++stats.steps;
            epoch_loss_sum += loss_val;
            ++epoch_batches;
        }
        stats.epoch_mean_loss.push_back(epoch_loss_sum / static_cast<double>(epoch_batches));
    }
    stats.final_loss = mle_corpus_loss(policy, corpus);
    return stats;
}

DynamicsLog finetune(LmPolicy& policy, const LmPolicy& ref, std::span<const TrainItem> dataset,
                     const TrainConfig& cfg, const EpochCallback& on_epoch) {
    cfg.validate();
    if (dataset.empty()) throw ConfigError("finetune: empty dataset");
    if (!ref.frozen()) throw ConfigError("finetune: reference policy must be frozen");
    if (ref.config().vocab_size != policy.config().vocab_size) {
        throw ConfigError("finetune: policy and reference vocabularies differ");
    }

    const Direction dir = cfg.loss.direction;
    const bool need_std = dir != Direction::abductive &&
                          !(dir == Direction::multitask && cfg.loss.lambda_multi == 0.0);
    const bool need_abd = dir != Direction::standard &&
                          !(dir == Direction::multitask && cfg.loss.lambda_multi == 1.0);

    const size_t n = dataset.size();
    const size_t step_items = static_cast<size_t>(cfg.batch_size) * cfg.grad_accum;
    const long steps_per_epoch = static_cast<long>((n + step_items - 1) / step_items);
    AdamW opt(cfg.adam, cfg.lr, steps_per_epoch * cfg.epochs, cfg.warmup_ratio, cfg.max_grad_norm,
              policy.params());

    DynamicsLog log;
    long step = 0;
    size_t items_seen = 0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<size_t> order = epoch_order(n, cfg.seed, epoch);
        for (size_t start = 0; start < n; start += step_items) {
            size_t end = std::min(n, start + step_items);
            ++step;

            std::vector<Tensor> accum;
            accum.reserve(policy.params().size());
            for (const auto& p : policy.params()) {
                accum.push_back(Tensor::Zero(p.value.rows(), p.value.cols()));
            }
            double loss_sum = 0.0;
            int micro_count = 0;
            double cw_std = 0.0, cr_std = 0.0, cw_abd = 0.0, cr_abd = 0.0;

            for (size_t mb = start; mb < end; mb += static_cast<size_t>(cfg.batch_size)) {
                size_t mb_end = std::min(end, mb + static_cast<size_t>(cfg.batch_size));
                LmPolicy::ParamBinding pb = policy.bind(true);
                std::vector<ag::NodePtr> std_terms, abd_terms;
                for (size_t i = mb; i < mb_end; ++i) {
                    const TrainItem& item = dataset[order[i]];
                    // all four log-likelihoods are computed through the graph
                    // so the logged dynamics come from the same code path in
                    // every direction
                    ag::NodePtr n_sw = policy.log_prob_sum_node(pb, item.resp.x, item.resp.y_w);
                    ag::NodePtr n_sl = policy.log_prob_sum_node(pb, item.resp.x, item.resp.y_l);
                    ag::NodePtr n_aw = policy.log_prob_sum_node(pb, item.prompt.x_w, item.prompt.y);
                    ag::NodePtr n_al = policy.log_prob_sum_node(pb, item.prompt.x_l, item.prompt.y);
                    cw_std += ag::scalar_value(n_sw);
                    cr_std += ag::scalar_value(n_sl);
                    cw_abd += ag::scalar_value(n_aw);
                    cr_abd += ag::scalar_value(n_al);
                    if (need_std) {
                        ag::NodePtr psi_w = ag::sub(
                            n_sw, ag::constant(ref.log_prob_sum(item.resp.x, item.resp.y_w)));
                        ag::NodePtr psi_l = ag::sub(
                            n_sl, ag::constant(ref.log_prob_sum(item.resp.x, item.resp.y_l)));
                        std_terms.push_back(
                            cfg.loss.objective == Objective::dpo
                                ? lossform::preference_term(psi_w, psi_l, cfg.loss.beta)
                                : lossform::preference_term_with_hinge(psi_w, psi_l, cfg.loss.beta,
                                                                       cfg.loss.lambda_dpop));
                    }
                    if (need_abd) {
                        ag::NodePtr psi_w = ag::sub(
                            n_aw, ag::constant(ref.log_prob_sum(item.prompt.x_w, item.prompt.y)));
                        ag::NodePtr psi_l = ag::sub(
                            n_al, ag::constant(ref.log_prob_sum(item.prompt.x_l, item.prompt.y)));
                        abd_terms.push_back(
                            cfg.loss.objective == Objective::dpo
                                ? lossform::preference_term(psi_w, psi_l, cfg.loss.beta)
                                : lossform::preference_term_with_hinge(psi_w, psi_l, cfg.loss.beta,
                                                                       cfg.loss.lambda_dpop));
                    }
                }
                ag::NodePtr mb_loss;
                if (need_std && need_abd) {
                    mb_loss = ag::add(
                        ag::scalar_mul(lossform::batch_mean(std_terms), cfg.loss.lambda_multi),
                        ag::scalar_mul(lossform::batch_mean(abd_terms),
                                       1.0 - cfg.loss.lambda_multi));
                } else if (need_std) {
                    mb_loss = lossform::batch_mean(std_terms);
                } else {
                    mb_loss = lossform::batch_mean(abd_terms);
                }
                double mb_val = ag::scalar_value(mb_loss);
                if (!std::isfinite(mb_val)) {
                    throw NumericFault("finetune: non-finite loss at step " + std::to_string(step));
                }
                loss_sum += mb_val;
                ++micro_count;
                ag::backward(ag::scalar_mul(mb_loss, 1.0 / static_cast<double>(cfg.grad_accum)));
                for (size_t pi = 0; pi < pb.leaves.size(); ++pi) {
                    if (pb.leaves[pi]->grad_ready) accum[pi] += pb.leaves[pi]->grad;
                }
            }

            double grad_norm = opt.step(policy.mutable_params(), accum);
            items_seen += end - start;

            if (step % cfg.log_interval == 0) {
                double inv = 1.0 / static_cast<double>(end - start);
                DynamicsRow row;
                row.step = step;
                row.epoch = static_cast<double>(items_seen) / static_cast<double>(n);
                row.logp_chosen_std = cw_std * inv;
                row.logp_rejected_std = cr_std * inv;
                row.logp_chosen_abd = cw_abd * inv;
                row.logp_rejected_abd = cr_abd * inv;
                row.loss = loss_sum / micro_count;
                row.grad_norm = grad_norm;
                log.rows.push_back(row);
            }
        }
        if (on_epoch) on_epoch(epoch + 1, policy);
    }
    return log;
}

} // namespace apl
