#pragma once

// Mini-batch gradient descent with global-norm clipping, shared by the
// counter and the segmenter.

#include <cmath>
#include <cstdint>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "maskcount/error.hpp"
#include "maskcount/nn.hpp"
#include "maskcount/numerics.hpp"
#include "maskcount/parallel.hpp"

namespace maskcount {

enum class Optimizer { sgd, adam };

struct TrainCfg {
    int epochs = 200;
    double lr = 1e-2;
    Optimizer optimizer = Optimizer::adam;
    int batch = 4;
    std::uint64_t seed = 0;
    double clip_norm = 10.0;
    /// Probability of training a sample against a random mask: half of those
    /// draws use a half-plane mask (ground truth cut to match), the other half
    /// a loose mask around the objects (ground truth unchanged).
    double mask_augment = 0.0;
    int threads = 0; // 0 = worker_count()
};

struct TrainingState {
    int epoch = 0;
    double learning_rate = 0.0;
    std::vector<double> loss_history;

    bool operator==(const TrainingState&) const = default;
};

/// Computes the loss of sample `index` and, when `grads` is non-null,
/// accumulates its parameter gradient there. `rng` is private to the call.
using SampleLossFn = std::function<double(int index, Rng& rng, ParamSet* grads)>;

inline void clip_global_norm(ParamSet& grads, double clip_norm) {
    const double n = grads.norm();
    if (clip_norm > 0.0 && n > clip_norm) grads.scale(clip_norm / n);
}

/// Plain descent or Adam (beta1 0.9, beta2 0.999, eps 1e-8) on clipped gradients.
class StepRule {
public:
    StepRule(const ParamSet& params, Optimizer kind) : kind_(kind) {
        if (kind_ == Optimizer::adam) {
            m_ = params.zeros_like();
            v_ = params.zeros_like();
        }
    }

    void apply(ParamSet& params, ParamSet& grads, double lr, double clip_norm) {
        clip_global_norm(grads, clip_norm);
        if (lr == 0.0) return;
        if (kind_ == Optimizer::sgd) {
            params.axpy(-lr, grads);
            return;
        }
        constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
        ++t_;
        const double c1 = 1.0 - std::pow(b1, t_);
        const double c2 = 1.0 - std::pow(b2, t_);
        for (auto& [name, p] : params) {
            const Tensor& g = grads[name];
            Tensor& m = m_[name];
            Tensor& v = v_[name];
            for (std::size_t k = 0; k < p.data.size(); ++k) {
                m.data[k] = b1 * m.data[k] + (1 - b1) * g.data[k];
                v.data[k] = b2 * v.data[k] + (1 - b2) * g.data[k] * g.data[k];
                p.data[k] -= lr * (m.data[k] / c1) / (std::sqrt(v.data[k] / c2) + eps);
            }
        }
    }

private:
    Optimizer kind_;
    ParamSet m_, v_;
    long t_ = 0;
};

/// Runs cfg.epochs passes over `n_samples` samples in seeded shuffled order.
/// Per-sample gradients are reduced in batch order, so results do not depend
/// on the thread count.
inline void run_training(ParamSet& params, TrainingState& state, int n_samples, const TrainCfg& cfg,
                         const SampleLossFn& sample_loss, const std::vector<std::string>& sample_ids = {}) {
    require(cfg.epochs >= 1, "training: epochs must be >= 1");
    require(cfg.batch >= 1, "training: batch must be >= 1");
    require(n_samples >= 1, "training: no samples");
    const int threads = cfg.threads > 0 ? cfg.threads : worker_count();
    Rng order_rng = Rng(cfg.seed).derive("order");
    std::vector<int> order(n_samples);
    state.learning_rate = cfg.lr;
    StepRule step(params, cfg.optimizer);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (int i = 0; i < n_samples; ++i) order[i] = i;
        order_rng.shuffle(order);
        double epoch_loss = 0.0;
        for (int start = 0; start < n_samples; start += cfg.batch) {
            const int len = std::min(cfg.batch, n_samples - start);
            std::vector<ParamSet> grads(len);
            std::vector<double> losses(len, 0.0);
            parallel_for(
                len,
                [&](int b) {
                    const int idx = order[start + b];
                    Rng rng = Rng(cfg.seed).derive("sample").derive(static_cast<std::uint64_t>(epoch) * 1000003ULL + idx);
                    grads[b] = params.zeros_like();
                    losses[b] = sample_loss(idx, rng, &grads[b]);
                },
                threads);
            ParamSet total = params.zeros_like();
            for (int b = 0; b < len; ++b) {
                if (!std::isfinite(losses[b]) || !grads[b].finite()) {
                    const int idx = order[start + b];
                    std::ostringstream msg;
                    msg << "non-finite loss during training at epoch " << state.epoch + 1 << ", scene "
                        << (idx < static_cast<int>(sample_ids.size()) ? sample_ids[idx] : std::to_string(idx))
                        << " (loss " << losses[b] << ")";
                    throw Error(ErrorKind::numeric, msg.str());
                }
                total.axpy(1.0, grads[b]);
                epoch_loss += losses[b];
            }
            total.scale(1.0 / len);
            step.apply(params, total, cfg.lr, cfg.clip_norm);
        }
        ++state.epoch;
        state.loss_history.push_back(epoch_loss / n_samples);
    }
}

} // namespace maskcount
