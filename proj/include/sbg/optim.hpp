#pragma once

#include <vector>

#include "sbg/tape.hpp"

namespace sbg {

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;
};

// Decoupled weight decay: p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p).
class AdamW {
public:
    explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

    void step(const std::vector<Param*>& params);
    void zero_grad(const std::vector<Param*>& params) const;

    AdamWConfig& config() { return cfg_; }
    const AdamWConfig& config() const { return cfg_; }
    long step_count() const { return step_; }

    // Checkpoint access: moment buffers keyed by param order.
    struct Slot {
        Mat m, v;
    };
    std::vector<Slot>& slots() { return slots_; }
    void set_step_count(long s) { step_ = s; }

private:
    AdamWConfig cfg_;
    std::vector<Slot> slots_;
    long step_ = 0;
};

// Linear warmup to lr0 followed by cosine annealing to ~0.
double lr_schedule(int epoch, int total_epochs, int warmup = 10, double lr0 = 1e-3);

// Rescales all gradients in place if their global L2 norm exceeds max_norm.
// Returns the pre-clip norm.
double clip_grad_norm(const std::vector<Param*>& params, double max_norm = 1.0);

}  // namespace sbg
