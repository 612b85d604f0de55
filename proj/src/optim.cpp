#include "sbg/optim.hpp"

#include <cmath>
#include <numbers>

#include "sbg/errors.hpp"

namespace sbg {

void AdamW::step(const std::vector<Param*>& params) {
    if (slots_.size() < params.size()) slots_.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
        Param& p = *params[i];
        if (!p.trainable) continue;
        if (p.grad.empty()) p.grad = Mat::zeros(p.value.rows, p.value.cols);
        if (!p.grad.all_finite())
            throw NumericError("adamw: non-finite gradient for parameter '" + p.name + "'");
        Slot& s = slots_[i];
        if (!s.m.same_shape(p.value)) {
            s.m = Mat::zeros(p.value.rows, p.value.cols);
            s.v = Mat::zeros(p.value.rows, p.value.cols);
        }
    }
    ++step_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (size_t i = 0; i < params.size(); ++i) {
        Param& p = *params[i];
        if (!p.trainable) continue;
        Slot& s = slots_[i];
        for (size_t k = 0; k < p.value.data.size(); ++k) {
            double g = p.grad.data[k];
            s.m.data[k] = cfg_.beta1 * s.m.data[k] + (1.0 - cfg_.beta1) * g;
            s.v.data[k] = cfg_.beta2 * s.v.data[k] + (1.0 - cfg_.beta2) * g * g;
            double m_hat = s.m.data[k] / bc1;
            double v_hat = s.v.data[k] / bc2;
            p.value.data[k] -=
                cfg_.lr * (m_hat / (std::sqrt(v_hat) + cfg_.eps) +
                           cfg_.weight_decay * p.value.data[k]);
        }
    }
}

void AdamW::zero_grad(const std::vector<Param*>& params) const {
    for (Param* p : params) p->zero_grad();
}

double lr_schedule(int epoch, int total_epochs, int warmup, double lr0) {
    if (epoch < 0 || epoch >= total_epochs) throw ConfigError("lr_schedule: epoch out of range");
    if (warmup > 0 && epoch < warmup) return lr0 * (epoch + 1) / static_cast<double>(warmup);
    if (total_epochs <= warmup) return lr0;
    double progress = static_cast<double>(epoch - warmup) / (total_epochs - warmup);
    return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

double clip_grad_norm(const std::vector<Param*>& params, double max_norm) {
    double sq = 0.0;
    for (const Param* p : params) {
        if (!p->trainable || p->grad.empty()) continue;
        if (!p->grad.all_finite())
            throw NumericError("clip_grad_norm: non-finite gradient for '" + p->name + "'");
        for (double g : p->grad.data) sq += g * g;
    }
    double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        double scale = max_norm / norm;
        for (Param* p : params) {
            if (!p->trainable || p->grad.empty()) continue;
            for (double& g : p->grad.data) g *= scale;
        }
    }
    return norm;
}

}  // namespace sbg
