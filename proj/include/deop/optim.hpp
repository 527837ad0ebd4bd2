#pragma once

// Parameter updates from a replayed tape. Plain gradient descent is the
// default for exact run-to-run reproducibility; Adam is available when
// convergence speed matters more.

#include <cmath>
#include <unordered_map>
#include <vector>

#include "deop/nn.hpp"

namespace deop {

class GradientDescent {
  public:
    explicit GradientDescent(double lr) : lr_(lr) {
        if (!(lr > 0.0)) throw ConfigError("gradient descent: learning rate must be positive");
    }

    void step(const ParamMap& params, GradTape& tape) {
        for (const auto& [name, t] : params) {
            const std::vector<double>* g = tape.find_grad(t.node());
            if (!g) continue;
            std::vector<double>& v = t.node()->v;
            for (size_t i = 0; i < v.size(); ++i) v[i] -= lr_ * (*g)[i];
        }
    }

    double lr() const { return lr_; }

  private:
    double lr_ = 0.0;
};

class Adam {
  public:
    explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
        if (!(lr > 0.0)) throw ConfigError("adam: learning rate must be positive");
    }

    void step(const ParamMap& params, GradTape& tape) {
        for (const auto& [name, t] : params) {
            const std::vector<double>* g = tape.find_grad(t.node());
            if (!g) continue;
            Slot& s = slots_[t.node()];
            if (s.m.empty()) {
                s.m.assign(t.vals().size(), 0.0);
                s.v.assign(t.vals().size(), 0.0);
            }
            ++s.step;
            const double c1 = 1.0 - std::pow(beta1_, s.step);
            const double c2 = 1.0 - std::pow(beta2_, s.step);
            std::vector<double>& v = t.node()->v;
            const auto& gv = *g;
            for (size_t i = 0; i < v.size(); ++i) {
                s.m[i] = beta1_ * s.m[i] + (1.0 - beta1_) * gv[i];
                s.v[i] = beta2_ * s.v[i] + (1.0 - beta2_) * gv[i] * gv[i];
                v[i] -= lr_ * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + eps_);
            }
        }
    }

  private:
    struct Slot {
        std::vector<double> m, v;
        int64_t step = 0;
    };

    double lr_, beta1_, beta2_, eps_;
    std::unordered_map<const void*, Slot> slots_;
};

}  // namespace deop
