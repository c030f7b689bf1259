#pragma once

#include "plug/config.hpp"
#include "plug/params.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

namespace plug {

// linear ramp to lr_peak over [0, warmup], then linear decay to 0 at total
inline double lr_at(int step, int total_steps, const TrainConfig& cfg) {
  if (step > total_steps) throw std::runtime_error("step beyond schedule");
  int w = cfg.warmup_iters;
  if (total_steps <= w) return cfg.lr_peak * (double)step / (double)total_steps;
  if (step <= w) return cfg.lr_peak * (double)step / (double)w;
  return cfg.lr_peak * (double)(total_steps - step) / (double)(total_steps - w);
}

// decoupled weight decay; moments only for trainable params
template <typename T>
class AdamW {
 public:
  AdamW(ParamStore<T>& ps, const TrainConfig& cfg)
      : ps_(ps), b1_(cfg.adam_beta1), b2_(cfg.adam_beta2), wd_(cfg.weight_decay) {
    m_.resize(ps.size());
    v_.resize(ps.size());
    for (int i = 0; i < ps.size(); ++i) {
      m_[i] = Tensor<double>(ps.at(i).value.shape);
      v_[i] = Tensor<double>(ps.at(i).value.shape);
    }
  }

  void step(double lr) {
    ++t_;
    double bc1 = 1.0 - std::pow(b1_, (double)t_);
    double bc2 = 1.0 - std::pow(b2_, (double)t_);
    for (int i = 0; i < ps_.size(); ++i) {
      Param<T>& p = ps_.at(i);
      if (!p.trainable) continue;
      for (int64_t j = 0; j < p.value.numel(); ++j) {
        double g = (double)p.grad[j];
        m_[i][j] = b1_ * m_[i][j] + (1.0 - b1_) * g;
        v_[i][j] = b2_ * v_[i][j] + (1.0 - b2_) * g * g;
        double mhat = m_[i][j] / bc1;
        double vhat = v_[i][j] / bc2;
        double upd = mhat / (std::sqrt(vhat) + 1e-8) + wd_ * (double)p.value[j];
        p.value[j] = (T)((double)p.value[j] - lr * upd);
      }
    }
  }

  int steps_taken() const { return t_; }

 private:
  ParamStore<T>& ps_;
  double b1_, b2_, wd_;
  int t_ = 0;
  std::vector<Tensor<double>> m_;
  std::vector<Tensor<double>> v_;
};

}  // namespace plug
