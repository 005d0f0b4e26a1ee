#pragma once

#include "prefixvc/tensor.hpp"

#include <string>
#include <unordered_map>

namespace prefixvc {

struct Parameter {
    std::string name;
    Tensor tensor;
    bool frozen = false;
};

// Decoupled weight decay Adam with bias correction. Frozen parameters are
// skipped entirely: no moment state, no decay.
class AdamW {
  public:
    explicit AdamW(double lr, double beta1 = 0.9, double beta2 = 0.999,
                   double eps = 1e-8, double weight_decay = 0.01);

    void step(const std::vector<Parameter *> & params);
    void zero_grad(const std::vector<Parameter *> & params);
    int64_t steps_taken() const { return t_; }
    double lr() const { return lr_; }
    void set_lr(double lr);

  private:
    struct Moments {
        std::vector<double> m, v;
    };
    double lr_, beta1_, beta2_, eps_, weight_decay_;
    int64_t t_ = 0;
    std::unordered_map<TensorNode *, Moments> state_;
};

// Max over elements of |analytic - central difference| / (|central| + 1e-8).
// f must be a pure scalar function of x (other inputs captured as constants).
double grad_check(const std::function<Tensor(const Tensor &)> & f, Tensor x, double eps = 1e-5);

// Same check for a parameter embedded in a model: loss() must rebuild the
// graph from scratch on every call and be deterministic. The analytic side
// comes from one taped backward, the numeric side from in-place perturbation.
double param_grad_check(const std::function<Tensor()> & loss, Tensor param, double eps = 1e-5);

} // namespace prefixvc
