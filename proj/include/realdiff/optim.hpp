#pragma once

#include <map>
#include <string>

#include "realdiff/tensor.hpp"

namespace realdiff {

// Named parameter set. Parameters live off-tape; bind_all registers them as
// leaves on a tape for one forward/backward pass.
class ParamStore {
public:
    Tensor& create(const std::string& name, Tensor init);
    Tensor& get(const std::string& name);
    const Tensor& get(const std::string& name) const;
    bool has(const std::string& name) const { return params_.count(name) != 0; }
    std::size_t size() const { return params_.size(); }

    // name -> tape leaf; iteration order is the sorted name order
    std::map<std::string, Tensor> bind_all(Tape& tape) const;

    const std::map<std::string, Tensor>& entries() const { return params_; }

    std::int64_t total_scalars() const;

private:
    std::map<std::string, Tensor> params_;
};

using GradMap = std::map<std::string, Tensor>;

// Sums tape gradients for the given leaves into acc (creating entries as needed).
void accumulate_grads(const Tape& tape, const std::map<std::string, Tensor>& leaves,
                      GradMap& acc);

double global_grad_norm(const GradMap& grads);

// Scales all gradients in place so the global norm does not exceed max_norm.
void clip_global_norm(GradMap& grads, double max_norm);

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Bias-corrected adaptive-moment optimizer; moment state is keyed by parameter name.
class Adam {
public:
    explicit Adam(AdamConfig cfg = {});

    // Applies one update in place. Parameters without a gradient entry are
    // treated as having a zero gradient.
    void step(ParamStore& params, const GradMap& grads);

    long long steps() const { return t_; }

private:
    AdamConfig cfg_;
    struct Slot {
        std::vector<double> m, v;
    };
    std::map<std::string, Slot> state_;
    long long t_ = 0;
};

}  // namespace realdiff
