#include "realdiff/optim.hpp"

#include <cmath>

namespace realdiff {

Tensor& ParamStore::create(const std::string& name, Tensor init) {
    auto [it, inserted] = params_.emplace(name, std::move(init));
    if (!inserted) throw ContractError("parameter already exists: " + name);
    return it->second;
}

Tensor& ParamStore::get(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ContractError("unknown parameter: " + name);
    return it->second;
}

const Tensor& ParamStore::get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ContractError("unknown parameter: " + name);
    return it->second;
}

std::map<std::string, Tensor> ParamStore::bind_all(Tape& tape) const {
    std::map<std::string, Tensor> leaves;
    for (const auto& [name, value] : params_) leaves.emplace(name, tape.leaf(value));
    return leaves;
}

std::int64_t ParamStore::total_scalars() const {
    std::int64_t n = 0;
    for (const auto& [name, value] : params_) n += value.size();
    return n;
}

void accumulate_grads(const Tape& tape, const std::map<std::string, Tensor>& leaves,
                      GradMap& acc) {
    for (const auto& [name, leaf] : leaves) {
        Tensor g = tape.grad(leaf);
        auto it = acc.find(name);
        if (it == acc.end()) {
            acc.emplace(name, std::move(g));
        } else {
            it->second = add(it->second, g);
        }
    }
}

double global_grad_norm(const GradMap& grads) {
    double sq = 0.0;
    for (const auto& [name, g] : grads) {
        const double* p = g.data();
        for (std::int64_t i = 0; i < g.size(); ++i) sq += p[i] * p[i];
    }
    return std::sqrt(sq);
}

void clip_global_norm(GradMap& grads, double max_norm) {
    const double norm = global_grad_norm(grads);
    if (!(norm > max_norm)) return;
    const double s = max_norm / norm;
    for (auto& [name, g] : grads) g = scale(g, s);
}

Adam::Adam(AdamConfig cfg) : cfg_(cfg) {
    if (!(cfg_.lr > 0.0)) throw ContractError("learning rate must be positive");
}

void Adam::step(ParamStore& params, const GradMap& grads) {
    for (const auto& [name, g] : grads) {
        if (!params.has(name)) throw ContractError("gradient for unknown parameter: " + name);
        if (g.shape() != params.get(name).shape()) {
            throw ShapeError("gradient shape " + shape_str(g.shape()) +
                             " does not match parameter " + name + " " +
                             shape_str(params.get(name).shape()));
        }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (const auto& entry : params.entries()) {
        const std::string& name = entry.first;
        Tensor& theta = params.get(name);
        const std::int64_t n = theta.size();
        Slot& slot = state_[name];
        if (slot.m.empty()) {
            slot.m.assign(n, 0.0);
            slot.v.assign(n, 0.0);
        }
        auto git = grads.find(name);
        const double* g = git == grads.end() ? nullptr : git->second.data();
        double* w = theta.mutable_data();
        for (std::int64_t i = 0; i < n; ++i) {
            const double gi = g ? g[i] : 0.0;
            slot.m[i] = cfg_.beta1 * slot.m[i] + (1.0 - cfg_.beta1) * gi;
            slot.v[i] = cfg_.beta2 * slot.v[i] + (1.0 - cfg_.beta2) * gi * gi;
            const double mhat = slot.m[i] / bc1;
            const double vhat = slot.v[i] / bc2;
            w[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
    }
}

}  // namespace realdiff
