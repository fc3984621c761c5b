#pragma once

// Parameter registry, standard layers and the Adam optimizer built on the
// autodiff Vars in tensor.hpp. Parameters are named so checkpoints can store
// and restore them by key.

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "curvelab/rng.hpp"
#include "curvelab/tensor.hpp"

namespace curvelab {

class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed = 0) : seed_(seed) {}

  // Uniform in [-bound, bound] with bound = 1/sqrt(fan_in); bound 0 zero-fills.
  Var create(const std::string& name, Shape shape, double bound) {
    CVL_CHECK(!params_.count(name), "duplicate parameter: " + name);
    std::vector<double> v(numel(shape), 0.0);
    if (bound != 0.0) {
      Rng rng(seed_, mix64(std::hash<std::string>{}(name)));
      for (auto& x : v) x = rng.uniform(-bound, bound);
    }
    Var p = Var::leaf(std::move(shape), std::move(v), true);
    params_.emplace(name, p);
    return p;
  }

  Var create_const(const std::string& name, Shape shape, double fill) {
    CVL_CHECK(!params_.count(name), "duplicate parameter: " + name);
    std::vector<double> v(numel(shape), fill);
    Var p = Var::leaf(std::move(shape), std::move(v), true);
    params_.emplace(name, p);
    return p;
  }

  Var get(const std::string& name) const {
    auto it = params_.find(name);
    CVL_CHECK(it != params_.end(), "unknown parameter: " + name);
    return it->second;
  }

  bool has(const std::string& name) const { return params_.count(name) > 0; }

  const std::map<std::string, Var>& all() const { return params_; }

  void zero_grad() {
    for (auto& [name, p] : params_) p.zero_grad();
  }

  std::int64_t count() const {
    std::int64_t n = 0;
    for (const auto& [name, p] : params_) n += p.size();
    return n;
  }

 private:
  std::uint64_t seed_;
  std::map<std::string, Var> params_;
};

struct Linear {
  Var W, b;

  Linear() = default;
  Linear(ParamStore& ps, const std::string& name, int in, int out, bool zero_init = false) {
    double bound = zero_init ? 0.0 : 1.0 / std::sqrt(static_cast<double>(in));
    W = ps.create(name + ".weight", {out, in}, bound);
    b = ps.create(name + ".bias", {out}, zero_init ? 0.0 : bound);
  }

  Var operator()(const Var& x) const { return linear(x, W, b); }
};

struct Conv2d {
  Var W, b;
  int stride = 1, pad = 0;

  Conv2d() = default;
  Conv2d(ParamStore& ps, const std::string& name, int in_ch, int out_ch, int k, int stride_,
         int pad_)
      : stride(stride_), pad(pad_) {
    double bound = 1.0 / std::sqrt(static_cast<double>(in_ch) * k * k);
    W = ps.create(name + ".weight", {out_ch, in_ch, k, k}, bound);
    b = ps.create(name + ".bias", {out_ch}, bound);
  }

  Var operator()(const Var& x) const { return conv2d(x, W, b, stride, pad); }
};

struct GroupNorm {
  Var gamma, beta;
  int groups = 1;

  GroupNorm() = default;
  GroupNorm(ParamStore& ps, const std::string& name, int channels, int groups_)
      : groups(groups_) {
    gamma = ps.create_const(name + ".gamma", {channels}, 1.0);
    beta = ps.create_const(name + ".beta", {channels}, 0.0);
  }

  Var operator()(const Var& x) const { return group_norm(x, gamma, beta, groups); }
};

struct LayerNorm {
  Var gamma, beta;

  LayerNorm() = default;
  LayerNorm(ParamStore& ps, const std::string& name, int dim) {
    gamma = ps.create_const(name + ".gamma", {dim}, 1.0);
    beta = ps.create_const(name + ".beta", {dim}, 0.0);
  }

  Var operator()(const Var& x) const { return layer_norm(x, gamma, beta); }
};

// Two-layer MLP with SiLU in between; hidden == 0 collapses to one layer.
struct Mlp {
  Linear fc1, fc2;
  bool single = false;

  Mlp() = default;
  Mlp(ParamStore& ps, const std::string& name, int in, int hidden, int out,
      bool zero_init_last = false) {
    if (hidden <= 0) {
      fc1 = Linear(ps, name + ".fc1", in, out, zero_init_last);
      single = true;
    } else {
      fc1 = Linear(ps, name + ".fc1", in, hidden);
      fc2 = Linear(ps, name + ".fc2", hidden, out, zero_init_last);
    }
  }

  Var operator()(const Var& x) const {
    if (single) return fc1(x);
    return fc2(silu(fc1(x)));
  }
};

// Adam with additive (classic) weight decay folded into the gradient.
class Adam {
 public:
  Adam(double lr = 2e-4, double weight_decay = 1e-4, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8)
      : lr_(lr), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {}

  void step(ParamStore& ps) {
    ++t_;
    double bc1 = 1.0 - std::pow(b1_, t_);
    double bc2 = 1.0 - std::pow(b2_, t_);
    for (auto& [name, p] : ps.all()) {
      auto& m = m_[name];
      auto& v = v_[name];
      if (m.size() != static_cast<std::size_t>(p.size())) m.assign(p.size(), 0.0);
      if (v.size() != static_cast<std::size_t>(p.size())) v.assign(p.size(), 0.0);
      auto& val = const_cast<Var&>(p).mutable_val();
      const auto& g = p.grad();
      if (g.size() != val.size()) continue;
      for (std::size_t i = 0; i < val.size(); ++i) {
        double gi = g[i] + wd_ * val[i];
        m[i] = b1_ * m[i] + (1.0 - b1_) * gi;
        v[i] = b2_ * v[i] + (1.0 - b2_) * gi * gi;
        double mh = m[i] / bc1, vh = v[i] / bc2;
        val[i] -= lr_ * mh / (std::sqrt(vh) + eps_);
      }
    }
  }

  int step_count() const { return t_; }
  void set_step_count(int t) { t_ = t; }
  std::map<std::string, std::vector<double>>& m_state() { return m_; }
  std::map<std::string, std::vector<double>>& v_state() { return v_; }
  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }

 private:
  double lr_, wd_, b1_, b2_, eps_;
  int t_ = 0;
  std::map<std::string, std::vector<double>> m_;
  std::map<std::string, std::vector<double>> v_;
};

}  // namespace curvelab
