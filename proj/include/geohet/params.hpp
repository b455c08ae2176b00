#pragma once

// Named, ordered parameter storage shared by the model, the optimizer and the
// checkpoint format.  Order of insertion is the canonical order everywhere:
// flattened vectors, optimizer state and serialized weights all follow it.

#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "geohet/common.hpp"
#include "geohet/tape.hpp"

namespace geohet {

template <typename S>
struct ParamSet {
  std::vector<std::string> names;
  std::vector<MatX<S>> values;
  std::unordered_map<std::string, int> index;

  int add(const std::string& name, MatX<S> v) {
    require(index.find(name) == index.end(), ErrorCode::ConfigError,
            "duplicate parameter name: " + name);
    int id = static_cast<int>(names.size());
    index.emplace(name, id);
    names.push_back(name);
    values.push_back(std::move(v));
    return id;
  }

  bool has(const std::string& name) const {
    return index.find(name) != index.end();
  }

  int id_of(const std::string& name) const {
    auto it = index.find(name);
    require(it != index.end(), ErrorCode::ConfigError,
            "unknown parameter name: " + name);
    return it->second;
  }

  MatX<S>& at(const std::string& name) { return values[id_of(name)]; }
  const MatX<S>& at(const std::string& name) const {
    return values[id_of(name)];
  }

  std::size_t size() const { return names.size(); }

  Eigen::Index scalar_count() const {
    Eigen::Index n = 0;
    for (const auto& m : values) n += m.size();
    return n;
  }
};

using Params = ParamSet<double>;

// Leafs every parameter on a tape.  After backward(), grads() returns the
// adjoints in parameter order (zero matrices for untouched parameters).
template <typename S>
struct BoundParams {
  Tape<S>* tape = nullptr;
  const ParamSet<S>* params = nullptr;
  std::vector<Var<S>> vars;

  Var<S> operator[](const std::string& name) const {
    return vars[params->id_of(name)];
  }

  std::vector<MatX<S>> grads() const {
    std::vector<MatX<S>> g;
    g.reserve(vars.size());
    for (std::size_t i = 0; i < vars.size(); ++i) {
      if (vars[i].grad_touched())
        g.push_back(vars[i].grad());
      else
        g.push_back(MatX<S>::Zero(params->values[i].rows(),
                                  params->values[i].cols()));
    }
    return g;
  }
};

template <typename S>
BoundParams<S> bind(Tape<S>& t, const ParamSet<S>& p) {
  BoundParams<S> b;
  b.tape = &t;
  b.params = &p;
  b.vars.reserve(p.size());
  for (const auto& m : p.values) b.vars.push_back(t.leaf(m));
  return b;
}

// Running gradient accumulator aligned with a ParamSet (used when one update
// aggregates adjoints from several tapes).
template <typename S>
struct GradAccum {
  std::vector<MatX<S>> sums;

  explicit GradAccum(const ParamSet<S>& p) {
    sums.reserve(p.size());
    for (const auto& m : p.values)
      sums.push_back(MatX<S>::Zero(m.rows(), m.cols()));
  }

  void add(const BoundParams<S>& b) {
    require(b.vars.size() == sums.size(), ErrorCode::ShapeMismatch,
            "gradient accumulator does not match the bound parameter set");
    for (std::size_t i = 0; i < sums.size(); ++i)
      if (b.vars[i].grad_touched()) sums[i] += b.vars[i].grad();
  }

  void zero() {
    for (auto& m : sums) m.setZero();
  }
};

inline Mat xavier_uniform(Eigen::Index rows, Eigen::Index cols,
                          std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / double(rows + cols));
  std::uniform_real_distribution<double> u(-limit, limit);
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = u(rng);
  return m;
}

}  // namespace geohet
