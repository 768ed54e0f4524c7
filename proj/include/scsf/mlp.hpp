#pragma once

#include <random>
#include <string>
#include <vector>

#include "scsf/tensor.hpp"

namespace scsf {

// Dense layers with relu between them, linear at the end.
struct Mlp {
  struct Layer {
    Tensor weight;  // [in, out]
    Tensor bias;    // [out]
  };
  std::vector<Layer> layers;

  // widths = {in, hidden..., out}
  static Mlp create(const std::vector<int>& widths, std::mt19937_64& rng);
  Tensor forward(const Tensor& x) const;
  int in_width() const { return layers.front().weight.extent(0); }
  int out_width() const { return layers.back().weight.extent(1); }
  void collect(const std::string& prefix, std::vector<Parameter>& out) const;
};

}  // namespace scsf
