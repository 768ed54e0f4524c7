#include "scsf/mlp.hpp"

#include <cmath>
#include <stdexcept>

namespace scsf {

Mlp Mlp::create(const std::vector<int>& widths, std::mt19937_64& rng) {
  if (widths.size() < 2) throw std::invalid_argument("mlp needs at least in/out widths");
  Mlp m;
  for (size_t i = 0; i + 1 < widths.size(); ++i) {
    Layer layer;
    layer.weight = Tensor::randn({widths[i], widths[i + 1]}, rng, std::sqrt(2.0 / widths[i]), true);
    layer.bias = Tensor::zeros({widths[i + 1]}, true);
    m.layers.push_back(std::move(layer));
  }
  return m;
}

Tensor Mlp::forward(const Tensor& x) const {
  Tensor h = x;
  for (size_t i = 0; i < layers.size(); ++i) {
    h = add(matmul(h, layers[i].weight), layers[i].bias);
    if (i + 1 < layers.size()) h = relu(h);
  }
  return h;
}

void Mlp::collect(const std::string& prefix, std::vector<Parameter>& out) const {
  for (size_t i = 0; i < layers.size(); ++i) {
    out.push_back({prefix + ".w" + std::to_string(i), layers[i].weight});
    out.push_back({prefix + ".b" + std::to_string(i), layers[i].bias});
  }
}

}  // namespace scsf
