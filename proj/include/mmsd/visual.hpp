#pragma once

#include <cmath>
#include <random>

#include "mmsd/tensor.hpp"

namespace mmsd {

inline std::size_t grid_side(std::size_t regions) {
  auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(regions))));
  if (side * side != regions)
    throw ConfigError("region count " + std::to_string(regions) + " is not a perfect square");
  return side;
}

// 1x1 convolutions of the spatially aware attention module: a shared squeeze
// over the pooled maps and one expand map per spatial direction.
struct CoordAttnParams {
  Tensor squeeze;   // (C/reduction) x C
  Tensor expand_h;  // C x (C/reduction)
  Tensor expand_w;  // C x (C/reduction)
  std::size_t reduction = 1;
  Activation act = Activation::Relu;

  static CoordAttnParams init(std::size_t channels, std::size_t reduction, std::mt19937_64& rng,
                              Activation act = Activation::Relu) {
    if (reduction < 1 || channels % reduction != 0)
      throw ConfigError("channel count " + std::to_string(channels) + " not divisible by reduction " +
                        std::to_string(reduction));
    const std::size_t mid = channels / reduction;
    return {glorot({mid, channels}, rng), glorot({channels, mid}, rng), glorot({channels, mid}, rng), reduction,
            act};
  }
};

// Linear projection of raw region descriptors into the text feature width.
inline Tensor project_regions(Tape& tape, const Tensor& regions, const Tensor& projection) {
  if (regions.rank() != 2 || projection.rank() != 2 || regions.extent(1) != projection.extent(0))
    throw ShapeError("project_regions width mismatch: " + shape_str(regions.shape()) + " * " +
                     shape_str(projection.shape()));
  return matmul(tape, regions, projection);
}

// r x d region matrix viewed as d channels over the sqrt(r) x sqrt(r) grid.
inline Tensor regions_to_grid(Tape& tape, const Tensor& projected) {
  const std::size_t side = grid_side(projected.extent(0));
  const std::size_t d = projected.extent(1);
  return reshape(tape, transpose(tape, projected), {d, side, side});
}

inline Tensor grid_to_regions(Tape& tape, const Tensor& grid) {
  const std::size_t d = grid.extent(0), h = grid.extent(1), w = grid.extent(2);
  return transpose(tape, reshape(tape, grid, {d, h * w}));
}

// Direction-aware attention over a C x H x W feature map: per-axis average
// pooling, a shared squeeze conv over the concatenated maps, per-axis expand
// convs with sigmoid gates, and gating of the input by both maps.
inline Tensor coordinate_attention(Tape& tape, const Tensor& x, const CoordAttnParams& params) {
  if (x.rank() != 3) throw ShapeError("coordinate_attention expects C x H x W, got " + shape_str(x.shape()));
  const std::size_t C = x.extent(0), H = x.extent(1), W = x.extent(2);
  if (params.squeeze.extent(1) != C)
    throw ShapeError("coordinate_attention params built for " + std::to_string(params.squeeze.extent(1)) +
                     " channels, input has " + std::to_string(C));

  Tensor pooled_h = reshape(tape, avg_pool_axis(tape, x, SpatialAxis::Width), {C, H});
  Tensor pooled_w = reshape(tape, avg_pool_axis(tape, x, SpatialAxis::Height), {C, W});
  Tensor joint = elementwise(tape, params.act,
                             matmul(tape, params.squeeze, concat(tape, {pooled_h, pooled_w}, 1)));
  Tensor gate_h = sigmoid(tape, matmul(tape, params.expand_h, slice_cols(tape, joint, 0, H)));
  Tensor gate_w = sigmoid(tape, matmul(tape, params.expand_w, slice_cols(tape, joint, H, H + W)));
  Tensor gated = mul_broadcast(tape, x, reshape(tape, gate_h, {C, H, 1}));
  return mul_broadcast(tape, gated, reshape(tape, gate_w, {C, 1, W}));
}

// Identity pass-through used when the visual attention switch is off.
inline Tensor bypass_attention(Tape&, const Tensor& x) { return x; }

}  // namespace mmsd
