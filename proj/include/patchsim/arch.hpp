#ifndef PATCHSIM_ARCH_HPP_
#define PATCHSIM_ARCH_HPP_

#include <array>
#include <string>
#include <vector>

#include "patchsim/common.hpp"

namespace patchsim {

// One token of an architecture string:
//   C(n,k,s)  convolution with n filters, k x k window, stride s
//   P(k,s)    max pooling with k x k window, stride s
//   F(n)      fully connected layer with n outputs (flattens its input)
//   ReLU      rectifier
//   SPP(g)    fixed g x g grid max pooling to a flat vector
//   Stack(n)  shorthand for C(n,3,1)-ReLU repeated three times
struct LayerDescriptor {
  enum class Kind { kConv, kPool, kFc, kRelu, kSpp, kStack };

  Kind kind = Kind::kRelu;
  std::array<int, 3> args = {0, 0, 0};

  static LayerDescriptor conv(int n, int k, int s) { return {Kind::kConv, {n, k, s}}; }
  static LayerDescriptor pool(int k, int s) { return {Kind::kPool, {k, s, 0}}; }
  static LayerDescriptor fc(int n) { return {Kind::kFc, {n, 0, 0}}; }
  static LayerDescriptor relu_() { return {Kind::kRelu, {0, 0, 0}}; }
  static LayerDescriptor spp(int g) { return {Kind::kSpp, {g, 0, 0}}; }
  static LayerDescriptor stack(int n) { return {Kind::kStack, {n, 0, 0}}; }

  bool operator==(const LayerDescriptor& o) const { return kind == o.kind && args == o.args; }
};

struct ArchSpec {
  std::vector<LayerDescriptor> layers;

  bool operator==(const ArchSpec& o) const { return layers == o.layers; }
};

// Parses an architecture string. Whitespace anywhere is ignored. Throws
// ArchParseError carrying the 1-based token position on syntax, arity,
// unknown-name and non-positive-integer errors.
ArchSpec parse_arch(const std::string& text);

// Canonical text form; parse(render(spec)) == spec.
std::string render_arch(const ArchSpec& spec);

// Replaces every Stack(n) with C(n,3,1)-ReLU-C(n,3,1)-ReLU-C(n,3,1)-ReLU.
ArchSpec expand_stacks(const ArchSpec& spec);

// Computes the shape after each descriptor for the given input shape
// (either {c,h,w} or a flat {n}). Spatial extents follow truncating integer
// division: out = (in - k)/s + 1. An extent below 1 raises
// ShapeUnderflowError naming the offending descriptor. The spec must be
// Stack-free (call expand_stacks first).
std::vector<std::vector<int>> infer_shapes(const ArchSpec& spec,
                                           const std::vector<int>& input_shape);

// Flat feature count of the final shape in a chain (product of extents).
std::int64_t shape_numel(const std::vector<int>& shape);

}  // namespace patchsim

#endif  // PATCHSIM_ARCH_HPP_
