#ifndef XS_NETWORK_HPP
#define XS_NETWORK_HPP

#include <map>
#include <string>

#include "xs/cross_stitch.hpp"
#include "xs/graph.hpp"
#include "xs/variants.hpp"

namespace xs {

// Architecture description for the deeply-supervised valid-convolution U-Net
// family. filters are the per-level counts {enc1, enc2, bottleneck, dec_mid,
// dec_high}. crossstitch_layers index the macro layers (convs 1,2; down 3;
// convs 4,5; down 6; convs 7,8; up 9; convs 10,11; up 12; convs 13,14); units
// can sit after the down/up layers {3, 6, 9, 12}.
struct NetworkSpec {
  Variant variant = Variant::CrossStitch;
  std::array<int, 5> filters{16, 32, 64, 32, 16};
  int input_patch = 96;
  int num_structures = 5;  // background + organ classes
  std::vector<int> crossstitch_layers{3, 6, 9, 12};
  // Cross-stitch segmentation-path input: fixed image only by default; the
  // flag switches to (I_F, S_M, I_M).
  bool seg_path_full_inputs = false;
  float leaky_slope = 0.2f;
  float bn_epsilon = 1e-5f;
  float bn_momentum = 0.9f;

  void validate() const;
  int trunk_in_channels() const;     // single-trunk variants / CS registration path
  int seg_path_in_channels() const;  // CS segmentation path
};

enum class Mode { Train, Eval };

struct ForwardInputs {
  Tensor<float> fixed;              // [N,1,n,n,n]
  Tensor<float> moving;             // [N,1,n,n,n]; ignored by Segmentation
  Tensor<float> moving_seg_onehot;  // [N,C,n,n,n]; used when S_M is an input
};

class Network {
 public:
  using Node = Graph<float>::Node;
  using NodeMap = std::map<std::string, Node*>;

  NetworkSpec spec;
  std::map<std::string, Tensor<float>> params;  // trainable, by name
  std::map<std::string, Tensor<float>> stats;   // BN running stats (.rm/.rv)
  bool bn_initialized = false;

  static Network build(const NetworkSpec& spec, uint64_t seed);

  int64_t count_parameters() const;

  // Builds the forward graph; in Train mode parameters become trainable
  // leaves (reported through param_nodes) and BN running stats are updated.
  MultiResOutputs<float> forward(Graph<float>& g, const ForwardInputs& in, Mode mode,
                                 NodeMap* param_nodes = nullptr);
};

// Concatenate [N,Ci,D,H,W] tensors along the channel axis.
Tensor<float> concat_channel_tensors(const std::vector<const Tensor<float>*>& parts);

}  // namespace xs

#endif  // XS_NETWORK_HPP
