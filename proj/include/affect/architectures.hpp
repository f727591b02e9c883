#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "affect/nn/sequential.hpp"
#include "affect/tensor.hpp"

namespace affect::arch {

class UnknownArchitecture : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class ArchId { AlexNet, VggNet, MobileNet };

/// Emotion: 8-way softmax. ValenceArousal: 2 linear outputs.
enum class Head { Emotion, ValenceArousal };

inline constexpr std::size_t kInputSize = 128;
inline constexpr std::size_t kInputChannels = 3;
inline constexpr std::size_t kNumEmotions = 8;

/// Stable ids shared by the CLI, the service and weight files:
/// "arch1-alexnet", "arch2-vggnet", "arch3-mobilenet".
std::string_view to_string(ArchId id);
ArchId parse_arch(std::string_view id);

/// "emotion" or "va".
std::string_view to_string(Head head);
Head parse_head(std::string_view head);
std::size_t head_outputs(Head head);

enum class BlockType { Conv, DConv, MaxPool, Flatten, Dense, GlobalAvgPool, Output };
enum class DropoutKind { None, Gaussian, Standard };

/// One row of an architecture table, with repeated rows expanded.
struct LayerSpec {
  BlockType type;
  std::size_t kernel = 0;
  std::size_t channels = 0;
  std::size_t stride = 1;
  DropoutKind dropout = DropoutKind::None;
  double dropout_rate = 0.0;
  std::string name;
};

struct ModelGraph {
  ArchId arch;
  Head head;
  std::vector<LayerSpec> blocks;

  static Shape input_shape() { return {kInputSize, kInputSize, kInputChannels}; }
};

ModelGraph describe(ArchId arch, Head head);

/// A graph together with its instantiated layers. `block_end[i]` is one past
/// the last layer in `net` realizing `graph.blocks[i]`; the final block is the
/// output head.
struct AffectModel {
  ModelGraph graph;
  nn::Sequential<float> net;
  std::vector<std::size_t> block_end;

  std::size_t head_begin() const { return block_end.size() < 2 ? 0 : block_end[block_end.size() - 2]; }

  /// Inference on [N,128,128,3] or a single [128,128,3] image. Rejects any
  /// other input shape. Returns [N,8] probabilities or [N,2] values.
  Tensor predict(const Tensor& images) const;

  /// Per-block output shapes (one sample), computed from layer shape algebra.
  std::vector<Shape> block_output_shapes() const;

  /// Every stored tensor in file order, with names.
  std::vector<const nn::Parameter<float>*> parameters() const;
  std::vector<nn::Parameter<float>*> parameters();
};

/// Validates and batches an input; throws ShapeError unless 128x128x3.
Tensor as_model_batch(const Tensor& images);

AffectModel build(ArchId arch, Head head, std::uint64_t seed = 0);
AffectModel build(const ModelGraph& graph, std::uint64_t seed = 0);

struct ParamReport {
  struct Entry {
    std::string block;
    std::string description;
    std::size_t params = 0;
    std::size_t trainable = 0;
  };
  std::vector<Entry> blocks;
  std::size_t total_params = 0;
  std::size_t trainable_params = 0;
  std::size_t serialized_bytes_f32 = 0;
};

ParamReport param_report(const AffectModel& model);

/// Replaces the output head and re-initializes it from `seed`; every backbone
/// tensor is copied bit-for-bit. Throws std::invalid_argument when the head
/// is already `new_head`.
AffectModel swap_head(const AffectModel& model, Head new_head, std::uint64_t seed = 0);

std::string describe_block(const LayerSpec& spec);

}  // namespace affect::arch
