#include "affect/architectures.hpp"

#include "affect/model_io.hpp"

namespace affect::arch {
namespace {

using nn::Init;

LayerSpec spec(BlockType type, std::size_t kernel = 0, std::size_t channels = 0, std::size_t stride = 1,
               DropoutKind dropout = DropoutKind::None, double rate = 0.0) {
  return {type, kernel, channels, stride, dropout, rate, {}};
}
LayerSpec conv(std::size_t k, std::size_t ch, std::size_t stride = 1) {
  return spec(BlockType::Conv, k, ch, stride);
}
LayerSpec dconv(std::size_t ch, std::size_t stride) { return spec(BlockType::DConv, 3, ch, stride); }
LayerSpec pool() { return spec(BlockType::MaxPool, 2, 0, 2, DropoutKind::Gaussian, 0.2); }
LayerSpec dense1024() { return spec(BlockType::Dense, 0, 1024, 1, DropoutKind::Standard, 0.5); }

void name_blocks(std::vector<LayerSpec>& blocks) {
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    if (blocks[i].type == BlockType::Output) {
      blocks[i].name = "head";
      continue;
    }
    std::string idx = std::to_string(i + 1);
    if (idx.size() < 2) idx.insert(0, "0");
    blocks[i].name = "b" + idx;
  }
}

}  // namespace

std::string_view to_string(ArchId id) {
  switch (id) {
    case ArchId::AlexNet: return "arch1-alexnet";
    case ArchId::VggNet: return "arch2-vggnet";
    case ArchId::MobileNet: return "arch3-mobilenet";
  }
  throw UnknownArchitecture("unknown architecture");
}

ArchId parse_arch(std::string_view id) {
  if (id == "arch1-alexnet") return ArchId::AlexNet;
  if (id == "arch2-vggnet") return ArchId::VggNet;
  if (id == "arch3-mobilenet") return ArchId::MobileNet;
  throw UnknownArchitecture("unknown architecture id '" + std::string(id) +
                            "' (expected arch1-alexnet, arch2-vggnet or arch3-mobilenet)");
}

std::string_view to_string(Head head) {
  return head == Head::Emotion ? "emotion" : "va";
}

Head parse_head(std::string_view head) {
  if (head == "emotion" || head == "classification") return Head::Emotion;
  if (head == "va" || head == "regression") return Head::ValenceArousal;
  throw std::invalid_argument("unknown head '" + std::string(head) + "' (expected emotion or va)");
}

std::size_t head_outputs(Head head) { return head == Head::Emotion ? kNumEmotions : 2; }

ModelGraph describe(ArchId arch, Head head) {
  ModelGraph g{arch, head, {}};
  auto& b = g.blocks;
  switch (arch) {
    case ArchId::AlexNet:
      for (auto [k, ch] : {std::pair{9, 16}, {7, 32}, {5, 64}, {3, 128}, {3, 128}}) {
        b.push_back(conv(k, ch));
        b.push_back(pool());
      }
      b.push_back(spec(BlockType::Flatten));
      b.push_back(dense1024());
      b.push_back(dense1024());
      break;
    case ArchId::VggNet:
      for (std::size_t ch : {16, 32, 64, 128, 128}) {
        b.push_back(conv(3, ch));
        b.push_back(conv(3, ch));
        b.push_back(pool());
      }
      b.push_back(spec(BlockType::Flatten));
      b.push_back(dense1024());
      b.push_back(dense1024());
      break;
    case ArchId::MobileNet:
      b.push_back(conv(3, 32, 2));
      b.push_back(dconv(64, 1));
      b.push_back(dconv(128, 2));
      b.push_back(dconv(128, 1));
      b.push_back(dconv(256, 2));
      b.push_back(dconv(256, 1));
      b.push_back(dconv(512, 2));
      for (int i = 0; i < 5; ++i) b.push_back(dconv(512, 1));
      b.push_back(dconv(1024, 2));
      b.push_back(dconv(1024, 1));
      b.push_back(spec(BlockType::GlobalAvgPool, 0, 0, 1, DropoutKind::Standard, 0.3));
      break;
  }
  b.push_back(spec(BlockType::Output, 0, head_outputs(head)));
  name_blocks(b);
  return g;
}

std::string describe_block(const LayerSpec& s) {
  auto kxk = [&] { return std::to_string(s.kernel) + "x" + std::to_string(s.kernel); };
  switch (s.type) {
    case BlockType::Conv:
      return "Conv " + kxk() + "x" + std::to_string(s.channels) + " /" + std::to_string(s.stride);
    case BlockType::DConv:
      return "DConv " + kxk() + "x" + std::to_string(s.channels) + " /" + std::to_string(s.stride);
    case BlockType::MaxPool: return "MaxPool 2x2";
    case BlockType::Flatten: return "Flatten";
    case BlockType::Dense: return "Dense " + std::to_string(s.channels);
    case BlockType::GlobalAvgPool: return "GlobalAvePool";
    case BlockType::Output:
      return "Dense " + std::to_string(s.channels) + (s.channels == kNumEmotions ? " softmax" : " linear");
  }
  return "?";
}

namespace {

// Appends the layers realizing one block. `in` is the per-sample input shape.
void append_block(nn::Sequential<float>& net, const LayerSpec& s, const Shape& in, Rng& rng) {
  const std::string& n = s.name;
  switch (s.type) {
    case BlockType::Conv:
      net.add(std::make_unique<nn::Conv2D<float>>(n + ".conv", s.kernel, in[2], s.channels, s.stride, rng));
      net.add(std::make_unique<nn::BatchNorm<float>>(n + ".bn", s.channels));
      net.add(std::make_unique<nn::ReLU<float>>());
      break;
    case BlockType::DConv:
      net.add(std::make_unique<nn::DepthwiseConv2D<float>>(n + ".dw", s.kernel, in[2], s.stride, rng));
      net.add(std::make_unique<nn::BatchNorm<float>>(n + ".dw_bn", in[2]));
      net.add(std::make_unique<nn::ReLU<float>>());
      net.add(std::make_unique<nn::Conv2D<float>>(n + ".pw", 1, in[2], s.channels, 1, rng));
      net.add(std::make_unique<nn::BatchNorm<float>>(n + ".pw_bn", s.channels));
      net.add(std::make_unique<nn::ReLU<float>>());
      break;
    case BlockType::MaxPool:
      net.add(std::make_unique<nn::MaxPool2x2<float>>());
      break;
    case BlockType::Flatten:
      net.add(std::make_unique<nn::Flatten<float>>());
      break;
    case BlockType::Dense:
      net.add(std::make_unique<nn::Dense<float>>(n + ".dense", shape_size(in), s.channels, rng));
      net.add(std::make_unique<nn::ReLU<float>>());
      break;
    case BlockType::GlobalAvgPool:
      net.add(std::make_unique<nn::GlobalAvgPool<float>>());
      break;
    case BlockType::Output:
      net.add(std::make_unique<nn::Dense<float>>(n + ".dense", shape_size(in), s.channels, rng,
                                                 Init::GlorotUniform));
      if (s.channels == kNumEmotions) net.add(std::make_unique<nn::Softmax<float>>());
      break;
  }
  if (s.dropout == DropoutKind::Gaussian) {
    net.add(std::make_unique<nn::GaussianDropout<float>>(s.dropout_rate));
  } else if (s.dropout == DropoutKind::Standard) {
    net.add(std::make_unique<nn::Dropout<float>>(s.dropout_rate));
  }
}

}  // namespace

AffectModel build(const ModelGraph& graph, std::uint64_t seed) {
  Rng rng(seed);
  AffectModel m{graph, {}, {}};
  Shape cur = ModelGraph::input_shape();
  for (const auto& block : graph.blocks) {
    const std::size_t first = m.net.size();
    append_block(m.net, block, cur, rng);
    for (std::size_t i = first; i < m.net.size(); ++i) cur = m.net.layer(i).output_shape(cur);
    m.block_end.push_back(m.net.size());
  }
  return m;
}

AffectModel build(ArchId arch, Head head, std::uint64_t seed) {
  return build(describe(arch, head), seed);
}

Tensor as_model_batch(const Tensor& images) {
  const auto& s = images.shape();
  const bool single = s.size() == 3;
  const std::size_t off = single ? 0 : 1;
  if ((s.size() != 3 && s.size() != 4) || s[off] != kInputSize || s[off + 1] != kInputSize ||
      s[off + 2] != kInputChannels) {
    throw ShapeError("model input must be 128x128x3, got " + shape_to_string(s));
  }
  if (!single) return images;
  return images.reshaped({1, kInputSize, kInputSize, kInputChannels});
}

Tensor AffectModel::predict(const Tensor& images) const {
  return net.infer(as_model_batch(images));
}

std::vector<Shape> AffectModel::block_output_shapes() const {
  const auto per_layer = net.output_shapes(ModelGraph::input_shape());
  std::vector<Shape> out;
  for (auto end : block_end) out.push_back(per_layer.at(end - 1));
  return out;
}

std::vector<const nn::Parameter<float>*> AffectModel::parameters() const {
  std::vector<const nn::Parameter<float>*> out;
  for (std::size_t i = 0; i < net.size(); ++i) {
    for (const auto& p : net.layer(i).params()) out.push_back(&p);
  }
  return out;
}

std::vector<nn::Parameter<float>*> AffectModel::parameters() {
  std::vector<nn::Parameter<float>*> out;
  for (std::size_t i = 0; i < net.size(); ++i) {
    for (auto& p : net.layer(i).params()) out.push_back(&p);
  }
  return out;
}

ParamReport param_report(const AffectModel& model) {
  ParamReport r;
  std::vector<io::TensorRecord> records;
  std::size_t layer = 0;
  for (std::size_t b = 0; b < model.graph.blocks.size(); ++b) {
    ParamReport::Entry e{model.graph.blocks[b].name, describe_block(model.graph.blocks[b])};
    for (; layer < model.block_end[b]; ++layer) {
      for (const auto& p : model.net.layer(layer).params()) {
        e.params += p.value.size();
        if (p.trainable) e.trainable += p.value.size();
        records.push_back({p.name, p.value.shape()});
      }
    }
    r.total_params += e.params;
    r.trainable_params += e.trainable;
    r.blocks.push_back(std::move(e));
  }
  r.serialized_bytes_f32 = io::serialized_size(to_string(model.graph.arch), records);
  return r;
}

AffectModel swap_head(const AffectModel& model, Head new_head, std::uint64_t seed) {
  if (model.graph.head == new_head) {
    throw std::invalid_argument("swap_head: model already has the '" +
                                std::string(to_string(new_head)) + "' head (no-op)");
  }
  AffectModel out = model;
  const std::size_t head_begin = model.head_begin();
  out.net.truncate(head_begin);
  out.graph.head = new_head;
  auto& head_spec = out.graph.blocks.back();
  head_spec.channels = head_outputs(new_head);

  Shape cur = ModelGraph::input_shape();
  for (std::size_t i = 0; i < head_begin; ++i) cur = out.net.layer(i).output_shape(cur);
  Rng rng(seed);
  append_block(out.net, head_spec, cur, rng);
  out.block_end.back() = out.net.size();
  return out;
}

}  // namespace affect::arch
