#pragma once

#include <map>
#include <string>

#include "pelta/autodiff.hpp"
#include "pelta/graph.hpp"
#include "pelta/rng.hpp"
#include "pelta/shield.hpp"

namespace pelta {

struct VitConfig {
  std::size_t image = 16;     // H = W
  std::size_t channels = 1;
  std::size_t patch = 4;      // P, must divide image
  std::size_t width = 16;     // embedding dimension D, divisible by heads
  std::size_t blocks = 2;     // encoder blocks n_l
  std::size_t heads = 2;      // attention heads n_h
  std::size_t classes = 4;
  std::size_t ff_mult = 2;    // feed-forward width = ff_mult * width
  double ln_eps = 1e-5;
  double token_init = 0.02;   // uniform range for x_class / E_pos
};

/// ViT-L/16 geometry on 224x224x3 inputs; used for the enclave memory
/// estimate only (never trained here).
VitConfig vit_l16_geometry();

struct CnnConfig {
  std::size_t image = 16;
  std::size_t channels = 1;
  std::size_t filters = 8;
  std::size_t kernel = 3;
  std::size_t conv_stride = 1;
  std::size_t pool = 2;
  std::size_t pool_stride = 2;
  std::size_t hidden = 32;
  std::size_t classes = 4;
  double ws_eps = 1e-5;  // weight standardization epsilon
};

enum class ModelKind { Vit, Cnn };

/// A built toy model: the validated graph plus everything the other modules
/// need to address it (canonical shield placement, attention weight nodes,
/// parameter naming).
struct BuiltModel {
  ModelKind kind;
  Graph graph;
  /// The canonical shield placement: all transforms up to the position
  /// embedding (ViT) or the standardized convolution and its max-pooling
  /// (CNN).
  Selection canonical_shield;
  NodeId input = 0;
  NodeId target = 0;  // one-hot label leaf
  NodeId logits = 0;
  /// RowSoftmax node per [block][head]; empty for the CNN.
  std::vector<std::vector<NodeId>> attention;
  std::vector<NodeId> params;
  std::map<NodeId, std::string> param_names;
  /// Patch grid of the ViT (gh == gw) or spatial reduction data for the CNN;
  /// the attack uses it to lay adjoints out on a spatial grid.
  std::size_t patch = 0;
  Shape image_shape;
  std::size_t classes = 0;
};

BuiltModel build_tiny_vit(const VitConfig& cfg);
BuiltModel build_tiny_cnn(const CnnConfig& cfg);

using ParamStore = std::map<NodeId, Tensor>;

/// Seeded initialization: fan-in scaled uniform for weight matrices, the
/// configured token range for x_class / E_pos, zeros for biases.
ParamStore init_params(const BuiltModel& m, Rng& rng);

Tensor one_hot(std::size_t classes, std::size_t label);

Bindings bind_sample(const BuiltModel& m, const ParamStore& params, const Tensor& image,
                     std::size_t label);

struct Dataset {
  std::vector<Tensor> images;
  std::vector<int> labels;

  std::size_t size() const { return images.size(); }
};

int predict(const BuiltModel& m, const ParamStore& params, const Tensor& image);
double accuracy(const BuiltModel& m, const ParamStore& params, const Dataset& data);

struct EnsembleModel {
  BuiltModel vit;
  BuiltModel cnn;
  ParamStore vit_params;
  ParamStore cnn_params;
};

/// Random-selection ensemble: one of the two members is drawn uniformly per
/// sample and its argmax class returned.
int ensemble_predict(const EnsembleModel& m, const Tensor& image, Rng& rng);

struct TrainOptions {
  double lr = 0.05;
  std::size_t epochs = 40;
  std::size_t batch = 16;
  std::uint64_t seed = 1;
};

struct TrainResult {
  double clean_accuracy = 0;
  double final_loss = 0;
};

/// Mini-batch SGD on the parameter adjoints from the backward pass.
/// Deterministic under the option seed; non-finite losses surface as errors.
TrainResult train_sgd(const BuiltModel& m, ParamStore& params, const Dataset& data,
                      const TrainOptions& opt);

/// One tensor-container file per parameter plus a manifest mapping node ids
/// to names and files.
void save_params(const std::string& dir, const BuiltModel& m, const ParamStore& params);
ParamStore load_params(const std::string& dir, const BuiltModel& m);

}  // namespace pelta
