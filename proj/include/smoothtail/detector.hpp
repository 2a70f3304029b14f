#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "smoothtail/autograd.hpp"
#include "smoothtail/dataset.hpp"
#include "smoothtail/rng.hpp"

namespace smoothtail {

struct BackboneStage {
  int channels = 16;
  int stride = 1;

  friend bool operator==(const BackboneStage&, const BackboneStage&) = default;
};

struct DetectorConfig {
  int image_size = 32;
  std::vector<BackboneStage> backbone = {{16, 2}, {32, 2}, {32, 1}};
  int feature_dim = 64;
  int num_queries = 20;
  int num_classes = 40;
  int num_heads = 4;
  int encoder_layers = 2;
  int decoder_layers = 2;
  int ffn_dim = 128;
  // Width of the Gaussian prior tying each query's cross-attention to its
  // reference point, in normalized image units; <= 0 disables it.
  double locality_sigma = 0.25;
  double prior_prob = 0.01;
  double init_box_size = 0.3;
  std::uint64_t seed = 0;

  friend bool operator==(const DetectorConfig&, const DetectorConfig&) = default;
};

void validate(const DetectorConfig& config);

struct ForwardOutput {
  int feature_height = 0;
  int feature_width = 0;
  Matrix features;        // (h*w) x d, output of the projection layer
  Matrix query_features;  // N_q x d, decoder output
  Matrix class_logits;    // N_q x C
  Matrix boxes;           // N_q x 4, normalized (cx, cy, w, h)
};

enum class TrainableSet { kAll, kClassSpecificOnly };

class DetectorModel {
 public:
  explicit DetectorModel(DetectorConfig config);

  const DetectorConfig& config() const { return config_; }
  int feature_height() const { return feature_height_; }
  int feature_width() const { return feature_width_; }

  ForwardOutput forward(const Image& image) const;
  std::vector<ForwardOutput> forward(std::span<const Image> images) const;

  /// Class probabilities of externally supplied query features through this
  /// model's classification head; the decoder is not involved.
  Matrix classify_external_queries(const Matrix& query_features) const;

  void set_trainable(TrainableSet set);
  TrainableSet trainable() const { return trainable_; }

  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  std::size_t parameter_count(std::optional<ParamGroup> group = std::nullopt) const;
  /// FNV-1a over names and raw bytes of the selected parameters.
  std::uint64_t parameter_hash(std::optional<ParamGroup> group = std::nullopt) const;
  /// All values of one group flattened in declaration order.
  std::vector<float> flatten(ParamGroup group) const;

  DetectorModel snapshot() const { return *this; }

  // Training graph handles.
  struct Graph {
    Tape::Var features;
    Tape::Var queries;
    Tape::Var logits;
    Tape::Var boxes;
  };
  /// Records the forward pass on `tape`. With record_grads the leaves are
  /// bound to the parameters so backward() accumulates into Parameter::grad.
  Graph build(Tape& tape, const Image& image, bool record_grads);
  Graph build(Tape& tape, const Image& image) const;
  Tape::Var classify(Tape& tape, Tape::Var queries, bool record_grads);

 private:
  struct LinearIdx {
    int weight = -1;
    int bias = -1;
  };
  struct NormIdx {
    int gamma = -1;
    int beta = -1;
  };
  struct AttentionIdx {
    LinearIdx q, k, v, out;
  };
  struct EncoderLayer {
    AttentionIdx attn;
    NormIdx norm1, norm2;
    LinearIdx ffn1, ffn2;
  };
  struct DecoderLayer {
    AttentionIdx self_attn, cross_attn;
    NormIdx norm1, norm2, norm3;
    LinearIdx ffn1, ffn2;
  };

  int add_param(std::string name, ParamGroup group, Matrix value);
  LinearIdx add_linear(const std::string& name, ParamGroup group, int in, int out, Rng& rng);
  NormIdx add_norm(const std::string& name, ParamGroup group, int dim);
  AttentionIdx add_attention(const std::string& name, Rng& rng);

  Graph build_impl(Tape& tape, const Image& image, bool record_grads);

  DetectorConfig config_;
  int feature_height_ = 0;
  int feature_width_ = 0;
  TrainableSet trainable_ = TrainableSet::kAll;
  std::vector<Parameter> params_;

  std::vector<LinearIdx> backbone_;
  LinearIdx input_proj_;
  std::vector<EncoderLayer> encoder_;
  std::vector<DecoderLayer> decoder_;
  int query_pos_ = -1;
  int query_content_ = -1;
  LinearIdx class_head_;
  LinearIdx box1_, box2_, box3_;

  Matrix pos_embed_;    // (h*w) x d, fixed sine embedding
  Matrix cross_bias_;   // N_q x (h*w)
  Matrix box_prior_;    // N_q x 4, logits of reference centers and initial size
  Matrix reference_;    // N_q x 2
};

/// Binary checkpoint: magic, JSON header (config + parameter table), then the
/// raw little-endian float32 blobs in table order.
void save_checkpoint(const DetectorModel& model, const std::filesystem::path& path);
DetectorModel load_checkpoint(const std::filesystem::path& path);

}  // namespace smoothtail
