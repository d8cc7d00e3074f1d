#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "vqa/tape.hpp"
#include "vqa/tensor.hpp"

namespace vqa {

inline constexpr std::size_t kImageChannels = 3;
inline constexpr std::size_t kImageSize = 32;
inline constexpr std::size_t kEmbedDim = 16;
inline constexpr std::size_t kHiddenDim = 64;
inline constexpr std::size_t kMaxQuestionLength = 8;

/// Two-pathway classifier.
///
///   image    -> conv1 -> ReLU -> pool -> conv2 -> ReLU -> pool -> img_proj
///   question -> sum(word_embed rows) -> q_proj -> tanh
///   fused = image_emb * question_emb -> fuse1 -> ReLU -> fuse2 -> softmax
///
/// The question pathway holds no ReLU, so its gradients are the same under
/// both backward modes up to the fusion head.
struct VqaModel {
  std::size_t vocab_size = 0;
  std::size_t answer_count = 0;

  Tensor conv1_w, conv1_b;
  Tensor conv2_w, conv2_b;
  Tensor img_proj_w, img_proj_b;
  Tensor word_embed;
  Tensor q_proj_w, q_proj_b;
  Tensor fuse1_w, fuse1_b;
  Tensor fuse2_w, fuse2_b;

  /// Per-channel fill for image occlusion; the training-set channel means.
  std::array<float, 3> patch_value{0.0f, 0.0f, 0.0f};

  /// Glorot-uniform weights, zero biases.
  static VqaModel initialize(std::size_t vocab_size, std::size_t answer_count,
                             std::uint64_t seed);

  /// Parameters in a fixed canonical order.
  std::vector<std::pair<std::string_view, Tensor*>> parameters();
  std::vector<std::pair<std::string_view, const Tensor*>> parameters() const;

  /// Expected shape of each named parameter for this vocab/answer size.
  std::vector<std::pair<std::string, Shape>> parameter_shapes() const;

  std::size_t parameter_count() const;
  bool all_finite() const;

  friend bool operator==(const VqaModel& a, const VqaModel& b);
};

struct AnswerDistribution {
  std::vector<float> probabilities;
  std::size_t predicted = 0;
  float predicted_prob = 0.0f;

  static AnswerDistribution from_probabilities(std::vector<float> probs);
};

enum class FusionHead {
  Standard,  // fuse1 -> ReLU -> fuse2
  Probe,     // fuse1 -> fuse2, ReLU-free
};

struct ForwardOptions {
  ad::ReluMode relu_mode = ad::ReluMode::Classical;
  FusionHead head = FusionHead::Standard;
};

/// Recorded forward pass. The tape borrows the model's parameters, so a
/// ForwardPass must not outlive the model it was produced from.
struct ForwardPass {
  AnswerDistribution answer;
  ad::Tape<float> tape;
  ad::Var image;
  ad::Var word_embed;
  ad::Var image_embedding;
  ad::Var question_embedding;
  ad::Var fused;
  ad::Var logits;
  ad::Var probabilities;
  std::vector<ad::Var> params;  // canonical parameter order
};

/// Throws std::invalid_argument on a wrong image shape, an empty or overlong
/// question, or an out-of-range token.
void validate_input(const VqaModel& model, const Tensor& image,
                    std::span<const int> question);

ForwardPass forward(const VqaModel& model, const Tensor& image,
                    std::span<const int> question, const ForwardOptions& opts = {});

/// Forward pass returning only the answer distribution.
AnswerDistribution predict(const VqaModel& model, const Tensor& image,
                           std::span<const int> question);

// ---------------------------------------------------------------- training

struct LabeledInput {
  const Tensor* image;
  std::span<const int> question;
  std::size_t answer;
};

struct TrainConfig {
  std::size_t epochs = 20;
  float learning_rate = 0.1f;
  std::size_t batch_size = 32;
  std::uint64_t seed = 42;
  float momentum = 0.9f;
  /// Stop after the first epoch whose held-out accuracy reaches this value.
  float stop_at_accuracy = 2.0f;
};

struct EpochStats {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double heldout_accuracy = 0.0;
};

struct TrainLog {
  std::vector<EpochStats> epochs;
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(std::size_t epoch, std::size_t batch);
  std::size_t epoch;
  std::size_t batch;
};

/// Mean cross-entropy of one batch and its gradient, per canonical parameter.
struct BatchGradient {
  double loss = 0.0;
  std::vector<Tensor> grads;
};

BatchGradient batch_gradient(const VqaModel& model,
                             std::span<const LabeledInput> batch);

double accuracy(const VqaModel& model, std::span<const LabeledInput> data);

/// Mini-batch SGD with momentum on cross-entropy (Classical ReLU mode).
/// Deterministic for a given seed; mutates `model` in place.
TrainLog train(VqaModel& model, std::span<const LabeledInput> train_set,
               std::span<const LabeledInput> heldout, const TrainConfig& cfg,
               const std::function<void(const EpochStats&)>& on_epoch = {});

/// Per-channel mean over a set of 3xHxW images.
std::array<float, 3> channel_means(std::span<const Tensor* const> images);

}  // namespace vqa
