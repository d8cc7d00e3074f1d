#include "vqa/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace vqa {

namespace {

Shape conv1_shape() { return {8, kImageChannels, 3, 3}; }
Shape conv2_shape() { return {16, 8, 3, 3}; }
constexpr std::size_t kFlatImage = 16 * (kImageSize / 4) * (kImageSize / 4);

void glorot(Tensor& t, std::size_t fan_in, std::size_t fan_out,
            std::mt19937_64& rng) {
  const float s = std::sqrt(6.0f / float(fan_in + fan_out));
  std::uniform_real_distribution<float> dist(-s, s);
  for (float& v : t.data()) v = dist(rng);
}

}  // namespace

VqaModel VqaModel::initialize(std::size_t vocab_size, std::size_t answer_count,
                              std::uint64_t seed) {
  if (vocab_size == 0 || answer_count == 0) {
    throw std::invalid_argument("VqaModel: vocab and answer counts must be positive");
  }
  VqaModel m;
  m.vocab_size = vocab_size;
  m.answer_count = answer_count;
  const auto shapes = m.parameter_shapes();
  auto params = m.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    *params[i].second = Tensor(shapes[i].second);
  }
  std::mt19937_64 rng(seed);
  glorot(m.conv1_w, 3 * 9, 8 * 9, rng);
  glorot(m.conv2_w, 8 * 9, 16 * 9, rng);
  glorot(m.img_proj_w, kFlatImage, kHiddenDim, rng);
  glorot(m.word_embed, vocab_size, kEmbedDim, rng);
  glorot(m.q_proj_w, kEmbedDim, kHiddenDim, rng);
  glorot(m.fuse1_w, kHiddenDim, kHiddenDim, rng);
  glorot(m.fuse2_w, kHiddenDim, answer_count, rng);
  return m;
}

std::vector<std::pair<std::string_view, Tensor*>> VqaModel::parameters() {
  return {{"conv1_w", &conv1_w},       {"conv1_b", &conv1_b},
          {"conv2_w", &conv2_w},       {"conv2_b", &conv2_b},
          {"img_proj_w", &img_proj_w}, {"img_proj_b", &img_proj_b},
          {"word_embed", &word_embed}, {"q_proj_w", &q_proj_w},
          {"q_proj_b", &q_proj_b},     {"fuse1_w", &fuse1_w},
          {"fuse1_b", &fuse1_b},       {"fuse2_w", &fuse2_w},
          {"fuse2_b", &fuse2_b}};
}

std::vector<std::pair<std::string_view, const Tensor*>> VqaModel::parameters() const {
  auto mut = const_cast<VqaModel*>(this)->parameters();
  std::vector<std::pair<std::string_view, const Tensor*>> out;
  out.reserve(mut.size());
  for (auto& [n, t] : mut) out.emplace_back(n, t);
  return out;
}

std::vector<std::pair<std::string, Shape>> VqaModel::parameter_shapes() const {
  return {{"conv1_w", conv1_shape()},
          {"conv1_b", {8}},
          {"conv2_w", conv2_shape()},
          {"conv2_b", {16}},
          {"img_proj_w", {kHiddenDim, kFlatImage}},
          {"img_proj_b", {kHiddenDim}},
          {"word_embed", {vocab_size, kEmbedDim}},
          {"q_proj_w", {kHiddenDim, kEmbedDim}},
          {"q_proj_b", {kHiddenDim}},
          {"fuse1_w", {kHiddenDim, kHiddenDim}},
          {"fuse1_b", {kHiddenDim}},
          {"fuse2_w", {answer_count, kHiddenDim}},
          {"fuse2_b", {answer_count}}};
}

std::size_t VqaModel::parameter_count() const {
  std::size_t n = 0;
  for (auto& [name, t] : parameters()) n += t->size();
  return n;
}

bool VqaModel::all_finite() const {
  const auto ps = parameters();
  return std::all_of(ps.begin(), ps.end(),
                     [](auto& p) { return p.second->all_finite(); });
}

bool operator==(const VqaModel& a, const VqaModel& b) {
  if (a.vocab_size != b.vocab_size || a.answer_count != b.answer_count ||
      a.patch_value != b.patch_value) {
    return false;
  }
  const auto pa = a.parameters();
  const auto pb = b.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (!(*pa[i].second == *pb[i].second)) return false;
  }
  return true;
}

AnswerDistribution AnswerDistribution::from_probabilities(std::vector<float> probs) {
  AnswerDistribution d;
  d.probabilities = std::move(probs);
  // max_element returns the first maximum: lowest index wins ties
  d.predicted = std::size_t(
      std::max_element(d.probabilities.begin(), d.probabilities.end()) -
      d.probabilities.begin());
  d.predicted_prob = d.probabilities[d.predicted];
  return d;
}

void validate_input(const VqaModel& model, const Tensor& image,
                    std::span<const int> question) {
  const Shape expected{kImageChannels, kImageSize, kImageSize};
  if (image.shape() != expected) {
    throw std::invalid_argument("forward: image shape " + shape_str(image.shape()) +
                                ", expected " + shape_str(expected));
  }
  if (question.empty() || question.size() > kMaxQuestionLength) {
    throw std::invalid_argument("forward: question length " +
                                std::to_string(question.size()) +
                                " outside [1, " +
                                std::to_string(kMaxQuestionLength) + "]");
  }
  for (int tok : question) {
    if (tok < 0 || std::size_t(tok) >= model.vocab_size) {
      throw std::invalid_argument("forward: token index " + std::to_string(tok) +
                                  " outside vocabulary of " +
                                  std::to_string(model.vocab_size));
    }
  }
}

ForwardPass forward(const VqaModel& model, const Tensor& image,
                    std::span<const int> question, const ForwardOptions& opts) {
  validate_input(model, image, question);
  ForwardPass fp{.answer = {}, .tape = ad::Tape<float>(opts.relu_mode)};
  auto& t = fp.tape;
  for (auto& [name, p] : model.parameters()) fp.params.push_back(t.param(*p));
  const auto& P = fp.params;
  const ad::Var conv1_w = P[0], conv1_b = P[1], conv2_w = P[2], conv2_b = P[3],
                img_w = P[4], img_b = P[5], embed = P[6], q_w = P[7], q_b = P[8],
                f1_w = P[9], f1_b = P[10], f2_w = P[11], f2_b = P[12];

  fp.image = t.leaf(image.reshaped({1, kImageChannels, kImageSize, kImageSize}));
  ad::Var h = t.relu(t.conv2d(fp.image, conv1_w, conv1_b, 1));
  h = t.avg_pool2x2(h);
  h = t.relu(t.conv2d(h, conv2_w, conv2_b, 1));
  h = t.avg_pool2x2(h);
  h = t.reshape(h, {1, kFlatImage});
  fp.image_embedding = t.add(t.matmul(h, img_w, true), img_b);

  fp.word_embed = embed;
  ad::Var q = t.sum_over_axis(t.embedding_lookup(embed, question), 0);
  fp.question_embedding = t.tanh(t.add(t.matmul(q, q_w, true), q_b));

  fp.fused = t.multiply(fp.image_embedding, fp.question_embedding);
  ad::Var z = t.add(t.matmul(fp.fused, f1_w, true), f1_b);
  if (opts.head == FusionHead::Standard) z = t.relu(z);
  fp.logits = t.add(t.matmul(z, f2_w, true), f2_b);
  fp.probabilities = t.softmax(fp.logits);

  const auto& pv = t.value(fp.probabilities);
  fp.answer = AnswerDistribution::from_probabilities(pv.values());
  return fp;
}

AnswerDistribution predict(const VqaModel& model, const Tensor& image,
                           std::span<const int> question) {
  return forward(model, image, question).answer;
}

TrainingDiverged::TrainingDiverged(std::size_t epoch_, std::size_t batch_)
    : std::runtime_error("training diverged: non-finite loss at epoch " +
                         std::to_string(epoch_) + ", batch " +
                         std::to_string(batch_)),
      epoch(epoch_),
      batch(batch_) {}

BatchGradient batch_gradient(const VqaModel& model,
                             std::span<const LabeledInput> batch) {
  const auto shapes = model.parameter_shapes();
  const long n = long(batch.size());
  std::vector<std::vector<Tensor>> per_example(batch.size());
  std::vector<double> losses(batch.size(), 0.0);

  // One tape per example; the model is shared read-only.
#pragma omp parallel for schedule(static)
  for (long i = 0; i < n; ++i) {
    const auto& ex = batch[std::size_t(i)];
    ForwardPass fp = forward(model, *ex.image, ex.question);
    const ad::Var loss = fp.tape.cross_entropy(fp.probabilities, ex.answer);
    losses[std::size_t(i)] = fp.tape.value(loss)[0];
    auto grads = fp.tape.backward(loss);
    auto& out = per_example[std::size_t(i)];
    out.reserve(fp.params.size());
    for (ad::Var p : fp.params) out.push_back(std::move(grads.values[p.id]));
  }

  // Serial reduction in example order keeps the sum bit-reproducible.
  BatchGradient result;
  for (auto& [name, shape] : shapes) result.grads.emplace_back(shape);
  const float inv = 1.0f / float(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    result.loss += losses[i];
    for (std::size_t p = 0; p < result.grads.size(); ++p) {
      auto dst = result.grads[p].data();
      auto src = per_example[i][p].data();
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
    }
  }
  for (auto& g : result.grads) {
    for (float& v : g.data()) v *= inv;
  }
  result.loss /= double(batch.size());
  return result;
}

double accuracy(const VqaModel& model, std::span<const LabeledInput> data) {
  if (data.empty()) return 0.0;
  const long n = long(data.size());
  std::vector<char> hit(data.size(), 0);
#pragma omp parallel for schedule(static)
  for (long i = 0; i < n; ++i) {
    const auto& ex = data[std::size_t(i)];
    hit[std::size_t(i)] = predict(model, *ex.image, ex.question).predicted == ex.answer;
  }
  return double(std::count(hit.begin(), hit.end(), 1)) / double(data.size());
}

TrainLog train(VqaModel& model, std::span<const LabeledInput> train_set,
               std::span<const LabeledInput> heldout, const TrainConfig& cfg,
               const std::function<void(const EpochStats&)>& on_epoch) {
  if (train_set.empty()) throw std::invalid_argument("train: empty dataset");
  if (!(cfg.learning_rate > 0.0f)) {
    throw std::invalid_argument("train: learning rate must be positive");
  }
  if (cfg.batch_size == 0) throw std::invalid_argument("train: batch size must be positive");

  std::vector<Tensor> velocity;
  for (auto& [name, p] : model.parameters()) velocity.emplace_back(p->shape());
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(cfg.seed);

  TrainLog log;
  std::vector<LabeledInput> batch;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      batch.clear();
      for (std::size_t i = start; i < end; ++i) batch.push_back(train_set[order[i]]);
      BatchGradient bg = batch_gradient(model, batch);
      if (!std::isfinite(bg.loss)) throw TrainingDiverged(epoch, batches);
      auto params = model.parameters();
      for (std::size_t p = 0; p < params.size(); ++p) {
        auto w = params[p].second->data();
        auto v = velocity[p].data();
        auto g = bg.grads[p].data();
        for (std::size_t j = 0; j < w.size(); ++j) {
          v[j] = cfg.momentum * v[j] + g[j];
          w[j] -= cfg.learning_rate * v[j];
        }
      }
      loss_sum += bg.loss;
      ++batches;
    }
    EpochStats stats{epoch, loss_sum / double(batches),
                     heldout.empty() ? 0.0 : accuracy(model, heldout)};
    log.epochs.push_back(stats);
    if (on_epoch) on_epoch(stats);
    if (stats.heldout_accuracy >= cfg.stop_at_accuracy) break;
  }
  return log;
}

std::array<float, 3> channel_means(std::span<const Tensor* const> images) {
  std::array<double, 3> sum{0.0, 0.0, 0.0};
  std::size_t per_channel = 0;
  for (const Tensor* img : images) {
    const std::size_t plane = img->size() / 3;
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t i = 0; i < plane; ++i) sum[c] += (*img)[c * plane + i];
    }
    per_channel += plane;
  }
  std::array<float, 3> out{};
  for (std::size_t c = 0; c < 3; ++c) {
    out[c] = per_channel ? float(sum[c] / double(per_channel)) : 0.0f;
  }
  return out;
}

}  // namespace vqa
