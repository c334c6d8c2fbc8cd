#include "medvit/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>

#include "medvit/checkpoint.hpp"
#include "medvit/ops.hpp"

namespace medvit {

void TrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("train: epochs must be positive");
  if (batch_size < 2) throw ConfigError("train: batch size must be at least 2 (batch norm needs two samples)");
  if (stop_at_train_acc < 0.0 || stop_at_train_acc > 1.0) throw ConfigError("train: stop_at_train_acc must lie in [0, 1]");
  optim.validate();
  schedule.validate();
  if (pmc.enabled) pmc.validate();
}

template <typename T>
MetricReport evaluate(MedViT<T>& model, const DatasetFile& data, std::span<const std::size_t> indices,
                      const Normalization& norm, std::size_t batch_size) {
  if (indices.empty()) throw DataError("evaluate: no samples");
  const bool was_training = model.training();
  model.set_training(false);
  NoGradGuard no_grad;
  BatchOptions opts;
  opts.size = model.config().input_size;
  opts.out_channels = model.config().in_channels;
  const std::size_t k = model.config().num_classes;
  std::vector<double> scores;
  scores.reserve(indices.size() * k);
  for (std::size_t b = 0; b < indices.size(); b += batch_size) {
    const auto chunk = indices.subspan(b, std::min(batch_size, indices.size() - b));
    Batch<T> batch = make_batch<T>(data, chunk, opts);
    Tensor<T> logits = model.forward(normalize(batch.images, norm.mean, norm.std));
    Tensor<T> probs = data.label_kind == TaskKind::Multiclass ? softmax(logits, 1) : sigmoid(logits);
    for (T v : probs.data()) scores.push_back(static_cast<double>(v));
  }
  model.set_training(was_training);
  return compute_metrics(scores, data.labels(indices));
}

template <typename T>
TrainResult train(MedViT<T>& model, const DatasetFile& data, const TrainConfig& cfg, std::ostream* progress) {
  cfg.validate();
  if (data.num_classes != model.config().num_classes) {
    throw ConfigError("train: dataset has " + std::to_string(data.num_classes) + " classes, model " +
                      std::to_string(model.config().num_classes));
  }
  const auto train_idx = data.indices(Split::Train);
  const auto val_idx = data.indices(Split::Val);
  if (train_idx.size() < 2) throw DataError("train: the train split needs at least 2 samples");

  std::ofstream csv;
  if (!cfg.out_dir.empty()) {
    std::filesystem::create_directories(cfg.out_dir);
    csv.open(cfg.out_dir / "log.csv", std::ios::trunc);
    if (!csv) throw DataError("train: cannot write " + (cfg.out_dir / "log.csv").string());
    csv << "epoch,lr,train_loss,val_acc,val_auc\n";
    csv << std::setprecision(17);
  }

  AdamW<T> optimizer(model.parameters(), cfg.optim);
  Rng rng(cfg.seed);
  Rng pmc_rng(cfg.seed ^ 0x5DEECE66DULL);
  BatchOptions opts;
  opts.size = model.config().input_size;
  opts.out_channels = model.config().in_channels;
  opts.hflip = cfg.hflip;

  TrainResult result;
  bool stop = false;
  for (std::size_t epoch = 0; epoch < cfg.epochs && !stop; ++epoch) {
    EpochLog log;
    log.epoch = epoch;
    log.lr = lr_at(cfg.schedule, epoch);
    std::vector<std::size_t> order = train_idx;
    std::shuffle(order.begin(), order.end(), rng);
    opts.flip_seed = cfg.seed * 1000003ULL + epoch;

    model.set_training(true);
    BatchLoader<T> loader(data, order, cfg.batch_size, opts, cfg.prefetch, 2);
    double loss_sum = 0.0;
    std::size_t loss_count = 0;
    while (auto batch = loader.next()) {
      if (cfg.max_steps && result.steps >= cfg.max_steps) {
        stop = true;
        break;
      }
      model.zero_grad();
      Labels partner;
      bool mixed = false;
      ForwardHooks<T> hooks;
      if (cfg.pmc.enabled) {
        hooks.after_stage = [&](std::size_t stage, const Tensor<T>& features) {
          if (stage != cfg.pmc.stage) return features;
          PmcResult<T> r = pmc_step(features, batch->labels, cfg.pmc, pmc_rng);
          mixed = r.applied;
          partner = std::move(r.partner_labels);
          return r.features;
        };
      }
      Tensor<T> logits = model.forward(normalize(batch->images, cfg.norm.mean, cfg.norm.std), &hooks);
      Tensor<T> loss = mixed ? mixed_loss(logits, batch->labels, partner, static_cast<T>(cfg.pmc.lambda))
                             : classification_loss(logits, batch->labels);
      const double value = static_cast<double>(loss.item());
      if (!std::isfinite(value)) {
        std::ostringstream os;
        os << "non-finite loss " << value << " at epoch " << epoch << ", step " << result.steps;
        throw NumericError(os.str());
      }
      loss.backward();
      optimizer.step(log.lr);
      ++result.steps;
      ++log.steps;
      if (mixed) ++log.pmc_applied;
      result.step_losses.push_back(value);
      loss_sum += value;
      ++loss_count;
    }
    if (loss_count == 0) break;
    log.train_loss = loss_sum / static_cast<double>(loss_count);

    if (!val_idx.empty()) {
      log.val = evaluate(model, data, val_idx, cfg.norm);
      log.has_val = true;
    }
    if (cfg.track_train_acc || cfg.stop_at_train_acc > 0.0) {
      log.train_acc = evaluate(model, data, train_idx, cfg.norm).acc;
      result.final_train_acc = log.train_acc;
      if (cfg.stop_at_train_acc > 0.0 && log.train_acc >= cfg.stop_at_train_acc) stop = true;
    }
    if (cfg.max_steps && result.steps >= cfg.max_steps) stop = true;

    const double val_auc = log.has_val ? log.val.auc : 0.0;
    const bool improved = result.best_val_auc < 0.0 || (log.has_val && val_auc > result.best_val_auc);
    if (improved) {
      result.best_val_auc = log.has_val ? val_auc : result.best_val_auc;
      result.best_epoch = epoch;
    }
    if (!cfg.out_dir.empty()) {
      csv << epoch << ',' << log.lr << ',' << log.train_loss << ',' << (log.has_val ? log.val.acc : 0.0) << ','
          << val_auc << '\n';
      csv.flush();
      if (improved) save_checkpoint(cfg.out_dir / "best.mvwt", model);
      save_checkpoint(cfg.out_dir / "last.mvwt", model);
    }
    if (progress) {
      *progress << "epoch " << epoch << " lr " << log.lr << " loss " << log.train_loss;
      if (log.has_val) *progress << " val_acc " << log.val.acc << " val_auc " << log.val.auc;
      if (log.train_acc >= 0.0) *progress << " train_acc " << log.train_acc;
      *progress << " steps " << result.steps << '\n';
    }
    result.epochs.push_back(std::move(log));
  }
  return result;
}

#define MEDVIT_INSTANTIATE_TRAIN(T)                                                                        \
  template MetricReport evaluate(MedViT<T>&, const DatasetFile&, std::span<const std::size_t>,             \
                                 const Normalization&, std::size_t);                                       \
  template TrainResult train(MedViT<T>&, const DatasetFile&, const TrainConfig&, std::ostream*);

MEDVIT_INSTANTIATE_TRAIN(float)
MEDVIT_INSTANTIATE_TRAIN(double)

}  // namespace medvit
