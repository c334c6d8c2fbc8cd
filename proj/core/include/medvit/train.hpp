#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <ostream>
#include <span>
#include <vector>

#include "medvit/data.hpp"
#include "medvit/metrics.hpp"
#include "medvit/model.hpp"
#include "medvit/optim.hpp"
#include "medvit/pmc.hpp"

namespace medvit {

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 128;
  /// Stop after this many optimizer steps (0: no limit).
  std::size_t max_steps = 0;
  /// Stop once eval-mode accuracy on the train split reaches this (0: off).
  double stop_at_train_acc = 0.0;
  /// Evaluate eval-mode train accuracy after every epoch.
  bool track_train_acc = false;
  std::uint64_t seed = 0;
  AdamWConfig optim;
  Schedule schedule;
  PmcConfig pmc;
  Normalization norm;
  bool hflip = false;
  std::size_t prefetch = 2;
  /// When set, receives log.csv, best.mvwt and last.mvwt.
  std::filesystem::path out_dir;

  void validate() const;
};

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double train_acc = -1.0;  // -1 when not tracked
  MetricReport val;
  bool has_val = false;
  std::size_t steps = 0;
  std::size_t pmc_applied = 0;
};

struct TrainResult {
  std::vector<EpochLog> epochs;
  std::vector<double> step_losses;
  std::size_t steps = 0;
  std::size_t best_epoch = 0;
  double best_val_auc = -1.0;
  double final_train_acc = -1.0;
};

/// Eval-mode forward over `indices` in batches; softmax (multiclass) or
/// sigmoid (multilabel) scores feed compute_metrics.
template <typename T>
MetricReport evaluate(MedViT<T>& model, const DatasetFile& data, std::span<const std::size_t> indices,
                      const Normalization& norm, std::size_t batch_size = 64);

/// Seeded loop: shuffle, batch, forward (PMC hook when enabled), loss,
/// backward, AdamW at lr_at(epoch). Throws NumericError naming the epoch and
/// step on a non-finite loss. `progress` receives one line per epoch.
template <typename T>
TrainResult train(MedViT<T>& model, const DatasetFile& data, const TrainConfig& cfg,
                  std::ostream* progress = nullptr);

}  // namespace medvit
