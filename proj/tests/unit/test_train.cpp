#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "medvit/checkpoint.hpp"
#include "medvit/parallel.hpp"
#include "medvit/train.hpp"

using namespace medvit;
namespace fs = std::filesystem;

namespace {

DatasetFile small_data(std::size_t classes = 3) {
  return make_synthetic({.n = 48, .classes = classes, .size = 16, .channels = 1, .seed = 2});
}

TrainConfig quick_config() {
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 8;
  cfg.seed = 5;
  cfg.optim.lr = 3e-3;
  cfg.schedule.base_lr = 3e-3;
  cfg.schedule.milestones = {2};
  return cfg;
}

std::vector<double> flatten(MedViT<double>& m) {
  std::vector<double> out;
  for (const auto& p : m.parameters()) out.insert(out.end(), p.tensor.data().begin(), p.tensor.data().end());
  for (const auto& b : m.buffers()) out.insert(out.end(), b.values->begin(), b.values->end());
  return out;
}

}  // namespace

TEST(Train, DeterministicPerSeedAcrossThreadCounts) {
  const DatasetFile d = small_data();
  const std::size_t saved = thread_count();
  std::vector<std::vector<double>> losses, params;
  for (std::size_t threads : {1u, 3u}) {
    set_thread_count(threads);
    auto m = MedViT<double>::build(ModelConfig::micro(3), 7);
    const TrainResult r = train(m, d, quick_config());
    losses.push_back(r.step_losses);
    params.push_back(flatten(m));
  }
  set_thread_count(saved);
  EXPECT_EQ(losses[0], losses[1]);
  EXPECT_EQ(params[0], params[1]);

  auto other = MedViT<double>::build(ModelConfig::micro(3), 7);
  TrainConfig cfg = quick_config();
  cfg.seed = 6;
  EXPECT_NE(train(other, d, cfg).step_losses, losses[0]);
}

TEST(Train, ScheduleAndStepAccounting) {
  const DatasetFile d = small_data();
  auto m = MedViT<float>::build(ModelConfig::micro(3), 1);
  const TrainResult r = train(m, d, quick_config());
  ASSERT_EQ(r.epochs.size(), 3u);
  EXPECT_DOUBLE_EQ(r.epochs[0].lr, 3e-3);
  EXPECT_DOUBLE_EQ(r.epochs[2].lr, 3e-3 * 0.1);
  const std::size_t train_n = d.indices(Split::Train).size();
  EXPECT_EQ(r.epochs[0].steps, train_n / 8 + (train_n % 8 >= 2 ? 1 : 0));
  EXPECT_EQ(r.steps, r.step_losses.size());
  EXPECT_TRUE(r.epochs[0].has_val);
}

TEST(Train, MaxStepsAndEarlyStop) {
  const DatasetFile d = small_data();
  auto m = MedViT<float>::build(ModelConfig::micro(3), 1);
  TrainConfig cfg = quick_config();
  cfg.epochs = 50;
  cfg.max_steps = 7;
  EXPECT_EQ(train(m, d, cfg).steps, 7u);

  cfg.max_steps = 0;
  cfg.stop_at_train_acc = 1e-9;  // any accuracy stops after the first epoch
  const TrainResult r = train(m, d, cfg);
  EXPECT_EQ(r.epochs.size(), 1u);
  EXPECT_GE(r.final_train_acc, 0.0);
}

TEST(Train, WritesLogAndCheckpointsThatReload) {
  const DatasetFile d = small_data();
  const fs::path out = fs::temp_directory_path() / "medvit_train_test";
  fs::remove_all(out);
  auto m = MedViT<float>::build(ModelConfig::micro(3), 4);
  TrainConfig cfg = quick_config();
  cfg.out_dir = out;
  std::ostringstream progress;
  const TrainResult r = train(m, d, cfg, &progress);
  EXPECT_TRUE(fs::exists(out / "best.mvwt"));
  EXPECT_TRUE(fs::exists(out / "last.mvwt"));
  std::ifstream csv(out / "log.csv");
  std::string header, line;
  std::getline(csv, header);
  EXPECT_EQ(header, "epoch,lr,train_loss,val_acc,val_auc");
  std::size_t rows = 0;
  while (std::getline(csv, line)) ++rows;
  EXPECT_EQ(rows, 3u);
  EXPECT_NE(progress.str().find("epoch 2"), std::string::npos);

  auto reloaded = MedViT<float>::build(ModelConfig::micro(3), 99);
  load_checkpoint(out / "last.mvwt", reloaded);
  const auto test = d.indices(Split::Test);
  const MetricReport a = evaluate(m, d, test, cfg.norm);
  const MetricReport b = evaluate(reloaded, d, test, cfg.norm);
  EXPECT_EQ(a.acc, b.acc);
  EXPECT_EQ(a.auc, b.auc);
  (void)r;
}

TEST(Train, PmcIsAppliedWhenEnabled) {
  const DatasetFile d = small_data();
  auto m = MedViT<float>::build(ModelConfig::micro(3), 1);
  TrainConfig cfg = quick_config();
  cfg.epochs = 1;
  cfg.pmc.enabled = true;
  cfg.pmc.probability = 1.0;
  cfg.pmc.stage = 2;
  const TrainResult r = train(m, d, cfg);
  EXPECT_EQ(r.epochs[0].pmc_applied, r.epochs[0].steps);
  cfg.pmc.probability = 0.0;
  EXPECT_EQ(train(m, d, cfg).epochs[0].pmc_applied, 0u);
}

TEST(Train, HugeLearningRateRaisesNumericErrorNamingStep) {
  const DatasetFile d = small_data();
  auto m = MedViT<float>::build(ModelConfig::micro(3), 1);
  TrainConfig cfg = quick_config();
  cfg.epochs = 20;
  cfg.optim.weight_decay = 0;
  cfg.schedule.base_lr = 1e36;
  cfg.schedule.milestones = {};
  try {
    train(m, d, cfg);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("epoch"), std::string::npos) << msg;
    EXPECT_NE(msg.find("step"), std::string::npos) << msg;
  }
}

TEST(Train, MultilabelLossDecreases) {
  DatasetFile d = small_data(4);
  d.label_kind = TaskKind::Multilabel;
  d.masks.resize(d.n);
  for (std::size_t i = 0; i < d.n; ++i) d.masks[i] = static_cast<std::uint8_t>((1u << d.classes[i]) | (i % 3 == 0 ? 1u : 0u));
  d.classes.clear();
  d.validate();
  auto m = MedViT<double>::build(ModelConfig::micro(4), 1);
  TrainConfig cfg = quick_config();
  cfg.epochs = 6;
  const TrainResult r = train(m, d, cfg);
  EXPECT_LT(r.epochs.back().train_loss, r.epochs.front().train_loss);
  EXPECT_EQ(r.epochs.back().val.per_class_auc.size(), 4u);
}

TEST(Train, ConfigErrors) {
  const DatasetFile d = small_data();
  auto m = MedViT<float>::build(ModelConfig::micro(4), 1);
  TrainConfig cfg = quick_config();
  EXPECT_THROW(train(m, d, cfg), ConfigError);  // 3-class data, 4-class model
  auto m3 = MedViT<float>::build(ModelConfig::micro(3), 1);
  cfg.batch_size = 1;
  EXPECT_THROW(train(m3, d, cfg), ConfigError);
}
