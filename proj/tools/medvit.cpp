// medvit command-line driver: train, eval, attack, audit, gradcam, synth, selftest.
#include <CLI11.hpp>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "medvit/attack.hpp"
#include "medvit/audit.hpp"
#include "medvit/checkpoint.hpp"
#include "medvit/config.hpp"
#include "medvit/data.hpp"
#include "medvit/model.hpp"
#include "medvit/ops.hpp"
#include "medvit/selftest.hpp"
#include "medvit/train.hpp"

namespace fs = std::filesystem;
using namespace medvit;

namespace {

constexpr const char* kVersion = MEDVIT_VERSION;

// A subcommand whose flags map onto RunConfig keys.
struct Command {
  CLI::App* app = nullptr;
  KeyValues defaults;
  std::map<std::string, std::string> flag_values;
  std::vector<std::pair<std::string, CLI::Option*>> flags;
  std::string config_file;

  void option(const std::string& flag, const std::string& key, const std::string& help) {
    flags.emplace_back(key, app->add_option(flag, flag_values[key], help + " [" + defaults.at(key) + "]"));
  }

  RunConfig resolve() const {
    RunConfig cfg(defaults);
    if (!config_file.empty()) {
      KeyValues file = load_key_values(config_file);
      for (const auto& [k, v] : file) {
        if (!defaults.count(k)) throw ConfigError(config_file + ": unknown key '" + k + "'");
      }
      cfg.merge(file);
    }
    for (const auto& [key, opt] : flags) {
      if (opt->count()) cfg.set(key, flag_values.at(key));
    }
    return cfg;
  }
};

std::string fixed(double v, int digits = 6) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

void write_echo(const fs::path& path, const RunConfig& cfg, const std::string& command) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << "# medvit " << kVersion << " " << command << "\n" << cfg.echo();
}

Normalization normalization(const RunConfig& cfg) {
  return {cfg.reals("norm.mean"), cfg.reals("norm.std")};
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw ConfigError("unknown split '" + s + "' (expected train, val or test)");
}

std::vector<std::size_t> split_indices(const DatasetFile& data, const std::string& split) {
  auto idx = data.indices(parse_split(split));
  if (idx.empty()) throw DataError("dataset has no samples in split '" + split + "'");
  return idx;
}

// Finds the model configuration whose digest matches the checkpoint.
ModelConfig resolve_checkpoint_config(const CheckpointInfo& info, const RunConfig& cfg) {
  auto head = info.entries.find("head.fc.bias");
  if (head == info.entries.end()) throw DataError("checkpoint has no classifier head");
  const std::size_t classes = head->second.at(0);
  std::vector<Variant> candidates;
  const std::string& v = cfg.str("variant");
  if (v == "auto") {
    candidates = {Variant::Toy, Variant::Tiny, Variant::Small, Variant::Large};
  } else {
    candidates = {parse_variant(v)};
  }
  for (Variant c : candidates) {
    ModelConfig mc = ModelConfig::medvit(c, classes, cfg.size("input"));
    if (mc.digest() == info.config_digest) return mc;
  }
  throw DataError("checkpoint config digest matches no " + v + " model with " + std::to_string(classes) +
                  " classes at input " + (cfg.size("input") ? std::to_string(cfg.size("input")) : "default") +
                  " (pass --variant/--input used for training)");
}

template <typename T>
MedViT<T> load_model(const fs::path& ckpt, const CheckpointInfo& info, const RunConfig& cfg) {
  MedViT<T> model = MedViT<T>::build(resolve_checkpoint_config(info, cfg), 0);
  load_checkpoint(ckpt, model);
  model.set_training(false);
  return model;
}

// Calls fn.template operator()<T>() with T matching the checkpoint dtype.
template <typename Fn>
int with_dtype(DType dtype, Fn&& fn) {
  return dtype == DType::F64 ? fn.template operator()<double>() : fn.template operator()<float>();
}

template <typename Fn>
int with_precision(const std::string& precision, Fn&& fn) {
  if (precision == "f32") return fn.template operator()<float>();
  if (precision == "f64") return fn.template operator()<double>();
  throw ConfigError("precision must be f32 or f64, got '" + precision + "'");
}

int cmd_train(const RunConfig& cfg) {
  const DatasetFile data = DatasetFile::load(cfg.str("data"));
  const ModelConfig mc = ModelConfig::medvit(parse_variant(cfg.str("variant")), data.num_classes, cfg.size("input"));
  if (data.channels != 1 && data.channels != mc.in_channels) {
    throw DataError("dataset has " + std::to_string(data.channels) + " channels; expected 1 or 3");
  }
  TrainConfig tc;
  tc.epochs = cfg.size("epochs");
  tc.batch_size = cfg.size("batch");
  tc.max_steps = cfg.size("max_steps");
  tc.seed = cfg.u64("seed");
  tc.optim.lr = cfg.real("lr");
  tc.optim.weight_decay = cfg.real("wd");
  tc.schedule.base_lr = cfg.real("lr");
  tc.schedule.milestones = cfg.sizes("milestones");
  tc.schedule.gamma = cfg.real("gamma");
  tc.pmc.enabled = cfg.flag("pmc.enabled");
  tc.pmc.lambda = cfg.real("pmc.lambda");
  tc.pmc.stage = cfg.size("pmc.stage");
  tc.pmc.probability = cfg.real("pmc.probability");
  tc.pmc.eps = cfg.real("pmc.eps");
  tc.norm = normalization(cfg);
  tc.hflip = cfg.flag("hflip");
  tc.out_dir = cfg.str("out");
  tc.validate();

  fs::create_directories(tc.out_dir);
  write_echo(tc.out_dir / "config.txt", cfg, "train");

  return with_precision(cfg.str("precision"), [&]<typename T>() {
    MedViT<T> model = MedViT<T>::build(mc, tc.seed);
    std::cout << mc.name << ": " << count_params(model) << " parameters, input " << mc.input_size << ", "
              << data.indices(Split::Train).size() << " train samples\n";
    const TrainResult r = train(model, data, tc, &std::cout);
    const EpochLog& last = r.epochs.back();
    std::cout << "RESULT epochs=" << r.epochs.size() << " steps=" << r.steps
              << " train_loss=" << fixed(last.train_loss) << " val_acc=" << fixed(last.has_val ? last.val.acc : 0.0)
              << " val_auc=" << fixed(last.has_val ? last.val.auc : 0.0) << " best_epoch=" << r.best_epoch
              << " ckpt=" << (tc.out_dir / "best.mvwt").string() << '\n';
    return 0;
  });
}

int cmd_eval(const RunConfig& cfg) {
  const fs::path ckpt = cfg.str("ckpt");
  const CheckpointInfo info = peek_checkpoint(ckpt);
  const DatasetFile data = DatasetFile::load(cfg.str("data"));
  const auto idx = split_indices(data, cfg.str("split"));
  return with_dtype(info.dtype, [&]<typename T>() {
    MedViT<T> model = load_model<T>(ckpt, info, cfg);
    const MetricReport m = evaluate(model, data, idx, normalization(cfg), cfg.size("batch"));
    std::cout << "split " << cfg.str("split") << ": " << m.n_samples << " samples\n";
    for (std::size_t c = 0; c < m.per_class_auc.size(); ++c) {
      std::cout << "  class " << c << " auc " << (std::isnan(m.per_class_auc[c]) ? "skipped" : fixed(m.per_class_auc[c]))
                << '\n';
    }
    if (!cfg.str("report").empty()) {
      std::ofstream out(cfg.str("report"), std::ios::trunc);
      out << "acc=" << fixed(m.acc, 8) << "\nauc=" << fixed(m.auc, 8) << "\nn=" << m.n_samples << "\nversion=" << kVersion
          << '\n';
      for (const auto& [k, v] : cfg.values()) out << "config." << k << '=' << v << '\n';
    }
    std::cout << "RESULT acc=" << fixed(m.acc) << " auc=" << fixed(m.auc) << " n=" << m.n_samples << '\n';
    return 0;
  });
}

int cmd_attack(const RunConfig& cfg) {
  const fs::path ckpt = cfg.str("ckpt");
  const CheckpointInfo info = peek_checkpoint(ckpt);
  const DatasetFile data = DatasetFile::load(cfg.str("data"));
  const auto idx = split_indices(data, cfg.str("split"));
  const AttackMethod method = parse_attack_method(cfg.str("method"));
  AttackConfig ac;
  ac.epsilon = cfg.real("eps");
  ac.step_size = cfg.real("step");
  ac.iterations = method == AttackMethod::Fgsm ? 1 : cfg.size("iters");
  ac.random_start = cfg.flag("random_start");
  ac.seed = cfg.u64("seed");
  ac.validate();
  return with_dtype(info.dtype, [&]<typename T>() {
    MedViT<T> model = load_model<T>(ckpt, info, cfg);
    const RobustReport r = robust_accuracy(model, data, idx, method, ac, normalization(cfg), cfg.size("batch"));
    const fs::path report = cfg.str("report");
    if (!report.empty()) {
      std::ofstream out(report, std::ios::trunc);
      if (!out) throw DataError("cannot write " + report.string());
      out << "clean_acc=" << fixed(r.clean_acc, 8) << "\nrobust_acc=" << fixed(r.robust_acc, 8) << "\nn=" << r.n
          << "\nversion=" << kVersion << '\n';
      for (const auto& [k, v] : cfg.values()) out << "config." << k << '=' << v << '\n';
    }
    std::cout << "RESULT method=" << cfg.str("method") << " clean_acc=" << fixed(r.clean_acc)
              << " robust_acc=" << fixed(r.robust_acc) << " n=" << r.n << '\n';
    return 0;
  });
}

int cmd_audit(const RunConfig& cfg) {
  const std::size_t input = cfg.size("input");
  const ModelConfig mc = ModelConfig::medvit(parse_variant(cfg.str("variant")), cfg.size("classes"), input);
  const AuditReport r = audit_model(mc, mc.input_size);
  write_audit_table(std::cout, r);
  if (!cfg.str("csv").empty()) {
    std::ofstream out(cfg.str("csv"), std::ios::trunc);
    if (!out) throw DataError("cannot write " + cfg.str("csv"));
    write_audit_csv(out, r);
    write_echo(cfg.str("csv") + ".config.txt", cfg, "audit");
  }
  std::cout << "RESULT params=" << r.total_params << " flops=" << r.total_flops
            << " params_m=" << fixed(static_cast<double>(r.total_params) / 1e6, 3)
            << " flops_g=" << fixed(static_cast<double>(r.total_flops) / 1e9, 3) << '\n';
  return 0;
}

int cmd_gradcam(const RunConfig& cfg) {
  const fs::path ckpt = cfg.str("ckpt");
  const CheckpointInfo info = peek_checkpoint(ckpt);
  const DatasetFile data = DatasetFile::load(cfg.str("data"));
  const std::size_t index = cfg.size("index");
  if (index >= data.n) throw DataError("sample index " + std::to_string(index) + " out of range");
  return with_dtype(info.dtype, [&]<typename T>() {
    MedViT<T> model = load_model<T>(ckpt, info, cfg);
    const std::string layer = cfg.str("layer").empty() ? model.default_cam_layer() : cfg.str("layer");
    BatchOptions opts;
    opts.size = model.config().input_size;
    opts.out_channels = model.config().in_channels;
    const std::size_t one[] = {index};
    Batch<T> batch = make_batch<T>(data, one, opts);
    const Normalization norm = normalization(cfg);
    std::size_t target = 0;
    if (cfg.str("class") == "label") {
      if (data.label_kind != TaskKind::Multiclass) throw ConfigError("--class label needs a multiclass dataset");
      target = batch.labels.classes[0];
    } else {
      target = cfg.size("class");
    }
    const Tensor<T> cam = grad_cam(model, normalize(batch.images, norm.mean, norm.std), target, layer);
    const std::size_t size = opts.size;
    const auto up = resize_bilinear(cam.data(), 1, cam.dim(0), cam.dim(1), size, size);
    std::vector<double> values(up.begin(), up.end());
    write_pgm(cfg.str("out"), values, size, size);
    write_echo(cfg.str("out") + ".config.txt", cfg, "gradcam");
    std::cout << "RESULT layer=" << layer << " class=" << target << " map=" << cam.dim(0) << "x" << cam.dim(1)
              << " out=" << cfg.str("out") << '\n';
    return 0;
  });
}

int cmd_synth(const RunConfig& cfg) {
  SyntheticOptions o;
  o.n = cfg.size("n");
  o.classes = cfg.size("classes");
  o.size = cfg.size("size");
  o.channels = cfg.size("channels");
  o.seed = cfg.u64("seed");
  o.noise = cfg.real("noise");
  const DatasetFile d = make_synthetic(o);
  d.save(cfg.str("out"));
  write_echo(cfg.str("out") + ".config.txt", cfg, "synth");
  std::cout << "train " << d.indices(Split::Train).size() << ", val " << d.indices(Split::Val).size() << ", test "
            << d.indices(Split::Test).size() << '\n';
  std::cout << "RESULT n=" << d.n << " classes=" << d.num_classes << " size=" << d.height
            << " checksum=" << d.pixel_checksum() << " out=" << cfg.str("out") << '\n';
  return 0;
}

int cmd_selftest(const RunConfig& cfg) {
  const std::string fault = cfg.str("inject_fault");
  if (fault == "relu-grad") {
    debug::set_relu_grad_fault(true);
  } else if (fault != "none") {
    throw ConfigError("unknown fault '" + fault + "' (expected relu-grad)");
  }
  const auto checks = run_selftest(&std::cout);
  debug::set_relu_grad_fault(false);
  std::size_t failed = 0;
  std::string names;
  for (const auto& c : checks) {
    if (!c.passed) {
      ++failed;
      names += (names.empty() ? "" : ",") + c.name;
    }
  }
  std::cout << "RESULT passed=" << checks.size() - failed << " failed=" << failed;
  if (failed) std::cout << " failures=" << names;
  std::cout << '\n';
  return failed ? 3 : 0;
}

KeyValues common_model_defaults() {
  return {{"variant", "auto"}, {"input", "0"}, {"norm.mean", "0.5"}, {"norm.std", "0.5"}};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MedViT hybrid CNN-Transformer laboratory"};
  app.set_version_flag("--version", std::string("medvit ") + kVersion);
  app.require_subcommand(1);

  std::vector<std::unique_ptr<Command>> commands;
  std::map<CLI::App*, std::function<int(const RunConfig&)>> handlers;
  auto add = [&](const std::string& name, const std::string& about, KeyValues defaults,
                 std::function<int(const RunConfig&)> handler) -> Command& {
    auto cmd = std::make_unique<Command>();
    cmd->app = app.add_subcommand(name, about);
    cmd->defaults = std::move(defaults);
    cmd->app->add_option("--config", cmd->config_file, "key = value file; flags override it");
    handlers[cmd->app] = std::move(handler);
    commands.push_back(std::move(cmd));
    return *commands.back();
  };

  {
    Command& c = add("train", "train a model on an MVDS dataset",
                     {{"variant", "toy"}, {"data", ""}, {"epochs", "10"}, {"batch", "32"}, {"seed", "0"},
                      {"lr", "0.001"}, {"wd", "0.05"}, {"milestones", "50,75"}, {"gamma", "0.1"},
                      {"pmc.enabled", "off"}, {"pmc.lambda", "0.5"}, {"pmc.stage", "1"}, {"pmc.probability", "0.5"},
                      {"pmc.eps", "1e-5"}, {"input", "0"}, {"norm.mean", "0.5"}, {"norm.std", "0.5"},
                      {"hflip", "off"}, {"max_steps", "0"}, {"precision", "f32"}, {"out", "run"}},
                     cmd_train);
    c.option("--variant", "variant", "t, s, l or toy");
    c.option("--data", "data", "MVDS dataset");
    c.option("--epochs", "epochs", "epochs");
    c.option("--batch", "batch", "batch size");
    c.option("--seed", "seed", "seed for init, shuffling and PMC");
    c.option("--lr", "lr", "base learning rate");
    c.option("--wd", "wd", "AdamW weight decay");
    c.option("--milestones", "milestones", "epochs at which lr is multiplied by gamma");
    c.option("--gamma", "gamma", "lr decay factor");
    c.option("--pmc", "pmc.enabled", "patch momentum changer on|off");
    c.option("--pmc-lambda", "pmc.lambda", "PMC loss mixing weight");
    c.option("--pmc-stage", "pmc.stage", "stage whose output PMC mixes");
    c.option("--pmc-probability", "pmc.probability", "per-batch PMC probability");
    c.option("--pmc-eps", "pmc.eps", "PMC moment eps");
    c.option("--input", "input", "input size (0: variant default)");
    c.option("--norm-mean", "norm.mean", "per-channel mean, comma separated");
    c.option("--norm-std", "norm.std", "per-channel std, comma separated");
    c.option("--hflip", "hflip", "random horizontal flip on|off");
    c.option("--max-steps", "max_steps", "stop after this many optimizer steps (0: off)");
    c.option("--precision", "precision", "f32 or f64");
    c.option("--out", "out", "output directory");
  }
  {
    KeyValues d = common_model_defaults();
    d.insert({{"ckpt", ""}, {"data", ""}, {"split", "test"}, {"batch", "64"}, {"report", ""}});
    Command& c = add("eval", "evaluate a checkpoint (ACC, AUC)", d, cmd_eval);
    c.option("--ckpt", "ckpt", "checkpoint");
    c.option("--data", "data", "MVDS dataset");
    c.option("--split", "split", "train, val or test");
    c.option("--batch", "batch", "batch size");
    c.option("--report", "report", "key=value report file");
    c.option("--variant", "variant", "variant used for training (auto: detect)");
    c.option("--input", "input", "input size used for training (0: variant default)");
    c.option("--norm-mean", "norm.mean", "per-channel mean");
    c.option("--norm-std", "norm.std", "per-channel std");
  }
  {
    KeyValues d = common_model_defaults();
    d.insert({{"ckpt", ""}, {"data", ""}, {"split", "test"}, {"batch", "32"}, {"method", "pgd"},
              {"eps", "0.03137254901960784"}, {"step", "0.01568627450980392"}, {"iters", "5"},
              {"random_start", "off"}, {"seed", "0"}, {"report", "attack_report.txt"}});
    Command& c = add("attack", "FGSM/PGD robust accuracy of a checkpoint", d, cmd_attack);
    c.option("--method", "method", "fgsm or pgd");
    c.option("--eps", "eps", "L-inf budget on the [0,1] pixel scale");
    c.option("--step", "step", "PGD step size");
    c.option("--iters", "iters", "PGD iterations");
    c.option("--random-start", "random_start", "PGD uniform random start on|off");
    c.option("--seed", "seed", "random start seed");
    c.option("--ckpt", "ckpt", "checkpoint");
    c.option("--data", "data", "MVDS dataset");
    c.option("--split", "split", "train, val or test");
    c.option("--batch", "batch", "batch size");
    c.option("--report", "report", "key=value report file");
    c.option("--variant", "variant", "variant used for training (auto: detect)");
    c.option("--input", "input", "input size used for training (0: variant default)");
    c.option("--norm-mean", "norm.mean", "per-channel mean");
    c.option("--norm-std", "norm.std", "per-channel std");
  }
  {
    Command& c = add("audit", "parameter and MAC accounting",
                     {{"variant", "t"}, {"input", "0"}, {"classes", "8"}, {"csv", ""}}, cmd_audit);
    c.option("--variant", "variant", "t, s, l or toy");
    c.option("--input", "input", "input size (0: variant default)");
    c.option("--classes", "classes", "number of classes");
    c.option("--csv", "csv", "per-layer CSV output");
  }
  {
    KeyValues d = common_model_defaults();
    d.insert({{"ckpt", ""}, {"data", ""}, {"index", "0"}, {"class", "label"}, {"layer", ""}, {"out", "cam.pgm"}});
    Command& c = add("gradcam", "Grad-CAM heatmap of one sample as PGM", d, cmd_gradcam);
    c.option("--ckpt", "ckpt", "checkpoint");
    c.option("--data", "data", "MVDS dataset");
    c.option("--index", "index", "sample index");
    c.option("--class", "class", "target class or 'label'");
    c.option("--layer", "layer", "tapped layer name (empty: ESA of the last LTB)");
    c.option("--out", "out", "PGM output");
    c.option("--variant", "variant", "variant used for training (auto: detect)");
    c.option("--input", "input", "input size used for training (0: variant default)");
    c.option("--norm-mean", "norm.mean", "per-channel mean");
    c.option("--norm-std", "norm.std", "per-channel std");
  }
  {
    Command& c = add("synth", "write a synthetic grating dataset",
                     {{"n", "64"}, {"classes", "4"}, {"size", "32"}, {"channels", "1"}, {"seed", "0"},
                      {"noise", "0.08"}, {"out", "synthetic.mvds"}},
                     cmd_synth);
    c.option("--n", "n", "samples");
    c.option("--classes", "classes", "classes");
    c.option("--size", "size", "image height and width");
    c.option("--channels", "channels", "stored channels");
    c.option("--seed", "seed", "seed");
    c.option("--noise", "noise", "Gaussian noise std on the [0,1] scale");
    c.option("--out", "out", "output file");
  }
  {
    Command& c = add("selftest", "fast invariant suite", {{"inject_fault", "none"}}, cmd_selftest);
    c.option("--inject-fault", "inject_fault", "test hook: relu-grad");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  for (const auto& cmd : commands) {
    if (!cmd->app->parsed()) continue;
    try {
      const RunConfig cfg = cmd->resolve();
      return handlers.at(cmd->app)(cfg);
    } catch (const ConfigError& e) {
      std::cerr << "error: " << e.what() << '\n';
      return 1;
    } catch (const DataError& e) {
      std::cerr << "data error: " << e.what() << '\n';
      return 2;
    } catch (const NumericError& e) {
      std::cerr << "numeric error: " << e.what() << '\n';
      return 3;
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << '\n';
      return 1;
    }
  }
  return 1;
}
