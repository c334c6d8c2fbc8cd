#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "medvit/model.hpp"

namespace medvit {

/// One parameterised layer or attention product. FLOPs are multiply-accumulates.
struct LayerCost {
  std::string name;
  std::string kind;  // conv, bn, linear, matmul
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
  std::string output;  // output shape
};

/// Top-level block (stem conv, patch embed, ECB, LTB, head).
struct ModuleCost {
  std::string name;
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
};

struct AuditReport {
  std::string model;
  std::size_t input_size = 0;
  std::size_t batch = 1;
  std::uint64_t total_params = 0;
  std::uint64_t total_flops = 0;
  std::vector<ModuleCost> modules;
  std::vector<LayerCost> layers;
};

/// Pure function of the architecture: conv N*Cout*H'*W'*(Cin/g)*kh*kw, linear
/// N*D*K, attention QK^T and AV at the pooled key length; BN, relu and
/// pooling count zero.
AuditReport audit_model(const ModelConfig& config, std::size_t input_size, std::size_t batch = 1);
std::uint64_t count_flops(const ModelConfig& config, std::size_t input_size, std::size_t batch = 1);

void write_audit_table(std::ostream& out, const AuditReport& report);
void write_audit_csv(std::ostream& out, const AuditReport& report);

/// Runs a forward pass that reports activations through the tap and returns
/// (1, K) logits.
template <typename T>
using TappedForward = std::function<Tensor<T>(const TapFn<T>& tap)>;

/// relu(sum_c w_c A_c) with w_c the spatial mean of d logit[target] / dA_c,
/// min-max scaled to [0, 1] (all zeros when the map is constant).
/// Returns (h, w) at the activation's resolution.
template <typename T>
Tensor<T> grad_cam(const TappedForward<T>& forward, const std::string& layer, std::size_t target);

/// `image` is one normalised sample (1, C, H, W).
template <typename T>
Tensor<T> grad_cam(MedViT<T>& model, const Tensor<T>& image, std::size_t target, const std::string& layer);

/// Binary PGM (P5, maxval 255) of values in [0, 1].
void write_pgm(const std::filesystem::path& path, std::span<const double> values, std::size_t height,
               std::size_t width);

}  // namespace medvit
