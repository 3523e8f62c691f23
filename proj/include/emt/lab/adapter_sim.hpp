#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "emt/curve_data.hpp"
#include "emt/kernels.hpp"
#include "emt/matrix.hpp"

namespace emt::lab {

/// linear: only the adapter W_a trains during fine-tuning.
/// lora:   W_a plus rank-r additive deltas B*A on both head matrices; the
///         base head stays frozen.
enum class AdapterMode { Linear, Lora };
std::string_view to_string(AdapterMode m);
AdapterMode parse_adapter_mode(std::string_view s);

/// Miniature vision-language pipeline:
///   Z_v = relu(G X_v)          frozen random encoder
///   H_v = W_a Z_v              trainable adapter
///   logits = head([H_v, H_q])  two-layer MLP over the labels of both tasks,
///                              H_q a fixed query embedding per task
/// The whole pipeline is first trained jointly on tasks A and B, then
/// fine-tuned on task A alone.
struct AdapterSimConfig {
  int input_dim = 16;
  int encoder_dim = 32;
  int text_dim = 16;
  int query_dim = 1;
  int head_hidden = 32;
  int classes_a = 5;
  int classes_b = 5;
  int per_class = 60;
  double separation = 3.0;
  double noise_sigma = 0.5;
  /// Task B images drawn around the same cluster centres as task A, so only
  /// the query embedding tells the tasks apart.
  bool shared_inputs = true;
  AdapterMode mode = AdapterMode::Linear;
  int lora_rank = 4;
  int pretrain_epochs = 5;
  int finetune_epochs = 10;
  double lr = 0.05;
  double momentum = 0.9;
  int batch_size = 32;
  std::uint64_t seed = 0;
  kernels::Backend backend = kernels::Backend::Serial;

  void validate() const;
};

struct AdapterRun {
  /// Index 0 is the accuracy right after joint pretraining, index e after e
  /// fine-tune epochs.
  std::vector<double> task_a;
  std::vector<double> task_b;
  std::string head_digest_before;  // SHA-256 of the base head parameters
  std::string head_digest_after;
  std::string effective_head_digest_after;  // base + low-rank deltas
  AdapterSimConfig config;

  /// task_b[0] - task_b[epochs].
  double task_b_drop(int epochs) const;
  /// "<prefix>task_a" and "<prefix>task_b", x = fine-tune epoch from 0.
  void append_curves(CurveData& out, std::string_view prefix = "") const;
};

AdapterRun adapter_sim(const AdapterSimConfig& cfg);

}  // namespace emt::lab
