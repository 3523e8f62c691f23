#pragma once

#include <cstdint>
#include <stdexcept>
#include <string_view>
#include <vector>

#include "emt/curve_data.hpp"
#include "emt/datasets.hpp"
#include "emt/kernels.hpp"
#include "emt/lab/mlp.hpp"

namespace emt::lab {

/// Which classes carry loss weight in the fine-tune phase.
///   split:   phase 1 trains the pretrain classes, phase 2 only the others
///   control: phase 2 keeps the phase-1 mask (nothing new to learn)
enum class MaskMode { Split, Control };
std::string_view to_string(MaskMode m);
MaskMode parse_mask_mode(std::string_view s);

struct ToyTrainConfig {
  SyntheticSpec data{10, 16, 100, 4.0, 0.75, 0};
  std::vector<int> hidden{64};
  Activation activation = Activation::Relu;
  int pretrain_epochs = 20;
  int finetune_epochs = 20;
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double lr_decay_factor = 10.0;
  int lr_decay_period = 80;  // epochs, counted across both phases
  int batch_size = 128;
  double pretrain_fraction = 0.5;
  MaskMode mask = MaskMode::Split;
  bool reinit_classifier = false;
  bool reinit_optimizer = false;
  std::uint64_t seed = 0;
  kernels::Backend backend = kernels::Backend::Serial;

  void validate() const;
  /// Learning rate used during global epoch `epoch` (0-based).
  double lr_at(int epoch) const;
};

struct ForgettingRun {
  std::vector<double> pretrain_acc;  // one entry per epoch, both phases
  std::vector<double> finetune_acc;
  std::vector<double> loss;          // mean masked loss of the epoch
  int phase_boundary = 0;            // epochs in phase 1
  ToyTrainConfig config;

  std::size_t epochs() const { return pretrain_acc.size(); }
  /// Minimum pretrain-class accuracy over the phase-2 epochs.
  double min_phase2_pretrain_acc() const;
  /// "<prefix>pretrain" and "<prefix>finetune" series, epochs numbered from 1.
  void append_curves(CurveData& out, std::string_view prefix = "") const;
};

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, ForgettingRun partial)
      : std::runtime_error(what), partial_(std::move(partial)) {}
  const ForgettingRun& partial() const { return partial_; }

 private:
  ForgettingRun partial_;
};

/// Two-phase class-split training with masked class weights. Deterministic
/// in (config, seed). Throws DivergenceError carrying the epochs finished so
/// far when the loss stops being finite.
ForgettingRun train_toy(const ToyTrainConfig& cfg);

struct ReinitComparison {
  ForgettingRun baseline;
  ForgettingRun reinit_classifier;
  ForgettingRun reinit_optimizer;

  /// Pretrain-class accuracy of the three runs, one series each.
  CurveData curves() const;
};

/// Baseline, reinit_classifier and reinit_optimizer runs from the same seed
/// (the reinit flags in cfg are ignored).
ReinitComparison reinit_variants(const ToyTrainConfig& cfg);

}  // namespace emt::lab
