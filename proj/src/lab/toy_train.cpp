#include "emt/lab/toy_train.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <numeric>
#include <string>

#include "emt/rng.hpp"

namespace emt::lab {

namespace {

constexpr std::uint64_t kInitStream = 1;
constexpr std::uint64_t kShuffleStream = 2;
constexpr std::uint64_t kReinitStream = 3;

std::vector<double> class_mask(std::size_t K, const std::vector<int>& active) {
  std::vector<double> m(K, 0.0);
  for (int k : active) m[static_cast<std::size_t>(k)] = 1.0;
  return m;
}

// Accuracy of argmax over all K logits, restricted to samples whose class is in `group`.
double group_accuracy(const std::vector<int>& pred, const std::vector<int>& labels,
                      const std::vector<double>& group) {
  std::size_t n = 0, hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (group[static_cast<std::size_t>(labels[i])] == 0.0) continue;
    ++n;
    if (pred[i] == labels[i]) ++hit;
  }
  return n == 0 ? 0.0 : static_cast<double>(hit) / static_cast<double>(n);
}

}  // namespace

std::string_view to_string(MaskMode m) { return m == MaskMode::Control ? "control" : "split"; }

MaskMode parse_mask_mode(std::string_view s) {
  if (s == "split") return MaskMode::Split;
  if (s == "control") return MaskMode::Control;
  throw std::invalid_argument("unknown mask mode \"" + std::string(s) + "\" (split, control)");
}

void ToyTrainConfig::validate() const {
  data.validate();
  for (int h : hidden)
    if (h < 1) throw std::invalid_argument("hidden widths must be positive");
  if (pretrain_epochs < 0 || finetune_epochs < 0) throw std::invalid_argument("epoch counts must be >= 0");
  if (!(lr > 0.0)) throw std::invalid_argument("lr must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("weight_decay must be >= 0");
  if (!(lr_decay_factor >= 1.0)) throw std::invalid_argument("lr_decay_factor must be >= 1");
  if (lr_decay_period < 1) throw std::invalid_argument("lr_decay_period must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  const auto split = split_by_class(static_cast<std::size_t>(data.classes), pretrain_fraction);
  if (mask == MaskMode::Split && split.finetune.empty())
    throw std::invalid_argument("pretrain_fraction leaves no fine-tune classes");
}

double ToyTrainConfig::lr_at(int epoch) const {
  return lr / std::pow(lr_decay_factor, epoch / lr_decay_period);
}

double ForgettingRun::min_phase2_pretrain_acc() const {
  if (static_cast<std::size_t>(phase_boundary) >= pretrain_acc.size())
    throw std::logic_error("run has no phase-2 epochs");
  return *std::min_element(pretrain_acc.begin() + phase_boundary, pretrain_acc.end());
}

void ForgettingRun::append_curves(CurveData& out, std::string_view prefix) const {
  out.add_series(std::string(prefix) + "pretrain", pretrain_acc);
  out.add_series(std::string(prefix) + "finetune", finetune_acc);
}

ForgettingRun train_toy(const ToyTrainConfig& cfg) {
  cfg.validate();
  const auto data = make_synthetic(cfg.data);
  const auto K = static_cast<std::size_t>(cfg.data.classes);
  const auto N = data.labels.size();
  const auto split = split_by_class(K, cfg.pretrain_fraction);
  const auto pre_mask = class_mask(K, split.pretrain);
  const auto fine_mask = class_mask(K, split.finetune);

  std::vector<int> widths{cfg.data.dim};
  widths.insert(widths.end(), cfg.hidden.begin(), cfg.hidden.end());
  widths.push_back(cfg.data.classes);
  Rng init_rng(derive_seed(cfg.seed, kInitStream));
  Mlp net(widths, cfg.activation, init_rng);
  Sgd opt(cfg.momentum, cfg.weight_decay);
  Rng shuffle_rng(derive_seed(cfg.seed, kShuffleStream));

  ForgettingRun run;
  run.config = cfg;
  run.phase_boundary = cfg.pretrain_epochs;

  std::vector<std::size_t> order(N);
  std::iota(order.begin(), order.end(), 0);
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  const int total = cfg.pretrain_epochs + cfg.finetune_epochs;

  for (int epoch = 0; epoch < total; ++epoch) {
    const bool phase2 = epoch >= cfg.pretrain_epochs;
    if (phase2 && epoch == cfg.pretrain_epochs) {
      if (cfg.reinit_classifier) {
        Rng r(derive_seed(cfg.seed, kReinitStream));
        net.classifier().init(r);
      }
      if (cfg.reinit_optimizer) opt.reset();
    }
    const auto& weights =
        phase2 && cfg.mask == MaskMode::Split ? fine_mask : pre_mask;
    const double lr = cfg.lr_at(epoch);

    shuffle_rng.shuffle(std::span<std::size_t>(order));
    double loss_sum = 0.0, weight_sum = 0.0;
    for (std::size_t start = 0; start < N; start += bs) {
      const auto n = std::min(bs, N - start);
      Matrix x(n, static_cast<std::size_t>(cfg.data.dim));
      std::vector<int> y(n);
      std::vector<double> w(n);
      double wsum = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const auto src = order[start + i];
        std::copy_n(data.features.row(src).begin(), x.cols(), x.row(i).begin());
        y[i] = data.labels[src];
        w[i] = weights[static_cast<std::size_t>(y[i])];
        wsum += w[i];
      }
      if (wsum == 0.0) continue;  // nothing in this batch carries loss weight
      for (double& v : w) v /= wsum;

      Mlp::Tape tape;
      const auto logits = net.forward(x, cfg.backend, &tape);
      std::vector<double> row_loss(n);
      Matrix grad(n, K);
      kernels::softmax_xent(cfg.backend, logits, y, w, row_loss, grad);
      const double batch_loss = std::accumulate(row_loss.begin(), row_loss.end(), 0.0);
      if (!std::isfinite(batch_loss))
        throw DivergenceError("training diverged (non-finite loss) in epoch " + std::to_string(epoch + 1),
                              run);
      loss_sum += batch_loss * wsum;
      weight_sum += wsum;
      opt.step(net, net.backward(tape, grad, cfg.backend), lr);
    }

    const auto pred = argmax_rows(net.forward(data.features, cfg.backend));
    run.pretrain_acc.push_back(group_accuracy(pred, data.labels, pre_mask));
    run.finetune_acc.push_back(
        split.finetune.empty() ? 0.0 : group_accuracy(pred, data.labels, fine_mask));
    run.loss.push_back(weight_sum > 0.0 ? loss_sum / weight_sum : 0.0);
  }
  return run;
}

CurveData ReinitComparison::curves() const {
  CurveData out;
  out.add_series("baseline", baseline.pretrain_acc);
  out.add_series("reinit_classifier", reinit_classifier.pretrain_acc);
  out.add_series("reinit_optimizer", reinit_optimizer.pretrain_acc);
  return out;
}

ReinitComparison reinit_variants(const ToyTrainConfig& cfg) {
  auto base = cfg;
  base.reinit_classifier = false;
  base.reinit_optimizer = false;
  auto rc = base;
  rc.reinit_classifier = true;
  auto ro = base;
  ro.reinit_optimizer = true;

  ReinitComparison out;
  const ToyTrainConfig* cfgs[3] = {&base, &rc, &ro};
  ForgettingRun* runs[3] = {&out.baseline, &out.reinit_classifier, &out.reinit_optimizer};
  std::exception_ptr errors[3];
  // Independent runs; each is serial inside, so results do not depend on scheduling.
#pragma omp parallel for schedule(static, 1)
  for (int i = 0; i < 3; ++i) {
    try {
      *runs[i] = train_toy(*cfgs[i]);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

}  // namespace emt::lab
