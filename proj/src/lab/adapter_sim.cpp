#include "emt/lab/adapter_sim.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <stdexcept>

#include "emt/datasets.hpp"
#include "emt/digest.hpp"
#include "emt/lab/mlp.hpp"
#include "emt/rng.hpp"

namespace emt::lab {

namespace {

constexpr std::uint64_t kDataStream = 1;
constexpr std::uint64_t kEncoderStream = 2;
constexpr std::uint64_t kQueryStream = 3;
constexpr std::uint64_t kInitStream = 4;
constexpr std::uint64_t kShuffleStream = 5;
constexpr std::uint64_t kLoraStream = 6;
constexpr std::uint64_t kFinetuneShuffleStream = 7;
constexpr std::uint64_t kDataStreamB = 8;

void init_uniform(Matrix& m, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(m.cols()));
  for (double& v : m.values()) v = rng.uniform(-bound, bound);
}

void init_uniform(std::vector<double>& b, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (double& v : b) v = rng.uniform(-bound, bound);
}

// out = a * b (plain matrix product, b given row-major as rows x cols).
Matrix matmul(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double c = a(i, k);
      if (c == 0.0) continue;
      for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) += c * b(k, j);
    }
  return out;
}

Matrix transpose(const Matrix& m) {
  Matrix t(m.cols(), m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) t(j, i) = m(i, j);
  return t;
}

Matrix add(const Matrix& a, const Matrix& b) {
  Matrix out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] += b.values()[i];
  return out;
}

struct LowRank {
  Matrix b;  // out x r, starts at zero
  Matrix a;  // r x in
};

struct Model {
  Matrix w_a;  // text_dim x encoder_dim
  Matrix w1;   // hidden x (text_dim + query_dim)
  std::vector<double> b1;
  Matrix w2;   // classes x hidden
  std::vector<double> b2;
  std::optional<LowRank> d1, d2;

  Matrix w1_eff() const { return d1 ? add(w1, matmul(d1->b, d1->a)) : w1; }
  Matrix w2_eff() const { return d2 ? add(w2, matmul(d2->b, d2->a)) : w2; }
};

std::string head_digest(const Matrix& w1, const std::vector<double>& b1, const Matrix& w2,
                        const std::vector<double>& b2) {
  std::vector<double> flat;
  for (auto s : {w1.values(), std::span<const double>(b1), w2.values(), std::span<const double>(b2)})
    flat.insert(flat.end(), s.begin(), s.end());
  return sha256_hex(std::span<const unsigned char>(reinterpret_cast<const unsigned char*>(flat.data()),
                                                   flat.size() * sizeof(double)));
}

struct Batch {
  Matrix z;      // encoder output
  Matrix query;  // H_q rows
  std::vector<int> y;
};

struct Grads {
  Matrix w_a, w1, w2;
  std::vector<double> b1, b2;
};

struct Forward {
  Matrix in;   // [H_v, H_q]
  Matrix act;  // hidden activations
  Matrix logits;
};

Forward forward(const Model& m, const Matrix& w1e, const Matrix& w2e, const Matrix& z,
                const Matrix& query, kernels::Backend be) {
  Forward f;
  Matrix hv(z.rows(), m.w_a.rows());
  kernels::dense_forward(be, z, m.w_a, {}, hv);
  f.in = Matrix(z.rows(), hv.cols() + query.cols());
  for (std::size_t r = 0; r < z.rows(); ++r) {
    std::copy(hv.row(r).begin(), hv.row(r).end(), f.in.row(r).begin());
    std::copy(query.row(r).begin(), query.row(r).end(), f.in.row(r).begin() + static_cast<std::ptrdiff_t>(hv.cols()));
  }
  f.act = Matrix(z.rows(), w1e.rows());
  kernels::dense_forward(be, f.in, w1e, m.b1, f.act);
  for (double& v : f.act.values()) v = v > 0.0 ? v : 0.0;
  f.logits = Matrix(z.rows(), w2e.rows());
  kernels::dense_forward(be, f.act, w2e, m.b2, f.logits);
  return f;
}

Grads backward(const Model& m, const Matrix& w1e, const Matrix& w2e, const Forward& f,
               const Matrix& z, const Matrix& g_logits, kernels::Backend be) {
  Grads g{Matrix(m.w_a.rows(), m.w_a.cols()), Matrix(w1e.rows(), w1e.cols()),
          Matrix(w2e.rows(), w2e.cols()), std::vector<double>(m.b1.size()),
          std::vector<double>(m.b2.size())};
  kernels::dense_backward_weights(be, g_logits, f.act, g.w2, g.b2);
  Matrix g_act(f.act.rows(), f.act.cols());
  kernels::dense_backward_input(be, g_logits, w2e, g_act);
  for (std::size_t i = 0; i < g_act.size(); ++i)
    if (f.act.values()[i] <= 0.0) g_act.values()[i] = 0.0;
  kernels::dense_backward_weights(be, g_act, f.in, g.w1, g.b1);
  Matrix g_in(f.in.rows(), f.in.cols());
  kernels::dense_backward_input(be, g_act, w1e, g_in);
  Matrix g_hv(g_in.rows(), m.w_a.rows());
  for (std::size_t r = 0; r < g_in.rows(); ++r)
    std::copy_n(g_in.row(r).begin(), g_hv.cols(), g_hv.row(r).begin());
  kernels::dense_backward_weights(be, g_hv, z, g.w_a, {});
  return g;
}

double accuracy(const Model& m, const Batch& data, kernels::Backend be) {
  const auto f = forward(m, m.w1_eff(), m.w2_eff(), data.z, data.query, be);
  const auto pred = argmax_rows(f.logits);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == data.y[i];
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

Batch gather(const Batch& all, std::span<const std::size_t> rows) {
  Batch b{Matrix(rows.size(), all.z.cols()), Matrix(rows.size(), all.query.cols()), {}};
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(all.z.row(rows[i]).begin(), all.z.cols(), b.z.row(i).begin());
    std::copy_n(all.query.row(rows[i]).begin(), all.query.cols(), b.query.row(i).begin());
    b.y.push_back(all.y[rows[i]]);
  }
  return b;
}

// One epoch of minibatch SGD on `data`. `step` receives the gradients.
template <typename Step>
void run_epoch(Model& m, const Batch& data, int batch_size, Rng& rng, kernels::Backend be, Step&& step) {
  std::vector<std::size_t> order(data.y.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(std::span<std::size_t>(order));
  const auto bs = static_cast<std::size_t>(batch_size);
  for (std::size_t start = 0; start < order.size(); start += bs) {
    const auto n = std::min(bs, order.size() - start);
    const auto b = gather(data, std::span<const std::size_t>(order).subspan(start, n));
    const auto w1e = m.w1_eff(), w2e = m.w2_eff();
    const auto f = forward(m, w1e, w2e, b.z, b.query, be);
    std::vector<double> weight(n, 1.0 / static_cast<double>(n)), loss(n);
    Matrix g_logits(n, f.logits.cols());
    kernels::softmax_xent(be, f.logits, b.y, weight, loss, g_logits);
    const double total = std::accumulate(loss.begin(), loss.end(), 0.0);
    if (!std::isfinite(total)) throw std::runtime_error("adapter simulation diverged (non-finite loss)");
    step(backward(m, w1e, w2e, f, b.z, g_logits, be));
  }
}

}  // namespace

std::string_view to_string(AdapterMode m) { return m == AdapterMode::Lora ? "lora" : "linear"; }

AdapterMode parse_adapter_mode(std::string_view s) {
  if (s == "linear") return AdapterMode::Linear;
  if (s == "lora") return AdapterMode::Lora;
  throw std::invalid_argument("unknown adapter mode \"" + std::string(s) + "\" (linear, lora)");
}

void AdapterSimConfig::validate() const {
  for (int v : {input_dim, encoder_dim, text_dim, query_dim, head_hidden, per_class, batch_size})
    if (v < 1) throw std::invalid_argument("adapter sim dimensions, per_class and batch_size must be positive");
  if (classes_a < 1 || classes_b < 1) throw std::invalid_argument("both tasks need at least one class");
  if (lora_rank < 1) throw std::invalid_argument("lora rank must be >= 1");
  if (pretrain_epochs < 0 || finetune_epochs < 0) throw std::invalid_argument("epoch counts must be >= 0");
  if (!(lr > 0.0)) throw std::invalid_argument("lr must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("momentum must lie in [0, 1)");
  if (!(separation > 0.0) || !(noise_sigma >= 0.0))
    throw std::invalid_argument("separation must be positive and noise_sigma non-negative");
}

double AdapterRun::task_b_drop(int epochs) const {
  if (epochs < 0 || static_cast<std::size_t>(epochs) >= task_b.size())
    throw std::out_of_range("task_b_drop: epoch out of range");
  return task_b[0] - task_b[static_cast<std::size_t>(epochs)];
}

void AdapterRun::append_curves(CurveData& out, std::string_view prefix) const {
  out.add_series(std::string(prefix) + "task_a", task_a, 0.0);
  out.add_series(std::string(prefix) + "task_b", task_b, 0.0);
}

AdapterRun adapter_sim(const AdapterSimConfig& cfg) {
  cfg.validate();
  const auto be = cfg.backend;
  const int K = cfg.classes_a + cfg.classes_b;

  Rng enc_rng(derive_seed(cfg.seed, kEncoderStream));
  Matrix encoder(cfg.encoder_dim, cfg.input_dim);
  init_uniform(encoder, enc_rng);
  Rng q_rng(derive_seed(cfg.seed, kQueryStream));
  Matrix queries(2, cfg.query_dim);
  for (double& v : queries.values()) v = q_rng.normal();

  // Encoded samples of `classes` clusters starting at cluster `first_cluster`,
  // labelled from `first_label`, tagged with the task's query embedding.
  auto make_task = [&](int classes, int first_cluster, int first_label, std::size_t task,
                       std::uint64_t stream) {
    SyntheticSpec spec;
    spec.classes = first_cluster + classes;
    spec.dim = cfg.input_dim;
    spec.per_class = cfg.per_class;
    spec.separation = cfg.separation;
    spec.noise_sigma = cfg.noise_sigma;
    spec.seed = derive_seed(cfg.seed, stream);
    const auto raw = make_synthetic(spec);
    const auto skip = static_cast<std::size_t>(first_cluster * cfg.per_class);
    const auto n = raw.features.rows() - skip;
    Matrix x(n, raw.features.cols());
    std::copy(raw.features.values().begin() + static_cast<std::ptrdiff_t>(skip * x.cols()),
              raw.features.values().end(), x.values().begin());
    Batch t{Matrix(n, encoder.rows()), Matrix(n, cfg.query_dim), {}};
    kernels::dense_forward(be, x, encoder, {}, t.z);
    for (double& v : t.z.values()) v = v > 0.0 ? v : 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      std::copy_n(queries.row(task).begin(), cfg.query_dim, t.query.row(i).begin());
      t.y.push_back(raw.labels[skip + i] - first_cluster + first_label);
    }
    return t;
  };
  const Batch task_a = make_task(cfg.classes_a, 0, 0, 0, kDataStream);
  const Batch task_b = make_task(cfg.classes_b, cfg.shared_inputs ? 0 : cfg.classes_a, cfg.classes_a, 1,
                                 kDataStreamB);

  const Batch joint = [&] {
    std::vector<std::size_t> rows(task_a.y.size() + task_b.y.size());
    std::iota(rows.begin(), rows.end(), 0);
    Batch j{Matrix(rows.size(), task_a.z.cols()), Matrix(rows.size(), cfg.query_dim), {}};
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const Batch& src = i < task_a.y.size() ? task_a : task_b;
      const auto r = i < task_a.y.size() ? i : i - task_a.y.size();
      std::copy_n(src.z.row(r).begin(), src.z.cols(), j.z.row(i).begin());
      std::copy_n(src.query.row(r).begin(), cfg.query_dim, j.query.row(i).begin());
      j.y.push_back(src.y[r]);
    }
    return j;
  }();

  Model m;
  Rng init_rng(derive_seed(cfg.seed, kInitStream));
  m.w_a = Matrix(cfg.text_dim, cfg.encoder_dim);
  init_uniform(m.w_a, init_rng);
  m.w1 = Matrix(cfg.head_hidden, cfg.text_dim + cfg.query_dim);
  m.b1.assign(cfg.head_hidden, 0.0);
  init_uniform(m.w1, init_rng);
  init_uniform(m.b1, m.w1.cols(), init_rng);
  m.w2 = Matrix(K, cfg.head_hidden);
  m.b2.assign(K, 0.0);
  init_uniform(m.w2, init_rng);
  init_uniform(m.b2, m.w2.cols(), init_rng);

  // Joint pretraining: every parameter trains.
  {
    Sgd opt(cfg.momentum, 0.0);
    Rng rng(derive_seed(cfg.seed, kShuffleStream));
    for (int e = 0; e < cfg.pretrain_epochs; ++e)
      run_epoch(m, joint, cfg.batch_size, rng, be, [&](const Grads& g) {
        opt.step(m.w_a.values(), g.w_a.values(), cfg.lr, 0);
        opt.step(m.w1.values(), g.w1.values(), cfg.lr, 1);
        opt.step(m.b1, g.b1, cfg.lr, 2);
        opt.step(m.w2.values(), g.w2.values(), cfg.lr, 3);
        opt.step(m.b2, g.b2, cfg.lr, 4);
      });
  }

  AdapterRun run;
  run.config = cfg;
  run.head_digest_before = head_digest(m.w1, m.b1, m.w2, m.b2);
  run.task_a.push_back(accuracy(m, task_a, be));
  run.task_b.push_back(accuracy(m, task_b, be));

  if (cfg.mode == AdapterMode::Lora) {
    Rng r(derive_seed(cfg.seed, kLoraStream));
    const auto rank = static_cast<std::size_t>(cfg.lora_rank);
    m.d1 = LowRank{Matrix(m.w1.rows(), rank), Matrix(rank, m.w1.cols())};
    m.d2 = LowRank{Matrix(m.w2.rows(), rank), Matrix(rank, m.w2.cols())};
    init_uniform(m.d1->a, r);
    init_uniform(m.d2->a, r);
  }

  Sgd opt(cfg.momentum, 0.0);
  Rng rng(derive_seed(cfg.seed, kFinetuneShuffleStream));
  for (int e = 0; e < cfg.finetune_epochs; ++e) {
    run_epoch(m, task_a, cfg.batch_size, rng, be, [&](const Grads& g) {
      opt.step(m.w_a.values(), g.w_a.values(), cfg.lr, 0);
      if (cfg.mode != AdapterMode::Lora) return;
      // W_eff = W + B A: dL/dB = G A^T, dL/dA = B^T G.
      std::size_t slot = 1;
      for (auto [d, gw] : {std::pair{&*m.d1, &g.w1}, std::pair{&*m.d2, &g.w2}}) {
        const Matrix gb = matmul(*gw, transpose(d->a));
        const Matrix ga = matmul(transpose(d->b), *gw);
        opt.step(d->b.values(), gb.values(), cfg.lr, slot++);
        opt.step(d->a.values(), ga.values(), cfg.lr, slot++);
      }
    });
    run.task_a.push_back(accuracy(m, task_a, be));
    run.task_b.push_back(accuracy(m, task_b, be));
  }

  run.head_digest_after = head_digest(m.w1, m.b1, m.w2, m.b2);
  run.effective_head_digest_after = head_digest(m.w1_eff(), m.b1, m.w2_eff(), m.b2);
  return run;
}

}  // namespace emt::lab
