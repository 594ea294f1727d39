#include "transpose/training.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "transpose/heatmap.hpp"
#include "transpose/rng.hpp"

namespace transpose {

using nlohmann::json;

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
  if (!(lr_start >= lr_end && lr_end > 0.0)) {
    throw std::invalid_argument("need lr_start >= lr_end > 0");
  }
  if (sigma <= 0.0) throw std::invalid_argument("sigma must be positive");
  if (pck_alpha <= 0.0) throw std::invalid_argument("pck_alpha must be positive");
}

std::string TrainConfig::to_json() const {
  json j;
  j["epochs"] = epochs;
  j["batch_size"] = batch_size;
  j["lr_start"] = lr_start;
  j["lr_end"] = lr_end;
  j["beta1"] = beta1;
  j["beta2"] = beta2;
  j["adam_eps"] = adam_eps;
  j["seed"] = seed;
  j["sigma"] = sigma;
  j["pck_alpha"] = pck_alpha;
  return j.dump();
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  json j = json::parse(text);
  static const char* known[] = {"epochs", "batch_size", "lr_start", "lr_end", "beta1",
                                "beta2",  "adam_eps",   "seed",     "sigma",  "pck_alpha"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : known) ok = ok || it.key() == k;
    if (!ok) throw std::invalid_argument("unknown train config key: " + it.key());
  }
  TrainConfig c;
  if (j.contains("epochs")) c.epochs = j["epochs"].get<int>();
  if (j.contains("batch_size")) c.batch_size = j["batch_size"].get<int>();
  if (j.contains("lr_start")) c.lr_start = j["lr_start"].get<double>();
  if (j.contains("lr_end")) c.lr_end = j["lr_end"].get<double>();
  if (j.contains("beta1")) c.beta1 = j["beta1"].get<double>();
  if (j.contains("beta2")) c.beta2 = j["beta2"].get<double>();
  if (j.contains("adam_eps")) c.adam_eps = j["adam_eps"].get<double>();
  if (j.contains("seed")) c.seed = j["seed"].get<uint64_t>();
  if (j.contains("sigma")) c.sigma = j["sigma"].get<double>();
  if (j.contains("pck_alpha")) c.pck_alpha = j["pck_alpha"].get<double>();
  c.validate();
  return c;
}

void TrainReport::write_json(const std::string& path) const {
  json j;
  j["model_path"] = model_path;
  json rows = json::array();
  for (const auto& e : epochs) {
    rows.push_back({{"epoch", e.epoch}, {"loss", e.loss}, {"pck", e.pck}});
  }
  j["epochs"] = rows;
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  const std::string text = j.dump(2);
  std::fwrite(text.data(), 1, text.size(), f);
  std::fputc('\n', f);
  std::fclose(f);
}

void TrainReport::write_csv(const std::string& path) const {
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  std::fprintf(f, "epoch,loss,pck\n");
  for (const auto& e : epochs) {
    std::fprintf(f, "%d,%.17g,%.17g\n", e.epoch, e.loss, e.pck);
  }
  std::fclose(f);
}

void adam_step(Tensor& param, std::span<const double> grad, std::vector<double>& m,
               std::vector<double>& v, int64_t t, double lr, double beta1,
               double beta2, double eps) {
  const int64_t n = param.size();
  if (static_cast<int64_t>(grad.size()) != n) {
    throw std::invalid_argument("adam_step gradient length " + std::to_string(grad.size()) +
                                " != parameter size " + std::to_string(n));
  }
  if (m.size() != static_cast<size_t>(n)) m.assign(static_cast<size_t>(n), 0.0);
  if (v.size() != static_cast<size_t>(n)) v.assign(static_cast<size_t>(n), 0.0);
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  double* p = param.value().data();
  for (int64_t i = 0; i < n; ++i) {
    const double g = grad[static_cast<size_t>(i)];
    m[static_cast<size_t>(i)] = beta1 * m[static_cast<size_t>(i)] + (1.0 - beta1) * g;
    v[static_cast<size_t>(i)] = beta2 * v[static_cast<size_t>(i)] + (1.0 - beta2) * g * g;
    const double mhat = m[static_cast<size_t>(i)] / bc1;
    const double vhat = v[static_cast<size_t>(i)] / bc2;
    p[i] -= lr * mhat / (std::sqrt(vhat) + eps);
  }
}

AdamState::AdamState(size_t param_count, double beta1, double beta2, double eps)
    : beta1_(beta1), beta2_(beta2), eps_(eps), m_(param_count), v_(param_count) {}

void AdamState::step(std::vector<std::pair<std::string, Tensor>>& params, double lr) {
  if (params.size() != m_.size()) {
    throw std::invalid_argument("optimizer state sized for " + std::to_string(m_.size()) +
                                " tensors, got " + std::to_string(params.size()));
  }
  ++t_;
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor& t = params[i].second;
    adam_step(t, t.grad(), m_[i], v_[i], t_, lr, beta1_, beta2_, eps_);
  }
}

double cosine_lr(int epoch, int epochs, double lr_start, double lr_end) {
  if (epoch < 0 || epoch >= epochs) {
    throw std::invalid_argument("epoch " + std::to_string(epoch) + " outside [0, " +
                                std::to_string(epochs) + ")");
  }
  if (epochs == 1) return lr_start;
  const double t = static_cast<double>(epoch) / (epochs - 1);
  return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + std::cos(std::numbers::pi * t));
}

double evaluate_pck(const Model& model, const std::vector<FigureSample>& samples,
                    const std::vector<int>& indices, double alpha) {
  int64_t visible = 0, hit = 0;
  for (int idx : indices) {
    const FigureSample& s = samples[static_cast<size_t>(idx)];
    ForwardResult r = forward(model, s.image, false);
    const KeypointSet pred = decode(r.heatmaps);
    const double diag = std::hypot(s.image.dim(1), s.image.dim(2));
    for (size_t k = 0; k < s.keypoints.size(); ++k) {
      if (!s.keypoints[k].visible) continue;
      ++visible;
      const double dx = pred[k].x - s.keypoints[k].x;
      const double dy = pred[k].y - s.keypoints[k].y;
      if (std::sqrt(dx * dx + dy * dy) <= alpha * diag) ++hit;
    }
  }
  return visible == 0 ? 1.0 : static_cast<double>(hit) / static_cast<double>(visible);
}

std::pair<Model, TrainReport> train(const ModelConfig& model_config,
                                    const TrainConfig& train_config,
                                    const std::vector<FigureSample>& dataset,
                                    const std::string& out_model_path) {
  model_config.validate();
  train_config.validate();
  if (dataset.empty()) throw std::invalid_argument("train needs a nonempty dataset");

  const auto t0 = std::chrono::steady_clock::now();
  Model model = build_model(model_config, train_config.seed);
  auto params = model.parameters();
  AdamState adam(params.size(), train_config.beta1, train_config.beta2, train_config.adam_eps);

  auto [train_idx, test_idx] = split_dataset(static_cast<int>(dataset.size()));
  Rng shuffle_rng(Rng::mix(train_config.seed, 0x5FFE));
  Rng dropout_rng(Rng::mix(train_config.seed, 0xD0));

  // per-sample target cache; targets are pure functions of the labels
  std::vector<Tensor> targets(dataset.size());
  auto target_of = [&](int idx) {
    Tensor& t = targets[static_cast<size_t>(idx)];
    if (!t.defined()) {
      const FigureSample& s = dataset[static_cast<size_t>(idx)];
      t = gaussian_target(s.keypoints, train_config.sigma, s.image.dim(1) / 4,
                          s.image.dim(2) / 4);
    }
    return t;
  };

  TrainReport report;
  Tape tape;
  for (int epoch = 0; epoch < train_config.epochs; ++epoch) {
    const double lr = cosine_lr(epoch, train_config.epochs, train_config.lr_start,
                                train_config.lr_end);
    // Fisher-Yates on the train indices
    for (size_t i = train_idx.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(shuffle_rng.uniform_int(0, static_cast<int>(i) - 1));
      std::swap(train_idx[i - 1], train_idx[j]);
    }

    double epoch_loss = 0.0;
    int batches = 0;
    for (size_t start = 0; start < train_idx.size(); start += static_cast<size_t>(train_config.batch_size)) {
      const size_t stop = std::min(train_idx.size(), start + static_cast<size_t>(train_config.batch_size));
      tape.clear();
      EncoderRunOptions opt;
      opt.tape = &tape;
      opt.dropout_rng = &dropout_rng;
      Tensor batch_loss;
      const double inv_batch = 1.0 / static_cast<double>(stop - start);
      for (size_t bi = start; bi < stop; ++bi) {
        const int idx = train_idx[bi];
        const FigureSample& s = dataset[static_cast<size_t>(idx)];
        ForwardResult r = forward(model, s.image, opt);
        Tensor loss = scale(mse_loss(r.heatmaps, target_of(idx),
                                     visibility_mask(s.keypoints), &tape),
                            inv_batch, &tape);
        batch_loss = batch_loss.defined() ? add(batch_loss, loss, &tape) : loss;
      }
      const double loss_value = batch_loss.value()[0];
      if (!std::isfinite(loss_value)) {
        throw std::runtime_error("training diverged: non-finite loss at epoch " +
                                 std::to_string(epoch) + ", batch " + std::to_string(batches));
      }
      tape.backward(batch_loss);
      adam.step(params, lr);
      epoch_loss += loss_value;
      ++batches;
    }

    EpochStats stats;
    stats.epoch = epoch;
    stats.loss = batches > 0 ? epoch_loss / batches : 0.0;
    stats.pck = evaluate_pck(model, dataset, test_idx, train_config.pck_alpha);
    report.epochs.push_back(stats);
  }

  for (const auto& [name, t] : params) {
    if (!t.all_finite()) {
      throw std::runtime_error("training produced non-finite values in " + name);
    }
  }
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!out_model_path.empty()) {
    save_model(model, out_model_path);
    report.model_path = out_model_path;
  }
  return {std::move(model), std::move(report)};
}

std::vector<ResolutionEval> eval_resolutions(const Model& model, const DatasetSpec& spec,
                                             const std::vector<std::pair<int, int>>& resolutions,
                                             double alpha) {
  const auto test_idx = split_dataset(spec.n).second;
  std::vector<ResolutionEval> table;
  table.reserve(resolutions.size());
  for (const auto& [h, w] : resolutions) {
    std::vector<FigureSample> samples;
    samples.reserve(test_idx.size());
    std::vector<int> local;
    local.reserve(test_idx.size());
    for (int idx : test_idx) {
      samples.push_back(sample_figure(Rng::mix(spec.seed, static_cast<uint64_t>(idx)), h, w,
                                      spec.occlusion_p));
      local.push_back(static_cast<int>(samples.size()) - 1);
    }
    table.push_back({h, w, evaluate_pck(model, samples, local, alpha)});
  }
  return table;
}

std::array<TrainReport, 3> ablate_pe(const ModelConfig& model_config,
                                     const TrainConfig& train_config,
                                     const std::vector<FigureSample>& dataset) {
  std::array<TrainReport, 3> reports;
  const PeKind kinds[3] = {PeKind::Sine2D, PeKind::Learnable, PeKind::None};
  for (int i = 0; i < 3; ++i) {
    ModelConfig cfg = model_config;
    cfg.pe_kind = kinds[i];
    reports[static_cast<size_t>(i)] = train(cfg, train_config, dataset).second;
  }
  return reports;
}

}  // namespace transpose
