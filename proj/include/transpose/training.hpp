#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "transpose/model.hpp"
#include "transpose/synth.hpp"

namespace transpose {

struct TrainConfig {
  int epochs = 30;
  int batch_size = 8;
  double lr_start = 1e-3;
  double lr_end = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  uint64_t seed = 42;
  double sigma = 2.0;      // target Gaussian width in heatmap cells
  double pck_alpha = 0.05; // threshold as a fraction of the image diagonal

  void validate() const;
  std::string to_json() const;
  static TrainConfig from_json(const std::string& text);
};

struct EpochStats {
  int epoch = 0;
  double loss = 0.0;
  double pck = 0.0;
};

struct TrainReport {
  std::vector<EpochStats> epochs;
  double wall_seconds = 0.0;  // informational; omitted from files to keep outputs reproducible
  std::string model_path;

  double final_pck() const { return epochs.empty() ? 0.0 : epochs.back().pck; }
  void write_json(const std::string& path) const;
  void write_csv(const std::string& path) const;
};

// Standard Adam with bias correction; one slot pair per parameter tensor.
class AdamState {
 public:
  AdamState(size_t param_count, double beta1, double beta2, double eps);
  // grads are read from each parameter's grad buffer
  void step(std::vector<std::pair<std::string, Tensor>>& params, double lr);

 private:
  double beta1_, beta2_, eps_;
  int64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// adam update for a single tensor; used by AdamState and directly testable
void adam_step(Tensor& param, std::span<const double> grad, std::vector<double>& m,
               std::vector<double>& v, int64_t t, double lr, double beta1,
               double beta2, double eps);

double cosine_lr(int epoch, int epochs, double lr_start, double lr_end);

// MSE heatmap regression over shuffled mini-batches; evaluates PCK on the
// held-out split each epoch. Deterministic given seeds. Saves to
// out_model_path when non-empty.
std::pair<Model, TrainReport> train(const ModelConfig& model_config,
                                    const TrainConfig& train_config,
                                    const std::vector<FigureSample>& dataset,
                                    const std::string& out_model_path = "");

double evaluate_pck(const Model& model, const std::vector<FigureSample>& samples,
                    const std::vector<int>& indices, double alpha);

struct DatasetSpec {
  int n = 2200;
  uint64_t seed = 7;
  double occlusion_p = 0.1;
};

struct ResolutionEval {
  int height = 0;
  int width = 0;
  double pck = 0.0;
};

// Regenerates the test split of `spec` at each resolution (same seeds,
// rescaled geometry) and reports PCK; the position embedding is rebuilt or
// resampled inside forward().
std::vector<ResolutionEval> eval_resolutions(const Model& model, const DatasetSpec& spec,
                                             const std::vector<std::pair<int, int>>& resolutions,
                                             double alpha);

// Three identical runs differing only in pe_kind: Sine2D, Learnable, None.
std::array<TrainReport, 3> ablate_pe(const ModelConfig& model_config,
                                     const TrainConfig& train_config,
                                     const std::vector<FigureSample>& dataset);

}  // namespace transpose
