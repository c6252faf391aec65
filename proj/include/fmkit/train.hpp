#pragma once

#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "fmkit/data.hpp"
#include "fmkit/model.hpp"

namespace fmkit {

struct TrainConfig {
  double lr = 1e-6;  // paper-faithful default; the desk preset raises this
  double weight_decay = 1e-4;
  int batch_size = 32;
  int max_epochs = 100;
  int patience = 7;       // epochs without a dev-loss improvement
  double w_real = 0.0;    // (0,0) -> derive from training label frequencies
  double w_fake = 0.0;
  int avg_top_k = 5;
  uint64_t seed = 1;
};

// -sum w_{y_i} log softmax(logits_i)[y_i] / sum w_{y_i}
double wce_loss(const std::vector<Prediction>& preds, const std::vector<Label>& labels,
                double w_real, double w_fake);

// w_c = 1 - n_c / n_total, so the minority class weighs more.
std::pair<double, double> derive_class_weights(int n_real, int n_fake);

struct AdamState {
  std::vector<Tensor> m, v;
  int64_t t = 0;
};

// AdamW: bias-corrected Adam plus decoupled weight decay.
void adam_step(const std::vector<Param*>& params, const std::vector<Tensor>& grads,
               AdamState& st, double lr, double weight_decay, double beta1 = 0.9,
               double beta2 = 0.999, double eps = 1e-8);

struct DivergenceError : std::runtime_error {
  int epoch;
  explicit DivergenceError(int e)
      : std::runtime_error("training diverged (non-finite loss) at epoch " + std::to_string(e)),
        epoch(e) {}
};

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double dev_loss = 0.0;
  double dev_eer = 0.0;
};

struct ParamSnapshot {
  int epoch = 0;
  double dev_eer = 0.0;
  std::vector<Tensor> params;
};

struct TrainResult {
  std::vector<EpochStats> history;
  std::vector<ParamSnapshot> top;  // lowest dev EER first; ties favor earlier epochs
  int best_epoch = -1;             // lowest dev loss
  bool early_stopped = false;
  double w_real = 0.0, w_fake = 0.0;  // effective class weights
};

// Leaves the model at the last epoch's weights. run_dir, when non-empty, gets
// metrics.jsonl and the retained top-k epoch checkpoints.
TrainResult train(Model& m, const Manifest& train_mf, const Manifest& dev_mf,
                  const TrainConfig& tc, const std::string& run_dir = "",
                  bool verbose = false);

std::vector<Tensor> copy_params(Model& m);
void assign_params(Model& m, const std::vector<Tensor>& values);

// Elementwise mean over the k snapshots with the lowest dev EER.
std::vector<Tensor> average_top_k(const std::vector<ParamSnapshot>& snaps, int k);

struct GradcheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  int worst_index = -1;
  int n_coords = 0;
  bool pass = false;
  std::vector<std::string> failures;
};

// Central-difference comparison on sampled coordinates; every listed param
// contributes at least one.
GradcheckReport fd_compare(const std::vector<Param*>& params,
                           const std::function<Var(Tape&)>& build, double tolerance,
                           int min_coords, double h, uint64_t seed);

// Tiny-model gradient verification across all sub-modules of cfg's variant.
GradcheckReport gradcheck(const ModelConfig& cfg, double tolerance, int min_coords = 50,
                          uint64_t seed = 7);

}  // namespace fmkit
