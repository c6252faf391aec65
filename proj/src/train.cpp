#include "fmkit/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <numeric>

#include "fmkit/checkpoint.hpp"
#include "fmkit/metrics.hpp"
#include "json.hpp"

namespace fmkit {

namespace {

double log_softmax_at(const Tensor& logits, int idx) {
  double a = logits.at(0), b = logits.at(1);
  double mx = std::max(a, b);
  double lse = mx + std::log(std::exp(a - mx) + std::exp(b - mx));
  return (idx == 0 ? a : b) - lse;
}

}  // namespace

double wce_loss(const std::vector<Prediction>& preds, const std::vector<Label>& labels,
                double w_real, double w_fake) {
  if (preds.empty()) throw std::invalid_argument("wce_loss: empty batch");
  if (preds.size() != labels.size()) throw std::invalid_argument("wce_loss: size mismatch");
  double num = 0.0, den = 0.0;
  for (size_t i = 0; i < preds.size(); ++i) {
    double w = labels[i] == Label::Real ? w_real : w_fake;
    num += -w * log_softmax_at(preds[i].logits, static_cast<int>(labels[i]));
    den += w;
  }
  if (den <= 0.0) throw std::invalid_argument("wce_loss: non-positive total weight");
  return num / den;
}

std::pair<double, double> derive_class_weights(int n_real, int n_fake) {
  if (n_real < 1 || n_fake < 1)
    throw std::invalid_argument("derive_class_weights: both classes must appear in training data");
  double n = double(n_real) + double(n_fake);
  return {double(n_fake) / n, double(n_real) / n};
}

void adam_step(const std::vector<Param*>& params, const std::vector<Tensor>& grads,
               AdamState& st, double lr, double weight_decay, double beta1, double beta2,
               double eps) {
  if (params.size() != grads.size()) throw std::invalid_argument("adam_step: grads/params mismatch");
  if (st.m.empty()) {
    for (Param* p : params) {
      st.m.emplace_back(p->value.shape);
      st.v.emplace_back(p->value.shape);
    }
  }
  if (st.m.size() != params.size()) throw std::invalid_argument("adam_step: state size mismatch");
  st.t += 1;
  double bc1 = 1.0 - std::pow(beta1, double(st.t));
  double bc2 = 1.0 - std::pow(beta2, double(st.t));
  for (size_t j = 0; j < params.size(); ++j) {
    Tensor& p = params[j]->value;
    const Tensor& g = grads[j];
    if (!p.same_shape(g)) throw std::invalid_argument("adam_step: grad shape mismatch for " + params[j]->name);
    Tensor& m = st.m[j];
    Tensor& v = st.v[j];
    for (int64_t i = 0; i < p.numel(); ++i) {
      m.data[i] = beta1 * m.data[i] + (1.0 - beta1) * g.data[i];
      v.data[i] = beta2 * v.data[i] + (1.0 - beta2) * g.data[i] * g.data[i];
      double mhat = m.data[i] / bc1;
      double vhat = v.data[i] / bc2;
      p.data[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * p.data[i]);
    }
  }
}

std::vector<Tensor> copy_params(Model& m) {
  std::vector<Param*> ps;
  m.collect_params(ps);
  std::vector<Tensor> out;
  out.reserve(ps.size());
  for (Param* p : ps) out.push_back(p->value);
  return out;
}

void assign_params(Model& m, const std::vector<Tensor>& values) {
  std::vector<Param*> ps;
  m.collect_params(ps);
  if (ps.size() != values.size()) throw std::invalid_argument("assign_params: count mismatch");
  for (size_t i = 0; i < ps.size(); ++i) {
    if (!ps[i]->value.same_shape(values[i]))
      throw std::invalid_argument("assign_params: shape mismatch for " + ps[i]->name);
    ps[i]->value = values[i];
  }
}

std::vector<Tensor> average_top_k(const std::vector<ParamSnapshot>& snaps, int k) {
  if (k < 1) throw std::invalid_argument("average_top_k: k must be >= 1");
  if (static_cast<size_t>(k) > snaps.size())
    throw std::invalid_argument("average_top_k: k exceeds the number of checkpoints");
  std::vector<int> order(snaps.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (snaps[a].dev_eer != snaps[b].dev_eer) return snaps[a].dev_eer < snaps[b].dev_eer;
    return snaps[a].epoch < snaps[b].epoch;
  });
  std::vector<Tensor> mean = snaps[order[0]].params;
  for (int j = 1; j < k; ++j) {
    const std::vector<Tensor>& src = snaps[order[j]].params;
    if (src.size() != mean.size()) throw std::invalid_argument("average_top_k: layout mismatch");
    for (size_t i = 0; i < mean.size(); ++i)
      for (int64_t e = 0; e < mean[i].numel(); ++e) mean[i].data[e] += src[i].data[e];
  }
  for (Tensor& t : mean)
    for (double& v : t.data) v /= double(k);
  return mean;
}

TrainResult train(Model& m, const Manifest& train_mf, const Manifest& dev_mf,
                  const TrainConfig& tc, const std::string& run_dir, bool verbose) {
  if (train_mf.entries.empty() || dev_mf.entries.empty())
    throw std::invalid_argument("train: empty split");
  if (tc.lr < 0.0 || tc.patience < 1 || tc.avg_top_k < 1 || tc.batch_size < 1)
    throw std::invalid_argument("train: bad config");

  const int n_train = static_cast<int>(train_mf.entries.size());
  const int n_dev = static_cast<int>(dev_mf.entries.size());
  std::vector<Tensor> train_x(n_train);
  std::vector<Label> train_y(n_train);
  int n_real = 0, n_fake = 0;
  for (int i = 0; i < n_train; ++i) {
    FeatureRecord r = load_record(train_mf, i);
    train_x[i] = std::move(r.features);
    train_y[i] = r.label;
    (r.label == Label::Real ? n_real : n_fake)++;
  }
  std::vector<Tensor> dev_x(n_dev);
  std::vector<Label> dev_y(n_dev);
  for (int i = 0; i < n_dev; ++i) {
    FeatureRecord r = load_record(dev_mf, i);
    dev_x[i] = std::move(r.features);
    dev_y[i] = r.label;
  }

  TrainResult res;
  if (tc.w_real == 0.0 && tc.w_fake == 0.0) {
    std::tie(res.w_real, res.w_fake) = derive_class_weights(n_real, n_fake);
  } else {
    if (tc.w_real <= 0.0 || tc.w_fake <= 0.0)
      throw std::invalid_argument("train: class weights must be positive");
    res.w_real = tc.w_real;
    res.w_fake = tc.w_fake;
  }
  auto weight_of = [&](Label l) { return l == Label::Real ? res.w_real : res.w_fake; };

  std::vector<Param*> params;
  m.collect_params(params);
  AdamState st;
  std::vector<Tensor> grads;
  for (Param* p : params) grads.emplace_back(p->value.shape);

  std::FILE* metrics_file = nullptr;
  if (!run_dir.empty()) {
    std::filesystem::create_directories(run_dir);
    metrics_file = std::fopen((run_dir + "/metrics.jsonl").c_str(), "w");
    if (!metrics_file) throw std::runtime_error("train: cannot write metrics in " + run_dir);
  }

  double best_dev_loss = std::numeric_limits<double>::infinity();
  int bad_epochs = 0;
  std::vector<int> idx(n_train);
  std::iota(idx.begin(), idx.end(), 0);

  for (int epoch = 1; epoch <= tc.max_epochs; ++epoch) {
    Rng shuffle_rng(mix64(tc.seed ^ (0x5FUL + uint64_t(epoch) * 1315423911ull)));
    for (int i = n_train - 1; i > 0; --i) std::swap(idx[i], idx[shuffle_rng.uniform_int(0, i)]);

    double ep_num = 0.0, ep_den = 0.0;
    for (int b0 = 0; b0 < n_train; b0 += tc.batch_size) {
      int b1 = std::min(n_train, b0 + tc.batch_size);
      double wsum = 0.0;
      for (int k = b0; k < b1; ++k) wsum += weight_of(train_y[idx[k]]);
      for (Tensor& g : grads) std::fill(g.data.begin(), g.data.end(), 0.0);

      for (int k = b0; k < b1; ++k) {
        int i = idx[k];
        double w = weight_of(train_y[i]);
        Tape t;
        Rng drop(mix64(tc.seed ^ (uint64_t(epoch) << 32) ^ uint64_t(i) * 2654435761ull));
        Var logits = model_logits(m, t.constant(train_x[i]), &drop, true);
        Var ce = cross_entropy(reshape(logits, {2}), static_cast<int>(train_y[i]));
        double ce_val = t.val(ce).at(0);
        if (!std::isfinite(ce_val)) {
          if (metrics_file) std::fclose(metrics_file);
          throw DivergenceError(epoch);
        }
        ep_num += w * ce_val;
        ep_den += w;
        t.backward(ce, w / wsum);
        for (size_t j = 0; j < params.size(); ++j) {
          Tensor g = t.param_grad(*params[j]);
          for (int64_t e = 0; e < g.numel(); ++e) grads[j].data[e] += g.data[e];
        }
      }
      adam_step(params, grads, st, tc.lr, tc.weight_decay);
    }
    double train_loss = ep_num / ep_den;

    // dev pass: weighted loss for early stopping, EER for checkpoint ranking
    std::vector<Prediction> dev_preds;
    dev_preds.reserve(n_dev);
    ScoreSet scores;
    for (int i = 0; i < n_dev; ++i) {
      Prediction p = model_forward(m, dev_x[i]);
      (dev_y[i] == Label::Real ? scores.real_scores : scores.fake_scores).push_back(p.score);
      dev_preds.push_back(std::move(p));
    }
    double dev_loss = wce_loss(dev_preds, dev_y, res.w_real, res.w_fake);
    if (!std::isfinite(dev_loss)) {
      if (metrics_file) std::fclose(metrics_file);
      throw DivergenceError(epoch);
    }
    double dev_eer = compute_eer(scores).eer;
    res.history.push_back({epoch, train_loss, dev_loss, dev_eer});

    if (metrics_file) {
      nlohmann::json j = {{"epoch", epoch},
                          {"train_loss", train_loss},
                          {"dev_loss", dev_loss},
                          {"dev_eer", dev_eer}};
      std::fprintf(metrics_file, "%s\n", j.dump().c_str());
      std::fflush(metrics_file);
    }
    if (verbose)
      std::printf("epoch %3d  train_loss %.5f  dev_loss %.5f  dev_eer %.4f\n", epoch, train_loss,
                  dev_loss, dev_eer);

    // maintain the top-k snapshot set (lowest dev EER, earlier epoch wins ties)
    res.top.push_back({epoch, dev_eer, copy_params(m)});
    std::sort(res.top.begin(), res.top.end(), [](const ParamSnapshot& a, const ParamSnapshot& b) {
      if (a.dev_eer != b.dev_eer) return a.dev_eer < b.dev_eer;
      return a.epoch < b.epoch;
    });
    bool kept = true;
    if (static_cast<int>(res.top.size()) > tc.avg_top_k) {
      int dropped = res.top.back().epoch;
      kept = dropped != epoch;
      if (!run_dir.empty() && dropped != epoch) {
        char old_name[64];
        std::snprintf(old_name, sizeof(old_name), "/ckpt_epoch_%03d.bin", dropped);
        std::filesystem::remove(run_dir + old_name);
      }
      res.top.pop_back();
    }
    if (!run_dir.empty() && kept) {
      char name[64];
      std::snprintf(name, sizeof(name), "/ckpt_epoch_%03d.bin", epoch);
      save_checkpoint(m, run_dir + name);
    }

    if (dev_loss < best_dev_loss) {
      best_dev_loss = dev_loss;
      res.best_epoch = epoch;
      bad_epochs = 0;
    } else {
      ++bad_epochs;
      if (bad_epochs >= tc.patience) {
        res.early_stopped = true;
        break;
      }
    }
  }
  if (metrics_file) std::fclose(metrics_file);
  return res;
}

GradcheckReport fd_compare(const std::vector<Param*>& params,
                           const std::function<Var(Tape&)>& build, double tolerance,
                           int min_coords, double h, uint64_t seed) {
  GradcheckReport rep;
  Tape t;
  Var loss = build(t);
  if (t.val(loss).numel() != 1) throw std::invalid_argument("fd_compare: loss must be scalar");
  t.backward(loss);
  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (Param* p : params) analytic.push_back(t.param_grad(*p));

  int per_param = std::max<int>(1, (min_coords + static_cast<int>(params.size()) - 1) /
                                       std::max<size_t>(1, params.size()));
  Rng rng(seed);
  for (size_t j = 0; j < params.size(); ++j) {
    Param* p = params[j];
    int n = static_cast<int>(p->value.numel());
    std::vector<int> coords;
    if (n <= per_param) {
      coords.resize(n);
      std::iota(coords.begin(), coords.end(), 0);
    } else {
      for (int k = 0; k < per_param; ++k) coords.push_back(rng.uniform_int(0, n - 1));
      std::sort(coords.begin(), coords.end());
      coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
    }
    for (int c : coords) {
      double keep = p->value.data[c];
      p->value.data[c] = keep + h;
      Tape tp(false);
      double up = tp.val(build(tp)).at(0);
      p->value.data[c] = keep - h;
      Tape tm(false);
      double dn = tm.val(build(tm)).at(0);
      p->value.data[c] = keep;
      double numeric = (up - dn) / (2.0 * h);
      double a = analytic[j].data[c];
      double rel = std::fabs(a - numeric) / std::max({1.0, std::fabs(a), std::fabs(numeric)});
      ++rep.n_coords;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_param = p->name;
        rep.worst_index = c;
      }
      if (rel > tolerance) {
        char line[160];
        std::snprintf(line, sizeof(line), "%s[%d] rel_err=%.3e", p->name.c_str(), c, rel);
        rep.failures.push_back(line);
      }
    }
  }
  rep.pass = rep.failures.empty();
  return rep;
}

GradcheckReport gradcheck(const ModelConfig& cfg, double tolerance, int min_coords,
                          uint64_t seed) {
  Model m = make_model(cfg);
  Rng rng(mix64(seed ^ 0x6C));
  Tensor x = randn({6, cfg.C_in}, rng);
  auto build = [&m, x](Tape& t) {
    Var logits = model_logits(m, t.constant(x), nullptr, false);
    return cross_entropy(reshape(logits, {2}), 1);
  };
  std::vector<Param*> params;
  m.collect_params(params);
  return fd_compare(params, build, tolerance, min_coords, 1e-5, mix64(seed ^ 0xFD));
}

}  // namespace fmkit
