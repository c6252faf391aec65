#include "fmkit/metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <stdexcept>

#include "fmkit/threads.hpp"

namespace fmkit {

namespace {

using Clock = std::chrono::steady_clock;

double now_s() { return std::chrono::duration<double>(Clock::now().time_since_epoch()).count(); }

// smallest positive step the clock can resolve
double timer_tick() {
  double tick = 1.0;
  for (int i = 0; i < 200; ++i) {
    double a = now_s();
    double b = now_s();
    while (b <= a) b = now_s();
    tick = std::min(tick, b - a);
  }
  return tick;
}

}  // namespace

double eer_sigma(double eer, int n_real, int n_fake) {
  double nr = n_real, nf = n_fake;
  return 0.5 * std::sqrt(eer * (1.0 - eer) * (nr + nf) / (nr * nf));
}

EERResult compute_eer(const ScoreSet& s) {
  const size_t nr = s.real_scores.size(), nf = s.fake_scores.size();
  if (nr == 0 || nf == 0) throw std::invalid_argument("compute_eer: both classes must be non-empty");
  for (double v : s.real_scores)
    if (!std::isfinite(v)) throw std::invalid_argument("compute_eer: non-finite real score");
  for (double v : s.fake_scores)
    if (!std::isfinite(v)) throw std::invalid_argument("compute_eer: non-finite fake score");

  std::vector<double> real = s.real_scores, fake = s.fake_scores;
  std::sort(real.begin(), real.end());
  std::sort(fake.begin(), fake.end());

  std::vector<double> thr;
  thr.reserve(nr + nf + 1);
  thr.insert(thr.end(), real.begin(), real.end());
  thr.insert(thr.end(), fake.begin(), fake.end());
  std::sort(thr.begin(), thr.end());
  thr.erase(std::unique(thr.begin(), thr.end()), thr.end());
  thr.push_back(thr.back() + 1.0);  // FA = 0, FR = 1 endpoint

  // FA(t) = frac(real >= t) falls with t, FR(t) = frac(fake < t) rises, so
  // FA - FR is non-increasing: walk to the sign change and interpolate.
  auto rates = [&](double t, double& fa, double& fr) {
    fa = double(real.end() - std::lower_bound(real.begin(), real.end(), t)) / double(nr);
    fr = double(std::lower_bound(fake.begin(), fake.end(), t) - fake.begin()) / double(nf);
  };

  double prev_t = thr[0], prev_fa, prev_fr;
  rates(prev_t, prev_fa, prev_fr);
  EERResult res;
  res.n_real = static_cast<int>(nr);
  res.n_fake = static_cast<int>(nf);
  double eer = 0.5, threshold = prev_t;
  if (prev_fa - prev_fr <= 0.0) {
    eer = (prev_fa + prev_fr) / 2.0;
  } else {
    for (size_t i = 1; i < thr.size(); ++i) {
      double t = thr[i], fa, fr;
      rates(t, fa, fr);
      double d0 = prev_fa - prev_fr, d1 = fa - fr;
      if (d1 <= 0.0) {
        double u = d0 - d1 > 0.0 ? d0 / (d0 - d1) : 0.0;
        eer = prev_fa + u * (fa - prev_fa);
        threshold = prev_t + u * (t - prev_t);
        break;
      }
      prev_t = t;
      prev_fa = fa;
      prev_fr = fr;
    }
  }
  res.eer = eer;
  res.threshold = threshold;
  res.sigma = eer_sigma(eer, res.n_real, res.n_fake);
  res.ci_half_width = 1.96 * res.sigma;
  return res;
}

BucketedEER eer_by_bucket(const std::vector<ScoreSet>& buckets) {
  BucketedEER out;
  ScoreSet pooled;
  for (const ScoreSet& b : buckets) {
    pooled.real_scores.insert(pooled.real_scores.end(), b.real_scores.begin(), b.real_scores.end());
    pooled.fake_scores.insert(pooled.fake_scores.end(), b.fake_scores.begin(), b.fake_scores.end());
    if (b.real_scores.empty() || b.fake_scores.empty()) out.per_bucket.push_back(std::nullopt);
    else out.per_bucket.push_back(compute_eer(b));
  }
  out.pooled = compute_eer(pooled);
  return out;
}

RTFReport measure_rtf(Model& m, const std::vector<double>& durations_s, int runs,
                      int warmup_runs, int frame_rate, uint64_t seed) {
  if (runs < 1) throw std::invalid_argument("measure_rtf: runs must be >= 1");
  RTFReport rep;
  rep.warmup_runs = warmup_runs;
  rep.model_id = variant_to_string(m.cfg.block.variant) + "-d" + std::to_string(m.cfg.D);
  rep.parallel = thread_cap() > 1;
  double tick = timer_tick();
  Rng rng(mix64(seed ^ 0xBE7C4));
  for (double d : durations_s) {
    int T = std::max(1, static_cast<int>(std::lround(d * frame_rate)));
    Tensor x = randn({T, m.cfg.C_in}, rng);
    for (int i = 0; i < warmup_runs; ++i) model_forward(m, x);
    double sum = 0.0, sum2 = 0.0;
    for (int i = 0; i < runs; ++i) {
      auto t0 = Clock::now();
      model_forward(m, x);
      double dt = std::chrono::duration<double>(Clock::now() - t0).count();
      if (dt < 100.0 * tick) rep.timer_warning = true;
      double rtf = dt / d;
      sum += rtf;
      sum2 += rtf * rtf;
    }
    RTFRow row;
    row.duration_s = d;
    row.runs = runs;
    row.mean_rtf = sum / runs;
    row.std_rtf = std::sqrt(std::max(0.0, sum2 / runs - row.mean_rtf * row.mean_rtf));
    rep.rows.push_back(row);
  }
  return rep;
}

double fit_loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2)
    throw std::invalid_argument("fit_loglog_slope: need two same-length series");
  double mx = 0.0, my = 0.0;
  const size_t n = x.size();
  std::vector<double> lx(n), ly(n);
  for (size_t i = 0; i < n; ++i) {
    if (x[i] <= 0.0 || y[i] <= 0.0) throw std::invalid_argument("fit_loglog_slope: positive data only");
    lx[i] = std::log(x[i]);
    ly[i] = std::log(y[i]);
    mx += lx[i];
    my += ly[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0;
  for (size_t i = 0; i < n; ++i) {
    sxy += (lx[i] - mx) * (ly[i] - my);
    sxx += (lx[i] - mx) * (lx[i] - mx);
  }
  return sxy / sxx;
}

std::vector<ComplexityRow> complexity_probe(const std::vector<Variant>& variants, int D,
                                            const std::vector<int>& T_grid, int reps,
                                            uint64_t seed) {
  if (reps < 1) throw std::invalid_argument("complexity_probe: reps must be >= 1");
  std::vector<ComplexityRow> out;
  for (Variant v : variants) {
    BlockConfig bc;
    bc.variant = v;
    bc.D = D;
    bc.n_blocks = 1;
    bc.n_state = 8;
    bc.dropout = 0.0;
    Rng rng(mix64(seed ^ uint64_t(17 * (int(v) + 1))));
    Encoder enc = make_encoder(bc, rng, "probe");
    ComplexityRow row;
    row.variant = variant_to_string(v);
    Rng data_rng(mix64(seed ^ 0xDA7A));
    for (int T : T_grid) {
      Tensor x = randn({T, D}, data_rng);
      {  // one unmeasured warm pass per size
        Tape t(false);
        encoder_forward(enc, t.constant(x), nullptr, false);
      }
      double best = 1e300;
      for (int r = 0; r < reps; ++r) {
        auto t0 = Clock::now();
        Tape t(false);
        encoder_forward(enc, t.constant(x), nullptr, false);
        best = std::min(best, std::chrono::duration<double>(Clock::now() - t0).count());
      }
      row.T.push_back(T);
      row.seconds.push_back(best);
    }
    std::vector<double> xs(row.T.begin(), row.T.end());
    row.slope = fit_loglog_slope(xs, row.seconds);
    out.push_back(std::move(row));
  }
  return out;
}

}  // namespace fmkit
