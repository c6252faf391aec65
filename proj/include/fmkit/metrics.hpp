#pragma once

#include <optional>
#include <string>
#include <vector>

#include "fmkit/model.hpp"

namespace fmkit {

struct ScoreSet {
  std::vector<double> real_scores;
  std::vector<double> fake_scores;
};

struct EERResult {
  double eer = 0.0;
  double threshold = 0.0;
  double sigma = 0.0;          // 0.5*sqrt(EER(1-EER)(n_r+n_f)/(n_r*n_f))
  double ci_half_width = 0.0;  // 1.96 * sigma
  int n_real = 0;
  int n_fake = 0;
};

// Score convention: larger = more fake. FA = frac(real >= t), FR = frac(fake < t).
// EER sits at the FA/FR crossing, linearly interpolated between the two
// adjacent operating points.
EERResult compute_eer(const ScoreSet& s);
double eer_sigma(double eer, int n_real, int n_fake);

// One result per bucket (nullopt when a class is missing) plus the pooled result.
struct BucketedEER {
  std::vector<std::optional<EERResult>> per_bucket;
  EERResult pooled;
};
BucketedEER eer_by_bucket(const std::vector<ScoreSet>& buckets);

struct RTFRow {
  double duration_s = 0.0;
  double mean_rtf = 0.0;
  double std_rtf = 0.0;
  int runs = 0;
};

struct RTFReport {
  std::vector<RTFRow> rows;
  int warmup_runs = 0;
  std::string model_id;
  bool timer_warning = false;  // timer resolution coarser than 1% of a measurement
  bool parallel = false;       // ran with the library's parallel kernels enabled
};

RTFReport measure_rtf(Model& m, const std::vector<double>& durations_s, int runs,
                      int warmup_runs, int frame_rate, uint64_t seed);

struct ComplexityRow {
  std::string variant;
  std::vector<int> T;
  std::vector<double> seconds;
  double slope = 0.0;  // log-log fit of seconds vs T
};

// Forward-only wall clock of a single encoder block per variant at equal D.
std::vector<ComplexityRow> complexity_probe(const std::vector<Variant>& variants, int D,
                                            const std::vector<int>& T_grid, int reps,
                                            uint64_t seed);

// Least-squares slope of log(y) against log(x).
double fit_loglog_slope(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace fmkit
