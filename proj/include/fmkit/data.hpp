#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "fmkit/tensor.hpp"

namespace fmkit {

enum class Label { Real = 0, Fake = 1 };
std::string label_to_string(Label l);
Label label_from_string(const std::string& s);

struct FeatureIoError : std::runtime_error {
  enum class Kind { BadMagic, BadVersion, Truncated, ShapeMismatch, ChecksumMismatch };
  Kind kind;
  FeatureIoError(Kind k, const std::string& what) : std::runtime_error(what), kind(k) {}
};

// FMFE container: magic "FMFE" | version u16 LE | T u32 LE | C u32 LE |
// payload T*C float64 LE row-major | CRC32 of payload (u32 LE).
void write_feature_file(const std::string& path, const Tensor& features);
Tensor read_feature_file(const std::string& path);

struct ManifestEntry {
  std::string id;
  std::string path;  // relative to the manifest's directory
  Label label = Label::Real;
  int T = 0;
  int C = 0;
};

struct Manifest {
  int frame_rate = 50;
  std::vector<ManifestEntry> entries;
  std::string dir;  // set on read/write; used to resolve entry paths

  double duration_s(int i) const;
  std::string resolve(int i) const;
};

void write_manifest(const std::string& path, const Manifest& mf);
Manifest read_manifest(const std::string& path);

struct FeatureRecord {
  std::string id;
  Label label = Label::Real;
  Tensor features;  // [T,C]
};

// Reads entry i's feature file and checks it against the manifest header.
FeatureRecord load_record(const Manifest& mf, int i);

// ---- synthetic data ----

struct SynthSpec {
  int n_real = 1000;
  int n_fake = 1000;
  int C = 32;
  int frame_rate = 50;
  double dur_lo = 1.0;  // seconds
  double dur_hi = 4.0;
  double artifact_amp = 0.3;  // fraction of the process stationary std
  double artifact_window_frac = 0.1;
  double artifact_chan_frac = 0.1;
  bool paired = true;  // fakes reuse their counterpart's AR realization
  uint64_t seed = 1;
};

// gamma_0 of x_t = phi1 x_{t-1} + phi2 x_{t-2} + eps, Var(eps) = noise_var.
double ar2_stationary_variance(double phi1, double phi2, double noise_var);

struct SynthUtterance {
  Tensor features;  // [T,C]
  double phi1 = 0.0, phi2 = 0.0;
  double stationary_var = 0.0;
};

// Zero-mean AR(2) channels sharing a per-utterance random spectral tilt.
SynthUtterance gen_ar2_utterance(int T, int C, uint64_t useed);

// Adds amp * sin(pi/2 * (t - t0) + phase) on a random channel subset inside a
// random contiguous window. Window/channel counts are ceil(frac * dim).
void apply_artifact(Tensor& x, double amp, double window_frac, double chan_frac, Rng& rng);

// Writes feature files plus manifest.tsv under out_dir and returns the manifest.
Manifest synth_dataset(const SynthSpec& spec, const std::string& out_dir);

// Left-closed right-open buckets: (-inf, e0), [e0, e1), ..., [eK, inf).
// Returns entry indices per bucket (edges.size() + 1 buckets).
std::vector<std::vector<int>> bucket_by_duration(const Manifest& mf, const std::vector<double>& edges);
std::string bucket_name(const std::vector<double>& edges, int b);
std::vector<double> default_bucket_edges();  // {3, 4, 5, 6} seconds

}  // namespace fmkit
