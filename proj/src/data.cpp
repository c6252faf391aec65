#include "fmkit/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <numbers>
#include <numeric>

#include "fmkit/io_util.hpp"

namespace fmkit {

std::string label_to_string(Label l) { return l == Label::Real ? "real" : "fake"; }

Label label_from_string(const std::string& s) {
  if (s == "real") return Label::Real;
  if (s == "fake") return Label::Fake;
  throw std::invalid_argument("unknown label '" + s + "' (expected real|fake)");
}

namespace {
constexpr char kMagic[4] = {'F', 'M', 'F', 'E'};
constexpr uint16_t kVersion = 1;
using Kind = FeatureIoError::Kind;
}  // namespace

void write_feature_file(const std::string& path, const Tensor& features) {
  if (features.rank() != 2 || features.shape[0] < 1 || features.shape[1] < 1)
    throw std::invalid_argument("write_feature_file: need a [T,C] tensor with T,C >= 1");
  ByteWriter w;
  w.bytes(kMagic, 4);
  w.u16(kVersion);
  w.u32(static_cast<uint32_t>(features.shape[0]));
  w.u32(static_cast<uint32_t>(features.shape[1]));
  size_t payload_at = w.buf.size();
  for (double v : features.data) w.f64(v);
  w.u32(crc32(w.buf.data() + payload_at, w.buf.size() - payload_at));
  write_file_bytes(path, w.buf.data(), w.buf.size());
}

Tensor read_feature_file(const std::string& path) {
  std::vector<unsigned char> raw = read_file_bytes(path);
  if (raw.size() < 4) throw FeatureIoError(Kind::Truncated, path + ": shorter than the magic");
  if (std::memcmp(raw.data(), kMagic, 4) != 0)
    throw FeatureIoError(Kind::BadMagic, path + ": bad magic");
  if (raw.size() < 14) throw FeatureIoError(Kind::Truncated, path + ": truncated header");
  ByteReader r(raw.data() + 4, raw.size() - 4);
  uint16_t version = r.u16();
  if (version != kVersion)
    throw FeatureIoError(Kind::BadVersion, path + ": unsupported version " + std::to_string(version));
  uint32_t T = r.u32();
  uint32_t C = r.u32();
  if (T < 1 || C < 1)
    throw FeatureIoError(Kind::ShapeMismatch, path + ": zero dimension in header");
  uint64_t payload = uint64_t(T) * C * 8;
  if (raw.size() < 14 + payload + 4)
    throw FeatureIoError(Kind::Truncated, path + ": payload shorter than the header promises");
  if (raw.size() > 14 + payload + 4)
    throw FeatureIoError(Kind::ShapeMismatch, path + ": trailing bytes after payload");
  uint32_t want_crc = crc32(raw.data() + 14, payload);
  ByteReader tail(raw.data() + 14 + payload, 4);
  if (tail.u32() != want_crc)
    throw FeatureIoError(Kind::ChecksumMismatch, path + ": payload checksum mismatch");
  Tensor out({static_cast<int>(T), static_cast<int>(C)});
  for (double& v : out.data) v = r.f64();
  return out;
}

double Manifest::duration_s(int i) const {
  return double(entries[static_cast<size_t>(i)].T) / double(frame_rate);
}

std::string Manifest::resolve(int i) const {
  const std::string& rel = entries[static_cast<size_t>(i)].path;
  if (dir.empty()) return rel;
  return dir + "/" + rel;
}

void write_manifest(const std::string& path, const Manifest& mf) {
  std::string out = "#fmfe-manifest v1 frame_rate=" + std::to_string(mf.frame_rate) + "\n";
  for (const ManifestEntry& e : mf.entries) {
    out += e.id + "\t" + e.path + "\t" + label_to_string(e.label) + "\t" +
           std::to_string(e.T) + "\t" + std::to_string(e.C) + "\n";
  }
  write_file_bytes(path, out.data(), out.size());
}

namespace {

int parse_manifest_int(const std::string& where, const std::string& v) {
  char* end = nullptr;
  long x = std::strtol(v.c_str(), &end, 10);
  if (v.empty() || end != v.c_str() + v.size())
    throw std::runtime_error(where + ": expected an integer, got '" + v + "'");
  return static_cast<int>(x);
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  size_t pos = 0;
  while (true) {
    size_t tab = line.find('\t', pos);
    if (tab == std::string::npos) {
      out.push_back(line.substr(pos));
      return out;
    }
    out.push_back(line.substr(pos, tab - pos));
    pos = tab + 1;
  }
}

}  // namespace

Manifest read_manifest(const std::string& path) {
  std::vector<unsigned char> raw = read_file_bytes(path);
  std::string text(raw.begin(), raw.end());
  Manifest mf;
  std::filesystem::path p(path);
  mf.dir = p.has_parent_path() ? p.parent_path().string() : std::string();

  size_t pos = 0;
  int lineno = 0;
  bool have_header = false;
  while (pos < text.size()) {
    size_t nl = text.find('\n', pos);
    std::string line = text.substr(pos, nl == std::string::npos ? std::string::npos : nl - pos);
    pos = nl == std::string::npos ? text.size() : nl + 1;
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (!have_header) {
      const std::string prefix = "#fmfe-manifest v1 frame_rate=";
      if (line.rfind(prefix, 0) != 0)
        throw std::runtime_error(path + ": missing or malformed manifest header");
      std::string fr = line.substr(prefix.size());
      char* end = nullptr;
      long v = std::strtol(fr.c_str(), &end, 10);
      if (fr.empty() || end != fr.c_str() + fr.size() || v < 1)
        throw std::runtime_error(path + ": bad frame_rate in header");
      mf.frame_rate = static_cast<int>(v);
      have_header = true;
      continue;
    }
    std::vector<std::string> f = split_tabs(line);
    if (f.size() != 5)
      throw std::runtime_error(path + " line " + std::to_string(lineno) +
                               ": expected id<TAB>path<TAB>label<TAB>T<TAB>C");
    ManifestEntry e;
    e.id = f[0];
    e.path = f[1];
    const std::string where = path + " line " + std::to_string(lineno);
    e.label = label_from_string(f[2]);
    e.T = parse_manifest_int(where, f[3]);
    e.C = parse_manifest_int(where, f[4]);
    if (e.T < 1 || e.C < 1)
      throw std::runtime_error(path + " line " + std::to_string(lineno) + ": bad shape");
    mf.entries.push_back(std::move(e));
  }
  if (!have_header) throw std::runtime_error(path + ": empty manifest (no header)");
  return mf;
}

FeatureRecord load_record(const Manifest& mf, int i) {
  const ManifestEntry& e = mf.entries[static_cast<size_t>(i)];
  FeatureRecord rec;
  rec.id = e.id;
  rec.label = e.label;
  rec.features = read_feature_file(mf.resolve(i));
  if (rec.features.shape[0] != e.T || rec.features.shape[1] != e.C)
    throw FeatureIoError(Kind::ShapeMismatch,
                         e.id + ": manifest says " + std::to_string(e.T) + "x" +
                             std::to_string(e.C) + ", file has " + rec.features.shape_str());
  return rec;
}

double ar2_stationary_variance(double phi1, double phi2, double noise_var) {
  double denom = (1.0 + phi2) * ((1.0 - phi2) * (1.0 - phi2) - phi1 * phi1);
  if (denom <= 0.0) throw std::invalid_argument("ar2_stationary_variance: non-stationary coefficients");
  return noise_var * (1.0 - phi2) / denom;
}

SynthUtterance gen_ar2_utterance(int T, int C, uint64_t useed) {
  if (T < 1 || C < 1) throw std::invalid_argument("gen_ar2_utterance: T and C must be >= 1");
  Rng rng(useed);
  // complex pole pair r*exp(+-i w); w is the per-utterance spectral tilt.
  // The band is narrow and sits well below the artifact tone, so one fixed
  // whitening filter works across utterances and the high end of the
  // spectrum stays quiet relative to the stationary std.
  double r = rng.uniform(0.94, 0.97);
  double w = rng.uniform(0.08, 0.20);
  SynthUtterance u;
  u.phi1 = 2.0 * r * std::cos(w);
  u.phi2 = -r * r;
  u.stationary_var = ar2_stationary_variance(u.phi1, u.phi2, 1.0);
  u.features = Tensor({T, C});
  const int burn = 128;
  for (int c = 0; c < C; ++c) {
    double x1 = 0.0, x2 = 0.0;
    for (int t = -burn; t < T; ++t) {
      double x = u.phi1 * x1 + u.phi2 * x2 + rng.normal();
      x2 = x1;
      x1 = x;
      if (t >= 0) u.features.at(t, c) = x;
    }
  }
  return u;
}

void apply_artifact(Tensor& x, double amp, double window_frac, double chan_frac, Rng& rng) {
  const int T = x.shape[0], C = x.shape[1];
  int L = std::clamp(static_cast<int>(std::ceil(window_frac * T)), 1, T);
  int K = std::clamp(static_cast<int>(std::ceil(chan_frac * C)), 1, C);
  int t0 = rng.uniform_int(0, T - L);
  std::vector<int> chans(C);
  std::iota(chans.begin(), chans.end(), 0);
  for (int i = 0; i < K; ++i) std::swap(chans[i], chans[rng.uniform_int(i, C - 1)]);
  double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  // tone sits far above the AR tilt band but off Nyquist, so the random
  // phase never cancels it at integer frames
  const double w_art = 2.4;
  for (int t = t0; t < t0 + L; ++t) {
    double s = amp * std::sin(w_art * (t - t0) + phase);
    for (int i = 0; i < K; ++i) x.at(t, chans[i]) += s;
  }
}

Manifest synth_dataset(const SynthSpec& spec, const std::string& out_dir) {
  if (spec.n_real < 1 || spec.n_fake < 1)
    throw std::invalid_argument("synth_dataset: counts must be >= 1");
  if (spec.C < 1 || spec.frame_rate < 1)
    throw std::invalid_argument("synth_dataset: C and frame_rate must be >= 1");
  if (!(spec.dur_lo > 0.0) || spec.dur_hi < spec.dur_lo)
    throw std::invalid_argument("synth_dataset: degenerate duration range");
  std::filesystem::create_directories(out_dir);

  Manifest mf;
  mf.frame_rate = spec.frame_rate;
  mf.dir = out_dir;

  auto pair_seed = [&](int i) { return mix64(spec.seed ^ (0x5EEDF00Dull + uint64_t(i))); };
  auto draw_T = [&](uint64_t ps) {
    Rng r(mix64(ps ^ 0x11));
    double dur = r.uniform(spec.dur_lo, spec.dur_hi);
    return std::max(1, static_cast<int>(std::lround(dur * spec.frame_rate)));
  };

  char name[64];
  for (int i = 0; i < spec.n_real; ++i) {
    uint64_t ps = pair_seed(i);
    SynthUtterance u = gen_ar2_utterance(draw_T(ps), spec.C, mix64(ps ^ 0x22));
    std::snprintf(name, sizeof(name), "real_%05d", i);
    write_feature_file(out_dir + "/" + name + ".fmfe", u.features);
    mf.entries.push_back({name, std::string(name) + ".fmfe", Label::Real,
                          u.features.shape[0], u.features.shape[1]});
  }
  for (int j = 0; j < spec.n_fake; ++j) {
    // paired fakes reuse the counterpart's seed chain, so the AR realization
    // and T match exactly; only the artifact rng is per-fake
    uint64_t ps = spec.paired ? pair_seed(j % spec.n_real) : pair_seed(spec.n_real + j);
    SynthUtterance u = gen_ar2_utterance(draw_T(ps), spec.C, mix64(ps ^ 0x22));
    Rng art(mix64(spec.seed ^ (0xA27EFAC7ull + uint64_t(j))));
    apply_artifact(u.features, spec.artifact_amp * std::sqrt(u.stationary_var),
                   spec.artifact_window_frac, spec.artifact_chan_frac, art);
    std::snprintf(name, sizeof(name), "fake_%05d", j);
    write_feature_file(out_dir + "/" + name + ".fmfe", u.features);
    mf.entries.push_back({name, std::string(name) + ".fmfe", Label::Fake,
                          u.features.shape[0], u.features.shape[1]});
  }
  write_manifest(out_dir + "/manifest.tsv", mf);
  return mf;
}

std::vector<std::vector<int>> bucket_by_duration(const Manifest& mf, const std::vector<double>& edges) {
  if (!std::is_sorted(edges.begin(), edges.end()))
    throw std::invalid_argument("bucket_by_duration: edges must be sorted");
  std::vector<std::vector<int>> buckets(edges.size() + 1);
  for (int i = 0; i < static_cast<int>(mf.entries.size()); ++i) {
    double d = mf.duration_s(i);
    // upper_bound gives left-closed buckets: d == edge lands at that edge's bucket
    size_t b = std::upper_bound(edges.begin(), edges.end(), d) - edges.begin();
    buckets[b].push_back(i);
  }
  return buckets;
}

std::string bucket_name(const std::vector<double>& edges, int b) {
  auto fmt = [](double v) {
    char buf[32];
    if (v == std::floor(v)) std::snprintf(buf, sizeof(buf), "%d", static_cast<int>(v));
    else std::snprintf(buf, sizeof(buf), "%g", v);
    return std::string(buf);
  };
  if (edges.empty()) return "all";
  if (b == 0) return "<" + fmt(edges[0]) + "s";
  if (b == static_cast<int>(edges.size())) return ">=" + fmt(edges.back()) + "s";
  return fmt(edges[b - 1]) + "-" + fmt(edges[b]) + "s";
}

std::vector<double> default_bucket_edges() { return {3.0, 4.0, 5.0, 6.0}; }

}  // namespace fmkit
