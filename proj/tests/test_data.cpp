#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <set>

#include "doctest.h"
#include "fmkit/data.hpp"
#include "fmkit/io_util.hpp"
#include "testutil.hpp"

using namespace fmkit;
using testutil::max_abs_diff;

namespace fs = std::filesystem;

struct TmpDir {
  fs::path p;
  explicit TmpDir(const std::string& name) : p(fs::temp_directory_path() / name) {
    fs::remove_all(p);
    fs::create_directories(p);
  }
  ~TmpDir() { fs::remove_all(p); }
  std::string file(const std::string& n) const { return (p / n).string(); }
};

TEST_CASE("feature file: 7x5 round-trip is bit-exact") {
  TmpDir d("fmkit_data_rt");
  Rng rng(1);
  Tensor x = randn({7, 5}, rng);
  std::string path = d.file("x.fmfe");
  write_feature_file(path, x);
  Tensor y = read_feature_file(path);
  REQUIRE(y.shape == x.shape);
  for (int64_t i = 0; i < x.numel(); ++i) CHECK_EQ(x.data[i], y.data[i]);

  // header(14) + T*C*8 payload + crc(4)
  CHECK_EQ(fs::file_size(path), 14u + 7u * 5u * 8u + 4u);
}

TEST_CASE("feature file: property round-trip over random shapes") {
  TmpDir d("fmkit_data_prop");
  Rng rng(2);
  for (int rep = 0; rep < 25; ++rep) {
    int T = rng.uniform_int(1, 512);
    int C = rng.uniform_int(1, 64);
    Tensor x = randn({T, C}, rng);
    std::string path = d.file("p.fmfe");
    write_feature_file(path, x);
    Tensor y = read_feature_file(path);
    REQUIRE(y.shape == x.shape);
    bool exact = true;
    for (int64_t i = 0; i < x.numel(); ++i) exact = exact && x.data[i] == y.data[i];
    CHECK(exact);
  }
}

TEST_CASE("feature file: each failure mode is a distinct error kind") {
  TmpDir d("fmkit_data_err");
  Rng rng(3);
  Tensor x = randn({6, 4}, rng);
  std::string path = d.file("e.fmfe");
  write_feature_file(path, x);
  auto raw = read_file_bytes(path);

  auto expect_kind = [&](const std::vector<unsigned char>& bytes, FeatureIoError::Kind k) {
    write_file_bytes(path, bytes.data(), bytes.size());
    try {
      read_feature_file(path);
      FAIL("expected a FeatureIoError");
    } catch (const FeatureIoError& e) {
      CHECK(e.kind == k);
    }
  };

  auto bad_magic = raw;
  bad_magic[1] = 'X';
  expect_kind(bad_magic, FeatureIoError::Kind::BadMagic);

  auto bad_version = raw;
  bad_version[4] = 9;
  expect_kind(bad_version, FeatureIoError::Kind::BadVersion);

  for (size_t cut : {size_t(2), size_t(10), raw.size() / 2, raw.size() - 1})
    expect_kind(std::vector<unsigned char>(raw.begin(), raw.begin() + cut),
                FeatureIoError::Kind::Truncated);

  auto extra = raw;
  extra.push_back(0);
  expect_kind(extra, FeatureIoError::Kind::ShapeMismatch);

  auto corrupt = raw;
  corrupt[20] ^= 0x40;  // inside the payload
  expect_kind(corrupt, FeatureIoError::Kind::ChecksumMismatch);
}

TEST_CASE("manifest: round-trip, labels and resolution") {
  TmpDir d("fmkit_data_mf");
  Manifest mf;
  mf.frame_rate = 50;
  mf.entries.push_back({"a", "a.fmfe", Label::Real, 150, 8});
  mf.entries.push_back({"b", "sub/b.fmfe", Label::Fake, 200, 8});
  std::string path = d.file("manifest.tsv");
  write_manifest(path, mf);
  Manifest back = read_manifest(path);
  CHECK_EQ(back.frame_rate, 50);
  REQUIRE_EQ(back.entries.size(), 2u);
  CHECK_EQ(back.entries[0].id, "a");
  CHECK(back.entries[0].label == Label::Real);
  CHECK(back.entries[1].label == Label::Fake);
  CHECK_EQ(back.entries[1].T, 200);
  CHECK_EQ(back.duration_s(0), 3.0);
  CHECK_EQ(back.resolve(1), d.file("sub/b.fmfe"));
}

TEST_CASE("manifest: malformed inputs raise explicit errors") {
  TmpDir d("fmkit_data_mfbad");
  std::string path = d.file("m.tsv");

  auto write_text = [&](const std::string& s) { write_file_bytes(path, s.data(), s.size()); };

  write_text("id\tp\treal\t5\t4\n");  // no header line
  CHECK_THROWS_WITH_AS(read_manifest(path), doctest::Contains("header"), std::runtime_error);

  write_text("#fmfe-manifest v1 frame_rate=50\nid\tp\t5\t4\n");  // missing label column
  CHECK_THROWS_WITH_AS(read_manifest(path), doctest::Contains("label"), std::runtime_error);

  write_text("#fmfe-manifest v1 frame_rate=50\nid\tp\tbogus\t5\t4\n");
  CHECK_THROWS_AS(read_manifest(path), std::invalid_argument);

  write_text("#fmfe-manifest v1 frame_rate=zero\n");
  CHECK_THROWS_WITH_AS(read_manifest(path), doctest::Contains("frame_rate"), std::runtime_error);

  write_text("#fmfe-manifest v1 frame_rate=50\nid\tp\treal\t5\tfour\n");
  CHECK_THROWS_WITH_AS(read_manifest(path), doctest::Contains("integer"), std::runtime_error);
}

TEST_CASE("load_record checks the manifest header against the file") {
  TmpDir d("fmkit_data_rec");
  Rng rng(4);
  Tensor x = randn({9, 3}, rng);
  write_feature_file(d.file("x.fmfe"), x);
  Manifest mf;
  mf.dir = d.p.string();
  mf.entries.push_back({"x", "x.fmfe", Label::Fake, 9, 3});
  FeatureRecord rec = load_record(mf, 0);
  CHECK_EQ(rec.id, "x");
  CHECK(rec.label == Label::Fake);
  CHECK_LT(max_abs_diff(rec.features, x), 1e-15);

  mf.entries[0].T = 10;
  try {
    load_record(mf, 0);
    FAIL("expected shape mismatch");
  } catch (const FeatureIoError& e) {
    CHECK(e.kind == FeatureIoError::Kind::ShapeMismatch);
  }
}

TEST_CASE("ar2 stationary variance formula and generator agree") {
  // direct formula checks against simple cases first
  // AR(1)-like: phi2 = 0 -> gamma0 = s2 / (1 - phi1^2)
  CHECK_LT(std::fabs(ar2_stationary_variance(0.5, 0.0, 1.0) - 1.0 / 0.75), 1e-12);
  CHECK_LT(std::fabs(ar2_stationary_variance(0.0, 0.0, 2.0) - 2.0), 1e-12);

  // 1,000 utterances: mean second moment within 20% of the closed form
  double ratio_sum = 0.0;
  int n = 0;
  for (int i = 0; i < 1000; ++i) {
    SynthUtterance u = gen_ar2_utterance(160, 4, mix64(0xF00 + i));
    for (int c = 0; c < 4; ++c) {
      double m2 = 0.0;
      for (int t = 0; t < 160; ++t) m2 += u.features.at(t, c) * u.features.at(t, c);
      m2 /= 160.0;
      ratio_sum += m2 / u.stationary_var;
      ++n;
    }
  }
  double mean_ratio = ratio_sum / n;
  CHECK_GT(mean_ratio, 0.8);
  CHECK_LT(mean_ratio, 1.2);
}

TEST_CASE("generator is deterministic per seed") {
  SynthUtterance a = gen_ar2_utterance(50, 6, 77);
  SynthUtterance b = gen_ar2_utterance(50, 6, 77);
  CHECK_EQ(max_abs_diff(a.features, b.features), 0.0);
  SynthUtterance c = gen_ar2_utterance(50, 6, 78);
  CHECK_GT(max_abs_diff(a.features, c.features), 1e-6);
}

TEST_CASE("apply_artifact touches the advertised window and channel count only") {
  Rng rng(5);
  Tensor x({40, 10}, 0.0);
  Tensor before = x;
  Rng art(9);
  apply_artifact(x, 0.5, 0.1, 0.1, art);
  int L = 4, K = 1;  // ceil(0.1*40), ceil(0.1*10)
  std::set<int> rows, cols;
  int changed = 0;
  for (int t = 0; t < 40; ++t)
    for (int c = 0; c < 10; ++c)
      if (x.at(t, c) != before.at(t, c)) {
        rows.insert(t);
        cols.insert(c);
        ++changed;
      }
  CHECK_LE(static_cast<int>(rows.size()), L);
  CHECK_EQ(static_cast<int>(cols.size()), K);
  CHECK_GT(changed, 0);
  CHECK_EQ(*rows.rbegin() - *rows.begin() + 1, static_cast<int>(rows.size()));  // contiguous
  // amplitude bound
  for (double v : x.data) CHECK_LE(std::fabs(v), 0.5 + 1e-12);
}

TEST_CASE("synth_dataset: counts, balance, determinism") {
  TmpDir d1("fmkit_synth_a");
  TmpDir d2("fmkit_synth_b");
  SynthSpec spec;
  spec.n_real = 6;
  spec.n_fake = 4;
  spec.C = 5;
  spec.dur_lo = 0.2;
  spec.dur_hi = 0.6;
  spec.seed = 123;
  Manifest m1 = synth_dataset(spec, d1.p.string());
  Manifest m2 = synth_dataset(spec, d2.p.string());
  REQUIRE_EQ(m1.entries.size(), 10u);
  int nr = 0, nf = 0;
  for (const auto& e : m1.entries) (e.label == Label::Real ? nr : nf)++;
  CHECK_EQ(nr, 6);
  CHECK_EQ(nf, 4);

  // same seed, different directory: identical bytes file by file
  for (size_t i = 0; i < m1.entries.size(); ++i) {
    auto b1 = read_file_bytes(m1.resolve(static_cast<int>(i)));
    auto b2 = read_file_bytes(m2.resolve(static_cast<int>(i)));
    CHECK(b1 == b2);
  }
  auto mf1 = read_file_bytes(d1.file("manifest.tsv"));
  auto mf2 = read_file_bytes(d2.file("manifest.tsv"));
  CHECK(mf1 == mf2);

  SynthSpec other = spec;
  other.seed = 124;
  TmpDir d3("fmkit_synth_c");
  Manifest m3 = synth_dataset(other, d3.p.string());
  Tensor a = load_record(m1, 0).features;
  Tensor b = load_record(m3, 0).features;
  bool differs = a.shape != b.shape || max_abs_diff(a, b) > 1e-9;
  CHECK(differs);
}

TEST_CASE("synth_dataset: paired fakes differ only inside the artifact region") {
  TmpDir d("fmkit_synth_pair");
  SynthSpec spec;
  spec.n_real = 3;
  spec.n_fake = 3;
  spec.C = 10;
  spec.dur_lo = 0.5;
  spec.dur_hi = 1.0;
  spec.paired = true;
  spec.seed = 9;
  Manifest mf = synth_dataset(spec, d.p.string());
  for (int j = 0; j < 3; ++j) {
    Tensor real = load_record(mf, j).features;
    Tensor fake = load_record(mf, 3 + j).features;
    REQUIRE(real.shape == fake.shape);
    int T = real.shape[0], C = real.shape[1];
    int L = static_cast<int>(std::ceil(0.1 * T));
    int K = static_cast<int>(std::ceil(0.1 * C));
    std::set<int> rows, cols;
    for (int t = 0; t < T; ++t)
      for (int c = 0; c < C; ++c)
        if (real.at(t, c) != fake.at(t, c)) {
          rows.insert(t);
          cols.insert(c);
        }
    CHECK_GT(rows.size(), 0u);
    CHECK_LE(static_cast<int>(rows.size()), L);
    CHECK_LE(static_cast<int>(cols.size()), K);
    CHECK_EQ(*rows.rbegin() - *rows.begin() + 1, static_cast<int>(rows.size()));
  }
}

TEST_CASE("synth_dataset: artifact amplitude 0 makes paired fakes identical") {
  TmpDir d("fmkit_synth_amp0");
  SynthSpec spec;
  spec.n_real = 2;
  spec.n_fake = 2;
  spec.C = 4;
  spec.dur_lo = 0.3;
  spec.dur_hi = 0.5;
  spec.paired = true;
  spec.artifact_amp = 0.0;
  Manifest mf = synth_dataset(spec, d.p.string());
  for (int j = 0; j < 2; ++j) {
    Tensor real = load_record(mf, j).features;
    Tensor fake = load_record(mf, 2 + j).features;
    CHECK_EQ(max_abs_diff(real, fake), 0.0);
  }
}

TEST_CASE("synth_dataset rejects degenerate specs") {
  SynthSpec spec;
  spec.n_real = 0;
  CHECK_THROWS_AS(synth_dataset(spec, "unused"), std::invalid_argument);
  spec.n_real = 1;
  spec.dur_hi = 0.5;
  spec.dur_lo = 1.0;
  CHECK_THROWS_AS(synth_dataset(spec, "unused"), std::invalid_argument);
}

TEST_CASE("bucket_by_duration: boundaries, totals, names") {
  Manifest mf;
  mf.frame_rate = 50;
  auto add = [&](int T) {
    mf.entries.push_back({"u" + std::to_string(mf.entries.size()), "p", Label::Real, T, 4});
  };
  add(100);  // 2.0 s -> bucket 0
  add(150);  // 3.0 s -> bucket 1 (left-closed)
  add(199);  // 3.98  -> bucket 1
  add(225);  // 4.5   -> bucket 2
  add(300);  // 6.0   -> bucket 4
  add(500);  // 10.0  -> bucket 4
  auto edges = default_bucket_edges();
  auto buckets = bucket_by_duration(mf, edges);
  REQUIRE_EQ(buckets.size(), 5u);
  CHECK_EQ(buckets[0], std::vector<int>{0});
  CHECK_EQ(buckets[1], (std::vector<int>{1, 2}));
  CHECK_EQ(buckets[2], std::vector<int>{3});
  CHECK(buckets[3].empty());
  CHECK_EQ(buckets[4], (std::vector<int>{4, 5}));
  size_t total = 0;
  for (const auto& b : buckets) total += b.size();
  CHECK_EQ(total, mf.entries.size());

  CHECK_EQ(bucket_name(edges, 0), "<3s");
  CHECK_EQ(bucket_name(edges, 1), "3-4s");
  CHECK_EQ(bucket_name(edges, 4), ">=6s");

  Manifest empty;
  auto eb = bucket_by_duration(empty, edges);
  for (const auto& b : eb) CHECK(b.empty());
}
