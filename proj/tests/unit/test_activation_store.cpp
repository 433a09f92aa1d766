#include "saev/activation_store.hpp"

#include "test_util.hpp"

#include <doctest.h>
#include <json.hpp>

#include <algorithm>
#include <numeric>
#include <set>

using namespace saev;
using testutil::TempDir;

namespace {

std::uint32_t le32(const std::string& b, std::size_t off) {
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(b[off + i]);
  return v;
}

std::uint64_t le64(const std::string& b, std::size_t off) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(b[off + i]);
  return v;
}

float f32_at(const std::string& b, std::size_t off) {
  std::uint32_t bits = le32(b, off);
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

}  // namespace

TEST_CASE("empty shard is a bare 28-byte header") {
  TempDir tmp;
  write_shard(tmp / "s.bin", std::vector<std::vector<float>>{}, 768, 196, {});
  const std::string b = testutil::slurp(tmp / "s.bin");
  REQUIRE(b.size() == 28);
  CHECK(b.substr(0, 8) == "SAEVACT1");
  CHECK(le32(b, 8) == 1);
  CHECK(le32(b, 12) == 768);
  CHECK(le32(b, 16) == 196);
  CHECK(le64(b, 20) == 0);
}

TEST_CASE("two rows of d=2 occupy bytes 28..44 exactly") {
  TempDir tmp;
  ShardMeta meta{"vit", 11, "toy", 0, 0};
  write_shard(tmp / "s.bin", {{1, 2}, {3, 4}}, 2, 1, meta);
  const std::string b = testutil::slurp(tmp / "s.bin");
  REQUIRE(b.size() == 44);
  CHECK(le64(b, 20) == 2);
  const float want[] = {1, 2, 3, 4};
  for (int i = 0; i < 4; ++i) CHECK(f32_at(b, 28 + 4 * i) == want[i]);

  auto side = nlohmann::json::parse(testutil::slurp(sidecar_path(tmp / "s.bin")));
  CHECK(side["model"] == "vit");
  CHECK(side["layer"] == 11);
  CHECK(side["dataset"] == "toy");
  CHECK(side["shard_index"] == 0);
  CHECK(side["row_offset"] == 0);

  auto store = ActivationStore::open(tmp.path());
  CHECK(store.n_rows() == 2);
  RowMatrix all = store.read_range(0, 2);
  CHECK(all(0, 0) == 1);
  CHECK(all(1, 1) == 4);
}

TEST_CASE("cache sizing for 1.2M images of 196 x 768 floats") {
  constexpr std::uint64_t bytes = activation_cache_bytes(1'200'000, 196, 768);
  static_assert(bytes == 722'534'400'000ULL);
  CHECK(static_cast<double>(bytes) / 1e9 == doctest::Approx(722.5).epsilon(1e-4));
}

TEST_CASE("write then read is bit-identical across shards") {
  TempDir tmp;
  RowMatrix a = testutil::random_rows(7, 5, 1), b = testutil::random_rows(4, 5, 2);
  write_shard(tmp / "shard_00000.bin", a, 1, {"m", 0, "ds", 0, 0});
  write_shard(tmp / "shard_00001.bin", b, 1, {"m", 0, "ds", 1, 7});
  auto store = ActivationStore::open(tmp.path());
  REQUIRE(store.n_rows() == 11);
  CHECK(store.n_shards() == 2);
  RowMatrix all = store.read_range(0, 11);
  CHECK(std::memcmp(all.data(), a.data(), sizeof(float) * a.size()) == 0);
  CHECK(std::memcmp(all.data() + a.size(), b.data(), sizeof(float) * b.size()) == 0);
}

TEST_CASE("writer rejects ragged and non-finite rows") {
  TempDir tmp;
  CHECK_THROWS_AS(write_shard(tmp / "a.bin", {{1, 2}, {3}}, 2, 1, {}), ArgumentError);
  CHECK_THROWS_AS(write_shard(tmp / "b.bin", {{1, std::numeric_limits<float>::quiet_NaN()}}, 2, 1, {}),
                  ArgumentError);
  CHECK_THROWS_AS(write_shard(tmp / "c.bin", {{1, std::numeric_limits<float>::infinity()}}, 2, 1, {}),
                  ArgumentError);
}

TEST_CASE("open rejects bad magic, truncation and inconsistent shards") {
  SUBCASE("bad magic") {
    TempDir tmp;
    write_shard(tmp / "s.bin", {{1, 2}}, 2, 1, {});
    std::string b = testutil::slurp(tmp / "s.bin");
    b.replace(0, 8, "XXXXXXXX");
    testutil::spit(tmp / "s.bin", b);
    CHECK_THROWS_WITH_AS(ActivationStore::open(tmp.path()), doctest::Contains("bad magic"), FormatError);
  }
  SUBCASE("bad version") {
    TempDir tmp;
    write_shard(tmp / "s.bin", {{1, 2}}, 2, 1, {});
    std::string b = testutil::slurp(tmp / "s.bin");
    b[8] = 9;
    testutil::spit(tmp / "s.bin", b);
    CHECK_THROWS_AS(ActivationStore::open(tmp.path()), FormatError);
  }
  SUBCASE("truncated") {
    TempDir tmp;
    write_shard(tmp / "s.bin", {{1, 2}, {3, 4}}, 2, 1, {});
    std::string b = testutil::slurp(tmp / "s.bin");
    testutil::spit(tmp / "s.bin", b.substr(0, b.size() - 3));
    CHECK_THROWS_WITH_AS(ActivationStore::open(tmp.path()), doctest::Contains("truncated"), FormatError);
  }
  SUBCASE("inconsistent dimension") {
    TempDir tmp;
    write_shard(tmp / "a.bin", testutil::random_rows(1, 768, 1), 1, {"m", 0, "ds", 0, 0});
    write_shard(tmp / "b.bin", testutil::random_rows(1, 512, 1), 1, {"m", 0, "ds", 1, 1});
    CHECK_THROWS_WITH_AS(ActivationStore::open(tmp.path()), doctest::Contains("inconsistent dimension"),
                         FormatError);
  }
  SUBCASE("empty directory") {
    TempDir tmp;
    CHECK_THROWS(ActivationStore::open(tmp.path()));
  }
}

TEST_CASE("PatchRef maps bijectively onto global rows") {
  TempDir tmp;
  write_shard(tmp / "s.bin", testutil::random_rows(12, 3, 4), 4, {});
  auto store = ActivationStore::open(tmp.path());
  for (std::uint64_t g = 0; g < 12; ++g) {
    PatchRef r = store.ref(g);
    CHECK(r.image_id == g / 4);
    CHECK(r.patch_idx == g % 4);
    CHECK(store.global_index(r) == g);
  }
  CHECK_THROWS(store.global_index({0, 4}));
}

TEST_CASE("shuffled batches partition rows and are seed-deterministic") {
  TempDir tmp;
  write_shard(tmp / "s.bin", testutil::random_rows(5, 2, 3), 1, {});
  auto store = ActivationStore::open(tmp.path());

  auto collect = [&](std::uint64_t seed, std::size_t batch) {
    ShuffledBatches sb(store, batch, seed);
    std::vector<std::vector<std::uint64_t>> out;
    while (auto b = sb.next()) {
      // rows match their indices
      for (std::size_t i = 0; i < b->indices.size(); ++i) {
        std::vector<float> row(2);
        store.read_row(b->indices[i], row);
        CHECK(b->rows(static_cast<Eigen::Index>(i), 0) == row[0]);
        CHECK(b->refs[i] == store.ref(b->indices[i]));
      }
      out.push_back(b->indices);
    }
    return out;
  };
  auto run = collect(7, 2);
  REQUIRE(run.size() == 3);
  CHECK(run[0].size() == 2);
  CHECK(run[1].size() == 2);
  CHECK(run[2].size() == 1);
  std::vector<std::uint64_t> flat;
  for (auto& b : run) flat.insert(flat.end(), b.begin(), b.end());
  std::sort(flat.begin(), flat.end());
  CHECK(flat == std::vector<std::uint64_t>{0, 1, 2, 3, 4});
  CHECK(collect(7, 2) == run);
}

TEST_CASE("different seeds give different permutations") {
  TempDir tmp;
  write_shard(tmp / "s.bin", testutil::random_rows(100, 1, 3), 1, {});
  auto store = ActivationStore::open(tmp.path());
  ShuffledBatches a(store, 100, 1), b(store, 100, 2);
  CHECK(a.permutation() != b.permutation());
  auto sorted = a.permutation();
  std::sort(sorted.begin(), sorted.end());
  std::vector<std::uint64_t> iota(100);
  std::iota(iota.begin(), iota.end(), 0);
  CHECK(sorted == iota);
}

TEST_CASE("fit_normalizer") {
  TempDir tmp;
  SUBCASE("hand mean") {
    write_shard(tmp / "s.bin", {{0, 0}, {2, 4}}, 2, 1, {});
    auto store = ActivationStore::open(tmp.path());
    Normalizer n = fit_normalizer(store, 2, 0);
    CHECK(n.mu[0] == 1.0f);
    CHECK(n.mu[1] == 2.0f);
    // clamp: asking for more rows than exist uses all of them
    Normalizer big = fit_normalizer(store, 524288, 0);
    CHECK(big.mu == n.mu);
  }
  SUBCASE("identical rows") {
    write_shard(tmp / "s.bin", {{0.3f, -7.5f}, {0.3f, -7.5f}, {0.3f, -7.5f}}, 2, 1, {});
    auto store = ActivationStore::open(tmp.path());
    Normalizer n = fit_normalizer(store, 2, 5);
    CHECK(n.mu[0] == 0.3f);
    CHECK(n.mu[1] == -7.5f);
  }
}

TEST_CASE("normalize and denormalize") {
  Normalizer n = Normalizer::identity(2);
  const float x[] = {3, 4};
  Normalized r = normalize(n, x);
  CHECK(r.scale == 5.0f);
  CHECK(r.x[0] == doctest::Approx(0.6));
  CHECK(r.x[1] == doctest::Approx(0.8));
  CHECK_FALSE(r.degenerate);
  Eigen::VectorXf back = denormalize(n, {r.x.data(), 2}, r.scale);
  CHECK(back[0] == doctest::Approx(3.0));
  CHECK(back[1] == doctest::Approx(4.0));

  Normalizer m{Eigen::Vector2f(1.5f, -2.0f), Normalizer::kDefaultEps, 2};
  const float at_mu[] = {1.5f, -2.0f};
  Normalized deg = normalize(m, at_mu);
  CHECK(deg.degenerate);
  CHECK(deg.scale == static_cast<float>(Normalizer::kDefaultEps));
  CHECK(deg.x.isZero());

  const float zero[] = {0, 0};
  Eigen::VectorXf mu = denormalize(m, zero, 1.0f);
  CHECK(mu == m.mu);
  CHECK_THROWS_AS(denormalize(m, zero, 0.0f), ArgumentError);
  CHECK_THROWS_AS(denormalize(m, zero, -1.0f), ArgumentError);
}

TEST_CASE("normalize round-trip on 1000 random vectors") {
  std::mt19937_64 rng(11);
  std::normal_distribution<float> nd(0, 3);
  Normalizer n{Eigen::VectorXf::Zero(16), Normalizer::kDefaultEps, 0};
  for (int j = 0; j < 16; ++j) n.mu[j] = nd(rng);
  double worst_rel = 0, worst_unit = 0;
  for (int i = 0; i < 1000; ++i) {
    Eigen::VectorXf x(16);
    for (int j = 0; j < 16; ++j) x[j] = nd(rng);
    Normalized r = normalize(n, {x.data(), 16});
    worst_unit = std::max(worst_unit, std::abs(static_cast<double>(r.x.norm()) - 1.0));
    Eigen::VectorXf back = denormalize(n, {r.x.data(), 16}, r.scale);
    worst_rel = std::max(worst_rel, static_cast<double>((back - x).norm() / x.norm()));
  }
  CHECK(worst_unit <= 1e-6);
  CHECK(worst_rel < 1e-5);
}

TEST_CASE("normalize_rows agrees with normalize and counts degenerates") {
  Normalizer n{Eigen::Vector3f(1, 1, 1), Normalizer::kDefaultEps, 0};
  RowMatrix rows(3, 3);
  rows << 1, 1, 1, 2, 3, 4, -1, 0, 5;
  RowMatrix copy = rows;
  Eigen::VectorXf scales;
  CHECK(normalize_rows(n, rows, scales) == 1);
  for (int i = 0; i < 3; ++i) {
    Normalized r = normalize(n, {copy.row(i).data(), 3});
    CHECK(scales[i] == r.scale);
    for (int j = 0; j < 3; ++j) CHECK(rows(i, j) == r.x[j]);
  }
}

TEST_CASE("fingerprint changes with the data layout") {
  TempDir a, b;
  write_shard(a / "s.bin", {{1, 2}}, 2, 1, {});
  write_shard(b / "s.bin", {{1, 2}, {3, 4}}, 2, 1, {});
  auto sa = ActivationStore::open(a.path());
  auto sb = ActivationStore::open(b.path());
  CHECK(sa.fingerprint().size() == 64);
  CHECK(sa.fingerprint() != sb.fingerprint());
  CHECK(sa.fingerprint() == ActivationStore::open(a.path()).fingerprint());
}
