#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "ifnet/grad_check.hpp"
#include "ifnet/net.hpp"
#include "test_util.hpp"

using namespace ifnet;

namespace {

Patch fixture_patch(int variant) {
  Patch p;
  for (std::size_t y = 0; y < kPatchSide; ++y)
    for (std::size_t x = 0; x < kPatchSide; ++x)
      p.pixels[y * kPatchSide + x] =
          static_cast<std::uint8_t>((x * 7 + y * 13 + variant * 31 + (x * y) % 17) % 256);
  return p;
}

std::vector<Patch> fixture_patches(std::size_t n) {
  std::vector<Patch> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(fixture_patch(static_cast<int>(i)));
  return out;
}

NetConfig toy_config(std::size_t dim = 4) {
  auto cfg = NetConfig::toy();
  cfg.descriptor_dim = dim;
  cfg.rng_seed = 7;
  return cfg;
}

// Conv weights: Cout*Cin*9; projection: dim*(C*s*s) + dim.
std::size_t expected_parameter_count(const NetConfig& cfg) {
  std::size_t n = 0, in = 1;
  for (const auto& s : cfg.channel_plan) {
    n += s.channels * in * 9;
    in = s.channels;
  }
  const std::size_t side = cfg.input_side / cfg.downsampling();
  return n + cfg.descriptor_dim * in * side * side + cfg.descriptor_dim;
}

template <typename T>
void check_unit_rows(const DescriptorBatch<T>& batch) {
  for (std::size_t i = 0; i < batch.count; ++i) {
    double sq = 0;
    for (T v : batch.row(i)) sq += double(v) * double(v);
    CHECK(std::abs(std::sqrt(sq) - 1.0) < 1e-6);
  }
}

}  // namespace

TEST_CASE("same seed gives bit-identical parameters") {
  Network<float> a(toy_config()), b(toy_config());
  const auto pa = a.parameters();
  const auto pb = b.parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(*pa[i] == *pb[i]);
  CHECK(a.parameter_hash() == b.parameter_hash());

  auto other = toy_config();
  other.rng_seed = 8;
  CHECK(Network<float>(other).parameter_hash() != a.parameter_hash());
}

TEST_CASE("toy network stays under 10k parameters and runs forward") {
  const auto cfg = toy_config(4);
  Network<float> net(cfg);
  CHECK(net.parameter_count() == expected_parameter_count(cfg));
  CHECK(net.parameter_count() == 8600);
  CHECK(net.parameter_count() < 10000);
  const auto d = net.describe(fixture_patches(3));
  CHECK(d.count == 3);
  CHECK(d.dim == 4);
  check_unit_rows(d);
}

TEST_CASE("full-scale plan parameter count") {
  NetConfig cfg;
  Network<float> net(cfg);
  CHECK(net.parameter_count() == expected_parameter_count(cfg));
  CHECK(net.config().channel_plan.size() == 6);
}

TEST_CASE("invalid configurations") {
  auto cfg = toy_config();
  cfg.input_side = 30;
  CHECK_THROWS_AS(Network<float>{cfg}, Error);
  try {
    Network<float> net(cfg);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::InvalidConfig);
  }
  cfg = toy_config(1);
  try {
    Network<float> net(cfg);
    FAIL("expected InvalidConfig");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::InvalidConfig);
  }
  cfg = toy_config();
  cfg.channel_plan.clear();
  CHECK_THROWS_AS(cfg.validate(), Error);
}

TEST_CASE("channel plan text round trip") {
  const auto plan = NetConfig::l2net_plan();
  CHECK(format_channel_plan(plan) == "32/1,32/1,64/2,64/1,128/2,128/1");
  CHECK(parse_channel_plan(format_channel_plan(plan)) == plan);
  CHECK_THROWS_AS(parse_channel_plan("a/1"), Error);
}

TEST_CASE("wrong patch size is rejected") {
  Network<float> net(toy_config());
  std::vector<Patch> patches{Patch(32)};
  try {
    net.describe(patches);
    FAIL("expected WrongPatchSize");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::WrongPatchSize);
  }
}

TEST_CASE("identical patches give identical rows") {
  Network<float> net(toy_config(8));
  std::vector<Patch> patches(4, fixture_patch(3));
  const auto eval = net.describe(patches);
  for (std::size_t i = 1; i < 4; ++i)
    CHECK(std::equal(eval.row(0).begin(), eval.row(0).end(), eval.row(i).begin()));
}

TEST_CASE("rows are unit norm in train and eval, float and double") {
  std::mt19937_64 rng(3);
  std::vector<Patch> patches(6);
  for (auto& p : patches)
    for (auto& v : p.pixels) v = static_cast<std::uint8_t>(rng() % 256);
  patches[5] = Patch();  // constant patch

  Network<float> f(toy_config(16));
  check_unit_rows(f.describe(patches));
  Graph<float> g;
  auto y = f.describe(g, patches, true);
  const auto& v = g.value(y);
  check_unit_rows(DescriptorBatch<float>(6, 16, {v.values().begin(), v.values().end()}));

  Network<double> d(toy_config(16));
  check_unit_rows(d.describe(patches));
}

TEST_CASE("degenerate train-mode batches still give unit rows") {
  Network<double> net(toy_config(16));
  for (const auto& batch : {std::vector<Patch>{fixture_patch(2)},
                            std::vector<Patch>(3, fixture_patch(5)),
                            std::vector<Patch>(2, Patch())}) {
    Graph<double> g;
    auto y = net.describe(g, batch, true);
    const auto& v = g.value(y);
    check_unit_rows(DescriptorBatch<double>(batch.size(), 16, {v.values().begin(), v.values().end()}));
    g.backward(g.sum(y));
  }
}

TEST_CASE("train mode moves batch-norm running statistics, eval does not") {
  Network<double> net(toy_config());
  const auto patches = fixture_patches(4);
  std::ostringstream before;
  net.save(before);
  net.describe(patches, 2);
  std::ostringstream after_eval;
  net.save(after_eval);
  CHECK(before.str() == after_eval.str());
  Graph<double> g;
  net.describe(g, patches, true);
  std::ostringstream after_train;
  net.save(after_train);
  CHECK(before.str() != after_train.str());
}

TEST_CASE("chunked eval equals a single pass") {
  Network<double> net(toy_config(8));
  const auto patches = fixture_patches(7);
  const auto whole = net.describe(patches, 0);
  const auto chunked = net.describe(patches, 3);
  CHECK(whole.rows == chunked.rows);
}

TEST_CASE("shared weights across two describe calls") {
  Network<double> net(toy_config());
  const auto hash = net.parameter_hash();
  const auto before = net.parameters();
  std::vector<Tensor<double>> copies;
  for (auto* p : before) copies.push_back(*p);
  Graph<double> g;
  auto a = net.describe(g, fixture_patches(3), true);
  auto b = net.describe(g, fixture_patches(5), true);
  g.backward(g.add(g.sum(a), g.sum(b)));
  const auto after = net.parameters();
  REQUIRE(before.size() == after.size());
  for (std::size_t i = 0; i < before.size(); ++i) {
    CHECK(before[i] == after[i]);
    CHECK(*after[i] == copies[i]);
  }
  CHECK(net.parameter_hash() == hash);
}

TEST_CASE("golden descriptor for the toy network") {
  Network<double> net(toy_config(4));
  const auto d = net.describe(fixture_patches(2));
  const Tensor<double> got(Shape{d.count, d.dim}, d.rows);
  const std::string path = std::string(IFNET_TEST_DATA_DIR) + "/toy_golden.txt";
  if (std::getenv("IFNET_REGENERATE_GOLDEN")) {
    std::ofstream out(path);
    write_snapshot(out, got);
  }
  std::ifstream in(path);
  REQUIRE(in.good());
  const auto golden = read_snapshot<double>(in);
  REQUIRE(golden.shape() == got.shape());
  for (std::size_t i = 0; i < got.size(); ++i) CHECK(std::abs(golden[i] - got[i]) < 1e-5);

  Network<float> f(toy_config(4));
  const auto df = f.describe(fixture_patches(2));
  for (std::size_t i = 0; i < got.size(); ++i) CHECK(std::abs(golden[i] - df.rows[i]) < 1e-5);
}

TEST_CASE("patch to loss gradient check at toy scale") {
  auto cfg = toy_config(4);
  cfg.channel_plan = {{2, 1}, {2, 2}, {4, 2}};
  cfg.input_side = 8;
  Network<double> net(cfg);
  const auto patches = fixture_patches(3);
  const std::vector<double> weights{0.3, -1.1, 0.7, 0.2, -0.4, 0.9, 1.3, -0.6, 0.5, 0.8, -0.2, 0.1};
  auto fn = [&](Graph<double>& g) {
    auto y = net.describe(g, patches, true);
    return g.sum(g.mul_elementwise(y, weights));
  };
  const auto r = grad_check(fn, net.parameters());
  REQUIRE(r.status == GradCheckStatus::Ok);
  CHECK(r.checked > 0);
  CHECK(r.max_relative_error < 1e-4);
}

TEST_CASE("checkpoint round trip") {
  Network<double> net(toy_config(8));
  Graph<double> g;
  net.describe(g, fixture_patches(4), true);  // move running statistics
  std::stringstream buf;
  net.save(buf);
  auto loaded = Network<double>::load(buf);
  CHECK(loaded.config() == net.config());
  CHECK(loaded.parameter_hash() == net.parameter_hash());
  const auto patches = fixture_patches(3);
  CHECK(loaded.describe(patches).rows == net.describe(patches).rows);

  std::stringstream bad("IFNETCKPT0\n");
  try {
    Network<double>::load(bad);
    FAIL("expected CorruptCheckpoint");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::CorruptCheckpoint);
  }

  std::stringstream full;
  net.save(full);
  std::string text = full.str();
  std::stringstream truncated(text.substr(0, text.size() / 2));
  try {
    Network<double>::load(truncated);
    FAIL("expected CorruptCheckpoint");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::CorruptCheckpoint);
  }
}
