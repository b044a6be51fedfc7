#include "ifnet/net.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <type_traits>

#include "ifnet/rng.hpp"

namespace ifnet {

std::vector<ConvStage> NetConfig::l2net_plan() {
  return {{32, 1}, {32, 1}, {64, 2}, {64, 1}, {128, 2}, {128, 1}};
}

NetConfig NetConfig::toy() {
  NetConfig cfg;
  for (auto& stage : cfg.channel_plan) stage.channels /= 8;
  return cfg;
}

std::size_t NetConfig::downsampling() const {
  std::size_t factor = 1;
  for (const auto& s : channel_plan) factor *= s.stride;
  return factor;
}

void NetConfig::validate() const {
  if (descriptor_dim < 2) fail(ErrorKind::InvalidConfig, "descriptor_dim must be >= 2");
  if (channel_plan.empty()) fail(ErrorKind::InvalidConfig, "channel_plan is empty");
  for (const auto& s : channel_plan)
    if (s.channels == 0 || s.stride == 0)
      fail(ErrorKind::InvalidConfig, "channel_plan stage with zero channels or stride");
  if (input_side == 0 || input_side % downsampling() != 0)
    fail(ErrorKind::InvalidConfig, "input_side " + std::to_string(input_side) +
                                       " is not divisible by the total stride " +
                                       std::to_string(downsampling()));
  if (!(bn_momentum >= 0.0 && bn_momentum <= 1.0))
    fail(ErrorKind::InvalidConfig, "bn_momentum must lie in [0, 1]");
}

std::string format_channel_plan(const std::vector<ConvStage>& plan) {
  std::string out;
  for (std::size_t i = 0; i < plan.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(plan[i].channels) + "/" + std::to_string(plan[i].stride);
  }
  return out;
}

std::vector<ConvStage> parse_channel_plan(const std::string& text) {
  std::vector<ConvStage> plan;
  std::istringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    ConvStage stage;
    const auto slash = item.find('/');
    try {
      stage.channels = std::stoul(item.substr(0, slash));
      stage.stride = slash == std::string::npos ? 1 : std::stoul(item.substr(slash + 1));
    } catch (const std::exception&) {
      fail(ErrorKind::InvalidConfig, "bad channel_plan entry '" + item + "'");
    }
    plan.push_back(stage);
  }
  return plan;
}

template <typename T>
Network<T>::Network(NetConfig config) : config_(std::move(config)) {
  config_.validate();
  Rng rng(config_.rng_seed);
  auto fill_uniform = [&](Tensor<T>& t, double bound) {
    for (auto& v : t.values()) v = static_cast<T>(uniform(rng, -bound, bound));
  };
  std::size_t in_channels = 1;
  for (const auto& stage : config_.channel_plan) {
    Tensor<T> w(Shape{stage.channels, in_channels, 3, 3}, true);
    fill_uniform(w, std::sqrt(6.0 / static_cast<double>(in_channels * 9)));
    conv_weights_.push_back(std::move(w));
    bn_.emplace_back(stage.channels);
    in_channels = stage.channels;
  }
  const std::size_t final_side = config_.input_side / config_.downsampling();
  const std::size_t fan_in = in_channels * final_side * final_side;
  proj_weight_ = Tensor<T>(Shape{config_.descriptor_dim, fan_in}, true);
  proj_bias_ = Tensor<T>(Shape{config_.descriptor_dim}, true);
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  fill_uniform(proj_weight_, bound);
  fill_uniform(proj_bias_, bound);
  bn_.emplace_back(config_.descriptor_dim);
}

template <typename T>
std::vector<Tensor<T>*> Network<T>::parameters() {
  std::vector<Tensor<T>*> out;
  for (auto& w : conv_weights_) out.push_back(&w);
  out.push_back(&proj_weight_);
  out.push_back(&proj_bias_);
  return out;
}

template <typename T>
std::vector<const Tensor<T>*> Network<T>::parameters() const {
  std::vector<const Tensor<T>*> out;
  for (const auto& w : conv_weights_) out.push_back(&w);
  out.push_back(&proj_weight_);
  out.push_back(&proj_bias_);
  return out;
}

template <typename T>
std::vector<std::string> Network<T>::parameter_names() const {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < conv_weights_.size(); ++i)
    names.push_back("conv" + std::to_string(i) + ".weight");
  names.push_back("proj.weight");
  names.push_back("proj.bias");
  return names;
}

template <typename T>
std::size_t Network<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto* p : parameters()) n += p->size();
  return n;
}

template <typename T>
std::uint64_t Network<T>::parameter_hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto* p : parameters()) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(p->data());
    for (std::size_t i = 0; i < p->size() * sizeof(T); ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

template <typename T>
void Network<T>::zero_grad() {
  for (auto* p : parameters()) p->zero_grad();
}

template <typename T>
Tensor<T> Network<T>::prepare(std::span<const Patch> patches) const {
  const std::size_t side = config_.input_side;
  Tensor<T> input(Shape{patches.size(), 1, side, side});
  for (std::size_t i = 0; i < patches.size(); ++i) {
    if (patches[i].side != kPatchSide || patches[i].pixels.size() != kPatchSide * kPatchSide)
      fail(ErrorKind::WrongPatchSize, "patch " + std::to_string(i) + " is " +
                                          std::to_string(patches[i].side) + " px, expected " +
                                          std::to_string(kPatchSide));
    prepare_patch<T>(patches[i], side, input.values().subspan(i * side * side, side * side));
  }
  return input;
}

namespace {

template <typename T, typename Net, typename Conv, typename Bn, typename ProjW, typename ProjB>
typename Graph<T>::Var run_layers(Graph<T>& g, typename Graph<T>::Var x, const NetConfig& cfg,
                                  Conv& convs, Bn& bns, ProjW& proj_w, ProjB& proj_b,
                                  bool train_mode) {
  const auto& shape = g.value(x).shape();
  if (shape.size() != 4 || shape[1] != 1 || shape[2] != cfg.input_side ||
      shape[3] != cfg.input_side)
    fail(ErrorKind::WrongPatchSize, "network input " + shape_string(shape) + ", expected [B, 1, " +
                                        std::to_string(cfg.input_side) + ", " +
                                        std::to_string(cfg.input_side) + "]");
  const T momentum = static_cast<T>(cfg.bn_momentum);
  auto norm = [&](typename Graph<T>::Var v, auto& state) {
    if constexpr (std::is_const_v<std::remove_reference_t<decltype(state)>>)
      return g.batch_norm(v, state);
    else
      return g.batch_norm(v, state, train_mode, momentum);
  };
  for (std::size_t i = 0; i < cfg.channel_plan.size(); ++i) {
    x = g.conv2d(x, g.bind(convs[i]), cfg.channel_plan[i].stride, 1);
    if (cfg.batchnorm_enabled) x = norm(x, bns[i]);
    x = g.relu(x);
  }
  x = g.affine(x, g.bind(proj_w), g.bind(proj_b));
  if (cfg.batchnorm_enabled) x = norm(x, bns.back());
  // A train-mode batch of identical patches normalizes to exact zeros; such
  // rows are sent to the first basis vector so every output stays unit norm.
  const auto& y = g.value(x);
  const std::size_t rows = y.shape()[0], dim = y.shape()[1];
  std::vector<std::size_t> degenerate;
  for (std::size_t r = 0; r < rows; ++r) {
    double sq = 0.0;
    for (std::size_t c = 0; c < dim; ++c) sq += static_cast<double>(y[r * dim + c]) * y[r * dim + c];
    if (std::sqrt(sq) <= 1e-12) degenerate.push_back(r);
  }
  if (!degenerate.empty()) {
    Tensor<T> basis({rows, dim});
    for (auto r : degenerate) basis[r * dim] = T(1);
    x = g.add(x, g.constant(std::move(basis)));
  }
  return g.l2_normalize(x);
}

}  // namespace

template <typename T>
typename Network<T>::Var Network<T>::forward(Graph<T>& graph, Var input, bool train_mode) {
  return run_layers<T, Network>(graph, input, config_, conv_weights_, bn_, proj_weight_,
                                proj_bias_, train_mode);
}

template <typename T>
typename Network<T>::Var Network<T>::forward(Graph<T>& graph, Var input) const {
  return run_layers<T, const Network>(graph, input, config_, conv_weights_, bn_, proj_weight_,
                                      proj_bias_, false);
}

template <typename T>
typename Network<T>::Var Network<T>::describe(Graph<T>& graph, std::span<const Patch> patches,
                                              bool train_mode) {
  auto input = graph.constant(prepare(patches));
  return forward(graph, input, train_mode);
}

template <typename T>
DescriptorBatch<T> Network<T>::describe(std::span<const Patch> patches, std::size_t chunk) const {
  const std::size_t dim = config_.descriptor_dim;
  DescriptorBatch<T> out(patches.size(), dim, std::vector<T>(patches.size() * dim));
  if (chunk == 0) chunk = patches.size();
  for (std::size_t start = 0; start < patches.size(); start += chunk) {
    const std::size_t n = std::min(chunk, patches.size() - start);
    Graph<T> g;
    auto y = forward(g, g.constant(prepare(patches.subspan(start, n))));
    const auto& v = g.value(y);
    std::copy(v.values().begin(), v.values().end(), out.rows.begin() + start * dim);
  }
  return out;
}

template <typename T>
void Network<T>::save(std::ostream& out) const {
  out << "IFNETCKPT1\n";
  out << "input_side=" << config_.input_side << '\n';
  out << "channel_plan=" << format_channel_plan(config_.channel_plan) << '\n';
  out << "descriptor_dim=" << config_.descriptor_dim << '\n';
  out << "batchnorm_enabled=" << (config_.batchnorm_enabled ? 1 : 0) << '\n';
  out << "rng_seed=" << config_.rng_seed << '\n';
  out << std::setprecision(17) << "bn_momentum=" << config_.bn_momentum << '\n';
  const auto names = parameter_names();
  const auto params = parameters();
  out << "tensors=" << params.size() + 2 * bn_.size() << '\n';
  for (std::size_t i = 0; i < params.size(); ++i) {
    out << "tensor " << names[i] << '\n';
    write_snapshot(out, *params[i]);
  }
  for (std::size_t i = 0; i < bn_.size(); ++i) {
    out << "tensor bn" << i << ".running_mean\n";
    write_snapshot(out, bn_[i].running_mean);
    out << "tensor bn" << i << ".running_var\n";
    write_snapshot(out, bn_[i].running_var);
  }
}

template <typename T>
void Network<T>::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::Io, "cannot write checkpoint " + path);
  save(out);
  if (!out) fail(ErrorKind::Io, "failed writing checkpoint " + path);
}

template <typename T>
Network<T> Network<T>::load(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "IFNETCKPT1")
    fail(ErrorKind::CorruptCheckpoint, "missing IFNETCKPT1 magic");
  std::map<std::string, std::string> fields;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail(ErrorKind::CorruptCheckpoint, "bad header line '" + line + "'");
    fields[line.substr(0, eq)] = line.substr(eq + 1);
    if (line.rfind("tensors=", 0) == 0) break;
  }
  auto field = [&](const std::string& key) {
    auto it = fields.find(key);
    if (it == fields.end()) fail(ErrorKind::CorruptCheckpoint, "missing header field " + key);
    return it->second;
  };
  NetConfig cfg;
  try {
    cfg.input_side = std::stoul(field("input_side"));
    cfg.channel_plan = parse_channel_plan(field("channel_plan"));
    cfg.descriptor_dim = std::stoul(field("descriptor_dim"));
    cfg.batchnorm_enabled = field("batchnorm_enabled") == "1";
    cfg.rng_seed = std::stoull(field("rng_seed"));
    cfg.bn_momentum = std::stod(field("bn_momentum"));
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    fail(ErrorKind::CorruptCheckpoint, std::string("bad header value: ") + e.what());
  }
  Network net(cfg);
  std::map<std::string, Tensor<T>*> slots;
  const auto names = net.parameter_names();
  const auto params = net.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) slots[names[i]] = params[i];
  for (std::size_t i = 0; i < net.bn_.size(); ++i) {
    slots["bn" + std::to_string(i) + ".running_mean"] = &net.bn_[i].running_mean;
    slots["bn" + std::to_string(i) + ".running_var"] = &net.bn_[i].running_var;
  }
  const std::size_t count = std::stoul(field("tensors"));
  if (count != slots.size())
    fail(ErrorKind::CorruptCheckpoint, "expected " + std::to_string(slots.size()) +
                                           " tensors, header says " + std::to_string(count));
  for (std::size_t i = 0; i < count; ++i) {
    if (!std::getline(in, line) || line.rfind("tensor ", 0) != 0)
      fail(ErrorKind::CorruptCheckpoint, "expected 'tensor <name>' line");
    const std::string name = line.substr(7);
    auto it = slots.find(name);
    if (it == slots.end()) fail(ErrorKind::CorruptCheckpoint, "unknown tensor " + name);
    Tensor<T> t;
    try {
      t = read_snapshot<T>(in);
    } catch (const Error& e) {
      fail(ErrorKind::CorruptCheckpoint, name + ": " + e.what());
    }
    if (t.shape() != it->second->shape())
      fail(ErrorKind::CorruptCheckpoint, name + " has shape " + shape_string(t.shape()) +
                                             ", expected " + shape_string(it->second->shape()));
    std::copy(t.values().begin(), t.values().end(), it->second->values().begin());
    std::getline(in, line);  // rest of the values line
  }
  return net;
}

template <typename T>
Network<T> Network<T>::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::CorruptCheckpoint, "cannot open checkpoint " + path);
  return load(in);
}

template class Network<float>;
template class Network<double>;

}  // namespace ifnet
