#include "volflow/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace volflow {

namespace {
constexpr double kRefWarmupEpochs = 100.0;
constexpr double kRefTotalEpochs = 360.0;  // 70+30+10+20+10+10+10+200
constexpr double kLn2 = 0.6931471805599453;
}  // namespace

void TrainSchedule::validate() const {
  if (stages.empty()) throw ContractError("schedule: no stages");
  int prev_bits = 0;
  for (const auto& s : stages) {
    if (s.bits < 1 || s.bits > 8)
      throw ContractError(cat("schedule: bit depth must be in 1..8, got ", s.bits));
    if (s.bits <= prev_bits)
      throw ContractError(cat("schedule: bit depths must be strictly increasing, got ", prev_bits,
                              " then ", s.bits));
    if (s.epochs < 0) throw ContractError(cat("schedule: negative epochs ", s.epochs));
    if (!(s.lr > 0.0)) throw ContractError(cat("schedule: learning rate must be > 0, got ", s.lr));
    prev_bits = s.bits;
  }
}

int TrainSchedule::total_epochs() const {
  int total = 0;
  for (const auto& s : stages) total += s.epochs;
  return total;
}

double TrainSchedule::resolved_warmup() const {
  if (warmup_epochs >= 0.0) return warmup_epochs;
  return kRefWarmupEpochs * static_cast<double>(total_epochs()) / kRefTotalEpochs;
}

TrainSchedule parse_schedule(const std::string& text) {
  TrainSchedule out;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ls(line);
    TrainStage s;
    if (!(ls >> s.bits >> s.epochs >> s.lr))
      throw IoError(cat("schedule line ", lineno, ": expected 'bits epochs lr', got '", line,
                        "'"));
    out.stages.push_back(s);
  }
  out.validate();
  return out;
}

TrainSchedule read_schedule_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError(cat("cannot open schedule '", path, "'"));
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_schedule(ss.str());
}

Volume quantize_bits(const Volume& v, int bits) {
  if (bits < 1 || bits > 8) throw ContractError(cat("quantize_bits: depth ", bits, " not in 1..8"));
  if (v.dtype != VoxelType::u8) throw ContractError("quantize_bits: expected an 8-bit volume");
  Volume out = v;
  const int shift = 8 - bits;
  for (auto& x : out.data_u8) x = static_cast<uint8_t>(x >> shift);
  return out;
}

template <class T>
std::vector<T> dequantize(const Volume& q, int bits, Rng& rng) {
  if (bits < 1 || bits > 8) throw ContractError(cat("dequantize: depth ", bits, " not in 1..8"));
  const double scale = static_cast<double>(int64_t(1) << bits);
  const int64_t top = (int64_t(1) << bits) - 1;
  std::vector<T> out(q.count());
  for (int64_t i = 0; i < q.count(); ++i) {
    const int64_t v = q.data_u8[i];
    if (v > top) throw ContractError(cat("dequantize: value ", v, " exceeds 2^", bits, "-1"));
    out[i] = static_cast<T>((static_cast<double>(v) + rng.uniform()) / scale - 0.5);
  }
  return out;
}

template <class T>
std::vector<T> dequantize_center(const Volume& q, int bits) {
  if (bits < 1 || bits > 8) throw ContractError(cat("dequantize: depth ", bits, " not in 1..8"));
  const double scale = static_cast<double>(int64_t(1) << bits);
  const int64_t top = (int64_t(1) << bits) - 1;
  std::vector<T> out(q.count());
  for (int64_t i = 0; i < q.count(); ++i) {
    const int64_t v = q.data_u8[i];
    if (v > top) throw ContractError(cat("dequantize: value ", v, " exceeds 2^", bits, "-1"));
    out[i] = static_cast<T>((static_cast<double>(v) + 0.5) / scale - 0.5);
  }
  return out;
}

double bits_per_dim(double nll, int bits, int64_t dims) {
  if (dims <= 0) throw ContractError(cat("bits_per_dim: dims must be > 0, got ", dims));
  return nll / (static_cast<double>(dims) * kLn2) + static_cast<double>(bits);
}

template <class T>
AdamOptimizer<T>::AdamOptimizer(std::vector<Var<T>> params, double beta1, double beta2,
                                double eps)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    m_.emplace_back(p.count(), T(0));
    v_.emplace_back(p.count(), T(0));
  }
}

template <class T>
void AdamOptimizer<T>::step(double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (!p.has_grad()) continue;  // parameter unused by this graph
    const auto& g = p.grad();
    auto& vals = p.values_mut();
    auto& m = m_[i];
    auto& v = v_[i];
    for (size_t j = 0; j < vals.size(); ++j) {
      const double gj = static_cast<double>(g[j]);
      const double mj = beta1_ * static_cast<double>(m[j]) + (1.0 - beta1_) * gj;
      const double vj = beta2_ * static_cast<double>(v[j]) + (1.0 - beta2_) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double mhat = mj / bc1;
      const double vhat = vj / bc2;
      vals[j] = static_cast<T>(static_cast<double>(vals[j]) -
                               lr * mhat / (std::sqrt(vhat) + eps_));
    }
  }
}

template <class T>
void AdamOptimizer<T>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

template <class T>
SpatialTrainResult train_spatial(FlowModel<T>& model, const std::vector<Volume>& dataset,
                                 const TrainSchedule& schedule, uint64_t seed,
                                 const std::function<void(const EpochMetric&)>& on_epoch) {
  schedule.validate();
  if (dataset.empty()) throw ContractError("train_spatial: empty dataset");
  const int64_t r = model.config().resolution;
  for (const auto& v : dataset) {
    if (v.dtype != VoxelType::u8)
      throw ContractError("train_spatial: dataset volumes must be 8-bit");
    if (v.d != r || v.h != r || v.w != r)
      throw ContractError(cat("train_spatial: volume dims (", v.d, ",", v.h, ",", v.w,
                              ") do not match config resolution ", r));
  }

  const int64_t dims = r * r * r * model.config().channels;
  const Shape xshape(r, r, r, model.config().channels);
  const double warmup = schedule.resolved_warmup();
  const auto n = dataset.size();
  const double steps_per_epoch = static_cast<double>(n);

  Rng order_rng(derive_seed(seed, "spatial-order"));
  Rng deq_rng(derive_seed(seed, "spatial-dequant"));

  AdamOptimizer<T> opt(model.parameters());
  SpatialTrainResult result;

  // Last-good snapshot for divergence recovery.
  auto snapshot = [&]() {
    std::vector<std::vector<T>> snap;
    for (const auto& p : model.parameters()) snap.push_back(p.value());
    return snap;
  };
  auto restore = [&](const std::vector<std::vector<T>>& snap) {
    auto params = model.parameters();
    for (size_t i = 0; i < params.size(); ++i) params[i].values_mut() = snap[i];
  };
  std::vector<std::vector<T>> last_good = snapshot();

  const auto t0 = std::chrono::steady_clock::now();
  int global_epoch = 0;
  int64_t global_step = 0;

  for (const auto& stage : schedule.stages) {
    std::vector<Volume> quantized;
    quantized.reserve(n);
    for (const auto& v : dataset) quantized.push_back(quantize_bits(v, stage.bits));

    for (int e = 0; e < stage.epochs; ++e) {
      std::vector<size_t> order(n);
      std::iota(order.begin(), order.end(), 0);
      for (size_t i = n; i > 1; --i) std::swap(order[i - 1], order[order_rng.below(i)]);

      double nll_sum = 0.0;
      double lr_last = stage.lr;
      try {
        for (size_t i = 0; i < n; ++i) {
          const double progress =
              static_cast<double>(global_step) / steps_per_epoch;  // in epochs
          const double ramp = warmup > 0.0 ? std::min(1.0, progress / warmup) : 1.0;
          const double lr = stage.lr * ramp;
          lr_last = lr;

          auto x = Var<T>::leaf(xshape, dequantize<T>(quantized[order[i]], stage.bits, deq_rng));
          // Data-dependent actnorm init happens on the first volume only.
          auto res = model.encode_full(x, /*init_actnorm=*/true);
          auto ll = ops::add(res.prior_logp, res.logdet);
          auto loss = ops::mul_scalar(ll, -1.0);
          const double loss_val = static_cast<double>(loss.value()[0]);
          if (!std::isfinite(loss_val)) throw NonFiniteError("train_spatial: non-finite loss");
          nll_sum += loss_val;
          backward(loss);
          opt.step(lr);
          opt.zero_grad();
          ++global_step;
        }
      } catch (const NonFiniteError& err) {
        restore(last_good);
        result.aborted = true;
        result.abort_reason = cat("aborted at epoch ", global_epoch + 1, ": ", err.what(),
                                  "; parameters restored to last epoch-end checkpoint");
        return result;
      }

      ++global_epoch;
      EpochMetric m;
      m.epoch = global_epoch;
      m.stage_bits = stage.bits;
      m.nll = nll_sum / static_cast<double>(n);
      m.bpd = bits_per_dim(m.nll, stage.bits, dims);
      m.lr = lr_last;
      m.wall_seconds =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      result.metrics.push_back(m);
      if (on_epoch) on_epoch(m);
      last_good = snapshot();
    }
  }
  return result;
}

void write_metrics_csv(const std::string& path, const std::vector<EpochMetric>& metrics) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError(cat("cannot open metrics csv '", path, "' for writing"));
  os << "epoch,stage_bits,nll,bpd,lr,wall_seconds\n";
  os.precision(10);
  for (const auto& m : metrics)
    os << m.epoch << "," << m.stage_bits << "," << m.nll << "," << m.bpd << "," << m.lr << ","
       << m.wall_seconds << "\n";
  if (!os) throw IoError(cat("write failed: '", path, "'"));
}

#define VOLFLOW_INST(T)                                                                     \
  template std::vector<T> dequantize<T>(const Volume&, int, Rng&);                          \
  template std::vector<T> dequantize_center<T>(const Volume&, int);                         \
  template class AdamOptimizer<T>;                                                          \
  template SpatialTrainResult train_spatial<T>(FlowModel<T>&, const std::vector<Volume>&,   \
                                               const TrainSchedule&, uint64_t,             \
                                               const std::function<void(const EpochMetric&)>&);
VOLFLOW_INST(float)
VOLFLOW_INST(double)
#undef VOLFLOW_INST

}  // namespace volflow
