#include "pltnet/train.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>

namespace pltnet {

// ---------------------------------------------------------------------------
// config

TrainConfig TrainConfig::desk(Backbone) {
  TrainConfig cfg;
  cfg.epochs = 10;
  cfg.batch_size = 16;
  return cfg;
}

TrainConfig TrainConfig::paper(Backbone backbone) {
  TrainConfig cfg;
  cfg.batch_size = backbone == Backbone::kResnet18 ? 64 : 48;
  return cfg;
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be positive");
  if (lr0 <= 0.0) throw ConfigError("lr0 must be positive");
  if (batch_size < 1) throw ConfigError("batch_size must be positive");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must lie in [0,1)");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
  if (plateau_patience < 1) throw ConfigError("plateau_patience must be positive");
  if (plateau_factor <= 0.0 || plateau_factor >= 1.0) {
    throw ConfigError("plateau_factor must lie in (0,1)");
  }
  if (early_stop_patience < 1) throw ConfigError("early_stop_patience must be positive");
  if (plateau_patience >= early_stop_patience) {
    throw ConfigError("plateau_patience must be smaller than early_stop_patience");
  }
  if (flip_prob < 0.0 || flip_prob > 1.0) throw ConfigError("flip_prob must lie in [0,1]");
}

namespace {

std::string fmt_double(double v) {
  char buf[48];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, end);
}

int64_t parse_i64(const std::string& key, const std::string& value) {
  try {
    size_t pos = 0;
    const int64_t v = std::stoll(value, &pos);
    if (pos != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("cannot parse integer for " + key + ": '" + value + "'");
  }
}

double parse_f64(const std::string& key, const std::string& value) {
  try {
    size_t pos = 0;
    const double v = std::stod(value, &pos);
    if (pos != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("cannot parse number for " + key + ": '" + value + "'");
  }
}

}  // namespace

std::vector<std::pair<std::string, std::string>> TrainConfig::to_kv() const {
  return {
      {"epochs", std::to_string(epochs)},
      {"lr0", fmt_double(lr0)},
      {"batch_size", std::to_string(batch_size)},
      {"momentum", fmt_double(momentum)},
      {"weight_decay", fmt_double(weight_decay)},
      {"plateau_patience", std::to_string(plateau_patience)},
      {"plateau_factor", fmt_double(plateau_factor)},
      {"early_stop_patience", std::to_string(early_stop_patience)},
      {"flip_prob", fmt_double(flip_prob)},
      {"seed", std::to_string(seed)},
  };
}

TrainConfig TrainConfig::from_kv(const std::vector<std::pair<std::string, std::string>>& kv) {
  TrainConfig cfg;
  std::vector<std::string> seen;
  for (const auto& [key, value] : kv) {
    if (std::find(seen.begin(), seen.end(), key) != seen.end()) {
      throw ConfigError("duplicate train key: " + key);
    }
    seen.push_back(key);
    if (key == "epochs") {
      cfg.epochs = static_cast<int>(parse_i64(key, value));
    } else if (key == "lr0") {
      cfg.lr0 = parse_f64(key, value);
    } else if (key == "batch_size") {
      cfg.batch_size = static_cast<int>(parse_i64(key, value));
    } else if (key == "momentum") {
      cfg.momentum = parse_f64(key, value);
    } else if (key == "weight_decay") {
      cfg.weight_decay = parse_f64(key, value);
    } else if (key == "plateau_patience") {
      cfg.plateau_patience = static_cast<int>(parse_i64(key, value));
    } else if (key == "plateau_factor") {
      cfg.plateau_factor = parse_f64(key, value);
    } else if (key == "early_stop_patience") {
      cfg.early_stop_patience = static_cast<int>(parse_i64(key, value));
    } else if (key == "flip_prob") {
      cfg.flip_prob = parse_f64(key, value);
    } else if (key == "seed") {
      cfg.seed = static_cast<uint64_t>(parse_i64(key, value));
    } else {
      throw ConfigError("unknown train key: " + key);
    }
  }
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// loss

namespace {
constexpr float kLo = 1e-7f;
constexpr float kHi = 1.0f - 1e-7f;
}  // namespace

Tensor bce_loss(const Tensor& probas, const Tensor& labels) {
  if (!probas.defined() || !labels.defined() || probas.shape() != labels.shape() ||
      probas.rank() != 2 || probas.dim(1) != 1 || probas.dim(0) < 1) {
    throw ShapeError("bce_loss expects matching [B,1] tensors");
  }
  const int64_t n = probas.size();

  const float* p = probas.data().data();
  const float* y = labels.data().data();
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    if (y[i] != 0.0f && y[i] != 1.0f) {
      throw std::invalid_argument("bce_loss labels must be exactly 0 or 1, got " +
                                  std::to_string(y[i]));
    }
    const double pc = std::clamp(p[i], kLo, kHi);
    acc += y[i] == 1.0f ? -std::log(pc) : -std::log(1.0 - pc);
  }
  Tensor out = Tensor::scalar(static_cast<float>(acc / static_cast<double>(n)));

  Tape* tape = Tape::active();
  if (tape && probas.tracked()) {
    out.set_tracked(true);
    auto p_i = probas.impl();
    auto y_i = labels.impl();
    auto out_i = out.impl();
    tape->record([p_i, y_i, out_i, n]() {
      if (out_i->grad.empty()) return;
      if (p_i->grad.empty()) p_i->grad.assign(p_i->data.size(), 0.0f);
      const float g = out_i->grad[0];
      for (int64_t i = 0; i < n; ++i) {
        const float pv = p_i->data[static_cast<size_t>(i)];
        if (pv < kLo || pv > kHi) continue;  // clamp region: flat
        const double pc = pv;
        const double dldp = (pc - y_i->data[static_cast<size_t>(i)]) / (pc * (1.0 - pc));
        p_i->grad[static_cast<size_t>(i)] +=
            static_cast<float>(g * dldp / static_cast<double>(n));
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// optimizer

SgdOptimizer::SgdOptimizer(std::vector<NamedParam> params, double momentum, double weight_decay)
    : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
  velocity_.reserve(params_.size());
  for (const auto& p : params_) {
    velocity_.emplace_back(static_cast<size_t>(p.tensor.size()), 0.0f);
  }
}

void SgdOptimizer::zero_grad() {
  for (auto& p : params_) p.tensor.clear_grad();
}

void SgdOptimizer::step(double lr) {
  for (size_t t = 0; t < params_.size(); ++t) {
    auto& p = params_[t];
    auto w = p.tensor.data();
    std::vector<float>& v = velocity_[t];
    const bool has_grad = p.tensor.has_grad();
    const std::span<const float> g = p.tensor.grad();
    for (size_t i = 0; i < w.size(); ++i) {
      const double gi = has_grad ? static_cast<double>(g[i]) : 0.0;
      if (std::isnan(gi)) {
        throw std::runtime_error("NaN gradient in parameter " + p.name);
      }
      const double decayed = gi + weight_decay_ * static_cast<double>(w[i]);
      const double vel = momentum_ * static_cast<double>(v[i]) + decayed;
      v[i] = static_cast<float>(vel);
      w[i] = static_cast<float>(static_cast<double>(w[i]) - lr * vel);
    }
  }
}

// ---------------------------------------------------------------------------
// schedule + early stop

RecipeState::RecipeState(double lr0, int plateau_patience, double plateau_factor,
                         int early_stop_patience)
    : lr_(lr0), patience_(plateau_patience), factor_(plateau_factor),
      early_(early_stop_patience) {}

RecipeDecision RecipeState::observe(double val_loss) {
  ++seen_;
  RecipeDecision d;
  if (val_loss < best_ - 1e-6) {
    best_ = val_loss;
    best_epoch_ = seen_;
    plateau_ = 0;
    stall_ = 0;
    d.improved = true;
    return d;
  }
  ++plateau_;
  ++stall_;
  if (plateau_ >= patience_) {
    lr_ *= factor_;
    plateau_ = 0;
    d.decayed = true;
  }
  if (stall_ >= early_) d.stop = true;
  return d;
}

// ---------------------------------------------------------------------------
// history

std::string TrainHistory::to_csv() const {
  std::string out = "epoch,train_loss,val_loss,lr\n";
  char row[160];
  for (const auto& e : epochs) {
    std::snprintf(row, sizeof(row), "%d,%.6f,%.6f,%.6g\n", e.epoch, e.train_loss, e.val_loss,
                  e.lr);
    out += row;
  }
  return out;
}

// ---------------------------------------------------------------------------
// fold assembly

FoldData prepare_fold(const std::vector<PatientRecord>& records, const SplitPlan& plan, int fold,
                      int image_size) {
  FoldData out;
  for (const auto& rec : records) {
    const Subset subset = subset_of(plan, rec.patient_id, fold);
    auto& bucket = subset == Subset::kTrain ? out.train
                   : subset == Subset::kVal ? out.val
                                            : out.test;
    for (const auto& slice : rec.slices) {
      bucket.push_back({rec.patient_id, rec.label, stack_and_resize(slice, image_size)});
    }
  }
  if (out.train.empty()) throw std::invalid_argument("fold has no training images");
  if (out.val.empty()) throw std::invalid_argument("fold has no validation images");

  std::vector<Tensor> train_images;
  train_images.reserve(out.train.size());
  for (const auto& item : out.train) train_images.push_back(item.image);
  out.stats = compute_channel_stats(train_images);
  return out;
}

Tensor take_channels(const Tensor& batch, int channels) {
  if (batch.rank() != 4 || channels < 1 || channels > batch.dim(1)) {
    throw ShapeError("take_channels needs a [B,C,H,W] batch with 1 <= channels <= C");
  }
  const int64_t b = batch.dim(0), c = batch.dim(1), plane = batch.dim(2) * batch.dim(3);
  Tensor out(Shape{b, channels, batch.dim(2), batch.dim(3)});
  for (int64_t i = 0; i < b; ++i) {
    std::copy_n(batch.data().data() + i * c * plane, static_cast<int64_t>(channels) * plane,
                out.data().data() + i * channels * plane);
  }
  return out;
}

// ---------------------------------------------------------------------------
// training loop

namespace {

struct Snapshot {
  std::vector<std::vector<float>> params;
  std::vector<std::vector<float>> state;
};

Snapshot take_snapshot(Model& model) {
  Snapshot s;
  for (auto& p : model.parameters()) {
    s.params.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  }
  for (auto& st : model.bn_state()) s.state.push_back(*st.values);
  return s;
}

void restore_snapshot(Model& model, const Snapshot& s) {
  auto& params = model.parameters();
  for (size_t i = 0; i < params.size(); ++i) {
    std::copy(s.params[i].begin(), s.params[i].end(), params[i].tensor.data().begin());
  }
  auto& state = model.bn_state();
  for (size_t i = 0; i < state.size(); ++i) *state[i].values = s.state[i];
}

// Raw [b,2,T,T] batch plus [b,1] labels for the given index window.
std::pair<Tensor, Tensor> assemble(const std::vector<FoldItem>& items,
                                   const std::vector<size_t>& order, size_t start, size_t stop) {
  const Tensor& first = items[order[start]].image;
  const int64_t t = first.dim(1);
  const int64_t b = static_cast<int64_t>(stop - start);
  Tensor batch(Shape{b, 2, t, t});
  Tensor labels(Shape{b, 1});
  const int64_t item_size = first.size();
  for (size_t i = start; i < stop; ++i) {
    const FoldItem& item = items[order[i]];
    std::copy_n(item.image.data().data(), item_size,
                batch.data().data() + static_cast<int64_t>(i - start) * item_size);
    labels.data()[i - start] = static_cast<float>(item.label);
  }
  return {std::move(batch), std::move(labels)};
}

double mean_eval_loss(Model& model, const std::vector<FoldItem>& items, const ChannelStats& stats,
                      int in_channels, int batch_size) {
  std::vector<size_t> order(items.size());
  std::iota(order.begin(), order.end(), size_t{0});
  double loss_sum = 0.0;
  for (size_t start = 0; start < items.size(); start += static_cast<size_t>(batch_size)) {
    const size_t stop = std::min(items.size(), start + static_cast<size_t>(batch_size));
    auto [raw, labels] = assemble(items, order, start, stop);
    Tensor x(raw.shape());
    const int64_t item_size = raw.size() / raw.dim(0);
    for (int64_t i = 0; i < raw.dim(0); ++i) {
      Tensor sample(Shape{raw.dim(1), raw.dim(2), raw.dim(3)});
      std::copy_n(raw.data().data() + i * item_size, item_size, sample.data().data());
      sample = normalize_channels(sample, stats);
      std::copy_n(sample.data().data(), item_size, x.data().data() + i * item_size);
    }
    if (in_channels < x.dim(1)) x = take_channels(x, in_channels);
    Tensor probas = sigmoid(model.forward(x, Mode::kEval));
    loss_sum += static_cast<double>(bce_loss(probas, labels).item()) *
                static_cast<double>(stop - start);
  }
  return loss_sum / static_cast<double>(items.size());
}

}  // namespace

TrainHistory train_model(Model& model, const FoldData& fold, const TrainConfig& cfg) {
  cfg.validate();
  if (fold.train.empty()) throw std::invalid_argument("fold has no training images");
  if (fold.val.empty()) throw std::invalid_argument("fold has no validation images");
  const int in_channels = model.config().in_channels;

  model.set_tracked(true);
  SgdOptimizer opt(model.parameters(), cfg.momentum, cfg.weight_decay);
  RecipeState recipe(cfg);
  Rng rng(cfg.seed);
  TrainHistory history;
  Snapshot best;

  std::vector<size_t> order(fold.train.size());
  std::iota(order.begin(), order.end(), size_t{0});

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = recipe.lr();
    rng.shuffle(order);

    double loss_sum = 0.0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
      const size_t stop = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
      auto [raw, labels] = assemble(fold.train, order, start, stop);
      Tensor x = train_time_augment(raw, fold.stats, cfg.flip_prob, rng);
      if (in_channels < x.dim(1)) x = take_channels(x, in_channels);

      opt.zero_grad();
      Tape tape;
      double batch_loss;
      {
        TapeScope scope(tape);
        Tensor probas = sigmoid(model.forward(x, Mode::kTrain));
        Tensor loss = bce_loss(probas, labels);
        batch_loss = loss.item();
        tape.backward(loss);
      }
      if (!std::isfinite(batch_loss)) {
        throw std::runtime_error("training loss is not finite at epoch " +
                                 std::to_string(epoch));
      }
      opt.step(lr);
      loss_sum += batch_loss * static_cast<double>(stop - start);
    }
    const double train_loss = loss_sum / static_cast<double>(order.size());
    const double val_loss =
        mean_eval_loss(model, fold.val, fold.stats, in_channels, cfg.batch_size);
    if (!std::isfinite(val_loss)) {
      throw std::runtime_error("validation loss is not finite at epoch " + std::to_string(epoch));
    }

    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    history.epochs.push_back({epoch, train_loss, val_loss, lr, wall});

    const RecipeDecision d = recipe.observe(val_loss);
    if (d.improved) best = take_snapshot(model);
    if (d.stop) {
      history.stop_reason = "early_stopped";
      break;
    }
  }

  restore_snapshot(model, best);
  history.best_epoch = recipe.best_epoch();
  history.best_val_loss = recipe.best_val();
  return history;
}

}  // namespace pltnet
