#include "aqcf/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <set>

#include "aqcf/ops.hpp"
#include "json.hpp"

namespace aqcf {

using nlohmann::json;

namespace {

struct ClassLayout {
  std::int64_t batch, classes, inner;
};

ClassLayout layout_of(const Shape& probs, const Shape& onehot, const char* what) {
  if (probs.size() < 2) throw ShapeError(std::string(what) + ": expected [B, C, ...], got " + shape_str(probs));
  if (probs != onehot)
    throw ShapeError(std::string(what) + ": probabilities " + shape_str(probs) + " vs one-hot " + shape_str(onehot));
  std::int64_t inner = 1;
  for (std::size_t a = 2; a < probs.size(); ++a) inner *= probs[a];
  return {probs[0], probs[1], inner};
}

}  // namespace

Tensor one_hot(const Tensor& labels, int classes, DType dtype) {
  if (labels.rank() != 3 && labels.rank() != 4)
    throw ShapeError("one_hot: expected [B, D, H, W] or [D, H, W] labels, got " + shape_str(labels.shape()));
  const Tensor l = labels.rank() == 3 ? labels.reshaped({1, labels.dim(0), labels.dim(1), labels.dim(2)}) : labels;
  const std::int64_t B = l.dim(0), inner = l.dim(1) * l.dim(2) * l.dim(3);
  Tensor out({B, classes, l.dim(1), l.dim(2), l.dim(3)}, dtype);
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t v = 0; v < inner; ++v) {
      const double c = l.at(b * inner + v);
      if (c != std::floor(c) || c < 0 || c >= classes)
        throw std::invalid_argument("one_hot: label " + std::to_string(c) + " outside the class range [0, " +
                                    std::to_string(classes - 1) + "]");
      out.set((b * classes + static_cast<std::int64_t>(c)) * inner + v, 1.0);
    }
  return out;
}

Var soft_dice_loss(const Var& probs, const Tensor& onehot, double eps, std::vector<double>* dice_per_class) {
  const ClassLayout L = layout_of(probs.shape(), onehot.shape(), "soft_dice_loss");
  if (onehot.dtype() != probs.dtype()) throw std::invalid_argument("soft_dice_loss: dtype mismatch");
  std::vector<double> inter(L.classes, 0.0), denom(L.classes, 0.0), dice(L.classes, 0.0);
  dispatch(probs.dtype(), [&]<class T>() {
    auto p = probs.value().data<T>();
    auto y = onehot.data<T>();
    for (std::int64_t b = 0; b < L.batch; ++b)
      for (std::int64_t c = 0; c < L.classes; ++c) {
        const std::int64_t base = (b * L.classes + c) * L.inner;
        double i_acc = 0.0, s_acc = 0.0;
        for (std::int64_t v = 0; v < L.inner; ++v) {
          i_acc += static_cast<double>(p[base + v]) * y[base + v];
          s_acc += static_cast<double>(p[base + v]) + y[base + v];
        }
        inter[c] += i_acc;
        denom[c] += s_acc;
      }
  });
  double mean = 0.0;
  for (std::int64_t c = 0; c < L.classes; ++c) {
    dice[c] = (2.0 * inter[c] + eps) / (denom[c] + eps);
    mean += dice[c];
  }
  mean /= static_cast<double>(L.classes);
  if (dice_per_class) *dice_per_class = dice;
  Tensor y_copy = onehot;
  return make_result(
      "soft_dice", Tensor::scalar(1.0 - mean, probs.dtype()), {probs},
      [L, inter, denom, eps, y = std::move(y_copy)](detail::Node& self) {
        auto& parent = *self.parents[0];
        const double g = self.grad.item();
        Tensor gp(parent.value.shape(), parent.value.dtype());
        dispatch(gp.dtype(), [&]<class T>() {
          auto yv = y.data<T>();
          auto d = gp.data<T>();
          for (std::int64_t c = 0; c < L.classes; ++c) {
            const double s = denom[c] + eps, num = 2.0 * inter[c] + eps;
            const double k = -g / static_cast<double>(L.classes) / (s * s);
            for (std::int64_t b = 0; b < L.batch; ++b) {
              const std::int64_t base = (b * L.classes + c) * L.inner;
              for (std::int64_t v = 0; v < L.inner; ++v)
                d[base + v] = static_cast<T>(k * (2.0 * yv[base + v] * s - num));
            }
          }
        });
        detail::accumulate_grad(parent, std::move(gp));
      });
}

Var cross_entropy_loss(const Var& probs, const Tensor& onehot, double clamp) {
  const ClassLayout L = layout_of(probs.shape(), onehot.shape(), "cross_entropy_loss");
  if (onehot.dtype() != probs.dtype()) throw std::invalid_argument("cross_entropy_loss: dtype mismatch");
  const double n = static_cast<double>(L.batch * L.inner);
  double total = 0.0;
  dispatch(probs.dtype(), [&]<class T>() {
    auto p = probs.value().data<T>();
    auto y = onehot.data<T>();
    for (std::int64_t b = 0; b < L.batch; ++b)
      for (std::int64_t v = 0; v < L.inner; ++v) {
        double sum = 0.0;
        for (std::int64_t c = 0; c < L.classes; ++c) {
          const std::int64_t k = (b * L.classes + c) * L.inner + v;
          sum += p[k];
          if (y[k] != 0) total -= y[k] * std::log(std::max<double>(p[k], clamp));
        }
        if (std::abs(sum - 1.0) > kNormalizationTolerance)
          throw std::invalid_argument("cross_entropy_loss: class probabilities sum to " + std::to_string(sum) +
                                      " at voxel " + std::to_string(v) + " of batch element " + std::to_string(b) +
                                      " (expected softmax output)");
      }
  });
  Tensor y_copy = onehot;
  return make_result("cross_entropy", Tensor::scalar(total / n, probs.dtype()), {probs},
                     [n, clamp, y = std::move(y_copy)](detail::Node& self) {
                       auto& parent = *self.parents[0];
                       const double g = self.grad.item();
                       Tensor gp(parent.value.shape(), parent.value.dtype());
                       dispatch(gp.dtype(), [&]<class T>() {
                         auto p = parent.value.data<T>();
                         auto yv = y.data<T>();
                         auto d = gp.data<T>();
                         for (std::size_t k = 0; k < d.size(); ++k)
                           if (yv[k] != 0 && p[k] > clamp) d[k] = static_cast<T>(-g * yv[k] / (n * p[k]));
                       });
                       detail::accumulate_grad(parent, std::move(gp));
                     });
}

DiceCeTerms dice_ce_loss(const Var& logits, const Tensor& labels) {
  if (logits.shape().size() != 5) throw ShapeError("dice_ce_loss: expected logits [B, C, D, H, W]");
  const Var probs = ops::softmax(logits, 1);
  const Tensor y = one_hot(labels, static_cast<int>(logits.shape()[1]), logits.dtype());
  DiceCeTerms t;
  const Var dice = soft_dice_loss(probs, y, kDiceEps, &t.dice);
  const Var ce = cross_entropy_loss(probs, y);
  t.loss = ops::add(dice, ce);
  t.dice_loss = dice.value().item();
  t.cross_entropy = ce.value().item();
  return t;
}

LossReport joint_loss(const Var& logits_ct, const Tensor& labels_ct, const Var& logits_mri, const Tensor& labels_mri) {
  const DiceCeTerms ct = dice_ce_loss(logits_ct, labels_ct);
  const DiceCeTerms mri = dice_ce_loss(logits_mri, labels_mri);
  LossReport r;
  r.total = ops::add(ct.loss, mri.loss);
  r.loss_ct = ct.loss.value().item();
  r.loss_mri = mri.loss.value().item();
  r.loss_total = r.total.value().item();
  r.dice_ct = ct.dice;
  r.dice_mri = mri.dice;
  return r;
}

AdamW::AdamW(ParamList params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const auto& p : params_) {
    m_.emplace_back(p.var.shape(), p.var.dtype());
    v_.emplace_back(p.var.shape(), p.var.dtype());
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.var.zero_grad();
}

void AdamW::step() {
  for (const auto& p : params_) {
    if (!p.var.has_grad()) continue;
    const Tensor& g = p.var.grad();
    for (std::int64_t i = 0; i < g.numel(); ++i)
      if (!std::isfinite(g.at(i)))
        throw NonFiniteGradient("AdamW: non-finite gradient in parameter '" + p.name + "' at element " +
                                std::to_string(i) + "; step aborted");
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Var var = params_[k].var;
    if (!var.has_grad()) continue;
    dispatch(var.dtype(), [&]<class T>() {
      auto theta = var.mutable_value().data<T>();
      auto g = var.grad().data<T>();
      auto m = m_[k].data<T>();
      auto v = v_[k].data<T>();
      for (std::size_t i = 0; i < theta.size(); ++i) {
        const double gi = g[i];
        const double mi = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
        const double vi = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
        m[i] = static_cast<T>(mi);
        v[i] = static_cast<T>(vi);
        const double th = theta[i];
        theta[i] = static_cast<T>(th - cfg_.lr * ((mi / bc1) / (std::sqrt(vi / bc2) + cfg_.eps) + cfg_.weight_decay * th));
      }
    });
  }
}

std::vector<NamedParam> AdamW::state_tensors() const {
  std::vector<NamedParam> out;
  for (std::size_t k = 0; k < params_.size(); ++k) {
    out.push_back({"adam.m." + params_[k].name, Var(m_[k])});
    out.push_back({"adam.v." + params_[k].name, Var(v_[k])});
  }
  return out;
}

void AdamW::load_state(const std::vector<NamedParam>& records, std::int64_t step_count) {
  std::map<std::string, const Tensor*> byname;
  for (const auto& r : records) byname[r.name] = &r.var.value();
  for (std::size_t k = 0; k < params_.size(); ++k)
    for (auto [prefix, dst] : {std::pair{"adam.m.", &m_[k]}, std::pair{"adam.v.", &v_[k]}}) {
      const std::string name = prefix + params_[k].name;
      auto it = byname.find(name);
      if (it == byname.end()) throw std::runtime_error("optimizer state is missing '" + name + "'");
      if (it->second->shape() != dst->shape()) throw std::runtime_error("optimizer state '" + name + "' has wrong shape");
      *dst = it->second->to(dst->dtype());
    }
  t_ = step_count;
}

double PlateauScheduler::step(double metric, double lr) {
  if (!best_ || metric > *best_) {
    best_ = metric;
    bad_epochs_ = 0;
    return lr;
  }
  if (++bad_epochs_ >= cfg_.patience) {
    bad_epochs_ = 0;
    return std::max(lr * cfg_.factor, cfg_.min_lr);
  }
  return lr;
}

void write_epoch_log_header(std::ostream& os) {
  os << "epoch\tloss_ct\tloss_mri\tloss_total\tval_dice_ct\tval_dice_mri\tlr\n";
}

void write_epoch_log(std::ostream& os, const EpochLog& l) {
  const auto old = os.precision(10);
  os << l.epoch << '\t' << l.loss_ct << '\t' << l.loss_mri << '\t' << l.loss_total << '\t' << l.val_dice_ct << '\t'
     << l.val_dice_mri << '\t' << l.lr << '\n';
  os.precision(old);
}

Trainer::Trainer(AqcfNet& net, std::vector<VolumeSample> ct_pool, std::vector<VolumeSample> mri_pool,
                 TrainConfig cfg)
    : net_(net),
      ct_pool_(std::move(ct_pool)),
      mri_pool_(std::move(mri_pool)),
      cfg_(cfg),
      optimizer_(net.parameters(), cfg.adam),
      scheduler_(cfg.plateau),
      ct_rng_(Rng(cfg.seed).substream(11)),
      mri_rng_(Rng(cfg.seed).substream(12)) {
  if (ct_pool_.empty() || mri_pool_.empty()) throw std::invalid_argument("Trainer: empty cohort");
}

std::vector<std::size_t> Trainer::epoch_order(std::size_t pool, std::size_t steps, Rng& rng) const {
  std::vector<std::size_t> order;
  if (pool == steps) {
    order.resize(pool);
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = pool; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  } else {
    for (std::size_t i = 0; i < steps; ++i) order.push_back(rng.below(pool));
  }
  return order;
}

EpochLog Trainer::train_epoch(GateTraceSink* trace) {
  const std::size_t steps = std::max(ct_pool_.size(), mri_pool_.size());
  const auto ct_order = epoch_order(ct_pool_.size(), steps, ct_rng_);
  const auto mri_order = epoch_order(mri_pool_.size(), steps, mri_rng_);
  EpochLog log;
  log.epoch = ++epoch_;
  for (std::size_t s = 0; s < steps; ++s) {
    // 1-2: independent draws, each stream augmented and cropped with its own generator
    const VolumeSample ct = draw_sample(ct_pool_[ct_order[s]], ct_rng_, cfg_.sampler);
    const VolumeSample mri = draw_sample(mri_pool_[mri_order[s]], mri_rng_, cfg_.sampler);
    const Var x_ct(ct.image.reshaped({1, 1, ct.image.dim(1), ct.image.dim(2), ct.image.dim(3)}));
    const Var x_mri(mri.image.reshaped({1, 1, mri.image.dim(1), mri.image.dim(2), mri.image.dim(3)}));
    // 3: forward through both streams
    const ForwardResult out = net_.forward(x_ct, x_mri, trace);
    // 4-5: per-stream DiceCE, unweighted sum
    const LossReport loss = joint_loss(out.logits_ct, ct.label, out.logits_mri, mri.label);
    // 6
    optimizer_.zero_grad();
    backward(loss.total);
    optimizer_.step();
    log.loss_ct += loss.loss_ct;
    log.loss_mri += loss.loss_mri;
    log.loss_total += loss.loss_total;
  }
  log.loss_ct /= static_cast<double>(steps);
  log.loss_mri /= static_cast<double>(steps);
  log.loss_total /= static_cast<double>(steps);
  if (validator_) {
    const auto [dct, dmri] = validator_(net_);
    log.val_dice_ct = dct;
    log.val_dice_mri = dmri;
    optimizer_.set_lr(scheduler_.step(0.5 * (dct + dmri), optimizer_.lr()));
  } else {
    log.val_dice_ct = log.val_dice_mri = std::nan("");
  }
  log.lr = optimizer_.lr();
  history_.push_back(log);
  return log;
}

namespace {

json rng_to_json(const Rng& r) { return json::array({r.key(), r.counter()}); }
Rng rng_from_json(const json& j) { return Rng(j.at(0).get<std::uint64_t>(), j.at(1).get<std::uint64_t>()); }

json log_to_json(const EpochLog& l) {
  auto num = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
  return {{"epoch", l.epoch},
          {"loss_ct", l.loss_ct},
          {"loss_mri", l.loss_mri},
          {"loss_total", l.loss_total},
          {"val_dice_ct", num(l.val_dice_ct)},
          {"val_dice_mri", num(l.val_dice_mri)},
          {"lr", l.lr}};
}

EpochLog log_from_json(const json& j) {
  auto num = [](const json& v) { return v.is_null() ? std::nan("") : v.get<double>(); };
  EpochLog l;
  l.epoch = j.at("epoch").get<int>();
  l.loss_ct = j.at("loss_ct").get<double>();
  l.loss_mri = j.at("loss_mri").get<double>();
  l.loss_total = j.at("loss_total").get<double>();
  l.val_dice_ct = num(j.at("val_dice_ct"));
  l.val_dice_mri = num(j.at("val_dice_mri"));
  l.lr = j.at("lr").get<double>();
  return l;
}

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument(where + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key())) throw std::invalid_argument(where + ": unknown key '" + it.key() + "'");
}

}  // namespace

Checkpoint Trainer::checkpoint() const {
  json extras;
  json hist = json::array();
  for (const auto& l : history_) hist.push_back(log_to_json(l));
  const auto best = scheduler_.best();
  extras["trainer"] = {{"epoch", epoch_},
                       {"step", optimizer_.step_count()},
                       {"lr", optimizer_.lr()},
                       {"scheduler", {{"best", best ? json(*best) : json(nullptr)},
                                      {"epochs_since_improve", scheduler_.epochs_since_improve()}}},
                       {"rng", {{"ct", rng_to_json(ct_rng_)}, {"mri", rng_to_json(mri_rng_)}}},
                       {"config", json::parse(train_config_to_json(cfg_))},
                       {"history", hist}};
  Checkpoint ck = make_checkpoint(net_, extras.dump());
  for (auto& r : optimizer_.state_tensors()) ck.tensors.push_back(r);
  return ck;
}

void Trainer::resume(const Checkpoint& ck) {
  const json extras = json::parse(ck.extras);
  if (!extras.contains("trainer")) throw std::runtime_error("checkpoint carries no trainer state");
  const json& t = extras.at("trainer");
  load_parameters(net_, ck);
  optimizer_.load_state(ck.tensors, t.at("step").get<std::int64_t>());
  optimizer_.set_lr(t.at("lr").get<double>());
  const json& s = t.at("scheduler");
  scheduler_.restore(s.at("best").is_null() ? std::nullopt : std::optional<double>(s.at("best").get<double>()),
                     s.at("epochs_since_improve").get<int>());
  ct_rng_ = rng_from_json(t.at("rng").at("ct"));
  mri_rng_ = rng_from_json(t.at("rng").at("mri"));
  epoch_ = t.at("epoch").get<int>();
  history_.clear();
  for (const auto& l : t.at("history")) history_.push_back(log_from_json(l));
}

std::string train_config_to_json(const TrainConfig& c) {
  json j;
  j["epochs"] = c.epochs;
  j["seed"] = c.seed;
  j["adam"] = {{"lr", c.adam.lr},
               {"beta1", c.adam.beta1},
               {"beta2", c.adam.beta2},
               {"eps", c.adam.eps},
               {"weight_decay", c.adam.weight_decay}};
  j["plateau"] = {{"factor", c.plateau.factor}, {"patience", c.plateau.patience}, {"min_lr", c.plateau.min_lr}};
  j["sampler"] = {{"patch", c.sampler.patch},
                  {"augment", c.sampler.augment},
                  {"flip_probability", c.sampler.augment_cfg.flip_probability},
                  {"rotate", c.sampler.augment_cfg.rotate},
                  {"intensity_shift", c.sampler.augment_cfg.intensity_shift},
                  {"foreground_probability", c.sampler.foreground_probability}};
  return j.dump();
}

TrainConfig train_config_from_json(const std::string& text) {
  const json j = json::parse(text);
  reject_unknown(j, {"epochs", "seed", "adam", "plateau", "sampler"}, "training");
  TrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.seed = j.value("seed", c.seed);
  if (j.contains("adam")) {
    const json& a = j.at("adam");
    reject_unknown(a, {"lr", "beta1", "beta2", "eps", "weight_decay"}, "training.adam");
    c.adam.lr = a.value("lr", c.adam.lr);
    c.adam.beta1 = a.value("beta1", c.adam.beta1);
    c.adam.beta2 = a.value("beta2", c.adam.beta2);
    c.adam.eps = a.value("eps", c.adam.eps);
    c.adam.weight_decay = a.value("weight_decay", c.adam.weight_decay);
  }
  if (j.contains("plateau")) {
    const json& p = j.at("plateau");
    reject_unknown(p, {"factor", "patience", "min_lr"}, "training.plateau");
    c.plateau.factor = p.value("factor", c.plateau.factor);
    c.plateau.patience = p.value("patience", c.plateau.patience);
    c.plateau.min_lr = p.value("min_lr", c.plateau.min_lr);
  }
  if (j.contains("sampler")) {
    const json& s = j.at("sampler");
    reject_unknown(s, {"patch", "augment", "flip_probability", "rotate", "intensity_shift", "foreground_probability"},
                   "training.sampler");
    if (s.contains("patch")) c.sampler.patch = s.at("patch").get<Shape>();
    c.sampler.augment = s.value("augment", c.sampler.augment);
    c.sampler.augment_cfg.flip_probability = s.value("flip_probability", c.sampler.augment_cfg.flip_probability);
    c.sampler.augment_cfg.rotate = s.value("rotate", c.sampler.augment_cfg.rotate);
    c.sampler.augment_cfg.intensity_shift = s.value("intensity_shift", c.sampler.augment_cfg.intensity_shift);
    c.sampler.foreground_probability = s.value("foreground_probability", c.sampler.foreground_probability);
  }
  if (c.epochs < 0) throw std::invalid_argument("training.epochs must be >= 0");
  if (!(c.adam.lr > 0)) throw std::invalid_argument("training.adam.lr must be positive");
  if (c.plateau.patience < 1) throw std::invalid_argument("training.plateau.patience must be >= 1");
  return c;
}

}  // namespace aqcf
