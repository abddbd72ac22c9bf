#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mambo/checkpoint.hpp"
#include "mambo/config.hpp"
#include "mambo/data.hpp"
#include "mambo/losses.hpp"
#include "mambo/model.hpp"

namespace mambo {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// SGD with heavy-ball momentum and L2 weight decay folded into the gradient:
//   d = g + wd * p;  buf = momentum * buf + d;  p -= lr * buf
template <typename T>
class Sgd {
 public:
  Sgd(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}

  void step(ParameterStore<T>& store, double lr) {
    const auto& params = store.all();
    if (buffers_.empty())
      for (const auto& p : params) buffers_.emplace_back(p.size(), T(0));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor<T> p = params[i];
      if (!p.requires_grad() || !p.has_grad()) continue;
      auto v = p.mutable_values();
      auto g = p.grad();
      auto& buf = buffers_[i];
      for (std::size_t j = 0; j < v.size(); ++j) {
        const T d = g[j] + static_cast<T>(weight_decay_) * v[j];
        buf[j] = static_cast<T>(momentum_) * buf[j] + d;
        v[j] -= static_cast<T>(lr) * buf[j];
      }
    }
  }

  std::vector<std::vector<T>>& buffers() { return buffers_; }
  const std::vector<std::vector<T>>& buffers() const { return buffers_; }

 private:
  double momentum_;
  double weight_decay_;
  std::vector<std::vector<T>> buffers_;
};

// Per-epoch learning rate; cosine reaches exactly 0 at the last epoch.
inline double scheduled_lr(const TrainConfig& c, int epoch) {
  if (c.schedule == Schedule::constant || c.epochs <= 1) return c.lr;
  return c.lr * 0.5 * (1.0 + std::cos(M_PI * epoch / (c.epochs - 1)));
}

struct EpochRecord {
  int epoch = 0;
  double loss_total = 0, loss_bce = 0, loss_dice = 0, loss_kl = 0, loss_usd = 0;
  Metrics metrics{.auc = 0.0};  // running sum, then mean
  std::vector<double> step_losses;
};

inline const char* kMetricsCsvHeader = "epoch,loss_total,loss_bce,loss_dice,loss_kl,loss_usd,dice,iou,fdr,auc";

inline void write_csv_row(std::ostream& os, const EpochRecord& r) {
  os << r.epoch << ',' << r.loss_total << ',' << r.loss_bce << ',' << r.loss_dice << ',' << r.loss_kl << ','
     << r.loss_usd << ',' << r.metrics.dice << ',' << r.metrics.iou << ',' << r.metrics.fdr << ',' << r.metrics.auc
     << '\n';
}

namespace detail {

template <typename T>
Tensor<T> stack_images(const std::vector<SampleRecord>& batch, bool masks) {
  std::vector<const Raster*> ptrs;
  for (const auto& s : batch) ptrs.push_back(masks ? &s.mask : &s.image);
  return to_tensor<T>(ptrs);
}

inline void accumulate(Metrics& into, const Metrics& m) {
  into.dice += m.dice;
  into.iou += m.iou;
  into.fdr += m.fdr;
  into.auc += m.auc;
}

inline void scale(Metrics& m, double s) {
  m.dice *= s;
  m.iou *= s;
  m.fdr *= s;
  m.auc *= s;
}

inline Rng epoch_rng(std::uint64_t seed, int epoch) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch)};
  return Rng(seq);
}

}  // namespace detail

// Owns one model and its optimizer. All randomness of epoch e (order,
// augmentation, latent noise) derives from (seed, e), so a run resumed at an
// epoch boundary continues exactly like an uninterrupted one.
class Trainer {
 public:
  using Model = MamboNet<float>;

  explicit Trainer(TrainConfig config)
      : config_(validated(std::move(config))),
        model_(std::make_unique<Model>(config_.model(), *config_.seed)),
        sgd_(config_.momentum, config_.weight_decay) {}

  const TrainConfig& config() const { return config_; }
  Model& model() { return *model_; }
  const Model& model() const { return *model_; }
  int epochs_done() const { return epoch_; }

  // Called after every optimizer step with the global step index.
  void on_step(std::function<void(std::size_t)> cb) { step_cb_ = std::move(cb); }

  EpochRecord run_epoch(const Dataset& train) {
    if (train.empty()) throw TrainingError("training set is empty");
    Rng rng = detail::epoch_rng(*config_.seed, epoch_);
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    const double lr = scheduled_lr(config_, epoch_);

    EpochRecord rec;
    rec.epoch = epoch_;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += config_.batch) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config_.batch));
      std::vector<SampleRecord> batch;
      for (std::size_t i = start; i < end; ++i)
        batch.push_back(config_.augment ? augment(train[order[i]], rng) : train[order[i]]);
      const std::size_t step_in_epoch = start / config_.batch;
      try {
        auto images = detail::stack_images<float>(batch, false);
        auto masks = detail::stack_images<float>(batch, true);
        NoiseSource noise(rng());
        model_->parameters().zero_grad();
        auto pass = model_->forward(images, &masks, Mode::train, noise);
        auto loss = model_->losses(pass, masks);
        if (!std::isfinite(loss.total.item())) throw NonFiniteError("total loss is not finite");
        backward(loss.total);
        sgd_.step(model_->parameters(), lr);

        const double n = static_cast<double>(batch.size());
        rec.loss_total += n * loss.total.item();
        rec.loss_bce += n * loss.bce.item();
        rec.loss_dice += n * loss.dice.item();
        rec.loss_kl += n * loss.kl.item();
        rec.loss_usd += n * loss.usd.item();
        rec.step_losses.push_back(loss.total.item());
        for (std::size_t b = 0; b < batch.size(); ++b)
          detail::accumulate(rec.metrics, metrics(from_tensor(pass.prob, static_cast<int>(b)), batch[b].mask));
      } catch (const NonFiniteError& e) {
        throw TrainingError("non-finite value at epoch " + std::to_string(epoch_) + ", step " +
                            std::to_string(step_in_epoch) + ": " + e.what());
      }
      seen += batch.size();
      ++global_step_;
      if (step_cb_) step_cb_(global_step_);
    }
    const double inv = 1.0 / static_cast<double>(seen);
    rec.loss_total *= inv;
    rec.loss_bce *= inv;
    rec.loss_dice *= inv;
    rec.loss_kl *= inv;
    rec.loss_usd *= inv;
    detail::scale(rec.metrics, inv);
    ++epoch_;
    return rec;
  }

  // Runs the remaining epochs up to config().epochs.
  std::vector<EpochRecord> fit(const Dataset& train, const std::function<void(const EpochRecord&)>& on_epoch = {}) {
    std::vector<EpochRecord> out;
    while (epoch_ < config_.epochs) {
      out.push_back(run_epoch(train));
      if (on_epoch) on_epoch(out.back());
    }
    return out;
  }

  Checkpoint checkpoint() const {
    Checkpoint ck;
    ck.components = static_cast<std::uint32_t>(config_.components);
    ck.config_hash = model_hash(config_.model());
    append_parameters(ck, model_->parameters());
    const auto& params = model_->parameters().all();
    const auto& bufs = sgd_.buffers();
    for (std::size_t i = 0; i < bufs.size(); ++i)
      ck.records.push_back(make_record<float>("optim.momentum." + params[i].name(), params[i].shape(), bufs[i]));
    const double state[2] = {static_cast<double>(epoch_), static_cast<double>(global_step_)};
    ck.records.push_back(make_record<double>("train.state", {2}, std::span<const double>(state)));
    return ck;
  }

  void resume(const Checkpoint& ck) {
    check_compatible(ck, config_.model());
    restore_parameters(ck, model_->parameters());
    const auto& params = model_->parameters().all();
    auto& bufs = sgd_.buffers();
    bufs.clear();
    if (ck.find("optim.momentum." + params.front().name())) {
      for (const auto& p : params) {
        const auto* r = ck.find("optim.momentum." + p.name());
        if (!r) throw CheckpointError("checkpoint lacks momentum buffer for " + p.name());
        bufs.emplace_back(r->values.begin(), r->values.end());
      }
    }
    if (const auto* st = ck.find("train.state")) {
      epoch_ = static_cast<int>(st->values.at(0));
      global_step_ = static_cast<std::size_t>(st->values.at(1));
    }
  }

  static void check_compatible(const Checkpoint& ck, const ModelConfig& m) {
    if (static_cast<int>(ck.components) != m.components)
      throw CheckpointError("checkpoint K=" + std::to_string(ck.components) + " but config K=" +
                            std::to_string(m.components));
    if (ck.config_hash != model_hash(m)) throw CheckpointError("checkpoint config hash does not match the model config");
  }

 private:
  static TrainConfig validated(TrainConfig c) {
    c.validate();
    if (!c.seed) throw ConfigError("training requires an explicit seed");
    return c;
  }

  TrainConfig config_;
  std::unique_ptr<Model> model_;
  Sgd<float> sgd_;
  int epoch_ = 0;
  std::size_t global_step_ = 0;
  std::function<void(std::size_t)> step_cb_;
};

// Builds a float model from a checkpoint after checking K and the config hash.
inline std::unique_ptr<MamboNet<float>> load_model(const Checkpoint& ck, const ModelConfig& m) {
  Trainer::check_compatible(ck, m);
  auto model = std::make_unique<MamboNet<float>>(m, 0);
  restore_parameters(ck, model->parameters());
  return model;
}

// Foreground probabilities in inference mode: posterior head off, latent
// noise zero unless `stochastic` (then seeded by `seed`).
template <typename T>
std::vector<Raster> predict(const MamboNet<T>& model, const Dataset& data, bool stochastic = false,
                            std::uint64_t seed = 0, std::size_t batch = 16) {
  std::vector<Raster> out;
  NoiseSource noise = stochastic ? NoiseSource(seed) : NoiseSource::zero();
  for (std::size_t start = 0; start < data.size(); start += batch) {
    const std::size_t end = std::min(data.size(), start + batch);
    std::vector<SampleRecord> chunk(data.begin() + static_cast<std::ptrdiff_t>(start),
                                    data.begin() + static_cast<std::ptrdiff_t>(end));
    auto pass = model.forward(detail::stack_images<T>(chunk, false), nullptr, Mode::inference, noise);
    for (std::size_t b = 0; b < chunk.size(); ++b) out.push_back(from_tensor(pass.prob, static_cast<int>(b)));
  }
  return out;
}

struct ImageMetrics {
  std::string stem;
  Metrics metrics;
};

struct Evaluation {
  std::vector<ImageMetrics> per_image;
  Metrics mean{.auc = 0.0};
  std::size_t undefined_auc = 0;
};

// Per-image metrics, averaged over the set in dataset order.
template <typename T>
Evaluation evaluate(const MamboNet<T>& model, const Dataset& data, bool stochastic = false, std::uint64_t seed = 0) {
  Evaluation ev;
  const auto preds = predict(model, data, stochastic, seed);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto m = metrics(preds[i], data[i].mask);
    if (!m.auc_defined) ++ev.undefined_auc;
    ev.per_image.push_back({data[i].stem, m});
    detail::accumulate(ev.mean, m);
  }
  if (!data.empty()) detail::scale(ev.mean, 1.0 / static_cast<double>(data.size()));
  return ev;
}

inline void write_evaluation_csv(std::ostream& os, const Evaluation& ev) {
  os << "image,dice,iou,fdr,auc\n";
  for (const auto& r : ev.per_image)
    os << r.stem << ',' << r.metrics.dice << ',' << r.metrics.iou << ',' << r.metrics.fdr << ',' << r.metrics.auc << '\n';
  os << "mean," << ev.mean.dice << ',' << ev.mean.iou << ',' << ev.mean.fdr << ',' << ev.mean.auc << '\n';
}

// Synthetic data or an ingested directory, as selected by config.dataset.
inline Dataset load_dataset(const TrainConfig& c, std::vector<std::string>* problems = nullptr) {
  if (c.dataset == "synthetic") {
    if (!c.seed) throw ConfigError("synthetic data needs a seed");
    return generate_synthetic(c.samples, c.image_size, *c.seed);
  }
  auto r = ingest(c.dataset);
  if (problems) {
    problems->insert(problems->end(), r.errors.begin(), r.errors.end());
    problems->insert(problems->end(), r.warnings.begin(), r.warnings.end());
  }
  if (r.samples.empty()) throw ConfigError("dataset " + c.dataset + " holds no usable samples");
  const auto& first = r.samples.front().image;
  for (const auto& s : r.samples)
    if (!s.image.same_shape(first)) throw ConfigError("dataset " + c.dataset + " mixes image sizes");
  return r.samples;
}

struct AblationRow {
  std::string label;
  Metrics metrics;
};

// Seeded train/test split, train, evaluate on the held-out part.
inline Metrics train_and_test(const TrainConfig& c, const Dataset& data) {
  const auto split = split_indices(data.size(), c.split_fraction, *c.seed);
  Trainer t(c);
  t.fit(subset(data, split.train));
  return evaluate(t.model(), subset(data, split.test), c.stochastic_inference, *c.seed).mean;
}

inline std::vector<AblationRow> ablate_k(const TrainConfig& c, const std::vector<int>& ks, const Dataset& data) {
  if (ks.empty()) throw ConfigError("k list is empty");
  std::vector<AblationRow> rows;
  for (int k : ks) {
    TrainConfig ck = c;
    ck.components = k;
    rows.push_back({std::to_string(k), train_and_test(ck, data)});
  }
  return rows;
}

inline std::vector<AblationRow> ablate_modules(const TrainConfig& c, const Dataset& data) {
  const std::pair<const char*, std::pair<bool, bool>> variants[] = {
      {"backbone", {false, false}}, {"backbone+gsm", {true, false}},
      {"backbone+cibm", {false, true}}, {"backbone+gsm+cibm", {true, true}}};
  std::vector<AblationRow> rows;
  for (const auto& [label, flags] : variants) {
    TrainConfig v = c;
    v.use_gsm = flags.first;
    v.use_cibm = flags.second;
    rows.push_back({label, train_and_test(v, data)});
  }
  return rows;
}

inline void write_ablation_csv(std::ostream& os, const std::string& first_column, const std::vector<AblationRow>& rows) {
  os << first_column << ",Dice,IoU,FDR,AUC\n";
  for (const auto& r : rows)
    os << r.label << ',' << r.metrics.dice << ',' << r.metrics.iou << ',' << r.metrics.fdr << ',' << r.metrics.auc << '\n';
}

// Writes <stem>.entropy.pgm (binary entropy of the prediction, 1 bit -> 255).
template <typename T>
std::vector<std::filesystem::path> emit_entropy_maps(const MamboNet<T>& model, const Dataset& data,
                                                     const std::filesystem::path& outdir) {
  std::error_code ec;
  std::filesystem::create_directories(outdir, ec);
  if (ec || !std::filesystem::is_directory(outdir))
    throw std::runtime_error("cannot create output directory " + outdir.string());
  const auto preds = predict(model, data);
  std::vector<std::filesystem::path> written;
  for (std::size_t i = 0; i < data.size(); ++i) {
    auto path = outdir / (data[i].stem + ".entropy.pgm");
    write_pgm(path, entropy_map(preds[i]));
    written.push_back(std::move(path));
  }
  return written;
}

}  // namespace mambo
