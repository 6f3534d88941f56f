#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <functional>
#include <limits>
#include <map>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "metaphor/data.hpp"
#include "metaphor/embed_io.hpp"
#include "metaphor/models.hpp"
#include "metaphor/optim.hpp"

namespace metaphor {

struct EncodedExample {
  Encoded encoded;
  int label = 0;
};

inline std::vector<EncodedExample> encode_corpus(const LabeledCorpus& corpus, const Vocab& vocab, std::size_t max_len) {
  std::vector<EncodedExample> out;
  out.reserve(corpus.size());
  for (const auto& ex : corpus.examples) out.push_back({encode(ex.tokens, vocab, max_len), ex.label});
  return out;
}

struct TrainOptions {
  AdamOptions adam;
  std::size_t batch = 32;
  std::size_t epochs = 20;
  std::uint64_t seed = 1;
  bool track_train_accuracy = false;
  bool stop_when_perfect = false;  // end early once train accuracy reaches 1
};

struct EpochStats {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  double train_accuracy = std::numeric_limits<double>::quiet_NaN();
};

template <std::floating_point Real>
int predict_label(const Model<Real>& model, const EncodedExample& ex) {
  return predict_proba(model, ex.encoded.ids, ex.encoded.valid_length) > Real(0.5) ? 1 : 0;
}

template <std::floating_point Real>
Metrics evaluate(const Model<Real>& model, std::span<const EncodedExample> data, std::span<const std::size_t> indices) {
  std::vector<int> preds, labels;
  preds.reserve(indices.size());
  labels.reserve(indices.size());
  for (std::size_t i : indices) {
    preds.push_back(predict_label(model, data[i]));
    labels.push_back(data[i].label);
  }
  return compute_metrics(preds, labels);
}

/// Mini-batch Adam on the mean per-sentence negative log likelihood. Each
/// mini-batch is one graph.
template <std::floating_point Real>
std::vector<EpochStats> train(Model<Real>& model, std::span<const EncodedExample> data,
                              std::span<const std::size_t> indices, const TrainOptions& options,
                              const std::function<void(const EpochStats&)>& on_epoch = {}) {
  if (options.batch == 0) throw ConfigError("batch size must be positive");
  if (indices.empty()) throw DataError("training set is empty");
  std::vector<Tensor<Real>> params = model.parameters();
  AdamState<Real> adam = adam_init(params, options.adam);
  Rng order_rng(derive_seed(options.seed, "shuffle"));
  Rng dropout_rng(derive_seed(options.seed, "dropout"));
  std::vector<std::size_t> order(indices.begin(), indices.end());
  std::vector<EpochStats> history;

  for (std::size_t epoch = 1; epoch <= options.epochs; ++epoch) {
    order_rng.shuffle(std::span<std::size_t>(order));
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += options.batch) {
      const std::size_t end = std::min(order.size(), start + options.batch);
      const Real inv_batch = Real(1) / static_cast<Real>(end - start);
      zero_grads(params);
      std::vector<SentenceRef> refs;
      for (std::size_t i = start; i < end; ++i) {
        const EncodedExample& ex = data[order[i]];
        refs.push_back({ex.encoded.ids, ex.encoded.valid_length});
      }
      Graph<Real> g;
      const auto logits = forward_batch(g, model, std::span<const SentenceRef>(refs), Mode::train, dropout_rng);
      Tensor<Real> total;
      for (std::size_t i = start; i < end; ++i) {
        Tensor<Real> loss = bce_loss(g, logits[i - start], data[order[i]].label);
        loss_sum += static_cast<double>(loss.item());
        total = total.defined() ? add(g, total, loss) : loss;
      }
      g.backward(scale(g, total, inv_batch));
      adam_step(adam);
    }
    EpochStats stats;
    stats.epoch = epoch;
    stats.mean_loss = loss_sum / static_cast<double>(order.size());
    if (options.track_train_accuracy || options.stop_when_perfect) {
      stats.train_accuracy = evaluate(model, data, indices).accuracy;
    }
    history.push_back(stats);
    if (on_epoch) on_epoch(stats);
    if (options.stop_when_perfect && stats.train_accuracy == 1.0) break;
  }
  for (auto& p : params) p.clear_grad();
  return history;
}

struct CrossvalResult {
  std::vector<Metrics> folds;
  double accuracy = 0.0;  // unweighted mean over folds
  double f1 = 0.0;
  double macro_f1 = 0.0;
  double seconds = 0.0;
};

/// Runs `jobs` independent tasks on up to `workers` threads. The first
/// exception (by task index) is rethrown after all threads finish.
inline void run_parallel(std::size_t jobs, std::size_t workers, const std::function<void(std::size_t)>& task) {
  workers = std::max<std::size_t>(1, std::min(workers, jobs));
  std::vector<std::exception_ptr> errors(jobs);
  if (workers == 1) {
    for (std::size_t i = 0; i < jobs; ++i) {
      try {
        task(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < jobs; i = next++) {
          try {
            task(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    }
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

struct CrossvalOptions {
  std::size_t folds = 10;
  bool stratified = true;
  std::size_t workers = 1;
};

/// k-fold cross-validation: one freshly initialized model per fold, trained on
/// the other k-1 folds and scored on the held-out one. Fold seeds depend only
/// on the base seed and the fold index, so results do not depend on `workers`.
template <std::floating_point Real>
CrossvalResult crossval(std::span<const EncodedExample> data, const EmbeddingMatrix<Real>& embedding,
                        const ModelConfig& config, const TrainOptions& train_options, const CrossvalOptions& cv) {
  const auto started = std::chrono::steady_clock::now();
  std::vector<int> labels;
  labels.reserve(data.size());
  for (const auto& ex : data) labels.push_back(ex.label);
  const FoldPlan plan = stratified_kfold(labels, cv.folds, config.seed, cv.stratified);

  CrossvalResult result;
  result.folds.resize(cv.folds);
  run_parallel(cv.folds, cv.workers, [&](std::size_t fold) {
    ModelConfig fold_config = config;
    fold_config.seed = derive_seed(config.seed, 1000 + fold);
    TrainOptions fold_train = train_options;
    fold_train.seed = derive_seed(train_options.seed, 2000 + fold);
    Model<Real> model = build(fold_config, embedding);
    const auto train_idx = plan.training(fold);
    const auto test_idx = plan.held_out(fold);
    train(model, data, train_idx, fold_train);
    result.folds[fold] = evaluate(model, data, test_idx);
  });
  for (const auto& m : result.folds) {
    result.accuracy += m.accuracy;
    result.f1 += m.f1;
    result.macro_f1 += m.macro_f1();
  }
  const double k = static_cast<double>(cv.folds);
  result.accuracy /= k;
  result.f1 /= k;
  result.macro_f1 /= k;
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return result;
}

// ---------------------------------------------------------------------------
// reports

struct RunRow {
  std::string model;
  std::string architecture;
  std::size_t dim = 0;
  bool fine_tune = false;
  double accuracy = 0.0;
  double f1 = 0.0;
  double macro_f1 = 0.0;
  std::size_t folds = 0;
  double lr = 0.0;
  std::size_t batch = 0;
  std::size_t epochs = 0;
  std::uint64_t seed = 0;
  double seconds = 0.0;
  bool timed = false;
  std::size_t max_len = 0;
  std::vector<Metrics> fold_metrics;
};

inline RunRow make_row(const ModelConfig& config, const TrainOptions& train, const CrossvalResult& cv, bool timed,
                       std::uint64_t seed) {
  RunRow r;
  r.model = config.display_name();
  r.architecture = architecture_key(config.architecture);
  r.dim = config.embedding_dim;
  r.fine_tune = config.fine_tune;
  r.accuracy = cv.accuracy;
  r.f1 = cv.f1;
  r.macro_f1 = cv.macro_f1;
  r.folds = cv.folds.size();
  r.lr = train.adam.lr;
  r.batch = train.batch;
  r.epochs = train.epochs;
  r.seed = seed;
  r.seconds = cv.seconds;
  r.timed = timed;
  r.max_len = config.max_len;
  r.fold_metrics = cv.folds;
  return r;
}

namespace detail {

inline std::string fixed6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

inline std::string general(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

inline const char* report_header() {
  return "model,D,fine_tune,accuracy,f1,folds,lr,batch,epochs,seed,seconds,max_len,macro_f1,fold_accuracy,fold_f1";
}

/// `seconds` is left empty unless the row was produced with timing enabled,
/// so repeated runs give byte-identical reports.
inline void write_report(std::ostream& out, const std::vector<RunRow>& rows) {
  out << report_header() << '\n';
  for (const auto& r : rows) {
    std::string fold_acc, fold_f1;
    for (std::size_t i = 0; i < r.fold_metrics.size(); ++i) {
      if (i) {
        fold_acc += ';';
        fold_f1 += ';';
      }
      fold_acc += detail::fixed6(r.fold_metrics[i].accuracy);
      fold_f1 += detail::fixed6(r.fold_metrics[i].f1);
    }
    out << r.model << ',' << r.dim << ',' << (r.fine_tune ? "true" : "false") << ',' << detail::fixed6(r.accuracy)
        << ',' << detail::fixed6(r.f1) << ',' << r.folds << ',' << detail::general(r.lr) << ',' << r.batch << ','
        << r.epochs << ',' << r.seed << ',' << (r.timed ? detail::fixed6(r.seconds) : std::string()) << ','
        << r.max_len << ',' << detail::fixed6(r.macro_f1) << ',' << fold_acc << ',' << fold_f1 << '\n';
  }
}

/// Best row per (model, fine-tune mode), ranked by accuracy then F1, earliest
/// row on ties. The overall best row of each model is starred.
inline void write_summary(std::ostream& out, const std::vector<RunRow>& rows) {
  std::vector<std::string> models;
  for (const auto& r : rows) {
    if (std::find(models.begin(), models.end(), r.model) == models.end()) models.push_back(r.model);
  }
  auto better = [](const RunRow& a, const RunRow& b) {
    return a.accuracy > b.accuracy || (a.accuracy == b.accuracy && a.f1 > b.f1);
  };
  char line[160];
  std::snprintf(line, sizeof line, "%-36s %-9s %-9s\n", "Model", "Accuracy", "F1-score");
  out << line;
  for (const auto& name : models) {
    const RunRow* best_overall = nullptr;
    std::vector<const RunRow*> picks;
    for (bool ft : {false, true}) {
      const RunRow* best = nullptr;
      for (const auto& r : rows) {
        if (r.model != name || r.fine_tune != ft) continue;
        if (!best || better(r, *best)) best = &r;
      }
      if (!best) continue;
      picks.push_back(best);
      if (!best_overall || better(*best, *best_overall)) best_overall = best;
    }
    for (const RunRow* r : picks) {
      std::string label = r->model + (r->fine_tune ? ", fine-tuning" : "") + " (D=" + std::to_string(r->dim) + ")";
      if (r == best_overall) label += " *";
      std::snprintf(line, sizeof line, "%-36s %-9.2f %-9.2f\n", label.c_str(), r->accuracy, r->f1);
      out << line;
    }
  }
}

}  // namespace metaphor
