#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <memory>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "caga/dataio.hpp"
#include "caga/model.hpp"
#include "caga/ops.hpp"

namespace caga {

// ---- focal loss --------------------------------------------------------

struct FocalLossConfig {
    double gamma = 2.0;
    std::vector<double> alpha;  // per-class weight; empty means all ones

    void validate(std::size_t num_classes) const {
        if (gamma < 0.0) throw ContractError("FocalLossConfig: gamma must be >= 0");
        if (!alpha.empty() && alpha.size() != num_classes)
            throw ContractError("FocalLossConfig: alpha has " + std::to_string(alpha.size()) +
                                " entries for " + std::to_string(num_classes) + " classes");
        for (double a : alpha)
            if (a < 0.0) throw ContractError("FocalLossConfig: alpha must be nonnegative");
    }
};

// Mean over the batch of -alpha_t * (1 - p_t)^gamma * log(p_t) with p_t the
// softmax probability of the true class. Reduces to cross-entropy at
// gamma = 0, alpha = 1.
template <typename T>
Tensor<T> focal_loss(const Tensor<T>& logits, const std::vector<int>& targets,
                     const FocalLossConfig& cfg) {
    if (logits.rank() != 2)
        throw ShapeError("focal_loss: expected (B,C) logits, got " + shape_str(logits.shape()));
    const std::size_t B = logits.extent(0), C = logits.extent(1);
    if (targets.size() != B)
        throw ContractError("focal_loss: " + std::to_string(targets.size()) +
                            " targets for batch of " + std::to_string(B));
    cfg.validate(C);
    for (int t : targets)
        if (t < 0 || static_cast<std::size_t>(t) >= C)
            throw ContractError("focal_loss: target " + std::to_string(t) +
                                " outside [0," + std::to_string(C) + ")");

    const double gamma = cfg.gamma;
    const std::vector<double> alpha = cfg.alpha;  // by value: backward may outlive cfg
    auto alpha_at = [alpha](int t) {
        return alpha.empty() ? 1.0 : alpha[static_cast<std::size_t>(t)];
    };

    std::vector<double> probs(B * C);  // cached softmax rows for backward
    double total = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
        const T* row = logits.data() + b * C;
        double mx = static_cast<double>(row[0]);
        for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, static_cast<double>(row[c]));
        double sum = 0.0;
        for (std::size_t c = 0; c < C; ++c)sum += std::exp(static_cast<double>(row[c]) - mx);
        const double lse = mx + std::log(sum);
        for (std::size_t c = 0; c < C; ++c)
            probs[b * C + c] = std::exp(static_cast<double>(row[c]) - lse);
        const int t = targets[b];
        const double logp = static_cast<double>(row[t]) - lse;
        const double u = std::exp(logp);
        const double e = 1.0 - u;
        const double focal = gamma == 0.0 ? 1.0 : std::pow(std::max(e, 0.0), gamma);
        total += -alpha_at(t) * focal * logp;
    }
    Tensor<T> loss = Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(B)));

    record_op(logits.requires_grad(), loss, "focal_loss",
              [ld = logits.ptr(), od = loss.ptr(), probs, targets, gamma, B, C, alpha_at] {
                  if (!ld->requires_grad) return;
                  ld->ensure_grad();
                  const double go = static_cast<double>(od->g[0]) / static_cast<double>(B);
                  for (std::size_t b = 0; b < B; ++b) {
                      const int t = targets[b];
                      const double u = probs[b * C + static_cast<std::size_t>(t)];
                      const double e = std::max(1.0 - u, 0.0);
                      const double logu = std::log(std::max(u, 1e-300));
                      const double pow_g = std::pow(e, gamma);
                      const double pow_gm1 =
                          (gamma == 0.0 || e <= 0.0) ? 0.0 : std::pow(e, gamma - 1.0);
                      const double coef =
                          alpha_at(t) * (gamma * pow_gm1 * u * logu - pow_g);
                      for (std::size_t c = 0; c < C; ++c) {
                          const double delta = (static_cast<int>(c) == t) ? 1.0 : 0.0;
                          ld->g[b * C + c] +=
                              static_cast<T>(go * coef * (delta - probs[b * C + c]));
                      }
                  }
              });
    return loss;
}

// ---- optimizer and schedule ---------------------------------------------

template <typename T>
struct AdamWState {
    std::vector<std::vector<T>> m, v;
    long long step = 0;
};

struct AdamWHyper {
    double lr = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

// Decoupled weight decay (applied to the parameter directly), then moment
// updates with bias correction.
template <typename T>
void adamw_step(ParamRegistry<T>& reg, AdamWState<T>& state, const AdamWHyper& hp) {
    if (state.m.empty()) {
        for (auto& [name, p] : reg.params) {
            state.m.emplace_back(p.size(), T(0));
            state.v.emplace_back(p.size(), T(0));
        }
    }
    ++state.step;
    const double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(state.step));
    for (std::size_t pi = 0; pi < reg.params.size(); ++pi) {
        Tensor<T>& p = reg.params[pi].second;
        const bool has_grad = p.has_grad();
        const std::vector<T>* gv = has_grad ? &p.grad() : nullptr;
        std::vector<T>& m = state.m[pi];
        std::vector<T>& v = state.v[pi];
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double g = gv ? static_cast<double>((*gv)[i]) : 0.0;
            double mi = static_cast<double>(m[i]) * hp.beta1 + (1.0 - hp.beta1) * g;
            double vi = static_cast<double>(v[i]) * hp.beta2 + (1.0 - hp.beta2) * g * g;
            m[i] = static_cast<T>(mi);
            v[i] = static_cast<T>(vi);
            double x = static_cast<double>(p[i]);
            x *= 1.0 - hp.lr * hp.weight_decay;
            x -= hp.lr * (mi / bc1) / (std::sqrt(vi / bc2) + hp.eps);
            p[i] = static_cast<T>(x);
        }
    }
}

inline double lr_at_epoch(double lr0, double gamma, int epoch) {
    if (epoch < 0) throw ContractError("lr_at_epoch: epoch must be >= 0");
    return lr0 * std::pow(gamma, static_cast<double>(epoch));
}

// True when the monitored value (lower is better) has not strictly improved
// on its running best for `patience` consecutive entries.
inline bool early_stop_check(const std::vector<double>& history, int patience) {
    if (history.empty()) throw ContractError("early_stop_check: empty history");
    if (patience < 1) throw ContractError("early_stop_check: patience must be >= 1");
    double best = history[0];
    int since = 0;
    for (std::size_t i = 1; i < history.size(); ++i) {
        if (history[i] < best) {
            best = history[i];
            since = 0;
        } else {
            ++since;
        }
    }
    return since >= patience;
}

// ---- cross-validation splits ---------------------------------------------

struct FoldIndices {
    std::vector<std::size_t> train, val, test;
};

// k disjoint stratified test folds covering all samples; the remainder splits
// 80/20 into train/validation per class. Deterministic in (N, k, seed,
// labels). For N=400 balanced over 4 classes and k=10 this yields the
// 288/72/40 fold sizes.
inline std::vector<FoldIndices> kfold_split(std::size_t num_samples, int k,
                                            unsigned long long seed,
                                            const std::vector<int>& labels) {
    if (k < 2) throw ContractError("kfold_split: k must be >= 2");
    if (num_samples < static_cast<std::size_t>(k))
        throw ContractError("kfold_split: fewer samples than folds");
    if (labels.size() != num_samples)
        throw ContractError("kfold_split: labels/sample count mismatch");
    int num_classes = 0;
    for (int l : labels) {
        if (l < 0) throw ContractError("kfold_split: negative label");
        num_classes = std::max(num_classes, l + 1);
    }
    std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(num_classes));
    for (std::size_t i = 0; i < num_samples; ++i)
        by_class[static_cast<std::size_t>(labels[i])].push_back(i);
    for (std::size_t c = 0; c < by_class.size(); ++c)
        if (by_class[c].size() < static_cast<std::size_t>(k))
            throw ContractError("kfold_split: class " + std::to_string(c) + " has " +
                                std::to_string(by_class[c].size()) + " samples, fewer than k=" +
                                std::to_string(k));
    Rng rng(seed);
    for (auto& cls : by_class) rng.shuffle(cls);

    std::vector<FoldIndices> folds(static_cast<std::size_t>(k));
    for (int f = 0; f < k; ++f) {
        for (const auto& cls : by_class) {
            std::vector<std::size_t> rest;
            for (std::size_t j = 0; j < cls.size(); ++j) {
                if (static_cast<int>(j % static_cast<std::size_t>(k)) == f)
                    folds[static_cast<std::size_t>(f)].test.push_back(cls[j]);
                else
                    rest.push_back(cls[j]);
            }
            const std::size_t val_n =
                static_cast<std::size_t>(std::llround(0.2 * static_cast<double>(rest.size())));
            for (std::size_t j = 0; j < rest.size(); ++j) {
                if (j < val_n)
                    folds[static_cast<std::size_t>(f)].val.push_back(rest[j]);
                else
                    folds[static_cast<std::size_t>(f)].train.push_back(rest[j]);
            }
        }
    }
    return folds;
}

// ---- metrics --------------------------------------------------------------

struct MetricsReport {
    double accuracy = 0.0;
    double macro_precision = 0.0;
    double macro_recall = 0.0;
    double macro_f1 = 0.0;
    std::vector<double> per_class_accuracy;
    std::vector<std::vector<long long>> confusion;  // [true][predicted]
};

// Macro averages run over all classes; zero-support (and zero-predicted)
// classes contribute 0 to the averages. Per-class accuracy is per-class
// recall.
inline MetricsReport compute_metrics(const std::vector<int>& predictions,
                                     const std::vector<int>& labels, int num_classes) {
    if (predictions.empty() || predictions.size() != labels.size())
        throw ContractError("compute_metrics: empty or mismatched inputs");
    const std::size_t C = static_cast<std::size_t>(num_classes);
    MetricsReport r;
    r.confusion.assign(C, std::vector<long long>(C, 0));
    long long correct = 0;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        const int p = predictions[i], l = labels[i];
        if (p < 0 || p >= num_classes || l < 0 || l >= num_classes)
            throw ContractError("compute_metrics: class index out of range");
        r.confusion[static_cast<std::size_t>(l)][static_cast<std::size_t>(p)]++;
        if (p == l) ++correct;
    }
    r.accuracy = static_cast<double>(correct) / static_cast<double>(predictions.size());
    r.per_class_accuracy.assign(C, 0.0);
    for (std::size_t c = 0; c < C; ++c) {
        long long support = 0, predicted = 0;
        for (std::size_t j = 0; j < C; ++j) {
            support += r.confusion[c][j];
            predicted += r.confusion[j][c];
        }
        const long long tp = r.confusion[c][c];
        const double prec = predicted > 0 ? static_cast<double>(tp) / predicted : 0.0;
        const double rec = support > 0 ? static_cast<double>(tp) / support : 0.0;
        const double f1 = (prec + rec) > 0.0 ? 2.0 * prec * rec / (prec + rec) : 0.0;
        r.macro_precision += prec;
        r.macro_recall += rec;
        r.macro_f1 += f1;
        r.per_class_accuracy[c] = rec;
    }
    r.macro_precision /= static_cast<double>(C);
    r.macro_recall /= static_cast<double>(C);
    r.macro_f1 /= static_cast<double>(C);
    return r;
}

struct MeanStd {
    double mean = 0.0;
    double std = 0.0;
};

struct FoldSummary {
    std::vector<MetricsReport> folds;
    MeanStd accuracy, precision, recall, f1;
    std::vector<MeanStd> per_class_accuracy;
};

// Sample (n-1) standard deviation; a single fold reports std 0 by convention.
inline MeanStd mean_std(const std::vector<double>& xs) {
    MeanStd ms;
    const double n = static_cast<double>(xs.size());
    for (double x : xs) ms.mean += x;
    ms.mean /= n;
    if (xs.size() > 1) {
        double s = 0.0;
        for (double x : xs) s += (x - ms.mean) * (x - ms.mean);
        ms.std = std::sqrt(s / (n - 1.0));
    }
    return ms;
}

inline FoldSummary aggregate_folds(const std::vector<MetricsReport>& reports) {
    if (reports.empty()) throw ContractError("aggregate_folds: no reports");
    FoldSummary s;
    s.folds = reports;
    auto collect = [&reports](auto proj) {
        std::vector<double> xs;
        for (const auto& r : reports) xs.push_back(proj(r));
        return mean_std(xs);
    };
    s.accuracy = collect([](const MetricsReport& r) { return r.accuracy; });
    s.precision = collect([](const MetricsReport& r) { return r.macro_precision; });
    s.recall = collect([](const MetricsReport& r) { return r.macro_recall; });
    s.f1 = collect([](const MetricsReport& r) { return r.macro_f1; });
    const std::size_t C = reports[0].per_class_accuracy.size();
    for (std::size_t c = 0; c < C; ++c)
        s.per_class_accuracy.push_back(collect(
            [c](const MetricsReport& r) { return r.per_class_accuracy[c]; }));
    return s;
}

// ---- training loop ---------------------------------------------------------

struct TrainConfig {
    double lr = 1e-5;
    double lr_gamma = 0.95;
    double weight_decay = 0.01;
    double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
    int batch_size = 16;
    int max_epochs = 50;
    int patience = 10;
    std::string monitor = "val_loss";
    double focal_gamma = 2.0;
    std::vector<double> focal_alpha;  // empty = uniform
    unsigned long long seed = kDefaultSeed;
    bool augment = false;
    bool restore_best = true;

    void validate() const {
        if (lr <= 0 || lr_gamma <= 0 || batch_size < 1 || max_epochs < 1)
            throw ConfigError("TrainConfig: rates and sizes must be positive");
        if (weight_decay < 0) throw ConfigError("TrainConfig: weight_decay must be >= 0");
        if (patience < 1) throw ConfigError("TrainConfig: patience must be >= 1");
        if (monitor != "val_loss")
            throw ConfigError("TrainConfig: unsupported monitor '" + monitor + "'");
    }
};

template <typename T>
struct TrainOutcome {
    MetricsReport test_metrics;
    double train_accuracy = 0.0;
    double test_loss = 0.0;
    std::vector<double> val_loss_history;
    int epochs_run = 0;
    bool early_stopped = false;
    NormStats norm_stats;
};

namespace detail {

template <typename T>
Tensor<T> make_batch(const std::vector<Tensor<T>>& images,
                     const std::vector<std::size_t>& idx, std::size_t lo, std::size_t hi) {
    const std::size_t B = hi - lo;
    const Shape& s = images[idx[lo]].shape();
    Tensor<T> batch = Tensor<T>::zeros({B, s[0], s[1], s[2]});
    const std::size_t n = numel(s);
    for (std::size_t b = 0; b < B; ++b)
        std::copy_n(images[idx[lo + b]].data(), n, batch.data() + b * n);
    return batch;
}

} // namespace detail

// Mean focal loss and metrics over a sample list, eval mode, no gradients.
template <typename T>
std::pair<double, MetricsReport> evaluate_model(Model<T>& model,
                                                const std::vector<Tensor<T>>& images,
                                                const std::vector<int>& labels,
                                                const FocalLossConfig& flc, int batch_size) {
    if (images.empty()) throw ContractError("evaluate_model: no samples");
    std::vector<std::size_t> idx(images.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::vector<int> preds;
    double loss_sum = 0.0;
    for (std::size_t lo = 0; lo < idx.size(); lo += static_cast<std::size_t>(batch_size)) {
        const std::size_t hi = std::min(idx.size(), lo + static_cast<std::size_t>(batch_size));
        Tensor<T> batch = detail::make_batch(images, idx, lo, hi);
        Tensor<T> logits = model.forward(batch, /*training=*/false);
        std::vector<int> targets(labels.begin() + static_cast<std::ptrdiff_t>(lo),
                                 labels.begin() + static_cast<std::ptrdiff_t>(hi));
        loss_sum += static_cast<double>(focal_loss(logits, targets, flc).item()) *
                    static_cast<double>(hi - lo);
        for (int p : Model<T>::predict(logits)) preds.push_back(p);
    }
    const int num_classes = model.config().num_classes;
    return {loss_sum / static_cast<double>(images.size()),
            compute_metrics(preds, labels, num_classes)};
}

// Trains one model on one fold of a raw [0,1] dataset. Z-score stats come
// from the fold's training split only; augmentation (when enabled) runs on
// the raw image before normalization. Early stopping watches validation
// loss; the best-epoch weights are restored at the end.
template <typename T>
TrainOutcome<T> train_model(Model<T>& model, const Dataset<T>& raw, const FoldIndices& fold,
                            const TrainConfig& tc, int fold_index = 0,
                            const AugmentPolicy* aug_policy = nullptr) {
    tc.validate();
    if (fold.train.empty() || fold.test.empty())
        throw ContractError("train_model: empty train or test split");

    Dataset<T> train_view;
    train_view.class_names = raw.class_names;
    for (std::size_t i : fold.train) {
        train_view.images.push_back(raw.images[i]);
        train_view.labels.push_back(raw.labels[i]);
    }
    const NormStats stats = fit_zscore(train_view);

    auto normalize_list = [&](const std::vector<std::size_t>& ids) {
        std::vector<Tensor<T>> out;
        for (std::size_t i : ids) out.push_back(apply_zscore_image(raw.images[i], stats));
        return out;
    };
    auto labels_of = [&](const std::vector<std::size_t>& ids) {
        std::vector<int> out;
        for (std::size_t i : ids) out.push_back(raw.labels[i]);
        return out;
    };
    const std::vector<Tensor<T>> train_imgs = normalize_list(fold.train);
    const std::vector<int> train_labels = labels_of(fold.train);
    const std::vector<Tensor<T>> val_imgs = normalize_list(fold.val);
    const std::vector<int> val_labels = labels_of(fold.val);
    const std::vector<Tensor<T>> test_imgs = normalize_list(fold.test);
    const std::vector<int> test_labels = labels_of(fold.test);

    FocalLossConfig flc{tc.focal_gamma, tc.focal_alpha};
    AdamWState<T> opt_state;
    ParamRegistry<T>& reg = model.registry();
    Rng shuffle_rng(tc.seed + 0x9E3779B9ULL * static_cast<unsigned long long>(fold_index + 1));

    TrainOutcome<T> out;
    out.norm_stats = stats;
    double best_val = std::numeric_limits<double>::infinity();
    std::vector<std::vector<T>> best_params, best_buffers;
    auto snapshot = [&] {
        best_params.clear();
        best_buffers.clear();
        for (auto& [n, p] : reg.params) best_params.push_back(p.values());
        for (auto& [n, p] : reg.buffers) best_buffers.push_back(p.values());
    };
    auto restore = [&] {
        for (std::size_t i = 0; i < reg.params.size(); ++i)
            reg.params[i].second.values() = best_params[i];
        for (std::size_t i = 0; i < reg.buffers.size(); ++i)
            reg.buffers[i].second.values() = best_buffers[i];
    };

    std::vector<std::size_t> order(train_imgs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 0; epoch < tc.max_epochs; ++epoch) {
        AdamWHyper hp{lr_at_epoch(tc.lr, tc.lr_gamma, epoch), tc.beta1, tc.beta2, tc.adam_eps,
                      tc.weight_decay};
        shuffle_rng.shuffle(order);
        for (std::size_t lo = 0; lo < order.size(); lo += static_cast<std::size_t>(tc.batch_size)) {
            const std::size_t hi =
                std::min(order.size(), lo + static_cast<std::size_t>(tc.batch_size));
            Tensor<T> batch;
            if (tc.augment && aug_policy) {
                std::vector<Tensor<T>> batch_imgs;
                std::vector<std::size_t> seq(hi - lo);
                for (std::size_t b = 0; b < seq.size(); ++b) {
                    const std::size_t sample = fold.train[order[lo + b]];
                    Rng arng = Rng::for_sample(
                        tc.seed + 0x51ED270BULL * static_cast<unsigned long long>(epoch + 1),
                        sample);
                    batch_imgs.push_back(apply_zscore_image(
                        augment(raw.images[sample], arng, *aug_policy), stats));
                    seq[b] = b;
                }
                batch = detail::make_batch(batch_imgs, seq, 0, seq.size());
            } else {
                std::vector<std::size_t> sel(order.begin() + static_cast<std::ptrdiff_t>(lo),
                                             order.begin() + static_cast<std::ptrdiff_t>(hi));
                batch = detail::make_batch(train_imgs, sel, 0, sel.size());
            }
            std::vector<int> targets;
            for (std::size_t b = lo; b < hi; ++b) targets.push_back(train_labels[order[b]]);

            Tape<T> tape;
            {
                typename Tape<T>::Scope scope(tape);
                Tensor<T> logits = model.forward(batch, /*training=*/true);
                Tensor<T> loss = focal_loss(logits, targets, flc);
                tape.backward(loss);
            }
            adamw_step(reg, opt_state, hp);
            reg.zero_grads();
            tape.reset();
        }
        ++out.epochs_run;

        const auto [val_loss, val_metrics] =
            val_imgs.empty()
                ? evaluate_model(model, train_imgs, train_labels, flc, tc.batch_size)
                : evaluate_model(model, val_imgs, val_labels, flc, tc.batch_size);
        out.val_loss_history.push_back(val_loss);
        if (val_loss < best_val) {
            best_val = val_loss;
            if (tc.restore_best) snapshot();
        }
        if (early_stop_check(out.val_loss_history, tc.patience)) {
            out.early_stopped = true;
            break;
        }
    }
    if (tc.restore_best && !best_params.empty()) restore();

    const auto [train_loss, train_metrics] =
        evaluate_model(model, train_imgs, train_labels, flc, tc.batch_size);
    out.train_accuracy = train_metrics.accuracy;
    const auto [test_loss, test_metrics] =
        evaluate_model(model, test_imgs, test_labels, flc, tc.batch_size);
    out.test_loss = test_loss;
    out.test_metrics = test_metrics;
    return out;
}

// ---- cross-validation driver -----------------------------------------------

template <typename T>
struct CvResult {
    std::vector<TrainOutcome<T>> outcomes;
    FoldSummary summary;
};

// Runs the first `limit_folds` folds of a k-fold protocol (all of them when
// limit_folds <= 0). Folds are independent; `jobs` > 1 trains them on
// separate threads without changing any per-fold result. The optional
// callback sees each fold's trained model (called in fold order).
template <typename T>
CvResult<T> run_cross_validation(
    const ModelConfig& mc, const TrainConfig& tc, const Dataset<T>& raw, int k,
    int limit_folds = 0, int jobs = 1, const AugmentPolicy* aug_policy = nullptr,
    const std::function<void(int, Model<T>&, const TrainOutcome<T>&)>& per_fold = {}) {
    raw.validate();
    const auto folds = kfold_split(raw.size(), k, tc.seed, raw.labels);
    const int run_n = limit_folds > 0 ? std::min(limit_folds, k) : k;

    CvResult<T> result;
    result.outcomes.resize(static_cast<std::size_t>(run_n));
    std::vector<std::unique_ptr<Model<T>>> models(static_cast<std::size_t>(run_n));

    auto run_fold = [&](int f) {
        models[static_cast<std::size_t>(f)] = std::make_unique<Model<T>>(mc, tc.seed);
        result.outcomes[static_cast<std::size_t>(f)] =
            train_model(*models[static_cast<std::size_t>(f)], raw,
                        folds[static_cast<std::size_t>(f)], tc, f, aug_policy);
    };

    if (jobs <= 1) {
        for (int f = 0; f < run_n; ++f) run_fold(f);
    } else {
        std::vector<std::thread> pool;
        std::atomic<int> next{0};
        for (int j = 0; j < std::min(jobs, run_n); ++j)
            pool.emplace_back([&] {
                for (int f = next.fetch_add(1); f < run_n; f = next.fetch_add(1)) run_fold(f);
            });
        for (auto& th : pool) th.join();
    }

    std::vector<MetricsReport> reports;
    for (int f = 0; f < run_n; ++f) {
        reports.push_back(result.outcomes[static_cast<std::size_t>(f)].test_metrics);
        if (per_fold) per_fold(f, *models[static_cast<std::size_t>(f)],
                               result.outcomes[static_cast<std::size_t>(f)]);
    }
    result.summary = aggregate_folds(reports);
    return result;
}

// ---- ablation ---------------------------------------------------------------

struct AblationRow {
    bool cascade_caa = true;
    bool caa = true;  // the CAA module itself is always present
    bool cga = true;
    long long params = 0;
    double mean_accuracy = 0.0;
};

// The three-row toggle grid: (cascading only), (CGA only), (both). Every
// variant trains from the same seed; parameter counts come from the closed
// form.
template <typename T>
std::vector<AblationRow> run_ablation(const ModelConfig& base_mc, const TrainConfig& tc,
                                      const Dataset<T>& raw, int k, int limit_folds = 0,
                                      int jobs = 1) {
    const std::vector<std::pair<bool, bool>> grid = {
        {true, false}, {false, true}, {true, true}};  // {cascade_dilations, cascade_heads}
    std::vector<AblationRow> rows;
    for (const auto& [cd, ch] : grid) {
        ModelConfig mc = base_mc;
        mc.caga.caa.cascade_dilations = cd;
        mc.caga.cascade_heads = ch;
        AblationRow row;
        row.cascade_caa = cd;
        row.cga = ch;
        row.params = caga_param_count(mc.caga, mc.stem_out_channels());
        auto cv = run_cross_validation<T>(mc, tc, raw, k, limit_folds, jobs);
        row.mean_accuracy = cv.summary.accuracy.mean;
        rows.push_back(row);
    }
    return rows;
}

// ---- CSV / table emission ----------------------------------------------------

namespace detail {

inline std::string fmt_g(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

} // namespace detail

inline std::string metrics_csv(const std::vector<MetricsReport>& folds) {
    if (folds.empty()) throw ContractError("metrics_csv: no folds");
    std::ostringstream os;
    os << "fold,accuracy,precision,recall,f1";
    for (std::size_t c = 0; c < folds[0].per_class_accuracy.size(); ++c)
        os << ",class_acc_" << c;
    os << "\n";
    for (std::size_t f = 0; f < folds.size(); ++f) {
        const auto& r = folds[f];
        os << f << "," << detail::fmt_g(r.accuracy) << "," << detail::fmt_g(r.macro_precision)
           << "," << detail::fmt_g(r.macro_recall) << "," << detail::fmt_g(r.macro_f1);
        for (double a : r.per_class_accuracy) os << "," << detail::fmt_g(a);
        os << "\n";
    }
    return os.str();
}

inline std::string summary_csv(const FoldSummary& s) {
    std::ostringstream os;
    os << "metric,mean,std\n";
    auto row = [&os](const std::string& name, const MeanStd& ms) {
        os << name << "," << detail::fmt_g(ms.mean) << "," << detail::fmt_g(ms.std) << "\n";
    };
    row("accuracy", s.accuracy);
    row("precision", s.precision);
    row("recall", s.recall);
    row("f1", s.f1);
    for (std::size_t c = 0; c < s.per_class_accuracy.size(); ++c)
        row("class_acc_" + std::to_string(c), s.per_class_accuracy[c]);
    return os.str();
}

inline std::string metrics_table(const FoldSummary& s) {
    char buf[256];
    std::ostringstream os;
    os << "metric       mean     +/- std\n";
    auto row = [&](const std::string& name, const MeanStd& ms) {
        std::snprintf(buf, sizeof(buf), "%-12s %.4f   %.4f\n", name.c_str(), ms.mean, ms.std);
        os << buf;
    };
    row("accuracy", s.accuracy);
    row("precision", s.precision);
    row("recall", s.recall);
    row("f1", s.f1);
    for (std::size_t c = 0; c < s.per_class_accuracy.size(); ++c)
        row("class_acc_" + std::to_string(c), s.per_class_accuracy[c]);
    return os.str();
}

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
    std::ostringstream os;
    os << "cascade_caa,caa,cga,params,mean_accuracy\n";
    for (const auto& r : rows)
        os << (r.cascade_caa ? 1 : 0) << "," << (r.caa ? 1 : 0) << "," << (r.cga ? 1 : 0) << ","
           << r.params << "," << detail::fmt_g(r.mean_accuracy) << "\n";
    return os.str();
}

} // namespace caga
